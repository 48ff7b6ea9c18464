use ddmpc_core::estimator::{
    approximation_error, build_sample, build_stack, dedup_samples, rank_check, solve_theta_ls, update_theta, DataStack, EstimatorState,
    UpdateGain,
};
use ddmpc_core::harness::suite::{excited_trajectory, random_stable_plant};
use ddmpc_core::harness::{cstr_scenario, Excitation};
use ddmpc_core::model::{regressor, LtiModel, Matrix, Vector};
use ddmpc_core::simulator::{run_closed_loop, step, window_integrals, Trajectory};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 0.01;

fn plant(seed: u64) -> (LtiModel, Trajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_stable_plant(&mut rng, 3, 2, 2, 0.5);
    let traj = excited_trajectory(&model, &mut rng, 5.0, H, 5).unwrap();
    (model, traj)
}

fn full_stack(traj: &Trajectory) -> DataStack {
    let t_k = traj.last().unwrap().t;
    build_stack(traj, t_k, H, traj.len() - 1).unwrap()
}

/// Exponential by scaling and squaring of a truncated series; independent of
/// the simulator's integrator.
fn expm(a: &Matrix) -> Matrix {
    let norm = a.abs().max();
    let s = (norm.log2().ceil().max(0.0) as i32) + 4;
    let scaled = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = Matrix::identity(n, n);
    let mut sum = Matrix::identity(n, n);
    for k in 1..30 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

#[test]
fn rk4_global_error_shrinks_fourth_order() {
    let (model, _) = plant(1);
    let x0 = Vector::from_column_slice(&[1.0, -0.5, 0.25]);
    let u = Vector::zeros(2);
    let exact = expm(&(model.a() * 1.0)) * &x0;
    let err = |h: f64| {
        let steps = (1.0 / h).round() as usize;
        let mut x = x0.clone();
        for k in 0..steps {
            x = step(&model, &x, &u, k as f64 * h, h).unwrap();
        }
        (x - &exact).norm()
    };
    let ratio = err(0.2) / err(0.1);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn scalar_step_matches_exponential() {
    let model = LtiModel::new(Matrix::from_element(1, 1, -1.0), Matrix::from_element(1, 1, 1.0), Matrix::identity(1, 1)).unwrap();
    let x = step(&model, &Vector::from_element(1, 1.0), &Vector::zeros(1), 0.0, 0.01).unwrap();
    assert!((x[0] - (-0.01f64).exp()).abs() < 1e-10);
}

#[test]
fn regression_identity_holds_on_simulated_windows() {
    let (model, traj) = plant(2);
    let theta = model.theta();
    for t in [0.005 * 2.0, 0.5, 1.37, 3.0, 5.0] {
        let s = build_sample(&traj, t, H).unwrap();
        let gap = (&s.f - &s.g * theta.values()).norm();
        assert!(gap <= 1e-6, "window at {t}: {gap:e}");
    }
}

#[test]
fn gram_equals_direct_sum() {
    let (_, traj) = plant(3);
    let stack = full_stack(&traj);
    let mut direct = Matrix::zeros(15, 15);
    for s in stack.samples() {
        direct += s.g.transpose() * &s.g;
    }
    let gap = (stack.gram() - &direct).norm() / direct.norm();
    assert!(gap < 1e-12, "{gap:e}");
    assert!(stack.min_eig() >= -1e-10);
}

#[test]
fn least_squares_recovers_random_plants() {
    let errors: Vec<f64> = (10..15)
        .map(|seed| {
            let (model, traj) = plant(seed);
            solve_theta_ls(&full_stack(&traj)).unwrap().relative_error(&model.theta())
        })
        .collect();
    assert!(errors.iter().all(|e| *e < 1e-5), "relative errors {errors:?}");
}

#[test]
fn dedup_leaves_least_squares_unchanged() {
    let (_, traj) = plant(4);
    let stack = full_stack(&traj);
    let mut doubled: Vec<_> = stack.samples().to_vec();
    doubled.extend(stack.samples()[..50].iter().cloned());
    let with_dups = DataStack::from_samples(doubled, 3, 2).unwrap();
    let deduped = dedup_samples(&with_dups, 0.0);
    assert_eq!(deduped.len(), stack.len());
    let a = solve_theta_ls(&stack).unwrap();
    let b = solve_theta_ls(&deduped).unwrap();
    assert!(a.relative_error(&b) < 1e-12);
}

#[test]
fn single_sample_fails_rank_check() {
    let (_, traj) = plant(5);
    let stack = build_stack(&traj, 1.0, H, 0).unwrap();
    assert_eq!(stack.len(), 1);
    assert!(!rank_check(&stack, 0.0));
}

#[test]
fn window_integrals_are_exact_on_ramps() {
    let model = LtiModel::new(Matrix::zeros(1, 1), Matrix::identity(1, 1), Matrix::identity(1, 1)).unwrap();
    let mut traj = Trajectory::new(H).unwrap();
    let mut x = Vector::zeros(1);
    let u = Vector::from_element(1, 1.0);
    for k in 0..=100 {
        let t = k as f64 * H;
        traj.push(ddmpc_core::simulator::Sample {
            t,
            x: x.clone(),
            u: u.clone(),
            y: x.clone(),
            y_d: Vector::zeros(1),
            stage_cost: 0.0,
        })
        .unwrap();
        x = step(&model, &x, &u, t, H).unwrap();
    }
    let (ix, iu) = window_integrals(&traj, 1.0, 1.0).unwrap();
    assert!((ix[0] - 0.5).abs() < 1e-14);
    assert!((iu[0] - 1.0).abs() < 1e-14);
}

#[test]
fn cstr_stack_at_learning_start() {
    let mut sc = cstr_scenario();
    sc.duration = 2.0 + sc.config.horizon;
    let run = run_closed_loop(&sc).unwrap();
    let first = &run.estimator_events[0];
    assert_eq!(first.t, 2.0);
    assert_eq!(first.stack_len, 200);
    assert!(first.rank_ok);
    assert!(first.min_eig > sc.config.d_lower);
}

#[test]
fn cstr_error_and_model_mismatch_decrease() {
    let mut sc = cstr_scenario();
    sc.duration = 4.0;
    let run = run_closed_loop(&sc).unwrap();
    let errors: Vec<f64> = run.updates().map(|e| e.parameter_error).collect();
    assert!(errors.len() >= 10);
    assert!(errors[..10].windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    let truth = sc.model.theta();
    let samples = run.trajectory.samples();
    let w_norm = |iteration: usize| {
        let est = run.estimate_at(iteration).unwrap();
        samples
            .iter()
            .map(|s| approximation_error(est, &truth, &s.x, &s.u).unwrap().norm())
            .fold(0.0, f64::max)
    };
    // ‖w‖ ≤ ‖𝓗‖ ‖Θ̂ − Θ‖ at every logged point.
    let est = run.estimate_at(3).unwrap();
    for s in samples.iter().step_by(37) {
        let w = approximation_error(est, &truth, &s.x, &s.u).unwrap().norm();
        let bound = regressor(&s.x, &s.u).norm() * (est.values() - truth.values()).norm();
        assert!(w <= bound * (1.0 + 1e-12) + 1e-300);
    }
    let series: Vec<f64> = (1..=6).map(w_norm).collect();
    assert!(series.windows(2).all(|w| w[1] < w[0]), "{series:?}");
}

#[test]
fn no_excitation_from_rest_never_passes_rank() {
    let mut sc = cstr_scenario();
    sc.excitation = Excitation::none();
    sc.reference = ddmpc_core::simulator::ReferenceSignal::constant(&[0.0, 0.0]);
    assert!(matches!(run_closed_loop(&sc), Err(ddmpc_core::Error::RankNeverAchieved { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn residual_is_non_increasing_under_contractive_rates(seed in 0u64..1000, frac in 0.05f64..1.9) {
        let (_, traj) = plant(seed);
        let stack = full_stack(&traj);
        let mut state = EstimatorState::new(3, 2, frac / stack.max_eig(), UpdateGain::Gradient).unwrap();
        let mut prev = stack.residual(&state.theta_hat);
        for _ in 0..40 {
            state = update_theta(&state, &stack, 1).unwrap();
            prop_assert!(state.contraction_ok);
            prop_assert!(state.residual <= prev * (1.0 + 1e-12));
            prev = state.residual;
        }
    }

    #[test]
    fn normalized_updates_approach_least_squares(seed in 0u64..1000, eta in 0.1f64..1.0) {
        let (_, traj) = plant(seed);
        let stack = full_stack(&traj);
        let ls = solve_theta_ls(&stack).unwrap();
        let state = EstimatorState::new(3, 2, eta, UpdateGain::Normalized).unwrap();
        let mut prev = state.theta_hat.relative_error(&ls);
        let mut cur = state;
        for _ in 0..5 {
            cur = update_theta(&cur, &stack, 1).unwrap();
            let e = cur.theta_hat.relative_error(&ls);
            prop_assert!(e <= prev * (1.0 - eta) * (1.0 + 1e-6) + 1e-12);
            prev = e;
        }
    }

    #[test]
    fn window_integrals_are_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let (_, traj) = plant(seed);
        let scaled = Trajectory::from_samples(
            H,
            traj.samples()
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.x *= alpha;
                    s.u *= alpha;
                    s
                })
                .collect(),
        )
        .unwrap();
        let (ix, iu) = window_integrals(&traj, 2.5, 0.1).unwrap();
        let (sx, su) = window_integrals(&scaled, 2.5, 0.1).unwrap();
        prop_assert!((sx - ix * alpha).norm() <= 1e-12 * (1.0 + alpha.abs()));
        prop_assert!((su - iu * alpha).norm() <= 1e-12 * (1.0 + alpha.abs()));
    }
}
