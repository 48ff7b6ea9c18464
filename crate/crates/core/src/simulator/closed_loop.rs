use serde::{Deserialize, Serialize};

use super::{output, same_time, step, steps_in, Sample, Trajectory};
use crate::controller::{constrain, mpc_step, stage_cost, SolveReport, SolveSource, StepContext};
use crate::error::{Error, Result};
use crate::estimator::{build_stack, dedup_samples, rank_check, update_theta, EstimatorState};
use crate::harness::{Dither, Scenario};
use crate::model::{ThetaVector, Vector};

/// Estimator activity at one decision instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEvent {
    pub t: f64,
    /// Iteration count after this event; unchanged when no update ran.
    pub iteration: usize,
    pub rank_ok: bool,
    pub min_eig: f64,
    pub max_eig: f64,
    pub stack_len: usize,
    pub residual: f64,
    /// Relative error of the estimate against the simulated plant.
    pub parameter_error: f64,
    pub theta_hat: ThetaVector,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub solves: Vec<SolveReport>,
    pub estimator_events: Vec<EstimatorEvent>,
    pub fallback_count: usize,
    /// First time the excitation condition passed.
    pub rank_passed_at: Option<f64>,
}

impl RunOutput {
    /// Events in which the estimate moved, in order.
    pub fn updates(&self) -> impl Iterator<Item = &EstimatorEvent> {
        let mut last = 0;
        self.estimator_events.iter().filter(move |e| {
            let moved = e.iteration > last;
            last = e.iteration;
            moved
        })
    }

    /// Estimate right after the given iteration, if it was reached.
    pub fn estimate_at(&self, iteration: usize) -> Option<&ThetaVector> {
        self.estimator_events
            .iter()
            .find(|e| e.iteration == iteration)
            .map(|e| &e.theta_hat)
    }
}

/// Simulates the scenario: initial gain plus dither until learning starts,
/// then at every re-solve instant an estimator update on the sliding data
/// stack followed by a receding-horizon solve, with the input held between
/// solves.
pub fn run_closed_loop(scenario: &Scenario) -> Result<RunOutput> {
    scenario.validate()?;
    let model = &scenario.model;
    let cfg = &scenario.config;
    let h = scenario.sim_step;
    let steps = steps_in(scenario.duration, h).ok_or_else(|| Error::InvalidScenario("duration is not a multiple of sim_step".into()))?;
    let resolve_every = steps_in(cfg.resolve_interval, h).unwrap_or(1);
    let learn_k = if cfg.learning_start > 0.0 {
        steps_in(cfg.learning_start, h).unwrap_or(0)
    } else {
        0
    };
    let truth = model.theta();
    let dither = Dither::new(&scenario.excitation, &cfg.bounds, scenario.seed);

    let mut traj = Trajectory::new(h)?;
    let mut x = scenario.initial_state();
    let mut u = Vector::zeros(model.m());
    let mut state = EstimatorState::new(model.n(), model.m(), cfg.eta_theta, cfg.update_gain)?;
    let mut learned = false;
    let mut previous: Option<Vector> = None;
    let mut out = RunOutput {
        trajectory: Trajectory::new(h)?,
        solves: Vec::new(),
        estimator_events: Vec::new(),
        fallback_count: 0,
        rank_passed_at: None,
    };

    for k in 0..=steps {
        let t = k as f64 * h;
        let y = output(model, &x);
        let y_d = scenario.reference.at(t);
        traj.push(Sample {
            t,
            x: x.clone(),
            u: u.clone(),
            y: y.clone(),
            y_d: y_d.clone(),
            stage_cost: 0.0,
        })?;

        let excite = |x: &Vector| constrain(&(-&cfg.k0 * x + dither.at(t)), &cfg.bounds, cfg.constraint_mode).0;
        if !scenario.learning || k < learn_k {
            u = excite(&x);
        } else if (k - learn_k) % resolve_every == 0 {
            let stack = match build_stack(&traj, t, cfg.delta_t, cfg.n_k) {
                Ok(s) => Some(s),
                Err(Error::InsufficientData { .. }) => None,
                Err(e) => return Err(e),
            };
            let stack = stack.map(|s| match cfg.dedup_tol {
                Some(tol) => dedup_samples(&s, tol),
                None => s,
            });
            let mut rank_ok = stack.as_ref().is_some_and(|s| rank_check(s, cfg.d_lower));
            log::debug!(
                "t = {t:.4}: λ_min = {:.3e}, excitation {}",
                stack.as_ref().map_or(0.0, |s| s.min_eig()),
                if rank_ok { "ok" } else { "insufficient" }
            );
            if rank_ok {
                let stack = stack.as_ref().expect("rank passed on an existing stack");
                match update_theta(&state, stack, cfg.updates_per_solve) {
                    Ok(next) => state = next,
                    // Passed the eigenvalue gate but too close to singular to factor.
                    Err(Error::NonIdentifiable { min_eig }) => {
                        log::warn!("t = {t:.4}: gram not factorizable (λ_min = {min_eig:.3e}), skipping update");
                        rank_ok = false;
                    }
                    Err(e) => return Err(e),
                }
            }
            if rank_ok {
                if !state.contraction_ok {
                    return Err(Error::EstimatorDivergence {
                        iteration: state.iteration,
                        eta: cfg.eta_theta,
                    });
                }
                if !learned {
                    out.rank_passed_at = Some(t);
                }
                learned = true;
            } else if !learned {
                if let Some(deadline) = cfg.rank_deadline {
                    if t > deadline && !same_time(t, deadline) {
                        return Err(Error::RankNeverAchieved { deadline });
                    }
                }
            }
            out.estimator_events.push(EstimatorEvent {
                t,
                iteration: state.iteration,
                rank_ok,
                min_eig: stack.as_ref().map_or(0.0, |s| s.min_eig()),
                max_eig: stack.as_ref().map_or(0.0, |s| s.max_eig()),
                stack_len: stack.as_ref().map_or(0, |s| s.len()),
                residual: state.residual,
                parameter_error: state.theta_hat.relative_error(&truth),
                theta_hat: state.theta_hat.clone(),
            });

            let ctx = StepContext {
                config: cfg,
                c: model.c(),
                reference: &scenario.reference,
                previous: previous.as_ref(),
            };
            let mut report = mpc_step(&x, t, learned.then_some(&state), &ctx)?;
            if report.source == SolveSource::Initial {
                report.u_applied = excite(&x);
            }
            if report.fallback() {
                out.fallback_count += 1;
            }
            log::debug!("t = {t:.4}: {:?} u = {:?}, cond = {:.3e}", report.source, report.u_applied.as_slice(), report.m_condition);
            u = report.u_applied.clone();
            previous = Some(u.clone());
            out.solves.push(report);
        }

        let cost = stage_cost(&(&y - &y_d), &u, &cfg.q, &cfg.r);
        traj.set_last_input(u.clone(), cost);
        if k < steps {
            x = step(model, &x, &u, t, h)?;
        }
    }

    out.trajectory = traj;
    Ok(out)
}
