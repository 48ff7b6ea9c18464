//! The two-reactor benchmark, scenario files and the acceptance runner.

mod report;
mod scenario;
pub mod suite;

pub use report::{run_acceptance, AcceptanceReport, CriterionResult, Evaluation, ParamPoint, TrackingWindow};
pub use scenario::{Dither, Excitation, Scenario};

use nalgebra::dmatrix;

use crate::controller::{ConstraintMode, ControllerConfig, RelativeDegree};
use crate::estimator::UpdateGain;
use crate::model::{InputBounds, LtiModel, Matrix, Vector};
use crate::simulator::{ReferencePiece, ReferenceSignal};

/// Output scaling of the measured reactor temperatures.
pub const CSTR_OUTPUT_GAIN: f64 = 362.995;

/// Six-state, two-input reactor pair; outputs are the scaled states 2 and 4.
pub fn cstr_model() -> LtiModel {
    let a = dmatrix![
        -17.98, -295.866, 0.0, 0.0, 0.0, 0.0;
        0.0207, 0.1889, 0.0704, 0.0, 0.0, 0.0;
        0.0, 0.3879, 0.8000, 0.0, 0.0, 0.0;
        0.0977, 0.0, 0.0, -18.01, -295.87, 0.0;
        0.0, 0.0617, 0.0, 0.0131, 0.0433, 0.0589;
        0.0, 0.0, 0.0, 0.0, 0.3787, -0.622
    ];
    let b = dmatrix![
        17.8996, -13.781;
        -0.0131, 0.0101;
        0.0, 0.0;
        17.8636, 17.8636;
        0.0082, 0.0082;
        0.0, 0.0
    ];
    let mut c = Matrix::zeros(2, 6);
    c[(0, 1)] = CSTR_OUTPUT_GAIN;
    c[(1, 3)] = CSTR_OUTPUT_GAIN;
    LtiModel::new(a, b, c).expect("benchmark dimensions are consistent")
}

/// The published initial gain. It does not stabilize [`cstr_model`]
/// (`A − B K` keeps eigenvalues near 46.7 and 0.79), so the benchmark uses
/// [`cstr_initial_gain`] instead.
pub fn cstr_published_gain() -> Matrix {
    dmatrix![
        -4.8949, -3426.8, -158.1712, -0.0320, -43.7963, -1.4675;
        0.1, 0.0, 86.2934, 1.1730, 2.3886, 104.8756
    ]
}

/// LQR gain for `Q = I₆`, `R = I₂` on [`cstr_model`]; closed-loop
/// eigenvalues are about −31.4, −28.1, −0.83, −0.66, −0.18 and −0.13.
pub fn cstr_initial_gain() -> Matrix {
    dmatrix![
        0.607037926908775, 239.09087095946578, 563.4563251188133, 0.3534156772377936, 6.8786860053642, 0.6899119792139967;
        -0.5035548380133652, -204.73866275652261, -493.06682225409503, 0.3739503805077264, 8.556502715314462, 0.9338856341450461
    ]
}

pub fn cstr_reference() -> ReferenceSignal {
    ReferenceSignal::new(vec![
        ReferencePiece {
            t_start: 0.0,
            value: vec![10.0, 10.0],
        },
        ReferencePiece {
            t_start: 5.0,
            value: vec![7.0, 4.0],
        },
    ])
    .expect("benchmark reference is well formed")
}

pub fn cstr_config() -> ControllerConfig {
    ControllerConfig {
        horizon: 1.0,
        control_order: None,
        relative_degree: RelativeDegree::Auto,
        q: Matrix::from_diagonal(&Vector::from_column_slice(&[100.0, 100.0])),
        r: Matrix::identity(2, 2),
        resolve_interval: 0.1,
        learning_start: 2.0,
        bounds: InputBounds::symmetric(&[80.0, 70.0]).expect("benchmark bounds are valid"),
        constraint_mode: ConstraintMode::Saturate,
        k0: cstr_initial_gain(),
        eta_theta: 0.85,
        delta_t: 0.01,
        n_k: 199,
        d_lower: 1e-14,
        update_gain: UpdateGain::Normalized,
        updates_per_solve: 1,
        dedup_tol: None,
        terminal_weight: None,
        rank_deadline: Some(5.0),
    }
}

/// Benchmark run: origin start, dithered initial gain until 2 s, then learning
/// and re-solving every 0.1 s over a 1 s horizon until 10 s.
pub fn cstr_scenario() -> Scenario {
    Scenario {
        model: cstr_model(),
        config: cstr_config(),
        reference: cstr_reference(),
        duration: 10.0,
        sim_step: 0.01,
        seed: 7,
        initial_state: None,
        excitation: Excitation::default(),
        learning: true,
    }
}
