//! Scenario files and validation.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::model::{InputBounds, LtiModel, Vector};
use crate::simulator::{steps_in, ReferenceSignal};

fn default_true() -> bool {
    true
}

/// Seeded sum-of-sinusoids dither added to the input before learning starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Excitation {
    /// Peak amplitude as a fraction of the smaller bound magnitude per channel;
    /// zero disables the dither.
    pub amplitude: f64,
    pub components: usize,
    /// Frequency band in Hz.
    pub min_freq: f64,
    pub max_freq: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self {
            amplitude: 0.01,
            components: 4,
            min_freq: 0.5,
            max_freq: 6.0,
        }
    }
}

impl Excitation {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            ..Self::default()
        }
    }
}

/// Realized dither signal.
#[derive(Debug, Clone)]
pub struct Dither {
    amplitude: Vec<f64>,
    /// Per channel: `(frequency Hz, phase rad)`.
    tones: Vec<Vec<(f64, f64)>>,
}

impl Dither {
    pub fn new(excitation: &Excitation, bounds: &InputBounds, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = bounds.dim();
        let amplitude = (0..m)
            .map(|i| excitation.amplitude * bounds.lower()[i].abs().min(bounds.upper()[i]))
            .collect();
        let tones = (0..m)
            .map(|_| {
                (0..excitation.components)
                    .map(|_| {
                        let f = rng.gen_range(excitation.min_freq..=excitation.max_freq);
                        (f, rng.gen_range(0.0..TAU))
                    })
                    .collect()
            })
            .collect();
        Self { amplitude, tones }
    }

    /// `|d_i(t)|` never exceeds the channel amplitude.
    pub fn at(&self, t: f64) -> Vector {
        Vector::from_fn(self.amplitude.len(), |i, _| {
            let tones = &self.tones[i];
            if tones.is_empty() || self.amplitude[i] == 0.0 {
                return 0.0;
            }
            let sum: f64 = tones.iter().map(|(f, p)| (TAU * f * t + p).sin()).sum();
            self.amplitude[i] * sum / tones.len() as f64
        })
    }
}

/// A complete closed-loop experiment. The model is the ground truth; the
/// controller sees only its output map and the logged data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: LtiModel,
    pub config: ControllerConfig,
    pub reference: ReferenceSignal,
    pub duration: f64,
    pub sim_step: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub excitation: Excitation,
    /// When false, `u = −K₀ x` (plus dither) is applied for the whole run.
    #[serde(default = "default_true")]
    pub learning: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        let (n, m, q) = (self.model.n(), self.model.m(), self.model.q());
        let h = self.sim_step;
        if !(h > 0.0) || !h.is_finite() {
            return bad(format!("sim_step must be positive, got {h}"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        self.config.validate(n, m, q)?;
        let cfg = &self.config;
        if self.learning && self.duration < cfg.learning_start + cfg.horizon - 1e-9 {
            return bad(format!(
                "duration {} is shorter than learning_start + horizon = {}",
                self.duration,
                cfg.learning_start + cfg.horizon
            ));
        }
        let mut grid = vec![
            ("duration", self.duration),
            ("delta_t", cfg.delta_t),
            ("resolve_interval", cfg.resolve_interval),
        ];
        if cfg.learning_start > 0.0 {
            grid.push(("learning_start", cfg.learning_start));
        }
        for t in self.reference.switch_times() {
            grid.push(("reference switch time", t));
        }
        for (name, v) in grid {
            if steps_in(v, h).is_none() {
                return bad(format!("sim_step {h} does not divide {name} = {v}"));
            }
        }
        if self.reference.dim() != q {
            return Err(Error::dims("reference", q, self.reference.dim()));
        }
        if let Some(x0) = &self.initial_state {
            if x0.len() != n {
                return Err(Error::dims("initial_state", n, x0.len()));
            }
        }
        let ex = &self.excitation;
        if !(0.0..=1.0).contains(&ex.amplitude) || !(ex.min_freq > 0.0) || ex.max_freq < ex.min_freq {
            return bad("excitation needs 0 ≤ amplitude ≤ 1 and 0 < min_freq ≤ max_freq".into());
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Vector {
        match &self.initial_state {
            Some(v) => Vector::from_column_slice(v),
            None => Vector::zeros(self.model.n()),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    /// Loads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}
