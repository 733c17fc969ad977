use serde::{Deserialize, Serialize};

use super::ControlError;

/// Reference temperature as a function of time, °C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceProfile {
    Constant {
        value: f64,
    },
    /// Linear from `start` to `end` over `duration_s`, then held.
    Ramp {
        start: f64,
        end: f64,
        duration_s: f64,
    },
    /// Holds each level for `hold_s`; consecutive levels are joined by a
    /// linear ramp of `ramp_s` at the start of each hold.
    Staircase {
        levels: Vec<f64>,
        hold_s: f64,
        ramp_s: f64,
    },
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period_s: f64,
    },
}

impl ReferenceProfile {
    pub const PRESETS: [&'static str; 4] = ["constant", "ramp", "staircase", "sinusoid"];

    /// Named profiles over a four-hour episode inside the training range.
    pub fn preset(name: &str) -> Result<Self, ControlError> {
        Ok(match name {
            "constant" => ReferenceProfile::Constant { value: 28.0 },
            "ramp" => ReferenceProfile::Ramp {
                start: 25.0,
                end: 32.0,
                duration_s: 3.0 * 3600.0,
            },
            "staircase" => ReferenceProfile::Staircase {
                levels: vec![26.0, 28.0, 30.0, 28.0],
                hold_s: 3600.0,
                ramp_s: 600.0,
            },
            "sinusoid" => ReferenceProfile::Sinusoid {
                mean: 28.0,
                amplitude: 2.5,
                period_s: 7200.0,
            },
            other => {
                return Err(ControlError::Config(format!(
                    "unknown reference profile {other:?} (expected one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::Config(m.to_string()));
        match self {
            ReferenceProfile::Ramp { duration_s, .. } if !(*duration_s > 0.0) => {
                bad("ramp duration_s must be > 0")
            }
            ReferenceProfile::Staircase { levels, .. } if levels.is_empty() => {
                bad("staircase needs at least one level")
            }
            ReferenceProfile::Staircase { hold_s, ramp_s, .. }
                if !(*hold_s > 0.0) || !(0.0..=*hold_s).contains(ramp_s) =>
            {
                bad("staircase needs hold_s > 0 and 0 <= ramp_s <= hold_s")
            }
            ReferenceProfile::Sinusoid { period_s, .. } if !(*period_s > 0.0) => {
                bad("sinusoid period_s must be > 0")
            }
            _ => Ok(()),
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            ReferenceProfile::Constant { value } => *value,
            ReferenceProfile::Ramp {
                start,
                end,
                duration_s,
            } => {
                let f = (t / duration_s).clamp(0.0, 1.0);
                start + (end - start) * f
            }
            ReferenceProfile::Staircase {
                levels,
                hold_s,
                ramp_s,
            } => {
                let i = ((t / hold_s).floor().max(0.0) as usize).min(levels.len() - 1);
                let into = t - i as f64 * hold_s;
                if i == 0 || *ramp_s == 0.0 || into >= *ramp_s {
                    levels[i]
                } else {
                    levels[i - 1] + (levels[i] - levels[i - 1]) * into / ramp_s
                }
            }
            ReferenceProfile::Sinusoid {
                mean,
                amplitude,
                period_s,
            } => mean + amplitude * (std::f64::consts::TAU * t / period_s).sin(),
        }
    }
}
