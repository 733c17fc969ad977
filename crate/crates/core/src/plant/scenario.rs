//! Scenario and dataset descriptions, their TOML file format, and the
//! compact schedule notation used for scripted inputs.
//!
//! A scripted schedule is a whitespace-separated list of `heater/fan`
//! tokens with an optional `*count` repeat, e.g. `0.10/0*4 0.05/1`.

use serde::{Deserialize, Serialize};

use super::{mix_seed, AmbientProfile, ExcitationSpec, PlantError};
use crate::types::{quantize_control, ControlInput};

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Scripted(Vec<ControlInput>),
    Excitation(ExcitationSpec),
}

impl Schedule {
    pub fn parse_scripted(text: &str) -> Result<Self, PlantError> {
        parse_schedule(text).map(Schedule::Scripted)
    }
}

/// Everything needed to simulate one recorded time series.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub ambient: AmbientProfile,
    pub initial_temp: f64,
    pub seed: u64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Interpolation,
    Extrapolation,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Interpolation => "interpolation",
            ScenarioKind::Extrapolation => "extrapolation",
        })
    }
}

/// A model-evaluation scenario: which training set the models learn from
/// and the scripted test series they are rolled out on.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub train_set: String,
    pub train_range: (f64, f64),
    pub test_range: (f64, f64),
    pub test: DatasetSpec,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, PlantError> {
        let raw: RawScenario =
            toml::from_str(text).map_err(|e| PlantError::Parse(e.to_string()))?;
        let spec = ScenarioSpec {
            test: raw.test.into_dataset(&raw.name)?,
            name: raw.name,
            kind: raw.kind,
            train_set: raw.train_set,
            train_range: raw.train_range,
            test_range: raw.test_range,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        for (what, (lo, hi)) in [
            ("train_range", self.train_range),
            ("test_range", self.test_range),
        ] {
            if !(lo < hi) {
                return Err(PlantError::Parse(format!(
                    "{what} [{lo}, {hi}] is not ordered"
                )));
            }
        }
        let inside =
            self.test_range.0 >= self.train_range.0 && self.test_range.1 <= self.train_range.1;
        let expected = if inside {
            ScenarioKind::Interpolation
        } else {
            ScenarioKind::Extrapolation
        };
        if self.kind != expected {
            return Err(PlantError::Parse(format!(
                "{}: kind {} but test range {:?} vs train range {:?} implies {expected}",
                self.name, self.kind, self.test_range, self.train_range
            )));
        }
        Ok(())
    }
}

/// A family of training series recorded under one operating band.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSetSpec {
    pub name: String,
    pub range: (f64, f64),
    pub series: usize,
    pub seed: u64,
    pub initial_temp: f64,
    pub ambient: AmbientProfile,
    pub excitation: ExcitationSpec,
}

impl TrainingSetSpec {
    pub fn from_toml(text: &str) -> Result<Self, PlantError> {
        let raw: RawTrainingSet =
            toml::from_str(text).map_err(|e| PlantError::Parse(e.to_string()))?;
        if !(raw.range.0 < raw.range.1) || raw.series == 0 {
            return Err(PlantError::Parse(format!(
                "{}: bad range or zero series",
                raw.name
            )));
        }
        Ok(Self {
            name: raw.name,
            range: raw.range,
            series: raw.series,
            seed: raw.seed,
            initial_temp: raw.initial_temp,
            ambient: raw.ambient,
            excitation: raw.excitation,
        })
    }

    /// One dataset per series; sinusoidal ambients are phase-shifted so the
    /// series see different parts of the daily swing.
    pub fn datasets(&self) -> Vec<DatasetSpec> {
        (0..self.series)
            .map(|i| {
                let ambient = match self.ambient {
                    AmbientProfile::Sinusoid {
                        mean,
                        amplitude,
                        period_s,
                        phase_s,
                    } => AmbientProfile::Sinusoid {
                        mean,
                        amplitude,
                        period_s,
                        phase_s: phase_s + period_s * i as f64 / self.series as f64,
                    },
                    c => c,
                };
                DatasetSpec {
                    name: format!("{}-{:02}", self.name, i + 1),
                    ambient,
                    initial_temp: self.initial_temp,
                    seed: mix_seed(self.seed, i as u64),
                    schedule: Schedule::Excitation(self.excitation),
                }
            })
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    kind: ScenarioKind,
    train_set: String,
    train_range: (f64, f64),
    test_range: (f64, f64),
    test: RawDataset,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    ambient: AmbientProfile,
    initial_temp: f64,
    seed: u64,
    #[serde(default)]
    schedule: Option<String>,
    #[serde(default)]
    excitation: Option<ExcitationSpec>,
}

impl RawDataset {
    fn into_dataset(self, scenario: &str) -> Result<DatasetSpec, PlantError> {
        let schedule = match (self.schedule, self.excitation) {
            (Some(text), None) => Schedule::parse_scripted(&text)?,
            (None, Some(exc)) => Schedule::Excitation(exc),
            _ => {
                return Err(PlantError::Parse(format!(
                    "{scenario}: exactly one of `schedule` or `excitation` is required"
                )))
            }
        };
        Ok(DatasetSpec {
            name: self.name.unwrap_or_else(|| format!("{scenario}-test")),
            ambient: self.ambient,
            initial_temp: self.initial_temp,
            seed: self.seed,
            schedule,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrainingSet {
    name: String,
    range: (f64, f64),
    series: usize,
    seed: u64,
    initial_temp: f64,
    #[serde(default)]
    ambient: AmbientProfile,
    excitation: ExcitationSpec,
}

/// Parses the `heater/fan[*count]` notation.
pub fn parse_schedule(text: &str) -> Result<Vec<ControlInput>, PlantError> {
    let mut out = Vec::new();
    for token in text.split_whitespace() {
        let bad = || PlantError::Parse(format!("bad schedule token `{token}`"));
        let (pair, count) = match token.split_once('*') {
            Some((p, c)) => (p, c.parse::<usize>().map_err(|_| bad())?),
            None => (token, 1),
        };
        let (h, f) = pair.split_once('/').ok_or_else(bad)?;
        let h: f64 = h.parse().map_err(|_| bad())?;
        let f: f64 = f.parse().map_err(|_| bad())?;
        if !(0.0..=1.0).contains(&h) || !(f == 0.0 || f == 1.0) {
            return Err(bad());
        }
        let u = quantize_control(h, f)?;
        if (u.heater_duty() - h).abs() > 1e-9 {
            return Err(bad());
        }
        out.extend(std::iter::repeat(u).take(count));
    }
    if out.is_empty() {
        return Err(PlantError::EmptySchedule);
    }
    Ok(out)
}

/// Run-length encodes controls into the schedule notation.
pub fn format_schedule(controls: &[ControlInput]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < controls.len() {
        let u = controls[i];
        let run = controls[i..].iter().take_while(|&&v| v == u).count();
        let token = format!("{:.2}/{}", u.heater_duty(), u8::from(u.fan_on()));
        parts.push(if run > 1 {
            format!("{token}*{run}")
        } else {
            token
        });
        i += run;
    }
    parts.join(" ")
}

const SCENARIO_FILES: [&str; 6] = [
    include_str!("../../scenarios/scenario-1.toml"),
    include_str!("../../scenarios/scenario-2.toml"),
    include_str!("../../scenarios/scenario-3.toml"),
    include_str!("../../scenarios/scenario-4.toml"),
    include_str!("../../scenarios/scenario-5.toml"),
    include_str!("../../scenarios/scenario-6.toml"),
];

const TRAINING_FILES: [&str; 2] = [
    include_str!("../../scenarios/train-wide.toml"),
    include_str!("../../scenarios/train-narrow.toml"),
];

/// The six shipped evaluation scenarios, in order.
pub fn builtin_scenarios() -> Vec<ScenarioSpec> {
    SCENARIO_FILES
        .iter()
        .map(|t| ScenarioSpec::from_toml(t).expect("shipped scenario files parse"))
        .collect()
}

/// The shipped training sets (`wide` and `narrow`).
pub fn builtin_training_sets() -> Vec<TrainingSetSpec> {
    TRAINING_FILES
        .iter()
        .map(|t| TrainingSetSpec::from_toml(t).expect("shipped training-set files parse"))
        .collect()
}
