//! Reference-tracking controllers behind one contract, reference profiles
//! and the sense, decide, actuate loop that runs them against a plant.

pub mod llm;
pub mod mpc;
pub mod reference;
pub mod rl;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ModelError;
use crate::nnet::NnetError;
use crate::plant::{Plant, PlantError};
use crate::types::{ControlInput, CoreError, Sample, ThermalState};

pub use llm::{
    parse_reply, ChatBackend, ChatRequest, HistoryRecord, HistoryStore, HttpBackend,
    HttpBackendConfig, LlmController, LlmControllerConfig, LlmVariant, MockBackend, ParsedReply,
};
pub use mpc::{MpcConfig, MpcController, MpcSolution, Rounding};
pub use reference::ReferenceProfile;
pub use rl::{
    reward, train_dqn, DqnAgent, DqnReport, Environment, PlantEnv, RewardWeights, RlConfig,
    TrivialEnv, TwinEnv, ACTIONS,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("history has {got} samples but the controller needs {need}")]
    ShortHistory { got: usize, need: usize },
    #[error("Q-values diverged at step {step} (max |Q| = {max_abs_q:.3e})")]
    Diverged { step: usize, max_abs_q: f64 },
    #[error("backend request timed out after {0} s")]
    Timeout(u64),
    #[error("backend: {0}")]
    Backend(String),
    #[error("unparseable reply after retry: {0:?}")]
    Parse(String),
    #[error("io: {0}")]
    Io(String),
}

/// What a controller sees at one decision instant.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub time: f64,
    pub measured: ThermalState,
    pub reference: f64,
    /// Past sensor readings, oldest first, ending with `measured`. Each
    /// sample's control is the one applied after it; the last is a placeholder.
    pub history: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub control: ControlInput,
    /// Controller-specific figure of merit: optimal cost for MPC, greedy
    /// Q-value for DQN, none for the language controllers.
    pub score: Option<f64>,
    pub rationale: String,
}

pub trait Controller {
    fn name(&self) -> String;

    /// Smallest history the controller can act on.
    fn lookback(&self) -> usize {
        1
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<Decision, ControlError>;

    /// Clears per-episode state.
    fn reset(&mut self) {}
}

/// One row of episode telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub t_ref: f64,
    pub t_meas: f64,
    pub heater_duty: f64,
    pub fan_on: u8,
    pub reward_or_cost: Option<f64>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub controller: String,
    pub rows: Vec<TelemetryRow>,
    /// Noise-free inside temperature at each decision instant.
    pub true_temps: Vec<f64>,
    /// Set when the controller failed; the rows up to that step are kept.
    pub aborted: Option<String>,
}

impl Episode {
    /// Mean absolute error between the reference and the sensor reading.
    pub fn mae(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows
            .iter()
            .map(|r| (r.t_meas - r.t_ref).abs())
            .sum::<f64>()
            / self.rows.len() as f64
    }

    /// Same error against the noise-free temperature.
    pub fn true_mae(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows
            .iter()
            .zip(&self.true_temps)
            .map(|(r, t)| (t - r.t_ref).abs())
            .sum::<f64>()
            / self.rows.len() as f64
    }

    /// Sum of heater duty plus sum of fan state over the episode.
    pub fn actuation(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.heater_duty + f64::from(r.fan_on))
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), ControlError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "T_ref",
            "T_meas",
            "heater_duty",
            "fan_on",
            "reward_or_cost",
            "rationale",
        ])
        .map_err(|e| ControlError::Io(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                format!("{}", r.t),
                format!("{}", r.t_ref),
                format!("{}", r.t_meas),
                format!("{:.2}", r.heater_duty),
                r.fan_on.to_string(),
                r.reward_or_cost.map(|v| format!("{v}")).unwrap_or_default(),
                r.rationale.clone(),
            ])
            .map_err(|e| ControlError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| ControlError::Io(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Runs `controller` against `plant` for `steps` decisions at the plant's
/// sampling interval. The controller only ever sees sensor readings. The
/// history is seeded with the first reading and the heater off.
pub fn run_closed_loop(
    controller: &mut dyn Controller,
    plant: &mut Plant,
    reference: &ReferenceProfile,
    steps: usize,
) -> Episode {
    controller.reset();
    let mut ep = Episode {
        controller: controller.name(),
        rows: Vec::with_capacity(steps),
        true_temps: Vec::with_capacity(steps),
        aborted: None,
    };
    let first = plant.sense();
    let mut history: Vec<Sample> = vec![
        Sample {
            state: first,
            control: ControlInput::OFF,
        };
        controller.lookback().saturating_sub(1)
    ];
    let mut measured = first;
    for k in 0..steps {
        if k > 0 {
            measured = plant.sense();
        }
        history.push(Sample {
            state: measured,
            control: ControlInput::OFF,
        });
        let t = plant.time();
        let t_ref = reference.at(t);
        let obs = Observation {
            time: t,
            measured,
            reference: t_ref,
            history: &history,
        };
        let decision = match controller.decide(&obs) {
            Ok(d) => d,
            Err(e) => {
                ep.aborted = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let u = decision.control;
        assert!(
            u.heater_level() < crate::types::HEATER_LEVELS,
            "heater off the 0.05 grid"
        );
        ep.true_temps.push(plant.true_state().t_inside);
        ep.rows.push(TelemetryRow {
            t,
            t_ref,
            t_meas: measured.t_inside,
            heater_duty: u.heater_duty(),
            fan_on: u8::from(u.fan_on()),
            reward_or_cost: decision.score,
            rationale: decision.rationale,
        });
        if let Some(last) = history.last_mut() {
            last.control = u;
        }
        if let Err(e) = plant.step(u) {
            ep.aborted = Some(format!("step {k}: {e}"));
            break;
        }
    }
    ep
}

/// Always emits the same control.
#[derive(Debug, Clone)]
pub struct ConstantController(pub ControlInput);

impl Controller for ConstantController {
    fn name(&self) -> String {
        "constant".into()
    }

    fn decide(&mut self, _obs: &Observation<'_>) -> Result<Decision, ControlError> {
        Ok(Decision {
            control: self.0,
            score: None,
            rationale: String::new(),
        })
    }
}

#[cfg(test)]
mod tests;
