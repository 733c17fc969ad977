//! One-step predictors of the inside temperature behind a common contract,
//! with autoregressive rollout that feeds each prediction back as history.

mod arx;
mod ham;
mod lstm;
mod pbm;

use thiserror::Error;

use crate::integrate::IntegrateError;
use crate::nnet::{Checkpoint, NnetError};
use crate::types::{ControlInput, CoreError, Sample, ThermalState, Trajectory};

pub use arx::{fit_arx, ArxFrame, ArxModel, ArxOptions};
pub use ham::{ham_residual_target, train_ham, HamModel, HamTraining, HamValidation};
pub use lstm::{train_lstm, LstmPredictor, LstmTraining};
pub use pbm::{integrate_balance, PbmModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("history has {got} samples but the model needs {need}")]
    ShortHistory { got: usize, need: usize },
    #[error("model has not been trained")]
    Untrained,
    #[error("need at least {need} training pairs, got {got}")]
    TooFewPairs { got: usize, need: usize },
    #[error("regressor matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("rollout step {step}: {source}")]
    RolloutStep { step: usize, source: CoreError },
    #[error("empty control schedule")]
    EmptySchedule,
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Exogenous inputs of one rollout step: the control held over the step
/// and the ambient temperature at its end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutInput {
    pub control: ControlInput,
    pub ambient: f64,
}

/// A one-step temperature predictor.
///
/// `history` is ordered oldest first; each sample's control is the one applied
/// after it, except that the last sample's control is replaced by `u_next`,
/// the input held over the predicted interval.
pub trait Predictor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of trailing history samples the model reads.
    fn lookback(&self) -> usize;

    fn predict_step(
        &self,
        history: &[Sample],
        u_next: ControlInput,
    ) -> Result<ThermalState, ModelError>;

    fn checkpoint(&self) -> Checkpoint;

    /// Autoregressive prediction over `schedule`: every step after the first
    /// reads the model's own earlier predictions.
    fn rollout(
        &self,
        history: &[Sample],
        schedule: &[RolloutInput],
    ) -> Result<Vec<ThermalState>, ModelError> {
        if schedule.is_empty() {
            return Err(ModelError::EmptySchedule);
        }
        check_history(history, self.lookback())?;
        let keep = self.lookback().max(1);
        let mut hist: Vec<Sample> = history[history.len() - keep..].to_vec();
        let mut out = Vec::with_capacity(schedule.len());
        for (step, inp) in schedule.iter().enumerate() {
            let pred = self
                .predict_step(&hist, inp.control)
                .map_err(|e| at_step(step, e))?;
            let state = ThermalState::new(pred.t_inside, inp.ambient)
                .map_err(|source| ModelError::RolloutStep { step, source })?;
            out.push(state);
            if let Some(last) = hist.last_mut() {
                last.control = inp.control;
            }
            hist.push(Sample {
                state,
                control: inp.control,
            });
            if hist.len() > keep {
                hist.remove(0);
            }
        }
        Ok(out)
    }
}

fn at_step(step: usize, e: ModelError) -> ModelError {
    match e {
        ModelError::Core(source) => ModelError::RolloutStep { step, source },
        other => other,
    }
}

pub(crate) fn check_history(history: &[Sample], need: usize) -> Result<(), ModelError> {
    if history.len() < need.max(1) {
        return Err(ModelError::ShortHistory {
            got: history.len(),
            need: need.max(1),
        });
    }
    Ok(())
}

/// Open-loop evaluation on a recorded trajectory: the first `lookback`
/// samples seed the history, the remaining controls and ambients drive the
/// rollout, and the predictions are returned alongside the recorded states.
pub fn rollout_on(
    model: &dyn Predictor,
    traj: &Trajectory,
    lookback: usize,
) -> Result<Vec<(f64, f64)>, ModelError> {
    let s = traj.samples();
    if s.len() <= lookback {
        return Err(ModelError::ShortHistory {
            got: s.len(),
            need: lookback + 1,
        });
    }
    let schedule: Vec<RolloutInput> = (lookback..s.len())
        .map(|k| RolloutInput {
            control: s[k - 1].control,
            ambient: s[k].state.t_ambient,
        })
        .collect();
    let preds = model.rollout(&s[..lookback], &schedule)?;
    Ok(preds
        .iter()
        .zip(&s[lookback..])
        .map(|(p, m)| (p.t_inside, m.state.t_inside))
        .collect())
}

/// Mean absolute error of (predicted, observed) pairs.
pub fn mae(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64
}

/// Loads any predictor from its checkpoint.
pub fn load_predictor(ck: &Checkpoint) -> Result<Box<dyn Predictor>, ModelError> {
    Ok(match ck.kind.as_str() {
        ArxModel::KIND => Box::new(ArxModel::from_checkpoint(ck)?),
        PbmModel::KIND => Box::new(PbmModel::from_checkpoint(ck)?),
        LstmPredictor::KIND => Box::new(LstmPredictor::from_checkpoint(ck)?),
        HamModel::KIND => Box::new(HamModel::from_checkpoint(ck)?),
        other => return Err(ModelError::Config(format!("unknown model kind {other:?}"))),
    })
}
