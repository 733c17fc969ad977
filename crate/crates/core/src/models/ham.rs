use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::nnet::{
    train, Checkpoint, Dataset, DenseNet, Network, Standardizer, TrainConfig, TrainReport,
};
use crate::types::{ControlInput, Sample, ThermalState, WindowedDataset};

use super::lstm::{read_scaler, write_scaler};
use super::{check_history, ModelError, PbmModel, Predictor};

const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HamTraining {
    pub hidden: usize,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for HamTraining {
    fn default() -> Self {
        Self {
            hidden: 64,
            dropout: 0.2,
            train: TrainConfig {
                epochs: 1000,
                batch_size: 64,
                min_delta: 5e-4,
                patience: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// The physics model with a learned corrective source term: a first
/// integration gives `T̂`, the residual network maps `(T̂, T_amb, u_h, u_f)`
/// to a source `r` in K/s, and the step is integrated again with `r` added.
#[derive(Debug, Clone, PartialEq)]
pub struct HamModel {
    pbm: PbmModel,
    net: DenseNet,
    features: Standardizer,
    target: Standardizer,
}

/// Per-pair diagnostics of a residual fit on the validation pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamValidation {
    pub pbm_one_step_mae: f64,
    pub ham_one_step_mae: f64,
    pub mean_abs_residual: f64,
}

fn features(t_hat: f64, t_ambient: f64, u: ControlInput) -> [f64; 4] {
    [t_hat, t_ambient, u.heater_duty(), u.fan()]
}

/// The uncorrected prediction `T̂` and the constant source that makes the
/// corrected step land exactly on `t_next`.
///
/// The corrected step is affine in the source, so the source follows from
/// one extra integration with a unit source.
pub fn ham_residual_target(
    pbm: &PbmModel,
    state: ThermalState,
    u: ControlInput,
    t_next: f64,
) -> Result<(f64, f64), ModelError> {
    let t_hat = pbm.step_with_source(state, u, 0.0)?;
    let gain = pbm.step_with_source(state, u, 1.0)? - t_hat;
    Ok((t_hat, (t_next - t_hat) / gain))
}

impl HamModel {
    pub const KIND: &'static str = "ham";

    /// A hybrid whose residual is identically zero.
    pub fn zero_residual(pbm: PbmModel, hidden: usize) -> Self {
        let mut net = DenseNet::new(&[4, hidden, hidden, 1], 0.0, 0);
        net.params_mut().iter_mut().for_each(|v| *v = 0.0);
        Self {
            pbm,
            net,
            features: Standardizer::identity(4),
            target: Standardizer::identity(1),
        }
    }

    pub fn pbm(&self) -> &PbmModel {
        &self.pbm
    }

    pub fn network(&self) -> &DenseNet {
        &self.net
    }

    /// The corrective source for an uncorrected prediction, K/s.
    pub fn residual(&self, t_hat: f64, t_ambient: f64, u: ControlInput) -> f64 {
        let f = features(t_hat, t_ambient, u);
        let x: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(i, v)| self.features.apply(i, *v))
            .collect();
        self.target.invert(0, self.net.predict_row(&x)[0])
    }

    /// Uncorrected and corrected one-step predictions.
    pub fn step_detail(
        &self,
        state: ThermalState,
        u: ControlInput,
    ) -> Result<(f64, f64, f64), ModelError> {
        let t_hat = self.pbm.step_with_source(state, u, 0.0)?;
        let r = self.residual(t_hat, state.t_ambient, u);
        let t = self.pbm.step_with_source(state, u, r)?;
        Ok((t_hat, r, t))
    }

    /// One-step errors of the plain and corrected models on `ds`.
    pub fn validate_on(&self, ds: &WindowedDataset) -> Result<HamValidation, ModelError> {
        let n = ds.len().max(1) as f64;
        let (mut e_pbm, mut e_ham, mut r_abs) = (0.0, 0.0, 0.0);
        for pair in &ds.pairs {
            let last = pair.input[pair.input.len() - 1];
            let (t_hat, r, t) = self.step_detail(last.state, last.control)?;
            e_pbm += (t_hat - pair.target.t_inside).abs();
            e_ham += (t - pair.target.t_inside).abs();
            r_abs += r.abs();
        }
        Ok(HamValidation {
            pbm_one_step_mae: e_pbm / n,
            ham_one_step_mae: e_ham / n,
            mean_abs_residual: r_abs / n,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(Self::KIND)?;
        let mut pbm_ck = ck.clone();
        pbm_ck.kind = PbmModel::KIND.into();
        Ok(Self {
            pbm: PbmModel::from_checkpoint(&pbm_ck)?,
            net: DenseNet::read_checkpoint(ck, "residual")?,
            features: read_scaler(ck, "features")?,
            target: read_scaler(ck, "target")?,
        })
    }
}

fn encode(pbm: &PbmModel, ds: &WindowedDataset) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    let mut x = Array2::zeros((ds.len(), 4));
    let mut y = Array2::zeros((ds.len(), 1));
    for (k, pair) in ds.pairs.iter().enumerate() {
        let last = pair.input[pair.input.len() - 1];
        let (t_hat, r) = ham_residual_target(pbm, last.state, last.control, pair.target.t_inside)?;
        for (f, v) in features(t_hat, last.state.t_ambient, last.control)
            .iter()
            .enumerate()
        {
            x[[k, f]] = *v;
        }
        y[[k, 0]] = r;
    }
    Ok((x, y))
}

fn standardize(a: &mut Array2<f64>, s: &Standardizer) {
    for mut row in a.rows_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = s.apply(i, *v);
        }
    }
}

/// Fits the residual network to the sources that close each one-step gap
/// between the physics model and the recorded data.
pub fn train_ham(
    pbm: PbmModel,
    train_ds: &WindowedDataset,
    val_ds: Option<&WindowedDataset>,
    cfg: &HamTraining,
) -> Result<(HamModel, TrainReport), ModelError> {
    if train_ds.is_empty() {
        return Err(ModelError::TooFewPairs { got: 0, need: 1 });
    }
    let (mut xt, mut yt) = encode(&pbm, train_ds)?;
    let features = Standardizer::fit(&xt.view(), STD_FLOOR);
    let target = Standardizer::fit(&yt.view(), STD_FLOOR);
    standardize(&mut xt, &features);
    standardize(&mut yt, &target);
    let val = match val_ds.filter(|v| !v.is_empty()) {
        Some(v) => {
            let (mut xv, mut yv) = encode(&pbm, v)?;
            standardize(&mut xv, &features);
            standardize(&mut yv, &target);
            Some(Dataset::new(xv, yv)?)
        }
        None => None,
    };
    let mut net = DenseNet::new(&[4, cfg.hidden, cfg.hidden, 1], cfg.dropout, cfg.train.seed);
    let report = train(&mut net, &Dataset::new(xt, yt)?, val.as_ref(), &cfg.train)?;
    Ok((
        HamModel {
            pbm,
            net,
            features,
            target,
        },
        report,
    ))
}

impl Predictor for HamModel {
    fn name(&self) -> &'static str {
        "HAM"
    }

    fn lookback(&self) -> usize {
        1
    }

    fn predict_step(
        &self,
        history: &[Sample],
        u_next: ControlInput,
    ) -> Result<ThermalState, ModelError> {
        check_history(history, 1)?;
        let last = history[history.len() - 1].state;
        let (_, _, t) = self.step_detail(last, u_next)?;
        Ok(ThermalState::new(t, last.t_ambient)?)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        self.pbm.write_meta(&mut ck);
        self.net.write_checkpoint(&mut ck, "residual");
        write_scaler(&mut ck, "features", &self.features);
        write_scaler(&mut ck, "target", &self.target);
        ck
    }
}
