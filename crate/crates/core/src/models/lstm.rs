use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::nnet::{
    train, Checkpoint, Dataset, LstmNet, Network, Standardizer, TrainConfig, TrainReport,
};
use crate::types::{ControlInput, Sample, ThermalState, WindowedDataset};

use super::{check_history, ModelError, Predictor};

const FEATURES: usize = 4;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmTraining {
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub train: TrainConfig,
}

impl Default for LstmTraining {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 3,
            dropout: 0.2,
            train: TrainConfig {
                epochs: 5000,
                batch_size: 40,
                min_delta: 5e-4,
                patience: 10,
                ..TrainConfig::default()
            },
        }
    }
}

/// Sequence model over windows of `[T, T_amb, u_h, u_f]` that predicts the
/// next change in inside temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmPredictor {
    net: LstmNet,
    features: Standardizer,
    target: Standardizer,
    lookback: usize,
    trained: bool,
}

fn feature_row(s: &Sample, u: ControlInput) -> [f64; FEATURES] {
    [
        s.state.t_inside,
        s.state.t_ambient,
        u.heater_duty(),
        u.fan(),
    ]
}

fn window_rows(
    window: &[Sample],
    u_next: ControlInput,
) -> impl Iterator<Item = [f64; FEATURES]> + '_ {
    let n = window.len();
    window
        .iter()
        .enumerate()
        .map(move |(i, s)| feature_row(s, if i + 1 == n { u_next } else { s.control }))
}

impl LstmPredictor {
    pub const KIND: &'static str = "lstm";

    /// A freshly initialized, untrained predictor.
    pub fn untrained(lookback: usize, cfg: &LstmTraining) -> Self {
        Self {
            net: LstmNet::new(
                FEATURES,
                cfg.hidden,
                cfg.blocks,
                1,
                cfg.dropout,
                cfg.train.seed,
            ),
            features: Standardizer::identity(FEATURES),
            target: Standardizer::identity(1),
            lookback,
            trained: false,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn network(&self) -> &LstmNet {
        &self.net
    }

    fn encode(&self, ds: &WindowedDataset) -> Dataset<ndarray::Ix3> {
        let n = ds.len();
        let mut x = Array3::zeros((n, self.lookback, FEATURES));
        let mut y = Array2::zeros((n, 1));
        for (k, pair) in ds.pairs.iter().enumerate() {
            let w = &pair.input[pair.input.len() - self.lookback..];
            let u = w[w.len() - 1].control;
            for (t, row) in window_rows(w, u).enumerate() {
                for (f, v) in row.iter().enumerate() {
                    x[[k, t, f]] = self.features.apply(f, *v);
                }
            }
            let dt = pair.target.t_inside - w[w.len() - 1].state.t_inside;
            y[[k, 0]] = self.target.apply(0, dt);
        }
        Dataset { x, y }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(Self::KIND)?;
        Ok(Self {
            net: LstmNet::read_checkpoint(ck, "net")?,
            features: read_scaler(ck, "features")?,
            target: read_scaler(ck, "target")?,
            lookback: ck.meta_usize("lookback")?,
            trained: ck
                .meta
                .get("trained")
                .and_then(serde_json::Value::as_bool)
                .unwrap_or(false),
        })
    }
}

pub(crate) fn write_scaler(ck: &mut Checkpoint, name: &str, s: &Standardizer) {
    ck.push_tensor(&format!("{name}.mean"), &[s.mean.len()], &s.mean);
    ck.push_tensor(&format!("{name}.std"), &[s.std.len()], &s.std);
}

pub(crate) fn read_scaler(ck: &Checkpoint, name: &str) -> Result<Standardizer, ModelError> {
    let mean = ck.tensor(&format!("{name}.mean"))?.data.clone();
    let std = ck.tensor(&format!("{name}.std"))?.data.clone();
    if mean.len() != std.len() || std.iter().any(|&s| !(s > 0.0)) {
        return Err(ModelError::Config(format!(
            "bad {name} statistics in checkpoint"
        )));
    }
    Ok(Standardizer { mean, std })
}

/// Trains the sequence model on windowed pairs, standardizing features and
/// targets with training-set statistics only.
pub fn train_lstm(
    train_ds: &WindowedDataset,
    val_ds: Option<&WindowedDataset>,
    cfg: &LstmTraining,
) -> Result<(LstmPredictor, TrainReport), ModelError> {
    if train_ds.is_empty() {
        return Err(ModelError::TooFewPairs { got: 0, need: 1 });
    }
    let lookback = train_ds.lookback;
    let mut model = LstmPredictor::untrained(lookback, cfg);

    let rows: Vec<f64> = train_ds
        .pairs
        .iter()
        .flat_map(|p| window_rows(&p.input, p.input[p.input.len() - 1].control))
        .flatten()
        .collect();
    let rows = Array2::from_shape_vec((rows.len() / FEATURES, FEATURES), rows).expect("whole rows");
    model.features = Standardizer::fit(&rows.view(), STD_FLOOR);
    let deltas: Vec<f64> = train_ds
        .pairs
        .iter()
        .map(|p| p.target.t_inside - p.input[p.input.len() - 1].state.t_inside)
        .collect();
    let deltas = Array2::from_shape_vec((deltas.len(), 1), deltas).expect("column");
    model.target = Standardizer::fit(&deltas.view(), STD_FLOOR);

    let tr = model.encode(train_ds);
    let va = val_ds.filter(|v| !v.is_empty()).map(|v| model.encode(v));
    let report = train(&mut model.net, &tr, va.as_ref(), &cfg.train)?;
    model.trained = true;
    Ok((model, report))
}

impl Predictor for LstmPredictor {
    fn name(&self) -> &'static str {
        "LSTM"
    }

    fn lookback(&self) -> usize {
        self.lookback
    }

    fn predict_step(
        &self,
        history: &[Sample],
        u_next: ControlInput,
    ) -> Result<ThermalState, ModelError> {
        if !self.trained {
            return Err(ModelError::Untrained);
        }
        check_history(history, self.lookback)?;
        let w = &history[history.len() - self.lookback..];
        let mut x = Array3::zeros((1, self.lookback, FEATURES));
        for (t, row) in window_rows(w, u_next).enumerate() {
            for (f, v) in row.iter().enumerate() {
                x[[0, t, f]] = self.features.apply(f, *v);
            }
        }
        let out = self.net.predict(x.view())[[0, 0]];
        let last = w[w.len() - 1].state;
        Ok(ThermalState::new(
            last.t_inside + self.target.invert(0, out),
            last.t_ambient,
        )?)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        ck.set_meta("lookback", self.lookback)
            .set_meta("trained", self.trained);
        self.net.write_checkpoint(&mut ck, "net");
        write_scaler(&mut ck, "features", &self.features);
        write_scaler(&mut ck, "target", &self.target);
        ck
    }
}
