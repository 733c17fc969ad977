use ndarray::{Array, Array2, Axis, Dimension, RemoveAxis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mse, mse_grad, Adam, AdamConfig, Mode, Network, NnetError};

/// Inputs with the sample index on axis 0 and matching 2-D targets.
#[derive(Debug, Clone)]
pub struct Dataset<D: Dimension> {
    pub x: Array<f64, D>,
    pub y: Array2<f64>,
}

impl<D: Dimension + RemoveAxis> Dataset<D> {
    pub fn new(x: Array<f64, D>, y: Array2<f64>) -> Result<Self, NnetError> {
        if x.shape()[0] != y.nrows() {
            return Err(NnetError::Shape(format!(
                "{} inputs but {} targets",
                x.shape()[0],
                y.nrows()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// An epoch counts as an improvement only if the monitored loss drops by
    /// more than this.
    pub min_delta: f64,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Put back the parameters of the best epoch when training ends.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 64,
            min_delta: 5e-4,
            patience: 10,
            adam: AdamConfig::default(),
            seed: 0,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        if self.batch_size == 0 {
            return Err(NnetError::Config("batch_size must be positive".into()));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(NnetError::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(NnetError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(NnetError::Config("min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Mean loss of `net` over `data` in evaluation mode.
pub fn evaluate<N: Network>(net: &N, data: &Dataset<N::Dim>) -> f64 {
    const CHUNK: usize = 512;
    let n = data.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = data.x.slice_axis(Axis(0), (start..end).into());
        let y = data.y.slice_axis(Axis(0), (start..end).into());
        let pred = net.predict(x);
        total += mse(&pred.view(), &y) * (end - start) as f64;
        start = end;
    }
    total / n.max(1) as f64
}

/// Minibatch Adam on MSE with early stopping on the validation loss (or the
/// training loss when no validation set is given).
pub fn train<N: Network>(
    net: &mut N,
    train_set: &Dataset<N::Dim>,
    val_set: Option<&Dataset<N::Dim>>,
    cfg: &TrainConfig,
) -> Result<TrainReport, NnetError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_some_and(Dataset::is_empty) {
        return Err(NnetError::EmptyDataset);
    }
    if !net.input_shape_ok(&train_set.x.view()) {
        return Err(NnetError::Shape(format!(
            "training inputs have shape {:?}",
            train_set.x.shape()
        )));
    }
    if let Some(v) = val_set {
        if !net.input_shape_ok(&v.x.view()) {
            return Err(NnetError::Shape(format!(
                "validation inputs have shape {:?}",
                v.x.shape()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, net.parameter_count());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params = net.params().to_vec();
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let x = train_set.x.select(Axis(0), idx);
            let y = train_set.y.select(Axis(0), idx);
            let (pred, cache) = net.forward(x.view(), Mode::Train(&mut rng));
            let loss = mse(&pred.view(), &y.view());
            if !loss.is_finite() {
                return Err(NnetError::Diverged { epoch, loss });
            }
            sum += loss * idx.len() as f64;
            let g = net.backward(&cache, mse_grad(&pred.view(), &y.view()).view());
            adam.step(net.params_mut(), &g);
        }
        let train_loss = sum / train_set.len() as f64;
        report.train_loss.push(train_loss);
        report.epochs_run = epoch + 1;

        let monitored = match val_set {
            Some(v) => {
                let l = evaluate(net, v);
                report.val_loss.push(l);
                l
            }
            None => train_loss,
        };
        if !monitored.is_finite() {
            return Err(NnetError::Diverged {
                epoch,
                loss: monitored,
            });
        }
        if monitored < report.best_loss - cfg.min_delta || report.best_loss.is_infinite() {
            report.best_loss = monitored;
            report.best_epoch = epoch;
            best_params.copy_from_slice(net.params());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if cfg.restore_best && report.epochs_run > 0 {
        net.params_mut().copy_from_slice(&best_params);
    }
    Ok(report)
}
