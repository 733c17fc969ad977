//! A small neural-network engine: dense and LSTM networks over a flat
//! parameter vector, MSE loss, Adam, early-stopped minibatch training,
//! checkpoints and finite-difference gradient checks.

mod adam;
mod checkpoint;
mod dense;
mod lstm;
mod train;

use ndarray::{Array1, Array2, ArrayView, ArrayView2, ArrayViewMut2, Axis, Dimension, RemoveAxis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use dense::{DenseCache, DenseNet};
pub use lstm::{Gate, LstmCell, LstmNet, LstmNetCache};
pub use train::{evaluate, train, Dataset, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Forward-pass mode. Dropout is active only in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Location of one weight matrix (or bias row) inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.rows, self.cols),
            &p[self.offset..self.offset + self.len()],
        )
        .expect("slot lies inside the parameter vector")
    }

    pub fn view_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape(
            (self.rows, self.cols),
            &mut p[self.offset..self.offset + self.len()],
        )
        .expect("slot lies inside the parameter vector")
    }
}

/// Hands out consecutive slots while a network is being laid out.
#[derive(Default)]
pub(crate) struct Layout {
    next: usize,
}

impl Layout {
    pub(crate) fn take(&mut self, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.next,
            rows,
            cols,
        };
        self.next += rows * cols;
        s
    }

    pub(crate) fn total(&self) -> usize {
        self.next
    }
}

/// Uniform initialization in ±1/√fan_in.
pub(crate) fn init_uniform(p: &mut [f64], slot: Slot, fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in &mut p[slot.offset..slot.offset + slot.len()] {
        *v = rng.gen_range(-bound..bound);
    }
}

/// `x · Wᵀ + b` for a weight slot of shape (out, in) and bias slot (1, out).
pub(crate) fn affine(x: &ArrayView2<f64>, p: &[f64], w: Slot, b: Slot) -> Array2<f64> {
    let mut y = x.dot(&w.view(p).t());
    y += &b.view(p).row(0);
    y
}

/// Accumulates the weight and bias gradients of an affine map and returns
/// the gradient with respect to its input.
pub(crate) fn affine_backward(
    x: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    p: &[f64],
    grads: &mut [f64],
    w: Slot,
    b: Slot,
) -> Array2<f64> {
    let mut gw = w.view_mut(grads);
    gw += &dy.t().dot(x);
    let mut gb = b.view_mut(grads);
    gb.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&w.view(p))
}

/// Inverted-dropout mask (entries 0 or 1/(1-p)); `None` when inactive.
pub(crate) fn dropout_mask(
    shape: (usize, usize),
    p: f64,
    mode: &mut Mode<'_>,
) -> Option<Array2<f64>> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            Some(Array2::from_shape_fn(shape, |_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            }))
        }
        _ => None,
    }
}

/// A network with a flat parameter vector, trainable by [`train`].
pub trait Network {
    /// Dimensionality of a batch of inputs (batch on axis 0).
    type Dim: Dimension + RemoveAxis;
    type Cache;

    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn input_shape_ok(&self, x: &ArrayView<f64, Self::Dim>) -> bool;
    fn forward(&self, x: ArrayView<f64, Self::Dim>, mode: Mode<'_>) -> (Array2<f64>, Self::Cache);
    /// Gradient of a scalar loss with respect to every parameter, given the
    /// gradient with respect to the network output.
    fn backward(&self, cache: &Self::Cache, grad_out: ArrayView2<f64>) -> Vec<f64>;

    fn predict(&self, x: ArrayView<f64, Self::Dim>) -> Array2<f64> {
        self.forward(x, Mode::Eval).0
    }

    fn parameter_count(&self) -> usize {
        self.params().len()
    }
}

/// Mean squared error over every output element.
pub fn mse(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n
}

/// Gradient of [`mse`] with respect to the prediction.
pub fn mse_grad(pred: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Array2<f64> {
    let n = pred.len().max(1) as f64;
    (pred - target) * (2.0 / n)
}

/// Per-feature standardization with statistics fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Standard deviations below `floor` are replaced by 1 so constant
    /// features pass through centred but unscaled.
    pub fn fit(rows: &ArrayView2<f64>, floor: f64) -> Self {
        let mean: Array1<f64> = rows
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(rows.ncols()));
        let std = rows.std_axis(Axis(0), 0.0);
        Self {
            mean: mean.to_vec(),
            std: std
                .iter()
                .map(|&s| if s < floor { 1.0 } else { s })
                .collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    pub fn apply(&self, i: usize, v: f64) -> f64 {
        (v - self.mean[i]) / self.std[i]
    }

    pub fn invert(&self, i: usize, v: f64) -> f64 {
        v * self.std[i] + self.mean[i]
    }
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn finite_difference_gradient(
    params: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    h: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = loss(&p);
            p[i] = orig - h;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
