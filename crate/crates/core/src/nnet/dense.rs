use ndarray::{Array2, ArrayView, ArrayView2, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    affine, affine_backward, dropout_mask, init_uniform, Checkpoint, Layout, Mode, Network,
    NnetError, Slot,
};

/// Fully connected net: `Linear → ReLU → Dropout` repeated for every hidden
/// width, then a final `Linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    sizes: Vec<usize>,
    dropout: f64,
    layers: Vec<(Slot, Slot)>,
    params: Vec<f64>,
}

#[derive(Debug)]
pub struct DenseCache {
    /// Input to each linear layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl DenseNet {
    /// `sizes` lists the input width, each hidden width and the output width.
    pub fn new(sizes: &[usize], dropout: f64, seed: u64) -> Self {
        assert!(
            sizes.len() >= 2,
            "a dense net needs input and output widths"
        );
        assert!((0.0..1.0).contains(&dropout), "dropout must lie in [0, 1)");
        let mut layout = Layout::default();
        let layers: Vec<(Slot, Slot)> = sizes
            .windows(2)
            .map(|w| (layout.take(w[1], w[0]), layout.take(1, w[1])))
            .collect();
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (w, b)) in layers.iter().enumerate() {
            init_uniform(&mut params, *w, sizes[i], &mut rng);
            init_uniform(&mut params, *b, sizes[i], &mut rng);
        }
        Self {
            sizes: sizes.to_vec(),
            dropout,
            layers,
            params,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    /// Rebuilds a net from its layout and a parameter vector.
    pub fn from_parts(sizes: &[usize], dropout: f64, params: Vec<f64>) -> Option<Self> {
        if sizes.len() < 2 || !(0.0..1.0).contains(&dropout) {
            return None;
        }
        let mut net = Self::new(sizes, dropout, 0);
        if params.len() != net.params.len() {
            return None;
        }
        net.params = params;
        Some(net)
    }

    /// Stores the layout and parameters under `prefix`.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set_meta(&format!("{prefix}.sizes"), self.sizes.clone());
        ck.set_meta(&format!("{prefix}.dropout"), self.dropout);
        ck.push_tensor(
            &format!("{prefix}.params"),
            &[self.params.len()],
            &self.params,
        );
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self, NnetError> {
        let sizes = ck.meta_usizes(&format!("{prefix}.sizes"))?;
        let dropout = ck.meta_f64(&format!("{prefix}.dropout"))?;
        let params = ck.tensor(&format!("{prefix}.params"))?.data.clone();
        Self::from_parts(&sizes, dropout, params).ok_or_else(|| {
            NnetError::Checkpoint(format!("{prefix}: parameters do not match the layout"))
        })
    }

    /// Single-row convenience wrapper around [`Network::predict`].
    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        self.predict(v).row(0).to_vec()
    }
}

impl Network for DenseNet {
    type Dim = Ix2;
    type Cache = DenseCache;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_shape_ok(&self, x: &ArrayView<f64, Ix2>) -> bool {
        x.ncols() == self.sizes[0]
    }

    fn forward(&self, x: ArrayView<f64, Ix2>, mut mode: Mode<'_>) -> (Array2<f64>, DenseCache) {
        let train = mode.is_train();
        let last = self.layers.len() - 1;
        let mut cache = DenseCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
        };
        let mut h = x.to_owned();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = affine(&h.view(), &self.params, *w, *b);
            if train {
                cache.inputs.push(std::mem::take(&mut h));
            }
            if i == last {
                return (z, cache);
            }
            let mut a = z.mapv(|v| v.max(0.0));
            let mask = dropout_mask(a.dim(), self.dropout, &mut mode);
            if let Some(m) = &mask {
                a *= m;
            }
            if train {
                cache.pre.push(z);
                cache.masks.push(mask);
            }
            h = a;
        }
        unreachable!("the loop returns at the last layer")
    }

    fn backward(&self, cache: &DenseCache, grad_out: ArrayView2<f64>) -> Vec<f64> {
        assert_eq!(
            cache.inputs.len(),
            self.layers.len(),
            "backward needs a training-mode cache"
        );
        let mut grads = vec![0.0; self.params.len()];
        let mut dy = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let (w, b) = self.layers[i];
            let dx = affine_backward(
                &cache.inputs[i].view(),
                &dy.view(),
                &self.params,
                &mut grads,
                w,
                b,
            );
            if i == 0 {
                break;
            }
            let mut d = dx;
            if let Some(m) = &cache.masks[i - 1] {
                d *= m;
            }
            d.zip_mut_with(&cache.pre[i - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0
                }
            });
            dy = d;
        }
        grads
    }
}
