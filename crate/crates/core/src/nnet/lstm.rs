use ndarray::{concatenate, s, Array2, ArrayView, ArrayView2, ArrayView3, Axis, Ix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    affine, affine_backward, dropout_mask, init_uniform, Checkpoint, Layout, Mode, Network,
    NnetError, Slot,
};

/// Gate blocks in the order they are stacked inside an LSTM weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget,
    Input,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Input, Gate::Cell, Gate::Output];

    fn block(self) -> usize {
        self as usize
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM layer. The weight matrix acts on `[h_{t-1}, x_t]` and stacks the
/// forget, input, cell-candidate and output blocks row-wise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    input: usize,
    hidden: usize,
    w: Slot,
    b: Slot,
}

#[derive(Debug)]
struct CellStep {
    z: Array2<f64>,
    /// Activated gates, laid out like the pre-activations.
    gates: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmCell {
    fn new(layout: &mut Layout, input: usize, hidden: usize) -> Self {
        Self {
            input,
            hidden,
            w: layout.take(4 * hidden, hidden + input),
            b: layout.take(1, 4 * hidden),
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    /// Weight rows and bias entries of one gate, as (rows of W, bias row).
    pub fn gate_weights(&self, p: &[f64], gate: Gate) -> (Array2<f64>, Vec<f64>) {
        let h = self.hidden;
        let r = gate.block() * h..(gate.block() + 1) * h;
        let w = self.w.view(p).slice(s![r.clone(), ..]).to_owned();
        let b = self.b.view(p).slice(s![0, r]).to_vec();
        (w, b)
    }

    fn gates(&self, a: &mut Array2<f64>) {
        let h = self.hidden;
        for (k, mut col) in a.axis_iter_mut(Axis(1)).enumerate() {
            if k / h == Gate::Cell.block() {
                col.mapv_inplace(f64::tanh);
            } else {
                col.mapv_inplace(sigmoid);
            }
        }
    }

    fn step_cached(
        &self,
        p: &[f64],
        x: &ArrayView2<f64>,
        h_prev: &Array2<f64>,
        c_prev: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, CellStep) {
        let hd = self.hidden;
        let z = concatenate(Axis(1), &[h_prev.view(), x.view()]).expect("matching batch sizes");
        let mut gates = affine(&z.view(), p, self.w, self.b);
        self.gates(&mut gates);
        let f = gates.slice(s![.., 0..hd]);
        let i = gates.slice(s![.., hd..2 * hd]);
        let g = gates.slice(s![.., 2 * hd..3 * hd]);
        let o = gates.slice(s![.., 3 * hd..]);
        let c = &f * c_prev + &i * &g;
        let tanh_c = c.mapv(f64::tanh);
        let h = &o * &tanh_c;
        let step = CellStep {
            z,
            gates,
            c_prev: c_prev.clone(),
            tanh_c,
        };
        (h, c, step)
    }

    /// One time step for a batch: returns `(h_t, c_t)`.
    pub fn step(
        &self,
        p: &[f64],
        x: ArrayView2<f64>,
        h_prev: &Array2<f64>,
        c_prev: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (h, c, _) = self.step_cached(p, &x, h_prev, c_prev);
        (h, c)
    }

    /// Hidden states for a batch of sequences shaped (batch, time, features),
    /// starting from `h_0 = c_0 = 0`.
    pub fn forward_sequence(
        &self,
        p: &[f64],
        x: ArrayView3<f64>,
    ) -> Result<Vec<Array2<f64>>, NnetError> {
        let (_, steps, features) = x.dim();
        if steps == 0 {
            return Err(NnetError::Shape("empty input sequence".into()));
        }
        if features != self.input {
            return Err(NnetError::Shape(format!(
                "sequence has {features} features, cell expects {}",
                self.input
            )));
        }
        if p.len() < self.b.offset + self.b.len() {
            return Err(NnetError::Shape(
                "parameter vector too short for this cell".into(),
            ));
        }
        let xs: Vec<Array2<f64>> = x.axis_iter(Axis(1)).map(|v| v.to_owned()).collect();
        Ok(self.forward(p, &xs).0)
    }

    fn forward(&self, p: &[f64], xs: &[Array2<f64>]) -> (Vec<Array2<f64>>, Vec<CellStep>) {
        let batch = xs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((batch, self.hidden));
        let mut c = Array2::zeros((batch, self.hidden));
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (h_new, c_new, st) = self.step_cached(p, &x.view(), &h, &c);
            hs.push(h_new.clone());
            steps.push(st);
            h = h_new;
            c = c_new;
        }
        (hs, steps)
    }

    /// Backpropagation through time. `dhs[t]` is the gradient reaching `h_t`
    /// from above; returns the gradient with respect to each input `x_t`.
    fn backward(
        &self,
        p: &[f64],
        grads: &mut [f64],
        steps: &[CellStep],
        dhs: &[Array2<f64>],
    ) -> Vec<Array2<f64>> {
        let hd = self.hidden;
        let batch = dhs.first().map_or(0, |d| d.nrows());
        let mut dh_next = Array2::<f64>::zeros((batch, hd));
        let mut dc_next = Array2::<f64>::zeros((batch, hd));
        let mut dxs = vec![Array2::zeros((0, 0)); steps.len()];
        for t in (0..steps.len()).rev() {
            let st = &steps[t];
            let f = st.gates.slice(s![.., 0..hd]);
            let i = st.gates.slice(s![.., hd..2 * hd]);
            let g = st.gates.slice(s![.., 2 * hd..3 * hd]);
            let o = st.gates.slice(s![.., 3 * hd..]);
            let dh = &dhs[t] + &dh_next;
            let d_o = &dh * &st.tanh_c;
            let dc = &dh * &o * &st.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
            let mut da = Array2::<f64>::zeros((batch, 4 * hd));
            da.slice_mut(s![.., 0..hd])
                .assign(&(&dc * &st.c_prev * &f.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![.., hd..2 * hd])
                .assign(&(&dc * &g * &i.mapv(|v| v * (1.0 - v))));
            da.slice_mut(s![.., 2 * hd..3 * hd])
                .assign(&(&dc * &i * &g.mapv(|v| 1.0 - v * v)));
            da.slice_mut(s![.., 3 * hd..])
                .assign(&(&d_o * &o.mapv(|v| v * (1.0 - v))));
            dc_next = &dc * &f;
            let dz = affine_backward(&st.z.view(), &da.view(), p, grads, self.w, self.b);
            dh_next = dz.slice(s![.., 0..hd]).to_owned();
            dxs[t] = dz.slice(s![.., hd..]).to_owned();
        }
        dxs
    }
}

/// Stacked sequence model: each block is `LSTM → Linear → Dropout`, with the
/// intermediate linears applied at every time step and the final linear
/// applied to the last hidden state only (no dropout after it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmNet {
    input: usize,
    hidden: usize,
    output: usize,
    dropout: f64,
    cells: Vec<LstmCell>,
    linears: Vec<(Slot, Slot)>,
    params: Vec<f64>,
}

#[derive(Debug)]
struct LayerCache {
    steps: Vec<CellStep>,
    hs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Debug)]
pub struct LstmNetCache {
    layers: Vec<LayerCache>,
}

impl LstmNet {
    pub fn new(
        input: usize,
        hidden: usize,
        blocks: usize,
        output: usize,
        dropout: f64,
        seed: u64,
    ) -> Self {
        assert!(blocks >= 1, "at least one LSTM block");
        assert!((0.0..1.0).contains(&dropout), "dropout must lie in [0, 1)");
        let mut layout = Layout::default();
        let mut cells = Vec::with_capacity(blocks);
        let mut linears = Vec::with_capacity(blocks);
        for l in 0..blocks {
            let cin = if l == 0 { input } else { hidden };
            let out = if l + 1 == blocks { output } else { hidden };
            cells.push(LstmCell::new(&mut layout, cin, hidden));
            linears.push((layout.take(out, hidden), layout.take(1, out)));
        }
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (cell, (w, b)) in cells.iter().zip(&linears) {
            init_uniform(&mut params, cell.w, cell.input + hidden, &mut rng);
            init_uniform(&mut params, cell.b, cell.input + hidden, &mut rng);
            init_uniform(&mut params, *w, hidden, &mut rng);
            init_uniform(&mut params, *b, hidden, &mut rng);
        }
        Self {
            input,
            hidden,
            output,
            dropout,
            cells,
            linears,
            params,
        }
    }

    pub fn from_parts(
        input: usize,
        hidden: usize,
        blocks: usize,
        output: usize,
        dropout: f64,
        params: Vec<f64>,
    ) -> Option<Self> {
        if blocks == 0 || !(0.0..1.0).contains(&dropout) {
            return None;
        }
        let mut net = Self::new(input, hidden, blocks, output, dropout, 0);
        if params.len() != net.params.len() {
            return None;
        }
        net.params = params;
        Some(net)
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn blocks(&self) -> usize {
        self.cells.len()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn cell(&self, block: usize) -> &LstmCell {
        &self.cells[block]
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set_meta(
            &format!("{prefix}.widths"),
            vec![self.input, self.hidden, self.cells.len(), self.output],
        );
        ck.set_meta(&format!("{prefix}.dropout"), self.dropout);
        ck.push_tensor(
            &format!("{prefix}.params"),
            &[self.params.len()],
            &self.params,
        );
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self, NnetError> {
        let w = ck.meta_usizes(&format!("{prefix}.widths"))?;
        let bad = || NnetError::Checkpoint(format!("{prefix}: parameters do not match the layout"));
        let [input, hidden, blocks, output] = w[..] else {
            return Err(bad());
        };
        let dropout = ck.meta_f64(&format!("{prefix}.dropout"))?;
        let params = ck.tensor(&format!("{prefix}.params"))?.data.clone();
        Self::from_parts(input, hidden, blocks, output, dropout, params).ok_or_else(bad)
    }
}

impl Network for LstmNet {
    type Dim = Ix3;
    type Cache = LstmNetCache;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn input_shape_ok(&self, x: &ArrayView<f64, Ix3>) -> bool {
        x.shape()[1] >= 1 && x.shape()[2] == self.input
    }

    fn forward(&self, x: ArrayView<f64, Ix3>, mut mode: Mode<'_>) -> (Array2<f64>, LstmNetCache) {
        let train = mode.is_train();
        let mut xs: Vec<Array2<f64>> = x.axis_iter(Axis(1)).map(|v| v.to_owned()).collect();
        let last = self.cells.len() - 1;
        let mut layers = Vec::with_capacity(self.cells.len());
        for (l, (cell, (w, b))) in self.cells.iter().zip(&self.linears).enumerate() {
            let (hs, steps) = cell.forward(&self.params, &xs);
            if l == last {
                let h_last = hs.last().expect("at least one time step");
                let y = affine(&h_last.view(), &self.params, *w, *b);
                if train {
                    layers.push(LayerCache {
                        steps,
                        hs,
                        masks: Vec::new(),
                    });
                }
                return (y, LstmNetCache { layers });
            }
            let mut masks = Vec::with_capacity(hs.len());
            xs = hs
                .iter()
                .map(|h| {
                    let mut y = affine(&h.view(), &self.params, *w, *b);
                    let m = dropout_mask(y.dim(), self.dropout, &mut mode);
                    if let Some(m) = &m {
                        y *= m;
                    }
                    masks.push(m);
                    y
                })
                .collect();
            if train {
                layers.push(LayerCache { steps, hs, masks });
            }
        }
        unreachable!("the loop returns at the last block")
    }

    fn backward(&self, cache: &LstmNetCache, grad_out: ArrayView2<f64>) -> Vec<f64> {
        assert_eq!(
            cache.layers.len(),
            self.cells.len(),
            "backward needs a training-mode cache"
        );
        let mut grads = vec![0.0; self.params.len()];
        let last = self.cells.len() - 1;
        let lc = &cache.layers[last];
        let steps_n = lc.hs.len();
        let (w, b) = self.linears[last];
        let dh_last = affine_backward(
            &lc.hs[steps_n - 1].view(),
            &grad_out,
            &self.params,
            &mut grads,
            w,
            b,
        );
        let mut dhs = vec![Array2::zeros(dh_last.dim()); steps_n];
        dhs[steps_n - 1] = dh_last;
        let mut dxs = self.cells[last].backward(&self.params, &mut grads, &lc.steps, &dhs);
        for l in (0..last).rev() {
            let lc = &cache.layers[l];
            let (w, b) = self.linears[l];
            let dhs: Vec<Array2<f64>> = dxs
                .iter()
                .zip(&lc.hs)
                .zip(&lc.masks)
                .map(|((dy, h), m)| {
                    let mut dy = dy.clone();
                    if let Some(m) = m {
                        dy *= m;
                    }
                    affine_backward(&h.view(), &dy.view(), &self.params, &mut grads, w, b)
                })
                .collect();
            dxs = self.cells[l].backward(&self.params, &mut grads, &lc.steps, &dhs);
        }
        grads
    }
}
