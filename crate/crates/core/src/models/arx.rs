use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::nnet::Checkpoint;
use crate::types::{ControlInput, Sample, ThermalState, WindowedDataset};

use super::{check_history, ModelError, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArxOptions {
    /// State lags.
    pub p: usize,
    /// Input lags.
    pub q: usize,
    /// Tikhonov term added to every squared singular value (0 disables it,
    /// in which case a rank-deficient regressor matrix is an error).
    pub ridge: f64,
    pub frame: ArxFrame,
}

impl Default for ArxOptions {
    fn default() -> Self {
        Self {
            p: 10,
            q: 10,
            ridge: 1e-8,
            frame: ArxFrame::Absolute,
        }
    }
}

/// Coordinates the state lags are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArxFrame {
    /// The inside temperature itself.
    #[default]
    Absolute,
    /// Inside temperature minus the ambient temperature of the same sample;
    /// predictions are shifted back by the latest ambient reading.
    AmbientDeviation,
}

impl ArxFrame {
    pub fn state(self, s: ThermalState) -> f64 {
        match self {
            ArxFrame::Absolute => s.t_inside,
            ArxFrame::AmbientDeviation => s.t_inside - s.t_ambient,
        }
    }

    /// Inverse of `state` given the ambient temperature.
    pub fn temperature(self, x: f64, ambient: f64) -> f64 {
        match self {
            ArxFrame::Absolute => x,
            ArxFrame::AmbientDeviation => x + ambient,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ArxFrame::Absolute => "absolute",
            ArxFrame::AmbientDeviation => "ambient_deviation",
        }
    }
}

/// Linear autoregressive model with exogenous heater and fan inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxModel {
    /// `a[i]` multiplies the state `i` steps before the latest.
    pub a: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_f: Vec<f64>,
    pub frame: ArxFrame,
}

impl ArxModel {
    pub const KIND: &'static str = "arx";

    pub fn from_coefficients(
        a: Vec<f64>,
        b_h: Vec<f64>,
        b_f: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if a.is_empty() || b_h.is_empty() || b_h.len() != b_f.len() {
            return Err(ModelError::Config(
                "need p >= 1 and q >= 1 with matching heater and fan lags".into(),
            ));
        }
        if a.iter().chain(&b_h).chain(&b_f).any(|v| !v.is_finite()) {
            return Err(ModelError::Config("coefficients must be finite".into()));
        }
        Ok(Self {
            a,
            b_h,
            b_f,
            frame: ArxFrame::Absolute,
        })
    }

    pub fn with_frame(mut self, frame: ArxFrame) -> Self {
        self.frame = frame;
        self
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub fn q(&self) -> usize {
        self.b_h.len()
    }

    /// Prediction of the next state in the model's frame.
    fn predict_state(&self, history: &[Sample], u_next: ControlInput) -> f64 {
        let row = regressor(history, u_next, self.p(), self.q(), self.frame);
        self.a
            .iter()
            .chain(&self.b_h)
            .chain(&self.b_f)
            .zip(&row)
            .map(|(c, x)| c * x)
            .sum()
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(Self::KIND)?;
        let frame = match ck.meta.get("frame").and_then(|v| v.as_str()) {
            None | Some("absolute") => ArxFrame::Absolute,
            Some("ambient_deviation") => ArxFrame::AmbientDeviation,
            Some(other) => return Err(ModelError::Config(format!("unknown ARX frame {other:?}"))),
        };
        Ok(Self::from_coefficients(
            ck.tensor("a")?.data.clone(),
            ck.tensor("b_h")?.data.clone(),
            ck.tensor("b_f")?.data.clone(),
        )?
        .with_frame(frame))
    }
}

/// `[x_t .. x_{t-p+1}, u_h,t .. u_h,t-q+1, u_f,t .. u_f,t-q+1]` with the
/// latest control replaced by `u_next`.
fn regressor(
    history: &[Sample],
    u_next: ControlInput,
    p: usize,
    q: usize,
    frame: ArxFrame,
) -> Vec<f64> {
    let n = history.len();
    let control = |j: usize| {
        if j == 0 {
            u_next
        } else {
            history[n - 1 - j].control
        }
    };
    let mut row = Vec::with_capacity(p + 2 * q);
    row.extend((0..p).map(|i| frame.state(history[n - 1 - i].state)));
    row.extend((0..q).map(|j| control(j).heater_duty()));
    row.extend((0..q).map(|j| control(j).fan()));
    row
}

fn column_name(k: usize, p: usize, q: usize) -> String {
    if k < p {
        format!("temperature lag {}", k + 1)
    } else if k < p + q {
        format!("heater lag {}", k - p + 1)
    } else {
        format!("fan lag {}", k - p - q + 1)
    }
}

/// Least-squares fit of the one-step regression over every window pair.
pub fn fit_arx(ds: &WindowedDataset, opts: &ArxOptions) -> Result<ArxModel, ModelError> {
    let (p, q) = (opts.p, opts.q);
    if p == 0 || q == 0 {
        return Err(ModelError::Config("p and q must be >= 1".into()));
    }
    if p.max(q) > ds.lookback {
        return Err(ModelError::Config(format!(
            "lags p={p}, q={q} exceed the window length {}",
            ds.lookback
        )));
    }
    if !(opts.ridge >= 0.0) {
        return Err(ModelError::Config("ridge must be >= 0".into()));
    }
    let cols = p + 2 * q;
    if ds.len() < cols + 1 {
        return Err(ModelError::TooFewPairs {
            got: ds.len(),
            need: cols + 1,
        });
    }
    let mut x = Mat::<f64>::zeros(ds.len(), cols);
    let mut y = vec![0.0; ds.len()];
    for (r, pair) in ds.pairs.iter().enumerate() {
        let last = pair.input[pair.input.len() - 1].control;
        for (c, v) in regressor(&pair.input, last, p, q, opts.frame)
            .into_iter()
            .enumerate()
        {
            x[(r, c)] = v;
        }
        y[r] = opts.frame.state(pair.target);
    }

    let svd = x
        .thin_svd()
        .map_err(|e| ModelError::Config(format!("SVD did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let s_max = sigma.iter().copied().fold(0.0, f64::max);
    let tol = s_max * (ds.len().max(cols) as f64) * f64::EPSILON;
    let rank = sigma.iter().filter(|&&s| s > tol).count();
    if rank < cols && opts.ridge == 0.0 {
        let zero: Vec<String> = (0..cols)
            .filter(|&c| (0..ds.len()).all(|r| x[(r, c)] == 0.0))
            .map(|c| column_name(c, p, q))
            .collect();
        let detail = if zero.is_empty() {
            format!("rank {rank} of {cols} columns (collinear regressors)")
        } else {
            format!(
                "rank {rank} of {cols} columns; never excited: {}",
                zero.join(", ")
            )
        };
        return Err(ModelError::RankDeficient(detail));
    }
    let mut theta = vec![0.0; cols];
    for (i, &s) in sigma.iter().enumerate() {
        if s <= tol && opts.ridge == 0.0 {
            continue;
        }
        let w = s / (s * s + opts.ridge);
        if w == 0.0 || !w.is_finite() {
            continue;
        }
        let coef = w * (0..y.len()).map(|r| u[(r, i)] * y[r]).sum::<f64>();
        for (c, t) in theta.iter_mut().enumerate() {
            *t += coef * v[(c, i)];
        }
    }
    let th = &theta;
    Ok(ArxModel::from_coefficients(
        th[..p].to_vec(),
        th[p..p + q].to_vec(),
        th[p + q..].to_vec(),
    )?
    .with_frame(opts.frame))
}

impl Predictor for ArxModel {
    fn name(&self) -> &'static str {
        "Linear"
    }

    fn lookback(&self) -> usize {
        self.p().max(self.q())
    }

    fn predict_step(
        &self,
        history: &[Sample],
        u_next: ControlInput,
    ) -> Result<ThermalState, ModelError> {
        check_history(history, self.lookback())?;
        let ambient = history[history.len() - 1].state.t_ambient;
        let x = self.predict_state(history, u_next);
        Ok(ThermalState::new(
            self.frame.temperature(x, ambient),
            ambient,
        )?)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        ck.set_meta("p", self.p())
            .set_meta("q", self.q())
            .set_meta("frame", self.frame.as_str());
        ck.push_tensor("a", &[self.a.len()], &self.a)
            .push_tensor("b_h", &[self.b_h.len()], &self.b_h)
            .push_tensor("b_f", &[self.b_f.len()], &self.b_f);
        ck
    }
}
