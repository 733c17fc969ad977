use serde::{Deserialize, Serialize};

use crate::models::{ArxFrame, ArxModel, Predictor};
use crate::types::{quantize_control, ControlInput, Sample, HEATER_LEVELS};

use super::{ControlError, Controller, Decision, Observation};

/// How the relaxed first move is mapped onto the actuator grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round heater and fan of the relaxed optimum independently.
    Nearest,
    /// Try both fan states and the two heater levels bracketing the relaxed
    /// optimum for each, re-optimizing the rest of the horizon, and keep the
    /// cheapest.
    BestNeighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub w_t: f64,
    pub w_uf: f64,
    pub w_uh: f64,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub rounding: Rounding,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self::no_penalty()
    }
}

impl MpcConfig {
    pub fn no_penalty() -> Self {
        Self {
            horizon: 10,
            w_t: 10.0,
            w_uf: 0.0,
            w_uh: 0.0,
            max_iterations: 200,
            gradient_tol: 1e-8,
            rounding: Rounding::Nearest,
        }
    }

    pub fn penalty() -> Self {
        Self {
            w_uf: 1.0,
            w_uh: 1.0,
            ..Self::no_penalty()
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon == 0 {
            return Err(ControlError::Config("mpc.horizon must be >= 1".into()));
        }
        for (name, w) in [
            ("mpc.w_t", self.w_t),
            ("mpc.w_uf", self.w_uf),
            ("mpc.w_uh", self.w_uh),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(ControlError::Config(format!(
                    "{name} must be a finite weight >= 0"
                )));
            }
        }
        if self.max_iterations == 0 || !(self.gradient_tol > 0.0) {
            return Err(ControlError::Config(
                "mpc.max_iterations and mpc.gradient_tol must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Cost of one stage: `w_T (x_ref - x)^2 + w_uh u_h^2 + w_uf u_f^2`.
    pub fn stage_cost(&self, x_ref: f64, x: f64, u_h: f64, u_f: f64) -> f64 {
        self.w_t * (x_ref - x).powi(2) + self.w_uh * u_h * u_h + self.w_uf * u_f * u_f
    }
}

/// Result of one receding-horizon solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub control: ControlInput,
    /// Horizon cost with the quantized first move applied.
    pub cost: f64,
    /// Relaxed optimum, heater moves then fan moves.
    pub relaxed: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Predicted deviations over the horizon as an affine map of the decision
/// vector `z = [u_h,0 .. u_h,N-1, u_f,0 .. u_f,N-1]`.
struct Affine {
    offset: Vec<f64>,
    /// Row-major N x 2N.
    gain: Vec<f64>,
    n: usize,
}

impl Affine {
    fn build(model: &ArxModel, history: &[Sample], n: usize) -> Self {
        let zero = simulate(model, history, &vec![0.0; 2 * n], n);
        let mut gain = vec![0.0; n * 2 * n];
        let mut e = vec![0.0; 2 * n];
        for j in 0..2 * n {
            e[j] = 1.0;
            let col = simulate(model, history, &e, n);
            for k in 0..n {
                gain[k * 2 * n + j] = col[k] - zero[k];
            }
            e[j] = 0.0;
        }
        Self {
            offset: zero,
            gain,
            n,
        }
    }

    fn predict(&self, z: &[f64]) -> Vec<f64> {
        let m = 2 * self.n;
        (0..self.n)
            .map(|k| self.offset[k] + (0..m).map(|j| self.gain[k * m + j] * z[j]).sum::<f64>())
            .collect()
    }
}

/// Runs the ARX recursion `n` steps ahead in the model's frame.
fn simulate(model: &ArxModel, history: &[Sample], z: &[f64], n: usize) -> Vec<f64> {
    let len = history.len();
    let past_x = |back: usize| model.frame.state(history[len - 1 - back].state);
    let past_u = |back: usize| history[len - 1 - back].control;
    let mut out: Vec<f64> = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = 0.0;
        for (i, a) in model.a.iter().enumerate() {
            // x_{k-i}: predicted for k - i >= 1, recorded otherwise
            x += a * if k >= i + 1 {
                out[k - i - 1]
            } else {
                past_x(i - k)
            };
        }
        for j in 0..model.q() {
            let (uh, uf) = if k >= j {
                (z[k - j], z[n + k - j])
            } else {
                let u = past_u(j - k);
                (u.heater_duty(), u.fan())
            };
            x += model.b_h[j] * uh + model.b_f[j] * uf;
        }
        out.push(x);
    }
    out
}

/// Model predictive controller on the linear model, with the current
/// reference held over the whole horizon.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub cfg: MpcConfig,
    model: ArxModel,
    warm: Option<Vec<f64>>,
    label: String,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, model: ArxModel) -> Result<Self, ControlError> {
        cfg.validate()?;
        let label = if cfg.w_uf > 0.0 || cfg.w_uh > 0.0 {
            "MPC-P"
        } else {
            "MPC"
        };
        Ok(Self {
            cfg,
            model,
            warm: None,
            label: label.into(),
        })
    }

    pub fn model(&self) -> &ArxModel {
        &self.model
    }

    /// Solves the horizon problem for the given history and reference.
    pub fn plan(&mut self, history: &[Sample], t_ref: f64) -> Result<MpcSolution, ControlError> {
        let need = self.model.lookback();
        if history.len() < need {
            return Err(ControlError::ShortHistory {
                got: history.len(),
                need,
            });
        }
        let n = self.cfg.horizon;
        let last = history[history.len() - 1].state;
        let x_ref = match self.model.frame {
            ArxFrame::Absolute => t_ref,
            ArxFrame::AmbientDeviation => t_ref - last.t_ambient,
        };
        let affine = Affine::build(&self.model, history, n);
        let cfg = self.cfg;
        let cost = |z: &[f64]| horizon_cost(&cfg, &affine, x_ref, z);
        let grad = |z: &[f64]| horizon_grad(&cfg, &affine, x_ref, z);

        let start = match &self.warm {
            Some(w) if w.len() == 2 * n => shift(w, n),
            _ => vec![0.0; 2 * n],
        };
        let free = Bounds::unit(2 * n);
        let relaxed = minimize_box(
            &cost,
            &grad,
            &start,
            &free,
            cfg.max_iterations,
            cfg.gradient_tol,
        );
        let mut iterations = relaxed.iterations;
        let mut converged = relaxed.converged;

        let (control, best) = match cfg.rounding {
            Rounding::Nearest => {
                let u = quantize_control(relaxed.x[0], relaxed.x[n])?;
                let r = self.solve_fixed(&cost, &grad, &relaxed.x, n, u);
                (u, r)
            }
            Rounding::BestNeighbor => {
                let mut best: Option<(ControlInput, Minimum)> = None;
                for fan in [false, true] {
                    let mut b = Bounds::unit(2 * n);
                    b.fix(n, if fan { 1.0 } else { 0.0 });
                    let mut s = relaxed.x.clone();
                    s[n] = if fan { 1.0 } else { 0.0 };
                    let branch =
                        minimize_box(&cost, &grad, &s, &b, cfg.max_iterations, cfg.gradient_tol);
                    iterations += branch.iterations;
                    converged &= branch.converged;
                    let scale = f64::from(HEATER_LEVELS - 1);
                    let lo = (branch.x[0] * scale).floor().clamp(0.0, scale) as u8;
                    let hi = (branch.x[0] * scale).ceil().clamp(0.0, scale) as u8;
                    let levels: &[u8] = if lo == hi { &[lo][..] } else { &[lo, hi][..] };
                    for &level in levels {
                        let u = ControlInput::from_level(level, fan);
                        let r = self.solve_fixed(&cost, &grad, &branch.x, n, u);
                        iterations += r.iterations;
                        converged &= r.converged;
                        let better = match &best {
                            None => true,
                            Some((bu, bm)) => {
                                r.value < bm.value
                                    || (r.value == bm.value && u.action_index() < bu.action_index())
                            }
                        };
                        if better {
                            best = Some((u, r));
                        }
                    }
                }
                best.expect("at least one candidate")
            }
        };
        self.warm = Some(best.x.clone());
        Ok(MpcSolution {
            control,
            cost: best.value,
            relaxed: relaxed.x,
            iterations,
            converged,
        })
    }

    fn solve_fixed(
        &self,
        cost: &dyn Fn(&[f64]) -> f64,
        grad: &dyn Fn(&[f64]) -> Vec<f64>,
        start: &[f64],
        n: usize,
        u: ControlInput,
    ) -> Minimum {
        let mut b = Bounds::unit(2 * n);
        b.fix(0, u.heater_duty());
        b.fix(n, u.fan());
        let mut s = start.to_vec();
        s[0] = u.heater_duty();
        s[n] = u.fan();
        minimize_box(
            cost,
            grad,
            &s,
            &b,
            self.cfg.max_iterations,
            self.cfg.gradient_tol,
        )
    }
}

fn shift(prev: &[f64], n: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(2 * n);
    for block in [&prev[..n], &prev[n..]] {
        z.extend_from_slice(&block[1..]);
        z.push(block[n - 1]);
    }
    z
}

fn horizon_cost(cfg: &MpcConfig, affine: &Affine, x_ref: f64, z: &[f64]) -> f64 {
    let n = affine.n;
    let x = affine.predict(z);
    (0..n)
        .map(|k| cfg.stage_cost(x_ref, x[k], z[k], z[n + k]))
        .sum()
}

fn horizon_grad(cfg: &MpcConfig, affine: &Affine, x_ref: f64, z: &[f64]) -> Vec<f64> {
    let n = affine.n;
    let m = 2 * n;
    let x = affine.predict(z);
    let mut g = vec![0.0; m];
    for k in 0..n {
        let e = -2.0 * cfg.w_t * (x_ref - x[k]);
        for j in 0..m {
            g[j] += e * affine.gain[k * m + j];
        }
        g[k] += 2.0 * cfg.w_uh * z[k];
        g[n + k] += 2.0 * cfg.w_uf * z[n + k];
    }
    g
}

impl Controller for MpcController {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn lookback(&self) -> usize {
        self.model.lookback()
    }

    fn decide(&mut self, obs: &Observation<'_>) -> Result<Decision, ControlError> {
        let sol = self.plan(obs.history, obs.reference)?;
        let rationale = if sol.converged {
            String::new()
        } else {
            format!(
                "optimizer stopped at {} iterations; best iterate used",
                sol.iterations
            )
        };
        Ok(Decision {
            control: sol.control,
            score: Some(sol.cost),
            rationale,
        })
    }

    fn reset(&mut self) {
        self.warm = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unit(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            upper: vec![1.0; n],
        }
    }

    pub fn fix(&mut self, i: usize, v: f64) {
        self.lower[i] = v;
        self.upper[i] = v;
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected BFGS on a box. Variables sitting on a bound with the gradient
/// pushing outward are frozen for the step and the inverse-Hessian estimate
/// acts on the rest; it is reset to a scaled identity whenever that set
/// changes. Returns the best iterate when the iteration budget runs out.
pub fn minimize_box(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    start: &[f64],
    bounds: &Bounds,
    max_iterations: usize,
    gradient_tol: f64,
) -> Minimum {
    let m = start.len();
    let mut x = start.to_vec();
    bounds.project(&mut x);
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut h = identity(m, 1.0);
    let mut scale: Option<f64> = None;
    let mut prev_active: Vec<bool> = Vec::new();
    for it in 0..max_iterations {
        let mut probe: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        bounds.project(&mut probe);
        let pg = probe
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if pg <= gradient_tol {
            return Minimum {
                x,
                value: fx,
                iterations: it,
                converged: true,
            };
        }
        let active: Vec<bool> = (0..m)
            .map(|i| {
                bounds.lower[i] == bounds.upper[i]
                    || (x[i] <= bounds.lower[i] && g[i] > 0.0)
                    || (x[i] >= bounds.upper[i] && g[i] < 0.0)
            })
            .collect();
        if active != prev_active {
            h = identity(m, scale.unwrap_or(1.0));
            prev_active = active.clone();
        }
        let mut d = vec![0.0; m];
        for i in (0..m).filter(|&i| !active[i]) {
            d[i] = -(0..m)
                .filter(|&j| !active[j])
                .map(|j| h[i * m + j] * g[j])
                .sum::<f64>();
        }
        if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            h = identity(m, scale.unwrap_or(1.0));
            for i in 0..m {
                d[i] = if active[i] {
                    0.0
                } else {
                    -scale.unwrap_or(1.0) * g[i]
                };
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            bounds.project(&mut trial);
            let decrease: f64 = g
                .iter()
                .zip(trial.iter().zip(&x))
                .map(|(gi, (t, xi))| gi * (t - xi))
                .sum();
            let ft = f(&trial);
            if ft <= fx + 1e-4 * decrease {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no descent left at working precision
            return Minimum {
                x,
                value: fx,
                iterations: it + 1,
                converged: true,
            };
        };
        let g_new = grad(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-14 * yy.sqrt() * s.iter().map(|v| v * v).sum::<f64>().sqrt() && yy > 0.0 {
            if scale.is_none() {
                scale = Some(sy / yy);
                h = identity(m, sy / yy);
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        let moved = s.iter().any(|v| *v != 0.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if !moved {
            return Minimum {
                x,
                value: fx,
                iterations: it + 1,
                converged: true,
            };
        }
    }
    Minimum {
        x,
        value: fx,
        iterations: max_iterations,
        converged: false,
    }
}

fn identity(m: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        h[i * m + i] = scale;
    }
    h
}

/// Inverse-Hessian update `H <- (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let m = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..m)
        .map(|i| (0..m).map(|j| h[i * m + j] * y[j]).sum())
        .collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..m {
        for j in 0..m {
            h[i * m + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
