//! Adaptive explicit Runge–Kutta integration: the Dormand–Prince 5(4)
//! embedded pair with a PI step-size controller.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("invalid time span [{0}, {1}]")]
    BadSpan(f64, f64),
    #[error("initial state has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tolerances must be positive (rel {rel}, abs {abs})")]
    BadTolerance { rel: f64, abs: f64 },
    #[error("exceeded {0} steps before reaching the end of the span")]
    MaxSteps(usize),
    #[error("right-hand side returned a non-finite value at t = {0}")]
    NonFinite(f64),
    #[error("step size underflow at t = {0}")]
    StepUnderflow(f64),
}

/// Initial value problem `dy/dt = rhs(t, y)`, `y(t0) = y0`, integrated to `t1`.
pub struct OdeProblem<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    pub rhs: F,
    pub t0: f64,
    pub t1: f64,
    pub y0: Vec<f64>,
}

impl<F> OdeProblem<F>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    pub fn new(rhs: F, t0: f64, t1: f64, y0: Vec<f64>) -> Self {
        Self { rhs, t0, t1, y0 }
    }

    pub fn dimension(&self) -> usize {
        self.y0.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// First trial step; `None` selects one from the initial derivative.
    pub initial_step: Option<f64>,
    /// Keep the accepted-step log in the solution.
    pub record_steps: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_steps: 100_000,
            initial_step: None,
            record_steps: false,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Accepted steps (time and state after each step), if requested.
    pub steps: Vec<StepRecord>,
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

/// Integrates `problem` from `t0` to exactly `t1`.
pub fn solve_rk45<F>(
    problem: OdeProblem<F>,
    cfg: &IntegratorConfig,
) -> Result<Solution, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let OdeProblem {
        mut rhs,
        t0,
        t1,
        y0,
    } = problem;
    if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
        return Err(IntegrateError::BadSpan(t0, t1));
    }
    if !(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0) {
        return Err(IntegrateError::BadTolerance {
            rel: cfg.rel_tol,
            abs: cfg.abs_tol,
        });
    }
    let n = y0.len();
    let mut eval = |t: f64, y: &[f64], out: &mut [f64], count: &mut usize| {
        rhs(t, y, out);
        *count += 1;
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(IntegrateError::NonFinite(t))
        }
    };

    let mut evaluations = 0;
    let mut y = y0;
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    let mut t = t0;
    eval(t, &y, &mut k1, &mut evaluations)?;

    let span = t1 - t0;
    let mut h = match cfg.initial_step {
        Some(h0) if h0 > 0.0 => h0.min(span),
        _ => initial_step(
            &mut |t, y, o| eval(t, y, o, &mut evaluations),
            t,
            &y,
            &k1,
            span,
            cfg,
        )?,
    };

    let mut fac_old: f64 = 1e-4;
    let mut accepted = 0;
    let mut rejected = 0;
    let mut steps = Vec::new();
    let mut last_rejected = false;

    loop {
        if accepted + rejected >= cfg.max_steps {
            return Err(IntegrateError::MaxSteps(cfg.max_steps));
        }
        let remaining = t1 - t;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h <= f64::EPSILON * t.abs().max(1.0) * 10.0 {
            return Err(IntegrateError::StepUnderflow(t));
        }

        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        eval(t + C2 * h, &tmp, &mut k2, &mut evaluations)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        eval(t + C3 * h, &tmp, &mut k3, &mut evaluations)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        eval(t + C4 * h, &tmp, &mut k4, &mut evaluations)?;
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        eval(t + C5 * h, &tmp, &mut k5, &mut evaluations)?;
        for i in 0..n {
            tmp[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t1 } else { t + h };
        eval(t_new, &tmp, &mut k6, &mut evaluations)?;
        for i in 0..n {
            y_new[i] =
                y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        eval(t_new, &y_new, &mut k7, &mut evaluations)?;

        let mut err_sq = 0.0;
        for i in 0..n {
            let e =
                h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = if n == 0 {
            0.0
        } else {
            (err_sq / n as f64).sqrt()
        };
        if !err.is_finite() {
            return Err(IntegrateError::NonFinite(t));
        }

        let fac11 = err.powf(0.2 - BETA * 0.75);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            fac_old = err.max(1e-4);
            accepted += 1;
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            if cfg.record_steps {
                steps.push(StepRecord { t, y: y.clone() });
            }
            if last {
                break;
            }
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            h = h_new;
        } else {
            rejected += 1;
            last_rejected = true;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
    }

    Ok(Solution {
        t,
        y,
        accepted,
        rejected,
        evaluations,
        steps,
    })
}

/// Starting step from the size of the first two derivatives (Hairer, Nørsett & Wanner).
fn initial_step(
    eval: &mut dyn FnMut(f64, &[f64], &mut [f64]) -> Result<(), IntegrateError>,
    t: f64,
    y: &[f64],
    f0: &[f64],
    span: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, IntegrateError> {
    let n = y.len();
    if n == 0 {
        return Ok(span);
    }
    let sc: Vec<f64> = y
        .iter()
        .map(|v| cfg.abs_tol + cfg.rel_tol * v.abs())
        .collect();
    let norm = |v: &[f64]| -> f64 {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let d0 = norm(y);
    let d1 = norm(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    eval(t + h0, &y1, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(cfg: &IntegratorConfig) -> f64 {
        let p = OdeProblem::new(
            |_t, y: &[f64], dy: &mut [f64]| dy[0] = -y[0],
            0.0,
            1.0,
            vec![1.0],
        );
        solve_rk45(p, cfg).unwrap().y[0]
    }

    #[test]
    fn exponential_decay() {
        let y = decay(&IntegratorConfig::default());
        assert!((y - (-1.0f64).exp()).abs() < 1e-6, "{y}");
    }

    #[test]
    fn constant_field_is_exact() {
        let p = OdeProblem::new(
            |_t, _y: &[f64], dy: &mut [f64]| dy[0] = 0.0,
            0.0,
            100.0,
            vec![5.0],
        );
        let s = solve_rk45(p, &IntegratorConfig::default()).unwrap();
        assert_eq!(s.y[0], 5.0);
        assert_eq!(s.t, 100.0);
    }

    #[test]
    fn linear_heating_matches_closed_form() {
        // dT/dt = a - b (T - Ta): the enclosure balance with heater on and fan leak.
        let (a, b, ta) = (100.0 / 180.9, 0.01, 22.0);
        let p = OdeProblem::new(
            move |_t, y: &[f64], dy: &mut [f64]| dy[0] = a - b * (y[0] - ta),
            0.0,
            60.0,
            vec![25.0],
        );
        let s = solve_rk45(p, &IntegratorConfig::default()).unwrap();
        let eq = ta + a / b;
        let exact = eq + (25.0 - eq) * (-b * 60.0f64).exp();
        assert!((s.y[0] - exact).abs() < 1e-5, "{} vs {exact}", s.y[0]);
    }

    #[test]
    fn final_time_is_exact_and_log_recorded() {
        let cfg = IntegratorConfig {
            record_steps: true,
            ..IntegratorConfig::default()
        };
        let p = OdeProblem::new(
            |t, _y: &[f64], dy: &mut [f64]| dy[0] = t.cos(),
            0.0,
            7.3,
            vec![0.0],
        );
        let s = solve_rk45(p, &cfg).unwrap();
        assert_eq!(s.t, 7.3);
        assert_eq!(s.steps.last().unwrap().t, 7.3);
        assert_eq!(s.steps.len(), s.accepted);
        assert!((s.y[0] - 7.3f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn max_steps_error() {
        let cfg = IntegratorConfig {
            max_steps: 3,
            ..IntegratorConfig::default()
        };
        let p = OdeProblem::new(
            |t, _y: &[f64], dy: &mut [f64]| dy[0] = (50.0 * t).sin(),
            0.0,
            10.0,
            vec![0.0],
        );
        assert!(matches!(
            solve_rk45(p, &cfg),
            Err(IntegrateError::MaxSteps(3))
        ));
    }

    #[test]
    fn nan_rhs_error() {
        let p = OdeProblem::new(
            |t, _y: &[f64], dy: &mut [f64]| dy[0] = if t > 0.5 { f64::NAN } else { 1.0 },
            0.0,
            1.0,
            vec![0.0],
        );
        assert!(matches!(
            solve_rk45(p, &IntegratorConfig::default()),
            Err(IntegrateError::NonFinite(_))
        ));
    }

    #[test]
    fn bad_span_rejected() {
        let p = OdeProblem::new(
            |_t, _y: &[f64], dy: &mut [f64]| dy[0] = 0.0,
            1.0,
            1.0,
            vec![0.0],
        );
        assert!(solve_rk45(p, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn time_reversal_returns_to_start() {
        let cfg = IntegratorConfig::default();
        let f = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0] + 0.1 * t.sin();
        };
        let y0 = vec![1.0, 0.5];
        let fwd = solve_rk45(OdeProblem::new(f, 0.0, 5.0, y0.clone()), &cfg).unwrap();
        let back = solve_rk45(
            OdeProblem::new(
                move |s: f64, y: &[f64], dy: &mut [f64]| {
                    f(5.0 - s, y, dy);
                    dy.iter_mut().for_each(|v| *v = -*v);
                },
                0.0,
                5.0,
                fwd.y.clone(),
            ),
            &cfg,
        )
        .unwrap();
        for (a, b) in back.y.iter().zip(&y0) {
            assert!(
                (a - b).abs() < 10.0 * (cfg.abs_tol + cfg.rel_tol * b.abs()),
                "{a} vs {b}"
            );
        }
    }
}
