use crate::integrate::{solve_rk45, IntegrateError, IntegratorConfig, OdeProblem};
use crate::nnet::Checkpoint;
use crate::plant::energy_balance_rhs;
use crate::types::{ControlInput, PlantParams, Sample, ThermalState, DEFAULT_DT};

use super::{check_history, ModelError, Predictor};

/// Integrates the ideal energy balance, plus a constant source term in K/s,
/// over `dt` with the ambient and the control held fixed.
pub fn integrate_balance(
    params: &PlantParams,
    integ: &IntegratorConfig,
    t_inside: f64,
    t_ambient: f64,
    u: ControlInput,
    source: f64,
    dt: f64,
) -> Result<f64, IntegrateError> {
    let p = *params;
    let heat = u.heater_duty() * p.h_max;
    let flow = p.f_max * u.fan();
    let rhs = move |_s: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = energy_balance_rhs(&p, y[0], t_ambient, heat, flow) + source;
    };
    Ok(solve_rk45(OdeProblem::new(rhs, 0.0, dt, vec![t_inside]), integ)?.y[0])
}

/// The physics-based model: no trained parameters, only the latest state matters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbmModel {
    pub params: PlantParams,
    pub dt: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl PbmModel {
    pub const KIND: &'static str = "pbm";

    pub fn new(params: PlantParams) -> Self {
        Self {
            params,
            dt: DEFAULT_DT,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::with_tolerances(self.rel_tol, self.abs_tol)
    }

    /// One step from `state` under `u` with an extra constant source term.
    pub fn step_with_source(
        &self,
        state: ThermalState,
        u: ControlInput,
        source: f64,
    ) -> Result<f64, ModelError> {
        Ok(integrate_balance(
            &self.params,
            &self.integrator(),
            state.t_inside,
            state.t_ambient,
            u,
            source,
            self.dt,
        )?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        ck.expect_kind(Self::KIND)?;
        let params = PlantParams {
            h_max: ck.meta_f64("h_max")?,
            f_max: ck.meta_f64("f_max")?,
            volume: ck.meta_f64("volume")?,
            rho: ck.meta_f64("rho")?,
            cp: ck.meta_f64("cp")?,
        };
        params.validate()?;
        Ok(Self {
            params,
            dt: ck.meta_f64("dt")?,
            rel_tol: ck.meta_f64("rel_tol")?,
            abs_tol: ck.meta_f64("abs_tol")?,
        })
    }

    pub(crate) fn write_meta(&self, ck: &mut Checkpoint) {
        let p = self.params;
        ck.set_meta("h_max", p.h_max)
            .set_meta("f_max", p.f_max)
            .set_meta("volume", p.volume)
            .set_meta("rho", p.rho)
            .set_meta("cp", p.cp)
            .set_meta("dt", self.dt)
            .set_meta("rel_tol", self.rel_tol)
            .set_meta("abs_tol", self.abs_tol);
    }
}

impl Predictor for PbmModel {
    fn name(&self) -> &'static str {
        "PBM"
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
        let t = self.step_with_source(last, u_next, 0.0)?;
        Ok(ThermalState::new(t, last.t_ambient)?)
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Self::KIND);
        self.write_meta(&mut ck);
        ck
    }
}
