//! The stand-in for the physical enclosure: a thermal simulator that adds
//! wall losses, a lagged heater and fan leakage on top of the ideal energy
//! balance, plus a noisy temperature sensor and scripted data generation.

mod excitation;
pub mod scenario;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrate::{solve_rk45, IntegrateError, IntegratorConfig, OdeProblem};
use crate::types::{
    ControlInput, CoreError, PlantParams, Sample, ThermalState, Trajectory, DEFAULT_DT,
};

pub use excitation::ExcitationSpec;
pub use scenario::{DatasetSpec, ScenarioKind, ScenarioSpec, Schedule, TrainingSetSpec};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("invalid plant config: {0}")]
    Config(String),
    #[error("step {step}: {source}")]
    AtStep { step: usize, source: CoreError },
    #[error("empty input schedule")]
    EmptySchedule,
    #[error("scenario file: {0}")]
    Parse(String),
}

/// Ambient temperature as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AmbientProfile {
    Constant(f64),
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period_s: f64,
        #[serde(default)]
        phase_s: f64,
    },
}

impl Default for AmbientProfile {
    fn default() -> Self {
        AmbientProfile::Constant(22.0)
    }
}

impl AmbientProfile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            AmbientProfile::Constant(v) => v,
            AmbientProfile::Sinusoid {
                mean,
                amplitude,
                period_s,
                phase_s,
            } => mean + amplitude * (std::f64::consts::TAU * (t + phase_s) / period_s).sin(),
        }
    }
}

/// Plant configuration; the mismatch terms default to the values that
/// separate the ideal energy balance from the "real" enclosure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub params: PlantParams,
    /// Conductive loss through the walls, W/K.
    pub wall_loss_coeff: f64,
    /// Time constant of the heater's delivered power, s.
    pub heater_lag_tau: f64,
    /// Fraction of the fan flow that still leaks through with the fan off.
    pub fan_leak_frac: f64,
    /// Standard deviation of the temperature sensor noise, °C.
    pub sensor_noise_sd: f64,
    pub rng_seed: u64,
    pub ambient: AmbientProfile,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            params: PlantParams::default(),
            wall_loss_coeff: 1.5,
            heater_lag_tau: 120.0,
            fan_leak_frac: 0.02,
            sensor_noise_sd: 0.25,
            rng_seed: 0,
            ambient: AmbientProfile::default(),
            rel_tol: 1e-6,
            abs_tol: 1e-8,
        }
    }
}

impl PlantConfig {
    /// A plant with every mismatch term switched off: identical to the ideal balance.
    pub fn ideal(params: PlantParams) -> Self {
        Self {
            params,
            wall_loss_coeff: 0.0,
            heater_lag_tau: 0.0,
            fan_leak_frac: 0.0,
            sensor_noise_sd: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        self.params.validate()?;
        let bad = |what: &str| Err(PlantError::Config(what.to_string()));
        if !(self.wall_loss_coeff >= 0.0) {
            return bad("wall_loss_coeff must be >= 0");
        }
        if !(self.heater_lag_tau >= 0.0) {
            return bad("heater_lag_tau must be >= 0");
        }
        if !(0.0..1.0).contains(&self.fan_leak_frac) {
            return bad("fan_leak_frac must be in [0, 1)");
        }
        if !(self.sensor_noise_sd >= 0.0) {
            return bad("sensor_noise_sd must be >= 0");
        }
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return bad("integrator tolerances must be > 0");
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::with_tolerances(self.rel_tol, self.abs_tol)
    }
}

/// Right-hand side of the ideal energy balance, K/s.
///
/// `heater_power` in W, `flow` in m³/s.
pub fn energy_balance_rhs(
    params: &PlantParams,
    t_inside: f64,
    t_ambient: f64,
    heater_power: f64,
    flow: f64,
) -> f64 {
    heater_power / (params.rho * params.volume * params.cp)
        - flow * (t_inside - t_ambient) / params.volume
}

/// Hidden plant state: the power currently delivered by the lagged heater, W.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantLatent {
    pub delivered_power: f64,
}

/// Advances the plant by `dt` seconds starting at absolute time `t` with
/// the control held constant.
pub fn plant_step(
    cfg: &PlantConfig,
    state: ThermalState,
    u: ControlInput,
    latent: PlantLatent,
    t: f64,
    dt: f64,
) -> Result<(ThermalState, PlantLatent), PlantError> {
    if !(dt > 0.0) {
        return Err(PlantError::Config(format!("dt must be > 0, got {dt}")));
    }
    ThermalState::new(state.t_inside, state.t_ambient)?;
    let p = cfg.params;
    let flow = p.f_max * (u.fan() + (1.0 - u.fan()) * cfg.fan_leak_frac);
    let command = u.heater_duty() * p.h_max;
    let heat_cap = p.heat_capacity();
    let wall = cfg.wall_loss_coeff;
    let ambient = cfg.ambient;
    let integ = cfg.integrator();

    let (t_next, latent_next) = if cfg.heater_lag_tau > 0.0 {
        let tau = cfg.heater_lag_tau;
        let rhs = move |s: f64, y: &[f64], dy: &mut [f64]| {
            let ta = ambient.at(s);
            dy[0] = energy_balance_rhs(&p, y[0], ta, y[1], flow) - wall * (y[0] - ta) / heat_cap;
            dy[1] = (command - y[1]) / tau;
        };
        let sol = solve_rk45(
            OdeProblem::new(rhs, t, t + dt, vec![state.t_inside, latent.delivered_power]),
            &integ,
        )?;
        (sol.y[0], sol.y[1])
    } else {
        let rhs = move |s: f64, y: &[f64], dy: &mut [f64]| {
            let ta = ambient.at(s);
            dy[0] = energy_balance_rhs(&p, y[0], ta, command, flow) - wall * (y[0] - ta) / heat_cap;
        };
        let sol = solve_rk45(
            OdeProblem::new(rhs, t, t + dt, vec![state.t_inside]),
            &integ,
        )?;
        (sol.y[0], command)
    };
    let next = ThermalState::new(t_next, ambient.at(t + dt))?;
    Ok((
        next,
        PlantLatent {
            delivered_power: latent_next,
        },
    ))
}

/// Adds seeded Gaussian noise to the inside temperature.
pub fn read_sensor(state: ThermalState, cfg: &PlantConfig, rng: &mut ChaCha8Rng) -> ThermalState {
    if cfg.sensor_noise_sd == 0.0 {
        return state;
    }
    let normal = Normal::new(0.0, cfg.sensor_noise_sd).expect("sd validated >= 0");
    ThermalState {
        t_inside: state.t_inside + normal.sample(rng),
        t_ambient: state.t_ambient,
    }
}

/// Mixes a configuration seed with a per-task seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single-owner plant instance: true state, heater latent, clock and sensor RNG.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    state: ThermalState,
    latent: PlantLatent,
    time: f64,
    dt: f64,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(cfg: PlantConfig, initial_temp: f64) -> Result<Self, PlantError> {
        cfg.validate()?;
        let state = ThermalState::new(initial_temp, cfg.ambient.at(0.0))?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            cfg,
            state,
            latent: PlantLatent::default(),
            time: 0.0,
            dt: DEFAULT_DT,
        })
    }

    /// Starts the heater already delivering `power` W (steady operation).
    pub fn with_delivered_power(mut self, power: f64) -> Self {
        self.latent.delivered_power = power;
        self
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn true_state(&self) -> ThermalState {
        self.state
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sense(&mut self) -> ThermalState {
        read_sensor(self.state, &self.cfg, &mut self.rng)
    }

    pub fn step(&mut self, u: ControlInput) -> Result<ThermalState, PlantError> {
        let (next, latent) = plant_step(&self.cfg, self.state, u, self.latent, self.time, self.dt)?;
        self.state = next;
        self.latent = latent;
        self.time += self.dt;
        Ok(next)
    }
}

/// Simulates a dataset: the sensor reading at each instant paired with the
/// control applied over the following interval.
pub fn generate_dataset(spec: &DatasetSpec, cfg: &PlantConfig) -> Result<Trajectory, PlantError> {
    let mut cfg = *cfg;
    cfg.ambient = spec.ambient;
    cfg.rng_seed = mix_seed(cfg.rng_seed, spec.seed);
    let mut plant = Plant::new(cfg, spec.initial_temp)?;
    let mut samples = Vec::new();
    match &spec.schedule {
        Schedule::Scripted(controls) => {
            if controls.is_empty() {
                return Err(PlantError::EmptySchedule);
            }
            for (k, &u) in controls.iter().enumerate() {
                let measured = plant.sense();
                samples.push(Sample {
                    state: measured,
                    control: u,
                });
                if k + 1 < controls.len() {
                    plant.step(u).map_err(|e| at_step(k, e))?;
                }
            }
        }
        Schedule::Excitation(exc) => {
            if exc.steps == 0 {
                return Err(PlantError::EmptySchedule);
            }
            let mut operator = exc.operator(mix_seed(spec.seed, 0xE0C1));
            for k in 0..exc.steps {
                let measured = plant.sense();
                let u = operator.next(measured);
                samples.push(Sample {
                    state: measured,
                    control: u,
                });
                if k + 1 < exc.steps {
                    plant.step(u).map_err(|e| at_step(k, e))?;
                }
            }
        }
    }
    Ok(Trajectory::new(plant.dt(), samples)?)
}

fn at_step(step: usize, e: PlantError) -> PlantError {
    match e {
        PlantError::Core(source) => PlantError::AtStep { step, source },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::quantize_control;
    use rand::Rng;

    fn state(t: f64, ta: f64) -> ThermalState {
        ThermalState::new(t, ta).unwrap()
    }

    #[test]
    fn equilibrium_without_losses() {
        let cfg = PlantConfig {
            wall_loss_coeff: 0.0,
            fan_leak_frac: 0.0,
            ..PlantConfig::default()
        };
        let (next, _) = plant_step(
            &cfg,
            state(22.0, 22.0),
            ControlInput::OFF,
            PlantLatent::default(),
            0.0,
            60.0,
        )
        .unwrap();
        assert_eq!(next.t_inside, 22.0);
    }

    #[test]
    fn fan_moves_toward_ambient() {
        let cfg = PlantConfig::default();
        let u = quantize_control(0.0, 1.0).unwrap();
        let (next, _) = plant_step(
            &cfg,
            state(30.0, 22.0),
            u,
            PlantLatent::default(),
            0.0,
            60.0,
        )
        .unwrap();
        assert!(next.t_inside < 30.0 && next.t_inside > 22.0);
    }

    #[test]
    fn heater_step_matches_fine_euler() {
        let cfg = PlantConfig {
            ambient: AmbientProfile::Constant(25.0),
            ..PlantConfig::default()
        };
        let u = quantize_control(1.0, 0.0).unwrap();
        let (next, _) = plant_step(
            &cfg,
            state(25.0, 25.0),
            u,
            PlantLatent::default(),
            0.0,
            60.0,
        )
        .unwrap();
        // Forward Euler at 0.01 s on the same balance, written out independently.
        let p = PlantParams::default();
        let c = 1.2 * 0.15 * 1005.0;
        let (mut t_in, mut pow) = (25.0f64, 0.0f64);
        let h = 0.01;
        for _ in 0..6000 {
            let flow = 0.02 * p.f_max;
            let dt_in = pow / c - flow * (t_in - 25.0) / 0.15 - 1.5 * (t_in - 25.0) / c;
            let dpow = (100.0 - pow) / 120.0;
            t_in += h * dt_in;
            pow += h * dpow;
        }
        assert!(
            (next.t_inside - t_in).abs() < 0.01,
            "{} vs {t_in}",
            next.t_inside
        );
    }

    #[test]
    fn heater_never_cools_and_monotone_in_duty() {
        let cfg = PlantConfig::default();
        let mut prev = f64::NEG_INFINITY;
        for level in 0..21 {
            let u = ControlInput::from_level(level, false);
            let (next, _) = plant_step(
                &cfg,
                state(28.0, 22.0),
                u,
                PlantLatent {
                    delivered_power: 10.0,
                },
                0.0,
                60.0,
            )
            .unwrap();
            assert!(next.t_inside >= prev);
            prev = next.t_inside;
        }
    }

    #[test]
    fn bounded_steady_state_with_wall_loss() {
        let cfg = PlantConfig {
            wall_loss_coeff: 3.0,
            fan_leak_frac: 0.0,
            ..PlantConfig::default()
        };
        let mut plant = Plant::new(cfg, 22.0).unwrap();
        let u = ControlInput::from_level(20, false);
        for _ in 0..200 {
            plant.step(u).unwrap();
        }
        let expected = 22.0 + 100.0 / 3.0;
        assert!((plant.true_state().t_inside - expected).abs() < 0.1);
    }

    #[test]
    fn out_of_band_state_rejected() {
        let cfg = PlantConfig::default();
        let bad = ThermalState {
            t_inside: 95.0,
            t_ambient: 22.0,
        };
        assert!(plant_step(
            &cfg,
            bad,
            ControlInput::OFF,
            PlantLatent::default(),
            0.0,
            60.0
        )
        .is_err());
    }

    #[test]
    fn sensor_noise_statistics_and_determinism() {
        let cfg = PlantConfig::default();
        let s = state(25.0, 22.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| read_sensor(s, &cfg, &mut rng).t_inside - 25.0)
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64)
            .sqrt();
        assert!((0.23..=0.27).contains(&sd), "{sd}");
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            assert_eq!(read_sensor(s, &cfg, &mut a), read_sensor(s, &cfg, &mut b));
        }
        let quiet = PlantConfig {
            sensor_noise_sd: 0.0,
            ..cfg
        };
        assert_eq!(read_sensor(s, &quiet, &mut a), s);
    }

    #[test]
    fn flat_dataset_from_zero_schedule() {
        let cfg = PlantConfig {
            sensor_noise_sd: 0.0,
            ..PlantConfig::default()
        };
        let spec = DatasetSpec {
            name: "flat".into(),
            ambient: AmbientProfile::Constant(22.0),
            initial_temp: 22.0,
            seed: 1,
            schedule: Schedule::Scripted(vec![ControlInput::OFF; 30]),
        };
        let traj = generate_dataset(&spec, &cfg).unwrap();
        assert_eq!(traj.len(), 30);
        assert!(traj.inside_temps().iter().all(|&t| t == 22.0));
    }

    #[test]
    fn schedule_leaving_band_is_an_error() {
        let cfg = PlantConfig::default();
        let spec = DatasetSpec {
            name: "hot".into(),
            ambient: AmbientProfile::Constant(40.0),
            initial_temp: 40.0,
            seed: 1,
            schedule: Schedule::Scripted(vec![ControlInput::from_level(20, false); 100]),
        };
        assert!(matches!(
            generate_dataset(&spec, &cfg),
            Err(PlantError::AtStep { .. })
        ));
    }

    #[test]
    fn random_states_monotone_in_heater() {
        let cfg = PlantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = state(rng.gen_range(20.0..40.0), 22.0);
            let lat = PlantLatent {
                delivered_power: rng.gen_range(0.0..100.0),
            };
            let fan = rng.gen_bool(0.5);
            let lo = rng.gen_range(0..20u8);
            let a = plant_step(&cfg, s, ControlInput::from_level(lo, fan), lat, 0.0, 60.0)
                .unwrap()
                .0;
            let b = plant_step(
                &cfg,
                s,
                ControlInput::from_level(lo + 1, fan),
                lat,
                0.0,
                60.0,
            )
            .unwrap()
            .0;
            assert!(b.t_inside >= a.t_inside);
        }
    }
}
