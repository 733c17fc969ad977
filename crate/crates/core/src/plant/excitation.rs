//! Seeded "operator" that scripts heater and fan inputs for data collection:
//! it hops between random setpoints inside a temperature band and drives the
//! enclosure there with a feed-forward plus proportional heater rule,
//! dithered heater levels and periodic fan pulses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{quantize_control, ControlInput, ThermalState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationSpec {
    /// Number of samples to record.
    pub steps: usize,
    /// Setpoints are drawn uniformly from this band, °C.
    pub range: (f64, f64),
    /// Setpoint hold duration bounds, steps.
    pub hold_min: usize,
    pub hold_max: usize,
    /// Heater duty per kelvin above ambient needed to hold a temperature.
    pub duty_per_kelvin: f64,
    /// Proportional correction, duty per kelvin of error.
    pub gain: f64,
    pub heater_max: f64,
    /// Probability of perturbing the heater by a random number of levels.
    pub dither: f64,
    /// Fan switches on when the measurement exceeds the setpoint by this much, K.
    pub fan_band: f64,
    /// A fan pulse is forced after this many consecutive fan-off steps (0 disables).
    pub max_fan_off: usize,
    /// Probability of an unprompted fan pulse.
    pub fan_pulse_prob: f64,
}

impl Default for ExcitationSpec {
    fn default() -> Self {
        Self {
            steps: 212,
            range: (22.0, 36.0),
            hold_min: 10,
            hold_max: 30,
            duty_per_kelvin: 0.015,
            gain: 0.02,
            heater_max: 0.4,
            dither: 0.3,
            fan_band: 1.0,
            max_fan_off: 8,
            fan_pulse_prob: 0.03,
        }
    }
}

impl ExcitationSpec {
    pub(crate) fn operator(&self, seed: u64) -> Operator {
        Operator {
            spec: *self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            setpoint: 0.5 * (self.range.0 + self.range.1),
            hold_left: 0,
            fan_off_run: 0,
        }
    }
}

pub(crate) struct Operator {
    spec: ExcitationSpec,
    rng: ChaCha8Rng,
    setpoint: f64,
    hold_left: usize,
    fan_off_run: usize,
}

impl Operator {
    pub(crate) fn next(&mut self, measured: ThermalState) -> ControlInput {
        let s = &self.spec;
        if self.hold_left == 0 {
            let (lo, hi) = s.range;
            self.setpoint = if hi > lo {
                self.rng.gen_range(lo..hi)
            } else {
                lo
            };
            self.hold_left = if s.hold_max > s.hold_min {
                self.rng.gen_range(s.hold_min..=s.hold_max)
            } else {
                s.hold_min.max(1)
            };
        }
        self.hold_left -= 1;

        let err = self.setpoint - measured.t_inside;
        let mut duty = s.duty_per_kelvin * (self.setpoint - measured.t_ambient) + s.gain * err;
        if self.rng.gen_bool(s.dither.clamp(0.0, 1.0)) {
            duty += 0.05 * f64::from(self.rng.gen_range(-2i32..=2));
        }
        let duty = duty.clamp(0.0, s.heater_max);

        let forced = s.max_fan_off > 0 && self.fan_off_run >= s.max_fan_off;
        let fan =
            err < -s.fan_band || forced || self.rng.gen_bool(s.fan_pulse_prob.clamp(0.0, 1.0));
        if fan {
            self.fan_off_run = 0;
        } else {
            self.fan_off_run += 1;
        }
        quantize_control(duty, if fan { 1.0 } else { 0.0 }).expect("finite duty")
    }
}
