//! Shared domain types: thermal state, quantized control inputs, plant
//! parameters, trajectories and the sliding-window dataset.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound of the inside-temperature sanity band, °C.
pub const T_MIN: f64 = -20.0;
/// Upper bound of the inside-temperature sanity band, °C.
pub const T_MAX: f64 = 80.0;
/// Number of admissible heater levels (0.00, 0.05, ..., 1.00).
pub const HEATER_LEVELS: u8 = 21;
/// Default sampling interval, seconds.
pub const DEFAULT_DT: f64 = 60.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("non-finite value for {0}")]
    NonFinite(&'static str),
    #[error("inside temperature {0} °C outside sanity band [{T_MIN}, {T_MAX}]")]
    OutOfBand(f64),
    #[error("invalid plant parameter {name}: {value} (must be > 0)")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("trajectory must be non-empty with dt > 0 (dt = {dt}, len = {len})")]
    InvalidTrajectory { dt: f64, len: usize },
    #[error("trajectory of {len} samples too short for lookback {lookback} + horizon {horizon}")]
    TooShort {
        len: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("lookback and horizon must be >= 1")]
    ZeroWindow,
    #[error("split ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split of {n} pairs at ratio {ratio} leaves an empty training set")]
    EmptyTrain { n: usize, ratio: f64 },
    #[error("window datasets disagree on lookback/horizon")]
    ShapeMismatch,
    #[error("csv: {0}")]
    Csv(String),
}

/// Inside temperature plus ambient temperature at one instant, °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub t_inside: f64,
    pub t_ambient: f64,
}

impl ThermalState {
    pub fn new(t_inside: f64, t_ambient: f64) -> Result<Self, CoreError> {
        if !t_inside.is_finite() {
            return Err(CoreError::NonFinite("t_inside"));
        }
        if !t_ambient.is_finite() {
            return Err(CoreError::NonFinite("t_ambient"));
        }
        if !(T_MIN..=T_MAX).contains(&t_inside) {
            return Err(CoreError::OutOfBand(t_inside));
        }
        Ok(Self {
            t_inside,
            t_ambient,
        })
    }
}

/// Heater duty cycle on the 0.05 grid and binary fan state.
///
/// The heater is stored as a level index so that every value is an exact
/// grid point; `heater_duty()` returns `level / 20`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ControlInput {
    heater_level: u8,
    fan_on: bool,
}

impl ControlInput {
    pub const OFF: ControlInput = ControlInput {
        heater_level: 0,
        fan_on: false,
    };

    /// Builds a control from a heater level in `0..=20`. Levels above 20 are clamped.
    pub fn from_level(heater_level: u8, fan_on: bool) -> Self {
        Self {
            heater_level: heater_level.min(HEATER_LEVELS - 1),
            fan_on,
        }
    }

    pub fn heater_level(&self) -> u8 {
        self.heater_level
    }

    pub fn heater_duty(&self) -> f64 {
        f64::from(self.heater_level) / f64::from(HEATER_LEVELS - 1)
    }

    pub fn fan_on(&self) -> bool {
        self.fan_on
    }

    pub fn fan(&self) -> f64 {
        if self.fan_on {
            1.0
        } else {
            0.0
        }
    }

    /// Index in the 42-action grid: `fan * 21 + heater_level`.
    pub fn action_index(&self) -> usize {
        usize::from(self.fan_on) * usize::from(HEATER_LEVELS) + usize::from(self.heater_level)
    }

    pub fn from_action_index(idx: usize) -> Self {
        let levels = usize::from(HEATER_LEVELS);
        Self::from_level((idx % levels) as u8, (idx / levels) % 2 == 1)
    }

    /// All 42 admissible controls in action-index order.
    pub fn all() -> impl Iterator<Item = ControlInput> {
        (0..2 * usize::from(HEATER_LEVELS)).map(Self::from_action_index)
    }
}

/// Clamps the heater to [0, 1] and rounds it to the nearest multiple of
/// 0.05; rounds the fan to the nearest of {0, 1}. Ties round up.
pub fn quantize_control(raw_heater: f64, raw_fan: f64) -> Result<ControlInput, CoreError> {
    if !raw_heater.is_finite() {
        return Err(CoreError::NonFinite("heater"));
    }
    if !raw_fan.is_finite() {
        return Err(CoreError::NonFinite("fan"));
    }
    let scale = f64::from(HEATER_LEVELS - 1);
    let level = (raw_heater.clamp(0.0, 1.0) * scale + 0.5).floor() as u8;
    Ok(ControlInput::from_level(level, raw_fan >= 0.5))
}

/// Physical constants of the enclosure, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Heater rated power, W.
    pub h_max: f64,
    /// Fan volumetric flow, m³/s.
    pub f_max: f64,
    /// Enclosure air volume, m³.
    pub volume: f64,
    /// Air density, kg/m³.
    pub rho: f64,
    /// Specific heat of air, J/(kg·K).
    pub cp: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            h_max: 100.0,
            f_max: 68.0 / 3600.0,
            volume: 0.5 * 0.5 * 0.6,
            rho: 1.2,
            cp: 1005.0,
        }
    }
}

impl PlantParams {
    /// Builds parameters taking the fan flow in m³/h.
    pub fn with_flow_per_hour(
        h_max: f64,
        f_max_m3_per_h: f64,
        volume: f64,
        rho: f64,
        cp: f64,
    ) -> Result<Self, CoreError> {
        let p = Self {
            h_max,
            f_max: f_max_m3_per_h / 3600.0,
            volume,
            rho,
            cp,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for (name, value) in [
            ("h_max", self.h_max),
            ("f_max", self.f_max),
            ("volume", self.volume),
            ("rho", self.rho),
            ("cp", self.cp),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(CoreError::InvalidParam { name, value });
            }
        }
        Ok(())
    }

    /// Heat capacity of the enclosed air, J/K.
    pub fn heat_capacity(&self) -> f64 {
        self.rho * self.volume * self.cp
    }
}

/// One sampling instant: the state measured at the instant and the control
/// applied over the following interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: ThermalState,
    pub control: ControlInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    samples: Vec<Sample>,
}

const CSV_HEADER: [&str; 5] = [
    "t_seconds",
    "t_inside",
    "t_ambient",
    "heater_duty",
    "fan_on",
];

impl Trajectory {
    pub fn new(dt: f64, samples: Vec<Sample>) -> Result<Self, CoreError> {
        if !(dt.is_finite() && dt > 0.0) || samples.is_empty() {
            return Err(CoreError::InvalidTrajectory {
                dt,
                len: samples.len(),
            });
        }
        Ok(Self { dt, samples })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inside_temps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.t_inside).collect()
    }

    pub fn controls(&self) -> Vec<ControlInput> {
        self.samples.iter().map(|s| s.control).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CoreError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| CoreError::Csv(e.to_string());
        w.write_record(CSV_HEADER).map_err(err)?;
        for (k, s) in self.samples.iter().enumerate() {
            w.write_record([
                (k as f64 * self.dt).to_string(),
                s.state.t_inside.to_string(),
                s.state.t_ambient.to_string(),
                s.control.heater_duty().to_string(),
                u8::from(s.control.fan_on()).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| CoreError::Csv(e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to an in-memory buffer cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses the CSV layout written by [`Trajectory::write_csv`]. The
    /// sampling interval is taken from the first two timestamps (60 s for a
    /// single-row file).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, CoreError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| CoreError::Csv(e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(CoreError::Csv(format!("unexpected header {header:?}")));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| CoreError::Csv(e.to_string()))?;
            let field = |i: usize| -> Result<f64, CoreError> {
                rec.get(i)
                    .ok_or_else(|| CoreError::Csv("short row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| CoreError::Csv(format!("{}: {e}", CSV_HEADER[i])))
            };
            times.push(field(0)?);
            let state = ThermalState::new(field(1)?, field(2)?)?;
            let control = quantize_control(field(3)?, field(4)?)?;
            samples.push(Sample { state, control });
        }
        let dt = if times.len() >= 2 {
            times[1] - times[0]
        } else {
            DEFAULT_DT
        };
        Self::new(dt, samples)
    }
}

/// One input window and the state `horizon` steps after its last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub input: Vec<Sample>,
    pub target: ThermalState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub lookback: usize,
    pub horizon: usize,
    pub split_ratio: f64,
    pub pairs: Vec<WindowPair>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Appends the pairs of `other`; windows never straddle the boundary
    /// between the two source trajectories.
    pub fn extend(&mut self, other: WindowedDataset) -> Result<(), CoreError> {
        if other.lookback != self.lookback || other.horizon != self.horizon {
            return Err(CoreError::ShapeMismatch);
        }
        self.pairs.extend(other.pairs);
        Ok(())
    }
}

/// Stride-1 sliding windows over a trajectory.
pub fn make_windows(
    traj: &Trajectory,
    lookback: usize,
    horizon: usize,
) -> Result<WindowedDataset, CoreError> {
    if lookback == 0 || horizon == 0 {
        return Err(CoreError::ZeroWindow);
    }
    let n = traj.len();
    if n < lookback + horizon {
        return Err(CoreError::TooShort {
            len: n,
            lookback,
            horizon,
        });
    }
    let s = traj.samples();
    let pairs = (0..=n - lookback - horizon)
        .map(|i| WindowPair {
            input: s[i..i + lookback].to_vec(),
            target: s[i + lookback - 1 + horizon].state,
        })
        .collect();
    Ok(WindowedDataset {
        lookback,
        horizon,
        split_ratio: 0.8,
        pairs,
    })
}

/// Chronological split: the first `floor(ratio * n)` pairs train, the rest validate.
pub fn chrono_split(
    ds: &WindowedDataset,
    ratio: f64,
) -> Result<(WindowedDataset, WindowedDataset), CoreError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::BadRatio(ratio));
    }
    if ds.pairs.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let n = ds.pairs.len();
    let cut = (ratio * n as f64).floor() as usize;
    if cut == 0 {
        return Err(CoreError::EmptyTrain { n, ratio });
    }
    let part = |pairs: &[WindowPair]| WindowedDataset {
        lookback: ds.lookback,
        horizon: ds.horizon,
        split_ratio: ratio,
        pairs: pairs.to_vec(),
    };
    Ok((part(&ds.pairs[..cut]), part(&ds.pairs[cut..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat_traj(n: usize) -> Trajectory {
        let samples = (0..n)
            .map(|k| Sample {
                state: ThermalState::new(22.0 + k as f64 * 0.01, 22.0).unwrap(),
                control: ControlInput::OFF,
            })
            .collect();
        Trajectory::new(60.0, samples).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let q = quantize_control(0.52, 0.7).unwrap();
        assert_eq!((q.heater_duty(), q.fan_on()), (0.5, true));
        let q = quantize_control(0.0, 0.0).unwrap();
        assert_eq!((q.heater_duty(), q.fan_on()), (0.0, false));
        let q = quantize_control(1.37, 0.49).unwrap();
        assert_eq!((q.heater_duty(), q.fan_on()), (1.0, false));
    }

    #[test]
    fn quantize_matches_grid_enumeration() {
        // Nearest of the 21 grid levels after clamping, ties toward the larger level.
        let grid: Vec<f64> = (0..21).map(|k| k as f64 / 20.0).collect();
        for i in -40..=140 {
            let raw = i as f64 * 0.0123;
            let c = raw.clamp(0.0, 1.0);
            let mut best = 0.0;
            let mut best_d = f64::INFINITY;
            for &g in &grid {
                let d = (g - c).abs();
                if d < best_d - 1e-12 || ((d - best_d).abs() <= 1e-12 && g > best) {
                    best = g;
                    best_d = d;
                }
            }
            let q = quantize_control(raw, 0.0).unwrap();
            assert_eq!(q.heater_duty(), best, "raw {raw}");
        }
    }

    #[test]
    fn quantize_ties_round_up() {
        assert_eq!(quantize_control(0.025, 0.5).unwrap().heater_level(), 1);
        assert!(quantize_control(0.0, 0.5).unwrap().fan_on());
    }

    #[test]
    fn quantize_rejects_non_finite() {
        assert!(quantize_control(f64::NAN, 0.0).is_err());
        assert!(quantize_control(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn heater_values_are_exact_grid_points() {
        for c in ControlInput::all() {
            let d = c.heater_duty();
            assert_eq!((d * 20.0).round() / 20.0, d);
        }
        assert_eq!(ControlInput::all().count(), 42);
    }

    #[test]
    fn action_index_round_trips() {
        for i in 0..42 {
            assert_eq!(ControlInput::from_action_index(i).action_index(), i);
        }
    }

    #[test]
    fn state_sanity_band() {
        assert!(ThermalState::new(81.0, 22.0).is_err());
        assert!(ThermalState::new(-21.0, 22.0).is_err());
        assert!(ThermalState::new(f64::NAN, 22.0).is_err());
        assert!(ThermalState::new(25.0, 22.0).is_ok());
    }

    #[test]
    fn default_params() {
        let p = PlantParams::default();
        assert_eq!(p.h_max, 100.0);
        assert!((p.f_max - 68.0 / 3600.0).abs() < 1e-15);
        assert!((p.volume - 0.15).abs() < 1e-12);
        assert!((p.heat_capacity() - 180.9).abs() < 1e-9);
        assert!(PlantParams::with_flow_per_hour(100.0, 68.0, 0.15, 1.2, 0.0).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&flat_traj(212), 10, 1).unwrap().len(), 202);
        assert_eq!(make_windows(&flat_traj(11), 10, 1).unwrap().len(), 1);
        assert!(make_windows(&flat_traj(10), 10, 1).is_err());
    }

    #[test]
    fn window_contents() {
        let t = flat_traj(15);
        let ds = make_windows(&t, 10, 2).unwrap();
        let p = &ds.pairs[3];
        assert_eq!(p.input[0], t.samples()[3]);
        assert_eq!(p.input[9], t.samples()[12]);
        assert_eq!(p.target, t.samples()[14].state);
    }

    #[test]
    fn split_examples() {
        let ds = make_windows(&flat_traj(212), 10, 1).unwrap();
        let (tr, va) = chrono_split(&ds, 0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (161, 41));
        let ds = make_windows(&flat_traj(20), 10, 1).unwrap();
        let (tr, va) = chrono_split(&ds, 0.5).unwrap();
        assert_eq!((tr.len(), va.len()), (5, 5));
        let ds = make_windows(&flat_traj(11), 10, 1).unwrap();
        assert!(matches!(
            chrono_split(&ds, 0.8),
            Err(CoreError::EmptyTrain { .. })
        ));
        assert!(chrono_split(&ds, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let t = flat_traj(3);
        let s = t.to_csv_string();
        assert!(s.starts_with("t_seconds,t_inside,t_ambient,heater_duty,fan_on\n"));
        let back = Trajectory::read_csv(s.as_bytes()).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn window_count_formula(n in 2usize..400, lookback in 1usize..20, horizon in 1usize..5) {
            prop_assume!(n >= lookback + horizon);
            let ds = make_windows(&flat_traj(n), lookback, horizon).unwrap();
            prop_assert_eq!(ds.len(), n - lookback - horizon + 1);
        }

        #[test]
        fn split_concat_reproduces_sequence(n in 12usize..200, ratio in 0.05f64..0.95) {
            let ds = make_windows(&flat_traj(n), 10, 1).unwrap();
            if let Ok((tr, va)) = chrono_split(&ds, ratio) {
                let mut joined = tr.pairs.clone();
                joined.extend(va.pairs.clone());
                prop_assert_eq!(joined, ds.pairs.clone());
            }
        }

        #[test]
        fn quantize_idempotent(h in -1.0f64..2.0, f in -1.0f64..2.0) {
            let q = quantize_control(h, f).unwrap();
            prop_assert_eq!(quantize_control(q.heater_duty(), q.fan()).unwrap(), q);
        }
    }
}
