//! Prints dataset ranges for the shipped training sets and designs scripted
//! test schedules with the excitation operator.
//!
//! Usage: cargo run --example design_schedules -- [ambient lo hi hold_min hold_max heater_max max_fan_off fan_prob seed steps]

use twinlab::plant::scenario::{builtin_training_sets, format_schedule};
use twinlab::plant::{
    generate_dataset, AmbientProfile, DatasetSpec, ExcitationSpec, Plant, PlantConfig, Schedule,
};
use twinlab::types::PlantParams;

fn main() {
    let cfg = PlantConfig::default();
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().unwrap())
        .collect();
    if args.is_empty() {
        for set in builtin_training_sets() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for ds in set.datasets() {
                let t = generate_dataset(&ds, &cfg).unwrap();
                let temps = t.inside_temps();
                let a = temps.iter().cloned().fold(f64::INFINITY, f64::min);
                let b = temps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let fan = t.controls().iter().filter(|c| c.fan_on()).count();
                println!("{}: [{a:.2}, {b:.2}] fan {fan}", ds.name);
                lo = lo.min(a);
                hi = hi.max(b);
            }
            println!(
                "{} overall [{lo:.2}, {hi:.2}] target {:?}",
                set.name, set.range
            );
        }
        return;
    }
    let exc = ExcitationSpec {
        steps: args[9] as usize,
        range: (args[1], args[2]),
        hold_min: args[3] as usize,
        hold_max: args[4] as usize,
        heater_max: args[5],
        max_fan_off: args[6] as usize,
        fan_pulse_prob: args[7],
        ..ExcitationSpec::default()
    };
    let spec = DatasetSpec {
        name: "design".into(),
        ambient: AmbientProfile::Constant(args[0]),
        initial_temp: args[1],
        seed: args[8] as u64,
        schedule: Schedule::Excitation(exc),
    };
    let t = generate_dataset(&spec, &cfg).unwrap();
    let temps = t.inside_temps();
    let a = temps.iter().cloned().fold(f64::INFINITY, f64::min);
    let b = temps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Open-loop ideal-balance rollout on the same inputs.
    let mut ideal = PlantConfig::ideal(PlantParams::default());
    ideal.ambient = AmbientProfile::Constant(args[0]);
    let mut pbm = Plant::new(ideal, temps[0]).unwrap();
    let mut pbm_max: f64 = 0.0;
    let mut mae = 0.0;
    for (k, u) in t.controls().iter().enumerate().take(t.len() - 1) {
        let s = pbm.step(*u).map(|s| s.t_inside).unwrap_or(f64::NAN);
        pbm_max = pbm_max.max(s);
        mae += (s - temps[k + 1]).abs();
    }
    println!(
        "range [{a:.2}, {b:.2}]  ideal max {pbm_max:.2}  ideal mae {:.2}",
        mae / (t.len() - 1) as f64
    );
    println!("{}", format_schedule(&t.controls()));
}
