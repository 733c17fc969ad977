use std::collections::BTreeMap;

use twinlab::plant::scenario::builtin_scenarios;
use twinlab_harness::config::SuiteConfig;
use twinlab_harness::report::{
    ControllerRow, ExperimentReport, MemoryRow, ModelRow, ScenarioRow, CSV_HEADER,
};
use twinlab_harness::{run_controller_suite, run_model_suite, write_run, HarnessError};

fn sample_report() -> ExperimentReport {
    let mut r = ExperimentReport::default();
    r.meta.insert("config_hash".into(), "abc123".into());
    r.meta
        .insert("note".into(), "has, a comma and \"quotes\"".into());
    r.seeds.insert("master".into(), 0);
    r.seeds.insert("test scenario-1".into(), 900);
    r.scenarios.push(ScenarioRow {
        name: "scenario-1".into(),
        kind: "interpolation".into(),
        train_set: "wide".into(),
    });
    r.models.push(ModelRow {
        model: "HAM".into(),
        scenario: "scenario-1".into(),
        mae: Some(0.123456789012345),
        error: None,
        telemetry: Some("telemetry/model_HAM_scenario-1.csv".into()),
    });
    r.models.push(ModelRow {
        model: "LSTM".into(),
        scenario: "scenario-1".into(),
        mae: None,
        error: Some("diverged at epoch 3".into()),
        telemetry: None,
    });
    r.memory.push(MemoryRow {
        model: "HAM".into(),
        train_set: "wide".into(),
        bytes: 123_456,
    });
    r.controllers.push(ControllerRow {
        controller: "MPC".into(),
        reference: "staircase".into(),
        seed: 11,
        mae: Some(0.3),
        true_mae: Some(0.1 + 0.2),
        actuation: 28.6,
        steps: 240,
        aborted: None,
        telemetry: Some("telemetry/control_MPC_staircase_11.csv".into()),
    });
    r.controllers.push(ControllerRow {
        controller: "RL-Off".into(),
        reference: "staircase".into(),
        seed: 12,
        mae: None,
        true_mae: None,
        actuation: 0.0,
        steps: 0,
        aborted: Some("setup: training diverged".into()),
        telemetry: None,
    });
    r
}

#[test]
fn csv_round_trip() {
    let r = sample_report();
    let back = ExperimentReport::from_csv(&r.to_csv()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn json_round_trip() {
    let r = sample_report();
    assert_eq!(ExperimentReport::from_json(&r.to_json()).unwrap(), r);
}

#[test]
fn empty_report_is_header_only() {
    let r = ExperimentReport::default();
    let csv = r.to_csv();
    assert_eq!(csv.trim_end(), CSV_HEADER.join(","));
    assert!(ExperimentReport::from_csv(&csv).unwrap().is_empty());
    let text = r.to_text();
    assert!(!text.contains("Linear") && !text.contains("MPC"), "{text}");
}

#[test]
fn one_model_gives_one_row() {
    let mut r = ExperimentReport::default();
    r.models.push(ModelRow {
        model: "PBM".into(),
        scenario: "scenario-2".into(),
        mae: Some(0.5),
        error: None,
        telemetry: None,
    });
    let csv = r.to_csv();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows, ["model,PBM,scenario-2,mae,0.5"]);
    let text = r.to_text();
    assert_eq!(
        text.lines().filter(|l| l.contains("PBM")).count(),
        1,
        "{text}"
    );
}

#[test]
fn bad_csv_header_rejected() {
    let err = ExperimentReport::from_csv("a,b,c\n").unwrap_err();
    assert!(matches!(err, HarnessError::Parse(_)), "{err}");
}

fn config_key(r: Result<SuiteConfig, HarnessError>) -> String {
    match r {
        Err(HarnessError::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn unknown_key_is_named() {
    assert_eq!(
        config_key(SuiteConfig::resolve(Some("[mpc]\nhorizn = 3\n"), &[])),
        "mpc.horizn"
    );
    assert_eq!(
        config_key(SuiteConfig::resolve(None, &["plant.wal_loss=1".into()])),
        "plant.wal_loss"
    );
    assert_eq!(
        config_key(SuiteConfig::resolve(None, &["nosuch=1".into()])),
        "nosuch"
    );
}

#[test]
fn wrong_type_is_named() {
    assert_eq!(
        config_key(SuiteConfig::resolve(None, &["mpc.horizon=\"ten\"".into()])),
        "mpc.horizon"
    );
}

#[test]
fn semantic_error_is_named() {
    assert_eq!(
        config_key(SuiteConfig::resolve(None, &["data.lookback=0".into()])),
        "data.lookback"
    );
    assert_eq!(
        config_key(SuiteConfig::resolve(
            None,
            &["controllers.controllers=[\"PID\"]".into()]
        )),
        "controllers.controllers"
    );
}

#[test]
fn overrides_win_over_file() {
    let file = "seed = 5\n[mpc]\nhorizon = 4\n";
    let cfg = SuiteConfig::resolve(Some(file), &[]).unwrap();
    assert_eq!((cfg.seed, cfg.mpc.horizon), (5, 4));
    let cfg = SuiteConfig::resolve(Some(file), &["mpc.horizon=6".into(), "seed=9".into()]).unwrap();
    assert_eq!((cfg.seed, cfg.mpc.horizon), (9, 6));
    // later overrides beat earlier ones
    let cfg = SuiteConfig::resolve(None, &["seed=1".into(), "seed=2".into()]).unwrap();
    assert_eq!(cfg.seed, 2);
}

#[test]
fn untouched_keys_keep_defaults() {
    let cfg = SuiteConfig::resolve(Some("[data]\nlookback = 12\n"), &[]).unwrap();
    let mut want = SuiteConfig::default();
    want.data.lookback = 12;
    assert_eq!(cfg, want);
}

#[test]
fn config_toml_round_trip_and_hash() {
    let cfg = SuiteConfig::resolve(None, &["seed=3".into()]).unwrap();
    let again = SuiteConfig::resolve(Some(&cfg.to_toml()), &[]).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
    assert_ne!(cfg.hash(), SuiteConfig::default().hash());
}

#[test]
fn integer_accepted_for_float() {
    let cfg = SuiteConfig::resolve(None, &["controllers.initial_temp=25".into()]).unwrap();
    assert_eq!(cfg.controllers.initial_temp, 25.0);
}

#[test]
fn scenario_kinds_follow_ranges() {
    let all = builtin_scenarios();
    assert_eq!(all.len(), 6);
    for sc in &all {
        let (tr, te) = (sc.train_range, sc.test_range);
        let inside = te.0 >= tr.0 && te.1 <= tr.1;
        assert_eq!(
            sc.kind.to_string() == "interpolation",
            inside,
            "{}",
            sc.name
        );
    }
    assert_eq!(
        all.iter()
            .filter(|s| s.kind.to_string() == "interpolation")
            .count(),
        3
    );
}

fn small_model_config() -> SuiteConfig {
    SuiteConfig::resolve(
        None,
        &[
            "models.models=[\"Linear\", \"PBM\"]".into(),
            "models.scenarios=[\"scenario-1\", \"scenario-4\"]".into(),
        ],
    )
    .unwrap()
}

#[test]
fn model_suite_reruns_identically() {
    let cfg = small_model_config();
    let a = run_model_suite(&cfg).unwrap();
    let b = run_model_suite(&cfg).unwrap();
    assert_eq!(a.report.to_csv(), b.report.to_csv());
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.report.to_text(), b.report.to_text());
    assert_eq!(a.telemetry, b.telemetry);
    assert_eq!(a.report.models.len(), 4);
    assert_eq!(a.report.scenarios.len(), 2);
    assert_eq!(a.report.meta["config_hash"], cfg.hash());
}

#[test]
fn every_number_has_telemetry() {
    let cfg = small_model_config();
    let out = run_model_suite(&cfg).unwrap();
    for row in &out.report.models {
        let path = row.telemetry.as_ref().expect("telemetry path");
        let text = &out.telemetry[path];
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let pairs: Vec<(f64, f64)> = rdr
            .records()
            .map(|r| {
                let r = r.unwrap();
                (r[1].parse().unwrap(), r[2].parse().unwrap())
            })
            .collect();
        let mae = pairs.iter().map(|(p, m)| (p - m).abs()).sum::<f64>() / pairs.len() as f64;
        assert!(
            (mae - row.mae.unwrap()).abs() < 1e-12,
            "{} {}",
            row.model,
            row.scenario
        );
    }
}

#[test]
fn pbm_aggregates_match_exactly() {
    let cfg = SuiteConfig::resolve(None, &["models.models=[\"PBM\"]".into()]).unwrap();
    let out = run_model_suite(&cfg).unwrap();
    let agg = out.report.aggregate("PBM").unwrap();
    assert_eq!(agg.interpolation, agg.extrapolation);
}

#[test]
fn master_seed_moves_everything() {
    let base = small_model_config();
    let mut moved = base.clone();
    moved.seed = 1;
    let a = run_model_suite(&base).unwrap().report;
    let b = run_model_suite(&moved).unwrap().report;
    assert_ne!(
        a.model_mae("PBM", "scenario-1"),
        b.model_mae("PBM", "scenario-1")
    );
    assert_eq!(b.seeds["test scenario-1"], a.seeds["test scenario-1"] + 1);
}

#[test]
fn run_directory_layout() {
    let cfg = small_model_config();
    let out = run_model_suite(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &out).unwrap();
    for f in [
        "config.toml",
        "report.csv",
        "report.json",
        "report.txt",
        "timings.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(ExperimentReport::from_csv(&csv).unwrap(), out.report);
    for row in &out.report.models {
        assert!(dir.path().join(row.telemetry.as_ref().unwrap()).is_file());
    }
    let written = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(SuiteConfig::resolve(Some(&written), &[]).unwrap(), cfg);
}

#[test]
fn controller_suite_pairs_seeds_and_records_setup_failures() {
    let cfg = SuiteConfig::resolve(
        None,
        &[
            "controllers.controllers=[\"MPC\", \"MPC-P\", \"LLM-Predict\"]".into(),
            "controllers.steps=30".into(),
            "backend.kind=\"http\"".into(),
            "backend.http.base_url=\"http://127.0.0.1:9\"".into(),
        ],
    )
    .unwrap();
    let out = run_controller_suite(&cfg).unwrap();
    let rows = &out.report.controllers;
    assert_eq!(rows.len(), 6);
    let mut seeds: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for r in rows {
        seeds.entry(r.controller.as_str()).or_default().push(r.seed);
    }
    assert_eq!(seeds["MPC"], seeds["MPC-P"]);
    for r in rows.iter().filter(|r| r.controller.starts_with("MPC")) {
        assert_eq!(r.steps, 30);
        assert!(r.aborted.is_none());
        assert!(out.telemetry.contains_key(r.telemetry.as_ref().unwrap()));
    }
    // without a reachable backend every LLM step fails, which the loop records
    let llm: Vec<_> = rows
        .iter()
        .filter(|r| r.controller.starts_with("LLM"))
        .collect();
    assert_eq!(llm.len(), 2);
    assert!(llm.iter().all(|r| r.aborted.is_some()), "{llm:?}");
}
