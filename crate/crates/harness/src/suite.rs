//! The model and controller experiment matrices.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use twinlab::control::{
    run_closed_loop, train_dqn, ChatBackend, Controller, HistoryStore, HttpBackend, LlmController,
    LlmControllerConfig, LlmVariant, MockBackend, MpcController, PlantEnv, ReferenceProfile,
    RewardWeights, RlConfig, TwinEnv,
};
use twinlab::models::{
    fit_arx, mae, rollout_on, train_ham, train_lstm, ArxModel, HamModel, PbmModel, Predictor,
};
use twinlab::plant::scenario::{builtin_scenarios, builtin_training_sets};
use twinlab::plant::{generate_dataset, Plant, ScenarioSpec, TrainingSetSpec};
use twinlab::types::{chrono_split, make_windows, Trajectory, WindowedDataset};

use crate::config::{BackendKind, SuiteConfig};
use crate::report::{ControllerRow, ExperimentReport, MemoryRow, ModelRow, ScenarioRow, Timing};
use crate::HarnessError;

pub const MODELS: [&str; 4] = ["Linear", "PBM", "LSTM", "HAM"];

pub const CONTROLLERS: [&str; 12] = [
    "MPC",
    "MPC-P",
    "RL-Off",
    "RL-Off-P",
    "RL-Plant",
    "RL-Plant-P",
    "LLM",
    "LLM-P",
    "LLM-History",
    "LLM-History-P",
    "LLM-Predict",
    "LLM-Predict-P",
];

/// Everything a suite produced: the report, the telemetry files it refers
/// to (relative path to CSV text) and the wall-clock timings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteOutput {
    pub report: ExperimentReport,
    pub telemetry: BTreeMap<String, String>,
    pub timings: Vec<Timing>,
}

impl SuiteOutput {
    pub fn merge(&mut self, other: SuiteOutput) {
        self.report.merge(other.report);
        self.telemetry.extend(other.telemetry);
        self.timings.extend(other.timings);
    }
}

fn base_report(cfg: &SuiteConfig, suite: &str) -> ExperimentReport {
    let mut r = ExperimentReport::default();
    r.meta.insert("config_hash".into(), cfg.hash());
    r.meta.insert("suite".into(), suite.into());
    r.meta
        .insert("version".into(), env!("CARGO_PKG_VERSION").into());
    r.seeds.insert("master".into(), cfg.seed);
    r
}

pub fn training_set(name: &str) -> Result<TrainingSetSpec, HarnessError> {
    builtin_training_sets()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| HarnessError::Config {
            key: "controllers.train_set".into(),
            message: format!("unknown training set {name:?}"),
        })
}

/// Scenario specs selected by the config, in shipped order.
pub fn scenarios(cfg: &SuiteConfig) -> Result<Vec<ScenarioSpec>, HarnessError> {
    let all = builtin_scenarios();
    for want in &cfg.models.scenarios {
        if !all.iter().any(|s| &s.name == want) {
            return Err(HarnessError::Config {
                key: "models.scenarios".into(),
                message: format!("unknown scenario {want:?}"),
            });
        }
    }
    Ok(all
        .into_iter()
        .filter(|s| cfg.models.scenarios.is_empty() || cfg.models.scenarios.contains(&s.name))
        .collect())
}

/// The recorded series of one training set with every seed offset.
pub fn training_series(
    cfg: &SuiteConfig,
    set: &TrainingSetSpec,
) -> Result<Vec<Trajectory>, HarnessError> {
    set.datasets()
        .into_iter()
        .map(|mut ds| {
            ds.seed = cfg.offset(ds.seed);
            Ok(generate_dataset(&ds, &cfg.plant)?)
        })
        .collect()
}

/// The test series of a scenario.
pub fn test_series(cfg: &SuiteConfig, sc: &ScenarioSpec) -> Result<Trajectory, HarnessError> {
    let mut ds = sc.test.clone();
    ds.seed = cfg.offset(ds.seed);
    Ok(generate_dataset(&ds, &cfg.plant)?)
}

/// Windows of all series, split chronologically into fit and validation parts.
pub fn windows(
    cfg: &SuiteConfig,
    series: &[Trajectory],
) -> Result<(WindowedDataset, WindowedDataset), HarnessError> {
    let mut all: Option<WindowedDataset> = None;
    for t in series {
        let w = make_windows(t, cfg.data.lookback, 1)?;
        match &mut all {
            None => all = Some(w),
            Some(a) => a.extend(w)?,
        }
    }
    let all = all.ok_or_else(|| HarnessError::Run("training set has no series".into()))?;
    Ok(chrono_split(&all, cfg.data.train_fraction)?)
}

/// A trained model, or why it could not be trained.
pub struct Trained {
    pub model: Result<Box<dyn Predictor>, String>,
    pub seconds: f64,
    pub loss_history: Option<twinlab::nnet::TrainReport>,
}

/// Fits `name` on the windows. PBM is returned as is.
pub fn train_model(
    cfg: &SuiteConfig,
    name: &str,
    fit: &WindowedDataset,
    val: &WindowedDataset,
) -> Trained {
    let t0 = Instant::now();
    let mut loss_history = None;
    let model: Result<Box<dyn Predictor>, String> = match name {
        "Linear" => fit_arx(fit, &cfg.arx)
            .map(|m| Box::new(m) as Box<dyn Predictor>)
            .map_err(|e| e.to_string()),
        "PBM" => Ok(Box::new(PbmModel::new(cfg.plant.params))),
        "LSTM" => {
            let mut lc = cfg.lstm;
            lc.train.seed = cfg.offset(lc.train.seed);
            train_lstm(fit, Some(val), &lc)
                .map(|(m, r)| {
                    loss_history = Some(r);
                    Box::new(m) as Box<dyn Predictor>
                })
                .map_err(|e| e.to_string())
        }
        "HAM" => {
            let mut hc = cfg.ham;
            hc.train.seed = cfg.offset(hc.train.seed);
            train_ham(PbmModel::new(cfg.plant.params), fit, Some(val), &hc)
                .map(|(m, r)| {
                    loss_history = Some(r);
                    Box::new(m) as Box<dyn Predictor>
                })
                .map_err(|e| e.to_string())
        }
        other => Err(format!("unknown model {other:?}")),
    };
    Trained {
        model,
        seconds: t0.elapsed().as_secs_f64(),
        loss_history,
    }
}

fn rollout_csv(pairs: &[(f64, f64)], dt: f64, lookback: usize) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "predicted", "recorded"])
        .expect("in-memory write");
    for (k, (p, m)) in pairs.iter().enumerate() {
        let t = (lookback + k) as f64 * dt;
        w.write_record([t.to_string(), p.to_string(), m.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

struct SetResult {
    rows: Vec<(String, ModelRow)>,
    memory: Vec<MemoryRow>,
    telemetry: Vec<(String, String)>,
    timings: Vec<Timing>,
}

fn run_training_set(cfg: &SuiteConfig, set: &TrainingSetSpec, scs: &[ScenarioSpec]) -> SetResult {
    let mut out = SetResult {
        rows: Vec::new(),
        memory: Vec::new(),
        telemetry: Vec::new(),
        timings: Vec::new(),
    };
    let fail_all = |out: &mut SetResult, model: &str, msg: &str| {
        for sc in scs {
            out.rows.push((
                sc.name.clone(),
                ModelRow {
                    model: model.into(),
                    scenario: sc.name.clone(),
                    mae: None,
                    error: Some(msg.into()),
                    telemetry: None,
                },
            ));
        }
    };
    let data = training_series(cfg, set).and_then(|s| windows(cfg, &s));
    let (fit, val) = match data {
        Ok(d) => d,
        Err(e) => {
            for m in &cfg.models.models {
                fail_all(&mut out, m, &format!("training data: {e}"));
            }
            return out;
        }
    };
    let tests: Vec<(&ScenarioSpec, Result<Trajectory, HarnessError>)> =
        scs.iter().map(|sc| (sc, test_series(cfg, sc))).collect();
    for name in &cfg.models.models {
        info!("training {name} on {}", set.name);
        let trained = train_model(cfg, name, &fit, &val);
        out.timings.push(Timing {
            task: format!("train {name} {}", set.name),
            seconds: trained.seconds,
        });
        let model = match trained.model {
            Ok(m) => m,
            Err(e) => {
                warn!("{name} on {} failed: {e}", set.name);
                fail_all(&mut out, name, &e);
                continue;
            }
        };
        out.memory.push(MemoryRow {
            model: name.clone(),
            train_set: set.name.clone(),
            bytes: model.checkpoint().to_json().len() as u64,
        });
        for (sc, test) in &tests {
            let result = match test {
                Ok(t) => rollout_on(model.as_ref(), t, cfg.data.lookback)
                    .map(|p| (p, t.dt()))
                    .map_err(|e| e.to_string()),
                Err(e) => Err(format!("test data: {e}")),
            };
            let row = match result {
                Ok((pairs, dt)) => {
                    let path = format!("telemetry/model_{name}_{}.csv", sc.name);
                    out.telemetry
                        .push((path.clone(), rollout_csv(&pairs, dt, cfg.data.lookback)));
                    ModelRow {
                        model: name.clone(),
                        scenario: sc.name.clone(),
                        mae: Some(mae(&pairs)),
                        error: None,
                        telemetry: Some(path),
                    }
                }
                Err(e) => ModelRow {
                    model: name.clone(),
                    scenario: sc.name.clone(),
                    mae: None,
                    error: Some(e),
                    telemetry: None,
                },
            };
            out.rows.push((sc.name.clone(), row));
        }
    }
    out
}

/// Trains every configured model on each training set and rolls it out on
/// that set's scenarios. A model that fails to train is reported as failed
/// for those scenarios and the suite moves on.
pub fn run_model_suite(cfg: &SuiteConfig) -> Result<SuiteOutput, HarnessError> {
    let scs = scenarios(cfg)?;
    let mut sets: Vec<TrainingSetSpec> = Vec::new();
    for sc in &scs {
        if !sets.iter().any(|s| s.name == sc.train_set) {
            sets.push(training_set(&sc.train_set)?);
        }
    }
    let results: Vec<SetResult> = sets
        .par_iter()
        .map(|set| {
            let mine: Vec<ScenarioSpec> = scs
                .iter()
                .filter(|s| s.train_set == set.name)
                .cloned()
                .collect();
            run_training_set(cfg, set, &mine)
        })
        .collect();

    let mut out = SuiteOutput {
        report: base_report(cfg, "models"),
        ..SuiteOutput::default()
    };
    out.report.seeds.insert("plant".into(), cfg.plant.rng_seed);
    out.report
        .seeds
        .insert("lstm".into(), cfg.offset(cfg.lstm.train.seed));
    out.report
        .seeds
        .insert("ham".into(), cfg.offset(cfg.ham.train.seed));
    for sc in &scs {
        out.report.scenarios.push(ScenarioRow {
            name: sc.name.clone(),
            kind: sc.kind.to_string(),
            train_set: sc.train_set.clone(),
        });
        out.report
            .seeds
            .insert(format!("test {}", sc.name), cfg.offset(sc.test.seed));
    }
    for set in &sets {
        out.report
            .seeds
            .insert(format!("train {}", set.name), cfg.offset(set.seed));
    }
    let mut rows: Vec<(String, ModelRow)> = Vec::new();
    for r in results {
        rows.extend(r.rows);
        out.report.memory.extend(r.memory);
        out.telemetry.extend(r.telemetry);
        out.timings.extend(r.timings);
    }
    // scenario order, then model order, independent of how work was split
    for sc in &scs {
        for m in &cfg.models.models {
            if let Some((_, row)) = rows.iter().find(|(s, r)| s == &sc.name && &r.model == m) {
                out.report.models.push(row.clone());
            }
        }
    }
    Ok(out)
}

/// Models shared by the controllers: the linear model for MPC, the hybrid
/// model as RL twin and LLM assistant, and the history store.
pub struct ControllerAssets {
    pub arx: ArxModel,
    pub ham: HamModel,
    pub store: HistoryStore,
}

pub fn controller_assets(
    cfg: &SuiteConfig,
    timings: &mut Vec<Timing>,
) -> Result<ControllerAssets, HarnessError> {
    let set = training_set(&cfg.controllers.train_set)?;
    let series = training_series(cfg, &set)?;
    let (fit, val) = windows(cfg, &series)?;
    let t0 = Instant::now();
    let arx = fit_arx(&fit, &cfg.arx)?;
    timings.push(Timing {
        task: format!("train Linear {}", set.name),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let t0 = Instant::now();
    let mut hc = cfg.ham;
    hc.train.seed = cfg.offset(hc.train.seed);
    let (ham, _) = train_ham(PbmModel::new(cfg.plant.params), &fit, Some(&val), &hc)?;
    timings.push(Timing {
        task: format!("train HAM {}", set.name),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let mut store = HistoryStore::default();
    for t in &series {
        for r in HistoryStore::from_trajectory(t).records() {
            store.push(*r);
        }
    }
    Ok(ControllerAssets { arx, ham, store })
}

/// RL settings for a label: the `-P` variants keep the configured reward
/// weights, the others drop the actuation terms. `Plant` agents train on the
/// plant rather than in the twin.
pub fn rl_config(cfg: &SuiteConfig, label: &str) -> RlConfig {
    let mut rc = cfg.rl.clone();
    rc.seed = cfg.offset(rc.seed);
    if !label.ends_with("-P") {
        rc.weights = RewardWeights {
            l0f: 0.0,
            l0h: 0.0,
            ..rc.weights
        };
    }
    rc
}

/// Trains the DQN agent named by `label`.
pub fn train_agent(
    cfg: &SuiteConfig,
    assets: &ControllerAssets,
    label: &str,
) -> Result<(twinlab::control::DqnAgent, twinlab::control::DqnReport), HarnessError> {
    let rc = rl_config(cfg, label);
    if label.starts_with("RL-Plant") {
        let mut pc = cfg.plant;
        pc.rng_seed = cfg.offset(pc.rng_seed.wrapping_add(0x5EED));
        let mut env = PlantEnv::new(pc);
        Ok(train_dqn(&rc, &mut env, label)?)
    } else {
        let mut env = TwinEnv::new(Box::new(assets.ham.clone()), cfg.plant.ambient.at(0.0));
        Ok(train_dqn(&rc, &mut env, label)?)
    }
}

fn backend(cfg: &SuiteConfig) -> Result<Box<dyn ChatBackend>, HarnessError> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => Box::new(MockBackend::heuristic()),
        BackendKind::Http => Box::new(HttpBackend::new(cfg.backend.http.clone())?),
    })
}

/// Builds the controller named by `label`.
pub fn build_controller(
    cfg: &SuiteConfig,
    assets: &ControllerAssets,
    label: &str,
    timings: &mut Vec<Timing>,
) -> Result<Box<dyn Controller>, HarnessError> {
    let penalty = label.ends_with("-P");
    Ok(match label.trim_end_matches("-P") {
        "MPC" => {
            let mc = if penalty { cfg.mpc_p } else { cfg.mpc };
            Box::new(MpcController::new(mc, assets.arx.clone())?)
        }
        "RL-Off" | "RL-Plant" => {
            let t0 = Instant::now();
            let (agent, rep) = train_agent(cfg, assets, label)?;
            info!(
                "{label}: {} steps, best evaluation return {:.2}",
                rep.steps_run, rep.best_eval
            );
            timings.push(Timing {
                task: format!("train {label}"),
                seconds: t0.elapsed().as_secs_f64(),
            });
            Box::new(agent)
        }
        llm @ ("LLM" | "LLM-History" | "LLM-Predict") => {
            let variant = match llm {
                "LLM" => LlmVariant::Simple,
                "LLM-History" => LlmVariant::History,
                _ => LlmVariant::PredictionAssisted,
            };
            let lc = LlmControllerConfig {
                variant,
                penalty_prompt: penalty,
                ..cfg.llm.clone()
            };
            let assist: Option<Box<dyn Predictor>> = (variant == LlmVariant::PredictionAssisted)
                .then(|| Box::new(assets.ham.clone()) as Box<dyn Predictor>);
            let store = (variant == LlmVariant::History).then(|| assets.store.clone());
            Box::new(LlmController::new(lc, backend(cfg)?, assist, store)?)
        }
        other => {
            return Err(HarnessError::Config {
                key: "controllers.controllers".into(),
                message: format!("unknown controller {other:?}"),
            })
        }
    })
}

/// One closed-loop episode on a fresh plant seeded with `seed`.
pub fn episode(
    cfg: &SuiteConfig,
    controller: &mut dyn Controller,
    reference: &str,
    seed: u64,
) -> Result<(ControllerRow, String), HarnessError> {
    let profile = ReferenceProfile::preset(reference)?;
    let mut pc = cfg.plant;
    pc.rng_seed = cfg.offset(seed);
    let mut plant = Plant::new(pc, cfg.controllers.initial_temp)?;
    let ep = run_closed_loop(controller, &mut plant, &profile, cfg.controllers.steps);
    let name = ep.controller.clone();
    let ran = !ep.rows.is_empty();
    let path = format!("telemetry/control_{name}_{reference}_{seed}.csv");
    Ok((
        ControllerRow {
            controller: name,
            reference: reference.into(),
            seed,
            mae: ran.then(|| ep.mae()),
            true_mae: ran.then(|| ep.true_mae()),
            actuation: ep.actuation(),
            steps: ep.rows.len() as u64,
            aborted: ep.aborted.clone(),
            telemetry: Some(path),
        },
        ep.to_csv_string(),
    ))
}

/// Runs every configured controller on every reference and seed. All
/// controllers see the same plant seeds, so penalized and unpenalized
/// variants are paired.
pub fn run_controller_suite(cfg: &SuiteConfig) -> Result<SuiteOutput, HarnessError> {
    let mut out = SuiteOutput {
        report: base_report(cfg, "controllers"),
        ..SuiteOutput::default()
    };
    let assets = controller_assets(cfg, &mut out.timings)?;
    out.report
        .seeds
        .insert("rl".into(), cfg.offset(cfg.rl.seed));
    out.report
        .seeds
        .insert("ham".into(), cfg.offset(cfg.ham.train.seed));
    for s in &cfg.controllers.episode_seeds {
        out.report
            .seeds
            .insert(format!("episode {s}"), cfg.offset(*s));
    }
    for label in &cfg.controllers.controllers {
        info!("controller {label}");
        let mut c = match build_controller(cfg, &assets, label, &mut out.timings) {
            Ok(c) => c,
            Err(e) => {
                warn!("{label} could not be built: {e}");
                for r in &cfg.controllers.references {
                    for s in &cfg.controllers.episode_seeds {
                        out.report.controllers.push(ControllerRow {
                            controller: label.clone(),
                            reference: r.clone(),
                            seed: *s,
                            mae: None,
                            true_mae: None,
                            actuation: 0.0,
                            steps: 0,
                            aborted: Some(format!("setup: {e}")),
                            telemetry: None,
                        });
                    }
                }
                continue;
            }
        };
        for r in &cfg.controllers.references {
            for s in &cfg.controllers.episode_seeds {
                let t0 = Instant::now();
                let (row, csv) = episode(cfg, c.as_mut(), r, *s)?;
                out.timings.push(Timing {
                    task: format!("episode {label} {r} {s}"),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                if let Some(p) = &row.telemetry {
                    out.telemetry.insert(p.clone(), csv);
                }
                out.report.controllers.push(row);
            }
        }
    }
    Ok(out)
}

/// Both suites, one report.
pub fn run_full_suite(cfg: &SuiteConfig) -> Result<SuiteOutput, HarnessError> {
    let mut out = run_model_suite(cfg)?;
    out.merge(run_controller_suite(cfg)?);
    out.report.meta.insert("suite".into(), "full".into());
    Ok(out)
}
