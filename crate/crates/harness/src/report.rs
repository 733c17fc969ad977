//! Experiment report: the numbers a suite produced, with enough metadata to
//! replay it. Wall-clock timings are kept out of it on purpose so that a
//! re-run writes the same bytes; they travel in [`Timing`] rows instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub name: String,
    pub kind: String,
    pub train_set: String,
}

/// Open-loop rollout result of one model on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub scenario: String,
    pub mae: Option<f64>,
    pub error: Option<String>,
    /// Telemetry file with the predicted and recorded series.
    pub telemetry: Option<String>,
}

/// Size of a trained model's checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub model: String,
    pub train_set: String,
    pub bytes: u64,
}

/// One closed-loop episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRow {
    pub controller: String,
    pub reference: String,
    pub seed: u64,
    /// Missing when the controller could not be set up.
    pub mae: Option<f64>,
    pub true_mae: Option<f64>,
    pub actuation: f64,
    pub steps: u64,
    pub aborted: Option<String>,
    pub telemetry: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub meta: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub scenarios: Vec<ScenarioRow>,
    pub models: Vec<ModelRow>,
    pub memory: Vec<MemoryRow>,
    pub controllers: Vec<ControllerRow>,
}

/// Wall-clock cost of one piece of work; hardware dependent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub task: String,
    pub seconds: f64,
}

/// Interpolation and extrapolation means of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub model: String,
    pub interpolation: Option<f64>,
    pub extrapolation: Option<f64>,
}

pub const CSV_HEADER: [&str; 5] = ["kind", "name", "scenario", "metric", "value"];

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn episode_key(reference: &str, seed: u64) -> String {
    format!("{reference}#{seed}")
}

impl ExperimentReport {
    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
            && self.models.is_empty()
            && self.memory.is_empty()
            && self.controllers.is_empty()
    }

    /// Adds another report's rows; metadata of `other` wins on clashes.
    pub fn merge(&mut self, other: ExperimentReport) {
        self.meta.extend(other.meta);
        self.seeds.extend(other.seeds);
        self.scenarios.extend(other.scenarios);
        self.models.extend(other.models);
        self.memory.extend(other.memory);
        self.controllers.extend(other.controllers);
    }

    pub fn model_mae(&self, model: &str, scenario: &str) -> Option<f64> {
        self.models
            .iter()
            .find(|r| r.model == model && r.scenario == scenario)
            .and_then(|r| r.mae)
    }

    /// Mean scenario MAE per model and scenario kind, models in first-seen order.
    /// A kind with a failed scenario has no aggregate.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.models {
            if !order.contains(&r.model.as_str()) {
                order.push(&r.model);
            }
        }
        order
            .into_iter()
            .map(|m| {
                let of_kind = |kind: &str| {
                    let rows: Vec<Option<f64>> = self
                        .scenarios
                        .iter()
                        .filter(|s| s.kind == kind)
                        .filter_map(|s| {
                            self.models
                                .iter()
                                .find(|r| r.model == m && r.scenario == s.name)
                        })
                        .map(|r| r.mae)
                        .collect();
                    if rows.iter().any(Option::is_none) {
                        None
                    } else {
                        mean(&rows.into_iter().flatten().collect::<Vec<_>>())
                    }
                };
                Aggregate {
                    model: m.to_string(),
                    interpolation: of_kind("interpolation"),
                    extrapolation: of_kind("extrapolation"),
                }
            })
            .collect()
    }

    pub fn aggregate(&self, model: &str) -> Option<Aggregate> {
        self.aggregates().into_iter().find(|a| a.model == model)
    }

    /// Mean episode MAE and total actuation per controller and reference,
    /// averaged over seeds.
    pub fn controller_summary(&self) -> Vec<(String, String, f64, f64, usize)> {
        let mut out: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
        for r in self.controllers.iter().filter(|r| r.mae.is_some()) {
            let mae = r.mae.unwrap_or_default();
            match out
                .iter_mut()
                .find(|o| o.0 == r.controller && o.1 == r.reference)
            {
                Some(o) => {
                    o.2.push(mae);
                    o.3.push(r.actuation);
                }
                None => out.push((
                    r.controller.clone(),
                    r.reference.clone(),
                    vec![mae],
                    vec![r.actuation],
                )),
            }
        }
        out.into_iter()
            .map(|(c, r, m, a)| {
                let n = m.len();
                (c, r, mean(&m).unwrap_or(0.0), mean(&a).unwrap_or(0.0), n)
            })
            .collect()
    }

    /// Long-format CSV: `kind,name,scenario,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |kind: &str, name: &str, scenario: &str, metric: &str, value: String| {
            w.write_record([kind, name, scenario, metric, value.as_str()])
                .expect("in-memory write");
        };
        put_header(&mut put);
        for (k, v) in &self.meta {
            put("meta", k, "", "", v.clone());
        }
        for (k, v) in &self.seeds {
            put("seed", k, "", "", v.to_string());
        }
        for s in &self.scenarios {
            put("scenario", &s.name, "", "kind", s.kind.clone());
            put("scenario", &s.name, "", "train_set", s.train_set.clone());
        }
        for r in &self.models {
            if let Some(v) = r.mae {
                put("model", &r.model, &r.scenario, "mae", v.to_string());
            }
            if let Some(e) = &r.error {
                put("model", &r.model, &r.scenario, "error", e.clone());
            }
            if let Some(t) = &r.telemetry {
                put("model", &r.model, &r.scenario, "telemetry", t.clone());
            }
        }
        for m in &self.memory {
            put(
                "memory",
                &m.model,
                &m.train_set,
                "bytes",
                m.bytes.to_string(),
            );
        }
        for c in &self.controllers {
            let key = episode_key(&c.reference, c.seed);
            if let Some(v) = c.mae {
                put("controller", &c.controller, &key, "mae", v.to_string());
            }
            if let Some(v) = c.true_mae {
                put("controller", &c.controller, &key, "true_mae", v.to_string());
            }
            put(
                "controller",
                &c.controller,
                &key,
                "actuation",
                c.actuation.to_string(),
            );
            put(
                "controller",
                &c.controller,
                &key,
                "steps",
                c.steps.to_string(),
            );
            if let Some(a) = &c.aborted {
                put("controller", &c.controller, &key, "aborted", a.clone());
            }
            if let Some(t) = &c.telemetry {
                put("controller", &c.controller, &key, "telemetry", t.clone());
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Inverse of [`Self::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let parse_err =
            |line: u64, msg: String| HarnessError::Parse(format!("report csv line {line}: {msg}"));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(parse_err(1, format!("unexpected header {header:?}")));
        }
        let mut rep = ExperimentReport::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| HarnessError::Parse(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let f = |e: std::num::ParseFloatError| parse_err(line, e.to_string());
            let i = |e: std::num::ParseIntError| parse_err(line, e.to_string());
            let (kind, name, scenario, metric, value) =
                (&rec[0], &rec[1], &rec[2], &rec[3], &rec[4]);
            match kind {
                "meta" => {
                    rep.meta.insert(name.into(), value.into());
                }
                "seed" => {
                    rep.seeds.insert(name.into(), value.parse().map_err(i)?);
                }
                "scenario" => {
                    let idx = match rep.scenarios.iter().position(|s| s.name == name) {
                        Some(idx) => idx,
                        None => {
                            rep.scenarios.push(ScenarioRow {
                                name: name.into(),
                                kind: String::new(),
                                train_set: String::new(),
                            });
                            rep.scenarios.len() - 1
                        }
                    };
                    match metric {
                        "kind" => rep.scenarios[idx].kind = value.into(),
                        "train_set" => rep.scenarios[idx].train_set = value.into(),
                        other => {
                            return Err(parse_err(
                                line,
                                format!("unknown scenario metric {other:?}"),
                            ))
                        }
                    }
                }
                "model" => {
                    let idx = match rep
                        .models
                        .iter()
                        .position(|r| r.model == name && r.scenario == scenario)
                    {
                        Some(idx) => idx,
                        None => {
                            rep.models.push(ModelRow {
                                model: name.into(),
                                scenario: scenario.into(),
                                mae: None,
                                error: None,
                                telemetry: None,
                            });
                            rep.models.len() - 1
                        }
                    };
                    let row = &mut rep.models[idx];
                    match metric {
                        "mae" => row.mae = Some(value.parse().map_err(f)?),
                        "error" => row.error = Some(value.into()),
                        "telemetry" => row.telemetry = Some(value.into()),
                        other => {
                            return Err(parse_err(line, format!("unknown model metric {other:?}")))
                        }
                    }
                }
                "memory" => rep.memory.push(MemoryRow {
                    model: name.into(),
                    train_set: scenario.into(),
                    bytes: value.parse().map_err(i)?,
                }),
                "controller" => {
                    let (reference, seed) = scenario.rsplit_once('#').ok_or_else(|| {
                        parse_err(line, format!("episode key {scenario:?} lacks #seed"))
                    })?;
                    let seed: u64 = seed.parse().map_err(i)?;
                    let idx = match rep.controllers.iter().position(|c| {
                        c.controller == name && c.reference == reference && c.seed == seed
                    }) {
                        Some(idx) => idx,
                        None => {
                            rep.controllers.push(ControllerRow {
                                controller: name.into(),
                                reference: reference.into(),
                                seed,
                                mae: None,
                                true_mae: None,
                                actuation: 0.0,
                                steps: 0,
                                aborted: None,
                                telemetry: None,
                            });
                            rep.controllers.len() - 1
                        }
                    };
                    let row = &mut rep.controllers[idx];
                    match metric {
                        "mae" => row.mae = Some(value.parse().map_err(f)?),
                        "true_mae" => row.true_mae = Some(value.parse().map_err(f)?),
                        "actuation" => row.actuation = value.parse().map_err(f)?,
                        "steps" => row.steps = value.parse().map_err(i)?,
                        "aborted" => row.aborted = Some(value.into()),
                        "telemetry" => row.telemetry = Some(value.into()),
                        other => {
                            return Err(parse_err(
                                line,
                                format!("unknown controller metric {other:?}"),
                            ))
                        }
                    }
                }
                other => return Err(parse_err(line, format!("unknown row kind {other:?}"))),
            }
        }
        Ok(rep)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    /// Plain-text tables. Every table prints its header even when empty.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.meta.is_empty() || !self.seeds.is_empty() {
            for (k, v) in &self.meta {
                let _ = writeln!(out, "{k}: {v}");
            }
            for (k, v) in &self.seeds {
                let _ = writeln!(out, "seed {k}: {v}");
            }
            out.push('\n');
        }

        let scenarios: Vec<&ScenarioRow> = self.scenarios.iter().collect();
        out.push_str("Model MAE by scenario (K)\n");
        let mut head = format!("{:<8}", "model");
        for s in &scenarios {
            let _ = write!(head, " {:>14}", s.name);
        }
        let _ = write!(head, " {:>14} {:>14}", "interpolation", "extrapolation");
        out.push_str(&head);
        out.push('\n');
        for a in self.aggregates() {
            let mut line = format!("{:<8}", a.model);
            for s in &scenarios {
                let cell = match self
                    .models
                    .iter()
                    .find(|r| r.model == a.model && r.scenario == s.name)
                {
                    Some(ModelRow { mae: Some(v), .. }) => format!("{v:.4}"),
                    Some(_) => "failed".into(),
                    None => "-".into(),
                };
                let _ = write!(line, " {cell:>14}");
            }
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = write!(
                line,
                " {:>14} {:>14}",
                fmt(a.interpolation),
                fmt(a.extrapolation)
            );
            out.push_str(&line);
            out.push('\n');
        }
        let failures: Vec<&ModelRow> = self.models.iter().filter(|r| r.error.is_some()).collect();
        for r in failures {
            let _ = writeln!(
                out,
                "  {} on {} failed: {}",
                r.model,
                r.scenario,
                r.error.as_deref().unwrap_or("")
            );
        }

        out.push_str("\nModel memory (checkpoint bytes)\n");
        let _ = writeln!(out, "{:<8} {:>10} {:>12}", "model", "train_set", "bytes");
        for m in &self.memory {
            let _ = writeln!(out, "{:<8} {:>10} {:>12}", m.model, m.train_set, m.bytes);
        }

        out.push_str("\nController tracking\n");
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:>6} {:>9} {:>9} {:>10} {:>6}",
            "controller", "reference", "seed", "mae", "true_mae", "actuation", "steps"
        );
        for c in &self.controllers {
            let _ = writeln!(
                out,
                "{:<12} {:<10} {:>6} {:>9} {:>9} {:>10.2} {:>6}{}",
                c.controller,
                c.reference,
                c.seed,
                c.mae.map_or("-".into(), |v| format!("{v:.4}")),
                c.true_mae.map_or("-".into(), |v| format!("{v:.4}")),
                c.actuation,
                c.steps,
                c.aborted
                    .as_deref()
                    .map(|a| format!("  aborted: {a}"))
                    .unwrap_or_default()
            );
        }
        out
    }
}

fn put_header(put: &mut impl FnMut(&str, &str, &str, &str, String)) {
    // the csv writer has no separate header call; the first record is it
    put(
        CSV_HEADER[0],
        CSV_HEADER[1],
        CSV_HEADER[2],
        CSV_HEADER[3],
        CSV_HEADER[4].to_string(),
    );
}

/// Timings as CSV: `task,seconds`.
pub fn timings_csv(rows: &[Timing]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "seconds"])
        .expect("in-memory write");
    for t in rows {
        w.write_record([t.task.as_str(), &format!("{:.3}", t.seconds)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
