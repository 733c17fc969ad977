//! Experiment suites over the twinlab testbed: model evaluation across the
//! six scenarios, closed-loop controller evaluation, and the reports both
//! produce.

pub mod config;
pub mod report;
pub mod suite;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::SuiteConfig;
pub use report::{ExperimentReport, Timing};
pub use suite::{run_controller_suite, run_full_suite, run_model_suite, SuiteOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config key {key}: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Core(#[from] twinlab::types::CoreError),
    #[error(transparent)]
    Plant(#[from] twinlab::plant::PlantError),
    #[error(transparent)]
    Model(#[from] twinlab::models::ModelError),
    #[error(transparent)]
    Control(#[from] twinlab::control::ControlError),
    #[error(transparent)]
    Nnet(#[from] twinlab::nnet::NnetError),
    #[error("{0}")]
    Run(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// `runs/<UTC timestamp>` under `base`, suffixed if it already exists.
pub fn timestamped_dir(base: &Path) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut dir = base.join(&stamp);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stamp}-{n}"));
        n += 1;
    }
    dir
}

pub fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes `config.toml`, `report.{csv,json,txt}`, `timings.csv` and every
/// telemetry file into `dir`.
pub fn write_run(dir: &Path, cfg: &SuiteConfig, out: &SuiteOutput) -> Result<(), HarnessError> {
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    write_file(&dir.join("report.csv"), &out.report.to_csv())?;
    write_file(&dir.join("report.json"), &out.report.to_json())?;
    write_file(&dir.join("report.txt"), &out.report.to_text())?;
    write_file(&dir.join("timings.csv"), &report::timings_csv(&out.timings))?;
    for (rel, text) in &out.telemetry {
        write_file(&dir.join(rel), text)?;
    }
    Ok(())
}
