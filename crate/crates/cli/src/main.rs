use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use twinlab::plant::scenario::{builtin_scenarios, builtin_training_sets};
use twinlab_harness::config::SuiteConfig;
use twinlab_harness::report::ExperimentReport;
use twinlab_harness::suite::{self, CONTROLLERS};
use twinlab_harness::{timestamped_dir, write_file, write_run, HarnessError};

/// Digital-twin testbed: generate data, train and evaluate models, run controllers.
#[derive(Debug, Parser)]
#[command(name = "twinlab", version)]
struct Cli {
    /// TOML configuration file, or `default`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,
    /// Override one key, e.g. `--set mpc.horizon=8`. Repeatable; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed, added to every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `runs/<timestamp>`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// More logging (`-v` info, `-vv` debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write recorded series from the plant as CSV.
    Generate {
        /// Test series of scenario N (1 to 6).
        #[arg(long, conflicts_with = "train_set")]
        scenario: Option<usize>,
        /// All series of a training set (`wide` or `narrow`).
        #[arg(long)]
        train_set: Option<String>,
    },
    /// Train one model and write its checkpoint and loss history.
    Train {
        #[arg(value_parser = ["arx", "pbm", "lstm", "ham"])]
        model: String,
        #[arg(long, default_value = "wide")]
        train_set: String,
    },
    /// Run the model suite.
    Evaluate,
    /// Run closed-loop episodes of one controller.
    Control {
        /// mpc, rl-off, rl-plant, llm, llm-history or llm-predict.
        controller: String,
        /// Use the variant with actuation penalty.
        #[arg(long)]
        penalty: bool,
        /// Reference profile; repeatable. Defaults to the configured ones.
        #[arg(long = "ref", value_name = "PROFILE")]
        references: Vec<String>,
        /// Plant seed of the episode; repeatable. Defaults to the configured ones.
        #[arg(long = "episode-seed")]
        episode_seeds: Vec<u64>,
    },
    /// Run the model and controller suites.
    Suite,
    /// Print the tables of a finished run.
    Report {
        /// Run directory or report file (`.csv` or `.json`).
        path: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<SuiteConfig, HarnessError> {
    let text = match cli.config.as_deref() {
        None | Some("default") => None,
        Some(p) => Some(fs::read_to_string(p).map_err(|e| HarnessError::io(Path::new(p), e))?),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    SuiteConfig::resolve(text.as_deref(), &overrides)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| timestamped_dir(Path::new("runs")))
}

fn controller_label(name: &str, penalty: bool) -> Result<String, HarnessError> {
    let base = name.trim_end_matches("-p").trim_end_matches("-P");
    let penalty = penalty || base.len() != name.len();
    let want = if penalty {
        format!("{base}-P")
    } else {
        base.to_string()
    };
    CONTROLLERS
        .iter()
        .find(|c| c.eq_ignore_ascii_case(&want))
        .map(|c| c.to_string())
        .ok_or_else(|| HarnessError::Config {
            key: "controller".into(),
            message: format!("unknown controller {name:?}"),
        })
}

fn generate(
    cfg: &SuiteConfig,
    dir: &Path,
    scenario: Option<usize>,
    train_set: Option<&str>,
) -> Result<(), HarnessError> {
    let scs = builtin_scenarios();
    let pick: Vec<_> = match (scenario, train_set) {
        (Some(n), _) => {
            let sc =
                n.checked_sub(1)
                    .and_then(|i| scs.get(i))
                    .ok_or_else(|| HarnessError::Config {
                        key: "scenario".into(),
                        message: format!("no scenario {n}; there are {}", scs.len()),
                    })?;
            vec![sc.clone()]
        }
        (None, Some(_)) => Vec::new(),
        (None, None) => scs,
    };
    for sc in &pick {
        let t = suite::test_series(cfg, sc)?;
        write_file(
            &dir.join(format!("{}.csv", sc.test.name)),
            &t.to_csv_string(),
        )?;
    }
    let sets = match (scenario, train_set) {
        (Some(_), _) => Vec::new(),
        (None, Some(name)) => vec![suite::training_set(name)?],
        (None, None) => builtin_training_sets(),
    };
    for set in &sets {
        let series = suite::training_series(cfg, set)?;
        for (ds, t) in set.datasets().iter().zip(&series) {
            write_file(&dir.join(format!("{}.csv", ds.name)), &t.to_csv_string())?;
        }
    }
    Ok(())
}

fn train(cfg: &SuiteConfig, dir: &Path, model: &str, set_name: &str) -> Result<(), HarnessError> {
    if model == "pbm" {
        println!("pbm has no trainable parameters; nothing to do");
        return Ok(());
    }
    let label = match model {
        "arx" => "Linear",
        "lstm" => "LSTM",
        _ => "HAM",
    };
    let set = suite::training_set(set_name)?;
    let series = suite::training_series(cfg, &set)?;
    let (fit, val) = suite::windows(cfg, &series)?;
    let trained = suite::train_model(cfg, label, &fit, &val);
    let m = trained.model.map_err(HarnessError::Run)?;
    info!("trained {label} in {:.1} s", trained.seconds);
    write_file(
        &dir.join(format!("{model}_{set_name}.json")),
        &m.checkpoint().to_json(),
    )?;
    let mut loss = String::from("epoch,train_loss,val_loss\n");
    if let Some(r) = &trained.loss_history {
        for (i, tl) in r.train_loss.iter().enumerate() {
            let vl = r.val_loss.get(i).map(|v| v.to_string()).unwrap_or_default();
            loss.push_str(&format!("{i},{tl},{vl}\n"));
        }
    }
    write_file(&dir.join(format!("{model}_{set_name}_loss.csv")), &loss)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(())
}

fn read_report(path: &Path) -> Result<ExperimentReport, HarnessError> {
    let file = if path.is_dir() {
        path.join("report.csv")
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
    if file.extension().is_some_and(|e| e == "json") {
        ExperimentReport::from_json(&text)
    } else {
        ExperimentReport::from_csv(&text)
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    if let Command::Report { path } = &cli.command {
        print!("{}", read_report(path)?.to_text());
        return Ok(());
    }
    let mut cfg = load_config(cli)?;
    let dir = out_dir(cli);
    match &cli.command {
        Command::Generate {
            scenario,
            train_set,
        } => generate(&cfg, &dir, *scenario, train_set.as_deref())?,
        Command::Train { model, train_set } => train(&cfg, &dir, model, train_set)?,
        Command::Evaluate => write_run(&dir, &cfg, &suite::run_model_suite(&cfg)?)?,
        Command::Suite => {
            let out = suite::run_full_suite(&cfg)?;
            write_run(&dir, &cfg, &out)?;
            print!("{}", out.report.to_text());
        }
        Command::Control {
            controller,
            penalty,
            references,
            episode_seeds,
        } => {
            cfg.controllers.controllers = vec![controller_label(controller, *penalty)?];
            if !references.is_empty() {
                cfg.controllers.references = references.clone();
            }
            if !episode_seeds.is_empty() {
                cfg.controllers.episode_seeds = episode_seeds.clone();
            }
            cfg.validate()?;
            let out = suite::run_controller_suite(&cfg)?;
            write_run(&dir, &cfg, &out)?;
            print!("{}", out.report.to_text());
            if let Some(r) = out.report.controllers.iter().find(|r| r.aborted.is_some()) {
                return Err(HarnessError::Run(format!(
                    "{} on {} seed {} aborted: {}",
                    r.controller,
                    r.reference,
                    r.seed,
                    r.aborted.as_deref().unwrap_or_default()
                )));
            }
        }
        Command::Report { .. } => unreachable!(),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ HarnessError::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
