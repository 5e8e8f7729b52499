//! Experiment orchestration on top of the simulator core: TOML config
//! parsing, per-(algorithm, seed) output directories, and SVG plots of
//! the recorded curves.
//!
//! Every run writes, under `<output>/<algorithm>/<seed>/`:
//! - `records.csv` with one row per communication round,
//! - `summary.json` with the stage schedule and key snapshots,
//! - `pretrain_end.ckpt`, `after_unlearn.ckpt`, `final.ckpt` model
//!   checkpoints.
//!
//! The resolved configuration is echoed to `<output>/config.toml` and a
//! cross-algorithm digest of final-round metrics to `<output>/table.json`,
//! so a results directory is self-describing.

pub mod plots;

use fedosd_core::config::{Algorithm, ExperimentConfig};
use fedosd_core::engine::run_experiment;
use fedosd_core::error::{Error, Result};
use fedosd_core::metrics::{write_records_csv, write_summary_json, Snapshot};
use fedosd_core::checkpoint::save_checkpoint;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// On-disk configuration document: the experiment sections plus the
/// output location. `output_dir` may be omitted when the `--output`
/// flag supplies it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: fedosd_core::config::DataConfig,
    pub engine: fedosd_core::config::EngineConfig,
    pub run: fedosd_core::config::RunConfig,
}

impl ConfigFile {
    /// The experiment sections, detached from the output location.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            data: self.data.clone(),
            engine: self.engine.clone(),
            run: self.run.clone(),
        }
    }
}

/// Reads and validates a configuration file. Unknown keys, type
/// mismatches, and cross-field violations all surface as configuration
/// errors naming the offending key.
pub fn parse_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ConfigFile = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config.experiment().validate()?;
    if config.engine.epochs > 1 {
        log::info!(
            "engine.epochs = {}: multi-step local updates make each round's \
             uploaded gradient a pseudo-gradient of the local loss",
            config.engine.epochs
        );
    }
    Ok(config)
}

/// Process exit code for an error, per the library's taxonomy:
/// configuration 2, numerical 3, ingestion and I/O 4.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numerical(_) => 3,
        Error::Ingestion(_) | Error::Io { .. } => 4,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Numerical(_) => "numerical",
        Error::Ingestion(_) => "data_format",
        Error::Io { .. } => "io",
    }
}

/// Best-effort machine-readable failure report, written next to the
/// outputs so an orchestrator can distinguish failure classes without
/// parsing stderr.
pub fn write_error_file(output_dir: &Path, err: &Error) {
    let body = serde_json::json!({
        "kind": error_kind(err),
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    if fs::create_dir_all(output_dir).is_ok() {
        let _ = fs::write(
            output_dir.join("error.json"),
            format!("{:#}\n", body),
        );
    }
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Executes every (algorithm, seed) pair of the configuration and lays
/// the results out under `output_dir`. Existing run directories are
/// refused unless `force` is set, so results are never silently mixed
/// across invocations.
pub fn cmd_run(
    config_path: &Path,
    output_flag: Option<&Path>,
    force: bool,
    seed_override: Option<u64>,
) -> Result<()> {
    let parsed = parse_config(config_path);
    // A parse failure can still be reported into the flag-supplied
    // output directory; without one there is nowhere to write.
    let config = match parsed {
        Ok(c) => c,
        Err(e) => {
            if let Some(dir) = output_flag {
                write_error_file(dir, &e);
            }
            return Err(e);
        }
    };
    let output_dir = match output_flag.or(config.output_dir.as_deref()) {
        Some(d) => d.to_path_buf(),
        None => {
            return Err(Error::Config(
                "no output directory: set output_dir in the config or pass --output".into(),
            ))
        }
    };
    let mut resolved = config.clone();
    resolved.output_dir = Some(output_dir.clone());
    if let Some(seed) = seed_override {
        resolved.run.seeds = vec![seed];
    }
    match execute(&resolved, &output_dir, force) {
        Ok(()) => Ok(()),
        Err(e) => {
            write_error_file(&output_dir, &e);
            Err(e)
        }
    }
}

fn execute(config: &ConfigFile, output_dir: &Path, force: bool) -> Result<()> {
    let experiment = config.experiment();
    for algorithm in &experiment.run.algorithms {
        for seed in &experiment.run.seeds {
            let run_dir = output_dir.join(algorithm.name()).join(seed.to_string());
            if run_dir.exists() && !force {
                return Err(Error::io(
                    &run_dir,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "run directory already holds results (pass --force to overwrite)",
                    ),
                ));
            }
        }
    }
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let echo = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("could not serialize resolved config: {e}")))?;
    write_string(&output_dir.join("config.toml"), &echo)?;

    let mut table: BTreeMap<String, BTreeMap<String, Snapshot>> = BTreeMap::new();
    for &algorithm in &experiment.run.algorithms {
        for &seed in &experiment.run.seeds {
            let out = run_experiment(&experiment, algorithm, seed)?;
            let run_dir = output_dir.join(algorithm.name()).join(seed.to_string());
            fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
            write_records_csv(&out.records, &run_dir.join("records.csv"))?;
            write_summary_json(&out.summary, &run_dir.join("summary.json"))?;
            save_checkpoint(&out.origin_model, &run_dir.join("pretrain_end.ckpt"))?;
            save_checkpoint(&out.unlearn_model, &run_dir.join("after_unlearn.ckpt"))?;
            save_checkpoint(&out.final_model, &run_dir.join("final.ckpt"))?;
            let schedule = &out.summary.schedule;
            let verb = match algorithm {
                Algorithm::Retraining => "checkpointed after",
                _ => "unlearned",
            };
            log::info!(
                "{algorithm} seed {seed}: {verb} {} rounds{}, final asr {:.4}, r-acc {:.4}",
                schedule.unlearn_rounds_run,
                if schedule.early_stopped { " (early stop)" } else { "" },
                out.summary.final_round.asr,
                out.summary.final_round.r_acc_mean,
            );
            table
                .entry(algorithm.name().to_string())
                .or_default()
                .insert(seed.to_string(), out.summary.final_round);
        }
    }
    let digest = serde_json::to_string_pretty(&table)
        .map_err(|e| Error::Config(format!("could not serialize digest table: {e}")))?;
    write_string(&output_dir.join("table.json"), &(digest + "\n"))?;
    Ok(())
}

/// Parses and validates a configuration, echoing the resolved document
/// (defaults filled in) to standard output.
pub fn cmd_validate(config_path: &Path) -> Result<()> {
    let config = parse_config(config_path)?;
    let echo = toml::to_string_pretty(&config)
        .map_err(|e| Error::Config(format!("could not serialize resolved config: {e}")))?;
    print!("{echo}");
    Ok(())
}

/// Renders the three metric charts from the records under a results
/// directory.
pub fn cmd_plot(output_dir: &Path) -> Result<()> {
    let written = plots::emit_plots(output_dir)?;
    for path in written {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
