//! Experiment runs: train, evaluate, persist.
//!
//! A run writes into `<out>/<config-hash>/`:
//! `model.ckpt`, `train.jsonl` (one JSON object per epoch), `report.json`
//! and `timing.json` (wall-clock numbers, kept apart so `report.json` is
//! reproducible byte for byte).

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::report::{evaluate, EvalReport, RunInfo};
use crate::trainers::{train, EpochRecord};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epochs: usize,
    pub seconds_per_epoch: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub timing: Timing,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Appends one JSON line per call, flushing each so a crash leaves only
/// whole records behind.
struct JsonlLog {
    path: PathBuf,
    file: File,
}

impl JsonlLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn info(cfg: &ExperimentConfig) -> RunInfo {
    RunInfo {
        method: cfg.method().as_str().to_owned(),
        dataset: cfg.data.kind.as_str().to_owned(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

/// Trains and evaluates per `cfg`; the run directory is removed on failure.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let (train_set, test_set) = cfg.load_data()?;
    run_with_data(cfg, &train_set, &test_set, out)
}

/// As [`run_experiment`] with pre-loaded data.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    out: &Path,
) -> Result<RunArtifacts> {
    let dir = out.join(cfg.hash());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result = run_in(cfg, train_set, test_set, &dir);
    if result.is_err() {
        let _ = fs::remove_dir_all(&dir);
    }
    result
}

fn run_in(cfg: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset, dir: &Path) -> Result<RunArtifacts> {
    let spec = cfg.model_spec(train_set.sample_shape(), train_set.classes)?;
    log::info!(
        "run {} : {} on {} ({} train / {} test, {} epochs)",
        cfg.hash(),
        cfg.method(),
        cfg.data.kind.as_str(),
        train_set.len(),
        test_set.len(),
        cfg.train.epochs
    );
    let mut log = JsonlLog::create(dir.join(LOG_FILE))?;
    let outcome = train(&cfg.train, spec, train_set, |rec: &EpochRecord| log.append(rec))?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.model, cfg.seed)?;
    let timing = Timing {
        epochs: outcome.log.len(),
        seconds_per_epoch: outcome.seconds_per_epoch(),
        total_seconds: outcome.log.iter().map(|r| r.seconds).sum(),
    };
    let report = evaluate(&outcome.model, train_set, test_set, &cfg.eval, &info(cfg))?;
    write_file(&dir.join(REPORT_FILE), &report.to_json()?)?;
    write_file(&dir.join(TIMING_FILE), &(serde_json::to_string_pretty(&timing)? + "\n"))?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        report,
        timing,
    })
}

/// Evaluates a saved checkpoint per `cfg.eval`, writing `<out>/report.json`.
pub fn eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let (model, _seed) = load_checkpoint(checkpoint)?;
    let (train_set, test_set) = cfg.load_data()?;
    check_compatible(&model, &test_set)?;
    let report = evaluate(&model, &train_set, &test_set, &cfg.eval, &info(cfg))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(REPORT_FILE), &report.to_json()?)?;
    Ok(report)
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if model.spec.input_len() != data.sample_shape().iter().product::<usize>() || model.spec.classes != data.classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {:?} inputs / {} classes, data has {:?} / {}",
            model.spec.input_shape,
            model.spec.classes,
            data.sample_shape(),
            data.classes
        )));
    }
    Ok(())
}

/// Reads a run's report, filling `seconds_per_epoch` from `timing.json` when present.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut report: EvalReport =
        serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", path.display())))?;
    if report.seconds_per_epoch.is_none() {
        if let Some(dir) = path.parent() {
            let tp = dir.join(TIMING_FILE);
            if let Ok(t) = fs::read_to_string(&tp) {
                let timing: Timing =
                    serde_json::from_str(&t).map_err(|e| Error::Report(format!("{}: {e}", tp.display())))?;
                report.seconds_per_epoch = Some(timing.seconds_per_epoch);
            }
        }
    }
    Ok(report)
}
