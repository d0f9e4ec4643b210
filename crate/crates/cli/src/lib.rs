//! `aphomlab`: runs declarative experiment configs against `aphom-core` and
//! writes CSV tables, SVG plots and a hashed run manifest.

pub mod catalog;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod pool;
pub mod studies;

use std::path::PathBuf;
use std::time::Instant;

pub use config::{ExperimentConfig, Kind, Params};
pub use error::{CliError, Result};
pub use manifest::{CheckResult, FileEntry, RunManifest};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Overrides the config's `output`.
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    /// Overrides the config's `seed`.
    pub seed: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { out_dir: None, jobs: 1, seed: None }
    }
}

/// Output directory: the override, else `output` relative to the config
/// file, else `aphomlab-out/<kind>` under the working directory.
pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    if let Some(d) = &opts.out_dir {
        return d.clone();
    }
    match &cfg.output {
        Some(o) => cfg.base_dir.join(o),
        None => PathBuf::from("aphomlab-out").join(cfg.kind.name()),
    }
}

/// Validates, runs the study, writes every output atomically, and writes
/// `manifest.json` last.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let jobs = opts.jobs.max(1);
    let dir = output_dir(&cfg, opts);
    std::fs::create_dir_all(&dir)?;
    let start = Instant::now();
    let study = studies::run_study(&cfg, jobs)?;
    let elapsed = start.elapsed().as_secs_f64();
    let files = study.files.iter().map(|(name, bytes)| manifest::write_atomic(&dir, name, bytes)).collect::<Result<Vec<_>>>()?;
    let passed = study.checks.iter().all(|c| c.passed);
    let m = RunManifest {
        kind: cfg.kind.name().to_string(),
        config_hash: cfg.hash(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        jobs,
        elapsed_seconds: elapsed,
        files,
        checks: study.checks,
        passed,
    };
    manifest::write_atomic(&dir, MANIFEST_NAME, (serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
    Ok(m)
}
