//! Experiment orchestration: pretraining, runs, sweeps and verification.
//!
//! Output root layout:
//!
//! ```text
//! checkpoint/            encoder.ckpt, source_stats.ckpt, pretrain_log.json
//! results.csv            one row per (config hash, seed[, score])
//! timings.csv            wall-clock seconds per row
//! summary.json           mean ± std per config, or per axis value after a sweep
//! runs/<hash>-s<seed>/   config.json, manifest.json, batches.csv, probes.csv,
//!                        samples.csv, summary.json
//! ```

pub mod artifacts;
pub mod config;
pub mod exec;
pub mod sweep;

use std::path::Path;

use thiserror::Error;

use config::ExperimentConfig;
use exec::{ExecReport, Job};
use sweep::{Axis, GroupSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("adaptation failure storm:\n{0}")]
    Storm(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingArtifact(_) => 2,
            CliError::Storm(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<doco_core::Error> for CliError {
    fn from(e: doco_core::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<artifacts::PretrainReport, CliError> {
    cfg.validate()?;
    let dir = cfg.checkpoint_root();
    let (_, report) = artifacts::pretrain(cfg, &dir)?;
    Ok(report)
}

fn write_summary(root: &Path, label: &str, groups: &[GroupSummary]) -> anyhow::Result<()> {
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        group_by: &'a str,
        groups: &'a [GroupSummary],
    }
    let text = serde_json::to_string_pretty(&Summary { group_by: label, groups })?;
    std::fs::write(root.join("summary.json"), text + "\n")?;
    Ok(())
}

/// Rows of `jobs` from the results table, in job order.
fn rows_of(root: &Path, jobs: &[Job]) -> anyhow::Result<Vec<exec::ResultRow>> {
    let all = exec::read_rows(&root.join(exec::RESULTS_FILE))?;
    let runs: Vec<String> = jobs.iter().map(Job::run_id).collect();
    Ok(runs
        .iter()
        .flat_map(|run| all.iter().filter(move |r| &r.run == run).cloned())
        .collect())
}

fn execute_and_summarize(
    cfg: &ExperimentConfig,
    jobs: &[Job],
    group_by: &str,
    key: impl Fn(&exec::ResultRow) -> String,
) -> Result<(ExecReport, Vec<GroupSummary>), CliError> {
    let root = cfg.output_root();
    let ck = cfg.checkpoint_root();
    let source = artifacts::load(&ck, &cfg.task)?;
    let report = exec::execute(&source, jobs, &root, &ck)?;
    let groups = sweep::summarize(&rows_of(&root, jobs)?, key);
    write_summary(&root, group_by, &groups)?;
    Ok((report, groups))
}

/// One results row per seed of `cfg`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(ExecReport, Vec<GroupSummary>), CliError> {
    cfg.validate()?;
    let jobs: Vec<Job> = cfg.seeds.iter().map(|&s| Job::single(cfg, s)).collect();
    execute_and_summarize(cfg, &jobs, "config_hash", |r| r.config_hash.clone())
}

pub fn cmd_sweep(
    template: &ExperimentConfig,
    axis: Axis,
    values: Option<&str>,
) -> Result<(ExecReport, Vec<GroupSummary>), CliError> {
    let jobs = sweep::grid(template, axis, values)?;
    execute_and_summarize(template, &jobs, axis.name(), move |r| axis.value_of(r))
}

pub fn cmd_verify(root: &Path, row: Option<usize>, checkpoint_dir: Option<&Path>) -> Result<exec::Verification, CliError> {
    exec::verify(root, row, checkpoint_dir)
}
