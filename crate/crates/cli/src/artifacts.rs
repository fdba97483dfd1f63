//! Pretrained encoder and cached source statistics on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use doco_core::checkpoint::{self, Checkpoint};
use doco_core::encoder::Encoder;
use doco_core::objective::SourceStats;
use doco_core::synth::{cache_source_stats, pretrain_source, PretrainLog, Task};

use crate::config::{ExperimentConfig, TaskConfig};
use crate::CliError;

pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const STATS_FILE: &str = "source_stats.ckpt";
pub const LOG_FILE: &str = "pretrain_log.json";

/// Everything a run needs from pretraining.
#[derive(Clone, Debug)]
pub struct Source {
    pub task: Task,
    pub encoder: Encoder,
    pub stats: SourceStats,
    /// SHA-256 of the encoder checkpoint file, hex.
    pub encoder_digest: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub task: TaskConfig,
    pub log: PretrainLog,
    pub n_source_stats: usize,
}

fn digest(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Trains the source model, caches its statistics and writes both (plus the
/// training log) into `dir`, which is created if needed.
pub fn pretrain(cfg: &ExperimentConfig, dir: &Path) -> anyhow::Result<(Source, PretrainReport)> {
    let task = Task::generate(cfg.task.spec())?;
    let (encoder, log) = pretrain_source(&task, &cfg.encoder, &cfg.pretrain)?;
    let stats = cache_source_stats(&encoder, &task, cfg.n_source_stats, cfg.pretrain.seed)?;

    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut meta = BTreeMap::new();
    meta.insert("task".into(), serde_json::to_string(&cfg.task)?);
    meta.insert("pretrain".into(), serde_json::to_string(&cfg.pretrain)?);
    meta.insert("held_out_accuracy".into(), log.held_out_accuracy.to_string());
    let enc_path = dir.join(ENCODER_FILE);
    checkpoint::encoder_to_checkpoint(&encoder, meta)?.save(&enc_path)?;
    checkpoint::stats_to_checkpoint(&stats).save(&dir.join(STATS_FILE))?;
    let report = PretrainReport {
        task: cfg.task.clone(),
        log,
        n_source_stats: cfg.n_source_stats,
    };
    std::fs::write(dir.join(LOG_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    let encoder_digest = digest(&enc_path)?;
    Ok((
        Source {
            task,
            encoder,
            stats,
            encoder_digest,
        },
        report,
    ))
}

/// Loads the artifacts in `dir` and checks they were trained on the task
/// described by `task`.
pub fn load(dir: &Path, task: &TaskConfig) -> Result<Source, CliError> {
    let enc_path = dir.join(ENCODER_FILE);
    let stats_path: PathBuf = dir.join(STATS_FILE);
    for p in [&enc_path, &stats_path] {
        if !p.is_file() {
            return Err(CliError::MissingArtifact(p.display().to_string()));
        }
    }
    let inner = || -> anyhow::Result<Source> {
        let ck = Checkpoint::load(&enc_path)?;
        let trained_on: TaskConfig = serde_json::from_str(ck.meta("task")?)?;
        if &trained_on != task {
            anyhow::bail!("{} was trained on a different task than the config describes", enc_path.display());
        }
        Ok(Source {
            task: Task::generate(task.spec())?,
            encoder: checkpoint::encoder_from_checkpoint(&ck)?,
            stats: checkpoint::stats_from_checkpoint(&Checkpoint::load(&stats_path)?)?,
            encoder_digest: digest(&enc_path)?,
        })
    };
    inner().map_err(CliError::Other)
}
