//! Experiment configuration, loaded from JSON and overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use doco_core::adapt::{AdapterConfig, Aggregation, Method};
use doco_core::encoder::EncoderConfig;
use doco_core::metrics::OodScore;
use doco_core::synth::{PretrainConfig, StreamConfig, TaskSpec};

pub const OUTPUT_ROOT_ENV: &str = "DOCO_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "doco-out";

/// The procedural task. Per-class seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_id_classes: usize,
    pub n_ood_classes: usize,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let s = TaskSpec::default();
        TaskConfig {
            n_id_classes: s.n_id_classes,
            n_ood_classes: s.n_ood_classes,
            n_tokens: s.n_tokens,
            token_dim: s.token_dim,
            amplitude: s.amplitude,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        let mut s = TaskSpec::new(self.n_id_classes, self.n_ood_classes, self.n_tokens, self.token_dim, self.seed);
        s.amplitude = self.amplitude;
        s.noise = self.noise;
        s
    }
}

/// Stream settings without the seed, which comes from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    pub kappa: f64,
    pub batch_size: usize,
    pub batches_per_domain: usize,
    pub severity: f64,
    pub shift_kinds: Vec<doco_core::synth::ShiftKind>,
    pub domain_order: Vec<usize>,
}

impl Default for StreamSettings {
    fn default() -> Self {
        let s = StreamConfig::default();
        StreamSettings {
            kappa: s.kappa,
            batch_size: s.batch_size,
            batches_per_domain: s.batches_per_domain,
            severity: s.severity,
            shift_kinds: s.shift_kinds,
            domain_order: s.domain_order,
        }
    }
}

impl StreamSettings {
    pub fn with_seed(&self, seed: u64) -> StreamConfig {
        StreamConfig {
            kappa: self.kappa,
            batch_size: self.batch_size,
            batches_per_domain: self.batches_per_domain,
            severity: self.severity,
            shift_kinds: self.shift_kinds.clone(),
            domain_order: self.domain_order.clone(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// Clean samples used for the cached source statistics.
    pub n_source_stats: usize,
    pub stream: StreamSettings,
    pub adapter: AdapterConfig,
    pub method: Method,
    pub ood_score: OodScore,
    pub exclude_first_batch: bool,
    /// Per-domain cells averaged (default) or all samples pooled.
    pub aggregation: Aggregation,
    pub seeds: Vec<u64>,
    /// Results root; falls back to the environment, then `doco-out`.
    pub output_dir: Option<PathBuf>,
    /// Encoder and statistics location; defaults to `<output>/checkpoint`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            n_source_stats: 300,
            stream: StreamSettings::default(),
            adapter: AdapterConfig::default(),
            method: Method::Doco,
            ood_score: OodScore::Energy,
            exclude_first_batch: false,
            aggregation: Aggregation::PerDomain,
            seeds: vec![0],
            output_dir: None,
            checkpoint_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("no seeds given");
        }
        self.task.spec().validate()?;
        self.stream.with_seed(0).validate()?;
        self.adapter.validate()?;
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    }

    pub fn checkpoint_root(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.output_root().join("checkpoint"))
    }

    /// Ablation mask, or `src` for the source model.
    pub fn mask(&self) -> String {
        match self.method {
            Method::Doco => self.adapter.mask(),
            Method::SourceOnly => "src".into(),
        }
    }

    /// Everything that determines a run's numbers except the seed and the
    /// output location.
    fn fingerprint(&self) -> ExperimentConfig {
        ExperimentConfig {
            seeds: Vec::new(),
            output_dir: None,
            checkpoint_dir: None,
            ..self.clone()
        }
    }

    /// Key of one results row (without the seed).
    pub fn config_hash(&self) -> String {
        hash_json(&self.fingerprint())
    }

    /// Key of one adaptation run. The OOD score is excluded because it
    /// does not influence adaptation, so runs differing only in score share
    /// a run directory.
    pub fn run_hash(&self) -> String {
        hash_json(&ExperimentConfig {
            ood_score: OodScore::Energy,
            ..self.fingerprint()
        })
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// `3`, `0,1,2` or `0..10` (half-open).
pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if b <= a {
            bail!("empty seed range '{s}'");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed '{p}'")))
        .collect()
}

/// `2,0,3,1` or the compact `2031` when every index is a single digit.
pub fn parse_order(s: &str) -> anyhow::Result<Vec<usize>> {
    let parts: Vec<&str> = if s.contains(',') {
        s.split(',').collect()
    } else {
        s.split("").filter(|p| !p.is_empty()).collect()
    };
    parts
        .iter()
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad domain index '{p}'")))
        .collect()
}

pub fn format_order(order: &[usize]) -> String {
    order.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}
