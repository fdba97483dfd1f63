//! Procedural source task, source pretraining, and corrupted open-set streams.
//!
//! Each class is a fixed `k × d_in` token template; a sample is its template
//! plus isotropic Gaussian noise. OOD classes have templates of their own that
//! the source model never sees. A domain applies one corruption, with
//! parameters realized once per domain, to ID and OOD samples alike.

use std::fmt;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{argmax_rows, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::TrueLabel;
use crate::objective::SourceStats;
use crate::optim::OptimizerState;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_id_classes: usize,
    pub n_ood_classes: usize,
    /// Tokens per sample (`k`).
    pub n_tokens: usize,
    /// Raw token width (`d_in`).
    pub token_dim: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub seed: u64,
    pub id_class_seeds: Vec<u64>,
    pub ood_class_seeds: Vec<u64>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::new(8, 4, 16, 16, 0)
    }
}

impl TaskSpec {
    pub fn new(n_id_classes: usize, n_ood_classes: usize, n_tokens: usize, token_dim: usize, seed: u64) -> Self {
        TaskSpec {
            n_id_classes,
            n_ood_classes,
            n_tokens,
            token_dim,
            amplitude: 1.0,
            noise: 0.5,
            seed,
            id_class_seeds: (0..n_id_classes).map(|c| rng::sub_seed(seed, &format!("id-class/{c}"))).collect(),
            ood_class_seeds: (0..n_ood_classes).map(|c| rng::sub_seed(seed, &format!("ood-class/{c}"))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_id_classes == 0 || self.n_tokens == 0 || self.token_dim == 0 {
            return Err(Error::InvalidConfig("task needs >= 1 ID class, token and token width".into()));
        }
        if self.id_class_seeds.len() != self.n_id_classes || self.ood_class_seeds.len() != self.n_ood_classes {
            return Err(Error::InvalidConfig("class seed count mismatch".into()));
        }
        let mut all: Vec<u64> = self.id_class_seeds.iter().chain(&self.ood_class_seeds).copied().collect();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("class seeds must be distinct".into()));
        }
        if !(self.amplitude.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::InvalidConfig("amplitude/noise must be finite, noise >= 0".into()));
        }
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.n_tokens * self.token_dim
    }

    /// Encoder config whose input and head match this task.
    pub fn encoder_config(&self, base: &EncoderConfig) -> EncoderConfig {
        EncoderConfig {
            n_patches: self.n_tokens,
            patch_dim: self.token_dim,
            n_classes: self.n_id_classes,
            ..base.clone()
        }
    }
}

fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect()
}

/// Realized class templates for a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub id_templates: Vec<Vec<f64>>,
    pub ood_templates: Vec<Vec<f64>>,
}

impl Task {
    pub fn generate(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let len = spec.sample_len();
        let make = |seed: u64| {
            let mut r = rng::stream(seed, "template");
            gaussian(&mut r, len, spec.amplitude)
        };
        Ok(Task {
            id_templates: spec.id_class_seeds.iter().map(|&s| make(s)).collect(),
            ood_templates: spec.ood_class_seeds.iter().map(|&s| make(s)).collect(),
            spec,
        })
    }

    /// One clean sample of ID class `class`, appended to `out`.
    pub fn sample_id_into(&self, class: usize, rng: &mut Rng, out: &mut Vec<f64>) {
        self.push_noisy(&self.id_templates[class], rng, out);
    }

    pub fn sample_ood_into(&self, class: usize, rng: &mut Rng, out: &mut Vec<f64>) {
        self.push_noisy(&self.ood_templates[class], rng, out);
    }

    fn push_noisy(&self, template: &[f64], rng: &mut Rng, out: &mut Vec<f64>) {
        let s = self.spec.noise;
        out.extend(template.iter().map(|&t| {
            let e: f64 = StandardNormal.sample(rng);
            t + s * e
        }));
    }

    /// `n` clean ID samples with uniformly drawn classes.
    pub fn clean_id_batch(&self, n: usize, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.spec.sample_len());
        let labels: Vec<usize> = (0..n)
            .map(|_| {
                let c = rng.random_range(0..self.spec.n_id_classes);
                self.sample_id_into(c, rng, &mut data);
                c
            })
            .collect();
        let t = Tensor::new(vec![n, self.spec.n_tokens, self.spec.token_dim], data).expect("sized");
        (t, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub accuracy_floor: f64,
    /// Initial value of every entry of the final-norm bias.
    pub feature_offset: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            batch_size: 64,
            lr: 3e-3,
            min_steps: 300,
            max_steps: 3000,
            eval_every: 100,
            eval_size: 512,
            accuracy_floor: 0.9,
            feature_offset: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub steps: usize,
    pub held_out_accuracy: f64,
    /// `(step, train loss, held-out accuracy)` at each evaluation.
    pub history: Vec<(usize, f64, f64)>,
}

pub fn accuracy(encoder: &Encoder, tokens: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = encoder.forward_logits(&encoder.forward_features(tokens, None)?)?;
    let pred = argmax_rows(&logits);
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Trains encoder and head by cross-entropy on clean ID samples until the
/// held-out accuracy reaches the floor (after `min_steps`) or `max_steps`.
pub fn pretrain_source(task: &Task, base: &EncoderConfig, cfg: &PretrainConfig) -> Result<(Encoder, PretrainLog)> {
    let enc_cfg = task.spec.encoder_config(base);
    let mut encoder = Encoder::init(enc_cfg, &mut rng::stream(cfg.seed, "encoder-init"))?;
    encoder.params.lnf_beta.data.iter_mut().for_each(|b| *b = cfg.feature_offset);
    let mut data_rng = rng::stream(cfg.seed, "pretrain-data");
    let (eval_x, eval_y) = task.clean_id_batch(cfg.eval_size, &mut rng::stream(cfg.seed, "pretrain-eval"));

    let mut opts: Vec<OptimizerState> = encoder
        .params
        .named()
        .iter()
        .map(|(_, t)| OptimizerState::new(t.len()).with_lr(cfg.lr).with_weight_decay(0.0))
        .collect();
    let mut history = Vec::new();
    let mut step = 0;
    let mut acc = accuracy(&encoder, &eval_x, &eval_y)?;
    loop {
        if step >= cfg.min_steps && acc >= cfg.accuracy_floor {
            break;
        }
        if step >= cfg.max_steps {
            return Err(Error::AccuracyFloor {
                accuracy: acc,
                floor: cfg.accuracy_floor,
                steps: step,
            });
        }
        let (x, y) = task.clean_id_batch(cfg.batch_size, &mut data_rng);
        let mut tape = Tape::new();
        let w = encoder.bind(&mut tape, true);
        let xv = tape.constant(x);
        let z = encoder.features_on_tape(&mut tape, &w, xv, None)?;
        let logits = tape.linear(z, w.head_w, Some(w.head_b))?;
        let loss = tape.cross_entropy(logits, &y)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item();
        let grads: Vec<Vec<f64>> = w
            .into_vec()
            .into_iter()
            .map(|v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        let mut i = 0;
        let mut failure = None;
        encoder.params.for_each_mut(|name, t| {
            if failure.is_none() && !grads[i].is_empty() {
                if let Err(e) = opts[i].step(&mut t.data, &grads[i]) {
                    failure = Some(Error::NonFinite(format!("pretraining gradient of {name}: {e}")));
                }
            }
            i += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            acc = accuracy(&encoder, &eval_x, &eval_y)?;
            history.push((step, loss_value, acc));
            log::debug!("pretrain step {step}: loss {loss_value:.4} held-out acc {acc:.4}");
        }
    }
    Ok((
        encoder,
        PretrainLog {
            steps: step,
            held_out_accuracy: acc,
            history,
        },
    ))
}

/// Population moments of promptless features over `n` fresh clean ID samples.
pub fn cache_source_stats(encoder: &Encoder, task: &Task, n: usize, seed: u64) -> Result<SourceStats> {
    if n < 2 {
        return Err(Error::InvalidConfig("source statistics need n >= 2".into()));
    }
    let (x, _) = task.clean_id_batch(n, &mut rng::stream(seed, "source-stats"));
    SourceStats::from_features(&encoder.forward_features(&x, None)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    AdditiveBias,
    Gain,
    TokenDropout,
    BlurMix,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [ShiftKind::AdditiveBias, ShiftKind::Gain, ShiftKind::TokenDropout, ShiftKind::BlurMix];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::AdditiveBias => "additive-bias",
            ShiftKind::Gain => "gain",
            ShiftKind::TokenDropout => "token-dropout",
            ShiftKind::BlurMix => "blur-mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown shift kind '{s}'")))
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Realized corruption parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Delta {
    /// Added to every token.
    AdditiveBias { bias: Vec<f64> },
    /// Per-channel positive gain applied to every token.
    Gain { diag: Vec<f64> },
    /// Tokens zeroed in every sample.
    TokenDropout { tokens: Vec<usize> },
    /// `x_i ← (1−a)·x_i + a·mean(neighbours of i)`.
    BlurMix { weight: f64 },
}

impl Delta {
    /// Order-sensitive checksum of the realized parameters.
    pub fn checksum(&self) -> f64 {
        let vals: Vec<f64> = match self {
            Delta::AdditiveBias { bias } => bias.clone(),
            Delta::Gain { diag } => diag.clone(),
            Delta::TokenDropout { tokens } => tokens.iter().map(|&t| t as f64).collect(),
            Delta::BlurMix { weight } => vec![*weight],
        };
        vals.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_index: usize,
    pub shift_kind: ShiftKind,
    pub severity: f64,
    pub delta_seed: u64,
    pub ground_truth_delta: Delta,
}

impl DomainSpec {
    pub fn realize(domain_index: usize, shift_kind: ShiftKind, severity: f64, delta_seed: u64, task: &TaskSpec) -> Result<Self> {
        if !(severity.is_finite() && severity >= 0.0) {
            return Err(Error::InvalidConfig(format!("severity must be finite and >= 0, got {severity}")));
        }
        let mut r = rng::stream(delta_seed, shift_kind.name());
        let d_in = task.token_dim;
        let k = task.n_tokens;
        let delta = match shift_kind {
            ShiftKind::AdditiveBias => Delta::AdditiveBias {
                bias: gaussian(&mut r, d_in, severity * task.amplitude),
            },
            ShiftKind::Gain => Delta::Gain {
                diag: gaussian(&mut r, d_in, severity).into_iter().map(f64::exp).collect(),
            },
            ShiftKind::TokenDropout => {
                let frac = (0.15 * severity).min(0.9);
                let m = (frac * k as f64).round() as usize;
                let mut idx: Vec<usize> = (0..k).collect();
                idx.shuffle(&mut r);
                let mut tokens = idx[..m].to_vec();
                tokens.sort_unstable();
                Delta::TokenDropout { tokens }
            }
            ShiftKind::BlurMix => Delta::BlurMix {
                weight: severity / (1.0 + severity),
            },
        };
        Ok(DomainSpec {
            domain_index,
            shift_kind,
            severity,
            delta_seed,
            ground_truth_delta: delta,
        })
    }
}

/// Corrupts one sample in place (`k · d_in` values, token-major).
pub fn apply_corruption(sample: &mut [f64], domain: &DomainSpec, n_tokens: usize) -> Result<()> {
    if n_tokens == 0 || sample.len() % n_tokens != 0 {
        return Err(Error::shape("apply_corruption", format!("{} values over {n_tokens} tokens", sample.len())));
    }
    let d_in = sample.len() / n_tokens;
    match &domain.ground_truth_delta {
        Delta::AdditiveBias { bias } | Delta::Gain { diag: bias } if bias.len() != d_in => {
            return Err(Error::shape("apply_corruption", format!("delta width {} vs token width {d_in}", bias.len())));
        }
        Delta::AdditiveBias { bias } => {
            for tok in sample.chunks_mut(d_in) {
                tok.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
            }
        }
        Delta::Gain { diag } => {
            for tok in sample.chunks_mut(d_in) {
                tok.iter_mut().zip(diag).for_each(|(x, g)| *x *= g);
            }
        }
        Delta::TokenDropout { tokens } => {
            for &t in tokens {
                if t >= n_tokens {
                    return Err(Error::shape("apply_corruption", format!("dropout token {t} of {n_tokens}")));
                }
                sample[t * d_in..(t + 1) * d_in].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Delta::BlurMix { weight } => {
            let a = *weight;
            if a == 0.0 {
                return Ok(());
            }
            let src = sample.to_vec();
            for t in 0..n_tokens {
                let neighbours: Vec<usize> = [t.checked_sub(1), (t + 1 < n_tokens).then_some(t + 1)]
                    .into_iter()
                    .flatten()
                    .collect();
                if neighbours.is_empty() {
                    continue;
                }
                for j in 0..d_in {
                    let m = neighbours.iter().map(|&u| src[u * d_in + j]).sum::<f64>() / neighbours.len() as f64;
                    sample[t * d_in + j] = (1.0 - a) * src[t * d_in + j] + a * m;
                }
            }
        }
    }
    Ok(())
}

/// Severity used for the headline comparisons.
pub const SEVERE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kappa: f64,
    pub batch_size: usize,
    pub batches_per_domain: usize,
    pub severity: f64,
    /// One domain per entry, indexed by position.
    pub shift_kinds: Vec<ShiftKind>,
    /// Visiting order, a permutation of domain indices.
    pub domain_order: Vec<usize>,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            kappa: 0.5,
            batch_size: 64,
            batches_per_domain: 20,
            severity: SEVERE,
            shift_kinds: ShiftKind::ALL.to_vec(),
            domain_order: vec![0, 1, 2, 3],
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.kappa) {
            return Err(Error::InvalidConfig(format!("kappa must be in [0, 1), got {}", self.kappa)));
        }
        if self.batch_size == 0 || self.batches_per_domain == 0 {
            return Err(Error::InvalidConfig("batch size and batches per domain must be >= 1".into()));
        }
        let mut order = self.domain_order.clone();
        order.sort_unstable();
        if order.is_empty() || order != (0..self.shift_kinds.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig(format!(
                "domain order {:?} is not a permutation of 0..{}",
                self.domain_order,
                self.shift_kinds.len()
            )));
        }
        Ok(())
    }

    pub fn domains(&self, task: &TaskSpec) -> Result<Vec<DomainSpec>> {
        self.shift_kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| DomainSpec::realize(i, kind, self.severity, rng::sub_seed(self.seed, &format!("domain/{i}")), task))
            .collect()
    }
}

/// What the adapter is allowed to see: tokens only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdapterBatch {
    pub tokens: Tensor,
}

/// One stream batch with its hidden evaluation labels.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub batch_index: usize,
    pub domain_index: usize,
    tokens: Tensor,
    labels: Vec<TrueLabel>,
}

impl StreamBatch {
    pub fn new(batch_index: usize, domain_index: usize, tokens: Tensor, labels: Vec<TrueLabel>) -> Self {
        StreamBatch {
            batch_index,
            domain_index,
            tokens,
            labels,
        }
    }

    pub fn adapter_view(&self) -> AdapterBatch {
        AdapterBatch {
            tokens: self.tokens.clone(),
        }
    }

    pub fn hidden_labels(&self) -> &[TrueLabel] {
        &self.labels
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_ood(&self) -> usize {
        self.labels.iter().filter(|l| **l == TrueLabel::Ood).count()
    }
}

/// Everything needed to regenerate a stream byte-for-byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub seed: u64,
    pub task: TaskSpec,
    pub domains: Vec<DomainSpec>,
    pub config: StreamConfig,
}

impl StreamManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub struct Stream {
    pub batches: Vec<StreamBatch>,
    pub manifest: StreamManifest,
}

/// Emits `batches_per_domain` batches for each domain in order. Each sample is
/// OOD with probability `kappa`, its class uniform within its pool.
pub fn make_stream(config: &StreamConfig, task: &Task) -> Result<Stream> {
    config.validate()?;
    let domains = config.domains(&task.spec)?;
    let mut r = rng::stream(config.seed, "stream");
    let spec = &task.spec;
    if config.kappa > 0.0 && spec.n_ood_classes == 0 {
        return Err(Error::InvalidConfig("kappa > 0 needs OOD classes".into()));
    }
    let mut batches = Vec::with_capacity(config.domain_order.len() * config.batches_per_domain);
    for &d in &config.domain_order {
        let domain = &domains[d];
        for _ in 0..config.batches_per_domain {
            let n = config.batch_size;
            let mut data = Vec::with_capacity(n * spec.sample_len());
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let start = data.len();
                if r.random::<f64>() < config.kappa {
                    let c = r.random_range(0..spec.n_ood_classes);
                    task.sample_ood_into(c, &mut r, &mut data);
                    labels.push(TrueLabel::Ood);
                } else {
                    let c = r.random_range(0..spec.n_id_classes);
                    task.sample_id_into(c, &mut r, &mut data);
                    labels.push(TrueLabel::Id(c));
                }
                apply_corruption(&mut data[start..], domain, spec.n_tokens)?;
            }
            let tokens = Tensor::new(vec![n, spec.n_tokens, spec.token_dim], data)?;
            batches.push(StreamBatch::new(batches.len(), d, tokens, labels));
        }
    }
    Ok(Stream {
        batches,
        manifest: StreamManifest {
            seed: config.seed,
            task: task.spec.clone(),
            domains,
            config: config.clone(),
        },
    })
}

/// Rebuilds the stream a manifest describes.
pub fn regenerate(manifest: &StreamManifest) -> Result<Stream> {
    let task = Task::generate(manifest.task.clone())?;
    let stream = make_stream(&manifest.config, &task)?;
    if stream.manifest.domains != manifest.domains {
        return Err(Error::Format("manifest domains disagree with regenerated parameters".into()));
    }
    Ok(stream)
}
