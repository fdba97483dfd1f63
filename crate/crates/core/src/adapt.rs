//! The online adaptation loop.
//!
//! Batch 1: split on raw features, predict ID samples with the raw model,
//! refine the prompt for `init_iters` full-gradient steps on that fixed ID
//! subset, then predict the OOD samples with the refined prompt.
//!
//! Batch t ≥ 2: split on features under `p_t`, predict ID samples with `p_t`,
//! take one AdamW step on the ID subset to get `p_{t+1}`, and predict OOD
//! samples with `p_{t+1}` (or `p_t` when propagation is disabled).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{argmax_rows, Encoder, PromptState};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricSummary, OodScore, ScoredSample, TrueLabel};
use crate::objective::{doco_loss_on_tape, stat_loss, LossBreakdown, SourceStats, DEFAULT_BETA};
use crate::optim::OptimizerState;
use crate::rng;
use crate::splitter::{split_batch, ScoreBuffer, SplitResult};
use crate::synth::{AdapterBatch, StreamBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Split each batch into likely-ID / likely-OOD (otherwise all ID).
    pub use_split: bool,
    /// Predict likely-OOD samples with the freshly updated prompt.
    pub use_propagate: bool,
    /// Include the structural regularizer.
    pub use_reg: bool,
    pub beta: f64,
    pub init_iters: usize,
    pub small_batch_buffer: bool,
    pub prompt_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            use_split: true,
            use_propagate: true,
            use_reg: true,
            beta: DEFAULT_BETA,
            init_iters: 50,
            small_batch_buffer: false,
            prompt_len: 8,
            lr: 0.1,
            weight_decay: 0.01,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_reg && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("use_reg needs a positive finite beta, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        if self.use_reg {
            self.beta
        } else {
            0.0
        }
    }

    /// Ablation mask as `S`, `O`, `R` letters for the enabled components.
    pub fn mask(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.use_split, 'S'), (self.use_propagate, 'O'), (self.use_reg, 'R')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub prompt: PromptState,
    pub optimizer: OptimizerState,
    /// Batches processed after the first.
    pub step_count: usize,
    pub batches_seen: usize,
    pub rejected_steps: usize,
    pub source_stats: SourceStats,
    pub config: AdapterConfig,
    pub buffer: Option<ScoreBuffer>,
}

impl AdapterState {
    /// Fresh state with a Xavier-initialized prompt drawn from `seed`'s
    /// prompt-init sub-stream.
    pub fn new(encoder: &Encoder, source_stats: SourceStats, config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = encoder.config.d_model;
        if source_stats.dim() != d || source_stats.sigma_s.len() != d {
            return Err(Error::shape("AdapterState", format!("stats dim {} vs d_model {d}", source_stats.dim())));
        }
        let prompt = PromptState::xavier(config.prompt_len, d, &mut rng::stream(seed, "prompt-init"));
        let optimizer = OptimizerState::new(prompt.tokens.len())
            .with_lr(config.lr)
            .with_weight_decay(config.weight_decay);
        Ok(AdapterState {
            prompt,
            optimizer,
            step_count: 0,
            batches_seen: 0,
            rejected_steps: 0,
            source_stats,
            buffer: config.small_batch_buffer.then(ScoreBuffer::default),
            config,
        })
    }
}

/// What the adapter produced for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub predictions: Vec<usize>,
    /// Logits each sample was finally predicted with.
    pub logits: Tensor,
    pub split: SplitResult,
    /// Split of the same batch on promptless features, for diagnostics.
    pub raw_split: SplitResult,
    /// Loss at the (first) update of this batch; `None` if adaptation skipped.
    pub loss: Option<LossBreakdown>,
    pub steps_applied: usize,
    pub steps_rejected: usize,
    /// Statistics loss over the whole batch under the prompt carried into it.
    pub stat_carried: f64,
    /// Statistics loss over the whole batch without any prompt.
    pub stat_raw: f64,
}

impl BatchOutput {
    pub fn ood_scores(&self, score: OodScore) -> Result<Vec<f64>> {
        (0..self.logits.rows()).map(|i| score.score(self.logits.row(i))).collect()
    }
}

fn loss_and_grad(
    encoder: &Encoder,
    tokens: &Tensor,
    raw: &Tensor,
    prompt: &PromptState,
    src: &SourceStats,
    beta: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.param(prompt.tokens.clone());
    let z = encoder.features_taped(&mut tape, tokens, Some(p))?;
    let (loss, breakdown) = doco_loss_on_tape(&mut tape, z, raw, src, beta)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("adaptation loss".into()));
    }
    tape.backward(loss)?;
    let grad = tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; prompt.tokens.len()]);
    Ok((breakdown, grad))
}

/// One guarded update on the ID subset. Returns the loss when the step was
/// applied; a non-finite loss, gradient, or resulting prompt rolls back.
fn guarded_step(encoder: &Encoder, state: &mut AdapterState, tokens: &Tensor, raw: &Tensor) -> Option<LossBreakdown> {
    let beta = state.config.effective_beta();
    let (breakdown, grad) = match loss_and_grad(encoder, tokens, raw, &state.prompt, &state.source_stats, beta) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("adaptation step rejected: {e}");
            return None;
        }
    };
    let backup = (state.prompt.clone(), state.optimizer.clone());
    if state.optimizer.step(&mut state.prompt.tokens.data, &grad).is_err() || !state.prompt.is_finite() {
        log::warn!("adaptation step rejected: non-finite update");
        (state.prompt, state.optimizer) = backup;
        return None;
    }
    Some(breakdown)
}

fn split_or_all(features: &Tensor, encoder: &Encoder, use_split: bool, buffer: Option<&mut ScoreBuffer>) -> Result<SplitResult> {
    if use_split {
        split_batch(features, encoder.prototypes(), buffer)
    } else {
        let scores = crate::splitter::proto_scores(features, encoder.prototypes())?;
        Ok(SplitResult::all_id(scores))
    }
}

/// Writes `rows` of `src` into `dst` at `indices`.
fn scatter_rows(dst: &mut Tensor, indices: &[usize], src: &Tensor) {
    let w = dst.last_dim();
    for (k, &i) in indices.iter().enumerate() {
        dst.data[i * w..(i + 1) * w].copy_from_slice(src.row(k));
    }
}

fn logits_for(encoder: &Encoder, tokens: &Tensor, indices: &[usize], prompt: Option<&PromptState>) -> Result<Tensor> {
    encoder.forward_logits(&encoder.forward_features(&tokens.select(indices), prompt)?)
}

fn assemble(n: usize, classes: usize, parts: &[(&[usize], &Tensor)]) -> Tensor {
    let mut logits = Tensor::zeros(&[n, classes]);
    for (idx, part) in parts {
        scatter_rows(&mut logits, idx, part);
    }
    logits
}

/// First-batch initialization: `init_iters` refinement steps on the ID
/// subset of a raw-feature split.
pub fn init_first_batch(encoder: &Encoder, state: &mut AdapterState, batch: &AdapterBatch) -> Result<BatchOutput> {
    let tokens = &batch.tokens;
    let n = tokens.shape[0];
    let c = encoder.config.n_classes;
    let raw = encoder.forward_features(tokens, None)?;
    let carried = encoder.forward_features(tokens, Some(&state.prompt))?;
    let stat_carried = stat_loss(&carried, &state.source_stats)?;
    let stat_raw = stat_loss(&raw, &state.source_stats)?;

    let split = split_or_all(&raw, encoder, state.config.use_split, state.buffer.as_mut())?;
    let raw_split = split.clone();
    let raw_logits = encoder.forward_logits(&raw)?;
    let id_logits = raw_logits.select(&split.id_indices);

    let mut loss = None;
    let mut applied = 0;
    let mut rejected = 0;
    if split.id_indices.is_empty() {
        log::info!("first batch: empty ID subset, refinement skipped");
    } else {
        let id_tokens = tokens.select(&split.id_indices);
        let id_raw = raw.select(&split.id_indices);
        for _ in 0..state.config.init_iters {
            match guarded_step(encoder, state, &id_tokens, &id_raw) {
                Some(b) => {
                    loss.get_or_insert(b);
                    applied += 1;
                }
                None => rejected += 1,
            }
        }
    }

    let ood_logits = if split.ood_indices.is_empty() {
        Tensor::zeros(&[0, c])
    } else if state.config.use_propagate && !split.id_indices.is_empty() {
        logits_for(encoder, tokens, &split.ood_indices, Some(&state.prompt))?
    } else {
        raw_logits.select(&split.ood_indices)
    };
    let logits = assemble(n, c, &[(&split.id_indices, &id_logits), (&split.ood_indices, &ood_logits)]);
    state.batches_seen += 1;
    state.rejected_steps += rejected;
    Ok(BatchOutput {
        predictions: argmax_rows(&logits),
        logits,
        split,
        raw_split,
        loss,
        steps_applied: applied,
        steps_rejected: rejected,
        stat_carried,
        stat_raw,
    })
}

/// One optimizer step on the ID rows of `tokens` (with their promptless
/// features `raw`). Rows outside `split.id_indices` are never read. Returns
/// `None` when the ID subset is empty or the step was rejected.
pub fn update_prompt(
    encoder: &Encoder,
    state: &mut AdapterState,
    tokens: &Tensor,
    raw: &Tensor,
    split: &SplitResult,
) -> Option<LossBreakdown> {
    if split.id_indices.is_empty() {
        log::info!("batch {}: empty ID subset, adaptation skipped", state.batches_seen);
        return None;
    }
    guarded_step(encoder, state, &tokens.select(&split.id_indices), &raw.select(&split.id_indices))
}

/// One online step for batch t ≥ 2.
pub fn step_batch(encoder: &Encoder, state: &mut AdapterState, batch: &AdapterBatch) -> Result<BatchOutput> {
    if state.batches_seen == 0 {
        return Err(Error::InvalidConfig("step_batch before init_first_batch".into()));
    }
    let tokens = &batch.tokens;
    let n = tokens.shape[0];
    let c = encoder.config.n_classes;
    let raw = encoder.forward_features(tokens, None)?;
    let prompted = encoder.forward_features(tokens, Some(&state.prompt))?;
    let stat_carried = stat_loss(&prompted, &state.source_stats)?;
    let stat_raw = stat_loss(&raw, &state.source_stats)?;

    let mut diag_buffer = state.buffer.clone();
    let raw_split = split_or_all(&raw, encoder, state.config.use_split, diag_buffer.as_mut())?;
    let split = split_or_all(&prompted, encoder, state.config.use_split, state.buffer.as_mut())?;
    let id_logits = encoder.forward_logits(&prompted.select(&split.id_indices))?;

    let loss = update_prompt(encoder, state, tokens, &raw, &split);
    let rejected = usize::from(!split.id_indices.is_empty() && loss.is_none());

    let ood_logits = if split.ood_indices.is_empty() {
        Tensor::zeros(&[0, c])
    } else if state.config.use_propagate {
        logits_for(encoder, tokens, &split.ood_indices, Some(&state.prompt))?
    } else {
        encoder.forward_logits(&prompted.select(&split.ood_indices))?
    };
    let logits = assemble(n, c, &[(&split.id_indices, &id_logits), (&split.ood_indices, &ood_logits)]);
    state.batches_seen += 1;
    state.step_count += 1;
    state.rejected_steps += rejected;
    Ok(BatchOutput {
        predictions: argmax_rows(&logits),
        logits,
        split,
        raw_split,
        steps_applied: usize::from(loss.is_some()),
        loss,
        steps_rejected: rejected,
        stat_carried,
        stat_raw,
    })
}

/// Dispatches to [`init_first_batch`] or [`step_batch`].
pub fn process_batch(encoder: &Encoder, state: &mut AdapterState, batch: &AdapterBatch) -> Result<BatchOutput> {
    if state.batches_seen == 0 {
        init_first_batch(encoder, state, batch)
    } else {
        step_batch(encoder, state, batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Doco,
    SourceOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Doco => "doco",
            Method::SourceOnly => "source-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "doco" => Ok(Method::Doco),
            "source-only" | "source" => Ok(Method::SourceOnly),
            _ => Err(Error::InvalidConfig(format!("unknown method '{s}'"))),
        }
    }
}

/// One row per batch. Field order is the serialized column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub domain_index: usize,
    pub n_id_assigned: usize,
    pub n_ood_assigned: usize,
    /// Fraction of ID-assigned samples that are truly ID.
    pub split_precision: Option<f64>,
    /// Fraction of truly-ID samples assigned ID.
    pub split_recall: Option<f64>,
    pub loss_stat: Option<f64>,
    pub loss_reg: Option<f64>,
    /// Accuracy over the truly-ID samples of the batch.
    pub acc_batch: Option<f64>,
    /// Split precision when splitting promptless features instead.
    pub raw_split_precision: Option<f64>,
    pub steps_rejected: usize,
}

/// Pre-update statistics loss on the first batch of a domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatProbe {
    pub batch_index: usize,
    pub domain_index: usize,
    pub stat_carried: f64,
    pub stat_raw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub batch_index: usize,
    pub domain_index: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
    pub label: TrueLabel,
}

/// How metrics are pooled over a run: one cell per domain (averaged), or
/// all samples as a single cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    PerDomain,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub batches: Vec<BatchRecord>,
    pub samples: Vec<SampleRecord>,
    pub probes: Vec<StatProbe>,
    pub steps_applied: usize,
    pub steps_rejected: usize,
}

fn precision_recall(split: &SplitResult, labels: &[TrueLabel]) -> (Option<f64>, Option<f64>) {
    let true_id = labels.iter().filter(|l| matches!(l, TrueLabel::Id(_))).count();
    let hit = split
        .id_indices
        .iter()
        .filter(|&&i| matches!(labels[i], TrueLabel::Id(_)))
        .count();
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    (ratio(hit, split.id_indices.len()), ratio(hit, true_id))
}

impl RunRecord {
    fn push(&mut self, batch: &StreamBatch, out: &BatchOutput, probe: bool) {
        let labels = batch.hidden_labels();
        let (precision, recall) = precision_recall(&out.split, labels);
        let (raw_precision, _) = precision_recall(&out.raw_split, labels);
        let mut correct = 0;
        let mut n_id = 0;
        for (i, &label) in labels.iter().enumerate() {
            if let TrueLabel::Id(c) = label {
                n_id += 1;
                correct += usize::from(out.predictions[i] == c);
            }
            self.samples.push(SampleRecord {
                batch_index: batch.batch_index,
                domain_index: batch.domain_index,
                predicted: out.predictions[i],
                logits: out.logits.row(i).to_vec(),
                label,
            });
        }
        self.batches.push(BatchRecord {
            batch_index: batch.batch_index,
            domain_index: batch.domain_index,
            n_id_assigned: out.split.id_indices.len(),
            n_ood_assigned: out.split.ood_indices.len(),
            split_precision: precision,
            split_recall: recall,
            loss_stat: out.loss.map(|l| l.stat),
            loss_reg: out.loss.map(|l| l.reg),
            acc_batch: (n_id > 0).then(|| correct as f64 / n_id as f64),
            raw_split_precision: raw_precision,
            steps_rejected: out.steps_rejected,
        });
        if probe {
            self.probes.push(StatProbe {
                batch_index: batch.batch_index,
                domain_index: batch.domain_index,
                stat_carried: out.stat_carried,
                stat_raw: out.stat_raw,
            });
        }
        self.steps_applied += out.steps_applied;
        self.steps_rejected += out.steps_rejected;
    }

    /// Fraction of batches in which at least one step was rejected.
    pub fn rejected_batch_fraction(&self) -> f64 {
        if self.batches.is_empty() {
            return 0.0;
        }
        self.batches.iter().filter(|b| b.steps_rejected > 0).count() as f64 / self.batches.len() as f64
    }

    /// Scored samples per domain cell, in stream order of first appearance.
    pub fn cells(&self, score: OodScore, exclude_first_batch: bool) -> Result<Vec<(usize, Vec<ScoredSample>)>> {
        let first = self.batches.first().map(|b| b.batch_index);
        let mut cells: Vec<(usize, Vec<ScoredSample>)> = Vec::new();
        for s in &self.samples {
            if exclude_first_batch && Some(s.batch_index) == first {
                continue;
            }
            let scored = ScoredSample {
                ood_score: score.score(&s.logits)?,
                predicted_class: s.predicted,
                true_label: s.label,
            };
            match cells.iter_mut().find(|(d, _)| *d == s.domain_index) {
                Some((_, v)) => v.push(scored),
                None => cells.push((s.domain_index, vec![scored])),
            }
        }
        Ok(cells)
    }

    fn cells_for(&self, score: OodScore, exclude_first_batch: bool, aggregation: Aggregation) -> Result<Vec<Vec<ScoredSample>>> {
        let cells = self.cells(score, exclude_first_batch)?.into_iter().map(|(_, s)| s);
        Ok(match aggregation {
            Aggregation::PerDomain => cells.collect(),
            Aggregation::Pooled => vec![cells.flatten().collect()],
        })
    }

    /// Per-domain ACC/AUC/H averaged across domains. Cells without both ID
    /// and OOD samples have no AUC and are reported via [`Self::accuracy`].
    pub fn summary(&self, score: OodScore, exclude_first_batch: bool) -> Result<Option<MetricSummary>> {
        self.summary_with(score, exclude_first_batch, Aggregation::PerDomain)
    }

    pub fn summary_with(
        &self,
        score: OodScore,
        exclude_first_batch: bool,
        aggregation: Aggregation,
    ) -> Result<Option<MetricSummary>> {
        let cells = self.cells_for(score, exclude_first_batch, aggregation)?;
        let per: Option<Vec<MetricSummary>> = cells.iter().map(|s| metrics::summarize(s)).collect();
        match per {
            Some(v) if !v.is_empty() => Ok(Some(metrics::aggregate(&v)?)),
            _ => Ok(None),
        }
    }

    /// Mean over domain cells of closed-set accuracy on truly-ID samples.
    pub fn accuracy(&self, exclude_first_batch: bool) -> Result<f64> {
        self.accuracy_with(exclude_first_batch, Aggregation::PerDomain)
    }

    pub fn accuracy_with(&self, exclude_first_batch: bool, aggregation: Aggregation) -> Result<f64> {
        let cells = self.cells_for(OodScore::MaxLogit, exclude_first_batch, aggregation)?;
        let accs: Vec<f64> = cells
            .iter()
            .filter_map(|s| {
                let id: Vec<_> = s.iter().filter_map(|x| match x.true_label {
                    TrueLabel::Id(c) => Some(usize::from(c == x.predicted_class)),
                    TrueLabel::Ood => None,
                }).collect();
                (!id.is_empty()).then(|| id.iter().sum::<usize>() as f64 / id.len() as f64)
            })
            .collect();
        if accs.is_empty() {
            return Err(Error::Empty("accuracy: no ID samples"));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Runs DOCO over the stream strictly in order, one pass. The adapter only
/// ever receives [`AdapterBatch`]es; hidden labels are joined afterwards.
pub fn run_stream(encoder: &Encoder, state: &mut AdapterState, stream: &[StreamBatch]) -> Result<RunRecord> {
    if stream.is_empty() {
        return Err(Error::Empty("run_stream"));
    }
    let mut record = RunRecord::default();
    let mut last_domain = None;
    for batch in stream {
        let out = process_batch(encoder, state, &batch.adapter_view())?;
        let first_of_domain = last_domain != Some(batch.domain_index);
        last_domain = Some(batch.domain_index);
        record.push(batch, &out, first_of_domain);
    }
    Ok(record)
}

/// The frozen source model on its own: every sample predicted from its raw
/// features.
pub fn run_source_only(encoder: &Encoder, source_stats: &SourceStats, stream: &[StreamBatch]) -> Result<RunRecord> {
    if stream.is_empty() {
        return Err(Error::Empty("run_source_only"));
    }
    let mut record = RunRecord::default();
    let mut last_domain = None;
    for batch in stream {
        let raw = encoder.forward_features(batch.tokens(), None)?;
        let logits = encoder.forward_logits(&raw)?;
        let stat_raw = stat_loss(&raw, source_stats)?;
        let scores = crate::splitter::proto_scores(&raw, encoder.prototypes())?;
        let split = SplitResult::all_id(scores);
        let out = BatchOutput {
            predictions: argmax_rows(&logits),
            logits,
            raw_split: split.clone(),
            split,
            loss: None,
            steps_applied: 0,
            steps_rejected: 0,
            stat_carried: stat_raw,
            stat_raw,
        };
        let first_of_domain = last_domain != Some(batch.domain_index);
        last_domain = Some(batch.domain_index);
        record.push(batch, &out, first_of_domain);
    }
    Ok(record)
}
