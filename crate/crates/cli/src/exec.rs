//! Executes `(config, seed)` jobs, writes run directories and keeps the
//! append-only results table.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use doco_core::adapt::{run_source_only, run_stream, AdapterState, Method, RunRecord};
use doco_core::metrics::{OodScore, TrueLabel};
use doco_core::rng;
use doco_core::synth::{make_stream, regenerate, StreamBatch, StreamManifest};

use crate::artifacts::{self, Source};
use crate::config::{format_order, ExperimentConfig};
use crate::CliError;

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const RUNS_DIR: &str = "runs";
/// A run whose fraction of batches with a rejected step exceeds this fails.
pub const STORM_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub mask: String,
    pub kappa: f64,
    pub severity: f64,
    pub domain_order: String,
    pub ood_score: String,
    pub acc: f64,
    /// Empty when no domain cell holds both ID and OOD samples.
    pub auc: Option<f64>,
    pub h_score: Option<f64>,
    /// Run directory name under `runs/`.
    pub run: String,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub config: ExperimentConfig,
    pub seed: u64,
    /// One results row per score; all share the same adaptation run.
    pub scores: Vec<OodScore>,
}

impl Job {
    pub fn single(config: &ExperimentConfig, seed: u64) -> Self {
        Job {
            scores: vec![config.ood_score],
            config: config.clone(),
            seed,
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.config.run_hash(), self.seed)
    }

    fn row_config(&self, score: OodScore) -> ExperimentConfig {
        ExperimentConfig {
            ood_score: score,
            ..self.config.clone()
        }
    }

    fn keys(&self) -> Vec<(String, u64)> {
        self.scores
            .iter()
            .map(|&s| (self.row_config(s).config_hash(), self.seed))
            .collect()
    }
}

/// Adapts (or not, for the source model) over an already generated stream.
pub fn simulate(source: &Source, cfg: &ExperimentConfig, seed: u64, batches: &[StreamBatch]) -> anyhow::Result<RunRecord> {
    Ok(match cfg.method {
        Method::Doco => {
            let mut state = AdapterState::new(&source.encoder, source.stats.clone(), cfg.adapter.clone(), seed)?;
            run_stream(&source.encoder, &mut state, batches)?
        }
        Method::SourceOnly => run_source_only(&source.encoder, &source.stats, batches)?,
    })
}

pub fn run_job(source: &Source, job: &Job) -> anyhow::Result<(StreamManifest, RunRecord)> {
    let stream = make_stream(&job.config.stream.with_seed(job.seed), &source.task)?;
    let record = simulate(source, &job.config, job.seed, &stream.batches)?;
    Ok((stream.manifest, record))
}

pub fn rows_for(job: &Job, record: &RunRecord) -> anyhow::Result<Vec<ResultRow>> {
    let run = job.run_id();
    job.scores
        .iter()
        .map(|&score| {
            let cfg = job.row_config(score);
            let summary = record.summary_with(score, cfg.exclude_first_batch, cfg.aggregation)?;
            let acc = match summary {
                Some(s) => s.acc,
                None => record.accuracy_with(cfg.exclude_first_batch, cfg.aggregation)?,
            };
            Ok(ResultRow {
                config_hash: cfg.config_hash(),
                seed: job.seed,
                method: cfg.method.name().into(),
                mask: cfg.mask(),
                kappa: cfg.stream.kappa,
                severity: cfg.stream.severity,
                domain_order: format_order(&cfg.stream.domain_order),
                ood_score: score.name().into(),
                acc,
                auc: summary.map(|s| s.auc),
                h_score: summary.map(|s| s.h_score),
                run: run.clone(),
            })
        })
        .collect()
}

pub fn read_rows(path: &Path) -> anyhow::Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    rdr.deserialize()
        .collect::<Result<Vec<ResultRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TimingRow<'a> {
    config_hash: &'a str,
    seed: u64,
    run: &'a str,
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct SampleRow {
    batch_index: usize,
    domain_index: usize,
    label: String,
    predicted: usize,
    logits: String,
}

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub seed: u64,
    pub encoder_sha256: String,
    pub steps_applied: usize,
    pub steps_rejected: usize,
    pub rejected_batch_fraction: f64,
    pub rows: Vec<ResultRow>,
}

/// Config snapshot stored next to a run: the seed and resolved locations
/// are filled in so the snapshot alone reproduces the run.
fn snapshot(job: &Job, root: &Path, checkpoint_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![job.seed],
        output_dir: Some(root.to_path_buf()),
        checkpoint_dir: Some(checkpoint_dir.to_path_buf()),
        ..job.config.clone()
    }
}

fn write_run_dir(
    dir: &Path,
    config: &ExperimentConfig,
    manifest: &StreamManifest,
    record: &RunRecord,
    summary: &RunSummary,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    std::fs::write(dir.join("manifest.json"), manifest.to_json()? + "\n")?;
    write_csv(&dir.join("batches.csv"), &record.batches)?;
    write_csv(&dir.join("probes.csv"), &record.probes)?;
    write_csv(
        &dir.join("samples.csv"),
        record.samples.iter().map(|s| SampleRow {
            batch_index: s.batch_index,
            domain_index: s.domain_index,
            label: match s.label {
                TrueLabel::Id(c) => c.to_string(),
                TrueLabel::Ood => "ood".into(),
            },
            predicted: s.predicted,
            logits: s.logits.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
        }),
    )?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

#[derive(Debug, Default)]
pub struct ExecReport {
    /// Rows appended by this invocation, in job order.
    pub rows: Vec<ResultRow>,
    /// Jobs already present in the results table.
    pub skipped: usize,
    pub storms: Vec<String>,
}

type JobOutcome = anyhow::Result<(Vec<ResultRow>, f64, Option<String>)>;

struct Flusher {
    next: usize,
    pending: BTreeMap<usize, (String, JobOutcome)>,
    report: ExecReport,
    first_error: Option<anyhow::Error>,
}

impl Flusher {
    /// Writes finished jobs in job order so the table never depends on
    /// scheduling.
    fn flush(&mut self, root: &Path) -> anyhow::Result<()> {
        while let Some((run, outcome)) = self.pending.remove(&self.next) {
            self.next += 1;
            match outcome {
                Ok((rows, wall, None)) => {
                    append_csv(&root.join(RESULTS_FILE), &rows)?;
                    let timings: Vec<_> = rows
                        .iter()
                        .map(|r| TimingRow {
                            config_hash: &r.config_hash,
                            seed: r.seed,
                            run: &run,
                            wall_time_seconds: wall,
                        })
                        .collect();
                    append_csv(&root.join(TIMINGS_FILE), &timings)?;
                    self.report.rows.extend(rows);
                }
                Ok((_, _, Some(diag))) => self.report.storms.push(diag),
                Err(e) => {
                    log::error!("run {run} failed: {e:#}");
                    self.first_error.get_or_insert(e);
                }
            }
        }
        Ok(())
    }
}

/// Runs every job whose rows are not yet in `root/results.csv`, in
/// parallel, appending rows as soon as all earlier jobs have finished.
pub fn execute(source: &Source, jobs: &[Job], root: &Path, checkpoint_dir: &Path) -> Result<ExecReport, CliError> {
    std::fs::create_dir_all(root.join(RUNS_DIR)).with_context(|| format!("creating {}", root.display()))?;
    let results = root.join(RESULTS_FILE);
    let done: HashSet<(String, u64)> = if results.is_file() {
        read_rows(&results)?.into_iter().map(|r| (r.config_hash, r.seed)).collect()
    } else {
        HashSet::new()
    };
    let (todo, finished): (Vec<&Job>, Vec<&Job>) = jobs
        .iter()
        .partition(|j| !j.keys().iter().all(|k| done.contains(k)));

    let flusher = Mutex::new(Flusher {
        next: 0,
        pending: BTreeMap::new(),
        report: ExecReport {
            skipped: finished.len(),
            ..ExecReport::default()
        },
        first_error: None,
    });
    let io_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);

    todo.par_iter().enumerate().for_each(|(i, job)| {
        let run = job.run_id();
        let outcome = (|| -> JobOutcome {
            let t0 = Instant::now();
            let (manifest, record) = run_job(source, job)?;
            let wall = t0.elapsed().as_secs_f64();
            let rows = rows_for(job, &record)?;
            let dir = root.join(RUNS_DIR).join(&run);
            let summary = RunSummary {
                run: run.clone(),
                seed: job.seed,
                encoder_sha256: source.encoder_digest.clone(),
                steps_applied: record.steps_applied,
                steps_rejected: record.steps_rejected,
                rejected_batch_fraction: record.rejected_batch_fraction(),
                rows: rows.clone(),
            };
            write_run_dir(&dir, &snapshot(job, root, checkpoint_dir), &manifest, &record, &summary)?;
            let storm = (summary.rejected_batch_fraction > STORM_FRACTION).then(|| {
                let diag = format!(
                    "run {run}: {:.0}% of batches had a rejected step ({} rejected, {} applied)",
                    100.0 * summary.rejected_batch_fraction,
                    record.steps_rejected,
                    record.steps_applied
                );
                let _ = std::fs::write(dir.join("diagnostics.txt"), format!("{diag}\n"));
                diag
            });
            Ok((rows, wall, storm))
        })();
        log::info!("finished {run}");
        let mut f = flusher.lock().expect("flusher lock");
        f.pending.insert(i, (run, outcome));
        if let Err(e) = f.flush(root) {
            io_error.lock().expect("error lock").get_or_insert(e);
        }
    });

    let f = flusher.into_inner().expect("flusher lock");
    if let Some(e) = io_error.into_inner().expect("error lock").or(f.first_error) {
        return Err(CliError::Other(e));
    }
    if !f.report.storms.is_empty() {
        return Err(CliError::Storm(f.report.storms.join("\n")));
    }
    Ok(f.report)
}

#[derive(Debug)]
pub struct Verification {
    pub index: usize,
    pub stored: ResultRow,
    pub recomputed: ResultRow,
}

/// Re-runs one results row from its run directory and the checkpoint and
/// demands exact equality. Without `index` the row is picked by a
/// deterministic draw over the table.
pub fn verify(root: &Path, index: Option<usize>, checkpoint_dir: Option<&Path>) -> Result<Verification, CliError> {
    let results = root.join(RESULTS_FILE);
    if !results.is_file() {
        return Err(CliError::MissingArtifact(results.display().to_string()));
    }
    let rows = read_rows(&results)?;
    if rows.is_empty() {
        return Err(CliError::Other(anyhow::anyhow!("{} has no rows", results.display())));
    }
    let index = index.unwrap_or_else(|| (rng::sub_seed(rows.len() as u64, "verify") % rows.len() as u64) as usize);
    let stored = rows
        .get(index)
        .cloned()
        .ok_or_else(|| anyhow::anyhow!("row {index} out of range (table has {})", rows.len()))?;

    let dir = root.join(RUNS_DIR).join(&stored.run);
    let read = |name: &str| -> Result<String, CliError> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|_| CliError::MissingArtifact(p.display().to_string()))
    };
    let mut config: ExperimentConfig = serde_json::from_str(&read("config.json")?).context("parsing config snapshot")?;
    config.ood_score = OodScore::parse(&stored.ood_score).map_err(anyhow::Error::from)?;
    let manifest = StreamManifest::from_json(&read("manifest.json")?).map_err(anyhow::Error::from)?;
    let run_summary: RunSummary = serde_json::from_str(&read("summary.json")?).context("parsing run summary")?;

    let ck: PathBuf = checkpoint_dir.map(Path::to_path_buf).unwrap_or_else(|| config.checkpoint_root());
    let source = artifacts::load(&ck, &config.task)?;
    let mismatch = |what: String| Err(CliError::Other(anyhow::anyhow!(what)));
    if source.encoder_digest != run_summary.encoder_sha256 {
        return mismatch(format!("encoder checkpoint in {} differs from the one used by run {}", ck.display(), stored.run));
    }
    if manifest.config != config.stream.with_seed(stored.seed) || manifest.task != source.task.spec {
        return mismatch(format!("manifest of run {} disagrees with its config snapshot", stored.run));
    }
    let stream = regenerate(&manifest).map_err(anyhow::Error::from)?;
    let job = Job::single(&config, stored.seed);
    let record = simulate(&source, &config, stored.seed, &stream.batches)?;
    let recomputed = rows_for(&job, &record)?.remove(0);
    if recomputed != stored {
        return mismatch(format!("row {index} not reproduced:\n  stored     {stored:?}\n  recomputed {recomputed:?}"));
    }
    Ok(Verification {
        index,
        stored,
        recomputed,
    })
}
