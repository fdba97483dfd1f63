//! OOD scores, AUC, and H-score aggregation.
//!
//! Every score follows the same convention: higher means more ID-like.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodScore {
    Energy,
    Msp,
    MaxLogit,
    Entropy,
}

impl OodScore {
    pub const ALL: [OodScore; 4] = [OodScore::Energy, OodScore::Msp, OodScore::MaxLogit, OodScore::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            OodScore::Energy => "energy",
            OodScore::Msp => "msp",
            OodScore::MaxLogit => "maxlogit",
            OodScore::Entropy => "entropy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        OodScore::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown OOD score '{s}'")))
    }

    pub fn score(self, logits: &[f64]) -> Result<f64> {
        match self {
            OodScore::Energy => energy_score(logits),
            OodScore::Msp => msp_score(logits),
            OodScore::MaxLogit => maxlogit_score(logits),
            OodScore::Entropy => entropy_score(logits),
        }
    }
}

fn nonempty(logits: &[f64], op: &'static str) -> Result<()> {
    if logits.is_empty() {
        Err(Error::Empty(op))
    } else {
        Ok(())
    }
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = max_of(logits);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `logsumexp(logits)` at temperature 1.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    nonempty(logits, "energy_score")?;
    let m = max_of(logits);
    Ok(m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

pub fn msp_score(logits: &[f64]) -> Result<f64> {
    nonempty(logits, "msp_score")?;
    Ok(max_of(&softmax(logits)))
}

pub fn maxlogit_score(logits: &[f64]) -> Result<f64> {
    nonempty(logits, "maxlogit_score")?;
    Ok(max_of(logits))
}

/// Negative Shannon entropy of the softmax.
pub fn entropy_score(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidConfig("entropy score needs at least two classes".into()));
    }
    Ok(softmax(logits)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum())
}

/// Probability that a random ID score beats a random OOD score, ties ½.
/// `None` when either side is empty.
pub fn auc(id_scores: &[f64], ood_scores: &[f64]) -> Option<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mid-ranks (1-based) over tie groups.
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_id += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let n = id_scores.len() as f64;
    let m = ood_scores.len() as f64;
    Some((rank_sum_id - n * (n + 1.0) / 2.0) / (n * m))
}

/// Harmonic mean of ACC and AUC, 0 when either is 0.
pub fn h_score(acc: f64, auc: f64) -> f64 {
    if acc <= 0.0 || auc <= 0.0 {
        0.0
    } else {
        2.0 * acc * auc / (acc + auc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub auc: f64,
    pub h_score: f64,
}

impl MetricSummary {
    pub fn new(acc: f64, auc: f64) -> Self {
        MetricSummary {
            acc,
            auc,
            h_score: h_score(acc, auc),
        }
    }
}

/// Cell-wise mean of ACC, AUC and H (H is averaged, not recomputed).
pub fn aggregate(cells: &[MetricSummary]) -> Result<MetricSummary> {
    if cells.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let n = cells.len() as f64;
    Ok(MetricSummary {
        acc: cells.iter().map(|c| c.acc).sum::<f64>() / n,
        auc: cells.iter().map(|c| c.auc).sum::<f64>() / n,
        h_score: cells.iter().map(|c| c.h_score).sum::<f64>() / n,
    })
}

/// Hidden evaluation label for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrueLabel {
    Id(usize),
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub ood_score: f64,
    pub predicted_class: usize,
    pub true_label: TrueLabel,
}

/// ACC over ID samples, AUC of ID vs OOD scores. Cells missing either side
/// have no defined AUC and yield `None`.
pub fn summarize(samples: &[ScoredSample]) -> Option<MetricSummary> {
    let mut id = Vec::new();
    let mut ood = Vec::new();
    let mut correct = 0usize;
    for s in samples {
        match s.true_label {
            TrueLabel::Id(c) => {
                id.push(s.ood_score);
                correct += usize::from(c == s.predicted_class);
            }
            TrueLabel::Ood => ood.push(s.ood_score),
        }
    }
    let a = auc(&id, &ood)?;
    Some(MetricSummary::new(correct as f64 / id.len() as f64, a))
}
