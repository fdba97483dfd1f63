//! ID/OOD splitting by prototypical distance.
//!
//! Each feature is scored by `d_proto(z) = 1 − max_c cos(z, w_c)` against the
//! frozen classifier rows. The scores are split by exact 1-D 2-means: in one
//! dimension an optimal 2-clustering is always a threshold cut of the sorted
//! scores, so scanning every cut finds the global optimum with no
//! initialization dependence. The cluster with the smaller centroid is ID.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::objective::cosine;

/// Batch size at or below which the score buffer (when enabled) is used.
pub const SMALL_BATCH_MAX: usize = 8;
pub const DEFAULT_BUFFER_CAPACITY: usize = 64;

/// `1 − max_c cos(z, w_c)`, in `[0, 2]`.
pub fn proto_distance(feature: &[f64], prototypes: &Tensor) -> Result<f64> {
    let c = prototypes.rows();
    if c == 0 || prototypes.last_dim() != feature.len() {
        return Err(Error::shape(
            "proto_distance",
            format!("feature width {} vs prototypes {:?}", feature.len(), prototypes.shape),
        ));
    }
    let best = (0..c)
        .map(|i| cosine(feature, prototypes.row(i)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(1.0 - best)
}

/// Sum of squared deviations from the mean, accumulated in ascending value
/// order. Any two callers holding the same multiset get identical bits.
pub fn cluster_cost(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum()
}

fn mean_sorted(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Outcome of [`two_means_1d`].
#[derive(Clone, Debug, PartialEq)]
pub struct TwoMeans {
    /// `true` for members of the low (smaller-centroid) cluster.
    pub low: Vec<bool>,
    pub centroid_low: f64,
    pub centroid_high: f64,
    /// Within-cluster sum of squared deviations.
    pub objective: f64,
    /// Largest score assigned to the low cluster.
    pub threshold: f64,
}

/// Globally optimal 2-means over scalar scores.
///
/// Degenerate inputs: a single score, or all scores identical, put every
/// element in the low cluster and report equal centroids. Among optimal
/// cuts with exactly equal cost the one with the smaller low cluster wins.
pub fn two_means_1d(scores: &[f64]) -> Result<TwoMeans> {
    if scores.is_empty() {
        return Err(Error::Empty("two_means_1d"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("two_means_1d scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();

    let mut best: Option<(usize, f64)> = None;
    for k in 1..sorted.len() {
        // Cuts between equal values are never optimal.
        if sorted[k - 1] == sorted[k] {
            continue;
        }
        let cost = cluster_cost(&sorted[..k]) + cluster_cost(&sorted[k..]);
        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((k, cost));
        }
    }

    let Some((k, objective)) = best else {
        let c = mean_sorted(&sorted);
        return Ok(TwoMeans {
            low: vec![true; scores.len()],
            centroid_low: c,
            centroid_high: c,
            objective: cluster_cost(&sorted),
            threshold: sorted[sorted.len() - 1],
        });
    };
    let mut low = vec![false; scores.len()];
    for &i in &order[..k] {
        low[i] = true;
    }
    Ok(TwoMeans {
        low,
        centroid_low: mean_sorted(&sorted[..k]),
        centroid_high: mean_sorted(&sorted[k..]),
        objective,
        threshold: sorted[k - 1],
    })
}

/// FIFO of recent prototypical distances for tiny batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBuffer {
    pub capacity: usize,
    pub values: VecDeque<f64>,
}

impl Default for ScoreBuffer {
    fn default() -> Self {
        ScoreBuffer::new(DEFAULT_BUFFER_CAPACITY)
    }
}

impl ScoreBuffer {
    pub fn new(capacity: usize) -> Self {
        ScoreBuffer {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.capacity == 0 {
            return;
        }
        while self.values.len() >= self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn extend(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.push(v));
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub id_indices: Vec<usize>,
    pub ood_indices: Vec<usize>,
    pub centroid_id: f64,
    pub centroid_ood: f64,
    pub scores: Vec<f64>,
}

impl SplitResult {
    /// Everything ID; used when splitting is disabled.
    pub fn all_id(scores: Vec<f64>) -> Self {
        let c = if scores.is_empty() {
            0.0
        } else {
            mean_sorted(&scores)
        };
        SplitResult {
            id_indices: (0..scores.len()).collect(),
            ood_indices: Vec::new(),
            centroid_id: c,
            centroid_ood: c,
            scores,
        }
    }

    pub fn is_id(&self, i: usize) -> bool {
        self.id_indices.binary_search(&i).is_ok()
    }
}

pub fn proto_scores(features: &Tensor, prototypes: &Tensor) -> Result<Vec<f64>> {
    if features.shape.len() != 2 {
        return Err(Error::shape("split_batch", format!("features {:?}", features.shape)));
    }
    (0..features.rows())
        .map(|i| proto_distance(features.row(i), prototypes))
        .collect()
}

/// Splits a batch into likely-ID / likely-OOD. With a buffer and a batch of
/// at most [`SMALL_BATCH_MAX`] samples, clustering runs over the buffer and
/// each current sample joins the nearer centroid (ties to ID).
pub fn split_batch(features: &Tensor, prototypes: &Tensor, buffer: Option<&mut ScoreBuffer>) -> Result<SplitResult> {
    let scores = proto_scores(features, prototypes)?;
    if scores.is_empty() {
        return Err(Error::Empty("split_batch"));
    }
    split_scores(scores, buffer)
}

pub fn split_scores(scores: Vec<f64>, buffer: Option<&mut ScoreBuffer>) -> Result<SplitResult> {
    let n = scores.len();
    let mut id = Vec::new();
    let mut ood = Vec::new();
    let (centroid_id, centroid_ood) = match buffer {
        Some(buf) if n <= SMALL_BATCH_MAX => {
            buf.extend(&scores);
            let pool: Vec<f64> = buf.values.iter().copied().collect();
            let tm = two_means_1d(&pool)?;
            for (i, &s) in scores.iter().enumerate() {
                if (s - tm.centroid_low).abs() <= (s - tm.centroid_high).abs() {
                    id.push(i);
                } else {
                    ood.push(i);
                }
            }
            (tm.centroid_low, tm.centroid_high)
        }
        _ => {
            let tm = two_means_1d(&scores)?;
            for (i, &low) in tm.low.iter().enumerate() {
                if low {
                    id.push(i);
                } else {
                    ood.push(i);
                }
            }
            (tm.centroid_low, tm.centroid_high)
        }
    };
    Ok(SplitResult {
        id_indices: id,
        ood_indices: ood,
        centroid_id,
        centroid_ood,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Exhaustive optimum over all 2^n labelings (both clusters nonempty).
    fn brute_force(scores: &[f64]) -> f64 {
        let n = scores.len();
        let mut best = cluster_cost(scores);
        for mask in 1u32..(1 << n) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (i, &s) in scores.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        a.push(s);
                    } else {
                        b.push(s);
                    }
                }
                (a, b)
            };
            best = best.min(cluster_cost(&a) + cluster_cost(&b));
        }
        best
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn proto_distance_cases() {
        let protos = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(proto_distance(&[0.0, 2.0, 0.0], &protos).unwrap(), 0.0, epsilon = 1e-15);
        assert_eq!(proto_distance(&[0.0, 0.0, 3.0], &protos).unwrap(), 1.0);
        let single = row(&[0.5, -1.0]);
        assert_abs_diff_eq!(proto_distance(&[-0.5, 1.0], &single).unwrap(), 2.0, epsilon = 1e-15);
        assert_eq!(proto_distance(&[0.0, 0.0, 0.0], &protos).unwrap(), 1.0);
        assert!(proto_distance(&[1.0], &protos).is_err());
    }

    #[test]
    fn two_means_hand_case() {
        let tm = two_means_1d(&[0.1, 0.12, 0.9, 0.95]).unwrap();
        assert_eq!(tm.low, vec![true, true, false, false]);
        assert_abs_diff_eq!(tm.centroid_low, 0.11, epsilon = 1e-15);
        assert_abs_diff_eq!(tm.centroid_high, 0.925, epsilon = 1e-15);
        assert_eq!(tm.objective, brute_force(&[0.1, 0.12, 0.9, 0.95]));
    }

    #[test]
    fn two_means_degenerate_rules() {
        let tm = two_means_1d(&[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(tm.low, vec![true; 3]);
        assert_eq!(tm.centroid_low, tm.centroid_high);
        let tm = two_means_1d(&[0.7]).unwrap();
        assert_eq!(tm.low, vec![true]);
        assert!(two_means_1d(&[]).is_err());
        assert!(two_means_1d(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn bimodal_scores_recover_groups() {
        // Gap 0.5 vs within-group spread 0.02.
        let scores = [0.10, 0.71, 0.12, 0.69, 0.11, 0.70, 0.09, 0.72];
        let s = split_scores(scores.to_vec(), None).unwrap();
        assert_eq!(s.id_indices, vec![0, 2, 4, 6]);
        assert_eq!(s.ood_indices, vec![1, 3, 5, 7]);
    }

    #[test]
    fn single_sample_is_id() {
        let s = split_scores(vec![1.3], None).unwrap();
        assert_eq!(s.id_indices, vec![0]);
        let mut buf = ScoreBuffer::default();
        let s = split_scores(vec![1.3], Some(&mut buf)).unwrap();
        assert_eq!(s.id_indices, vec![0]);
        assert!(s.ood_indices.is_empty());
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut buf = ScoreBuffer::new(64);
        buf.extend(&(0..64).map(f64::from).collect::<Vec<_>>());
        buf.extend(&[100.0, 101.0, 102.0, 103.0]);
        assert_eq!(buf.len(), 64);
        assert_eq!(buf.values.front(), Some(&4.0));
        assert_eq!(buf.values.back(), Some(&103.0));
    }

    #[test]
    fn buffered_split_uses_history() {
        let mut buf = ScoreBuffer::new(64);
        buf.extend(&[0.1, 0.12, 0.11, 0.9, 0.92, 0.91]);
        // All current scores are low; without history they would be split.
        let s = split_scores(vec![0.1, 0.13], Some(&mut buf)).unwrap();
        assert_eq!(s.id_indices, vec![0, 1]);
        // Large batches ignore the buffer.
        let scores: Vec<f64> = (0..9).map(|i| if i < 5 { 0.1 } else { 0.9 }).collect();
        let before = buf.len();
        let s = split_scores(scores, Some(&mut buf)).unwrap();
        assert_eq!(s.id_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(buf.len(), before);
    }

    #[test]
    fn brute_force_agreement_small_lists() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(2..=10);
            let ties = rng.random_bool(0.3);
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if ties {
                        f64::from(rng.random_range(0..4u8)) * 0.25
                    } else {
                        rng.random_range(0.0..2.0)
                    }
                })
                .collect();
            let tm = two_means_1d(&scores).unwrap();
            assert_eq!(tm.objective, brute_force(&scores), "{scores:?}");
        }
    }

    proptest! {
        #[test]
        fn split_is_a_threshold_cut(scores in prop::collection::vec(0.0f64..2.0, 2..64)) {
            let tm = two_means_1d(&scores).unwrap();
            let max_low = scores.iter().zip(&tm.low).filter(|(_, &l)| l).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            let min_high = scores.iter().zip(&tm.low).filter(|(_, &l)| !l).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            prop_assert!(max_low <= min_high);
            prop_assert!(tm.centroid_low <= tm.centroid_high);
        }

        #[test]
        fn split_is_order_invariant(scores in prop::collection::vec(0.0f64..2.0, 2..32), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let a = split_scores(scores.clone(), None).unwrap();
            let b = split_scores(shuffled, None).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(a.is_id(old), b.is_id(new));
            }
            prop_assert_eq!(a.centroid_id, b.centroid_id);
        }

        #[test]
        fn raising_an_ood_score_keeps_it_ood(scores in prop::collection::vec(0.0f64..2.0, 2..32), pick in 0usize..32, bump in 0.0f64..1.0) {
            let a = split_scores(scores.clone(), None).unwrap();
            prop_assume!(!a.ood_indices.is_empty());
            let i = a.ood_indices[pick % a.ood_indices.len()];
            let mut raised = scores.clone();
            raised[i] += bump;
            let b = split_scores(raised, None).unwrap();
            prop_assert!(!b.is_id(i));
        }
    }
}
