//! Sweeps over one axis and mean ± std summaries of results rows.

use std::fmt;

use anyhow::bail;
use rand::seq::SliceRandom;
use serde::Serialize;

use doco_core::metrics::OodScore;
use doco_core::rng;

use crate::config::ExperimentConfig;
use crate::exec::{Job, ResultRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Kappa,
    Severity,
    Order,
    Score,
}

impl Axis {
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        Ok(match s {
            "kappa" => Axis::Kappa,
            "severity" => Axis::Severity,
            "order" => Axis::Order,
            "score" => Axis::Score,
            _ => bail!("unknown sweep axis '{s}' (kappa, severity, order, score)"),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Kappa => "kappa",
            Axis::Severity => "severity",
            Axis::Order => "order",
            Axis::Score => "score",
        }
    }

    /// The axis value a row belongs to.
    pub fn value_of(self, row: &ResultRow) -> String {
        match self {
            Axis::Kappa => row.kappa.to_string(),
            Axis::Severity => row.severity.to_string(),
            Axis::Order => row.domain_order.clone(),
            Axis::Score => row.ood_score.clone(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_KAPPAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_SEVERITIES: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 3.0];
pub const N_ORDERS: usize = 6;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// `N_ORDERS` distinct domain orders drawn from a fixed sub-stream (all of
/// them when there are fewer).
pub fn random_orders(n_domains: usize) -> Vec<Vec<usize>> {
    let mut all = permutations(n_domains);
    all.sort();
    all.shuffle(&mut rng::stream(0, "sweep/domain-orders"));
    all.truncate(N_ORDERS);
    all
}

/// The grid of jobs: axis values × seeds. A score sweep reuses one
/// adaptation run per seed for all scores.
pub fn grid(template: &ExperimentConfig, axis: Axis, values: Option<&str>) -> anyhow::Result<Vec<Job>> {
    template.validate()?;
    let floats = |default: &[f64]| -> anyhow::Result<Vec<f64>> {
        match values {
            Some(v) => v.split(',').map(|x| Ok(x.trim().parse::<f64>()?)).collect(),
            None => Ok(default.to_vec()),
        }
    };
    let configs: Vec<ExperimentConfig> = match axis {
        Axis::Kappa => floats(&DEFAULT_KAPPAS)?
            .into_iter()
            .map(|k| {
                let mut c = template.clone();
                c.stream.kappa = k;
                c
            })
            .collect(),
        Axis::Severity => floats(&DEFAULT_SEVERITIES)?
            .into_iter()
            .map(|s| {
                let mut c = template.clone();
                c.stream.severity = s;
                c
            })
            .collect(),
        Axis::Order => {
            let orders = match values {
                Some(v) => v.split(';').map(crate::config::parse_order).collect::<anyhow::Result<Vec<_>>>()?,
                None => random_orders(template.stream.shift_kinds.len()),
            };
            orders
                .into_iter()
                .map(|o| {
                    let mut c = template.clone();
                    c.stream.domain_order = o;
                    c
                })
                .collect()
        }
        Axis::Score => {
            let scores = match values {
                Some(v) => v.split(',').map(|s| OodScore::parse(s.trim())).collect::<Result<Vec<_>, _>>()?,
                None => OodScore::ALL.to_vec(),
            };
            return Ok(template
                .seeds
                .iter()
                .map(|&seed| Job {
                    config: ExperimentConfig {
                        ood_score: scores[0],
                        ..template.clone()
                    },
                    seed,
                    scores: scores.clone(),
                })
                .collect());
        }
    };
    for c in &configs {
        c.validate()?;
    }
    Ok(configs
        .iter()
        .flat_map(|c| template.seeds.iter().map(move |&seed| Job::single(c, seed)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub key: String,
    pub method: String,
    pub mask: String,
    pub n: usize,
    pub acc: MeanStd,
    pub auc: Option<MeanStd>,
    pub h_score: Option<MeanStd>,
}

/// Groups rows by `key` (first-appearance order) and summarizes each group
/// over seeds. AUC and H are summarized over rows that have them.
pub fn summarize(rows: &[ResultRow], key: impl Fn(&ResultRow) -> String) -> Vec<GroupSummary> {
    let mut groups: Vec<(String, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(key, rs)| {
            let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            GroupSummary {
                method: rs[0].method.clone(),
                mask: rs[0].mask.clone(),
                n: rs.len(),
                acc: MeanStd::of(&col(&|r| Some(r.acc))).expect("group is non-empty"),
                auc: MeanStd::of(&col(&|r| r.auc)),
                h_score: MeanStd::of(&col(&|r| r.h_score)),
                key,
            }
        })
        .collect()
}

pub fn render_table(label: &str, groups: &[GroupSummary]) -> String {
    let opt = |m: Option<MeanStd>| m.map_or_else(|| "-".to_string(), |m| m.to_string());
    let mut out = format!("{label:<24} {:<18} {:>3} {:>16} {:>16} {:>16}\n", "method", "n", "acc", "auc", "h");
    for g in groups {
        out.push_str(&format!(
            "{:<24} {:<18} {:>3} {:>16} {:>16} {:>16}\n",
            g.key,
            format!("{}/{}", g.method, g.mask),
            g.n,
            g.acc.to_string(),
            opt(g.auc),
            opt(g.h_score)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_distinct_orders() {
        let orders = random_orders(4);
        assert_eq!(orders.len(), 6);
        for (i, a) in orders.iter().enumerate() {
            let mut s = a.clone();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3]);
            assert!(orders[i + 1..].iter().all(|b| b != a));
        }
        assert_eq!(orders, random_orders(4));
        assert_eq!(random_orders(2).len(), 2);
    }

    #[test]
    fn grid_shapes() {
        let t = ExperimentConfig {
            seeds: vec![0, 1],
            ..ExperimentConfig::default()
        };
        assert_eq!(grid(&t, Axis::Kappa, None).unwrap().len(), 10);
        let scores = grid(&t, Axis::Score, None).unwrap();
        assert_eq!(scores.len(), 2);
        assert_eq!(scores[0].scores.len(), 4);
        assert_eq!(grid(&t, Axis::Order, None).unwrap().len(), 12);
        assert_eq!(grid(&t, Axis::Kappa, Some("0.1,0.3")).unwrap().len(), 4);
        assert!(grid(&t, Axis::Kappa, Some("1.5")).is_err());
        assert!(Axis::parse("depth").is_err());
    }

    #[test]
    fn mean_std_by_hand() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[7.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }
}
