//! The adaptation objective: moment alignment to cached source statistics
//! plus preservation of the batch's pairwise cosine geometry.
//!
//! `total = stat + beta * reg`, where
//! `stat = ‖μ̂ − μ_S‖₂ + ‖σ̂ − σ_S‖₂` (population moments, per dimension) and
//! `reg = ‖sim(prompted) − sim(raw)‖_F`.
//!
//! Every quantity is computed through the tape, differentiable or not, so the
//! plain helpers and the training loss share one arithmetic path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default structural-preservation weight.
pub const DEFAULT_BETA: f64 = 0.5;

/// Cached feature moments of the source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mu_s: Vec<f64>,
    pub sigma_s: Vec<f64>,
    pub n_source: usize,
}

impl SourceStats {
    pub fn dim(&self) -> usize {
        self.mu_s.len()
    }

    /// Population moments of `features` (`[n, d]`).
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (mu_s, sigma_s) = batch_stats(features)?;
        Ok(SourceStats {
            mu_s,
            sigma_s,
            n_source: features.shape[0],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stat: f64,
    pub reg: f64,
    pub total: f64,
    pub beta: f64,
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(op, format!("expected [n, d], got {:?}", t.shape)));
    }
    if t.shape[0] == 0 {
        return Err(Error::Empty(op));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Records population mean and standard deviation over rows.
pub fn batch_stats_on_tape(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let mean = tape.mean_rows(z)?;
    let centered = tape.sub(z, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    let std = tape.sqrt(var);
    Ok((mean, std))
}

/// Per-dimension population mean and standard deviation (divide by `n`).
pub fn batch_stats(features: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_matrix("batch_stats", features)?;
    let mut tape = Tape::new();
    let z = tape.constant(features.clone());
    let (m, s) = batch_stats_on_tape(&mut tape, z)?;
    Ok((tape.value(m).data.clone(), tape.value(s).data.clone()))
}

pub fn stat_loss_on_tape(tape: &mut Tape, z: Var, src: &SourceStats) -> Result<Var> {
    let d = tape.value(z).last_dim();
    if d != src.dim() || src.sigma_s.len() != d {
        return Err(Error::shape(
            "stat_loss",
            format!("feature width {d} vs source stats {}", src.dim()),
        ));
    }
    let (mean, std) = batch_stats_on_tape(tape, z)?;
    let mu_s = tape.constant(Tensor::new(vec![d], src.mu_s.clone())?);
    let sigma_s = tape.constant(Tensor::new(vec![d], src.sigma_s.clone())?);
    let dm = tape.sub(mean, mu_s)?;
    let ds = tape.sub(std, sigma_s)?;
    let a = tape.l2_norm(dm)?;
    let b = tape.l2_norm(ds)?;
    tape.add(a, b)
}

pub fn stat_loss(features: &Tensor, src: &SourceStats) -> Result<f64> {
    check_matrix("stat_loss", features)?;
    let mut tape = Tape::new();
    let z = tape.constant(features.clone());
    let l = stat_loss_on_tape(&mut tape, z, src)?;
    Ok(tape.value(l).item())
}

/// Cosine similarity; a zero-norm operand gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Pairwise cosine matrix with a unit diagonal (self-similarity is 1 by
/// definition, including for degenerate zero rows).
pub fn pairwise_sim_on_tape(tape: &mut Tape, z: Var) -> Result<Var> {
    let n = tape.value(z).shape[0];
    let unit = tape.normalize_rows(z)?;
    let gram = tape.linear(unit, unit, None)?;
    let mut off = Tensor::filled(&[n, n], 1.0);
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        off.data[i * n + i] = 0.0;
        eye.data[i * n + i] = 1.0;
    }
    let off = tape.constant(off);
    let eye = tape.constant(eye);
    let masked = tape.mul(gram, off)?;
    tape.add(masked, eye)
}

pub fn pairwise_sim(features: &Tensor) -> Result<Tensor> {
    check_matrix("pairwise_sim", features)?;
    let mut tape = Tape::new();
    let z = tape.constant(features.clone());
    let s = pairwise_sim_on_tape(&mut tape, z)?;
    Ok(tape.value(s).clone())
}

/// `‖sim(prompted) − sim(raw)‖_F`; `raw` is a detached constant.
pub fn structural_loss_on_tape(tape: &mut Tape, prompted: Var, raw: &Tensor) -> Result<Var> {
    if tape.value(prompted).shape != raw.shape {
        return Err(Error::shape(
            "structural_loss",
            format!("{:?} vs {:?}", tape.value(prompted).shape, raw.shape),
        ));
    }
    let r = tape.constant(raw.clone());
    let sim_r = pairwise_sim_on_tape(tape, r)?;
    let sim_r = tape.constant(tape.value(sim_r).clone());
    let sim_p = pairwise_sim_on_tape(tape, prompted)?;
    let diff = tape.sub(sim_p, sim_r)?;
    tape.l2_norm(diff)
}

pub fn structural_loss(prompted: &Tensor, raw: &Tensor) -> Result<f64> {
    check_matrix("structural_loss", prompted)?;
    let mut tape = Tape::new();
    let p = tape.constant(prompted.clone());
    let l = structural_loss_on_tape(&mut tape, p, raw)?;
    Ok(tape.value(l).item())
}

/// Records the full objective and returns the scalar loss node with its
/// breakdown. A single-row batch contributes no structural term.
pub fn doco_loss_on_tape(
    tape: &mut Tape,
    prompted: Var,
    raw: &Tensor,
    src: &SourceStats,
    beta: f64,
) -> Result<(Var, LossBreakdown)> {
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidConfig(format!("beta must be >= 0, got {beta}")));
    }
    let n = tape.value(prompted).shape.first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Empty("doco_loss"));
    }
    let stat = stat_loss_on_tape(tape, prompted, src)?;
    let stat_v = tape.value(stat).item();
    if n < 2 {
        let breakdown = LossBreakdown {
            stat: stat_v,
            reg: 0.0,
            total: stat_v,
            beta,
        };
        return Ok((stat, breakdown));
    }
    let reg = structural_loss_on_tape(tape, prompted, raw)?;
    let reg_v = tape.value(reg).item();
    let weighted = tape.scale(reg, beta);
    let total = tape.add(stat, weighted)?;
    let breakdown = LossBreakdown {
        stat: stat_v,
        reg: reg_v,
        total: tape.value(total).item(),
        beta,
    };
    Ok((total, breakdown))
}

pub fn doco_loss(prompted: &Tensor, raw: &Tensor, src: &SourceStats, beta: f64) -> Result<LossBreakdown> {
    check_matrix("doco_loss", prompted)?;
    let mut tape = Tape::new();
    let p = tape.constant(prompted.clone());
    Ok(doco_loss_on_tape(&mut tape, p, raw, src, beta)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn src1(mu: f64, sigma: f64) -> SourceStats {
        SourceStats {
            mu_s: vec![mu],
            sigma_s: vec![sigma],
            n_source: 2,
        }
    }

    #[test]
    fn batch_stats_cases() {
        let (mean, std) = batch_stats(&m(&[&[1.5, -2.0, 4.0]])).unwrap();
        assert_eq!(mean, vec![1.5, -2.0, 4.0]);
        assert_eq!(std, vec![0.0, 0.0, 0.0]);

        let (mean, std) = batch_stats(&m(&[&[-1.0], &[1.0]])).unwrap();
        assert_eq!(mean, vec![0.0]);
        assert_eq!(std, vec![1.0]);

        let (_, std) = batch_stats(&m(&[&[0.3, 2.0], &[0.3, 2.0], &[0.3, 2.0]])).unwrap();
        assert_eq!(std, vec![0.0, 0.0]);

        assert!(matches!(batch_stats(&Tensor::zeros(&[0, 3])), Err(Error::Empty(_))));
    }

    #[test]
    fn stat_loss_cases() {
        let x = m(&[&[0.2, 1.0], &[-0.4, 3.0], &[1.1, 0.5]]);
        let src = SourceStats::from_features(&x).unwrap();
        assert_eq!(stat_loss(&x, &src).unwrap(), 0.0);

        assert_eq!(stat_loss(&m(&[&[-1.0], &[1.0]]), &src1(0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(stat_loss(&m(&[&[0.0], &[0.0]]), &src1(0.0, 1.0)).unwrap(), 1.0);

        assert!(matches!(stat_loss(&x, &src1(0.0, 1.0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 1.0], &[2.0, 2.0]), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[3.0, 1.0]), 0.0);
    }

    #[test]
    fn pairwise_sim_cases() {
        assert_eq!(pairwise_sim(&m(&[&[0.3, -2.0]])).unwrap().data, vec![1.0]);
        let s = pairwise_sim(&m(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        for v in s.data {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
        }
        let s = pairwise_sim(&m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]])).unwrap();
        assert_eq!(s.data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn structural_loss_cases() {
        let x = m(&[&[0.2, 1.0], &[-0.4, 3.0], &[1.1, 0.5]]);
        assert_eq!(structural_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(structural_loss(&m(&[&[1.0, 2.0]]), &m(&[&[-3.0, 0.5]])).unwrap(), 0.0);

        // n = 2: raw off-diagonal a, prompted off-diagonal b -> sqrt(2)|a - b|.
        let raw = m(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let prompted = m(&[&[1.0, 0.0], &[-1.0, 2.0]]);
        let a = cosine(raw.row(0), raw.row(1));
        let b = cosine(prompted.row(0), prompted.row(1));
        let l = structural_loss(&prompted, &raw).unwrap();
        assert_abs_diff_eq!(l, 2f64.sqrt() * (a - b).abs(), epsilon = 1e-14);

        assert!(structural_loss(&x, &m(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn doco_loss_cases() {
        let x = m(&[&[0.2, 1.0], &[-0.4, 3.0], &[1.1, 0.5]]);
        let y = m(&[&[0.1, 1.2], &[0.4, 2.0], &[-1.1, 0.3]]);
        let src = SourceStats::from_features(&y).unwrap();

        let l = doco_loss(&x, &y, &src, 0.0).unwrap();
        assert_eq!(l.total.to_bits(), stat_loss(&x, &src).unwrap().to_bits());

        let l = doco_loss(&y, &y, &src, 0.5).unwrap();
        assert_eq!(l.total, 0.0);

        let l = doco_loss(&x, &x, &src, 0.5).unwrap();
        assert_eq!(l.total, stat_loss(&x, &src).unwrap());

        // d = 1, prompted {0, 0}, raw {-1, 1}, mu_S = 0, sigma_S = 1, beta = 0.5.
        let l = doco_loss(&m(&[&[0.0], &[0.0]]), &m(&[&[-1.0], &[1.0]]), &src1(0.0, 1.0), 0.5).unwrap();
        assert_eq!(l.stat, 1.0);
        assert_abs_diff_eq!(l.reg, 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l.total, 1.0 + 0.5 * 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(l.total, 1.7071, epsilon = 1e-4);

        let single = doco_loss(&m(&[&[0.4, 0.1]]), &m(&[&[-2.0, 0.0]]), &src, 0.5).unwrap();
        assert_eq!(single.reg, 0.0);
        assert_eq!(single.total, single.stat);

        assert!(doco_loss(&x, &x, &src, -1.0).is_err());
    }

    fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
    }

    proptest! {
        #[test]
        fn total_is_stat_plus_weighted_reg(x in matrix(4, 3), y in matrix(4, 3), beta in 0.0f64..2.0) {
            let src = SourceStats::from_features(&y).unwrap();
            let l = doco_loss(&x, &y, &src, beta).unwrap();
            prop_assert_eq!(l.total, l.stat + beta * l.reg);
            prop_assert!(l.stat >= 0.0 && l.reg >= 0.0);
        }

        #[test]
        fn stat_loss_ignores_sample_order(x in matrix(5, 3), y in matrix(3, 3)) {
            let src = SourceStats::from_features(&y).unwrap();
            let a = stat_loss(&x, &src).unwrap();
            let b = stat_loss(&x.select(&[3, 1, 4, 0, 2]), &src).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }

        #[test]
        fn structural_loss_invariant_to_common_rotation(x in matrix(4, 2), y in matrix(4, 2), theta in 0.0f64..6.28) {
            let rot = |t: &Tensor| {
                let (c, s) = (theta.cos(), theta.sin());
                let data = t.data.chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
                Tensor::new(t.shape.clone(), data).unwrap()
            };
            let a = structural_loss(&x, &y).unwrap();
            let b = structural_loss(&rot(&x), &rot(&y)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
