//! Central finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Segment, Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Builds `loss = Σ w ⊙ f(inputs)` with a fixed random weighting `w`, so the
/// check exercises every output coordinate.
fn check<F>(inputs: Vec<Tensor>, seed: u64, build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let weights_for = |tape: &mut Tape, out: Var| {
        let shape = tape.value(out).shape.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        random(&mut rng, &shape)
    };
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = weights_for(&mut tape, out);
        tape.value(out).data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = weights_for(&mut tape, out);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let err = (analytic[i] - numeric).abs();
            let scale = analytic[i].abs().max(numeric.abs());
            assert!(
                err <= REL_TOL * scale || err <= ABS_FLOOR,
                "input {k} coord {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
        }
    }
}

#[test]
fn binary_ops_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, op) in [super::BinaryOp::Add, super::BinaryOp::Sub, super::BinaryOp::Mul].into_iter().enumerate() {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        check(vec![a, b], i as u64, |t, v| t.binary(op, v[0], v[1]).unwrap());
    }
    let a = random(&mut rng, &[2, 3]);
    let b = Tensor::new(vec![3], vec![1.3, -0.9, 2.1]).unwrap();
    check(vec![a, b], 9, |t, v| t.div(v[0], v[1]).unwrap());
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[7]);
    check(vec![x.clone()], 1, |t, v| t.gelu(v[0]));
    check(vec![x.clone()], 2, |t, v| t.exp(v[0]));
    let pos = Tensor::new(vec![4], vec![0.3, 1.2, 2.5, 0.9]).unwrap();
    check(vec![pos.clone()], 3, |t, v| t.log(v[0]));
    check(vec![pos], 4, |t, v| t.sqrt(v[0]));
    check(vec![x], 5, |t, v| {
        let s = t.scale(v[0], -1.7);
        t.add_scalar(s, 0.4)
    });
}

#[test]
fn products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    check(vec![a, b], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
    let x = random(&mut rng, &[2, 3, 4]);
    let w = random(&mut rng, &[5, 4]);
    let bias = random(&mut rng, &[5]);
    check(vec![x, w, bias], 2, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn reductions_and_normalizers() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[3, 5]);
    check(vec![x.clone()], 1, |t, v| t.mean_rows(v[0]).unwrap());
    check(vec![x.clone()], 2, |t, v| t.softmax(v[0]).unwrap());
    check(vec![x.clone()], 3, |t, v| t.logsumexp(v[0]).unwrap());
    check(vec![x.clone()], 4, |t, v| t.normalize_rows(v[0]).unwrap());
    check(vec![x.clone()], 5, |t, v| t.l2_norm(v[0]).unwrap());
    let g = random(&mut rng, &[5]);
    let b = random(&mut rng, &[5]);
    check(vec![x, g, b], 6, |t, v| t.layernorm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn sequence_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shared = random(&mut rng, &[2, 4]);
    let per = random(&mut rng, &[3, 3, 4]);
    check(vec![shared, per], 1, |t, v| {
        let seq = t
            .concat_tokens(&[Segment::Shared(v[0]), Segment::PerSequence(v[1])], 3)
            .unwrap();
        t.select_token(seq, 1).unwrap()
    });
    let q = random(&mut rng, &[2, 3, 4]);
    let k = random(&mut rng, &[2, 3, 4]);
    let vv = random(&mut rng, &[2, 3, 4]);
    check(vec![q, k, vv], 2, |t, v| t.attention(v[0], v[1], v[2], 2).unwrap());
}

#[test]
fn cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&mut rng, &[4, 3]);
    check(vec![logits], 1, |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 4]);
    let run = || {
        let mut tape = Tape::new();
        let p = tape.param(x.clone());
        let a = tape.attention(p, p, p, 2).unwrap();
        let g = tape.gelu(a);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        tape.grad(p).unwrap().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
