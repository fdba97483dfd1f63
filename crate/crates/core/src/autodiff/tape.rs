//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value. A node tracks
//! gradients iff one of its inputs does, so frozen weights (recorded as
//! constants) never accumulate anything and cost nothing in the backward
//! sweep. `backward` walks the nodes in exact reverse recording order.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Gelu,
    Exp,
    Log,
    /// Square root with a zero subgradient at 0.
    Sqrt,
}

/// The elementwise family, unary and binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Gelu,
    Exp,
    Log,
    Sqrt,
}

/// One contiguous block of tokens in [`Tape::concat_tokens`].
#[derive(Clone, Copy, Debug)]
pub enum Segment {
    /// `[m, d]` tokens repeated for every sequence in the batch.
    Shared(Var),
    /// `[n, m, d]` tokens, one block per sequence.
    PerSequence(Var),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SumAll(Var),
    MeanRows(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatTokens {
        parts: Vec<Segment>,
        n: usize,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYERNORM_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].value.requires_grad
    }

    /// Gradient of the last backward pass, for leaves that track gradients.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad.as_deref()
    }

    fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    fn data(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value.data
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |op| {
            b.map(|b| (op, b))
                .ok_or_else(|| Error::shape("elementwise", "binary op needs two operands"))
        };
        match op {
            Elementwise::Add => {
                let (op, b) = binary(BinaryOp::Add)?;
                self.binary(op, a, b)
            }
            Elementwise::Sub => {
                let (op, b) = binary(BinaryOp::Sub)?;
                self.binary(op, a, b)
            }
            Elementwise::Mul => {
                let (op, b) = binary(BinaryOp::Mul)?;
                self.binary(op, a, b)
            }
            Elementwise::Div => {
                let (op, b) = binary(BinaryOp::Div)?;
                self.binary(op, a, b)
            }
            Elementwise::Gelu => Ok(self.unary(UnaryOp::Gelu, a)),
            Elementwise::Exp => Ok(self.unary(UnaryOp::Exp, a)),
            Elementwise::Log => Ok(self.unary(UnaryOp::Log, a)),
            Elementwise::Sqrt => Ok(self.unary(UnaryOp::Sqrt, a)),
        }
    }

    /// `a op b` where `b`'s shape is a suffix of `a`'s (broadcast over the
    /// leading axes) or `b` is a single value.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let nb = numel(sb);
        let ok = nb == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(Error::shape(
                "elementwise",
                format!("cannot broadcast {sb:?} onto {sa:?}"),
            ));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let data: Vec<f64> = xa
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = xb[i % nb];
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&v| match op {
                UnaryOp::Gelu => gelu(v),
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Sqrt => v.sqrt(),
            })
            .collect();
        let value = Tensor::new(x.shape.clone(), data).expect("shape preserved");
        self.push(value, Op::Unary(op, a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v * k).collect())
            .expect("shape preserved");
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape.clone(), x.data.iter().map(|v| v + k).collect())
            .expect("shape preserved");
        self.push(value, Op::AddScalar(a), &[a])
    }

    // ---------------------------------------------------------------- products

    /// Plain 2-D product `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(xa[i * k + p], &xb[p * n..(p + 1) * n], row);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", format!("{sx:?} against weight {sw:?}")));
        }
        let (d_out, d_in) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::shape("linear", format!("bias {:?}", self.shape(b))));
            }
        }
        let rows = numel(sx) / d_in.max(1);
        let (xd, wd) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xr = &xd[r * d_in..(r + 1) * d_in];
            for o in 0..d_out {
                let mut acc = dot(xr, &wd[o * d_in..(o + 1) * d_in]);
                if let Some(bias) = bias {
                    acc += bias[o];
                }
                out[r * d_out + o] = acc;
            }
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Mean over axis 0.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let n = shape[0];
        let rest = shape[1..].to_vec();
        let stride = numel(&rest);
        let x = self.data(a);
        let mut out = vec![0.0; stride];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&x[r * stride..(r + 1) * stride]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let value = Tensor::new(rest, out)?;
        Ok(self.push(value, Op::MeanRows(a), &[a]))
    }

    /// Euclidean norm of all entries; zero subgradient at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq);
        Ok(self.sqrt(s))
    }

    // ---------------------------------------------------------------- normalizers

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("softmax"));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let d = x.last_dim();
        let mut data = x.data.clone();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape.clone(), data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// log Σ exp over the last axis; drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("logsumexp"));
        }
        let d = x.last_dim();
        let data: Vec<f64> = x.data.chunks(d).map(log_sum_exp).collect();
        let shape = x.shape[..x.shape.len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::LogSumExp(a), &[a]))
    }

    /// Per-row standardization over the last axis (eps 1e-5) then affine.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
        if d < 2 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("x {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Divides each last-axis row by its L2 norm; zero rows map to zero
    /// with zero gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape.is_empty() {
            return Err(Error::shape("normalize_rows", "scalar input"));
        }
        let d = t.last_dim();
        let mut data = t.data.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(d) {
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let value = Tensor::new(t.shape.clone(), data)?;
        Ok(self.push(value, Op::NormalizeRows { x, norms }, &[x]))
    }

    // ---------------------------------------------------------------- sequence ops

    /// Builds `[n, T, d]` sequences from shared and per-sequence token blocks.
    pub fn concat_tokens(&mut self, parts: &[Segment], n: usize) -> Result<Var> {
        let mut d = None;
        let mut total = 0;
        for part in parts {
            let (var, m, dd) = match *part {
                Segment::Shared(v) => {
                    let s = self.shape(v);
                    if s.len() != 2 {
                        return Err(Error::shape("concat_tokens", format!("shared {s:?}")));
                    }
                    (v, s[0], s[1])
                }
                Segment::PerSequence(v) => {
                    let s = self.shape(v);
                    if s.len() != 3 || s[0] != n {
                        return Err(Error::shape("concat_tokens", format!("per-sequence {s:?}")));
                    }
                    (v, s[1], s[2])
                }
            };
            let _ = var;
            if *d.get_or_insert(dd) != dd {
                return Err(Error::shape("concat_tokens", "width mismatch"));
            }
            total += m;
        }
        let d = d.ok_or(Error::Empty("concat_tokens"))?;
        let mut out = vec![0.0; n * total * d];
        for s in 0..n {
            let mut offset = 0;
            for part in parts {
                let (src, m) = match *part {
                    Segment::Shared(v) => {
                        let m = self.shape(v)[0];
                        (&self.data(v)[..], m)
                    }
                    Segment::PerSequence(v) => {
                        let m = self.shape(v)[1];
                        (&self.data(v)[s * m * d..(s + 1) * m * d], m)
                    }
                };
                let dst = (s * total + offset) * d;
                out[dst..dst + m * d].copy_from_slice(&src[..m * d]);
                offset += m;
            }
        }
        let value = Tensor::new(vec![n, total, d], out)?;
        let inputs: Vec<Var> = parts
            .iter()
            .map(|p| match *p {
                Segment::Shared(v) | Segment::PerSequence(v) => v,
            })
            .collect();
        Ok(self.push(
            value,
            Op::ConcatTokens {
                parts: parts.to_vec(),
                n,
            },
            &inputs,
        ))
    }

    /// Picks token `index` of every sequence: `[n, T, d] -> [n, d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select_token", format!("{s:?} at {index}")));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&xd[(i * t + index) * d..(i * t + index + 1) * d]);
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::SelectToken { x, index }, &[x]))
    }

    /// Multi-head scaled dot-product self-attention on `[n, T, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention", format!("q {s:?}")));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; n * heads * t * t];
        let mut out = vec![0.0; n * t * d];
        for b in 0..n {
            for h in 0..heads {
                let base = b * t * d + h * dh;
                for i in 0..t {
                    let p = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    let qi = &qd[base + i * d..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = scale * dot(qi, &kd[base + j * d..][..dh]);
                    }
                    softmax_in_place(p);
                    let oi = &mut out[base + i * d..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        axpy(pj, &vd[base + j * d..][..dh], oi);
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", format!("{s:?} vs {} labels", labels.len())));
        }
        let c = s[1];
        if labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", "label out of range"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            loss += log_sum_exp(row) - row[l];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d(loss)/d(leaf) into every leaf that tracks gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.value.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[idx].op, g) {
                self.nodes[idx].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let tracks = |v: Var| self.nodes[v.0].value.requires_grad;
        let len = |v: Var| self.nodes[v.0].value.data.len();
        let y = &node.value.data;

        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let (xa, xb) = (self.data(a), self.data(b));
                let nb = xb.len();
                if tracks(a) {
                    accumulate(grads, a, xa.len(), |ga| {
                        for i in 0..ga.len() {
                            ga[i] += match op {
                                BinaryOp::Add | BinaryOp::Sub => g[i],
                                BinaryOp::Mul => g[i] * xb[i % nb],
                                BinaryOp::Div => g[i] / xb[i % nb],
                            };
                        }
                    });
                }
                if tracks(b) {
                    accumulate(grads, b, nb, |gb| {
                        for i in 0..g.len() {
                            let j = i % nb;
                            gb[j] += match op {
                                BinaryOp::Add => g[i],
                                BinaryOp::Sub => -g[i],
                                BinaryOp::Mul => g[i] * xa[i],
                                BinaryOp::Div => -g[i] * xa[i] / (xb[j] * xb[j]),
                            };
                        }
                    });
                }
            }
            Op::Unary(op, a) => {
                let x = self.data(*a);
                accumulate(grads, *a, x.len(), |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i]
                            * match op {
                                UnaryOp::Gelu => gelu_grad(x[i]),
                                UnaryOp::Exp => y[i],
                                UnaryOp::Log => 1.0 / x[i],
                                UnaryOp::Sqrt => {
                                    if y[i] > 0.0 {
                                        0.5 / y[i]
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                });
            }
            Op::Scale(a, k) => accumulate(grads, *a, y.len(), |ga| axpy(*k, g, ga)),
            Op::AddScalar(a) => accumulate(grads, *a, y.len(), |ga| axpy(1.0, g, ga)),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (self.data(a), self.data(b));
                if tracks(a) {
                    accumulate(grads, a, m * k, |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &xb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if tracks(b) {
                    accumulate(grads, b, k * n, |gb| {
                        for i in 0..m {
                            for p in 0..k {
                                axpy(xa[i * k + p], &g[i * n..(i + 1) * n], &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_out, d_in) = (sw[0], sw[1]);
                let (xd, wd) = (self.data(*x), self.data(*w));
                let rows = xd.len() / d_in.max(1);
                if tracks(*x) {
                    accumulate(grads, *x, xd.len(), |gx| {
                        for r in 0..rows {
                            let gr = &g[r * d_out..(r + 1) * d_out];
                            let dst = &mut gx[r * d_in..(r + 1) * d_in];
                            for (o, &go) in gr.iter().enumerate() {
                                if go != 0.0 {
                                    axpy(go, &wd[o * d_in..(o + 1) * d_in], dst);
                                }
                            }
                        }
                    });
                }
                if tracks(*w) {
                    accumulate(grads, *w, wd.len(), |gw| {
                        for r in 0..rows {
                            let xr = &xd[r * d_in..(r + 1) * d_in];
                            for o in 0..d_out {
                                let go = g[r * d_out + o];
                                if go != 0.0 {
                                    axpy(go, xr, &mut gw[o * d_in..(o + 1) * d_in]);
                                }
                            }
                        }
                    });
                }
                if let Some(b) = b {
                    if tracks(*b) {
                        accumulate(grads, *b, d_out, |gb| {
                            for gr in g.chunks(d_out) {
                                axpy(1.0, gr, gb);
                            }
                        });
                    }
                }
            }
            Op::SumAll(a) => {
                let n = len(*a);
                accumulate(grads, *a, n, |ga| ga.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::MeanRows(a) => {
                let n_total = len(*a);
                let stride = y.len();
                let rows = n_total / stride.max(1);
                accumulate(grads, *a, n_total, |ga| {
                    for r in 0..rows {
                        axpy(1.0 / rows as f64, g, &mut ga[r * stride..(r + 1) * stride]);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = self.value(*a).last_dim();
                accumulate(grads, *a, y.len(), |ga| {
                    for ((yr, gr), dst) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s = dot(yr, gr);
                        for c in 0..d {
                            dst[c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let d = x.last_dim();
                accumulate(grads, *a, x.data.len(), |ga| {
                    for (r, (xr, dst)) in x.data.chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                        for c in 0..d {
                            dst[c] += g[r] * (xr[c] - y[r]).exp();
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gm = self.data(*gamma);
                if tracks(*x) {
                    accumulate(grads, *x, xhat.len(), |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            for c in 0..d {
                                dxhat[c] = gr[c] * gm[c];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dot(&dxhat, hr) / d as f64;
                            let dst = &mut gx[r * d..(r + 1) * d];
                            for c in 0..d {
                                dst[c] += rs * (dxhat[c] - m1 - hr[c] * m2);
                            }
                        }
                    });
                }
                if tracks(*gamma) {
                    accumulate(grads, *gamma, d, |gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for c in 0..d {
                                gg[c] += gr[c] * hr[c];
                            }
                        }
                    });
                }
                if tracks(*beta) {
                    accumulate(grads, *beta, d, |gb| {
                        for gr in g.chunks(d) {
                            axpy(1.0, gr, gb);
                        }
                    });
                }
            }
            Op::NormalizeRows { x, norms } => {
                let d = self.value(*x).last_dim();
                accumulate(grads, *x, y.len(), |gx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm <= 0.0 {
                            continue;
                        }
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s = dot(yr, gr);
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            dst[c] += (gr[c] - yr[c] * s) / norm;
                        }
                    }
                });
            }
            Op::ConcatTokens { parts, n } => {
                let (total, d) = (node.value.shape[1], node.value.shape[2]);
                let mut offset = 0;
                for part in parts {
                    match *part {
                        Segment::Shared(v) => {
                            let m = self.shape(v)[0];
                            if tracks(v) {
                                accumulate(grads, v, m * d, |gv| {
                                    for s in 0..*n {
                                        let src = (s * total + offset) * d;
                                        axpy(1.0, &g[src..src + m * d], gv);
                                    }
                                });
                            }
                            offset += m;
                        }
                        Segment::PerSequence(v) => {
                            let m = self.shape(v)[1];
                            if tracks(v) {
                                accumulate(grads, v, n * m * d, |gv| {
                                    for s in 0..*n {
                                        let src = (s * total + offset) * d;
                                        axpy(1.0, &g[src..src + m * d], &mut gv[s * m * d..(s + 1) * m * d]);
                                    }
                                });
                            }
                            offset += m;
                        }
                    }
                }
            }
            Op::SelectToken { x, index } => {
                let s = self.shape(*x);
                let (n, t, d) = (s[0], s[1], s[2]);
                accumulate(grads, *x, n * t * d, |gx| {
                    for i in 0..n {
                        let dst = (i * t + index) * d;
                        axpy(1.0, &g[i * d..(i + 1) * d], &mut gx[dst..dst + d]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let s = self.shape(*q);
                let (n, t, d) = (s[0], s[1], s[2]);
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let total = n * t * d;
                let mut gq = vec![0.0; total];
                let mut gk = vec![0.0; total];
                let mut gv = vec![0.0; total];
                let mut dp = vec![0.0; t];
                for b in 0..n {
                    for h in 0..heads {
                        let base = b * t * d + h * dh;
                        for i in 0..t {
                            let p = &probs[((b * heads + h) * t + i) * t..][..t];
                            let go = &g[base + i * d..][..dh];
                            for j in 0..t {
                                dp[j] = dot(go, &vd[base + j * d..][..dh]);
                                axpy(p[j], go, &mut gv[base + j * d..][..dh]);
                            }
                            let s = dot(p, &dp);
                            let qi = &qd[base + i * d..][..dh];
                            for j in 0..t {
                                let ds = scale * p[j] * (dp[j] - s);
                                if ds == 0.0 {
                                    continue;
                                }
                                axpy(ds, &kd[base + j * d..][..dh], &mut gq[base + i * d..][..dh]);
                                axpy(ds, qi, &mut gk[base + j * d..][..dh]);
                            }
                        }
                    }
                }
                for (var, gg) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if tracks(var) {
                        accumulate(grads, var, total, |dst| axpy(1.0, &gg, dst));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                accumulate(grads, *logits, probs.len(), |gl| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
