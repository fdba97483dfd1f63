//! Tiny pre-norm transformer encoder with prompt-token insertion.
//!
//! Input sequence per sample: `[CLS], prompt_0 .. prompt_{L-1}, patch_1 .. patch_k`.
//! Learned positional embeddings cover the `[CLS]` and patch positions only;
//! prompt tokens carry none. The feature `z` is the final-LayerNorm'd `[CLS]`
//! output of the last block and the head is `h(z) = W_h z + b_h`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_patches: usize,
    /// Width of one raw input token before the patch projection.
    pub patch_dim: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 2,
            d_model: 32,
            n_heads: 4,
            n_patches: 16,
            patch_dim: 16,
            mlp_ratio: 2,
            n_classes: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.depth,
            self.d_model,
            self.n_heads,
            self.n_patches,
            self.patch_dim,
            self.mlp_ratio,
            self.n_classes,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("encoder counts must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::InvalidConfig("d_model must be >= 2".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

/// Per-block parameters, generic over storage (`Tensor` at rest, `Var` on a tape).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> BlockParams<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> BlockParams<U> {
        let mut g = |name: &str, t: &'a T| f(&format!("{prefix}.{name}"), t);
        BlockParams {
            ln1_gamma: g("ln1_gamma", &self.ln1_gamma),
            ln1_beta: g("ln1_beta", &self.ln1_beta),
            wq: g("wq", &self.wq),
            bq: g("bq", &self.bq),
            wk: g("wk", &self.wk),
            bk: g("bk", &self.bk),
            wv: g("wv", &self.wv),
            bv: g("bv", &self.bv),
            wo: g("wo", &self.wo),
            bo: g("bo", &self.bo),
            ln2_gamma: g("ln2_gamma", &self.ln2_gamma),
            ln2_beta: g("ln2_beta", &self.ln2_beta),
            w1: g("w1", &self.w1),
            b1: g("b1", &self.b1),
            w2: g("w2", &self.w2),
            b2: g("b2", &self.b2),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(&format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.bq"), &mut self.bq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.bk"), &mut self.bk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.bv"), &mut self.bv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.bo"), &mut self.bo);
        f(&format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(&format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }

    fn into_vec(self, out: &mut Vec<T>) {
        out.extend([
            self.ln1_gamma,
            self.ln1_beta,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gamma,
            self.ln2_beta,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos_cls: T,
    pub pos_patch: T,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_gamma: T,
    pub lnf_beta: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> EncoderParams<T> {
    /// Maps every parameter in a fixed canonical order, passing its name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_w: f("patch_w", &self.patch_w),
            patch_b: f("patch_b", &self.patch_b),
            cls: f("cls", &self.cls),
            pos_cls: f("pos_cls", &self.pos_cls),
            pos_patch: f("pos_patch", &self.pos_patch),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), &mut f))
                .collect(),
            lnf_gamma: f("lnf_gamma", &self.lnf_gamma),
            lnf_beta: f("lnf_beta", &self.lnf_beta),
            head_w: f("head_w", &self.head_w),
            head_b: f("head_b", &self.head_b),
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        f("patch_w", &mut self.patch_w);
        f("patch_b", &mut self.patch_b);
        f("cls", &mut self.cls);
        f("pos_cls", &mut self.pos_cls);
        f("pos_patch", &mut self.pos_patch);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), &mut f);
        }
        f("lnf_gamma", &mut self.lnf_gamma);
        f("lnf_beta", &mut self.lnf_beta);
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }

    /// Parameters in canonical order.
    pub fn into_vec(self) -> Vec<T> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls, self.pos_cls, self.pos_patch];
        for b in self.blocks {
            b.into_vec(&mut out);
        }
        out.extend([self.lnf_gamma, self.lnf_beta, self.head_w, self.head_b]);
        out
    }

    /// All parameters with their names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        self.map(|name, t| (name.to_string(), t)).into_vec()
    }
}

/// Frozen encoder + classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams<Tensor>,
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = dist.sample(rng));
    t
}

impl Encoder {
    /// Fresh random weights (fan-in scaled normals, unit LayerNorm gains).
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.hidden();
        let lin = |out: usize, inp: usize, rng: &mut Rng| normal(&[out, inp], 1.0 / (inp as f64).sqrt(), rng);
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: lin(d, d, rng),
                bq: Tensor::zeros(&[d]),
                wk: lin(d, d, rng),
                bk: Tensor::zeros(&[d]),
                wv: lin(d, d, rng),
                bv: Tensor::zeros(&[d]),
                wo: lin(d, d, rng),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w1: lin(h, d, rng),
                b1: Tensor::zeros(&[h]),
                w2: lin(d, h, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let params = EncoderParams {
            patch_w: lin(d, config.patch_dim, rng),
            patch_b: Tensor::zeros(&[d]),
            cls: normal(&[1, d], 0.5, rng),
            pos_cls: Tensor::zeros(&[1, d]),
            pos_patch: normal(&[config.n_patches, d], 0.1, rng),
            blocks,
            lnf_gamma: Tensor::filled(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            head_w: lin(config.n_classes, d, rng),
            head_b: Tensor::zeros(&[config.n_classes]),
        };
        Ok(Encoder { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: EncoderParams<Tensor>) -> Result<Self> {
        config.validate()?;
        let enc = Encoder { config, params };
        let reference = Encoder::init(enc.config.clone(), &mut crate::rng::stream(0, "shape"))?;
        for ((name, a), (_, b)) in enc.params.named().into_iter().zip(reference.params.named()) {
            if a.shape != b.shape {
                return Err(Error::shape("encoder", format!("{name}: {:?} expected {:?}", a.shape, b.shape)));
            }
        }
        Ok(enc)
    }

    /// Records every weight on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderParams<Var> {
        self.params.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Classifier rows `w_c`, the source class prototypes.
    pub fn prototypes(&self) -> &Tensor {
        &self.params.head_w
    }

    /// Per-tensor sum of absolute values, for freeze checks.
    pub fn checksums(&self) -> Vec<(String, f64)> {
        self.params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.abs_sum()))
            .collect()
    }

    fn check_tokens(&self, tokens: &Tensor) -> Result<()> {
        let c = &self.config;
        if tokens.shape.len() != 3 || tokens.shape[1] != c.n_patches || tokens.shape[2] != c.patch_dim {
            return Err(Error::shape(
                "forward_features",
                format!("tokens {:?}, expected [n, {}, {}]", tokens.shape, c.n_patches, c.patch_dim),
            ));
        }
        if tokens.shape[0] == 0 {
            return Err(Error::Empty("forward_features batch"));
        }
        Ok(())
    }

    /// Records the feature computation on `tape` with weights already bound.
    pub fn features_on_tape(
        &self,
        tape: &mut Tape,
        w: &EncoderParams<Var>,
        tokens: Var,
        prompt: Option<Var>,
    ) -> Result<Var> {
        let n = tape.value(tokens).shape[0];
        if let Some(p) = prompt {
            let s = &tape.value(p).shape;
            if s.len() != 2 || s[1] != self.config.d_model {
                return Err(Error::shape("forward_features", format!("prompt {s:?}")));
            }
        }
        let emb = tape.linear(tokens, w.patch_w, Some(w.patch_b))?;
        let emb = tape.add(emb, w.pos_patch)?;
        let cls = tape.add(w.cls, w.pos_cls)?;
        let mut segments = vec![Segment::Shared(cls)];
        segments.extend(prompt.map(Segment::Shared));
        segments.push(Segment::PerSequence(emb));
        let mut x = tape.concat_tokens(&segments, n)?;

        for b in &w.blocks {
            let h = tape.layernorm(x, b.ln1_gamma, b.ln1_beta)?;
            let q = tape.linear(h, b.wq, Some(b.bq))?;
            let k = tape.linear(h, b.wk, Some(b.bk))?;
            let v = tape.linear(h, b.wv, Some(b.bv))?;
            let a = tape.attention(q, k, v, self.config.n_heads)?;
            let a = tape.linear(a, b.wo, Some(b.bo))?;
            x = tape.add(x, a)?;
            let h = tape.layernorm(x, b.ln2_gamma, b.ln2_beta)?;
            let m = tape.linear(h, b.w1, Some(b.b1))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, b.w2, Some(b.b2))?;
            x = tape.add(x, m)?;
        }
        let z = tape.select_token(x, 0)?;
        tape.layernorm(z, w.lnf_gamma, w.lnf_beta)
    }

    /// Features with frozen weights on a fresh tape. `prompt` may track
    /// gradients; nothing else does.
    pub fn features_taped(&self, tape: &mut Tape, tokens: &Tensor, prompt: Option<Var>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let w = self.bind(tape, false);
        let x = tape.constant(tokens.clone());
        self.features_on_tape(tape, &w, x, prompt)
    }

    /// `φ(x)` without a prompt, or `φ(x; p)` with one. Returns `[n, d_model]`.
    pub fn forward_features(&self, tokens: &Tensor, prompt: Option<&PromptState>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = prompt.map(|p| tape.constant(p.tokens.clone()));
        let z = self.features_taped(&mut tape, tokens, p)?;
        let out = tape.value(z).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("encoder features".into()));
        }
        Ok(out)
    }

    /// `features · W_hᵀ + b_h`.
    pub fn forward_logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = tape.constant(features.clone());
        let w = tape.constant(self.params.head_w.clone());
        let b = tape.constant(self.params.head_b.clone());
        let logits = tape.linear(z, w, Some(b))?;
        Ok(tape.value(logits).clone())
    }
}

/// The `L × d_model` learnable prompt tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub tokens: Tensor,
}

impl PromptState {
    /// Xavier-uniform (gain 1) over `(L, d_model)`.
    pub fn xavier(len: usize, d_model: usize, rng: &mut Rng) -> Self {
        let bound = if len + d_model == 0 {
            0.0
        } else {
            (6.0 / (len + d_model) as f64).sqrt()
        };
        let mut tokens = Tensor::zeros(&[len, d_model]);
        if bound > 0.0 {
            tokens.data.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        }
        PromptState { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.all_finite()
    }
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
