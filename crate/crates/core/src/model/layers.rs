//! Building blocks of the student: patch embedding, (LoRA-)attention,
//! encoder blocks, local-window and global attention, cross-attention fusion.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

/// Per-forward state: tape, parameter bindings and train/eval switches.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    pub bound: Bound,
    /// When false the adapter path is skipped entirely (frozen base network).
    pub use_lora: bool,
    /// Present only in training mode; drives LoRA dropout masks.
    pub dropout: Option<(&'t mut Rng, f64)>,
    /// When set, every attention probability matrix is appended here.
    pub attention_log: Option<Vec<Var>>,
    /// Fine-branch activations: index 0 is the local-window output, index
    /// `i > 0` the output of encoder block `i - 1`.
    pub small_taps: Vec<Var>,
}

impl<'t> Ctx<'t> {
    pub fn eval(tape: &'t mut Tape, bound: Bound) -> Self {
        Self {
            tape,
            bound,
            use_lora: true,
            dropout: None,
            attention_log: None,
            small_taps: Vec::new(),
        }
    }

    pub fn train(tape: &'t mut Tape, bound: Bound, rng: &'t mut Rng, rate: f64) -> Self {
        Self {
            dropout: Some((rng, rate)),
            ..Self::eval(tape, bound)
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rng, rate)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let rate = *rate;
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        Ok(self.tape.mul_const(x, &mask)?)
    }

    fn log_attention(&mut self, probs: Var) {
        if let Some(log) = self.attention_log.as_mut() {
            log.push(probs);
        }
    }
}

/// Parameter initializer: weights `N(0, 1/fan_in)`, tokens `N(0, token_std²)`.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub token_std: f64,
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        if std == 0.0 {
            return Tensor::zeros(shape);
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut *self.rng))
    }

    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let t = self.normal(&[fan_in, fan_out], (fan_in as f64).powf(-0.5));
        self.store.add(name, t, ParamKind::Base)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), ParamKind::Base)
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape), ParamKind::Base)
    }

    pub fn token(&mut self, name: String, shape: &[usize]) -> ParamId {
        let t = self.normal(shape, self.token_std);
        self.store.add(name, t, ParamKind::Base)
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`, so the adapter starts as an exact no-op.
    pub fn lora(&mut self, path: &str, fan_in: usize, fan_out: usize, rank: usize, scaling: f64) -> Lora {
        let a = self.normal(&[fan_in, rank], 0.02);
        let a = self.store.add(format!("{path}.lora_a"), a, ParamKind::Adapter);
        let b = self
            .store
            .add(format!("{path}.lora_b"), Tensor::zeros(&[rank, fan_out]), ParamKind::Adapter);
        Lora {
            path: path.to_string(),
            a,
            b,
            scaling,
        }
    }
}

/// Low-rank update `ΔW = A·B` added to a frozen projection.
#[derive(Debug, Clone)]
pub struct Lora {
    pub path: String,
    pub a: ParamId,
    pub b: ParamId,
    pub scaling: f64,
}

/// `x·W + scaling·(dropout(x)·A)·B`, or plain `x·W` without an adapter.
pub(crate) fn adapted_proj(ctx: &mut Ctx, x: Var, w: ParamId, lora: Option<&Lora>) -> Result<Var> {
    let base = ctx.tape.matmul(x, ctx.p(w))?;
    let Some(lora) = lora.filter(|_| ctx.use_lora) else {
        return Ok(base);
    };
    let xd = ctx.dropout(x)?;
    let low = ctx.tape.matmul(xd, ctx.p(lora.a))?;
    let delta = ctx.tape.matmul(low, ctx.p(lora.b))?;
    let delta = ctx.tape.scale(delta, lora.scaling);
    Ok(ctx.tape.add(base, delta)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(init: &mut Init, path: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(format!("{path}.gamma"), &[1, dim]),
            beta: init.zeros(format!("{path}.beta"), &[1, dim]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.layer_norm(x, LN_EPS)?;
        let s = ctx.tape.mul_row(n, ctx.p(self.gamma))?;
        Ok(ctx.tape.add_row(s, ctx.p(self.beta))?)
    }
}

/// Multi-head attention with frozen projections and optional LoRA on the
/// query and key projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub lora_q: Option<Lora>,
    pub lora_k: Option<Lora>,
}

impl Attention {
    pub(crate) fn new(init: &mut Init, path: &str, dim: usize, heads: usize, lora: Option<(usize, f64)>) -> Self {
        let wq = init.weight(format!("{path}.wq"), dim, dim);
        let wk = init.weight(format!("{path}.wk"), dim, dim);
        let wv = init.weight(format!("{path}.wv"), dim, dim);
        let wo = init.weight(format!("{path}.wo"), dim, dim);
        let bo = init.zeros(format!("{path}.bo"), &[1, dim]);
        let (lora_q, lora_k) = match lora {
            Some((rank, scaling)) => (
                Some(init.lora(&format!("{path}.q"), dim, dim, rank, scaling)),
                Some(init.lora(&format!("{path}.k"), dim, dim, rank, scaling)),
            ),
            None => (None, None),
        };
        Self {
            wq,
            wk,
            wv,
            wo,
            bo,
            heads,
            lora_q,
            lora_k,
        }
    }

    /// Queries from `xq`, keys/values from `xkv`; returns the projected
    /// attention output (no residual).
    pub fn forward(&self, ctx: &mut Ctx, xq: Var, xkv: Var) -> Result<Var> {
        let q = adapted_proj(ctx, xq, self.wq, self.lora_q.as_ref())?;
        let k = adapted_proj(ctx, xkv, self.wk, self.lora_k.as_ref())?;
        let v = ctx.tape.matmul(xkv, ctx.p(self.wv))?;
        let dim = ctx.tape.shape(q)[1];
        let dk = dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.slice_cols(q, h * dk, dk)?;
            let kh = ctx.tape.slice_cols(k, h * dk, dk)?;
            let vh = ctx.tape.slice_cols(v, h * dk, dk)?;
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale);
            let probs = ctx.tape.softmax(scores, 1.0)?;
            ctx.log_attention(probs);
            outs.push(ctx.tape.matmul(probs, vh)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { ctx.tape.concat_cols(&outs)? };
        Ok(ctx.tape.linear(o, ctx.p(self.wo), ctx.p(self.bo))?)
    }
}

/// Pre-norm transformer block: `x + LoRA-MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderBlock {
    pub(crate) fn new(init: &mut Init, path: &str, dim: usize, heads: usize, hidden: usize, lora: (usize, f64)) -> Self {
        Self {
            ln1: LayerNorm::new(init, &format!("{path}.ln1"), dim),
            attn: Attention::new(init, &format!("{path}.attn"), dim, heads, Some(lora)),
            ln2: LayerNorm::new(init, &format!("{path}.ln2"), dim),
            w1: init.weight(format!("{path}.ffn.w1"), dim, hidden),
            b1: init.zeros(format!("{path}.ffn.b1"), &[1, hidden]),
            w2: init.weight(format!("{path}.ffn.w2"), hidden, dim),
            b2: init.zeros(format!("{path}.ffn.b2"), &[1, dim]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.ln2.forward(ctx, x)?;
        let f = ctx.tape.linear(h, ctx.p(self.w1), ctx.p(self.b1))?;
        let f = ctx.tape.gelu(f);
        let f = ctx.tape.linear(f, ctx.p(self.w2), ctx.p(self.b2))?;
        Ok(ctx.tape.add(x, f)?)
    }
}

/// Runs `blocks` in order; an empty branch is the identity.
pub fn encoder_branch(ctx: &mut Ctx, blocks: &[EncoderBlock], x: Var, tap: bool) -> Result<Var> {
    let mut x = x;
    for block in blocks {
        x = block.forward(ctx, x)?;
        if tap {
            ctx.small_taps.push(x);
        }
    }
    Ok(x)
}

/// Convolutional patch projection (kernel = stride = P) followed by
/// `[CT; DT; patches] + positions`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
    pub dist: ParamId,
}

impl PatchEmbed {
    pub(crate) fn new(init: &mut Init, path: &str, channels: usize, patch: usize, tokens: usize, dim: usize) -> Self {
        Self {
            patch,
            w: init.weight(format!("{path}.proj_w"), channels * patch * patch, dim),
            b: init.zeros(format!("{path}.proj_b"), &[1, dim]),
            pos: init.token(format!("{path}.pos"), &[tokens + 2, dim]),
            cls: init.token(format!("{path}.cls_token"), &[1, dim]),
            dist: init.token(format!("{path}.dist_token"), &[1, dim]),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let shape = ctx.tape.shape(image).to_vec();
        if shape.len() != 3 || shape[1] % self.patch != 0 || shape[2] % self.patch != 0 {
            return Err(Error::Config(format!(
                "image of shape {shape:?} is not divisible into {p}×{p} patches",
                p = self.patch
            )));
        }
        let patches = ctx.tape.patches(image, self.patch)?;
        let z = ctx.tape.linear(patches, ctx.p(self.w), ctx.p(self.b))?;
        let seq = ctx.tape.concat_rows(&[ctx.p(self.cls), ctx.p(self.dist), z])?;
        Ok(ctx.tape.add(seq, ctx.p(self.pos))?)
    }
}

/// Attention restricted to `w×w` windows of the fine token grid; the two
/// leading special tokens attend to the whole sequence. Residual included.
#[derive(Debug, Clone)]
pub struct LocalWindowAttention {
    pub ln: LayerNorm,
    pub attn: Attention,
    pub grid: usize,
    pub window: usize,
}

impl LocalWindowAttention {
    pub(crate) fn new(init: &mut Init, path: &str, dim: usize, heads: usize, grid: usize, window: usize) -> Self {
        Self {
            ln: LayerNorm::new(init, &format!("{path}.ln"), dim),
            attn: Attention::new(init, &format!("{path}.attn"), dim, heads, None),
            grid,
            window,
        }
    }

    /// Sequence positions (offset by the two special tokens) of every window.
    pub fn windows(&self) -> Result<Vec<Vec<usize>>> {
        let (g, w) = (self.grid, self.window);
        if w == 0 || g % w != 0 {
            return Err(Error::Config(format!("window {w} does not divide grid side {g}")));
        }
        let per = g / w;
        let mut out = Vec::with_capacity(per * per);
        for wy in 0..per {
            for wx in 0..per {
                let mut idx = Vec::with_capacity(w * w);
                for dy in 0..w {
                    for dx in 0..w {
                        idx.push(2 + (wy * w + dy) * g + wx * w + dx);
                    }
                }
                out.push(idx);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = ctx.tape.shape(x)[0];
        if n != self.grid * self.grid + 2 {
            return Err(Error::Config(format!(
                "local window attention expects {} tokens, got {n}",
                self.grid * self.grid + 2
            )));
        }
        let windows = self.windows()?;
        let h = self.ln.forward(ctx, x)?;
        let special = ctx.tape.slice_rows(h, 0, 2)?;
        let mut parts = vec![self.attn.forward(ctx, special, h)?];
        let mut order = vec![0, 1];
        for idx in &windows {
            let hw = ctx.tape.gather_rows(h, idx)?;
            parts.push(self.attn.forward(ctx, hw, hw)?);
            order.extend_from_slice(idx);
        }
        let stacked = ctx.tape.concat_rows(&parts)?;
        let mut inverse = vec![0; n];
        for (row, &pos) in order.iter().enumerate() {
            inverse[pos] = row;
        }
        let restored = ctx.tape.gather_rows(stacked, &inverse)?;
        Ok(ctx.tape.add(x, restored)?)
    }
}

/// Full softmax self-attention over the coarse sequence, with residual.
#[derive(Debug, Clone)]
pub struct GlobalSelfAttention {
    pub ln: LayerNorm,
    pub attn: Attention,
}

impl GlobalSelfAttention {
    pub(crate) fn new(init: &mut Init, path: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln: LayerNorm::new(init, &format!("{path}.ln"), dim),
            attn: Attention::new(init, &format!("{path}.attn"), dim, heads, None),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h)?;
        Ok(ctx.tape.add(x, a)?)
    }
}

/// Single-head cross-attention with linear query/key/value projections.
#[derive(Debug, Clone)]
pub struct LinearCrossAttn {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl LinearCrossAttn {
    pub(crate) fn new(init: &mut Init, path: &str, dim: usize) -> Self {
        Self {
            wq: init.weight(format!("{path}.wq"), dim, dim),
            wk: init.weight(format!("{path}.wk"), dim, dim),
            wv: init.weight(format!("{path}.wv"), dim, dim),
        }
    }

    /// `softmax(q Wq (kv Wk)ᵀ / √d) · kv Wv` for a single query row.
    pub fn attend(&self, ctx: &mut Ctx, query: Var, kv: Var) -> Result<Var> {
        let q = ctx.tape.matmul(query, ctx.p(self.wq))?;
        let k = ctx.tape.matmul(kv, ctx.p(self.wk))?;
        let v = ctx.tape.matmul(kv, ctx.p(self.wv))?;
        let d = ctx.tape.shape(q)[1] as f64;
        let kt = ctx.tape.transpose(k)?;
        let s = ctx.tape.matmul(q, kt)?;
        let s = ctx.tape.scale(s, 1.0 / d.sqrt());
        let probs = ctx.tape.softmax(s, 1.0)?;
        ctx.log_attention(probs);
        Ok(ctx.tape.matmul(probs, v)?)
    }
}

/// Bidirectional CLS cross-attention, fusion MLP and classifier.
#[derive(Debug, Clone)]
pub struct FusionHead {
    pub small_to_large: LinearCrossAttn,
    pub large_to_small: LinearCrossAttn,
    pub wf: ParamId,
    pub bf: ParamId,
    pub wc: ParamId,
    pub bc: ParamId,
    pub head_lora: Option<Lora>,
}

/// Intermediate fusion outputs, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FusionOut {
    pub cls_small: Var,
    pub cls_large: Var,
    pub fused: Var,
    pub logits: Var,
}

impl FusionHead {
    pub(crate) fn new(init: &mut Init, dim: usize, classes: usize, head_lora: Option<(usize, f64)>) -> Self {
        Self {
            small_to_large: LinearCrossAttn::new(init, "fusion.cross_small", dim),
            large_to_small: LinearCrossAttn::new(init, "fusion.cross_large", dim),
            wf: init.weight("fusion.mlp.w".into(), 2 * dim, dim),
            bf: init.zeros("fusion.mlp.b".into(), &[1, dim]),
            wc: init.weight("head.w".into(), dim, classes),
            bc: init.zeros("head.b".into(), &[1, classes]),
            head_lora: head_lora.map(|(rank, scaling)| init.lora("head", dim, classes, rank, scaling)),
        }
    }

    /// Each branch's CLS token queries the other branch's patch tokens
    /// (special tokens excluded); the updated tokens are concatenated, fused
    /// and classified.
    pub fn forward(&self, ctx: &mut Ctx, h_small: Var, h_large: Var) -> Result<FusionOut> {
        let n_small = ctx.tape.shape(h_small)[0];
        let n_large = ctx.tape.shape(h_large)[0];
        let cls1 = ctx.tape.slice_rows(h_small, 0, 1)?;
        let cls2 = ctx.tape.slice_rows(h_large, 0, 1)?;
        let tok1 = ctx.tape.slice_rows(h_small, 2, n_small - 2)?;
        let tok2 = ctx.tape.slice_rows(h_large, 2, n_large - 2)?;
        let c1 = self.small_to_large.attend(ctx, cls1, tok2)?;
        let cls_small = ctx.tape.add(cls1, c1)?;
        let c2 = self.large_to_small.attend(ctx, cls2, tok1)?;
        let cls_large = ctx.tape.add(cls2, c2)?;
        let cat = ctx.tape.concat_cols(&[cls_small, cls_large])?;
        let fused = ctx.tape.linear(cat, ctx.p(self.wf), ctx.p(self.bf))?;
        let fused = ctx.tape.gelu(fused);
        let base = adapted_proj(ctx, fused, self.wc, self.head_lora.as_ref())?;
        let logits = ctx.tape.add_row(base, ctx.p(self.bc))?;
        Ok(FusionOut {
            cls_small,
            cls_large,
            fused,
            logits,
        })
    }
}
