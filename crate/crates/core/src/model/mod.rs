//! Dual-scale DeiT-style student with LoRA-adapted encoders.
//!
//! Pipeline per image: fine patches → local-window attention → encoder
//! branch; coarse patches → global self-attention → encoder branch; the two
//! CLS tokens are refined by cross-attention into the opposite branch,
//! fused by an MLP and classified.

mod config;
pub mod layers;
mod params;

pub use config::ModelConfig;
pub use layers::{Ctx, EncoderBlock, FusionOut, Lora};
pub use params::{Bound, Param, ParamId, ParamKind, ParamStore, Trainable};

use std::collections::BTreeMap;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fed::{AdapterPair, LoraStateDict};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use layers::{FusionHead, GlobalSelfAttention, Init, LocalWindowAttention, PatchEmbed};

#[derive(Debug, Clone)]
pub struct MsDeit {
    config: ModelConfig,
    params: ParamStore,
    pub embed_small: PatchEmbed,
    pub embed_large: PatchEmbed,
    pub lwa: LocalWindowAttention,
    pub gsa: GlobalSelfAttention,
    pub branch_small: Vec<EncoderBlock>,
    pub branch_large: Vec<EncoderBlock>,
    pub fusion: FusionHead,
}

/// Parameter totals used for the adapter-overhead report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub adapter: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        self.adapter as f64 / self.total as f64
    }
}

impl MsDeit {
    /// Builds a model whose weights are a deterministic function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = rng::stream(seed, "init");
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            token_std: config.token_init_std,
        };
        let c = &config;
        let e = c.embed_dim;
        let lora = (c.lora_rank, c.lora_scaling());
        let embed_small = PatchEmbed::new(&mut init, "small.embed", c.in_channels, c.patch_small, c.tokens_small(), e);
        let embed_large = PatchEmbed::new(&mut init, "large.embed", c.in_channels, c.patch_large, c.tokens_large(), e);
        let lwa = LocalWindowAttention::new(&mut init, "small.lwa", e, c.heads, c.grid_small(), c.window);
        let gsa = GlobalSelfAttention::new(&mut init, "large.gsa", e, c.heads);
        let hidden = e * c.mlp_ratio;
        let branch_small = (0..c.depth)
            .map(|i| EncoderBlock::new(&mut init, &format!("small.block{i}"), e, c.heads, hidden, lora))
            .collect();
        let branch_large = (0..c.depth)
            .map(|i| EncoderBlock::new(&mut init, &format!("large.block{i}"), e, c.heads, hidden, lora))
            .collect();
        let fusion = FusionHead::new(&mut init, e, c.num_classes, c.head_adapter.then_some(lora));
        Ok(Self {
            config,
            params: store,
            embed_small,
            embed_large,
            lwa,
            gsa,
            branch_small,
            branch_large,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.image_size, c.image_size];
        if image.shape() != want {
            return Err(Error::Config(format!(
                "model expects images of shape {want:?}, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Fine-branch sequence after patch embedding and local-window attention.
    pub fn small_stem(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let z = self.embed_small.forward(ctx, image)?;
        self.lwa.forward(ctx, z)
    }

    pub fn large_stem(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let z = self.embed_large.forward(ctx, image)?;
        self.gsa.forward(ctx, z)
    }

    /// Full forward pass for one `C×H×W` image; logits are `1×classes`.
    pub fn forward_image(&self, ctx: &mut Ctx, image: Var) -> Result<FusionOut> {
        let s = self.small_stem(ctx, image)?;
        ctx.small_taps.push(s);
        let h_small = layers::encoder_branch(ctx, &self.branch_small, s, true)?;
        let l = self.large_stem(ctx, image)?;
        let h_large = layers::encoder_branch(ctx, &self.branch_large, l, false)?;
        self.fusion.forward(ctx, h_small, h_large)
    }

    /// Stacks per-image logits into a `B×classes` matrix.
    pub fn forward_batch(&self, ctx: &mut Ctx, images: &[Var]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Argument("empty image batch".into()));
        }
        let mut rows = Vec::with_capacity(images.len());
        for &img in images {
            ctx.small_taps.clear();
            rows.push(self.forward_image(ctx, img)?.logits);
        }
        Ok(ctx.tape.concat_rows(&rows)?)
    }

    fn predict_with(&self, images: &[Tensor], use_lora: bool) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Argument("empty image batch".into()));
        }
        let c = self.config.num_classes;
        let rows: Vec<Vec<f64>> = images
            .par_iter()
            .map(|image| {
                self.check_image(image)?;
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, Trainable::Adapters);
                let img = tape.constant(image.clone());
                let mut ctx = Ctx::eval(&mut tape, bound);
                ctx.use_lora = use_lora;
                let logits = self.forward_image(&mut ctx, img)?.logits;
                Ok(tape.value(logits).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::new(&[images.len(), c], rows.concat())?)
    }

    /// Eval-mode logits (`B×classes`); one short-lived tape per image, images
    /// evaluated in parallel.
    pub fn predict(&self, images: &[Tensor]) -> Result<Tensor> {
        self.predict_with(images, true)
    }

    /// Logits of the frozen base network with every adapter bypassed.
    pub fn predict_base(&self, images: &[Tensor]) -> Result<Tensor> {
        self.predict_with(images, false)
    }

    /// Every LoRA site in a fixed order.
    pub fn adapters(&self) -> Vec<&Lora> {
        let blocks = self.branch_small.iter().chain(&self.branch_large);
        let mut out: Vec<&Lora> = blocks
            .flat_map(|b| [b.attn.lora_q.as_ref(), b.attn.lora_k.as_ref()])
            .flatten()
            .collect();
        out.extend(self.fusion.head_lora.as_ref());
        out
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            total: self.params.count(|_| true),
            adapter: self.params.count(|p| p.kind == ParamKind::Adapter),
        }
    }

    pub fn base_checksum(&self) -> [u8; 32] {
        self.params.checksum(ParamKind::Base)
    }

    /// Identifies the frozen network adapters belong to: configuration plus
    /// base weights.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.base_checksum());
        h.finalize().into()
    }

    pub fn lora_state(&self) -> LoraStateDict {
        let entries: BTreeMap<String, AdapterPair> = self
            .adapters()
            .into_iter()
            .map(|l| {
                (
                    l.path.clone(),
                    AdapterPair {
                        a: self.params.get(l.a).value.clone(),
                        b: self.params.get(l.b).value.clone(),
                    },
                )
            })
            .collect();
        LoraStateDict::new(self.fingerprint(), entries)
    }

    pub fn load_lora_state(&mut self, state: &LoraStateDict) -> Result<()> {
        if state.fingerprint() != &self.fingerprint() {
            return Err(Error::Protocol(
                "adapter fingerprint does not match this model".into(),
            ));
        }
        let sites: Vec<(String, ParamId, ParamId)> = self
            .adapters()
            .into_iter()
            .map(|l| (l.path.clone(), l.a, l.b))
            .collect();
        if sites.len() != state.len() {
            return Err(Error::Protocol(format!(
                "model has {} adapters, state has {}",
                sites.len(),
                state.len()
            )));
        }
        for (path, a, b) in &sites {
            let pair = state
                .get(path)
                .ok_or_else(|| Error::Protocol(format!("adapter `{path}` missing from state")))?;
            for (id, t) in [(*a, &pair.a), (*b, &pair.b)] {
                if self.params.get(id).value.shape() != t.shape() {
                    return Err(Error::Protocol(format!(
                        "adapter `{path}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        self.params.get(id).value.shape()
                    )));
                }
            }
        }
        for (path, a, b) in sites {
            let pair = state.get(&path).expect("checked above");
            *self.params.value_mut(a) = pair.a.clone();
            *self.params.value_mut(b) = pair.b.clone();
        }
        Ok(())
    }
}
