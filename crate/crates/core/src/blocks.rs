//! Transformer, dual-pathway and merge blocks, plus the stage-boundary layers.
//!
//! All block inputs are batched token tensors `[batch, tokens, channels]`.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::params::{Initializer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

/// Pixel-pathway tokens with their spatial grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn new<T: Real>(tape: &Tape<T>, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::Input(format!(
                "feature map of {height}x{width} needs [batch, {}, channels] tokens, got {s:?}",
                height * width
            )));
        }
        Ok(Self { tokens, height, width })
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn channels<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[2]
    }
}

/// The `m` semantic tokens carried alongside a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticTokens {
    pub tokens: Var,
}

impl SemanticTokens {
    pub fn count<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[1]
    }

    pub fn channels<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[2]
    }
}

/// Which semantic-pathway layout a dual block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AblationVariant {
    /// (a) no semantic self-attention.
    #[serde(rename = "a")]
    NoSemanticSelfAttn,
    /// (b) no semantic feed-forward.
    #[serde(rename = "b")]
    NoSemanticFfn,
    /// (c) cross-attention first, then self-attention.
    #[serde(rename = "c")]
    CrossFirst,
    /// (d) self-attention, cross-attention, feed-forward.
    #[default]
    #[serde(rename = "d")]
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::NoSemanticSelfAttn,
        AblationVariant::NoSemanticFfn,
        AblationVariant::CrossFirst,
        AblationVariant::Full,
    ];

    pub fn letter(self) -> char {
        match self {
            AblationVariant::NoSemanticSelfAttn => 'a',
            AblationVariant::NoSemanticFfn => 'b',
            AblationVariant::CrossFirst => 'c',
            AblationVariant::Full => 'd',
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationVariant::NoSemanticSelfAttn => "semantic pathway without self-attention",
            AblationVariant::NoSemanticFfn => "semantic pathway without feed-forward",
            AblationVariant::CrossFirst => "cross-attention before self-attention",
            AblationVariant::Full => "self-attention, cross-attention, feed-forward",
        }
    }

    fn has_self_attn(self) -> bool {
        self != AblationVariant::NoSemanticSelfAttn
    }

    fn has_ffn(self) -> bool {
        self != AblationVariant::NoSemanticFfn
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(AblationVariant::NoSemanticSelfAttn),
            "b" => Ok(AblationVariant::NoSemanticFfn),
            "c" => Ok(AblationVariant::CrossFirst),
            "d" | "full" => Ok(AblationVariant::Full),
            other => Err(Error::Config(format!("unknown ablation variant {other:?} (expected a, b, c or d)"))),
        }
    }
}

fn residual<T: Real>(tape: &mut Tape<T>, update: Var, skip: Var) -> Result<Var> {
    tape.add(update, skip)
}

/// Pre-norm block: `x' = MHA(LN x) + x`, `out = FFN(LN x') + x'`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), dim, ratio)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params() + self.attn.num_params() + self.norm2.num_params() + self.ffn.num_params()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let xn = self.norm1.forward(tape, x)?;
        let a = self.attn.forward(tape, xn, xn, xn)?;
        let x1 = residual(tape, a, x)?;
        let h = self.norm2.forward(tape, x1)?;
        let f = self.ffn.forward(tape, h)?;
        residual(tape, f, x1)
    }

    pub fn forward_map<T: Real>(&self, tape: &mut Tape<T>, x: &FeatureMap) -> Result<FeatureMap> {
        let tokens = self.forward(tape, x.tokens)?;
        FeatureMap::new(tape, tokens, x.height, x.width)
    }
}

/// Two-pathway block.
///
/// Semantic pathway (full variant):
/// `z1 = SA(LN z) + z`, `zc = CA(LN z1, LN x, LN x) + z1`, `z' = FFN(LN zc) + zc`.
/// Pixel pathway, consuming the updated `z'`:
/// `x1 = CA(LN x, LN z', LN z') + x`, `x' = FFN(LN x1) + x1`.
///
/// `LN x` is one normalization shared by both pathways.
#[derive(Debug, Clone)]
pub struct DualBlock {
    pub variant: AblationVariant,
    pub norm_x: LayerNorm,
    /// Norm before the first semantic attention; absent without self-attention.
    pub sem_norm1: Option<LayerNorm>,
    pub sem_self_attn: Option<Attention>,
    /// Norm before the second semantic attention.
    pub sem_norm2: LayerNorm,
    pub sem_cross_attn: Attention,
    pub sem_ffn_norm: Option<LayerNorm>,
    pub sem_ffn: Option<FeedForward>,
    pub pix_kv_norm: LayerNorm,
    pub pix_cross_attn: Attention,
    pub pix_ffn_norm: LayerNorm,
    pub pix_ffn: FeedForward,
}

impl DualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        pixel_ratio: usize,
        semantic_ratio: usize,
        variant: AblationVariant,
    ) -> Result<Self> {
        let norm_x = LayerNorm::new(store, &format!("{name}.norm_x"), dim);
        let sem_norm1 = variant.has_self_attn().then(|| LayerNorm::new(store, &format!("{name}.sem_norm1"), dim));
        let sem_self_attn = match variant.has_self_attn() {
            true => Some(Attention::new(store, init, &format!("{name}.sem_self_attn"), dim, heads)?),
            false => None,
        };
        let sem_norm2 = LayerNorm::new(store, &format!("{name}.sem_norm2"), dim);
        let sem_cross_attn = Attention::new(store, init, &format!("{name}.sem_cross_attn"), dim, heads)?;
        let (sem_ffn_norm, sem_ffn) = match variant.has_ffn() {
            true => (
                Some(LayerNorm::new(store, &format!("{name}.sem_ffn_norm"), dim)),
                Some(FeedForward::new(store, init, &format!("{name}.sem_ffn"), dim, semantic_ratio)?),
            ),
            false => (None, None),
        };
        Ok(Self {
            variant,
            norm_x,
            sem_norm1,
            sem_self_attn,
            sem_norm2,
            sem_cross_attn,
            sem_ffn_norm,
            sem_ffn,
            pix_kv_norm: LayerNorm::new(store, &format!("{name}.pix_kv_norm"), dim),
            pix_cross_attn: Attention::new(store, init, &format!("{name}.pix_cross_attn"), dim, heads)?,
            pix_ffn_norm: LayerNorm::new(store, &format!("{name}.pix_ffn_norm"), dim),
            pix_ffn: FeedForward::new(store, init, &format!("{name}.pix_ffn"), dim, pixel_ratio)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.norm_x.dim
    }

    pub fn num_params(&self) -> usize {
        let opt_ln = |n: &Option<LayerNorm>| n.as_ref().map_or(0, LayerNorm::num_params);
        self.norm_x.num_params()
            + opt_ln(&self.sem_norm1)
            + self.sem_self_attn.as_ref().map_or(0, Attention::num_params)
            + self.sem_norm2.num_params()
            + self.sem_cross_attn.num_params()
            + opt_ln(&self.sem_ffn_norm)
            + self.sem_ffn.as_ref().map_or(0, FeedForward::num_params)
            + self.pix_kv_norm.num_params()
            + self.pix_cross_attn.num_params()
            + self.pix_ffn_norm.num_params()
            + self.pix_ffn.num_params()
    }

    fn self_attend<T: Real>(&self, tape: &mut Tape<T>, norm: &LayerNorm, z: Var) -> Result<Var> {
        let attn = self
            .sem_self_attn
            .as_ref()
            .ok_or_else(|| Error::Contract("variant has no semantic self-attention".into()))?;
        let zn = norm.forward(tape, z)?;
        let a = attn.forward(tape, zn, zn, zn)?;
        residual(tape, a, z)
    }

    fn cross_attend<T: Real>(&self, tape: &mut Tape<T>, norm: &LayerNorm, z: Var, xn: Var) -> Result<Var> {
        let zn = norm.forward(tape, z)?;
        let a = self.sem_cross_attn.forward(tape, zn, xn, xn)?;
        residual(tape, a, z)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: &FeatureMap,
        z: &SemanticTokens,
    ) -> Result<(FeatureMap, SemanticTokens)> {
        let (dx, dz) = (x.channels(tape), z.channels(tape));
        if dx != self.dim() || dz != self.dim() {
            return Err(Error::Config(format!(
                "dual block of width {} got pixel channels {dx} and semantic channels {dz}",
                self.dim()
            )));
        }
        let m = z.count(tape);
        if m > x.num_tokens() {
            return Err(Error::Input(format!("{m} semantic tokens exceed {} pixel tokens", x.num_tokens())));
        }
        let xn = self.norm_x.forward(tape, x.tokens)?;

        // semantic pathway
        let missing_norm = || Error::Contract("variant is missing its first semantic norm".into());
        let zc = match self.variant {
            AblationVariant::NoSemanticSelfAttn => self.cross_attend(tape, &self.sem_norm2, z.tokens, xn)?,
            AblationVariant::CrossFirst => {
                let norm1 = self.sem_norm1.as_ref().ok_or_else(missing_norm)?;
                let z1 = self.cross_attend(tape, norm1, z.tokens, xn)?;
                self.self_attend(tape, &self.sem_norm2, z1)?
            }
            AblationVariant::Full | AblationVariant::NoSemanticFfn => {
                let norm1 = self.sem_norm1.as_ref().ok_or_else(missing_norm)?;
                let z1 = self.self_attend(tape, norm1, z.tokens)?;
                self.cross_attend(tape, &self.sem_norm2, z1, xn)?
            }
        };
        let z_next = match (&self.sem_ffn_norm, &self.sem_ffn) {
            (Some(norm), Some(ffn)) => {
                let h = norm.forward(tape, zc)?;
                let f = ffn.forward(tape, h)?;
                residual(tape, f, zc)?
            }
            _ => zc,
        };

        // pixel pathway, keyed on the updated semantic tokens
        let zk = self.pix_kv_norm.forward(tape, z_next)?;
        let a = self.pix_cross_attn.forward(tape, xn, zk, zk)?;
        let x1 = residual(tape, a, x.tokens)?;
        let h = self.pix_ffn_norm.forward(tape, x1)?;
        let f = self.pix_ffn.forward(tape, h)?;
        let x_next = residual(tape, f, x1)?;

        Ok((FeatureMap::new(tape, x_next, x.height, x.width)?, SemanticTokens { tokens: z_next }))
    }
}

/// Joint self-attention over `[x ‖ z]` followed by separate feed-forward
/// layers for the pixel and semantic tokens.
#[derive(Debug, Clone)]
pub struct MergeBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm_x: LayerNorm,
    pub ffn_x: FeedForward,
    pub norm_z: LayerNorm,
    pub ffn_z: FeedForward,
}

impl MergeBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
        pixel_ratio: usize,
        semantic_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, heads)?,
            norm_x: LayerNorm::new(store, &format!("{name}.norm_x"), dim),
            ffn_x: FeedForward::new(store, init, &format!("{name}.ffn_x"), dim, pixel_ratio)?,
            norm_z: LayerNorm::new(store, &format!("{name}.norm_z"), dim),
            ffn_z: FeedForward::new(store, init, &format!("{name}.ffn_z"), dim, semantic_ratio)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.norm1.dim
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params()
            + self.attn.num_params()
            + self.norm_x.num_params()
            + self.ffn_x.num_params()
            + self.norm_z.num_params()
            + self.ffn_z.num_params()
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: &FeatureMap,
        z: &SemanticTokens,
    ) -> Result<(FeatureMap, SemanticTokens)> {
        let (dx, dz) = (x.channels(tape), z.channels(tape));
        if dx != self.dim() || dz != self.dim() {
            return Err(Error::shape("merge block", &[dx], &[dz]));
        }
        let (n, m) = (x.num_tokens(), z.count(tape));
        let y = tape.concat(&[x.tokens, z.tokens], 1)?;
        let yn = self.norm1.forward(tape, y)?;
        let a = self.attn.forward(tape, yn, yn, yn)?;
        let y1 = residual(tape, a, y)?;
        let parts = tape.split(y1, 1, &[n, m])?;
        let (x1, z1) = (parts[0], parts[1]);

        let h = self.norm_x.forward(tape, x1)?;
        let f = self.ffn_x.forward(tape, h)?;
        let x_next = residual(tape, f, x1)?;

        let h = self.norm_z.forward(tape, z1)?;
        let f = self.ffn_z.forward(tape, h)?;
        let z_next = residual(tape, f, z1)?;

        Ok((FeatureMap::new(tape, x_next, x.height, x.width)?, SemanticTokens { tokens: z_next }))
    }
}

/// Non-overlapping `p × p` patches, flattened in (row, column, channel) order,
/// projected to `out_dim` and layer-normalized.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        patch: usize,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config(format!("{name}: patch size must be positive")));
        }
        Ok(Self {
            patch,
            in_dim,
            out_dim,
            proj: Linear::new(store, init, &format!("{name}.proj"), patch * patch * in_dim, out_dim),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_dim),
        })
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: &FeatureMap) -> Result<FeatureMap> {
        let p = self.patch;
        let (h, w) = (x.height, x.width);
        if h % p != 0 || w % p != 0 {
            return Err(Error::Input(format!("{h}x{w} feature map is not divisible by patch size {p}")));
        }
        let s = tape.shape(x.tokens).to_vec();
        if s[2] != self.in_dim {
            return Err(Error::shape("patch embed", &[self.in_dim], &s));
        }
        let (b, c) = (s[0], s[2]);
        let (gh, gw) = (h / p, w / p);
        let t = tape.reshape(x.tokens, &[b, gh, p, gw, p, c])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        let t = tape.reshape(t, &[b, gh * gw, p * p * c])?;
        let t = self.proj.forward(tape, t)?;
        let t = self.norm.forward(tape, t)?;
        FeatureMap::new(tape, t, gh, gw)
    }
}

/// Carries semantic tokens across a stage boundary: linear `C_i → C_{i+1}`, then LN.
#[derive(Debug, Clone)]
pub struct SemanticTransition {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl SemanticTransition {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), in_dim, out_dim),
            norm: LayerNorm::new(store, &format!("{name}.norm"), out_dim),
        }
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params() + self.norm.num_params()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, z: &SemanticTokens) -> Result<SemanticTokens> {
        let t = self.proj.forward(tape, z.tokens)?;
        let t = self.norm.forward(tape, t)?;
        Ok(SemanticTokens { tokens: t })
    }
}
