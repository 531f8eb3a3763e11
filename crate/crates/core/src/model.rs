//! Four-stage backbone, presets and the classification head.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::blocks::AblationVariant;
use crate::blocks::{DualBlock, FeatureMap, MergeBlock, PatchEmbed, SemanticTokens, SemanticTransition};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Initializer, ParamId, ParamStore, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Image channels at the input boundary (channel-last RGB).
pub const IMAGE_CHANNELS: usize = 3;

/// Semantic token count used by the S/B/L presets: a 7×7 grid's worth, the
/// same as the last stage's pixel tokens at 224.
pub const DEFAULT_SEMANTIC_TOKENS: usize = 49;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Dual,
    Merge,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Dual => "dual",
            BlockKind::Merge => "merge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub depth: usize,
    pub heads: usize,
    pub channels: usize,
    /// Feed-forward expansion ratio of the pixel tokens.
    pub pixel_ratio: usize,
    /// Feed-forward expansion ratio of the semantic tokens.
    pub semantic_ratio: usize,
    /// Patch size of the embedding that opens this stage.
    pub patch: usize,
    pub kind: BlockKind,
}

impl StageSpec {
    const fn new(
        depth: usize,
        heads: usize,
        channels: usize,
        pixel_ratio: usize,
        semantic_ratio: usize,
        patch: usize,
        kind: BlockKind,
    ) -> Self {
        Self { depth, heads, channels, pixel_ratio, semantic_ratio, patch, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: [StageSpec; 4],
    /// Number of semantic tokens `m`, constant across stages.
    pub semantic_tokens: usize,
    pub num_classes: usize,
    /// Square input side length in pixels.
    pub resolution: usize,
    /// Learnable absolute positional embedding after the first patch embedding.
    pub pos_embed: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Small,
    Base,
    Large,
    Tiny,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Small, Preset::Base, Preset::Large, Preset::Tiny];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Small => "S",
            Preset::Base => "B",
            Preset::Large => "L",
            Preset::Tiny => "tiny",
        }
    }

    pub fn config(self) -> ModelConfig {
        use BlockKind::{Dual, Merge};
        let (stages, m, classes, res) = match self {
            Preset::Small => (
                [
                    StageSpec::new(3, 2, 64, 8, 4, 4, Dual),
                    StageSpec::new(4, 4, 128, 8, 4, 2, Dual),
                    StageSpec::new(6, 10, 320, 4, 2, 2, Merge),
                    StageSpec::new(3, 14, 448, 3, 2, 2, Merge),
                ],
                DEFAULT_SEMANTIC_TOKENS,
                1000,
                224,
            ),
            Preset::Base => (
                [
                    StageSpec::new(3, 2, 64, 8, 4, 4, Dual),
                    StageSpec::new(4, 4, 128, 8, 4, 2, Dual),
                    StageSpec::new(15, 10, 320, 4, 2, 2, Merge),
                    StageSpec::new(3, 16, 512, 3, 2, 2, Merge),
                ],
                DEFAULT_SEMANTIC_TOKENS,
                1000,
                224,
            ),
            Preset::Large => (
                [
                    StageSpec::new(3, 3, 96, 8, 4, 4, Dual),
                    StageSpec::new(6, 6, 192, 8, 4, 2, Dual),
                    StageSpec::new(21, 12, 384, 4, 2, 2, Merge),
                    StageSpec::new(3, 16, 512, 3, 2, 2, Merge),
                ],
                DEFAULT_SEMANTIC_TOKENS,
                1000,
                224,
            ),
            Preset::Tiny => (
                [
                    StageSpec::new(1, 2, 16, 8, 4, 4, Dual),
                    StageSpec::new(1, 2, 32, 8, 4, 2, Dual),
                    StageSpec::new(1, 4, 48, 4, 2, 2, Merge),
                    StageSpec::new(1, 4, 64, 3, 2, 2, Merge),
                ],
                4,
                8,
                32,
            ),
        };
        ModelConfig { stages, semantic_tokens: m, num_classes: classes, resolution: res, pos_embed: true, seed: 0 }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Preset::Small),
            "b" | "base" => Ok(Preset::Base),
            "l" | "large" => Ok(Preset::Large),
            "tiny" | "t" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected S, B, L or tiny)"))),
        }
    }
}

/// Spatial grid and token counts of one stage at a given input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixel_tokens: usize,
    pub semantic_tokens: usize,
}

impl ModelConfig {
    /// Product of all patch sizes; the input side must be a multiple of it.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch).product()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            let expected = if i < 2 { BlockKind::Dual } else { BlockKind::Merge };
            if s.kind != expected {
                return Err(Error::Config(format!("stage {stage} must use {expected} blocks, got {}", s.kind)));
            }
            if s.depth == 0 || s.heads == 0 || s.channels == 0 || s.patch == 0 {
                return Err(Error::Config(format!("stage {stage}: depth, heads, channels and patch must be positive")));
            }
            if s.pixel_ratio == 0 || s.semantic_ratio == 0 {
                return Err(Error::Config(format!("stage {stage}: expansion ratios must be positive")));
            }
            if s.channels % s.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {stage}: channels {} not divisible by heads {}",
                    s.channels, s.heads
                )));
            }
        }
        if self.semantic_tokens == 0 {
            return Err(Error::Config("semantic_tokens must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let geometry = self.geometry(self.resolution)?;
        for (i, g) in geometry.iter().take(2).enumerate() {
            if self.semantic_tokens > g.pixel_tokens {
                return Err(Error::Config(format!(
                    "{} semantic tokens exceed the {} pixel tokens of stage {}",
                    self.semantic_tokens,
                    g.pixel_tokens,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Per-stage grid at `resolution`; fails if the resolution is not a multiple
    /// of the total stride.
    pub fn geometry(&self, resolution: usize) -> Result<Vec<StageGeometry>> {
        let stride = self.total_stride();
        if resolution == 0 || !resolution.is_multiple_of(stride) {
            return Err(Error::Input(format!(
                "resolution {resolution} is not a positive multiple of the total stride {stride}"
            )));
        }
        let mut side = resolution;
        Ok(self
            .stages
            .iter()
            .map(|s| {
                side /= s.patch;
                StageGeometry {
                    height: side,
                    width: side,
                    channels: s.channels,
                    pixel_tokens: side * side,
                    semantic_tokens: self.semantic_tokens,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub enum Stage {
    Dual(Vec<DualBlock>),
    Merge(Vec<MergeBlock>),
}

/// A built network: structure plus its parameter registry.
#[derive(Debug, Clone)]
pub struct DualVit<T: Real = f32> {
    pub config: ModelConfig,
    pub variant: AblationVariant,
    pub params: ParamStore<T>,
    pub patch_embeds: Vec<PatchEmbed>,
    pub pos_embed: Option<ParamId>,
    pub semantic_queries: ParamId,
    /// Transitions into stages 2, 3 and 4.
    pub transitions: Vec<SemanticTransition>,
    pub stages: Vec<Stage>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

/// Stage outputs recorded by [`DualVit::forward_traced`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageTrace {
    pub height: usize,
    pub width: usize,
    pub pixel_tokens: usize,
    pub semantic_tokens: usize,
    pub channels: usize,
}

impl DualVit<f32> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_variant(config, AblationVariant::Full)
    }
}

impl<T: Real> DualVit<T> {
    /// Builds the network with freshly initialized parameters drawn from `config.seed`.
    /// The variant only affects the dual blocks of stages 1 and 2.
    pub fn build_variant(config: &ModelConfig, variant: AblationVariant) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry(config.resolution)?;
        let mut init = Initializer::new(config.seed);
        let mut store = ParamStore::new();

        let mut patch_embeds = Vec::with_capacity(4);
        let mut transitions = Vec::with_capacity(3);
        let mut stages = Vec::with_capacity(4);
        let mut pos_embed = None;
        let mut semantic_queries = None;
        let mut in_dim = IMAGE_CHANNELS;

        for (i, spec) in config.stages.iter().enumerate() {
            let stage = i + 1;
            let c = spec.channels;
            patch_embeds.push(PatchEmbed::new(
                &mut store,
                &mut init,
                &format!("patch_embed{stage}"),
                spec.patch,
                in_dim,
                c,
            )?);
            if i == 0 {
                if config.pos_embed {
                    let n = geometry[0].pixel_tokens;
                    pos_embed = Some(store.register("pos_embed", init.trunc_normal(&[n, c], INIT_STD)));
                }
                semantic_queries =
                    Some(store.register("semantic_queries", init.trunc_normal(&[config.semantic_tokens, c], INIT_STD)));
            } else {
                transitions.push(SemanticTransition::new(
                    &mut store,
                    &mut init,
                    &format!("semantic_transition{stage}"),
                    in_dim,
                    c,
                ));
            }
            let stage_blocks = match spec.kind {
                BlockKind::Dual => Stage::Dual(
                    (0..spec.depth)
                        .map(|j| {
                            DualBlock::new(
                                &mut store,
                                &mut init,
                                &format!("stage{stage}.block{j}"),
                                c,
                                spec.heads,
                                spec.pixel_ratio,
                                spec.semantic_ratio,
                                variant,
                            )
                        })
                        .collect::<Result<_>>()?,
                ),
                BlockKind::Merge => Stage::Merge(
                    (0..spec.depth)
                        .map(|j| {
                            MergeBlock::new(
                                &mut store,
                                &mut init,
                                &format!("stage{stage}.block{j}"),
                                c,
                                spec.heads,
                                spec.pixel_ratio,
                                spec.semantic_ratio,
                            )
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            stages.push(stage_blocks);
            in_dim = c;
        }
        let head_norm = LayerNorm::new(&mut store, "head_norm", in_dim);
        let head = Linear::new(&mut store, &mut init, "head", in_dim, config.num_classes);

        Ok(Self {
            config: config.clone(),
            variant,
            params: store,
            patch_embeds,
            pos_embed,
            semantic_queries: semantic_queries.expect("stage 1 always registers the queries"),
            transitions,
            stages,
            head_norm,
            head,
        })
    }

    /// Rebuilds the network with a different dual-block variant, carrying over
    /// every parameter whose name and shape exist in both layouts.
    pub fn apply_ablation(&self, variant: AblationVariant) -> Result<Self> {
        let mut out = Self::build_variant(&self.config, variant)?;
        for (_, p) in self.params.iter() {
            if let Some(id) = out.params.find(&p.name) {
                let target = out.params.value_mut(id);
                if target.shape() == p.value.shape() {
                    *target = p.value.clone();
                }
            }
        }
        Ok(out)
    }

    /// Same structure and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> DualVit<U> {
        DualVit {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
            patch_embeds: self.patch_embeds.clone(),
            pos_embed: self.pos_embed,
            semantic_queries: self.semantic_queries,
            transitions: self.transitions.clone(),
            stages: self.stages.clone(),
            head_norm: self.head_norm.clone(),
            head: self.head.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Images `[batch, H, W, 3]` on `tape` to logits `[batch, num_classes]`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, images: Var) -> Result<Var> {
        self.forward_inner(tape, images, None)
    }

    pub fn forward_traced(&self, tape: &mut Tape<T>, images: Var) -> Result<(Var, Vec<StageTrace>)> {
        let mut trace = Vec::with_capacity(4);
        let logits = self.forward_inner(tape, images, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Convenience forward on a fresh tape.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(images.clone());
        let logits = self.forward_tape(&mut tape, x)?;
        Ok(tape.value(logits).clone())
    }

    fn forward_inner(&self, tape: &mut Tape<T>, images: Var, mut trace: Option<&mut Vec<StageTrace>>) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let res = self.config.resolution;
        if shape.len() != 4 || shape[1] != res || shape[2] != res || shape[3] != IMAGE_CHANNELS {
            return Err(Error::Input(format!(
                "expected images of shape [batch, {res}, {res}, {IMAGE_CHANNELS}], got {shape:?}"
            )));
        }
        let batch = shape[0];
        let tokens = tape.reshape(images, &[batch, res * res, IMAGE_CHANNELS])?;
        let mut x = FeatureMap::new(tape, tokens, res, res)?;
        let mut z: Option<SemanticTokens> = None;

        for (i, stage) in self.stages.iter().enumerate() {
            x = self.patch_embeds[i].forward(tape, &x)?;
            let zi = match z {
                None => {
                    if let Some(pos) = self.pos_embed {
                        let pos = tape.param(pos)?;
                        let tokens = tape.add_broadcast(x.tokens, pos)?;
                        x = FeatureMap::new(tape, tokens, x.height, x.width)?;
                    }
                    let q = tape.param(self.semantic_queries)?;
                    SemanticTokens { tokens: tape.expand_leading(q, batch)? }
                }
                Some(prev) => self.transitions[i - 1].forward(tape, &prev)?,
            };
            let mut zc = zi;
            match stage {
                Stage::Dual(blocks) => {
                    for b in blocks {
                        (x, zc) = b.forward(tape, &x, &zc)?;
                    }
                }
                Stage::Merge(blocks) => {
                    for b in blocks {
                        (x, zc) = b.forward(tape, &x, &zc)?;
                    }
                }
            }
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(StageTrace {
                    height: x.height,
                    width: x.width,
                    pixel_tokens: x.num_tokens(),
                    semantic_tokens: zc.count(tape),
                    channels: x.channels(tape),
                });
            }
            z = Some(zc);
        }
        let z = z.expect("at least one stage");
        let joint = tape.concat(&[x.tokens, z.tokens], 1)?;
        let pooled = tape.mean(joint, 1)?;
        let pooled = self.head_norm.forward(tape, pooled)?;
        self.head.forward(tape, pooled)
    }

    /// Parameter names grouped by the component they belong to, e.g.
    /// `stage1.semantic`, `stage1.pixel`, `stage3.joint`, `semantic_queries`, `head`.
    pub fn param_group(name: &str) -> String {
        let mut parts = name.split('.');
        let first = parts.next().unwrap_or_default();
        if first.starts_with("stage") {
            let _block = parts.next();
            let layer = parts.next().unwrap_or_default();
            let pathway = if layer.starts_with("sem_") {
                "semantic"
            } else if layer.starts_with("pix_") {
                "pixel"
            } else {
                "joint"
            };
            return format!("{first}.{pathway}");
        }
        first.to_string()
    }
}
