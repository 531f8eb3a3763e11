//! Per-stage architecture summaries.

use dualvit_core::{BlockKind, ModelConfig};
use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageRow {
    pub stage: usize,
    pub kind: BlockKind,
    pub depth: usize,
    pub heads: usize,
    pub channels: usize,
    pub head_dim: usize,
    pub pixel_ratio: usize,
    pub semantic_ratio: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_tokens: usize,
    pub semantic_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Description {
    pub model: String,
    pub resolution: usize,
    pub semantic_tokens: usize,
    pub num_classes: usize,
    pub pos_embed: bool,
    pub stages: Vec<StageRow>,
    pub config: ModelConfig,
}

/// Stage table of `config` evaluated at `resolution`. No parameters are
/// allocated.
pub fn describe(name: &str, config: &ModelConfig, resolution: usize) -> Result<Description> {
    config.validate()?;
    let geometry = config.geometry(resolution)?;
    let stages = config
        .stages
        .iter()
        .zip(&geometry)
        .enumerate()
        .map(|(i, (s, g))| StageRow {
            stage: i + 1,
            kind: s.kind,
            depth: s.depth,
            heads: s.heads,
            channels: s.channels,
            head_dim: s.channels / s.heads,
            pixel_ratio: s.pixel_ratio,
            semantic_ratio: s.semantic_ratio,
            patch: s.patch,
            height: g.height,
            width: g.width,
            pixel_tokens: g.pixel_tokens,
            semantic_tokens: g.semantic_tokens,
        })
        .collect();
    Ok(Description {
        model: name.to_string(),
        resolution,
        semantic_tokens: config.semantic_tokens,
        num_classes: config.num_classes,
        pos_embed: config.pos_embed,
        stages,
        config: config.clone(),
    })
}

impl Description {
    pub fn header() -> [&'static str; 11] {
        ["stage", "block", "depth", "heads", "C", "E^x", "E^z", "patch", "grid", "pixel", "semantic"]
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        self.stages
            .iter()
            .map(|s| {
                vec![
                    s.stage.to_string(),
                    s.kind.to_string(),
                    s.depth.to_string(),
                    s.heads.to_string(),
                    s.channels.to_string(),
                    s.pixel_ratio.to_string(),
                    s.semantic_ratio.to_string(),
                    format!("{0}x{0}", s.patch),
                    format!("{}x{}", s.height, s.width),
                    s.pixel_tokens.to_string(),
                    s.semantic_tokens.to_string(),
                ]
            })
            .collect()
    }
}
