//! Analytic parameter and multiply-accumulate (MAC) accounting.
//!
//! Conventions:
//! - a linear layer over `n` tokens costs `n · d_in · d_out` MACs;
//! - attention costs `n_q · n_kv · d` MACs for the scores plus the same again
//!   for mixing the values, where `d` is the full channel width (all heads);
//! - layer norm, GELU, softmax, residual adds and pooling are element-wise and
//!   are not counted.
//!
//! Reported "G" figures are giga-MACs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::Serialize;

use crate::blocks::{DualBlock, MergeBlock, PatchEmbed, SemanticTransition, TransformerBlock};
use crate::error::Result;
use crate::model::{DualVit, Stage};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub resolution: usize,
    pub params: u64,
    pub macs: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    pub fn giga_macs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn mega_params(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

/// Cost of a single block at a fixed token count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BlockCost {
    pub params: u64,
    /// MACs spent in projections and feed-forward layers.
    pub linear_macs: u64,
    /// MACs spent forming attention scores and mixing values.
    pub attention_macs: u64,
}

impl BlockCost {
    pub fn macs(&self) -> u64 {
        self.linear_macs + self.attention_macs
    }
}

#[derive(Default)]
struct Ledger {
    entries: Vec<CostEntry>,
    linear_macs: u64,
    attention_macs: u64,
}

fn linear_cost(l: &Linear, tokens: usize) -> (u64, u64) {
    (l.num_params() as u64, (tokens * l.d_in * l.d_out) as u64)
}

impl Ledger {
    fn push(&mut self, path: String, params: u64, linear: u64, attention: u64) {
        self.linear_macs += linear;
        self.attention_macs += attention;
        self.entries.push(CostEntry { path, params, macs: linear + attention });
    }

    fn raw(&mut self, path: &str, params: usize) {
        self.push(path.into(), params as u64, 0, 0);
    }

    fn linear(&mut self, path: &str, l: &Linear, tokens: usize) {
        let (p, m) = linear_cost(l, tokens);
        self.push(path.into(), p, m, 0);
    }

    fn norm(&mut self, path: &str, ln: &LayerNorm) {
        self.push(path.into(), ln.num_params() as u64, 0, 0);
    }

    fn opt_norm(&mut self, path: &str, ln: &Option<LayerNorm>) {
        if let Some(ln) = ln {
            self.norm(path, ln);
        }
    }

    fn attention(&mut self, path: &str, a: &Attention, nq: usize, nkv: usize) {
        let d = a.dim();
        let linear = [(&a.q_proj, nq), (&a.k_proj, nkv), (&a.v_proj, nkv), (&a.o_proj, nq)]
            .iter()
            .map(|(l, n)| linear_cost(l, *n).1)
            .sum();
        let attention = 2 * (nq * nkv * d) as u64;
        self.push(path.into(), a.num_params() as u64, linear, attention);
    }

    fn ffn(&mut self, path: &str, f: &FeedForward, tokens: usize) {
        let macs = linear_cost(&f.expand, tokens).1 + linear_cost(&f.contract, tokens).1;
        self.push(path.into(), f.num_params() as u64, macs, 0);
    }

    fn transformer_block(&mut self, path: &str, b: &TransformerBlock, n: usize) {
        self.norm(&format!("{path}.norm1"), &b.norm1);
        self.attention(&format!("{path}.attn"), &b.attn, n, n);
        self.norm(&format!("{path}.norm2"), &b.norm2);
        self.ffn(&format!("{path}.ffn"), &b.ffn, n);
    }

    fn dual_block(&mut self, path: &str, b: &DualBlock, n: usize, m: usize) {
        self.norm(&format!("{path}.norm_x"), &b.norm_x);
        self.opt_norm(&format!("{path}.sem_norm1"), &b.sem_norm1);
        if let Some(sa) = &b.sem_self_attn {
            self.attention(&format!("{path}.sem_self_attn"), sa, m, m);
        }
        self.norm(&format!("{path}.sem_norm2"), &b.sem_norm2);
        self.attention(&format!("{path}.sem_cross_attn"), &b.sem_cross_attn, m, n);
        self.opt_norm(&format!("{path}.sem_ffn_norm"), &b.sem_ffn_norm);
        if let Some(f) = &b.sem_ffn {
            self.ffn(&format!("{path}.sem_ffn"), f, m);
        }
        self.norm(&format!("{path}.pix_kv_norm"), &b.pix_kv_norm);
        self.attention(&format!("{path}.pix_cross_attn"), &b.pix_cross_attn, n, m);
        self.norm(&format!("{path}.pix_ffn_norm"), &b.pix_ffn_norm);
        self.ffn(&format!("{path}.pix_ffn"), &b.pix_ffn, n);
    }

    fn merge_block(&mut self, path: &str, b: &MergeBlock, n: usize, m: usize) {
        self.norm(&format!("{path}.norm1"), &b.norm1);
        self.attention(&format!("{path}.attn"), &b.attn, n + m, n + m);
        self.norm(&format!("{path}.norm_x"), &b.norm_x);
        self.ffn(&format!("{path}.ffn_x"), &b.ffn_x, n);
        self.norm(&format!("{path}.norm_z"), &b.norm_z);
        self.ffn(&format!("{path}.ffn_z"), &b.ffn_z, m);
    }

    fn patch_embed(&mut self, path: &str, p: &PatchEmbed, out_tokens: usize) {
        self.linear(&format!("{path}.proj"), &p.proj, out_tokens);
        self.norm(&format!("{path}.norm"), &p.norm);
    }

    fn transition(&mut self, path: &str, t: &SemanticTransition, m: usize) {
        self.linear(&format!("{path}.proj"), &t.proj, m);
        self.norm(&format!("{path}.norm"), &t.norm);
    }

    fn summary(&self) -> BlockCost {
        BlockCost {
            params: self.entries.iter().map(|e| e.params).sum(),
            linear_macs: self.linear_macs,
            attention_macs: self.attention_macs,
        }
    }
}

pub fn transformer_block_cost(block: &TransformerBlock, n: usize) -> BlockCost {
    let mut l = Ledger::default();
    l.transformer_block("block", block, n);
    l.summary()
}

pub fn dual_block_cost(block: &DualBlock, n: usize, m: usize) -> BlockCost {
    let mut l = Ledger::default();
    l.dual_block("block", block, n, m);
    l.summary()
}

pub fn merge_block_cost(block: &MergeBlock, n: usize, m: usize) -> BlockCost {
    let mut l = Ledger::default();
    l.merge_block("block", block, n, m);
    l.summary()
}

/// Full parameter and MAC breakdown of `model` evaluated at `resolution`.
pub fn count_macs<T: Real>(model: &DualVit<T>, resolution: usize) -> Result<CostReport> {
    let config = &model.config;
    let geometry = config.geometry(resolution)?;
    let m = config.semantic_tokens;
    let mut l = Ledger::default();
    for (i, stage) in model.stages.iter().enumerate() {
        let s = i + 1;
        let n = geometry[i].pixel_tokens;
        l.patch_embed(&format!("patch_embed{s}"), &model.patch_embeds[i], n);
        if i == 0 {
            if model.pos_embed.is_some() {
                // sized for the configured resolution, whatever resolution is costed
                let n_cfg = config.geometry(config.resolution)?[0].pixel_tokens;
                l.raw("pos_embed", n_cfg * geometry[0].channels);
            }
            l.raw("semantic_queries", m * geometry[0].channels);
        } else {
            l.transition(&format!("semantic_transition{s}"), &model.transitions[i - 1], m);
        }
        match stage {
            Stage::Dual(blocks) => {
                for (j, b) in blocks.iter().enumerate() {
                    l.dual_block(&format!("stage{s}.block{j}"), b, n, m);
                }
            }
            Stage::Merge(blocks) => {
                for (j, b) in blocks.iter().enumerate() {
                    l.merge_block(&format!("stage{s}.block{j}"), b, n, m);
                }
            }
        }
    }
    l.norm("head_norm", &model.head_norm);
    l.linear("head", &model.head, 1);

    let totals = l.summary();
    Ok(CostReport { resolution, params: totals.params, macs: totals.macs(), breakdown: l.entries })
}

/// Breakdown at the model's configured resolution.
pub fn count_params<T: Real>(model: &DualVit<T>) -> CostReport {
    count_macs(model, model.config.resolution).expect("a built model has a valid resolution")
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    cov / var
}
