//! Central finite-difference checks of tape gradients in `f64`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{DualBlock, FeatureMap, MergeBlock, SemanticTokens, TransformerBlock};
use crate::error::{Error, Result};
use crate::model::{AblationVariant, DualVit, Preset};
use crate::params::{Initializer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Number of scalar parameters sampled (all of them if fewer exist).
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, samples: 200, tolerance: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub target: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Entries above tolerance, worst first.
    pub failures: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Key-projection biases shift every score in a softmax row by the same
/// amount, so their exact gradient is zero and a finite difference only
/// measures rounding noise. They are left out of the sample.
fn is_shift_invariant(name: &str) -> bool {
    name.ends_with("k_proj.bias")
}

/// Compares the tape gradient of `loss` with central differences on a random
/// subsample of the parameters in `store`.
pub fn gradcheck<F>(
    target: &str,
    store: &mut ParamStore<f64>,
    loss: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape)?;
        let grads = tape.backward(l)?;
        let mut per_param: Vec<Option<Tensor<f64>>> = (0..store.len()).map(|_| None).collect();
        for (id, g) in grads.params() {
            per_param[id.index()] = Some(g.clone());
        }
        per_param
    };

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (id, p) in store.iter() {
        if p.requires_grad && !is_shift_invariant(&p.name) {
            candidates.extend((0..p.value.numel()).map(|j| (id.index(), j)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chosen: Vec<(usize, usize)> = if candidates.len() <= config.samples {
        candidates
    } else {
        rand::seq::index::sample(&mut rng, candidates.len(), config.samples)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape)?;
        tape.value(l).item()
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for &(pi, j) in &chosen {
        let id = ids[pi];
        let original = store.value(id).data()[j];
        store.value_mut(id).data_mut()[j] = original + config.step;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[j] = original - config.step;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[j] = original;

        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[j]);
        let rel = relative_error(a, numeric);
        max_rel = max_rel.max(rel);
        if rel > config.tolerance {
            failures.push(EntryCheck {
                name: store.get(id).name.clone(),
                index: j,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    failures.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradCheckReport {
        target: target.into(),
        checked: chosen.len(),
        max_rel_error: max_rel,
        tolerance: config.tolerance,
        failures,
    })
}

/// Which component a canned gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckTarget {
    Dual,
    Merge,
    Transformer,
    Model,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] =
        [CheckTarget::Dual, CheckTarget::Merge, CheckTarget::Transformer, CheckTarget::Model];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Dual => "dual",
            CheckTarget::Merge => "merge",
            CheckTarget::Transformer => "transformer",
            CheckTarget::Model => "model",
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(CheckTarget::Dual),
            "merge" => Ok(CheckTarget::Merge),
            "transformer" => Ok(CheckTarget::Transformer),
            "model" => Ok(CheckTarget::Model),
            other => Err(Error::Config(format!(
                "unknown check target {other:?} (expected dual, merge, transformer or model)"
            ))),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Moves every parameter to a generic point: weights uniform in
/// `±sqrt(3/fan_in)` (unit-variance outputs), everything else within `±0.5`
/// (gammas around 1).
///
/// At the std-0.02 initialization the deep attention logits are nearly flat,
/// many gradients are ~1e-8 and central differences drown in rounding.
pub fn generic_point(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let value = store.value_mut(id);
        let (scale, offset) = match value.shape() {
            [fan_in, _] if name.ends_with(".weight") => ((3.0 / *fan_in as f64).sqrt(), 0.0),
            _ if name.ends_with(".gamma") => (0.5, 1.0),
            _ => (0.5, 0.0),
        };
        for v in value.data_mut() {
            *v = offset + scale * rng.random_range(-1.0..1.0);
        }
    }
}

/// `Σ out ⊙ weights` with fixed random weights.
fn probe(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

/// Runs the finite-difference check on a tiny-model-sized instance of `target`.
///
/// Blocks use the tiny preset's stage shapes (batch 2) with a random linear
/// probe of their outputs as the loss; the model check uses cross-entropy on
/// random images and labels. Parameters are moved to a [`generic_point`]
/// first.
pub fn check_target(target: CheckTarget, config: &GradCheckConfig) -> Result<GradCheckReport> {
    check_target_variant(target, AblationVariant::Full, config)
}

pub fn check_target_variant(
    target: CheckTarget,
    variant: AblationVariant,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let tiny = Preset::Tiny.config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut init = Initializer::new(config.seed);
    let mut store = ParamStore::<f64>::new();
    let batch = 2;
    let m = tiny.semantic_tokens;
    let name = target.name();
    match target {
        CheckTarget::Dual => {
            let s = &tiny.stages[0];
            let (h, w) = (4, 4);
            let block = DualBlock::new(
                &mut store,
                &mut init,
                "dual",
                s.channels,
                s.heads,
                s.pixel_ratio,
                s.semantic_ratio,
                variant,
            )?;
            let x = uniform(&mut rng, &[batch, h * w, s.channels]);
            let z = uniform(&mut rng, &[batch, m, s.channels]);
            let rx = uniform(&mut rng, &[batch, h * w, s.channels]);
            let rz = uniform(&mut rng, &[batch, m, s.channels]);
            generic_point(&mut store, config.seed);
            gradcheck(
                name,
                &mut store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let zv = tape.constant(z.clone());
                    let fm = FeatureMap::new(tape, xv, h, w)?;
                    let (xo, zo) = block.forward(tape, &fm, &SemanticTokens { tokens: zv })?;
                    let a = probe(tape, xo.tokens, &rx)?;
                    let b = probe(tape, zo.tokens, &rz)?;
                    tape.add(a, b)
                },
                config,
            )
        }
        CheckTarget::Merge => {
            let s = &tiny.stages[2];
            let (h, w) = (2, 2);
            let block =
                MergeBlock::new(&mut store, &mut init, "merge", s.channels, s.heads, s.pixel_ratio, s.semantic_ratio)?;
            let x = uniform(&mut rng, &[batch, h * w, s.channels]);
            let z = uniform(&mut rng, &[batch, m, s.channels]);
            let rx = uniform(&mut rng, &[batch, h * w, s.channels]);
            let rz = uniform(&mut rng, &[batch, m, s.channels]);
            generic_point(&mut store, config.seed);
            gradcheck(
                name,
                &mut store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let zv = tape.constant(z.clone());
                    let fm = FeatureMap::new(tape, xv, h, w)?;
                    let (xo, zo) = block.forward(tape, &fm, &SemanticTokens { tokens: zv })?;
                    let a = probe(tape, xo.tokens, &rx)?;
                    let b = probe(tape, zo.tokens, &rz)?;
                    tape.add(a, b)
                },
                config,
            )
        }
        CheckTarget::Transformer => {
            let s = &tiny.stages[0];
            let n = 16;
            let block =
                TransformerBlock::new(&mut store, &mut init, "transformer", s.channels, s.heads, s.pixel_ratio)?;
            let x = uniform(&mut rng, &[batch, n, s.channels]);
            let r = uniform(&mut rng, &[batch, n, s.channels]);
            generic_point(&mut store, config.seed);
            gradcheck(
                name,
                &mut store,
                |tape| {
                    let xv = tape.constant(x.clone());
                    let out = block.forward(tape, xv)?;
                    probe(tape, out, &r)
                },
                config,
            )
        }
        CheckTarget::Model => {
            let cfg = crate::model::ModelConfig { seed: config.seed, ..tiny };
            let mut model = DualVit::<f64>::build_variant(&cfg, variant)?;
            let res = cfg.resolution;
            let images = uniform(&mut rng, &[batch, res, res, 3]).map(|v| 0.5 + 0.5 * v);
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
            generic_point(&mut model.params, config.seed);
            let structure = model.clone();
            gradcheck(
                name,
                &mut model.params,
                |tape| {
                    let x = tape.constant(images.clone());
                    let logits = structure.forward_tape(tape, x)?;
                    tape.cross_entropy(logits, &labels)
                },
                config,
            )
        }
    }
}
