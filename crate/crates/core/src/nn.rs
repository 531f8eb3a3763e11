//! Parameterized layers: linear, layer norm, multi-head attention, feed-forward.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore, INIT_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Layer-norm epsilon used by every normalization site.
pub const LN_EPS: f64 = 1e-6;

/// `x · W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), init.trunc_normal(&[d_in, d_out], INIT_STD));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::ones([dim]));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros([dim]));
        Self { gamma, beta, dim }
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        tape.layernorm(x, g, b, T::lit(LN_EPS))
    }
}

/// Multi-head attention with square `d × d` projections (all with bias).
///
/// Heads are formed by splitting the projected channels into `heads` groups of
/// `head_dim`. Queries may come from a different token set than keys/values,
/// so the same layer serves self- and cross-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub o_proj: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: channel dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q_proj: Linear::new(store, init, &format!("{name}.q_proj"), dim, dim),
            k_proj: Linear::new(store, init, &format!("{name}.k_proj"), dim, dim),
            v_proj: Linear::new(store, init, &format!("{name}.v_proj"), dim, dim),
            o_proj: Linear::new(store, init, &format!("{name}.o_proj"), dim, dim),
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn num_params(&self) -> usize {
        [&self.q_proj, &self.k_proj, &self.v_proj, &self.o_proj].iter().map(|l| l.num_params()).sum()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        self.forward_with_weights(tape, q, k, v).map(|(out, _)| out)
    }

    /// Like [`Attention::forward`], also returning the `[B, heads, n_q, n_kv]`
    /// attention weights.
    pub fn forward_with_weights<T: Real>(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let d = self.dim();
        let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
        for s in [&qs, &ks, &vs] {
            if s.len() < 2 || s[s.len() - 1] != d {
                return Err(Error::shape("attention", &[d], s));
            }
        }
        if ks != vs {
            return Err(Error::shape("attention key/value", &ks, &vs));
        }
        let rank = qs.len();
        if ks.len() != rank || qs[..rank - 2] != ks[..rank - 2] {
            return Err(Error::shape("attention query/key", &qs, &ks));
        }
        let lead: Vec<usize> = qs[..rank - 2].to_vec();
        let batch: usize = lead.iter().product();
        let (nq, nkv) = (qs[rank - 2], ks[rank - 2]);
        let (h, dh) = (self.heads, self.head_dim);

        let heads_of = |tape: &mut Tape<T>, proj: &Linear, x: Var, n: usize| -> Result<Var> {
            let p = proj.forward(tape, x)?;
            let p = tape.reshape(p, &[batch, n, h, dh])?;
            tape.permute(p, &[0, 2, 1, 3])
        };
        let qh = heads_of(tape, &self.q_proj, q, nq)?;
        let kh = heads_of(tape, &self.k_proj, k, nkv)?;
        let vh = heads_of(tape, &self.v_proj, v, nkv)?;

        let kt = tape.transpose_last2(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, T::one() / T::lit(dh as f64).sqrt())?;
        let weights = tape.softmax_lastdim(scores)?;
        let mixed = tape.matmul(weights, vh)?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mut out_shape = lead;
        out_shape.extend_from_slice(&[nq, d]);
        let mixed = tape.reshape(mixed, &out_shape)?;
        let out = self.o_proj.forward(tape, mixed)?;
        Ok((out, weights))
    }
}

/// Token-wise two-layer MLP: `contract(gelu(expand(x)))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
    pub ratio: usize,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config(format!("{name}: expansion ratio must be positive")));
        }
        Ok(Self {
            expand: Linear::new(store, init, &format!("{name}.expand"), dim, ratio * dim),
            contract: Linear::new(store, init, &format!("{name}.contract"), ratio * dim, dim),
            ratio,
        })
    }

    pub fn num_params(&self) -> usize {
        self.expand.num_params() + self.contract.num_params()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let d = self.expand.d_in;
        if tape.shape(x).last() != Some(&d) {
            return Err(Error::shape("feed_forward", &[d], tape.shape(x)));
        }
        let hidden = self.expand.forward(tape, x)?;
        let hidden = tape.gelu(hidden)?;
        self.contract.forward(tape, hidden)
    }
}
