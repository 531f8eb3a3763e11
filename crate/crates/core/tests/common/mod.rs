//! Scalar-loop reference implementations used as oracles.
#![allow(dead_code)]

use dualvit_core::{ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    store.value(id).clone()
}

pub fn rows_of(t: &Tensor<f64>, batch: usize) -> Rows {
    let s = t.shape();
    let d = s[s.len() - 1];
    let n = s[s.len() - 2];
    let start = batch * n * d;
    t.data()[start..start + n * d].chunks(d).map(|r| r.to_vec()).collect()
}

pub fn linear(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout).map(|j| b.data()[j] + (0..din).map(|i| row[i] * w.data()[i * dout + j]).sum::<f64>()).collect()
        })
        .collect()
}

pub fn layernorm(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + 1e-6).sqrt();
            row.iter().enumerate().map(|(i, v)| g.data()[i] * (v - mean) * rstd + b.data()[i]).collect()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
}

pub fn ffn(store: &ParamStore<f64>, name: &str, x: &Rows) -> Rows {
    let h = linear(store, &format!("{name}.expand"), x);
    let h: Rows = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(store, &format!("{name}.contract"), &h)
}

/// Materializes every head's full weight matrix.
pub fn attention_weights(store: &ParamStore<f64>, name: &str, heads: usize, q: &Rows, k: &Rows) -> Vec<Rows> {
    let qp = linear(store, &format!("{name}.q_proj"), q);
    let kp = linear(store, &format!("{name}.k_proj"), k);
    let d = qp[0].len();
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            qp.iter()
                .map(|qr| {
                    let scores: Vec<f64> = kp
                        .iter()
                        .map(|kr| (0..dh).map(|c| qr[h * dh + c] * kr[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.into_iter().map(|v| v / z).collect()
                })
                .collect()
        })
        .collect()
}

pub fn mha(store: &ParamStore<f64>, name: &str, heads: usize, q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let weights = attention_weights(store, name, heads, q, k);
    let vp = linear(store, &format!("{name}.v_proj"), v);
    let d = vp[0].len();
    let dh = d / heads;
    let mut mixed = vec![vec![0.0; d]; q.len()];
    for (h, w) in weights.iter().enumerate() {
        for (i, row) in w.iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                for c in 0..dh {
                    mixed[i][h * dh + c] += a * vp[j][h * dh + c];
                }
            }
        }
    }
    linear(store, &format!("{name}.o_proj"), &mixed)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

pub fn transformer_block(store: &ParamStore<f64>, name: &str, heads: usize, x: &Rows) -> Rows {
    let xn = layernorm(store, &format!("{name}.norm1"), x);
    let x1 = add(&mha(store, &format!("{name}.attn"), heads, &xn, &xn, &xn), x);
    let h = layernorm(store, &format!("{name}.norm2"), &x1);
    add(&ffn(store, &format!("{name}.ffn"), &h), &x1)
}

/// Full-variant dual block written out step by step.
pub fn dual_block(store: &ParamStore<f64>, name: &str, heads: usize, x: &Rows, z: &Rows) -> (Rows, Rows) {
    let xn = layernorm(store, &format!("{name}.norm_x"), x);
    let zn = layernorm(store, &format!("{name}.sem_norm1"), z);
    let z1 = add(&mha(store, &format!("{name}.sem_self_attn"), heads, &zn, &zn, &zn), z);
    let zn = layernorm(store, &format!("{name}.sem_norm2"), &z1);
    let zc = add(&mha(store, &format!("{name}.sem_cross_attn"), heads, &zn, &xn, &xn), &z1);
    let h = layernorm(store, &format!("{name}.sem_ffn_norm"), &zc);
    let z_next = add(&ffn(store, &format!("{name}.sem_ffn"), &h), &zc);
    let zk = layernorm(store, &format!("{name}.pix_kv_norm"), &z_next);
    let x1 = add(&mha(store, &format!("{name}.pix_cross_attn"), heads, &xn, &zk, &zk), x);
    let h = layernorm(store, &format!("{name}.pix_ffn_norm"), &x1);
    let x_next = add(&ffn(store, &format!("{name}.pix_ffn"), &h), &x1);
    (x_next, z_next)
}

pub fn merge_block(store: &ParamStore<f64>, name: &str, heads: usize, x: &Rows, z: &Rows) -> (Rows, Rows) {
    let y: Rows = x.iter().chain(z).cloned().collect();
    let yn = layernorm(store, &format!("{name}.norm1"), &y);
    let y1 = add(&mha(store, &format!("{name}.attn"), heads, &yn, &yn, &yn), &y);
    let (x1, z1) = y1.split_at(x.len());
    let (x1, z1) = (x1.to_vec(), z1.to_vec());
    let hx = layernorm(store, &format!("{name}.norm_x"), &x1);
    let hz = layernorm(store, &format!("{name}.norm_z"), &z1);
    (add(&ffn(store, &format!("{name}.ffn_x"), &hx), &x1), add(&ffn(store, &format!("{name}.ffn_z"), &hz), &z1))
}

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Overwrites every parameter with noise of the given scale so biases and
/// norm affines are generic too.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        let is_gamma = store.get(id).name.ends_with(".gamma");
        let mut t = noise(&shape, seed + k as u64).map(|v| v * scale);
        if is_gamma {
            t = t.map(|v| 1.0 + v);
        }
        *store.value_mut(id) = t;
    }
}

pub fn zero_all(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let is_gamma = store.get(id).name.ends_with(".gamma");
        let t = store.value(id).map(|_| if is_gamma { 1.0 } else { 0.0 });
        *store.value_mut(id) = t;
    }
}
