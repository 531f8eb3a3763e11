mod common;

use common::*;
use dualvit_core::blocks::{
    DualBlock, FeatureMap, MergeBlock, PatchEmbed, SemanticTokens, SemanticTransition, TransformerBlock,
};
use dualvit_core::params::Initializer;
use dualvit_core::{AblationVariant, Error, ParamStore, Preset, Real, Tape, Tensor};
use proptest::prelude::*;

fn dual(dim: usize, heads: usize, variant: AblationVariant, seed: u64) -> (ParamStore<f64>, DualBlock) {
    let mut store = ParamStore::new();
    let b = DualBlock::new(&mut store, &mut Initializer::new(seed), "blk", dim, heads, 4, 2, variant).unwrap();
    randomize(&mut store, 0.3, seed);
    (store, b)
}

fn run_dual<T: Real>(
    store: &ParamStore<T>,
    b: &DualBlock,
    x: &Tensor<T>,
    hw: (usize, usize),
    z: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let fm = FeatureMap::new(&tape, xv, hw.0, hw.1).unwrap();
    let (xo, zo) = b.forward(&mut tape, &fm, &SemanticTokens { tokens: zv }).unwrap();
    (tape.value(xo.tokens).clone(), tape.value(zo.tokens).clone())
}

fn run_merge(
    store: &ParamStore<f64>,
    b: &MergeBlock,
    x: &Tensor<f64>,
    hw: (usize, usize),
    z: &Tensor<f64>,
) -> (Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let fm = FeatureMap::new(&tape, xv, hw.0, hw.1).unwrap();
    let (xo, zo) = b.forward(&mut tape, &fm, &SemanticTokens { tokens: zv }).unwrap();
    (tape.value(xo.tokens).clone(), tape.value(zo.tokens).clone())
}

fn run_transformer(store: &ParamStore<f64>, b: &TransformerBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x.clone());
    let y = b.forward(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

#[test]
fn transformer_block_matches_composition_oracle() {
    let mut store = ParamStore::new();
    let b = TransformerBlock::new(&mut store, &mut Initializer::new(1), "t", 8, 2, 3).unwrap();
    randomize(&mut store, 0.4, 1);
    let x = noise(&[2, 4, 8], 2);
    let out = run_transformer(&store, &b, &x);
    for i in 0..2 {
        let expected = transformer_block(&store, "t", 2, &rows_of(&x, i));
        assert!(max_diff(&rows_of(&out, i), &expected) < 1e-6);
    }
}

#[test]
fn zero_weights_make_every_block_an_identity() {
    let x = noise(&[2, 16, 8], 3);
    let z = noise(&[2, 4, 8], 4);

    let mut store = ParamStore::new();
    let t = TransformerBlock::new(&mut store, &mut Initializer::new(0), "t", 8, 2, 4).unwrap();
    randomize(&mut store, 1.0, 9);
    zero_all(&mut store);
    // gamma is irrelevant once the following projections are zero
    for (id, name) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if name.ends_with(".gamma") {
            *store.value_mut(id) = noise(&[8], 5);
        }
    }
    assert_eq!(run_transformer(&store, &t, &x), x);

    for variant in AblationVariant::ALL {
        let (mut store, d) = dual(8, 2, variant, 6);
        zero_all(&mut store);
        assert_eq!(run_dual(&store, &d, &x, (4, 4), &z), (x.clone(), z.clone()), "{variant}");
    }

    let mut store = ParamStore::new();
    let m = MergeBlock::new(&mut store, &mut Initializer::new(0), "m", 8, 2, 4, 2).unwrap();
    zero_all(&mut store);
    assert_eq!(run_merge(&store, &m, &x, (4, 4), &z), (x.clone(), z.clone()));
}

#[test]
fn single_token_transformer_reduces_to_token_wise_map() {
    let mut store = ParamStore::new();
    let b = TransformerBlock::new(&mut store, &mut Initializer::new(2), "t", 4, 2, 2).unwrap();
    randomize(&mut store, 0.5, 2);
    let x = noise(&[1, 1, 4], 7);
    let xr = rows_of(&x, 0);
    let xn = layernorm(&store, "t.norm1", &xr);
    let attn = linear(&store, "t.attn.o_proj", &linear(&store, "t.attn.v_proj", &xn));
    let x1 = add(&attn, &xr);
    let expected = add(&ffn(&store, "t.ffn", &layernorm(&store, "t.norm2", &x1)), &x1);
    assert!(max_diff(&rows_of(&run_transformer(&store, &b, &x), 0), &expected) < 1e-12);
}

#[test]
fn dual_block_matches_composition_oracle() {
    let (store, b) = dual(8, 2, AblationVariant::Full, 11);
    let x = noise(&[2, 6, 8], 12);
    let z = noise(&[2, 3, 8], 13);
    let (xo, zo) = run_dual(&store, &b, &x, (2, 3), &z);
    for i in 0..2 {
        let (ex, ez) = dual_block(&store, "blk", 2, &rows_of(&x, i), &rows_of(&z, i));
        assert!(max_diff(&rows_of(&xo, i), &ex) < 1e-6);
        assert!(max_diff(&rows_of(&zo, i), &ez) < 1e-6);
    }
}

/// The three ablated semantic pathways, written out independently.
fn ablated_semantic(store: &ParamStore<f64>, variant: AblationVariant, x: &Rows, z: &Rows) -> Rows {
    let xn = layernorm(store, "blk.norm_x", x);
    let self_attn = |norm: &str, z: &Rows| {
        let zn = layernorm(store, norm, z);
        add(&mha(store, "blk.sem_self_attn", 2, &zn, &zn, &zn), z)
    };
    let cross_attn = |norm: &str, z: &Rows| {
        let zn = layernorm(store, norm, z);
        add(&mha(store, "blk.sem_cross_attn", 2, &zn, &xn, &xn), z)
    };
    let sem_ffn = |z: &Rows| add(&ffn(store, "blk.sem_ffn", &layernorm(store, "blk.sem_ffn_norm", z)), z);
    match variant {
        AblationVariant::NoSemanticSelfAttn => sem_ffn(&cross_attn("blk.sem_norm2", z)),
        AblationVariant::NoSemanticFfn => cross_attn("blk.sem_norm2", &self_attn("blk.sem_norm1", z)),
        AblationVariant::CrossFirst => sem_ffn(&self_attn("blk.sem_norm2", &cross_attn("blk.sem_norm1", z))),
        AblationVariant::Full => sem_ffn(&cross_attn("blk.sem_norm2", &self_attn("blk.sem_norm1", z))),
    }
}

#[test]
fn ablated_semantic_pathways_follow_their_definitions() {
    let x = noise(&[1, 4, 8], 21);
    let z = noise(&[1, 2, 8], 22);
    for variant in AblationVariant::ALL {
        let (store, b) = dual(8, 2, variant, 23);
        let (_, zo) = run_dual(&store, &b, &x, (2, 2), &z);
        let expected = ablated_semantic(&store, variant, &rows_of(&x, 0), &rows_of(&z, 0));
        assert!(max_diff(&rows_of(&zo, 0), &expected) < 1e-9, "{variant}");
    }
}

#[test]
fn dual_block_at_small_stage_one_shapes() {
    let mut config = Preset::Small.config();
    config.semantic_tokens = 16;
    let s = &config.stages[0];
    let mut store = ParamStore::<f32>::new();
    let b = DualBlock::new(
        &mut store,
        &mut Initializer::new(0),
        "blk",
        s.channels,
        s.heads,
        s.pixel_ratio,
        s.semantic_ratio,
        AblationVariant::Full,
    )
    .unwrap();
    let x = noise(&[1, 3136, 64], 1).cast::<f32>();
    let z = noise(&[1, 16, 64], 2).cast::<f32>();
    let (xo, zo) = run_dual(&store, &b, &x, (56, 56), &z);
    assert_eq!(xo.shape(), &[1, 3136, 64]);
    assert_eq!(zo.shape(), &[1, 16, 64]);
    assert!(xo.is_finite() && zo.is_finite());
}

#[test]
fn single_semantic_token_gives_every_pixel_the_same_update() {
    let (mut store, b) = dual(8, 2, AblationVariant::Full, 31);
    for (id, name) in store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        if name.starts_with("blk.pix_ffn.") {
            let zeroed = store.value(id).map(|_| 0.0);
            *store.value_mut(id) = zeroed;
        }
    }
    let x = noise(&[1, 9, 8], 32);
    let z = noise(&[1, 1, 8], 33);
    let (xo, _) = run_dual(&store, &b, &x, (3, 3), &z);
    let updates: Vec<Vec<f64>> = xo
        .data()
        .chunks(8)
        .zip(x.data().chunks(8))
        .map(|(o, i)| o.iter().zip(i).map(|(a, b)| a - b).collect())
        .collect();
    assert!(updates.iter().any(|u| u.iter().any(|v| v.abs() > 1e-6)));
    for u in &updates[1..] {
        assert!(max_diff(&vec![u.clone()], &vec![updates[0].clone()]) < 1e-12);
    }
}

fn permute_tokens<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let (n, d) = (t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(t.numel());
    for b in 0..t.shape()[0] {
        for &p in perm {
            let start = (b * n + p) * d;
            data.extend_from_slice(&t.data()[start..start + d]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dual_block_pixel_permutation_symmetry(
        perm in Just((0..16).collect::<Vec<usize>>()).prop_shuffle(),
        seed in 0u64..500,
    ) {
        let (store, b) = dual(16, 2, AblationVariant::Full, seed);
        let store = store.cast::<f32>();
        let x = noise(&[2, 16, 16], seed + 1).cast::<f32>();
        let z = noise(&[2, 4, 16], seed + 2).cast::<f32>();
        let (xo, zo) = run_dual(&store, &b, &x, (4, 4), &z);
        let (xp, zp) = run_dual(&store, &b, &permute_tokens(&x, &perm), (4, 4), &z);
        prop_assert!(zp.max_abs_diff(&zo).unwrap() <= 1e-5);
        prop_assert!(xp.max_abs_diff(&permute_tokens(&xo, &perm)).unwrap() <= 1e-5);
    }
}

#[test]
fn dual_block_error_kinds() {
    let (store, b) = dual(8, 2, AblationVariant::Full, 1);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(noise(&[1, 4, 8], 1));
    let fm = FeatureMap::new(&tape, x, 2, 2).unwrap();
    let narrow = tape.constant(noise(&[1, 2, 4], 2));
    let err = b.forward(&mut tape, &fm, &SemanticTokens { tokens: narrow }).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let many = tape.constant(noise(&[1, 5, 8], 3));
    let err = b.forward(&mut tape, &fm, &SemanticTokens { tokens: many }).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn merge_block_matches_composition_oracle() {
    let mut store = ParamStore::new();
    let b = MergeBlock::new(&mut store, &mut Initializer::new(41), "m", 8, 4, 4, 2).unwrap();
    randomize(&mut store, 0.3, 41);
    let x = noise(&[2, 4, 8], 42);
    let z = noise(&[2, 3, 8], 43);
    let (xo, zo) = run_merge(&store, &b, &x, (2, 2), &z);
    for i in 0..2 {
        let (ex, ez) = merge_block(&store, "m", 4, &rows_of(&x, i), &rows_of(&z, i));
        assert!(max_diff(&rows_of(&xo, i), &ex) < 1e-6);
        assert!(max_diff(&rows_of(&zo, i), &ez) < 1e-6);
    }
}

#[test]
fn merge_with_tied_ffns_is_a_transformer_on_the_concatenation() {
    let mut tstore = ParamStore::new();
    let t = TransformerBlock::new(&mut tstore, &mut Initializer::new(51), "t", 12, 3, 3).unwrap();
    randomize(&mut tstore, 0.3, 51);
    let mut mstore = ParamStore::new();
    let m = MergeBlock::new(&mut mstore, &mut Initializer::new(52), "m", 12, 3, 3, 3).unwrap();
    let renames = [
        ("m.norm1", "t.norm1"),
        ("m.attn", "t.attn"),
        ("m.norm_x", "t.norm2"),
        ("m.norm_z", "t.norm2"),
        ("m.ffn_x", "t.ffn"),
        ("m.ffn_z", "t.ffn"),
    ];
    for (id, name) in mstore.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
        let (from, to) = renames.iter().find(|(f, _)| name.starts_with(f)).unwrap();
        *mstore.value_mut(id) = param(&tstore, &name.replacen(from, to, 1));
    }
    let x = noise(&[2, 9, 12], 53);
    let z = noise(&[2, 4, 12], 54);
    let (xo, zo) = run_merge(&mstore, &m, &x, (3, 3), &z);

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let zv = tape.constant(z.clone());
    let joint = tape.concat(&[xv, zv], 1).unwrap();
    let joint = tape.value(joint).clone();
    let expected = run_transformer(&tstore, &t, &joint);
    let mut tape = Tape::new();
    let ev = tape.constant(expected);
    let parts = tape.split(ev, 1, &[9, 4]).unwrap();
    assert!(xo.max_abs_diff(tape.value(parts[0])).unwrap() <= 1e-6);
    assert!(zo.max_abs_diff(tape.value(parts[1])).unwrap() <= 1e-6);
}

#[test]
fn merge_block_keeps_small_stage_three_token_counts() {
    let s = &Preset::Small.config().stages[2];
    let mut store = ParamStore::<f32>::new();
    let b = MergeBlock::new(
        &mut store,
        &mut Initializer::new(0),
        "m",
        s.channels,
        s.heads,
        s.pixel_ratio,
        s.semantic_ratio,
    )
    .unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(noise(&[1, 196, 320], 1).cast());
    let z = tape.constant(noise(&[1, 16, 320], 2).cast());
    let fm = FeatureMap::new(&tape, x, 14, 14).unwrap();
    let (xo, zo) = b.forward(&mut tape, &fm, &SemanticTokens { tokens: z }).unwrap();
    assert_eq!(tape.shape(xo.tokens), &[1, 196, 320]);
    assert_eq!(tape.shape(zo.tokens), &[1, 16, 320]);
}

#[test]
fn patch_embed_flattens_patches_row_column_channel() {
    // channel 0: 8x8 checkerboard, channel 1: position code
    let (h, w, p) = (8, 8, 2);
    let value = |i: usize, j: usize, c: usize| if c == 0 { ((i + j) % 2) as f64 } else { (i * w + j) as f64 / 64.0 };
    let mut data = Vec::new();
    for i in 0..h {
        for j in 0..w {
            data.extend([value(i, j, 0), value(i, j, 1)]);
        }
    }
    let x = Tensor::new(vec![1, h * w, 2], data).unwrap();

    let mut store = ParamStore::<f64>::new();
    let pe = PatchEmbed::new(&mut store, &mut Initializer::new(0), "pe", p, 2, 8).unwrap();
    let wid = store.find("pe.proj.weight").unwrap();
    *store.value_mut(wid) = Tensor::new(vec![8, 8], (0..64).map(|k| f64::from(k / 8 == k % 8)).collect()).unwrap();

    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x);
    let fm = FeatureMap::new(&tape, xv, h, w).unwrap();
    let out = pe.forward(&mut tape, &fm).unwrap();
    assert_eq!((out.height, out.width), (4, 4));

    let mut patches = Vec::new();
    for gi in 0..4 {
        for gj in 0..4 {
            let mut flat = Vec::new();
            for di in 0..p {
                for dj in 0..p {
                    for c in 0..2 {
                        flat.push(value(gi * p + di, gj * p + dj, c));
                    }
                }
            }
            patches.push(flat);
        }
    }
    let expected = layernorm(&store, "pe.norm", &patches);
    assert!(max_diff(&rows_of(tape.value(out.tokens), 0), &expected) < 1e-12);
}

#[test]
fn unit_patch_is_token_wise_linear_then_norm() {
    let mut store = ParamStore::<f64>::new();
    let pe = PatchEmbed::new(&mut store, &mut Initializer::new(3), "pe", 1, 3, 6).unwrap();
    randomize(&mut store, 0.5, 3);
    let x = noise(&[1, 12, 3], 4);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let out = {
        let fm = FeatureMap::new(&tape, xv, 3, 4).unwrap();
        pe.forward(&mut tape, &fm)
    }
    .unwrap();
    let expected = layernorm(&store, "pe.norm", &linear(&store, "pe.proj", &rows_of(&x, 0)));
    assert!(max_diff(&rows_of(tape.value(out.tokens), 0), &expected) < 1e-12);
}

#[test]
fn patch_embed_geometry_and_divisibility() {
    let mut store = ParamStore::<f32>::new();
    let pe = PatchEmbed::new(&mut store, &mut Initializer::new(0), "pe", 4, 3, 64).unwrap();
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(Tensor::zeros([1, 224 * 224, 3]));
    let out = {
        let fm = FeatureMap::new(&tape, x, 224, 224).unwrap();
        pe.forward(&mut tape, &fm)
    }
    .unwrap();
    assert_eq!(tape.shape(out.tokens), &[1, 3136, 64]);

    let x = tape.constant(Tensor::zeros([1, 10 * 8, 3]));
    let err = {
        let fm = FeatureMap::new(&tape, x, 10, 8).unwrap();
        pe.forward(&mut tape, &fm)
    }
    .unwrap_err();
    assert!(matches!(err, Error::Input(_)));
    let msg = err.to_string();
    assert!(msg.contains("10x8") && msg.contains('4'), "{msg}");
}

#[test]
fn semantic_transition_standardizes_and_keeps_count() {
    let mut store = ParamStore::<f64>::new();
    let t = SemanticTransition::new(&mut store, &mut Initializer::new(0), "st", 5, 5);
    let wid = store.find("st.proj.weight").unwrap();
    *store.value_mut(wid) = Tensor::new(vec![5, 5], (0..25).map(|k| f64::from(k / 5 == k % 5)).collect()).unwrap();
    let z = noise(&[1, 16, 5], 9);
    let mut tape = Tape::with_params(&store);
    let zv = tape.constant(z.clone());
    let out = t.forward(&mut tape, &SemanticTokens { tokens: zv }).unwrap();
    assert_eq!(out.count(&tape), 16);
    for row in rows_of(tape.value(out.tokens), 0) {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
    }

    let mut store = ParamStore::<f32>::new();
    let t = SemanticTransition::new(&mut store, &mut Initializer::new(0), "st", 64, 128);
    let mut tape = Tape::with_params(&store);
    let zv = tape.constant(Tensor::zeros([1, 16, 64]));
    let out = t.forward(&mut tape, &SemanticTokens { tokens: zv }).unwrap();
    assert_eq!(tape.shape(out.tokens), &[1, 16, 128]);
}

#[test]
fn gradients_reach_both_pathways() {
    let (store, b) = dual(8, 2, AblationVariant::Full, 61);
    let rx = noise(&[2, 9, 8], 62);
    let rz = noise(&[2, 3, 8], 63);
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(noise(&[2, 9, 8], 64));
    let z = tape.constant(noise(&[2, 3, 8], 65));
    let fm = FeatureMap::new(&tape, x, 3, 3).unwrap();
    let (xo, zo) = b.forward(&mut tape, &fm, &SemanticTokens { tokens: z }).unwrap();
    let wx = tape.constant(rx);
    let wz = tape.constant(rz);
    let px = tape.mul(xo.tokens, wx).unwrap();
    let pz = tape.mul(zo.tokens, wz).unwrap();
    let lx = tape.sum_all(px).unwrap();
    let lz = tape.sum_all(pz).unwrap();
    let loss = tape.add(lx, lz).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (id, p) in store.iter() {
        let norm: f64 = grads.param(id).map_or(0.0, |g| g.data().iter().map(|v| v * v).sum::<f64>().sqrt());
        if p.name.ends_with("k_proj.bias") {
            // a shared shift of every key leaves each softmax row unchanged
            assert!(norm < 1e-10, "{} {norm}", p.name);
        } else {
            assert!(norm > 1e-8, "{} has no gradient", p.name);
        }
    }
}
