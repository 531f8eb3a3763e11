use std::collections::BTreeMap;
use std::time::Instant;

use dualvit_core::data::make_synthetic;
use dualvit_core::gradcheck::{check_target, check_target_variant, CheckTarget, GradCheckConfig};
use dualvit_core::train::{train_toy, TrainConfig};
use dualvit_core::{AblationVariant, DualVit, Preset, Tape};

fn toy_config(steps: usize) -> TrainConfig {
    TrainConfig { steps, ..TrainConfig::default() }
}

#[test]
fn tiny_model_overfits_the_synthetic_set() {
    let start = Instant::now();
    let data = make_synthetic(8, 8, 32, 0).unwrap();
    let mut model = DualVit::build(&Preset::Tiny.config()).unwrap();
    let report = train_toy(&mut model, &data, &toy_config(500), |_| {}).unwrap();
    eprintln!("overfit: accuracy {} in {:?}", report.final_accuracy, start.elapsed());
    assert!(report.final_accuracy >= 0.99, "{}", report.final_accuracy);
    assert_eq!(report.steps.len(), 500);
    assert!(report.steps.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn variant_without_semantic_self_attention_also_overfits() {
    let data = make_synthetic(8, 8, 32, 0).unwrap();
    let mut model = DualVit::<f32>::build_variant(&Preset::Tiny.config(), AblationVariant::NoSemanticSelfAttn).unwrap();
    let report = train_toy(&mut model, &data, &toy_config(500), |_| {}).unwrap();
    assert!(report.final_accuracy >= 0.99, "{}", report.final_accuracy);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = make_synthetic(8, 4, 32, 3).unwrap();
    let run = || {
        let mut model = DualVit::build(&Preset::Tiny.config()).unwrap();
        let report = train_toy(&mut model, &data, &toy_config(12), |_| {}).unwrap();
        let losses: Vec<u64> = report.steps.iter().map(|r| r.loss.to_bits()).collect();
        let params: Vec<Vec<u32>> =
            model.params.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        (losses, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_keeps_loss_constant() {
    let data = make_synthetic(8, 2, 32, 1).unwrap();
    let mut model = DualVit::build(&Preset::Tiny.config()).unwrap();
    let before = model.params.clone();
    let config = TrainConfig { steps: 4, batch_size: 16, lr: 0.0, ..TrainConfig::default() };
    let report = train_toy(&mut model, &data, &config, |_| {}).unwrap();
    let first = report.steps[0].loss;
    assert!(report.steps.iter().all(|r| (r.loss - first).abs() < 1e-6));
    for ((_, p), (_, q)) in before.iter().zip(model.params.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn first_step_loss_is_near_log_k() {
    let data = make_synthetic(8, 2, 32, 2).unwrap();
    let mut model = DualVit::build(&Preset::Tiny.config()).unwrap();
    let report = train_toy(&mut model, &data, &toy_config(1), |_| {}).unwrap();
    let expected = 8f64.ln();
    assert!((report.steps[0].loss - expected).abs() <= 0.2, "{}", report.steps[0].loss);
}

#[test]
fn loss_records_follow_the_cosine_schedule() {
    let data = make_synthetic(8, 2, 32, 2).unwrap();
    let mut model = DualVit::build(&Preset::Tiny.config()).unwrap();
    let mut seen = Vec::new();
    let report = train_toy(&mut model, &data, &toy_config(4), |r| seen.push(*r)).unwrap();
    assert_eq!(seen, report.steps);
    let lrs: Vec<f64> = seen.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], 1e-3);
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn every_parameter_group_receives_gradient() {
    let c = Preset::Tiny.config();
    let model = DualVit::build(&c).unwrap();
    let data = make_synthetic(8, 1, 32, 4).unwrap();
    let (images, labels) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut tape = Tape::with_params(&model.params);
    let x = tape.constant(images);
    let logits = model.forward_tape(&mut tape, x).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for (id, p) in model.params.iter() {
        let sq: f64 = grads.param(id).map_or(0.0, |g| g.data().iter().map(|&v| (v as f64).powi(2)).sum());
        *norms.entry(DualVit::<f32>::param_group(&p.name)).or_default() += sq;
    }
    let expected = [
        "head",
        "head_norm",
        "patch_embed1",
        "patch_embed4",
        "pos_embed",
        "semantic_queries",
        "semantic_transition2",
        "semantic_transition4",
        "stage1.joint",
        "stage1.pixel",
        "stage1.semantic",
        "stage2.pixel",
        "stage2.semantic",
        "stage3.joint",
        "stage4.joint",
    ];
    for group in expected {
        let norm = norms.get(group).copied().unwrap_or_else(|| panic!("missing group {group}"));
        assert!(norm > 0.0, "{group} has zero gradient");
    }
    assert!(norms.values().all(|&v| v > 0.0), "{norms:?}");
}

#[test]
fn gradcheck_passes_for_every_target() {
    let start = Instant::now();
    let config = GradCheckConfig::default();
    for target in CheckTarget::ALL {
        let report = check_target(target, &config).unwrap();
        eprintln!("{target}: {} entries, max rel {:.2e}", report.checked, report.max_rel_error);
        assert!(report.checked >= 200, "{target}");
        assert!(report.passed(), "{target}: {:?}", report.failures);
        assert!(report.max_rel_error < 1e-4);
    }
    eprintln!("gradcheck total {:?}", start.elapsed());
}

#[test]
fn gradcheck_passes_for_ablated_dual_blocks() {
    let config = GradCheckConfig { samples: 60, ..GradCheckConfig::default() };
    for variant in AblationVariant::ALL {
        let report = check_target_variant(CheckTarget::Dual, variant, &config).unwrap();
        assert!(report.passed(), "{variant}: {:?}", report.failures);
    }
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    use dualvit_core::gradcheck::gradcheck;
    use dualvit_core::{ParamStore, Tensor};
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap());
    // the tape sees w², but a stop-gradient copy hides one factor
    let report = gradcheck(
        "broken",
        &mut store,
        |tape| {
            let p = tape.param(w)?;
            let frozen = tape.constant(tape.value(p).clone());
            let sq = tape.mul(p, frozen)?;
            tape.sum_all(sq)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.checked, 3);
    assert_eq!(report.failures.len(), 3);
    assert!((report.max_rel_error - 0.5).abs() < 1e-6);
}
