mod common;

use std::sync::Arc;

use chameleon::adapters::{Head, HeadKind};
use chameleon::model::{Projection, TokenBatch, TransformerBackbone};
use chameleon::numerics::{Tape, Tensor};
use chameleon::training::{AdamW, AdamWConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn static_lora_gradients_match_finite_differences() {
    let bb = frozen_backbone(tiny_config(), 3);
    let mut model = wrapped(&bb, &spec(2, HeadKind::Lora, &Projection::ALL), 4);
    randomize(model.adapters_mut(), 0.3, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&mut rng, 20, 3, 6);
    let targets: Vec<usize> = (0..batch.ids.len()).map(|_| rng.gen_range(0..20)).collect();
    let (worst, n) = gradient_check(&mut model, &batch, &targets, None, 1e-5);
    assert!(n > 0);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

/// Hypernetwork head against hidden·W + (α/r)·hidden·Aᵀ·Bᵀ written out
/// with plain loops.
#[test]
fn hyper_head_matches_explicit_composition() {
    let bb = frozen_backbone(tiny_config(), 7);
    let mut model = wrapped(&bb, &spec(3, HeadKind::Hyper, &[]), 8);
    randomize(model.adapters_mut(), 0.2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let batch = random_batch(&mut rng, 20, 4, 7);
    let ctx = random_unit(&mut rng, 16);

    let got = model.logits(&batch, Some(&ctx)).unwrap();
    let hidden = bb.hidden_states(&batch).unwrap();
    let w = bb.store().get(bb.lm_head());
    let a = model.dynamic_a(&ctx).unwrap().unwrap();
    let Head::Hyper(head) = model.head() else { panic!() };
    let b = model.adapters().get(head.b);
    let scale = head.alpha / head.rank as f64;
    let (d, v, r) = (16, 20, 3);
    let rows = batch.batch * batch.seq;
    for t in 0..rows {
        let h = &hidden.data()[t * d..(t + 1) * d];
        let ha: Vec<f64> = (0..r).map(|k| (0..d).map(|i| h[i] * a.at(k, i)).sum()).collect();
        for j in 0..v {
            let base: f64 = (0..d).map(|i| h[i] * w.at(i, j)).sum();
            let delta: f64 = (0..r).map(|k| ha[k] * b.at(j, k)).sum();
            let want = base + scale * delta;
            assert!((got.data()[t * v + j] - want).abs() < 1e-10);
        }
    }
}

/// A LoRA-wrapped projection behaves like a backbone whose weight was
/// replaced by W + (α/r)·Aᵀ·Bᵀ.
#[test]
fn layer_lora_equals_merged_weight() {
    let bb = frozen_backbone(tiny_config(), 11);
    let mut model = wrapped(&bb, &spec(2, HeadKind::Frozen, &[Projection::MlpUp, Projection::Value]), 12);
    randomize(model.adapters_mut(), 0.2, 13);

    let mut tensors: Vec<(String, Tensor)> = bb.store().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    for (_, lora) in model.layer_loras() {
        let a = model.adapters().get(lora.a);
        let b = model.adapters().get(lora.b);
        let name = bb.store().name(lora.base);
        let w = &mut tensors.iter_mut().find(|(n, _)| n == name).unwrap().1;
        for i in 0..lora.in_dim {
            for o in 0..lora.out_dim {
                let s: f64 = (0..lora.rank).map(|k| a.at(k, i) * b.at(o, k)).sum();
                w.data_mut()[i * lora.out_dim + o] += lora.scale() * s;
            }
        }
    }
    let merged = TransformerBackbone::from_tensors(*bb.config(), tensors).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let batch = random_batch(&mut rng, 20, 3, 8);
    let got = model.logits(&batch, None).unwrap();
    let want = merged.logits(&batch).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-10);
}

/// One optimizer step moves every adapter tensor and no backbone tensor.
#[test]
fn gradients_reach_every_adapter() {
    let bb = frozen_backbone(tiny_config(), 15);
    let before = bb.checksum();
    let mut model = wrapped(&bb, &spec(2, HeadKind::Hyper, &Projection::ALL), 16);
    // with B = 0 the A factors get no gradient on the first step
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch = random_batch(&mut rng, 20, 4, 6);
    let targets: Vec<usize> = (0..batch.ids.len()).map(|_| rng.gen_range(0..20)).collect();
    let ctx = random_unit(&mut rng, 16);
    let snapshot = |m: &chameleon::adapters::AdaptedModel| -> Vec<Tensor> {
        m.adapters().iter().map(|(_, _, t)| t.clone()).collect()
    };
    let start = snapshot(&model);
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..2 {
        model.set_training(true);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch, Some(&ctx)).unwrap();
        let l = tape.cross_entropy(logits, &targets, &batch.mask).unwrap();
        tape.backward(l).unwrap();
        model.adapters_mut().zero_grads();
        tape.write_grads(model.adapters_mut()).unwrap();
        opt.step(model.adapters_mut()).unwrap();
    }
    for ((_, name, t), s) in model.adapters().iter().zip(&start) {
        assert!(t.max_abs_diff(s) > 0.0, "{name} did not move");
    }
    assert_eq!(bb.checksum(), before);
    assert_eq!(Arc::strong_count(&bb), 2);
}

#[test]
fn hyper_head_without_context_is_an_error() {
    let bb = frozen_backbone(tiny_config(), 18);
    let mut model = wrapped(&bb, &spec(2, HeadKind::Hyper, &[]), 19);
    let batch = TokenBatch::from_sequences(&[vec![1, 2, 3]]);
    assert!(model.logits(&batch, None).is_err());
    assert!(model.logits(&batch, Some(&[0.0; 15])).is_err());
}
