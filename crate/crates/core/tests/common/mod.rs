#![allow(dead_code)]

use std::sync::Arc;

use chameleon::adapters::{wrap_model, AdaptedModel, HeadKind, LoraSpec};
use chameleon::model::{ModelConfig, Projection, TokenBatch, TransformerBackbone};
use chameleon::numerics::{ParamId, ParamStore, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
    }
}

pub fn frozen_backbone(config: ModelConfig, seed: u64) -> Arc<TransformerBackbone> {
    let mut bb = TransformerBackbone::init(config, seed).unwrap();
    bb.freeze();
    Arc::new(bb)
}

pub fn spec(rank: usize, head: HeadKind, targets: &[Projection]) -> LoraSpec {
    LoraSpec {
        targets: targets.to_vec(),
        ..LoraSpec::new(rank, head)
    }
}

pub fn wrapped(bb: &Arc<TransformerBackbone>, spec: &LoraSpec, seed: u64) -> AdaptedModel {
    wrap_model(AdaptedModel::unadapted(Arc::clone(bb)).unwrap(), spec, seed).unwrap()
}

/// Overwrites every trainable tensor with N(0, std²) draws.
pub fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        if t.requires_grad() {
            t.data_mut().iter_mut().for_each(|x| *x = n.sample(&mut rng));
        }
    }
}

/// Random sequences of random length in `1..=max_len`, right-padded.
pub fn random_batch(rng: &mut impl Rng, vocab: usize, batch: usize, max_len: usize) -> TokenBatch {
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(1..vocab)).collect()
        })
        .collect();
    TokenBatch::from_sequences(&seqs)
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn loss(model: &mut AdaptedModel, batch: &TokenBatch, targets: &[usize], ctx: Option<&[f64]>) -> f64 {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, batch, ctx).unwrap();
    let l = tape.cross_entropy(logits, targets, &batch.mask).unwrap();
    tape.scalar(l)
}

/// Analytic gradients of every trainable adapter element against central
/// differences. Returns the worst relative error and the number of checks.
pub fn gradient_check(
    model: &mut AdaptedModel,
    batch: &TokenBatch,
    targets: &[usize],
    ctx: Option<&[f64]>,
    step: f64,
) -> (f64, usize) {
    model.set_training(false);
    model.adapters_mut().zero_grads();
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, batch, ctx).unwrap();
    let l = tape.cross_entropy(logits, targets, &batch.mask).unwrap();
    tape.backward(l).unwrap();
    tape.write_grads(model.adapters_mut()).unwrap();

    let ids: Vec<ParamId> = model.adapters().ids().collect();
    let (mut worst, mut count) = (0.0f64, 0);
    for id in ids {
        if !model.adapters().get(id).requires_grad() {
            continue;
        }
        let analytic = model.adapters().get(id).grad().unwrap().to_vec();
        for j in 0..analytic.len() {
            let orig = model.adapters().get(id).data()[j];
            model.adapters_mut().get_mut(id).data_mut()[j] = orig + step;
            let up = loss(model, batch, targets, ctx);
            model.adapters_mut().get_mut(id).data_mut()[j] = orig - step;
            let down = loss(model, batch, targets, ctx);
            model.adapters_mut().get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[j] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
            count += 1;
        }
    }
    (worst, count)
}
