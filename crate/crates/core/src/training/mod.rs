//! Training and evaluation for the three adaptation regimes.

mod experiment;
mod metrics;
mod optim;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{batch_context, wrap_model, AdaptedModel, HeadKind, LoraSpec};
use crate::clustering::{build_schedule, choose_k, kmeans, ClusterPlan, DropPolicy, KMeansOptions};
use crate::data::{embed_examples, Corpus, EmbeddingOptions, Split};
use crate::error::{Error, Result};
use crate::model::{Projection, TokenBatch, TransformerBackbone, Unadapted};
use crate::numerics::{ParamStore, Tape, Var};

pub use experiment::{
    build_corpus, cluster_report, compare_regimes, prepare_splits, pretrain_backbone, pretrain_corpus,
    run_regime_on_corpus, ClusterReport, ComparisonReport, SeedOutcome,
};
pub use metrics::{
    comparison_csv, epoch_csv, ComparisonRow, EpochRecord, RunMetrics, COMPARISON_CSV_HEADER, EPOCH_CSV_HEADER,
};
pub use optim::{adamw_update, clip_grad_norm, AdamW, AdamWConfig, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Unadapted,
    StaticLora,
    Chameleon,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Unadapted, Regime::StaticLora, Regime::Chameleon];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Unadapted => "unadapted",
            Regime::StaticLora => "static_lora",
            Regime::Chameleon => "chameleon",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown regime '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSettings {
    pub rank: usize,
    /// Defaults to the rank (net scale 1).
    pub alpha: Option<f64>,
    pub targets: Vec<Projection>,
    pub hyper_hidden: Vec<usize>,
    pub hyper_dropout: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            rank: 8,
            alpha: None,
            targets: vec![Projection::Query, Projection::Value],
            hyper_hidden: Vec::new(),
            hyper_dropout: 0.1,
        }
    }
}

impl LoraSettings {
    pub fn spec(&self, head: HeadKind) -> LoraSpec {
        LoraSpec {
            rank: self.rank,
            alpha: self.alpha.unwrap_or(self.rank as f64),
            targets: self.targets.clone(),
            head,
            hyper_hidden: self.hyper_hidden.clone(),
            hyper_dropout: self.hyper_dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub data: u64,
    pub cluster: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            model: 0,
            data: 0,
            cluster: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub lora: LoraSettings,
    pub kmeans: KMeansOptions,
    pub drop_policy: DropPolicy,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Chameleon,
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            lora: LoraSettings::default(),
            kmeans: KMeansOptions::default(),
            drop_policy: DropPolicy::Keep,
            seeds: Seeds::default(),
        }
    }
}

/// Anything the epoch loop can train: a forward pass plus its trainable store.
pub trait LanguageModel {
    fn forward(&mut self, tape: &mut Tape, batch: &TokenBatch, ctx: Option<&[f64]>) -> Result<Var>;
    fn trainable_store(&mut self) -> &mut ParamStore;
    fn set_training(&mut self, on: bool);
    fn needs_context(&self) -> bool;
}

impl LanguageModel for AdaptedModel {
    fn forward(&mut self, tape: &mut Tape, batch: &TokenBatch, ctx: Option<&[f64]>) -> Result<Var> {
        AdaptedModel::forward(self, tape, batch, ctx)
    }
    fn trainable_store(&mut self) -> &mut ParamStore {
        self.adapters_mut()
    }
    fn set_training(&mut self, on: bool) {
        AdaptedModel::set_training(self, on)
    }
    fn needs_context(&self) -> bool {
        AdaptedModel::needs_context(self)
    }
}

/// Full-parameter training of an unfrozen backbone.
pub struct Pretraining<'a>(pub &'a mut TransformerBackbone);

impl LanguageModel for Pretraining<'_> {
    fn forward(&mut self, tape: &mut Tape, batch: &TokenBatch, _: Option<&[f64]>) -> Result<Var> {
        let h = self.0.forward_hidden(tape, batch, &Unadapted)?;
        self.0.head(tape, h)
    }
    fn trainable_store(&mut self) -> &mut ParamStore {
        self.0.store_mut()
    }
    fn set_training(&mut self, _: bool) {}
    fn needs_context(&self) -> bool {
        false
    }
}

/// Token sequences of one split with their example embeddings and k-means plan.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub sequences: Vec<Vec<usize>>,
    pub embeddings: Vec<Vec<f64>>,
    pub styles: Option<Vec<usize>>,
    pub plan: ClusterPlan,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn schedule(&self, batch_size: usize, seed: u64, policy: DropPolicy) -> Vec<Vec<usize>> {
        build_schedule(&self.plan, &self.embeddings, batch_size, seed, policy).schedule
    }
}

/// Embeds the chosen split with the frozen backbone and clusters it with
/// `k = choose_k(n, batch_size)`. Sequences without a next-token target are
/// dropped.
pub fn prepare_split(
    backbone: &TransformerBackbone,
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    kmeans_opts: &KMeansOptions,
    embedding: &EmbeddingOptions,
    seed: u64,
) -> Result<PreparedSplit> {
    let examples: Vec<_> = corpus
        .indices(split)
        .into_iter()
        .map(|i| &corpus.examples[i])
        .filter(|e| e.ids.len() >= 2)
        .collect();
    if examples.is_empty() {
        return Err(match split {
            Split::Val => Error::EmptyValidation,
            Split::Train => Error::EmptyCorpus,
        });
    }
    let embeddings = embed_examples(backbone, &examples, embedding)?;
    let k = choose_k(examples.len(), batch_size);
    let plan = kmeans(&embeddings, k, seed, kmeans_opts)?;
    let styles = examples.iter().map(|e| e.style).collect();
    Ok(PreparedSplit {
        sequences: examples.iter().map(|e| e.ids.clone()).collect(),
        embeddings,
        styles,
        plan,
    })
}

/// Next-token batch: inputs drop the last token, targets drop the first.
#[derive(Debug, Clone)]
pub struct LmBatch {
    pub input: TokenBatch,
    pub targets: Vec<usize>,
    pub ctx: Option<Vec<f64>>,
}

impl LmBatch {
    pub fn new(split: &PreparedSplit, indices: &[usize], with_ctx: bool) -> Result<Self> {
        let inputs: Vec<&[usize]> = indices
            .iter()
            .map(|&i| &split.sequences[i][..split.sequences[i].len() - 1])
            .collect();
        let input = TokenBatch::from_sequences(&inputs);
        let mut targets = Vec::with_capacity(input.ids.len());
        for &i in indices {
            let s = &split.sequences[i];
            targets.extend_from_slice(&s[1..]);
            targets.extend(std::iter::repeat(crate::data::PAD).take(input.seq + 1 - s.len()));
        }
        let ctx = if with_ctx {
            let embs: Vec<&[f64]> = indices.iter().map(|&i| split.embeddings[i].as_slice()).collect();
            Some(batch_context(&embs)?)
        } else {
            None
        };
        Ok(LmBatch { input, targets, ctx })
    }

    pub fn mask(&self) -> &[bool] {
        &self.input.mask
    }

    pub fn token_count(&self) -> usize {
        self.input.mask.iter().filter(|&&m| m).count()
    }
}

/// Records forward + masked cross-entropy for one batch.
pub fn batch_loss<M: LanguageModel + ?Sized>(model: &mut M, tape: &mut Tape, batch: &LmBatch) -> Result<Var> {
    let logits = model.forward(tape, &batch.input, batch.ctx.as_deref())?;
    tape.cross_entropy(logits, &batch.targets, batch.mask())
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

/// One pass over `schedule`: forward, backward, clip, AdamW. Returns the mean
/// of per-batch losses.
pub fn train_epoch<M: LanguageModel + ?Sized>(
    model: &mut M,
    split: &PreparedSplit,
    schedule: &[Vec<usize>],
    opt: &mut AdamW,
    grad_clip: f64,
) -> Result<f64> {
    model.set_training(true);
    let with_ctx = model.needs_context();
    let mut total = 0.0;
    for (bi, idx) in schedule.iter().enumerate() {
        let batch = LmBatch::new(split, idx, with_ctx)?;
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { batch: bi });
        }
        tape.backward(loss)?;
        let store = model.trainable_store();
        store.zero_grads();
        tape.write_grads(store)?;
        if grad_clip > 0.0 {
            clip_grad_norm(store, grad_clip);
        }
        opt.step(store)?;
        store.zero_grads();
        total += value;
    }
    model.set_training(false);
    Ok(total / schedule.len().max(1) as f64)
}

/// Loss over `schedule` in eval mode, both as a token-weighted mean and as a
/// plain mean of batch means.
pub fn evaluate_losses<M: LanguageModel + ?Sized>(
    model: &mut M,
    split: &PreparedSplit,
    schedule: &[Vec<usize>],
) -> Result<(f64, f64)> {
    if schedule.is_empty() {
        return Err(Error::EmptyValidation);
    }
    model.set_training(false);
    let with_ctx = model.needs_context();
    let (mut weighted, mut tokens, mut batch_sum) = (0.0, 0usize, 0.0);
    for idx in schedule {
        let batch = LmBatch::new(split, idx, with_ctx)?;
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch)?;
        let value = tape.scalar(loss);
        let n = batch.token_count();
        weighted += value * n as f64;
        tokens += n;
        batch_sum += value;
    }
    Ok((weighted / tokens as f64, batch_sum / schedule.len() as f64))
}

/// Token-weighted validation loss and its perplexity.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &mut M,
    split: &PreparedSplit,
    schedule: &[Vec<usize>],
) -> Result<(f64, f64)> {
    let (loss, _) = evaluate_losses(model, split, schedule)?;
    Ok((loss, perplexity(loss)))
}

#[derive(Debug, Clone)]
pub struct RegimeRun {
    pub model: AdaptedModel,
    pub metrics: RunMetrics,
}

pub fn head_kind(regime: Regime) -> HeadKind {
    match regime {
        Regime::Unadapted => HeadKind::Frozen,
        Regime::StaticLora => HeadKind::Lora,
        Regime::Chameleon => HeadKind::Hyper,
    }
}

/// Wraps the frozen backbone for `cfg.regime`, trains for `cfg.epochs` on
/// cluster-pure batches and evaluates on validation after every epoch.
pub fn run_regime(
    backbone: Arc<TransformerBackbone>,
    train: &PreparedSplit,
    val: &PreparedSplit,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RegimeRun> {
    let base = AdaptedModel::unadapted(backbone)?;
    let mut model = match cfg.regime {
        Regime::Unadapted => base,
        r => wrap_model(base, &cfg.lora.spec(head_kind(r)), cfg.seeds.model)?,
    };
    let params = model.trainable_count();
    let val_schedule = val.schedule(cfg.batch_size, cfg.seeds.cluster, cfg.drop_policy);
    let train_schedule = |epoch: usize| {
        let seed = cfg.seeds.cluster.wrapping_add(1 + epoch as u64);
        train.schedule(cfg.batch_size, seed, cfg.drop_policy)
    };
    let mut metrics = RunMetrics::new(cfg.regime, params);

    if cfg.regime == Regime::Unadapted {
        let start = Instant::now();
        let (_, train_loss) = evaluate_losses(&mut model, train, &train_schedule(0))?;
        let (val_loss, _) = evaluate(&mut model, val, &val_schedule)?;
        let secs = start.elapsed().as_secs_f64();
        for epoch in 0..cfg.epochs.max(1) {
            let rec = metrics.push(epoch + 1, train_loss, val_loss, secs);
            on_epoch(&rec);
        }
        return Ok(RegimeRun { model, metrics });
    }

    let mut opt = AdamW::new(cfg.optimizer);
    let first = train_schedule(0);
    // adapters start at zero, so this is the unadapted loss on epoch-1 batches
    let (_, baseline) = evaluate_losses(&mut model, train, &first)?;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let schedule = if epoch == 0 { first.clone() } else { train_schedule(epoch) };
        let train_loss = train_epoch(&mut model, train, &schedule, &mut opt, cfg.grad_clip)?;
        let (val_loss, _) = evaluate(&mut model, val, &val_schedule)?;
        if epoch == 0 && train_loss >= baseline {
            log::warn!(
                "{}: epoch-1 training loss {train_loss:.4} did not improve on the unadapted {baseline:.4}",
                cfg.regime
            );
            metrics.flagged = true;
        }
        let rec = metrics.push(epoch + 1, train_loss, val_loss, start.elapsed().as_secs_f64());
        on_epoch(&rec);
    }
    Ok(RegimeRun { model, metrics })
}

/// Plain shuffled batches, used when no clustering is wanted (pretraining).
pub fn random_schedule(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
