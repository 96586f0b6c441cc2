use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{ComparisonRow, EpochRecord, RunMetrics};
use super::{
    evaluate, prepare_split, random_schedule, run_regime, train_epoch, AdamW, Pretraining, PreparedSplit, Regime,
    RegimeRun,
};
use crate::clustering::{purity, ClusterPlan};
use crate::config::{CorpusSource, ExperimentConfig, PretrainSource};
use crate::data::synthetic::make_synthetic_corpus;
use crate::data::{load_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::TransformerBackbone;

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match cfg.corpus.source {
        CorpusSource::Synthetic => make_synthetic_corpus(&cfg.synthetic_spec(), cfg.train.seeds.data),
        CorpusSource::File => {
            let path = cfg
                .corpus
                .path
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("corpus.path is not set".into()))?;
            load_corpus(path, &cfg.corpus_options())
        }
    }
}

/// The corpus the backbone is pretrained on, if any. A pretext corpus only
/// exists for synthetic targets; file corpora fall back to their own
/// training split.
pub fn pretrain_corpus(cfg: &ExperimentConfig, target: &Corpus) -> Result<Option<Corpus>> {
    match (cfg.pretrain.source, cfg.corpus.source) {
        (PretrainSource::None, _) => Ok(None),
        (PretrainSource::Pretext, CorpusSource::Synthetic) => {
            let seed = cfg.train.seeds.data.wrapping_add(cfg.pretrain.pretext_seed_offset);
            make_synthetic_corpus(&cfg.pretext_spec(), seed).map(Some)
        }
        (PretrainSource::Pretext, CorpusSource::File) => {
            log::info!("no pretext corpus for file input; pretraining on the training split");
            Ok(Some(target.clone()))
        }
        (PretrainSource::Corpus, _) => Ok(Some(target.clone())),
    }
}

fn plain_split(corpus: &Corpus, split: Split) -> PreparedSplit {
    let sequences: Vec<Vec<usize>> = corpus
        .indices(split)
        .into_iter()
        .map(|i| corpus.examples[i].ids.clone())
        .filter(|s| s.len() >= 2)
        .collect();
    let n = sequences.len();
    PreparedSplit {
        sequences,
        embeddings: Vec::new(),
        styles: None,
        plan: ClusterPlan {
            k: 1,
            centroids: Vec::new(),
            assignment: vec![0; n],
            objective: 0.0,
            history: Vec::new(),
            schedule: Vec::new(),
        },
    }
}

/// Initializes a backbone from `seed`, trains every weight on `corpus` (when
/// given), then rounds to `f32` and freezes it. Returns the per-epoch
/// `(train, validation)` losses.
pub fn pretrain_backbone(
    cfg: &ExperimentConfig,
    vocab_size: usize,
    corpus: Option<&Corpus>,
    seed: u64,
) -> Result<(TransformerBackbone, Vec<(f64, f64)>)> {
    let mut backbone = TransformerBackbone::init(cfg.model.with_vocab(vocab_size), seed)?;
    let mut history = Vec::new();
    if let Some(corpus) = corpus {
        let p = &cfg.pretrain;
        let train = plain_split(corpus, Split::Train);
        let val = plain_split(corpus, Split::Val);
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut opt = AdamW::new(p.optimizer);
        for epoch in 0..p.epochs {
            let start = Instant::now();
            let schedule = random_schedule(train.len(), p.batch_size, seed.wrapping_add(epoch as u64));
            let mut model = Pretraining(&mut backbone);
            let train_loss = train_epoch(&mut model, &train, &schedule, &mut opt, p.grad_clip)?;
            let val_loss = if val.is_empty() {
                f64::NAN
            } else {
                evaluate(&mut model, &val, &random_schedule(val.len(), p.batch_size, 0))?.0
            };
            log::info!(
                "pretrain epoch {}: train {train_loss:.4} val {val_loss:.4} ({:.1}s)",
                epoch + 1,
                start.elapsed().as_secs_f64()
            );
            history.push((train_loss, val_loss));
        }
    }
    backbone.round_to_f32();
    backbone.freeze();
    Ok((backbone, history))
}

/// Embeds and clusters both splits for one run.
pub fn prepare_splits(
    cfg: &ExperimentConfig,
    backbone: &TransformerBackbone,
    corpus: &Corpus,
) -> Result<(PreparedSplit, PreparedSplit)> {
    let t = &cfg.train;
    let emb = &cfg.corpus.embedding;
    let train = prepare_split(backbone, corpus, Split::Train, t.batch_size, &t.kmeans, emb, t.seeds.cluster)?;
    let val = prepare_split(backbone, corpus, Split::Val, t.batch_size, &t.kmeans, emb, t.seeds.cluster)?;
    Ok((train, val))
}

/// Runs `cfg.train.regime` on a frozen backbone.
pub fn run_regime_on_corpus(
    cfg: &ExperimentConfig,
    backbone: Arc<TransformerBackbone>,
    corpus: &Corpus,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RegimeRun> {
    let (train, val) = prepare_splits(cfg, &backbone, corpus)?;
    run_regime(backbone, &train, &val, &cfg.train, on_epoch)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub backbone_checksum: String,
    /// The checksum still matched after all regimes trained.
    pub backbone_unchanged: bool,
    pub pretrain: Vec<(f64, f64)>,
    pub runs: Vec<RunMetrics>,
}

impl SeedOutcome {
    pub fn metrics(&self, regime: Regime) -> Option<&RunMetrics> {
        self.runs.iter().find(|m| m.regime == regime)
    }

    /// Chameleon's final validation loss is strictly below static LoRA's.
    pub fn chameleon_wins(&self) -> Option<bool> {
        let c = self.metrics(Regime::Chameleon)?.final_val_loss();
        let s = self.metrics(Regime::StaticLora)?.final_val_loss();
        Some(c < s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<SeedOutcome>,
}

impl ComparisonReport {
    pub fn rows(&self) -> Vec<ComparisonRow> {
        self.seeds
            .iter()
            .flat_map(|s| s.runs.iter().map(|m| ComparisonRow::from_metrics(s.seed, m)))
            .collect()
    }

    pub fn chameleon_wins(&self) -> usize {
        self.seeds.iter().filter(|s| s.chameleon_wins() == Some(true)).count()
    }
}

/// For each seed: pretrain and freeze a backbone, then train every regime in
/// `regimes` on it with the same data and schedule seeds.
pub fn compare_regimes(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    seeds: &[u64],
    regimes: &[Regime],
    on_epoch: &mut dyn FnMut(u64, &EpochRecord),
) -> Result<ComparisonReport> {
    let pre = pretrain_corpus(cfg, corpus)?;
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = cfg.clone();
        cfg.train.seeds.model = seed;
        cfg.train.seeds.cluster = seed;
        let (backbone, pretrain) = pretrain_backbone(&cfg, corpus.vocab.len(), pre.as_ref(), seed)?;
        let checksum = backbone.checksum();
        let backbone = Arc::new(backbone);
        let (train, val) = prepare_splits(&cfg, &backbone, corpus)?;
        let mut runs = Vec::with_capacity(regimes.len());
        for &regime in regimes {
            cfg.train.regime = regime;
            let run = run_regime(Arc::clone(&backbone), &train, &val, &cfg.train, &mut |r| on_epoch(seed, r))?;
            log::info!(
                "seed {seed} {regime}: val loss {:.4} ({} parameters)",
                run.metrics.final_val_loss(),
                run.metrics.trainable_params
            );
            runs.push(run.metrics);
        }
        let unchanged = backbone.checksum() == checksum;
        if !unchanged {
            log::error!("seed {seed}: backbone weights changed during adaptation");
        }
        out.push(SeedOutcome {
            seed,
            backbone_checksum: checksum,
            backbone_unchanged: unchanged,
            pretrain,
            runs,
        });
    }
    Ok(ComparisonReport { seeds: out })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub objective: f64,
    pub objective_history: Vec<f64>,
    /// Corpus example indices of each cluster.
    pub clusters: Vec<Vec<usize>>,
    pub purity: Option<f64>,
}

/// Clusters the training split the same way training would.
pub fn cluster_report(cfg: &ExperimentConfig, backbone: &TransformerBackbone, corpus: &Corpus) -> Result<ClusterReport> {
    let t = &cfg.train;
    let split = prepare_split(
        backbone,
        corpus,
        Split::Train,
        t.batch_size,
        &t.kmeans,
        &cfg.corpus.embedding,
        t.seeds.cluster,
    )?;
    let ids: Vec<usize> = corpus
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| corpus.examples[i].ids.len() >= 2)
        .collect();
    let clusters = split
        .plan
        .members()
        .into_iter()
        .map(|m| m.into_iter().map(|j| ids[j]).collect())
        .collect();
    let labels = split.styles.clone();
    Ok(ClusterReport {
        k: split.plan.k,
        sizes: split.plan.sizes(),
        objective: split.plan.objective,
        objective_history: split.plan.history.clone(),
        clusters,
        purity: labels.map(|l| purity(&split.plan.assignment, &l)),
    })
}
