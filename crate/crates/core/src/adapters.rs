//! Static LoRA wrappers and the hypernetwork-driven LoRA LM head.
//!
//! A [`LoraLinear`] adds `(α/r)·x·Aᵀ·Bᵀ` to a frozen projection `x·W`. The
//! [`HyperLoraHead`] keeps `B` as a trainable matrix but generates `A` from the
//! batch context with a small MLP, once per batch.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Projection, ProjectionAdapter, Site, TokenBatch, TransformerBackbone};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

pub const HYPER_OUTPUT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Frozen head, no adapter.
    Frozen,
    /// Static LoRA on the head.
    Lora,
    /// Hypernetwork-generated LoRA on the head.
    Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    pub head: HeadKind,
    /// Hidden widths of the hypernetwork; empty means "2·d, 2·d".
    pub hyper_hidden: Vec<usize>,
    pub hyper_dropout: f64,
}

impl LoraSpec {
    pub fn new(rank: usize, head: HeadKind) -> Self {
        LoraSpec {
            rank,
            alpha: rank as f64,
            targets: vec![Projection::Query, Projection::Value],
            head,
            hyper_hidden: Vec::new(),
            hyper_dropout: 0.1,
        }
    }
}

/// Low-rank correction to a frozen `in × out` weight held by the backbone.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: ParamId,
    /// r × in
    pub a: ParamId,
    /// out × r
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LoraLinear {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        base: ParamId,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let a = store.add(
            format!("{prefix}.lora_a"),
            init::xavier_uniform(&[rank, in_dim], in_dim, rank, rng).trainable(),
        );
        let b = store.add(format!("{prefix}.lora_b"), Tensor::zeros(&[out_dim, rank]).trainable());
        LoraLinear {
            base,
            a,
            b,
            rank,
            alpha,
            in_dim,
            out_dim,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }

    /// `(α/r)·x·Aᵀ·Bᵀ`
    pub fn delta(&self, tape: &mut Tape, adapters: &ParamStore, x: Var) -> Result<Var> {
        let a = tape.param(adapters, self.a);
        let b = tape.param(adapters, self.b);
        let xa = tape.matmul_nt(x, a)?;
        let xab = tape.matmul_nt(xa, b)?;
        Ok(tape.scale(xab, self.scale()))
    }

    /// `x·W + (α/r)·x·Aᵀ·Bᵀ`
    pub fn forward(&self, tape: &mut Tape, base: &ParamStore, adapters: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(base, self.base);
        let y = tape.matmul(x, w)?;
        let d = self.delta(tape, adapters, x)?;
        tape.add(y, d)
    }
}

/// MLP from a context vector to a flattened `rank × d` matrix.
#[derive(Debug, Clone)]
pub struct HyperNetwork {
    /// (weight in×out, bias 1×out) per layer
    layers: Vec<(ParamId, ParamId)>,
    pub dropout: f64,
    pub rank: usize,
    pub d: usize,
}

impl HyperNetwork {
    fn new<R: Rng>(store: &mut ParamStore, d: usize, hidden: &[usize], rank: usize, dropout: f64, rng: &mut R) -> Self {
        let mut dims = vec![d];
        dims.extend_from_slice(hidden);
        dims.push(rank * d);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (dims[i], dims[i + 1]);
                let w = if i + 1 == n {
                    init::normal(&[fi, fo], HYPER_OUTPUT_STD, rng)
                } else {
                    init::xavier_uniform(&[fi, fo], fi, fo, rng)
                };
                (
                    store.add(format!("head.hyper.{i}.weight"), w.trainable()),
                    store.add(format!("head.hyper.{i}.bias"), Tensor::zeros(&[1, fo]).trainable()),
                )
            })
            .collect();
        HyperNetwork {
            layers,
            dropout,
            rank,
            d,
        }
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Returns `A_dyn` with shape `rank × d`. Dropout follows each hidden
    /// layer and is active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut h = ctx;
        let n = self.layers.len();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i + 1 < n {
                h = tape.relu(h);
                if let Some(r) = rng.as_deref_mut() {
                    h = tape.dropout(h, self.dropout, r);
                }
            }
        }
        tape.reshape(h, &[self.rank, self.d])
    }
}

/// LM head whose low-rank factor `A` is produced per batch by a hypernetwork.
#[derive(Debug, Clone)]
pub struct HyperLoraHead {
    pub base: ParamId,
    pub hyper: HyperNetwork,
    /// V × r
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub vocab: usize,
}

impl HyperLoraHead {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `hidden·W + (α/r)·hidden·A_dyn(ctx)ᵀ·Bᵀ`, with one `A_dyn` for the batch.
pub fn head_forward(
    tape: &mut Tape,
    head: &HyperLoraHead,
    base: &ParamStore,
    adapters: &ParamStore,
    hidden: Var,
    ctx: &[f64],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if ctx.len() != head.hyper.d {
        return Err(Error::ContextShape {
            expected: head.hyper.d,
            got: ctx.len(),
        });
    }
    let c = tape.constant(&Tensor::from_vec(&[1, ctx.len()], ctx.to_vec())?);
    let a_dyn = head.hyper.forward(tape, adapters, c, rng)?;
    let w = tape.param(base, head.base);
    let y = tape.matmul(hidden, w)?;
    let b = tape.param(adapters, head.b);
    let ha = tape.matmul_nt(hidden, a_dyn)?;
    let hab = tape.matmul_nt(ha, b)?;
    let d = tape.scale(hab, head.scale());
    tape.add(y, d)
}

/// Arithmetic mean of per-example embedding vectors. Each coordinate is
/// summed in sorted order, so the result is bitwise independent of the
/// order of examples.
pub fn batch_context<V: AsRef<[f64]>>(embeddings: &[V]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or(Error::EmptyContext)?.as_ref();
    let d = first.len();
    if let Some(e) = embeddings.iter().find(|e| e.as_ref().len() != d) {
        return Err(Error::ContextShape {
            expected: d,
            got: e.as_ref().len(),
        });
    }
    let n = embeddings.len() as f64;
    let mut column = Vec::with_capacity(embeddings.len());
    let ctx = (0..d)
        .map(|j| {
            column.clear();
            column.extend(embeddings.iter().map(|e| e.as_ref()[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect();
    Ok(ctx)
}

#[derive(Debug, Clone)]
pub enum Head {
    Frozen,
    Lora(LoraLinear),
    Hyper(HyperLoraHead),
}

/// Frozen backbone plus (optionally) its adapters.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    backbone: Arc<TransformerBackbone>,
    adapters: ParamStore,
    layer_loras: Vec<(Site, LoraLinear)>,
    head: Head,
    training: bool,
    rng: ChaCha8Rng,
}

struct LayerLoras<'a> {
    loras: &'a [(Site, LoraLinear)],
    store: &'a ParamStore,
}

impl ProjectionAdapter for LayerLoras<'_> {
    fn delta(&self, tape: &mut Tape, site: Site, input: Var) -> Result<Option<Var>> {
        match self.loras.iter().find(|(s, _)| *s == site) {
            Some((_, lora)) => lora.delta(tape, self.store, input).map(Some),
            None => Ok(None),
        }
    }
}

impl AdaptedModel {
    pub fn unadapted(backbone: Arc<TransformerBackbone>) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::NotFrozen);
        }
        Ok(AdaptedModel {
            backbone,
            adapters: ParamStore::new(),
            layer_loras: Vec::new(),
            head: Head::Frozen,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn backbone(&self) -> &Arc<TransformerBackbone> {
        &self.backbone
    }

    pub fn adapters(&self) -> &ParamStore {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut ParamStore {
        &mut self.adapters
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn layer_loras(&self) -> &[(Site, LoraLinear)] {
        &self.layer_loras
    }

    pub fn is_wrapped(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn needs_context(&self) -> bool {
        matches!(self.head, Head::Hyper(_))
    }

    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.trainable_count()
    }

    /// Records the full forward pass and returns logits `[batch, seq, V]`.
    /// `ctx` is required by the hypernetwork head and ignored otherwise.
    pub fn forward(&mut self, tape: &mut Tape, batch: &TokenBatch, ctx: Option<&[f64]>) -> Result<Var> {
        let adapter = LayerLoras {
            loras: &self.layer_loras,
            store: &self.adapters,
        };
        let hidden = self.backbone.forward_hidden(tape, batch, &adapter)?;
        let base = self.backbone.store();
        match &self.head {
            Head::Frozen => self.backbone.head(tape, hidden),
            Head::Lora(lora) => lora.forward(tape, base, &self.adapters, hidden),
            Head::Hyper(head) => {
                let ctx = ctx.ok_or(Error::ContextShape {
                    expected: head.hyper.d,
                    got: 0,
                })?;
                let rng = self.training.then_some(&mut self.rng);
                head_forward(tape, head, base, &self.adapters, hidden, ctx, rng)
            }
        }
    }

    /// Logits without recording gradients, in the current mode.
    pub fn logits(&mut self, batch: &TokenBatch, ctx: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = self.forward(&mut tape, batch, ctx)?;
        Ok(tape.tensor(l))
    }

    /// Eval-mode `A_dyn` for a context, if the head is dynamic.
    pub fn dynamic_a(&self, ctx: &[f64]) -> Result<Option<Tensor>> {
        let Head::Hyper(head) = &self.head else {
            return Ok(None);
        };
        if ctx.len() != head.hyper.d {
            return Err(Error::ContextShape {
                expected: head.hyper.d,
                got: ctx.len(),
            });
        }
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::from_vec(&[1, ctx.len()], ctx.to_vec())?);
        let a = head.hyper.forward(&mut tape, &self.adapters, c, None)?;
        Ok(Some(tape.tensor(a)))
    }

    /// Effective head update `(α/r)·A_dynᵀ·Bᵀ` (d × V) for a context.
    pub fn head_update(&self, ctx: &[f64]) -> Result<Option<Tensor>> {
        let Head::Hyper(head) = &self.head else {
            return Ok(None);
        };
        let a = self.dynamic_a(ctx)?.unwrap();
        let b = self.adapters.get(head.b);
        let (r, d, v) = (head.rank, head.hyper.d, head.vocab);
        let mut out = vec![0.0; d * v];
        for i in 0..d {
            for j in 0..v {
                let mut s = 0.0;
                for k in 0..r {
                    s += a.at(k, i) * b.at(j, k);
                }
                out[i * v + j] = s * head.scale();
            }
        }
        Ok(Some(Tensor::from_vec(&[d, v], out)?))
    }
}

/// Attaches LoRA adapters to the selected projections and replaces the head
/// according to `spec.head`. Only the new adapter tensors are trainable.
pub fn wrap_model(model: AdaptedModel, spec: &LoraSpec, seed: u64) -> Result<AdaptedModel> {
    if model.is_wrapped() {
        return Err(Error::DoubleWrap);
    }
    if spec.rank == 0 {
        return Err(Error::InvalidConfig("LoRA rank must be positive".into()));
    }
    let bb = model.backbone.clone();
    let cfg = *bb.config();
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut targets = spec.targets.clone();
    targets.sort();
    targets.dedup();

    let mut layer_loras = Vec::new();
    for layer in 0..cfg.n_layers {
        for &proj in &targets {
            let site = Site { layer, proj };
            let (i, o) = match proj {
                Projection::MlpUp => (d, f),
                Projection::MlpDown => (f, d),
                _ => (d, d),
            };
            let prefix = format!("layers.{layer}.{proj:?}").to_lowercase();
            let lora = LoraLinear::new(&mut store, &prefix, bb.weight(site), i, o, spec.rank, spec.alpha, &mut rng);
            layer_loras.push((site, lora));
        }
    }
    let head = match spec.head {
        HeadKind::Frozen => Head::Frozen,
        HeadKind::Lora => Head::Lora(LoraLinear::new(&mut store, "head", bb.lm_head(), d, v, spec.rank, spec.alpha, &mut rng)),
        HeadKind::Hyper => {
            let hidden = if spec.hyper_hidden.is_empty() {
                vec![2 * d, 2 * d]
            } else {
                spec.hyper_hidden.clone()
            };
            let hyper = HyperNetwork::new(&mut store, d, &hidden, spec.rank, spec.hyper_dropout, &mut rng);
            let b = store.add("head.lora_b", Tensor::zeros(&[v, spec.rank]).trainable());
            Head::Hyper(HyperLoraHead {
                base: bb.lm_head(),
                hyper,
                b,
                rank: spec.rank,
                alpha: spec.alpha,
                vocab: v,
            })
        }
    };
    Ok(AdaptedModel {
        backbone: bb,
        adapters: store,
        layer_loras,
        head,
        training: false,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd1ce),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn frozen(cfg: ModelConfig, seed: u64) -> Arc<TransformerBackbone> {
        let mut bb = TransformerBackbone::init(cfg, seed).unwrap();
        bb.freeze();
        Arc::new(bb)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 6,
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::from_sequences(&[vec![1, 4, 5, 6], vec![1, 7, 3]])
    }

    #[test]
    fn wrapping_requires_frozen_backbone_and_rejects_double_wrap() {
        let bb = TransformerBackbone::init(small(), 1).unwrap();
        assert!(matches!(AdaptedModel::unadapted(Arc::new(bb)), Err(Error::NotFrozen)));
        let m = AdaptedModel::unadapted(frozen(small(), 1)).unwrap();
        let m = wrap_model(m, &LoraSpec::new(2, HeadKind::Lora), 0).unwrap();
        assert!(matches!(
            wrap_model(m, &LoraSpec::new(2, HeadKind::Lora), 0),
            Err(Error::DoubleWrap)
        ));
    }

    #[test]
    fn zero_init_is_identity() {
        let bb = frozen(small(), 2);
        let want = bb.logits(&batch()).unwrap();
        for head in [HeadKind::Lora, HeadKind::Hyper] {
            let m = AdaptedModel::unadapted(bb.clone()).unwrap();
            let mut m = wrap_model(m, &LoraSpec::new(2, head), 3).unwrap();
            let got = m.logits(&batch(), Some(&[0.3; 8])).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = ModelConfig {
            vocab_size: 100,
            ..ModelConfig::desk(100)
        };
        let m = AdaptedModel::unadapted(frozen(cfg, 0)).unwrap();
        let m = wrap_model(m, &LoraSpec::new(4, HeadKind::Lora), 0).unwrap();
        let enumerated: usize = m
            .adapters()
            .iter()
            .filter(|(_, _, t)| t.requires_grad())
            .map(|(_, _, t)| t.len())
            .sum();
        assert_eq!(enumerated, 4 * (64 + 100) + 4 * 2 * (64 + 64) * 2);
        assert_eq!(m.trainable_count(), enumerated);
        assert_eq!(m.backbone().store().trainable_count(), 0);
    }

    #[test]
    fn initial_a_is_xavier_and_hyper_output_small() {
        let m = AdaptedModel::unadapted(frozen(ModelConfig::desk(50), 0)).unwrap();
        let m = wrap_model(m, &LoraSpec::new(4, HeadKind::Hyper), 1).unwrap();
        let s = m.adapters();
        let a = s.get(s.find("layers.0.query.lora_a").unwrap());
        let bound = (6.0 / (64.0 + 4.0) as f64).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
        let out = s.get(s.find("head.hyper.2.weight").unwrap());
        let std = (out.data().iter().map(|x| x * x).sum::<f64>() / out.len() as f64).sqrt();
        assert!((std - HYPER_OUTPUT_STD).abs() < 0.1 * HYPER_OUTPUT_STD);
        assert_eq!(out.shape(), &[128, 4 * 64]);
    }

    #[test]
    fn batch_context_cases() {
        let v = vec![0.5, -1.0, 2.0];
        assert_eq!(batch_context(&[v.clone()]).unwrap(), v);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(batch_context(&[v, neg]).unwrap(), vec![0.0; 3]);
        assert!(matches!(batch_context::<Vec<f64>>(&[]), Err(Error::EmptyContext)));
    }

    #[test]
    fn batch_context_matches_sum_over_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ctx = batch_context(&rows).unwrap();
        for c in 0..7 {
            let s: f64 = rows.iter().map(|r| r[c]).sum();
            assert!((ctx[c] - s / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn context_shape_is_checked() {
        let m = AdaptedModel::unadapted(frozen(small(), 0)).unwrap();
        let mut m = wrap_model(m, &LoraSpec::new(2, HeadKind::Hyper), 0).unwrap();
        assert!(matches!(
            m.logits(&batch(), Some(&[0.0; 5])),
            Err(Error::ContextShape { expected: 8, got: 5 })
        ));
        assert!(m.logits(&batch(), None).is_err());
    }
}
