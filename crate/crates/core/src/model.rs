//! Small GPT-style causal transformer used as the frozen backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults around a character vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
    MlpUp,
    MlpDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
        Projection::MlpUp,
        Projection::MlpDown,
    ];

    fn param_name(self) -> &'static str {
        match self {
            Projection::Query => "attn.query",
            Projection::Key => "attn.key",
            Projection::Value => "attn.value",
            Projection::Output => "attn.output",
            Projection::MlpUp => "mlp.up",
            Projection::MlpDown => "mlp.down",
        }
    }
}

/// One linear projection inside the layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub proj: Projection,
}

/// Supplies an additive correction for backbone projections.
pub trait ProjectionAdapter {
    fn delta(&self, tape: &mut Tape, site: Site, input: Var) -> Result<Option<Var>>;
}

pub struct Unadapted;

impl ProjectionAdapter for Unadapted {
    fn delta(&self, _: &mut Tape, _: Site, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Right-padded token ids for a batch of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    /// false exactly at padding positions
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD).take(seq - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        TokenBatch {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        }
    }

    pub fn with_mask(ids: Vec<usize>, mask: Vec<bool>, batch: usize, seq: usize) -> Self {
        assert_eq!(ids.len(), batch * seq);
        assert_eq!(mask.len(), batch * seq);
        TokenBatch {
            ids,
            mask,
            batch,
            seq,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    proj: [ParamId; 6],
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl LayerParams {
    fn weight(&self, p: Projection) -> ParamId {
        self.proj[p as usize]
    }
}

/// Pre-norm causal transformer with learned positions and an untied LM head.
#[derive(Debug, Clone)]
pub struct TransformerBackbone {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_gain: ParamId,
    lnf_bias: ParamId,
    lm_head: ParamId,
}

impl TransformerBackbone {
    /// Weights ~ N(0, 0.02²), layer-norm gain 1 and bias 0. Every tensor
    /// starts trainable; call [`freeze`](Self::freeze) before adapting.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mut store = ParamStore::new();
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.add(name, init::normal(shape, INIT_STD, &mut rng).trainable())
        };
        let tok_emb = normal(&mut store, "tok_emb".into(), &[v, d]);
        let pos_emb = normal(&mut store, "pos_emb".into(), &[config.max_seq_len, d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut proj = Vec::with_capacity(6);
            for p in Projection::ALL {
                let shape = match p {
                    Projection::MlpUp => [d, f],
                    Projection::MlpDown => [f, d],
                    _ => [d, d],
                };
                proj.push(normal(
                    &mut store,
                    format!("layers.{l}.{}", p.param_name()),
                    &shape,
                ));
            }
            layers.push(LayerParams {
                ln1_gain: store.add(format!("layers.{l}.ln1.gain"), Tensor::full(&[d], 1.0).trainable()),
                ln1_bias: store.add(format!("layers.{l}.ln1.bias"), Tensor::zeros(&[d]).trainable()),
                proj: proj.try_into().unwrap(),
                ln2_gain: store.add(format!("layers.{l}.ln2.gain"), Tensor::full(&[d], 1.0).trainable()),
                ln2_bias: store.add(format!("layers.{l}.ln2.bias"), Tensor::zeros(&[d]).trainable()),
            });
        }
        let lnf_gain = store.add("ln_f.gain", Tensor::full(&[d], 1.0).trainable());
        let lnf_bias = store.add("ln_f.bias", Tensor::zeros(&[d]).trainable());
        let lm_head = store.add("lm_head", init::normal(&[d, v], INIT_STD, &mut rng).trainable());
        Ok(TransformerBackbone {
            config,
            store,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain,
            lnf_bias,
            lm_head,
        })
    }

    /// Rebuilds a backbone from named tensors (e.g. a checkpoint).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut bb = Self::init(config, 0)?;
        if tensors.len() != bb.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} backbone tensors, found {}",
                bb.store.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = bb
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            let slot = bb.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(bb)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    /// Rounds every weight to the nearest `f32`, making checkpoint round
    /// trips exact.
    pub fn round_to_f32(&mut self) {
        self.store.round_to_f32();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.trainable_count() == 0
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn weight(&self, site: Site) -> ParamId {
        self.layers[site.layer].weight(site.proj)
    }

    pub fn lm_head(&self) -> ParamId {
        self.lm_head
    }

    pub fn token_embedding_table(&self) -> &Tensor {
        self.store.get(self.tok_emb)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Raw rows of the token embedding table (no positions added).
    pub fn token_embed(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        let table = self.token_embedding_table();
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(table.row(id));
        }
        Tensor::from_vec(&[ids.len().max(1), d], out)
    }

    /// Pre-head hidden states, shape `[batch, seq, d_model]`.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        adapter: &dyn ProjectionAdapter,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: cfg.max_seq_len,
            });
        }
        self.check_ids(&batch.ids)?;
        let s = &self.store;
        let tok = tape.param(s, self.tok_emb);
        let pos = tape.param(s, self.pos_emb);
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let te = tape.embedding(tok, &batch.ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        for (l, lp) in self.layers.iter().enumerate() {
            let project = |tape: &mut Tape, input: Var, proj: Projection| -> Result<Var> {
                let w = tape.param(s, lp.weight(proj));
                let y = tape.matmul(input, w)?;
                match adapter.delta(tape, Site { layer: l, proj }, input)? {
                    Some(delta) => tape.add(y, delta),
                    None => Ok(y),
                }
            };
            let (g1, b1) = (tape.param(s, lp.ln1_gain), tape.param(s, lp.ln1_bias));
            let h = tape.layer_norm(x, g1, b1)?;
            let q = project(tape, h, Projection::Query)?;
            let k = project(tape, h, Projection::Key)?;
            let v = project(tape, h, Projection::Value)?;
            let a = tape.attention(q, k, v, batch.batch, batch.seq, cfg.n_heads, &batch.mask)?;
            let o = project(tape, a, Projection::Output)?;
            x = tape.add(x, o)?;

            let (g2, b2) = (tape.param(s, lp.ln2_gain), tape.param(s, lp.ln2_bias));
            let h = tape.layer_norm(x, g2, b2)?;
            let u = project(tape, h, Projection::MlpUp)?;
            let u = tape.relu(u);
            let m = project(tape, u, Projection::MlpDown)?;
            x = tape.add(x, m)?;
        }
        let (gf, bf) = (tape.param(s, self.lnf_gain), tape.param(s, self.lnf_bias));
        let x = tape.layer_norm(x, gf, bf)?;
        tape.reshape(x, &[batch.batch, batch.seq, cfg.d_model])
    }

    /// Unadapted head: `hidden · W`.
    pub fn head(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let w = tape.param(&self.store, self.lm_head);
        tape.matmul(hidden, w)
    }

    pub fn hidden_states(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.forward_hidden(&mut tape, batch, &Unadapted)?;
        Ok(tape.tensor(h))
    }

    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.forward_hidden(&mut tape, batch, &Unadapted)?;
        let l = self.head(&mut tape, h)?;
        Ok(tape.tensor(l))
    }
}
