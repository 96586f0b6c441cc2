//! Corpus loading, tokenization, example embeddings and train/val splits.

pub mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TransformerBackbone;

pub use synthetic::{make_synthetic_corpus, SyntheticSpec, SYNTHETIC_ALPHABET};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Char,
    Whitespace,
}

impl Tokenizer {
    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            Tokenizer::Char => text
                .char_indices()
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
            Tokenizer::Whitespace => text.split_whitespace().collect(),
        }
    }

    fn joiner(&self) -> &'static str {
        match self {
            Tokenizer::Char => "",
            Tokenizer::Whitespace => " ",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    #[default]
    Plain,
    Jsonl,
}

/// Token ↔ id table with PAD, BOS and UNK at ids 0, 1, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED.into_iter().chain(tokens) {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// BOS followed by content ids, truncated to the maximum length.
    pub ids: Vec<usize>,
    /// Positions (into `ids`) of the instruction part, when one was given.
    pub instruction_span: Option<Range<usize>>,
    /// Ground-truth style label of synthetic examples; diagnostics only.
    pub style: Option<usize>,
}

/// Raw text before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub text: String,
    pub instruction: Option<String>,
    pub style: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    pub split: Vec<Split>,
    pub tokenizer: Tokenizer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    pub format: CorpusFormat,
    pub tokenizer: Tokenizer,
    pub max_seq_len: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            format: CorpusFormat::Plain,
            tokenizer: Tokenizer::Char,
            max_seq_len: 64,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    text: String,
    #[serde(default)]
    instruction: Option<String>,
}

pub fn load_corpus(path: &Path, opts: &CorpusOptions) -> Result<Corpus> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match opts.format {
            CorpusFormat::Plain => raw.push(RawExample {
                text: line.to_string(),
                instruction: None,
                style: None,
            }),
            CorpusFormat::Jsonl => {
                let rec: JsonlRecord =
                    serde_json::from_str(line).map_err(|e| Error::Malformed {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                raw.push(RawExample {
                    text: rec.text,
                    instruction: rec.instruction,
                    style: None,
                });
            }
        }
    }
    Corpus::build(raw, opts, None)
}

/// Seeded partition of `0..n` into (train, val) membership.
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Vec<Split> {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_val.min(n)] {
        split[i] = Split::Val;
    }
    split
}

impl Corpus {
    /// Tokenizes `raw`. Without an explicit vocabulary, one is built from the
    /// training split only and unseen validation tokens map to UNK.
    pub fn build(raw: Vec<RawExample>, opts: &CorpusOptions, vocab: Option<Vocabulary>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if opts.max_seq_len < 2 {
            return Err(Error::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        let split = split_indices(raw.len(), opts.val_fraction, opts.seed);
        let tok = opts.tokenizer;
        let vocab = vocab.unwrap_or_else(|| {
            let mut seen = Vec::new();
            for (r, s) in raw.iter().zip(&split) {
                if *s != Split::Train {
                    continue;
                }
                for part in r.instruction.iter().chain(std::iter::once(&r.text)) {
                    seen.extend(tok.split(part));
                }
            }
            Vocabulary::from_tokens(seen)
        });
        let examples = raw
            .iter()
            .map(|r| {
                let mut ids = vec![BOS];
                let mut span = None;
                if let Some(instr) = &r.instruction {
                    ids.extend(tok.split(instr).into_iter().map(|t| vocab.id(t)));
                    span = Some(1..ids.len());
                }
                ids.extend(tok.split(&r.text).into_iter().map(|t| vocab.id(t)));
                ids.truncate(opts.max_seq_len);
                let span = span.map(|s: Range<usize>| s.start..s.end.min(ids.len()));
                Example {
                    ids,
                    instruction_span: span,
                    style: r.style,
                }
            })
            .collect();
        Ok(Corpus {
            examples,
            vocab,
            split,
            tokenizer: tok,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.vocab.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(self.tokenizer.joiner())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenizer
            .split(text)
            .into_iter()
            .map(|t| self.vocab.id(t))
            .collect()
    }

    pub fn styles(&self) -> Option<Vec<usize>> {
        self.examples.iter().map(|e| e.style).collect()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0]);
        }
        for (e, s) in self.examples.iter().zip(&self.split) {
            for &id in &e.ids {
                h.update((id as u32).to_le_bytes());
            }
            h.update([0xff, matches!(s, Split::Val) as u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingOptions {
    /// Pool the BOS row as well as content tokens.
    #[serde(default)]
    pub include_bos: bool,
}

/// Mean of raw token-embedding rows over content positions (the instruction
/// span when present), L2-normalized.
///
/// An example with no contributing tokens, or whose mean is the zero vector,
/// maps to the first standard basis vector.
pub fn example_embedding(
    backbone: &TransformerBackbone,
    example: &Example,
    opts: &EmbeddingOptions,
) -> Result<Vec<f64>> {
    let d = backbone.config().d_model;
    let range = example
        .instruction_span
        .clone()
        .unwrap_or(0..example.ids.len());
    let ids: Vec<usize> = example.ids[range]
        .iter()
        .copied()
        .filter(|&id| id != PAD && (opts.include_bos || id != BOS))
        .collect();
    let mut mean = vec![0.0; d];
    if !ids.is_empty() {
        let rows = backbone.token_embed(&ids)?;
        for r in 0..ids.len() {
            mean.iter_mut().zip(rows.row(r)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= ids.len() as f64);
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        log::warn!("example has no usable embedding; using the first basis vector");
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        return Ok(e);
    }
    Ok(mean.into_iter().map(|x| x / norm).collect())
}

pub fn embed_examples(
    backbone: &TransformerBackbone,
    examples: &[&Example],
    opts: &EmbeddingOptions,
) -> Result<Vec<Vec<f64>>> {
    examples
        .iter()
        .map(|e| example_embedding(backbone, e, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn no_val() -> CorpusOptions {
        CorpusOptions {
            val_fraction: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn char_corpus_enumeration() {
        let f = write("ab\nba\n");
        let c = load_corpus(f.path(), &no_val()).unwrap();
        assert_eq!(c.vocab.tokens(), &["<pad>", "<bos>", "<unk>", "a", "b"]);
        assert_eq!(c.examples[0].ids, vec![BOS, 3, 4]);
        assert_eq!(c.examples[1].ids, vec![BOS, 4, 3]);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let f = write(&(0..8).map(|i| format!("line{i}\n")).collect::<String>());
        let opts = CorpusOptions {
            val_fraction: 0.25,
            ..Default::default()
        };
        let c = load_corpus(f.path(), &opts).unwrap();
        let (tr, va) = (c.indices(Split::Train), c.indices(Split::Val));
        assert_eq!((tr.len(), va.len()), (6, 2));
        assert!(tr.iter().all(|i| !va.contains(i)));
    }

    #[test]
    fn loading_is_deterministic() {
        let f = write("hello\nworld\nfoo bar\nbaz\n");
        let opts = CorpusOptions {
            val_fraction: 0.5,
            seed: 3,
            ..Default::default()
        };
        let a = load_corpus(f.path(), &opts).unwrap();
        let b = load_corpus(f.path(), &opts).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn val_only_tokens_become_unk() {
        let raw = vec![
            RawExample { text: "aa".into(), instruction: None, style: None },
            RawExample { text: "az".into(), instruction: None, style: None },
        ];
        // find a seed that puts exactly the second example in validation
        let opts = (0..50)
            .map(|seed| CorpusOptions { val_fraction: 0.5, seed, ..Default::default() })
            .find(|o| split_indices(2, 0.5, o.seed)[1] == Split::Val)
            .unwrap();
        let c = Corpus::build(raw, &opts, None).unwrap();
        assert_eq!(c.examples[1].ids, vec![BOS, c.vocab.id("a"), UNK]);
    }

    #[test]
    fn jsonl_with_instruction_span() {
        let f = write("{\"text\": \"cd\", \"instruction\": \"ab\"}\n{\"text\": \"x\"}\n");
        let opts = CorpusOptions {
            format: CorpusFormat::Jsonl,
            ..no_val()
        };
        let c = load_corpus(f.path(), &opts).unwrap();
        assert_eq!(c.examples[0].ids.len(), 5);
        assert_eq!(c.examples[0].instruction_span, Some(1..3));
        assert_eq!(c.examples[1].instruction_span, None);
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let f = write("{\"text\": \"ok\"}\n\nnot json\n");
        let opts = CorpusOptions {
            format: CorpusFormat::Jsonl,
            ..no_val()
        };
        match load_corpus(f.path(), &opts) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_missing_files() {
        let f = write("\n\n");
        assert!(matches!(load_corpus(f.path(), &no_val()), Err(Error::EmptyCorpus)));
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/corpus.txt"), &no_val()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn truncation_to_max_len() {
        let f = write("abcdefghij\n");
        let opts = CorpusOptions {
            max_seq_len: 4,
            ..no_val()
        };
        let c = load_corpus(f.path(), &opts).unwrap();
        assert_eq!(c.examples[0].ids.len(), 4);
    }

    #[test]
    fn whitespace_tokenizer_round_trip() {
        let f = write("the cat sat\n");
        let opts = CorpusOptions {
            tokenizer: Tokenizer::Whitespace,
            ..no_val()
        };
        let c = load_corpus(f.path(), &opts).unwrap();
        assert_eq!(c.decode(&c.examples[0].ids), "the cat sat");
    }

    fn backbone_with_table(rows: &[Vec<f64>]) -> TransformerBackbone {
        let cfg = ModelConfig {
            vocab_size: rows.len(),
            d_model: rows[0].len(),
            n_layers: 1,
            n_heads: 1,
            d_ff: 4,
            max_seq_len: 8,
        };
        let mut bb = TransformerBackbone::init(cfg, 0).unwrap();
        let id = bb.store().find("tok_emb").unwrap();
        let flat: Vec<f64> = rows.concat();
        *bb.store_mut().get_mut(id) = Tensor::from_vec(&[rows.len(), rows[0].len()], flat).unwrap();
        bb
    }

    #[test]
    fn repeated_token_embedding_is_normalized_row() {
        let bb = backbone_with_table(&[
            vec![0.0, 0.0],
            vec![9.0, 9.0],
            vec![0.0, 0.0],
            vec![3.0, 4.0],
            vec![-3.0, -4.0],
        ]);
        let ex = Example { ids: vec![BOS, 3, 3, 3], instruction_span: None, style: None };
        let e = example_embedding(&bb, &ex, &EmbeddingOptions::default()).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);

        let opposite = Example { ids: vec![BOS, 3, 4], instruction_span: None, style: None };
        let e = example_embedding(&bb, &opposite, &EmbeddingOptions::default()).unwrap();
        assert_eq!(e, vec![1.0, 0.0]);

        let empty = Example { ids: vec![BOS], instruction_span: None, style: None };
        let e = example_embedding(&bb, &empty, &EmbeddingOptions::default()).unwrap();
        assert_eq!(e, vec![1.0, 0.0]);
    }

    #[test]
    fn embedding_matches_sum_count_normalize_oracle() {
        let cfg = ModelConfig::desk(20);
        let bb = TransformerBackbone::init(cfg, 4).unwrap();
        let ex = Example { ids: vec![BOS, 5, 9, 5, 17, 3, PAD], instruction_span: None, style: None };
        let table = bb.token_embedding_table();
        let mut sum = vec![0.0; 64];
        for &id in &[5, 9, 5, 17, 3] {
            for c in 0..64 {
                sum[c] += table.at(id, c);
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / 5.0).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = example_embedding(&bb, &ex, &EmbeddingOptions::default()).unwrap();
        for (g, m) in got.iter().zip(&mean) {
            assert!((g - m / norm).abs() < 1e-10);
        }
        let n2: f64 = got.iter().map(|x| x * x).sum();
        assert!((n2.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn instruction_span_restricts_pooling() {
        let bb = backbone_with_table(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let ex = Example { ids: vec![BOS, 4, 3, 3], instruction_span: Some(1..2), style: None };
        let e = example_embedding(&bb, &ex, &EmbeddingOptions::default()).unwrap();
        assert_eq!(e, vec![0.0, 1.0]);
    }
}
