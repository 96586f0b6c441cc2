//! Character-level corpus with a known style structure.
//!
//! Each style owns a disjoint set of characters and a cyclic successor order
//! over them. An example picks a random start character and then follows its
//! style's order, with an optional per-step chance of a random in-style
//! character. Style labels are kept for diagnostics only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusOptions, RawExample, Tokenizer, Vocabulary};
use crate::error::{Error, Result};

/// Every synthetic corpus shares this character set, so corpora generated
/// from different seeds map characters to the same ids.
pub const SYNTHETIC_ALPHABET: &str =
    "!\"#$%&'()*+,-./0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ[\\]^_`abcdefghijklmnopqrstuvwxyz{|}~";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_styles: usize,
    pub examples_per_style: usize,
    pub chars_per_style: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a step ignores the successor order.
    pub noise: f64,
    #[serde(skip)]
    pub val_fraction: f64,
    #[serde(skip)]
    pub max_seq_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_styles: 4,
            examples_per_style: 500,
            chars_per_style: 6,
            min_len: 12,
            max_len: 24,
            noise: 0.0,
            val_fraction: 0.1,
            max_seq_len: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn new(n_styles: usize, examples_per_style: usize) -> Self {
        SyntheticSpec {
            n_styles,
            examples_per_style,
            ..Default::default()
        }
    }

    pub fn vocabulary() -> Vocabulary {
        let chars: Vec<String> = SYNTHETIC_ALPHABET.chars().map(String::from).collect();
        Vocabulary::from_tokens(chars.iter().map(String::as_str))
    }
}

struct Style {
    chars: Vec<char>,
    /// successor[i] is the index (into `chars`) following chars[i]
    successor: Vec<usize>,
}

pub fn make_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    if spec.n_styles < 2 {
        return Err(Error::InvalidConfig("synthetic corpus needs at least 2 styles".into()));
    }
    let alphabet: Vec<char> = SYNTHETIC_ALPHABET.chars().collect();
    if spec.chars_per_style < 2 || spec.n_styles * spec.chars_per_style > alphabet.len() {
        return Err(Error::InvalidConfig(format!(
            "{} styles × {} chars do not fit a {}-character alphabet",
            spec.n_styles,
            spec.chars_per_style,
            alphabet.len()
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::InvalidConfig("need 1 ≤ min_len ≤ max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = alphabet;
    pool.shuffle(&mut rng);
    let styles: Vec<Style> = pool
        .chunks(spec.chars_per_style)
        .take(spec.n_styles)
        .map(|chunk| {
            let m = chunk.len();
            let mut cycle: Vec<usize> = (0..m).collect();
            cycle.shuffle(&mut rng);
            let mut successor = vec![0; m];
            for w in 0..m {
                successor[cycle[w]] = cycle[(w + 1) % m];
            }
            Style {
                chars: chunk.to_vec(),
                successor,
            }
        })
        .collect();

    let total = spec.n_styles * spec.examples_per_style;
    let raw = (0..total)
        .map(|i| {
            let s = i % spec.n_styles;
            let style = &styles[s];
            let m = style.chars.len();
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut cur = rng.gen_range(0..m);
            let mut text = String::with_capacity(len);
            for _ in 0..len {
                text.push(style.chars[cur]);
                cur = if spec.noise > 0.0 && rng.gen::<f64>() < spec.noise {
                    rng.gen_range(0..m)
                } else {
                    style.successor[cur]
                };
            }
            RawExample {
                text,
                instruction: None,
                style: Some(s),
            }
        })
        .collect();

    let opts = CorpusOptions {
        tokenizer: Tokenizer::Char,
        max_seq_len: spec.max_seq_len,
        val_fraction: spec.val_fraction,
        seed: seed ^ 0x5eed_5eed,
        ..Default::default()
    };
    Corpus::build(raw, &opts, Some(SyntheticSpec::vocabulary()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let spec = SyntheticSpec::new(3, 10);
        let a = make_synthetic_corpus(&spec, 1).unwrap();
        let b = make_synthetic_corpus(&spec, 1).unwrap();
        let c = make_synthetic_corpus(&spec, 2).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.vocab.len(), 97);
    }

    #[test]
    fn styles_use_disjoint_characters() {
        let spec = SyntheticSpec::new(4, 20);
        let c = make_synthetic_corpus(&spec, 5).unwrap();
        let mut owner = std::collections::HashMap::new();
        for e in &c.examples {
            for &id in &e.ids[1..] {
                let prev = owner.insert(id, e.style.unwrap());
                assert!(prev.is_none() || prev == e.style);
            }
        }
    }

    #[test]
    fn noiseless_examples_follow_one_order() {
        let spec = SyntheticSpec::new(2, 20);
        let c = make_synthetic_corpus(&spec, 9).unwrap();
        let mut next = std::collections::HashMap::new();
        for e in &c.examples {
            for w in e.ids[1..].windows(2) {
                let prev = next.insert(w[0], w[1]);
                assert!(prev.is_none() || prev == Some(w[1]));
            }
        }
    }

    #[test]
    fn rejects_single_style() {
        assert!(make_synthetic_corpus(&SyntheticSpec::new(1, 5), 0).is_err());
    }
}
