//! Corpus ingestion, the train/validation split and batch sampling.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Share of the token stream held out for validation, taken from the end.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    #[default]
    Byte,
    Char,
}

impl std::str::FromStr for VocabMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "byte" => Ok(VocabMode::Byte),
            "char" => Ok(VocabMode::Char),
            other => Err(format!("unknown vocab mode `{other}` (expected byte or char)")),
        }
    }
}

/// Mapping between token ids and text units.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Vocab {
    /// Token id = byte value.
    Byte,
    /// Token id = index into the sorted distinct characters of the corpus.
    Char { symbols: Vec<char> },
}

impl Vocab {
    pub fn size(&self) -> usize {
        match self {
            Vocab::Byte => 256,
            Vocab::Char { symbols } => symbols.len(),
        }
    }

    pub fn mode(&self) -> VocabMode {
        match self {
            Vocab::Byte => VocabMode::Byte,
            Vocab::Char { .. } => VocabMode::Char,
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        match self {
            Vocab::Byte => Ok(bytes.iter().map(|&b| b as usize).collect()),
            Vocab::Char { symbols } => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| Error::Corpus(format!("input is not valid UTF-8: {e}")))?;
                text.chars()
                    .map(|c| {
                        symbols
                            .binary_search(&c)
                            .map_err(|_| Error::Corpus(format!("character {c:?} is not in the vocabulary")))
                    })
                    .collect()
            }
        }
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<u8>> {
        match self {
            Vocab::Byte => tokens
                .iter()
                .map(|&t| u8::try_from(t).map_err(|_| Error::Range(format!("token {t} is not a byte"))))
                .collect(),
            Vocab::Char { symbols } => {
                let mut s = String::new();
                for &t in tokens {
                    s.push(
                        *symbols
                            .get(t)
                            .ok_or_else(|| Error::Range(format!("token {t} outside vocabulary")))?,
                    );
                }
                Ok(s.into_bytes())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CorpusStats {
    pub bytes: usize,
    pub tokens: usize,
    pub distinct_tokens: usize,
    pub vocab_size: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    /// Unigram cross-entropy of the validation split under train-split counts, nats.
    pub unigram_val_nats: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], mode: VocabMode, val_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Corpus(format!("validation fraction {val_fraction} not in [0, 1)")));
        }
        let vocab = match mode {
            VocabMode::Byte => Vocab::Byte,
            VocabMode::Char => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| Error::Corpus(format!("input is not valid UTF-8: {e}")))?;
                let mut symbols: Vec<char> = text.chars().collect();
                symbols.sort_unstable();
                symbols.dedup();
                Vocab::Char { symbols }
            }
        };
        Self::with_vocab(bytes, vocab, val_fraction)
    }

    /// Tokenizes with an existing vocabulary, e.g. one stored in a checkpoint.
    pub fn with_vocab(bytes: &[u8], vocab: Vocab, val_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Corpus(format!("validation fraction {val_fraction} not in [0, 1)")));
        }
        let tokens = vocab.encode(bytes)?;
        let split = tokens.len() - (tokens.len() as f64 * val_fraction).round() as usize;
        let (train, val) = tokens.split_at(split);
        Ok(Self {
            vocab,
            train: train.to_vec(),
            val: val.to_vec(),
        })
    }

    pub fn stats(&self) -> CorpusStats {
        let mut seen = vec![false; self.vocab.size()];
        for &t in self.train.iter().chain(&self.val) {
            seen[t] = true;
        }
        let tokens = self.train.len() + self.val.len();
        CorpusStats {
            bytes: self.vocab.decode(&self.train).map(|b| b.len()).unwrap_or(0)
                + self.vocab.decode(&self.val).map(|b| b.len()).unwrap_or(0),
            tokens,
            distinct_tokens: seen.iter().filter(|&&s| s).count(),
            vocab_size: self.vocab.size(),
            train_tokens: self.train.len(),
            val_tokens: self.val.len(),
            unigram_val_nats: unigram_cross_entropy(&self.train, &self.val, self.vocab.size()),
        }
    }
}

pub fn ingest_corpus(path: &Path, mode: VocabMode, val_fraction: f64) -> Result<Corpus> {
    Corpus::from_bytes(&read_file(path)?, mode, val_fraction)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Cross-entropy (nats per token) of `eval` under add-one smoothed unigram
/// counts of `fit`.
pub fn unigram_cross_entropy(fit: &[usize], eval: &[usize], vocab_size: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab_size];
    for &t in fit {
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if eval.is_empty() {
        return 0.0;
    }
    -eval.iter().map(|&t| (counts[t] / total).ln()).sum::<f64>() / eval.len() as f64
}

/// `batch` windows of `len` tokens starting at uniformly drawn offsets.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, tokens: &[usize], batch: usize, len: usize) -> Result<Array2<usize>> {
    if tokens.len() < len {
        return Err(Error::Corpus(format!(
            "token stream of {} is shorter than the window length {len}",
            tokens.len()
        )));
    }
    let mut out = Array2::zeros((batch, len));
    for mut row in out.outer_iter_mut() {
        let start = rng.random_range(0..=tokens.len() - len);
        row.iter_mut().zip(&tokens[start..start + len]).for_each(|(o, &t)| *o = t);
    }
    Ok(out)
}

/// Consecutive non-overlapping windows of `len` tokens, at most `limit` of them.
pub fn eval_windows(tokens: &[usize], len: usize, limit: Option<usize>) -> Vec<&[usize]> {
    let count = tokens.len() / len;
    tokens
        .chunks_exact(len)
        .take(limit.unwrap_or(count))
        .collect()
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "that", "for", "it", "as", "was", "with", "be",
    "by", "on", "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have",
    "an", "had", "they", "you", "were", "their", "one", "all", "we", "can", "her", "has",
    "there", "been", "if", "more", "when", "will", "would", "who", "so", "no", "river",
    "mountain", "village", "winter", "library", "garden", "engine", "signal", "harbor",
    "theory", "matrix", "sequence", "window", "morning", "evening", "market", "bridge",
    "forest", "letter", "journey", "station", "valley", "island", "machine", "pattern",
    "quietly", "slowly", "carefully", "often", "never", "always", "walked", "found",
    "built", "wrote", "carried", "watched", "opened", "followed", "remembered", "small",
    "ancient", "bright", "distant", "narrow", "heavy", "green", "silent", "northern",
];

/// Deterministic English-like text of at least `min_bytes` bytes.
///
/// Sentences draw words with a Zipf-like bias, so the text has both unigram
/// skew and local structure a sequence model can exploit.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut u = rng.random_range(0.0..total);
        for (w, word) in weights.iter().zip(WORDS) {
            if u < *w {
                return *word;
            }
            u -= w;
        }
        WORDS[WORDS.len() - 1]
    };
    let mut text = String::with_capacity(min_bytes + 128);
    while text.len() < min_bytes {
        let words = rng.random_range(4..12);
        for i in 0..words {
            let w = pick(&mut rng);
            if i == 0 {
                let mut cs = w.chars();
                let first = cs.next().unwrap().to_ascii_uppercase();
                text.push(first);
                text.push_str(cs.as_str());
            } else {
                text.push(' ');
                text.push_str(w);
            }
        }
        text.push_str(if rng.random_range(0..6) == 0 { ".\n" } else { ". " });
    }
    text
}
