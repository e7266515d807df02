//! Language-model scoring interface and the bundled word-level scorers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, JsonContext};
use crate::lexicon::tokenize;
use crate::{Error, Result};

pub type Symbol = u32;

pub const DEFAULT_EOS: &str = "</s>";

/// Fixed symbol set of a scorer, including the end-of-sequence symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, Symbol>,
    lower: HashMap<String, Vec<Symbol>>,
    lex_rank: Vec<u32>,
    eos: Symbol,
}

impl Vocabulary {
    /// Builds a vocabulary; `eos` is appended when absent. Duplicate
    /// symbols are rejected.
    pub fn new(symbols: impl IntoIterator<Item = String>, eos: &str) -> Result<Self> {
        let mut symbols: Vec<String> = symbols.into_iter().collect();
        if !symbols.iter().any(|s| s == eos) {
            symbols.push(eos.to_string());
        }
        let mut index = HashMap::with_capacity(symbols.len());
        let mut lower: HashMap<String, Vec<Symbol>> = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::ScorerMismatch(format!("invalid vocabulary symbol {s:?}")));
            }
            if index.insert(s.clone(), i as Symbol).is_some() {
                return Err(Error::ScorerMismatch(format!("duplicate vocabulary symbol {s:?}")));
            }
            lower.entry(s.to_lowercase()).or_default().push(i as Symbol);
        }
        let mut order: Vec<usize> = (0..symbols.len()).collect();
        order.sort_by(|a, b| symbols[*a].cmp(&symbols[*b]));
        let mut lex_rank = vec![0u32; symbols.len()];
        for (rank, i) in order.into_iter().enumerate() {
            lex_rank[i] = rank as u32;
        }
        let eos = index[eos];
        Ok(Self { symbols, index, lower, lex_rank, eos })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn eos(&self) -> Symbol {
        self.eos
    }

    pub fn get(&self, word: &str) -> Option<Symbol> {
        self.index.get(word).copied()
    }

    /// Symbols whose lowercase form equals `word` (lowercase).
    pub fn lowercase_matches(&self, word: &str) -> &[Symbol] {
        self.lower.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn symbol(&self, id: Symbol) -> &str {
        &self.symbols[id as usize]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Position of the symbol in lexicographic order; used for tie breaks.
    pub fn lex_rank(&self, id: Symbol) -> u32 {
        self.lex_rank[id as usize]
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<Symbol>> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                self.get(w)
                    .ok_or_else(|| Error::ScorerMismatch(format!("symbol {w:?} is not in the scorer vocabulary")))
            })
            .collect()
    }

    /// Tokenizes text with [`tokenize`] and encodes it.
    pub fn encode_text(&self, text: &str) -> Result<Vec<Symbol>> {
        self.encode(&tokenize(text))
    }

    /// Words of a symbol sequence, with end-of-sequence symbols removed.
    pub fn words(&self, ids: &[Symbol]) -> Vec<String> {
        ids.iter().filter(|&&t| t != self.eos).map(|&t| self.symbol(t).to_string()).collect()
    }

    pub fn check(&self, ids: &[Symbol]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.len()) {
            Some(bad) => Err(Error::ScorerMismatch(format!("symbol id {bad} outside vocabulary of {}", self.len()))),
            None => Ok(()),
        }
    }
}

/// Next-symbol distribution over a fixed vocabulary.
///
/// `next_log_probs` must be deterministic for a given prefix and return one
/// natural-log probability per vocabulary symbol (log-sum-exp ≈ 0).
pub trait LmScorer: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;
    fn next_log_probs(&self, prefix: &[Symbol]) -> Result<Vec<f64>>;
}

/// Log of the normalizing constant; used to check scorer output.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Table-driven toy scorer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backoff {
    /// Prefixes missing from the table get the uniform distribution.
    #[default]
    Uniform,
    /// Missing prefixes use the longest listed suffix context, then uniform.
    Suffix,
}

fn default_eos() -> String {
    DEFAULT_EOS.to_string()
}

/// On-disk form of a [`ToyScorer`]. Keys of `table` are prefixes written as
/// space-joined symbols (`""` is the empty prefix); values map symbols to
/// probabilities. Unlisted symbols share the remaining mass equally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorerSpec {
    pub vocabulary: Vec<String>,
    #[serde(default = "default_eos")]
    pub eos: String,
    #[serde(default)]
    pub backoff: Backoff,
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct ToyScorer {
    vocab: Vocabulary,
    table: HashMap<Vec<Symbol>, Vec<f64>>,
    uniform: Vec<f64>,
    backoff: Backoff,
}

impl ToyScorer {
    pub fn from_spec(spec: &ToyScorerSpec) -> Result<Self> {
        let vocab = Vocabulary::new(spec.vocabulary.iter().cloned(), &spec.eos)?;
        let n = vocab.len();
        let uniform = vec![-(n as f64).ln(); n];
        let mut table = HashMap::with_capacity(spec.table.len());
        for (prefix, dist) in &spec.table {
            let key = vocab.encode(&prefix.split_whitespace().collect::<Vec<_>>())?;
            let mut probs = vec![f64::NAN; n];
            let mut listed = 0.0;
            for (sym, p) in dist {
                let id = vocab
                    .get(sym)
                    .ok_or_else(|| Error::ScorerMismatch(format!("table symbol {sym:?} not in vocabulary")))?;
                if !(p.is_finite() && *p >= 0.0) {
                    return Err(Error::ScorerMismatch(format!("probability {p} for {sym:?} is invalid")));
                }
                probs[id as usize] = *p;
                listed += p;
            }
            let unlisted = probs.iter().filter(|p| p.is_nan()).count();
            let rest = if unlisted > 0 && listed < 1.0 { (1.0 - listed) / unlisted as f64 } else { 0.0 };
            for p in probs.iter_mut().filter(|p| p.is_nan()) {
                *p = rest;
            }
            let total: f64 = probs.iter().sum();
            if total <= 0.0 {
                return Err(Error::ScorerMismatch(format!("prefix {prefix:?} has no probability mass")));
            }
            table.insert(key, probs.iter().map(|p| (p / total).ln()).collect());
        }
        Ok(Self { vocab, table, uniform, backoff: spec.backoff })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ToyScorerSpec = serde_json::from_str(json).json_context(|| "toy scorer".to_string())?;
        Self::from_spec(&spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(path)?;
        let spec: ToyScorerSpec = serde_json::from_str(&text).json_context(|| path.display().to_string())?;
        Self::from_spec(&spec)
    }
}

impl LmScorer for ToyScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[Symbol]) -> Result<Vec<f64>> {
        self.vocab.check(prefix)?;
        if let Some(v) = self.table.get(prefix) {
            return Ok(v.clone());
        }
        if self.backoff == Backoff::Suffix {
            for start in 1..=prefix.len() {
                if let Some(v) = self.table.get(&prefix[start..]) {
                    return Ok(v.clone());
                }
            }
        }
        Ok(self.uniform.clone())
    }
}

// ---------------------------------------------------------------------------
// Interpolated trigram scorer trained from text
// ---------------------------------------------------------------------------

/// Word trigram model with linear interpolation down to an add-k unigram.
/// Every vocabulary symbol has non-zero probability in every context.
#[derive(Debug, Clone)]
pub struct NgramScorer {
    vocab: Vocabulary,
    unigram: Vec<f64>,
    bigram: HashMap<Symbol, Vec<(Symbol, f64)>>,
    trigram: HashMap<(Symbol, Symbol), Vec<(Symbol, f64)>>,
    weights: [f64; 3],
}

impl NgramScorer {
    /// Trains on sentences (one per element). `extra_vocab` words are added
    /// to the vocabulary with only smoothed unigram mass.
    pub fn train<S: AsRef<str>>(
        sentences: &[S],
        extra_vocab: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let tokenized: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s.as_ref())).collect();
        let mut words: BTreeSet<String> = tokenized.iter().flatten().cloned().collect();
        words.extend(extra_vocab.into_iter().flat_map(|w| tokenize(&w)));
        words.remove(DEFAULT_EOS);
        let vocab = Vocabulary::new(words, DEFAULT_EOS)?;
        let n = vocab.len();
        let eos = vocab.eos();

        let mut uni_counts = vec![0.0f64; n];
        let mut bi: HashMap<Symbol, BTreeMap<Symbol, f64>> = HashMap::new();
        let mut tri: HashMap<(Symbol, Symbol), BTreeMap<Symbol, f64>> = HashMap::new();
        for sent in &tokenized {
            let mut ids = vocab.encode(sent)?;
            ids.push(eos);
            for (i, &w) in ids.iter().enumerate() {
                uni_counts[w as usize] += 1.0;
                if i >= 1 {
                    *bi.entry(ids[i - 1]).or_default().entry(w).or_default() += 1.0;
                }
                if i >= 2 {
                    *tri.entry((ids[i - 2], ids[i - 1])).or_default().entry(w).or_default() += 1.0;
                }
            }
        }
        let k = 0.1;
        let total: f64 = uni_counts.iter().sum::<f64>() + k * n as f64;
        let unigram = uni_counts.iter().map(|c| (c + k) / total).collect();
        let normalize = |m: BTreeMap<Symbol, f64>| {
            let t: f64 = m.values().sum();
            m.into_iter().map(|(s, c)| (s, c / t)).collect::<Vec<_>>()
        };
        Ok(Self {
            vocab,
            unigram,
            bigram: bi.into_iter().map(|(k, m)| (k, normalize(m))).collect(),
            trigram: tri.into_iter().map(|(k, m)| (k, normalize(m))).collect(),
            weights: [0.6, 0.3, 0.1],
        })
    }

    pub fn load_corpus(path: &Path, extra_vocab: impl IntoIterator<Item = String>) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(path)?;
        let sentences: Vec<&str> =
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self::train(&sentences, extra_vocab)
    }
}

impl LmScorer for NgramScorer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[Symbol]) -> Result<Vec<f64>> {
        self.vocab.check(prefix)?;
        let [w3, w2, w1] = self.weights;
        let n = prefix.len();
        let bigram = n.checked_sub(1).and_then(|i| self.bigram.get(&prefix[i]));
        let trigram = if n >= 2 { self.trigram.get(&(prefix[n - 2], prefix[n - 1])) } else { None };
        // Renormalize the interpolation weights over the available orders.
        let (a3, a2) = (if trigram.is_some() { w3 } else { 0.0 }, if bigram.is_some() { w2 } else { 0.0 });
        let z = a3 + a2 + w1;
        let mut probs: Vec<f64> = self.unigram.iter().map(|p| p * w1 / z).collect();
        for (s, p) in bigram.into_iter().flatten() {
            probs[*s as usize] += p * a2 / z;
        }
        for (s, p) in trigram.into_iter().flatten() {
            probs[*s as usize] += p * a3 / z;
        }
        Ok(probs.into_iter().map(f64::ln).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_basics() {
        let v = Vocabulary::new(["b".to_string(), "a".to_string()], DEFAULT_EOS).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.symbol(v.eos()), DEFAULT_EOS);
        assert!(v.lex_rank(1) < v.lex_rank(0));
        assert!(matches!(v.encode(&["c"]), Err(Error::ScorerMismatch(_))));
        assert!(Vocabulary::new(["a".to_string(), "a".to_string()], DEFAULT_EOS).is_err());
    }

    #[test]
    fn toy_scorer_normalizes_and_backs_off() {
        let json = r#"{"vocabulary":["a","b","c"],"table":{"":{"a":0.5},"a":{"b":1.0}}}"#;
        let s = ToyScorer::from_json(json).unwrap();
        let root = s.next_log_probs(&[]).unwrap();
        assert!((log_sum_exp(&root)).abs() < 1e-12);
        assert!((root[0].exp() - 0.5).abs() < 1e-12);
        assert!((root[1].exp() - 0.5 / 3.0).abs() < 1e-12);
        let after_a = s.next_log_probs(&[0]).unwrap();
        assert_eq!(after_a[1], 0.0);
        assert_eq!(after_a[2], f64::NEG_INFINITY);
        let missing = s.next_log_probs(&[1, 1]).unwrap();
        assert!((missing[0].exp() - 0.25).abs() < 1e-12);
        assert!(s.next_log_probs(&[9]).is_err());
    }

    #[test]
    fn suffix_backoff() {
        let json = r#"{"vocabulary":["a","b"],"backoff":"suffix","table":{"a":{"b":1.0}}}"#;
        let s = ToyScorer::from_json(json).unwrap();
        assert_eq!(s.next_log_probs(&[1, 0]).unwrap()[1], 0.0);
    }

    #[test]
    fn ngram_scorer_is_normalized() {
        let s = NgramScorer::train(&["penguins cannot fly .", "penguins swim well ."], ["owls".to_string()]).unwrap();
        let v = s.vocabulary();
        for prefix in [vec![], vec![v.get("penguins").unwrap()], v.encode(&["penguins", "cannot"]).unwrap()] {
            let lp = s.next_log_probs(&prefix).unwrap();
            assert!(log_sum_exp(&lp).abs() < 1e-9);
            assert!(lp.iter().all(|x| x.is_finite()));
        }
        let lp = s.next_log_probs(&v.encode(&["penguins", "cannot"]).unwrap()).unwrap();
        let best = (0..lp.len()).max_by(|a, b| lp[*a].total_cmp(&lp[*b])).unwrap();
        assert_eq!(v.symbol(best as Symbol), "fly");
    }
}
