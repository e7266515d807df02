//! Lexically constrained beam search over an abstract word-level scorer,
//! the unconstrained beam baseline, and perplexity.
//!
//! Symbols are whole words: a scorer backed by a sub-word model must expose
//! a word vocabulary (see the bridge client), so constraint n-grams always
//! align with symbol boundaries.
//!
//! Each step of [`constrained_decode`]:
//! 1. expands every live hypothesis with its `beam_size` most likely next
//!    symbols, plus any symbol that starts or continues an n-gram of an
//!    unmet inclusion clause;
//! 2. drops hypotheses that matched an exclusion clause;
//! 3. scores each candidate by `(satisfied + lookahead, log_prob / len)`,
//!    where lookahead counts inclusion clauses newly met by a greedy rollout;
//! 4. prunes candidates whose satisfied count trails the step maximum by more
//!    than the tolerance;
//! 5. fills the beam with the best candidate of every distinct
//!    satisfied-clause set first, then the rest in score order.
//!
//! Finished hypotheses (end symbol or `max_len`) are returned ordered by
//! (all clauses met, log-probability), ties broken lexicographically.

mod scorer;

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use scorer::{
    log_sum_exp, Backoff, LmScorer, NgramScorer, Symbol, ToyScorer, ToyScorerSpec, Vocabulary, DEFAULT_EOS,
};

use crate::template::{ClauseMode, ConstraintSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub beam_size: usize,
    /// Maximum completion length in symbols, end symbol included.
    pub max_len: usize,
    pub satisfaction_tolerance: usize,
    pub lookahead_steps: usize,
    /// Prompts kept per generic and template.
    pub k_p: usize,
    /// Outputs kept per generic and template.
    pub k_r: usize,
    pub per_prompt_cap: usize,
    pub seed: u64,
    /// When set, beam candidates are sampled from the tempered distribution
    /// instead of taken greedily.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_temperature: Option<f64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            max_len: 50,
            satisfaction_tolerance: 3,
            lookahead_steps: 3,
            k_p: 10,
            k_r: 10,
            per_prompt_cap: 2,
            seed: 0,
            sampling_temperature: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beam_size", self.beam_size),
            ("k_p", self.k_p),
            ("k_r", self.k_r),
            ("per_prompt_cap", self.per_prompt_cap),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Configuration(format!("{name} must be positive")));
        }
        if self.per_prompt_cap > self.k_r {
            return Err(Error::Configuration(format!(
                "per_prompt_cap ({}) exceeds k_r ({})",
                self.per_prompt_cap, self.k_r
            )));
        }
        if let Some(t) = self.sampling_temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Configuration(format!("sampling temperature {t} must be finite and positive")));
            }
        }
        Ok(())
    }
}

/// Incremental match state of one clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseState {
    pub clause_index: usize,
    /// Some n-gram occurred. For an exclusion clause this means violated.
    pub matched: bool,
    /// `(ngram index, matched prefix length)` of partial matches ending at
    /// the last symbol.
    pub partial_matches: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Completion symbols (the prompt is not included).
    pub tokens: Vec<Symbol>,
    pub log_prob: f64,
    pub clause_states: Vec<ClauseState>,
    /// Inclusion clauses matched plus exclusion clauses not violated.
    pub satisfied_count: usize,
    pub violated_exclusion: bool,
}

impl Hypothesis {
    fn root(clauses: &[CompiledClause]) -> Self {
        let clause_states = (0..clauses.len())
            .map(|i| ClauseState { clause_index: i, matched: false, partial_matches: Vec::new() })
            .collect();
        let satisfied_count = clauses.iter().filter(|c| c.mode == ClauseMode::Exclusion).count();
        Self { tokens: Vec::new(), log_prob: 0.0, clause_states, satisfied_count, violated_exclusion: false }
    }

    pub fn all_satisfied(&self) -> bool {
        !self.violated_exclusion && self.satisfied_count == self.clause_states.len()
    }

    pub fn normalized_log_prob(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Completion words with the end symbol removed.
    pub fn words(&self, vocab: &Vocabulary) -> Vec<String> {
        vocab.words(&self.tokens)
    }

    fn satisfied_set(&self, clauses: &[CompiledClause]) -> Vec<bool> {
        self.clause_states
            .iter()
            .zip(clauses)
            .map(|(s, c)| match c.mode {
                ClauseMode::Inclusion => s.matched,
                ClauseMode::Exclusion => !s.matched,
            })
            .collect()
    }

    fn extend(&self, token: Symbol, log_prob: f64, clauses: &[CompiledClause], eos: Symbol) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1);
        tokens.extend_from_slice(&self.tokens);
        tokens.push(token);
        let clause_states = if token == eos {
            self.clause_states.clone()
        } else {
            self.clause_states.iter().zip(clauses).map(|(s, c)| c.advance(s, token)).collect()
        };
        let mut satisfied_count = 0;
        let mut violated_exclusion = false;
        for (s, c) in clause_states.iter().zip(clauses) {
            match (c.mode, s.matched) {
                (ClauseMode::Inclusion, true) | (ClauseMode::Exclusion, false) => satisfied_count += 1,
                (ClauseMode::Exclusion, true) => violated_exclusion = true,
                _ => {}
            }
        }
        Self { tokens, log_prob: self.log_prob + log_prob, clause_states, satisfied_count, violated_exclusion }
    }

    fn inclusion_matches(&self, clauses: &[CompiledClause]) -> usize {
        self.clause_states
            .iter()
            .zip(clauses)
            .filter(|(s, c)| c.mode == ClauseMode::Inclusion && s.matched)
            .count()
    }
}

/// A clause with its n-grams resolved to symbol alternatives per position.
#[derive(Debug, Clone)]
struct CompiledClause {
    mode: ClauseMode,
    ngrams: Vec<Vec<Vec<Symbol>>>,
}

impl CompiledClause {
    fn position_matches(&self, ngram: usize, pos: usize, token: Symbol) -> bool {
        self.ngrams[ngram][pos].contains(&token)
    }

    fn advance(&self, state: &ClauseState, token: Symbol) -> ClauseState {
        if state.matched {
            return ClauseState { partial_matches: Vec::new(), ..state.clone() };
        }
        let mut matched = false;
        let mut partial = Vec::new();
        let continued = state.partial_matches.iter().map(|&(g, len)| (g, len));
        let fresh = (0..self.ngrams.len()).map(|g| (g, 0));
        for (g, len) in continued.chain(fresh) {
            if self.position_matches(g, len, token) {
                if len + 1 == self.ngrams[g].len() {
                    matched = true;
                } else {
                    partial.push((g, len + 1));
                }
            }
        }
        if matched {
            partial.clear();
        }
        partial.sort_unstable();
        partial.dedup();
        ClauseState { clause_index: state.clause_index, matched, partial_matches: partial }
    }

    /// Symbols that would start or extend an n-gram of this clause.
    fn helpful_tokens(&self, state: &ClauseState, out: &mut BTreeSet<Symbol>) {
        for ngram in &self.ngrams {
            out.extend(ngram[0].iter().copied());
        }
        for &(g, len) in &state.partial_matches {
            out.extend(self.ngrams[g][len].iter().copied());
        }
    }
}

fn compile(cs: &ConstraintSet, vocab: &Vocabulary) -> Vec<CompiledClause> {
    cs.clauses
        .iter()
        .map(|clause| CompiledClause {
            mode: clause.mode,
            ngrams: clause
                .ngram_words()
                .map(|words| words.iter().map(|w| vocab.lowercase_matches(&w.to_lowercase()).to_vec()).collect())
                // An n-gram with a word outside the vocabulary can never occur.
                .filter(|g: &Vec<Vec<Symbol>>| g.iter().all(|alts| !alts.is_empty()))
                .collect(),
        })
        .collect()
}

/// Per-clause satisfaction of a word sequence: inclusion holds when some
/// n-gram occurs contiguously, exclusion when none does. Case-insensitive.
pub fn satisfies<S: AsRef<str>>(cs: &ConstraintSet, words: &[S]) -> Vec<bool> {
    let text: Vec<String> = words.iter().map(|w| w.as_ref().to_lowercase()).collect();
    cs.clauses
        .iter()
        .map(|clause| {
            let found = clause.ngram_words().any(|ngram| {
                !ngram.is_empty()
                    && ngram.len() <= text.len()
                    && text.windows(ngram.len()).any(|win| win.iter().zip(&ngram).all(|(a, b)| a == b))
            });
            match clause.mode {
                ClauseMode::Inclusion => found,
                ClauseMode::Exclusion => !found,
            }
        })
        .collect()
}

/// One step of constrained decoding, reported to an observer.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub step: usize,
    /// Hypotheses kept in the beam that are still growing.
    pub live: &'a [Hypothesis],
    /// Largest satisfied count among this step's candidates.
    pub candidate_max: usize,
    pub tolerance: usize,
    /// Candidates removed by the tolerance rule.
    pub pruned: usize,
}

struct ScoreCache<'a> {
    lm: &'a dyn LmScorer,
    prompt: &'a [Symbol],
    entries: HashMap<Vec<Symbol>, Rc<Vec<f64>>>,
}

impl<'a> ScoreCache<'a> {
    fn new(lm: &'a dyn LmScorer, prompt: &'a [Symbol]) -> Self {
        Self { lm, prompt, entries: HashMap::new() }
    }

    fn get(&mut self, completion: &[Symbol]) -> Result<Rc<Vec<f64>>> {
        if let Some(v) = self.entries.get(completion) {
            return Ok(Rc::clone(v));
        }
        let mut prefix = Vec::with_capacity(self.prompt.len() + completion.len());
        prefix.extend_from_slice(self.prompt);
        prefix.extend_from_slice(completion);
        let lp = self.lm.next_log_probs(&prefix)?;
        let n = self.lm.vocabulary().len();
        if lp.len() != n {
            return Err(Error::ScorerMismatch(format!("scorer returned {} log-probs for {} symbols", lp.len(), n)));
        }
        let lp = Rc::new(lp);
        self.entries.insert(completion.to_vec(), Rc::clone(&lp));
        Ok(lp)
    }

    fn retain_min_len(&mut self, min_len: usize) {
        self.entries.retain(|k, _| k.len() >= min_len);
    }
}

fn lex_cmp(a: &[Symbol], b: &[Symbol], vocab: &Vocabulary) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match vocab.lex_rank(*x).cmp(&vocab.lex_rank(*y)) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}

/// The `k` best next symbols: by log-probability (lexicographic tie break),
/// or by Gumbel-perturbed tempered score in sampling mode.
fn top_tokens(lp: &[f64], k: usize, vocab: &Vocabulary, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Vec<Symbol> {
    let mut keyed: Vec<(f64, Symbol)> = lp
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| (*v, i as Symbol))
        .collect();
    if let Some(t) = cfg.sampling_temperature {
        for entry in keyed.iter_mut() {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            entry.0 = entry.0 / t - (-u.ln()).ln();
        }
    }
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| vocab.lex_rank(a.1).cmp(&vocab.lex_rank(b.1))));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, s)| s).collect()
}

fn is_finished(h: &Hypothesis, eos: Symbol, max_len: usize) -> bool {
    h.tokens.last() == Some(&eos) || h.tokens.len() >= max_len
}

fn final_order(hyps: &mut [Hypothesis], vocab: &Vocabulary) {
    hyps.sort_by(|a, b| {
        b.all_satisfied()
            .cmp(&a.all_satisfied())
            .then_with(|| b.log_prob.total_cmp(&a.log_prob))
            .then_with(|| lex_cmp(&a.tokens, &b.tokens, vocab))
    });
}

fn check_inputs(lm: &dyn LmScorer, prompt: &[Symbol], cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    let vocab = lm.vocabulary();
    if vocab.is_empty() {
        return Err(Error::ScorerMismatch("scorer has an empty vocabulary".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must not be empty".into()));
    }
    vocab.check(prompt)
}

fn greedy_lookahead(
    start: &Hypothesis,
    clauses: &[CompiledClause],
    cache: &mut ScoreCache<'_>,
    cfg: &DecoderConfig,
    vocab: &Vocabulary,
) -> Result<usize> {
    let before = start.inclusion_matches(clauses);
    let eos = vocab.eos();
    let mut cur = start.clone();
    for _ in 0..cfg.lookahead_steps {
        if cur.tokens.len() >= cfg.max_len {
            break;
        }
        let lp = cache.get(&cur.tokens)?;
        let Some(best) = (0..lp.len())
            .filter(|&i| lp[i].is_finite())
            .max_by(|&a, &b| {
                lp[a].total_cmp(&lp[b]).then_with(|| vocab.lex_rank(b as Symbol).cmp(&vocab.lex_rank(a as Symbol)))
            })
        else {
            break;
        };
        if best as Symbol == eos {
            break;
        }
        cur = cur.extend(best as Symbol, lp[best], clauses, eos);
    }
    Ok(cur.inclusion_matches(clauses) - before)
}

/// Constrained beam search. See the module documentation for the step rule.
pub fn constrained_decode(
    lm: &dyn LmScorer,
    prompt: &[Symbol],
    cs: &ConstraintSet,
    cfg: &DecoderConfig,
) -> Result<Vec<Hypothesis>> {
    constrained_decode_with(lm, prompt, cs, cfg, &mut |_| {})
}

/// [`constrained_decode`] with a per-step observer.
pub fn constrained_decode_with(
    lm: &dyn LmScorer,
    prompt: &[Symbol],
    cs: &ConstraintSet,
    cfg: &DecoderConfig,
    observer: &mut dyn FnMut(&StepReport<'_>),
) -> Result<Vec<Hypothesis>> {
    check_inputs(lm, prompt, cfg)?;
    let vocab = lm.vocabulary();
    let eos = vocab.eos();
    let clauses = compile(cs, vocab);
    let has_inclusion = clauses.iter().any(|c| c.mode == ClauseMode::Inclusion);
    let root = Hypothesis::root(&clauses);
    if cfg.max_len == 0 {
        return Ok(vec![root]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = ScoreCache::new(lm, prompt);
    let mut live = vec![root];
    let mut finished = Vec::new();

    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::new();
        for h in &live {
            let lp = cache.get(&h.tokens)?;
            let mut tokens: BTreeSet<Symbol> = top_tokens(&lp, cfg.beam_size, vocab, cfg, &mut rng).into_iter().collect();
            for (state, clause) in h.clause_states.iter().zip(&clauses) {
                if clause.mode == ClauseMode::Inclusion && !state.matched {
                    clause.helpful_tokens(state, &mut tokens);
                }
            }
            for t in tokens {
                if !lp[t as usize].is_finite() {
                    continue;
                }
                let c = h.extend(t, lp[t as usize], &clauses, eos);
                if !c.violated_exclusion {
                    candidates.push(c);
                }
            }
        }
        if candidates.is_empty() {
            live.clear();
            break;
        }

        let candidate_max = candidates.iter().map(|c| c.satisfied_count).max().unwrap_or(0);
        let floor = candidate_max.saturating_sub(cfg.satisfaction_tolerance);
        let before = candidates.len();
        candidates.retain(|c| c.satisfied_count >= floor);
        let pruned = before - candidates.len();

        let mut lookahead = vec![0usize; candidates.len()];
        if has_inclusion && cfg.lookahead_steps > 0 {
            for (c, la) in candidates.iter().zip(lookahead.iter_mut()) {
                if !is_finished(c, eos, cfg.max_len) {
                    *la = greedy_lookahead(c, &clauses, &mut cache, cfg, vocab)?;
                }
            }
        }

        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (&candidates[a], &candidates[b]);
            (cb.satisfied_count + lookahead[b])
                .cmp(&(ca.satisfied_count + lookahead[a]))
                .then_with(|| cb.normalized_log_prob().total_cmp(&ca.normalized_log_prob()))
                .then_with(|| lex_cmp(&ca.tokens, &cb.tokens, vocab))
        });

        // Best of every satisfied-clause group first, then fill by score.
        let mut groups = BTreeSet::new();
        let mut chosen = vec![false; candidates.len()];
        let mut picked = Vec::with_capacity(cfg.beam_size);
        for &i in &order {
            if picked.len() == cfg.beam_size {
                break;
            }
            if groups.insert(candidates[i].satisfied_set(&clauses)) {
                chosen[i] = true;
                picked.push(i);
            }
        }
        for &i in &order {
            if picked.len() == cfg.beam_size {
                break;
            }
            if !chosen[i] {
                chosen[i] = true;
                picked.push(i);
            }
        }
        picked.sort_by_key(|i| order.iter().position(|o| o == i));

        let mut slots: Vec<Option<Hypothesis>> = candidates.into_iter().map(Some).collect();
        live = Vec::with_capacity(picked.len());
        for i in picked {
            let h = slots[i].take().expect("picked once");
            if is_finished(&h, eos, cfg.max_len) {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
        cache.retain_min_len(step + 1);
        observer(&StepReport { step, live: &live, candidate_max, tolerance: cfg.satisfaction_tolerance, pruned });
    }
    final_order(&mut finished, vocab);
    Ok(finished)
}

/// Plain beam search ranked by length-normalized log-probability; finished
/// hypotheses are returned by raw log-probability.
pub fn beam_decode(lm: &dyn LmScorer, prompt: &[Symbol], cfg: &DecoderConfig) -> Result<Vec<Hypothesis>> {
    check_inputs(lm, prompt, cfg)?;
    let vocab = lm.vocabulary();
    let eos = vocab.eos();
    let root = Hypothesis::root(&[]);
    if cfg.max_len == 0 {
        return Ok(vec![root]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut live = vec![root];
    let mut finished = Vec::new();
    let mut prefix = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for h in &live {
            prefix.clear();
            prefix.extend_from_slice(prompt);
            prefix.extend_from_slice(&h.tokens);
            let lp = lm.next_log_probs(&prefix)?;
            if lp.len() != vocab.len() {
                return Err(Error::ScorerMismatch(format!(
                    "scorer returned {} log-probs for {} symbols",
                    lp.len(),
                    vocab.len()
                )));
            }
            let mut tokens = top_tokens(&lp, cfg.beam_size, vocab, cfg, &mut rng);
            tokens.sort_unstable();
            for t in tokens {
                candidates.push(h.extend(t, lp[t as usize], &[], eos));
            }
        }
        candidates.sort_by(|a, b| {
            b.normalized_log_prob()
                .total_cmp(&a.normalized_log_prob())
                .then_with(|| lex_cmp(&a.tokens, &b.tokens, vocab))
        });
        candidates.truncate(cfg.beam_size);
        live = Vec::new();
        for h in candidates {
            if is_finished(&h, eos, cfg.max_len) {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }
    final_order(&mut finished, vocab);
    Ok(finished)
}

/// Sum of log-probabilities of `continuation` after `context`.
pub fn sequence_log_prob(lm: &dyn LmScorer, context: &[Symbol], continuation: &[Symbol]) -> Result<f64> {
    let vocab = lm.vocabulary();
    vocab.check(context)?;
    vocab.check(continuation)?;
    let mut prefix = context.to_vec();
    let mut total = 0.0;
    for &t in continuation {
        let lp = lm.next_log_probs(&prefix)?;
        total += *lp
            .get(t as usize)
            .ok_or_else(|| Error::ScorerMismatch("scorer returned a short log-prob vector".into()))?;
        prefix.push(t);
    }
    Ok(total)
}

/// `exp(-(1/n) Σ log p(token_i | tokens_<i))`.
pub fn perplexity(lm: &dyn LmScorer, tokens: &[Symbol]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("perplexity needs at least one token".into()));
    }
    let lp = sequence_log_prob(lm, &[], tokens)?;
    Ok((-lp / tokens.len() as f64).exp())
}
