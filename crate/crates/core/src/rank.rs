//! Prompt selection by perplexity, output ranking by combined perplexity and
//! NLI ranks, and NLI label filtering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::decode::{perplexity, DecoderConfig, LmScorer};
use crate::lexicon::{singularize, tokenize, COPULAS, DETERMINERS, MODALS, NEGATIONS, PREPOSITIONS};
use crate::template::{ExemplarKind, Prompt, TemplateId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    /// The label a good exemplar of `kind` should receive.
    pub fn target(kind: ExemplarKind) -> Self {
        match kind {
            ExemplarKind::Exception => NliLabel::Contradiction,
            ExemplarKind::Instantiation => NliLabel::Entailment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliJudgment {
    pub entail: f64,
    pub neutral: f64,
    pub contradict: f64,
}

impl NliJudgment {
    pub const SUM_TOLERANCE: f64 = 1e-3;

    pub fn new(entail: f64, neutral: f64, contradict: f64) -> Result<Self> {
        let j = Self { entail, neutral, contradict };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.entail, self.neutral, self.contradict];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!("NLI probabilities out of range: {self:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!("NLI probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn probability(&self, label: NliLabel) -> f64 {
        match label {
            NliLabel::Entailment => self.entail,
            NliLabel::Neutral => self.neutral,
            NliLabel::Contradiction => self.contradict,
        }
    }

    /// Most probable label. Exact ties resolve in the order
    /// entailment, neutral, contradiction.
    pub fn argmax(&self) -> NliLabel {
        let mut best = NliLabel::Entailment;
        for label in [NliLabel::Neutral, NliLabel::Contradiction] {
            if self.probability(label) > self.probability(best) {
                best = label;
            }
        }
        best
    }
}

pub trait NliProvider: Send + Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliJudgment>;

    fn judge_batch(&self, pairs: &[(String, String)]) -> Result<Vec<NliJudgment>> {
        pairs.iter().map(|(p, h)| self.judge(p, h)).collect()
    }

    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Deterministic word-overlap NLI stub with optional exact-pair overrides.
///
/// A hypothesis whose negation polarity differs from the premise leans
/// towards contradiction, otherwise towards entailment; the more content
/// words it shares with the premise, the stronger the lean. Without shared
/// content the judgment is neutral.
#[derive(Debug, Clone, Default)]
pub struct RuleNli {
    overrides: HashMap<(String, String), NliJudgment>,
}

impl RuleNli {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, premise: &str, hypothesis: &str, judgment: NliJudgment) -> Self {
        self.overrides.insert((premise.to_string(), hypothesis.to_string()), judgment);
        self
    }

    fn content_words(text: &str) -> (BTreeSet<String>, bool) {
        let mut negated = false;
        let mut words = BTreeSet::new();
        for tok in tokenize(text) {
            if NEGATIONS.contains(&tok.as_str()) {
                negated = !negated;
                continue;
            }
            let function_word = [MODALS, COPULAS, DETERMINERS, PREPOSITIONS]
                .iter()
                .any(|list| list.contains(&tok.as_str()));
            if function_word || !tok.chars().any(char::is_alphanumeric) {
                continue;
            }
            words.insert(singularize(&tok));
        }
        (words, negated)
    }
}

impl NliProvider for RuleNli {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliJudgment> {
        if let Some(j) = self.overrides.get(&(premise.to_string(), hypothesis.to_string())) {
            return Ok(*j);
        }
        let (p_words, p_neg) = Self::content_words(premise);
        let (h_words, h_neg) = Self::content_words(hypothesis);
        let overlap = if h_words.is_empty() {
            0.0
        } else {
            h_words.intersection(&p_words).count() as f64 / h_words.len() as f64
        };
        let j = if p_neg != h_neg {
            let contradict = 0.3 + 0.65 * overlap;
            NliJudgment { entail: 0.05, neutral: 0.95 - contradict, contradict }
        } else {
            let entail = 0.2 + 0.7 * overlap;
            NliJudgment { entail, neutral: 0.95 - entail, contradict: 0.05 }
        };
        Ok(j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliFilterMode {
    NliSim,
    NliNeu,
    NliSimPlusNeu,
}

impl NliFilterMode {
    pub const ALL: [NliFilterMode; 3] = [NliFilterMode::NliSim, NliFilterMode::NliNeu, NliFilterMode::NliSimPlusNeu];

    pub fn keeps(self, judgment: &NliJudgment, kind: ExemplarKind) -> bool {
        let label = judgment.argmax();
        let sim = label == NliLabel::target(kind);
        let neu = label == NliLabel::Neutral;
        match self {
            NliFilterMode::NliSim => sim,
            NliFilterMode::NliNeu => neu,
            NliFilterMode::NliSimPlusNeu => sim || neu,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliFilterMode::NliSim => "nli_sim",
            NliFilterMode::NliNeu => "nli_neu",
            NliFilterMode::NliSimPlusNeu => "nli_sim_plus_neu",
        }
    }
}

/// Keeps the items whose judgment passes `mode`, in input order.
pub fn nli_filter<T>(items: Vec<(T, NliJudgment)>, kind: ExemplarKind, mode: NliFilterMode) -> Vec<(T, NliJudgment)> {
    items.into_iter().filter(|(_, j)| mode.keeps(j, kind)).collect()
}

/// Number of prompts kept out of `n`: `k_p`, or half (rounded up) when
/// fewer than `k_p` exist.
pub fn prompt_keep_count(n: usize, k_p: usize) -> usize {
    if n < k_p {
        n.div_ceil(2)
    } else {
        k_p
    }
}

/// Scores every prompt's perplexity and keeps the most fluent ones,
/// ascending by perplexity with ties broken by prompt id.
pub fn select_prompts(prompts: Vec<Prompt>, lm: &dyn LmScorer, cfg: &DecoderConfig) -> Result<Vec<Prompt>> {
    let keep = prompt_keep_count(prompts.len(), cfg.k_p);
    let mut scored = Vec::with_capacity(prompts.len());
    for mut p in prompts {
        let tokens = lm.vocabulary().encode_text(&p.text)?;
        p.perplexity = Some(perplexity(lm, &tokens)?);
        scored.push(p);
    }
    scored.sort_by(|a, b| {
        a.perplexity
            .unwrap_or(f64::INFINITY)
            .total_cmp(&b.perplexity.unwrap_or(f64::INFINITY))
            .then_with(|| a.id.cmp(&b.id))
    });
    scored.truncate(keep);
    Ok(scored)
}

/// A decoder output awaiting ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub text: String,
    pub prompt_id: String,
}

/// An output with its fluency and relevance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub text: String,
    pub prompt_id: String,
    pub perplexity: f64,
    pub nli: NliJudgment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedOutput {
    pub text: String,
    pub prompt_id: String,
    pub template_id: TemplateId,
    pub perplexity: f64,
    pub nli: NliJudgment,
    pub ppl_rank: usize,
    pub nli_rank: usize,
    pub combined: f64,
}

/// 1-based dense ranks of `values` in the order given by `cmp`.
pub fn dense_ranks(values: &[f64], cmp: impl Fn(f64, f64) -> Ordering) -> Vec<usize> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| cmp(*a, *b));
    distinct.dedup_by(|a, b| cmp(*a, *b) == Ordering::Equal);
    values
        .iter()
        .map(|v| distinct.partition_point(|d| cmp(*d, *v) == Ordering::Less) + 1)
        .collect()
}

/// Ranks already-scored outputs of one (generic, template) group and
/// selects at most `k_r` of them, at most `per_prompt_cap` per prompt.
/// Ranks are computed over the whole group before the cap is applied.
pub fn rank_scored(
    outs: Vec<ScoredOutput>,
    template_id: TemplateId,
    kind: ExemplarKind,
    cfg: &DecoderConfig,
) -> Vec<RankedOutput> {
    let label = NliLabel::target(kind);
    let ppls: Vec<f64> = outs.iter().map(|o| o.perplexity).collect();
    let nlis: Vec<f64> = outs.iter().map(|o| o.nli.probability(label)).collect();
    let ppl_ranks = dense_ranks(&ppls, |a, b| a.total_cmp(&b));
    let nli_ranks = dense_ranks(&nlis, |a, b| b.total_cmp(&a));
    let mut ranked: Vec<RankedOutput> = outs
        .into_iter()
        .zip(ppl_ranks.into_iter().zip(nli_ranks))
        .map(|(o, (ppl_rank, nli_rank))| RankedOutput {
            text: o.text,
            prompt_id: o.prompt_id,
            template_id,
            perplexity: o.perplexity,
            nli: o.nli,
            ppl_rank,
            nli_rank,
            combined: (ppl_rank + nli_rank) as f64 / 2.0,
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.combined
            .total_cmp(&b.combined)
            .then_with(|| a.ppl_rank.cmp(&b.ppl_rank))
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.prompt_id.cmp(&b.prompt_id))
    });
    let mut per_prompt: BTreeMap<String, usize> = BTreeMap::new();
    let mut selected = Vec::with_capacity(cfg.k_r);
    for r in ranked {
        if selected.len() == cfg.k_r {
            break;
        }
        let n = per_prompt.entry(r.prompt_id.clone()).or_default();
        if *n < cfg.per_prompt_cap {
            *n += 1;
            selected.push(r);
        }
    }
    selected
}

/// Scores outputs with `lm` (perplexity of the output text) and `nli`
/// (premise: the generic, hypothesis: the output), then ranks them.
pub fn rank_outputs(
    outs: Vec<Output>,
    lm: &dyn LmScorer,
    nli: &dyn NliProvider,
    generic_text: &str,
    template_id: TemplateId,
    kind: ExemplarKind,
    cfg: &DecoderConfig,
) -> Result<Vec<RankedOutput>> {
    let pairs: Vec<(String, String)> = outs.iter().map(|o| (generic_text.to_string(), o.text.clone())).collect();
    let judgments = nli
        .judge_batch(&pairs)
        .map_err(|e| Error::Ranking(format!("NLI provider failed for {template_id}: {e}")))?;
    if judgments.len() != outs.len() {
        return Err(Error::Ranking(format!(
            "NLI provider returned {} judgments for {} outputs",
            judgments.len(),
            outs.len()
        )));
    }
    let mut scored = Vec::with_capacity(outs.len());
    for (o, j) in outs.into_iter().zip(judgments) {
        j.validate().map_err(|e| Error::Ranking(e.to_string()))?;
        let tokens = lm.vocabulary().encode_text(&o.text)?;
        let ppl = perplexity(lm, &tokens)?;
        scored.push(ScoredOutput { text: o.text, prompt_id: o.prompt_id, perplexity: ppl, nli: j });
    }
    Ok(rank_scored(scored, template_id, kind, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(text: &str, prompt: &str, ppl: f64, c: f64) -> ScoredOutput {
        ScoredOutput {
            text: text.into(),
            prompt_id: prompt.into(),
            perplexity: ppl,
            nli: NliJudgment { entail: (1.0 - c) / 2.0, neutral: (1.0 - c) / 2.0, contradict: c },
        }
    }

    #[test]
    fn keep_counts() {
        assert_eq!(prompt_keep_count(25, 10), 10);
        assert_eq!(prompt_keep_count(10, 10), 10);
        assert_eq!(prompt_keep_count(6, 10), 3);
        assert_eq!(prompt_keep_count(1, 10), 1);
        assert_eq!(prompt_keep_count(0, 10), 0);
    }

    #[test]
    fn dense_ranks_share_and_leave_no_gaps() {
        let r = dense_ranks(&[3.0, 1.0, 3.0, 2.0], |a, b| a.total_cmp(&b));
        assert_eq!(r, vec![3, 1, 3, 2]);
        let r = dense_ranks(&[0.2, 0.9, 0.9], |a, b| b.total_cmp(&a));
        assert_eq!(r, vec![2, 1, 1]);
    }

    #[test]
    fn tie_on_combined_falls_back_to_ppl_rank() {
        let outs = vec![scored("b first", "p1", 1.0, 0.2), scored("a second", "p2", 2.0, 0.8)];
        let r = rank_scored(outs, TemplateId::T1, ExemplarKind::Exception, &DecoderConfig::default());
        assert_eq!((r[0].ppl_rank, r[0].nli_rank, r[0].combined), (1, 2, 1.5));
        assert_eq!((r[1].ppl_rank, r[1].nli_rank, r[1].combined), (2, 1, 1.5));
        assert_eq!(r[0].text, "b first");
    }

    #[test]
    fn single_output_combined_one() {
        let r = rank_scored(vec![scored("x", "p", 5.0, 0.5)], TemplateId::T2, ExemplarKind::Exception, &DecoderConfig::default());
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].combined, 1.0);
    }

    #[test]
    fn caps_are_respected() {
        let outs: Vec<_> = (0..30)
            .map(|i| scored(&format!("out {i}"), &format!("p{}", i % 5), i as f64, (i % 7) as f64 / 10.0))
            .collect();
        let r = rank_scored(outs, TemplateId::T3, ExemplarKind::Exception, &DecoderConfig::default());
        assert!(r.len() <= 10);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for o in &r {
            *counts.entry(&o.prompt_id).or_default() += 1;
        }
        assert!(counts.values().all(|&n| n <= 2));
    }

    #[test]
    fn filter_examples() {
        let j = NliJudgment::new(0.1, 0.2, 0.7).unwrap();
        assert!(NliFilterMode::NliSim.keeps(&j, ExemplarKind::Exception));
        assert!(!NliFilterMode::NliNeu.keeps(&j, ExemplarKind::Exception));
        let j = NliJudgment::new(0.4, 0.5, 0.1).unwrap();
        assert!(NliFilterMode::NliSimPlusNeu.keeps(&j, ExemplarKind::Instantiation));
        let kept = nli_filter(vec![("a", j)], ExemplarKind::Instantiation, NliFilterMode::NliSim);
        assert!(kept.is_empty());
    }

    #[test]
    fn judgment_validation() {
        assert!(NliJudgment::new(0.5, 0.5, 0.5).is_err());
        assert!(NliJudgment::new(-0.1, 0.6, 0.5).is_err());
        assert!(NliJudgment::new(0.3334, 0.3333, 0.3333).is_ok());
    }

    #[test]
    fn rule_nli_leans() {
        let nli = RuleNli::new();
        let j = nli.judge("Birds can fly", "Penguins cannot fly").unwrap();
        assert_eq!(j.argmax(), NliLabel::Contradiction);
        j.validate().unwrap();
        let j = nli.judge("Birds can fly", "Sparrows can fly").unwrap();
        assert_eq!(j.argmax(), NliLabel::Entailment);
        let j = nli.judge("Birds can fly", "Ostriches run quickly").unwrap();
        assert_eq!(j.argmax(), NliLabel::Neutral);
        let fixed = NliJudgment::new(1.0, 0.0, 0.0).unwrap();
        let nli = nli.with("a", "b", fixed);
        assert_eq!(nli.judge("a", "b").unwrap(), fixed);
    }
}
