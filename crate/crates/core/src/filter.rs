//! Viability filtering and validity selection of exemplars through
//! pluggable discriminators.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jsonl;
use crate::rank::NliJudgment;
use crate::template::{ExemplarKind, TemplateId};
use crate::{Error, Result};

pub const EXEMPLAR_SCHEMA: &str = "genex.exemplar";
pub const EXEMPLAR_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    Viability,
    ValidityInstantiation,
    ValidityException,
}

impl DiscriminatorKind {
    pub fn validity_for(kind: ExemplarKind) -> Self {
        match kind {
            ExemplarKind::Exception => DiscriminatorKind::ValidityException,
            ExemplarKind::Instantiation => DiscriminatorKind::ValidityInstantiation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorScore {
    pub probability: f64,
    pub model_id: String,
    pub kind: DiscriminatorKind,
}

pub trait DiscriminatorProvider: Send + Sync {
    fn kind(&self) -> DiscriminatorKind;

    fn model_id(&self) -> &str;

    /// Probability that `exemplar` is a good output for `generic`.
    fn score(&self, generic: &str, exemplar: &str) -> Result<f64>;

    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Fallback of [`KeywordDiscriminator`] for texts matching no rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum StubDefault {
    Constant(f64),
    /// Deterministic pseudo-score in `[low, 1)` from a hash of model id and
    /// exemplar text.
    Hash { low: f64 },
}

/// Deterministic stub: the first keyword found in the lowercase exemplar
/// decides the score, otherwise the default applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordDiscriminator {
    pub kind: DiscriminatorKind,
    pub model_id: String,
    #[serde(default)]
    pub rules: Vec<(String, f64)>,
    pub default: StubDefault,
}

impl KeywordDiscriminator {
    pub fn constant(kind: DiscriminatorKind, p: f64) -> Self {
        Self { kind, model_id: format!("stub-constant-{p}"), rules: Vec::new(), default: StubDefault::Constant(p) }
    }

    pub fn hashed(kind: DiscriminatorKind, model_id: &str, low: f64) -> Self {
        Self { kind, model_id: model_id.to_string(), rules: Vec::new(), default: StubDefault::Hash { low } }
    }

    pub fn rule(mut self, keyword: &str, p: f64) -> Self {
        self.rules.push((keyword.to_lowercase(), p));
        self
    }
}

impl DiscriminatorProvider for KeywordDiscriminator {
    fn kind(&self) -> DiscriminatorKind {
        self.kind
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn score(&self, _generic: &str, exemplar: &str) -> Result<f64> {
        let words: Vec<String> = crate::lexicon::tokenize(exemplar);
        for (kw, p) in &self.rules {
            let kw_words: Vec<&str> = kw.split_whitespace().collect();
            if !kw_words.is_empty()
                && words.windows(kw_words.len()).any(|w| w.iter().zip(&kw_words).all(|(a, b)| a == b))
            {
                return Ok(*p);
            }
        }
        Ok(match self.default {
            StubDefault::Constant(p) => p,
            StubDefault::Hash { low } => {
                let digest = Sha256::new().chain_update(self.model_id.as_bytes()).chain_update([0]).chain_update(exemplar.as_bytes()).finalize();
                let bits = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                low + (1.0 - low) * unit
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectStage {
    Nli,
    Viability,
    Validity,
    ScorerUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarStatus {
    Candidate,
    Viable,
    SelectedValid,
    Rejected(RejectStage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub generic_id: String,
    pub generic_text: String,
    pub template_id: TemplateId,
    pub kind: ExemplarKind,
    pub prompt_id: String,
    pub text: String,
    pub perplexity: f64,
    pub ppl_rank: usize,
    pub nli_rank: usize,
    pub combined_rank: f64,
    pub nli: NliJudgment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viability: Option<DiscriminatorScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<DiscriminatorScore>,
    pub status: ExemplarStatus,
    /// Set when the viability scorer failed and the run was fail-open.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub scorer_unavailable: bool,
}

fn checked_probability(p: f64, scorer: &dyn DiscriminatorProvider) -> Result<f64> {
    if p.is_finite() && (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Provider(format!("discriminator {} returned probability {p}", scorer.model_id())))
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::Configuration(format!("threshold {threshold} outside [0, 1]")))
    }
}

/// Scores every candidate for viability. Passing exemplars become `Viable`,
/// the rest `Rejected(Viability)`; order is preserved. On scorer failure
/// the exemplar is rejected as `ScorerUnavailable`, or, when `fail_open`,
/// left a flagged `Candidate`.
pub fn viability_filter(
    exs: Vec<Exemplar>,
    scorer: &dyn DiscriminatorProvider,
    threshold: f64,
    fail_open: bool,
) -> Result<Vec<Exemplar>> {
    check_threshold(threshold)?;
    if scorer.kind() != DiscriminatorKind::Viability {
        return Err(Error::Configuration(format!(
            "viability filter given a {:?} discriminator ({})",
            scorer.kind(),
            scorer.model_id()
        )));
    }
    let mut out = Vec::with_capacity(exs.len());
    for mut ex in exs {
        if ex.status != ExemplarStatus::Candidate {
            return Err(Error::InvalidInput(format!("exemplar {} is {:?}, expected Candidate", ex.id, ex.status)));
        }
        match scorer.score(&ex.generic_text, &ex.text).and_then(|p| checked_probability(p, scorer)) {
            Ok(p) => {
                ex.viability = Some(DiscriminatorScore {
                    probability: p,
                    model_id: scorer.model_id().to_string(),
                    kind: DiscriminatorKind::Viability,
                });
                ex.status = if p >= threshold {
                    ExemplarStatus::Viable
                } else {
                    ExemplarStatus::Rejected(RejectStage::Viability)
                };
            }
            Err(e) => {
                log::warn!("viability scorer failed on {}: {e}", ex.id);
                ex.scorer_unavailable = true;
                if !fail_open {
                    ex.status = ExemplarStatus::Rejected(RejectStage::ScorerUnavailable);
                }
            }
        }
        out.push(ex);
    }
    Ok(out)
}

/// The validity discriminator for each exemplar kind.
#[derive(Clone, Copy)]
pub struct ValidityScorers<'a> {
    pub instantiation: &'a dyn DiscriminatorProvider,
    pub exception: &'a dyn DiscriminatorProvider,
}

impl<'a> ValidityScorers<'a> {
    pub fn for_kind(&self, kind: ExemplarKind) -> Result<&'a dyn DiscriminatorProvider> {
        let scorer = match kind {
            ExemplarKind::Exception => self.exception,
            ExemplarKind::Instantiation => self.instantiation,
        };
        let expected = DiscriminatorKind::validity_for(kind);
        if scorer.kind() != expected {
            return Err(Error::Configuration(format!(
                "{} exemplars need a {expected:?} discriminator, got {:?} ({})",
                kind.as_str(),
                scorer.kind(),
                scorer.model_id()
            )));
        }
        Ok(scorer)
    }
}

/// Scores viable exemplars with the kind-matched validity discriminator and
/// keeps, per (generic, kind), the `top_n` most probable ones scoring at
/// least `threshold` as `SelectedValid`. Score ties break by exemplar id.
/// Order is preserved.
pub fn validity_select(
    exs: Vec<Exemplar>,
    scorers: ValidityScorers<'_>,
    top_n: usize,
    threshold: f64,
) -> Result<Vec<Exemplar>> {
    check_threshold(threshold)?;
    let mut exs = exs;
    for ex in exs.iter_mut() {
        if ex.status != ExemplarStatus::Viable {
            return Err(Error::InvalidInput(format!("exemplar {} is {:?}, expected Viable", ex.id, ex.status)));
        }
        let scorer = scorers.for_kind(ex.kind)?;
        let p = checked_probability(scorer.score(&ex.generic_text, &ex.text)?, scorer)?;
        ex.validity = Some(DiscriminatorScore { probability: p, model_id: scorer.model_id().to_string(), kind: scorer.kind() });
    }
    let mut groups: BTreeMap<(&str, ExemplarKind), Vec<usize>> = BTreeMap::new();
    for (i, ex) in exs.iter().enumerate() {
        groups.entry((ex.generic_id.as_str(), ex.kind)).or_default().push(i);
    }
    let prob = |ex: &Exemplar| ex.validity.as_ref().map_or(0.0, |s| s.probability);
    let mut selected = vec![false; exs.len()];
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| {
            prob(&exs[b]).total_cmp(&prob(&exs[a])).then_with(|| exs[a].id.cmp(&exs[b].id))
        });
        for &i in members.iter().filter(|&&i| prob(&exs[i]) >= threshold).take(top_n) {
            selected[i] = true;
        }
    }
    for (ex, sel) in exs.iter_mut().zip(selected) {
        ex.status = if sel {
            ExemplarStatus::SelectedValid
        } else {
            ExemplarStatus::Rejected(RejectStage::Validity)
        };
    }
    Ok(exs)
}

/// Canonical exemplar order: generic, template, then combined rank and id.
pub fn canonical_order(a: &Exemplar, b: &Exemplar) -> Ordering {
    a.generic_id
        .cmp(&b.generic_id)
        .then_with(|| a.template_id.cmp(&b.template_id))
        .then_with(|| a.combined_rank.total_cmp(&b.combined_rank))
        .then_with(|| a.id.cmp(&b.id))
}

pub fn render_exemplars(exs: &[Exemplar]) -> Result<String> {
    jsonl::render(EXEMPLAR_SCHEMA, EXEMPLAR_SCHEMA_VERSION, exs)
}

pub fn write_exemplars(path: &Path, exs: &[Exemplar]) -> Result<()> {
    jsonl::write(path, EXEMPLAR_SCHEMA, EXEMPLAR_SCHEMA_VERSION, exs)
}

pub fn read_exemplars(path: &Path) -> Result<Vec<Exemplar>> {
    jsonl::read(path, EXEMPLAR_SCHEMA, EXEMPLAR_SCHEMA_VERSION, true)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn exemplar(id: &str, generic: &str, kind: ExemplarKind, text: &str) -> Exemplar {
        Exemplar {
            id: id.into(),
            generic_id: generic.into(),
            generic_text: "Birds can fly".into(),
            template_id: TemplateId::T1,
            kind,
            prompt_id: format!("{generic}:t1:0"),
            text: text.into(),
            perplexity: 10.0,
            ppl_rank: 1,
            nli_rank: 1,
            combined_rank: 1.0,
            nli: NliJudgment { entail: 0.1, neutral: 0.2, contradict: 0.7 },
            viability: None,
            validity: None,
            status: ExemplarStatus::Candidate,
            scorer_unavailable: false,
        }
    }

    struct Failing;

    impl DiscriminatorProvider for Failing {
        fn kind(&self) -> DiscriminatorKind {
            DiscriminatorKind::Viability
        }
        fn model_id(&self) -> &str {
            "down"
        }
        fn score(&self, _: &str, _: &str) -> Result<f64> {
            Err(Error::Provider("connection refused".into()))
        }
    }

    #[test]
    fn non_specific_output_rejected() {
        let scorer = KeywordDiscriminator::constant(DiscriminatorKind::Viability, 0.9).rule("things", 0.1);
        let exs = vec![
            exemplar("a", "g", ExemplarKind::Exception, "Birds can do things"),
            exemplar("b", "g", ExemplarKind::Exception, "Penguins cannot fly"),
        ];
        let out = viability_filter(exs, &scorer, 0.5, false).unwrap();
        assert_eq!(out[0].status, ExemplarStatus::Rejected(RejectStage::Viability));
        assert_eq!(out[1].status, ExemplarStatus::Viable);
    }

    #[test]
    fn threshold_is_inclusive() {
        let scorer = KeywordDiscriminator::constant(DiscriminatorKind::Viability, 0.5);
        let out = viability_filter(vec![exemplar("a", "g", ExemplarKind::Exception, "x")], &scorer, 0.5, false).unwrap();
        assert_eq!(out[0].status, ExemplarStatus::Viable);
    }

    #[test]
    fn scorer_outage_respects_fail_open() {
        let ex = || vec![exemplar("a", "g", ExemplarKind::Exception, "x")];
        let closed = viability_filter(ex(), &Failing, 0.5, false).unwrap();
        assert_eq!(closed[0].status, ExemplarStatus::Rejected(RejectStage::ScorerUnavailable));
        let open = viability_filter(ex(), &Failing, 0.5, true).unwrap();
        assert_eq!(open[0].status, ExemplarStatus::Candidate);
        assert!(open[0].scorer_unavailable);
    }

    fn viable(n: usize, kind: ExemplarKind) -> Vec<Exemplar> {
        (0..n)
            .map(|i| {
                let mut e = exemplar(&format!("e{i}"), "g", kind, &format!("sample{i}"));
                e.status = ExemplarStatus::Viable;
                e
            })
            .collect()
    }

    #[test]
    fn validity_top_n() {
        let mut exc = KeywordDiscriminator::constant(DiscriminatorKind::ValidityException, 0.0);
        for i in 0..8 {
            exc = exc.rule(&format!("sample{i}"), 0.5 + i as f64 / 20.0);
        }
        let inst = KeywordDiscriminator::constant(DiscriminatorKind::ValidityInstantiation, 1.0);
        let scorers = ValidityScorers { instantiation: &inst, exception: &exc };
        let out = validity_select(viable(8, ExemplarKind::Exception), scorers, 5, 0.5).unwrap();
        let chosen: Vec<&str> =
            out.iter().filter(|e| e.status == ExemplarStatus::SelectedValid).map(|e| e.id.as_str()).collect();
        assert_eq!(chosen, vec!["e3", "e4", "e5", "e6", "e7"]);
        let out = validity_select(viable(3, ExemplarKind::Exception), scorers, 5, 0.5).unwrap();
        assert!(out.iter().all(|e| e.status == ExemplarStatus::SelectedValid));
    }

    #[test]
    fn kind_mismatch_is_configuration_error() {
        let exc = KeywordDiscriminator::constant(DiscriminatorKind::ValidityException, 1.0);
        let scorers = ValidityScorers { instantiation: &exc, exception: &exc };
        let err = validity_select(viable(1, ExemplarKind::Instantiation), scorers, 5, 0.5).unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
    }

    #[test]
    fn hash_default_is_stable_and_bounded() {
        let d = KeywordDiscriminator::hashed(DiscriminatorKind::Viability, "m", 0.25);
        let a = d.score("", "Penguins cannot fly").unwrap();
        assert_eq!(a, d.score("", "Penguins cannot fly").unwrap());
        assert!((0.25..1.0).contains(&a));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        let mut exs = viable(2, ExemplarKind::Exception);
        exs[1].status = ExemplarStatus::Rejected(RejectStage::Validity);
        write_exemplars(&path, &exs).unwrap();
        assert_eq!(read_exemplars(&path).unwrap(), exs);
    }
}
