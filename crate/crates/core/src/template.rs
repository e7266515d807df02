//! The seven generation templates, prompt filling and compilation of
//! completion requirements into lexical constraint clauses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FormShape, Generic, GenericCategory, RelationKind};
use crate::lexicon::{self, normalize_phrase, pluralize_phrase, Lexicon, PhraseKind, MAX_NGRAM_WORDS};
use crate::subtype::{lemma_key, SubtypeRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateId {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    T7,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::T1,
        TemplateId::T2,
        TemplateId::T3,
        TemplateId::T4,
        TemplateId::T5,
        TemplateId::T6,
        TemplateId::T7,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::T1 => "t1",
            TemplateId::T2 => "t2",
            TemplateId::T3 => "t3",
            TemplateId::T4 => "t4",
            TemplateId::T5 => "t5",
            TemplateId::T6 => "t6",
            TemplateId::T7 => "t7",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s.trim().to_lowercase())
    }

    pub fn spec(self) -> TemplateSpec {
        catalog()[self as usize]
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExemplarKind {
    Exception,
    Instantiation,
}

impl ExemplarKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExemplarKind::Exception => "exception",
            ExemplarKind::Instantiation => "instantiation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConceptSlot {
    Base,
    Subtype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationSlot {
    Affirmed,
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropertySlot {
    RequiredBase,
    RequiredSubtype,
    PragmaticNegation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: TemplateId,
    pub exemplar_kind: ExemplarKind,
    pub concept_slot: ConceptSlot,
    pub relation_slot: RelationSlot,
    pub property_slot: PropertySlot,
}

impl TemplateSpec {
    /// Exceptions subtype at most one of concept and property; pragmatic
    /// negation pairs with an affirmed relation; a negated relation requires
    /// the property (or a subtype of it).
    pub fn is_admissible(&self) -> bool {
        let both_subtyped =
            self.concept_slot == ConceptSlot::Subtype && self.property_slot == PropertySlot::RequiredSubtype;
        let exception_ok = self.exemplar_kind != ExemplarKind::Exception || !both_subtyped;
        let pragmatic_ok =
            self.property_slot != PropertySlot::PragmaticNegation || self.relation_slot == RelationSlot::Affirmed;
        let negated_ok = self.relation_slot != RelationSlot::Negated
            || matches!(self.property_slot, PropertySlot::RequiredBase | PropertySlot::RequiredSubtype);
        let kind_ok = match self.exemplar_kind {
            ExemplarKind::Exception => {
                self.relation_slot == RelationSlot::Negated || self.property_slot == PropertySlot::PragmaticNegation
            }
            ExemplarKind::Instantiation => {
                self.relation_slot == RelationSlot::Affirmed && self.property_slot != PropertySlot::PragmaticNegation
            }
        };
        exception_ok && pragmatic_ok && negated_ok && kind_ok
    }

    pub fn needs_concept_subtypes(&self) -> bool {
        self.concept_slot == ConceptSlot::Subtype
    }

    pub fn needs_property_subtypes(&self) -> bool {
        self.property_slot == PropertySlot::RequiredSubtype
    }
}

const fn spec(
    id: TemplateId,
    exemplar_kind: ExemplarKind,
    concept_slot: ConceptSlot,
    relation_slot: RelationSlot,
    property_slot: PropertySlot,
) -> TemplateSpec {
    TemplateSpec { id, exemplar_kind, concept_slot, relation_slot, property_slot }
}

const CATALOG: [TemplateSpec; 7] = {
    use ConceptSlot::*;
    use ExemplarKind::*;
    use PropertySlot::*;
    use RelationSlot::*;
    [
        spec(TemplateId::T1, Exception, Base, Affirmed, PragmaticNegation),
        spec(TemplateId::T2, Exception, Subtype, Affirmed, PragmaticNegation),
        spec(TemplateId::T3, Exception, Subtype, Negated, RequiredBase),
        spec(TemplateId::T4, Exception, Base, Negated, RequiredSubtype),
        spec(TemplateId::T5, Instantiation, Subtype, Affirmed, RequiredBase),
        spec(TemplateId::T6, Instantiation, Base, Affirmed, RequiredSubtype),
        spec(TemplateId::T7, Instantiation, Subtype, Affirmed, RequiredSubtype),
    ]
};

/// All seven templates, indexed by `TemplateId as usize`.
pub fn catalog() -> &'static [TemplateSpec; 7] {
    &CATALOG
}

/// Templates admissible for a category. Pragmatic-negation exceptions (t1,
/// t2) belong to the definitional reading, relation-negation exceptions (t3,
/// t4) to the principled one; characterizing generics take the union.
pub fn templates_for(category: GenericCategory) -> Vec<TemplateSpec> {
    use TemplateId::*;
    let ids: &[TemplateId] = match category {
        GenericCategory::Characterizing(_) => &TemplateId::ALL,
        c => match c.shape() {
            FormShape::Definitional => &[T1, T2, T5, T6, T7],
            FormShape::Principled => &[T3, T4, T5, T6, T7],
        },
    };
    ids.iter().map(|id| id.spec()).collect()
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// Connective strings placed between the generic and the prompt stem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectiveConfig {
    pub exception: String,
    pub instantiation: String,
    pub per_template: BTreeMap<TemplateId, String>,
}

impl Default for ConnectiveConfig {
    fn default() -> Self {
        Self {
            exception: "However,".into(),
            instantiation: "For example,".into(),
            per_template: BTreeMap::new(),
        }
    }
}

impl ConnectiveConfig {
    pub fn connective(&self, spec: &TemplateSpec) -> &str {
        if let Some(c) = self.per_template.get(&spec.id) {
            return c;
        }
        match spec.exemplar_kind {
            ExemplarKind::Exception => &self.exception,
            ExemplarKind::Instantiation => &self.instantiation,
        }
    }

    /// `key = value` lines; keys `exception`, `instantiation` or `t1`..`t7`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Configuration(format!("connective line {line:?} lacks '='")))?;
            let (k, v) = (k.trim(), v.trim().to_string());
            match k {
                "exception" => cfg.exception = v,
                "instantiation" => cfg.instantiation = v,
                other => {
                    let id = TemplateId::parse(other)
                        .ok_or_else(|| Error::Configuration(format!("unknown connective key {other:?}")))?;
                    cfg.per_template.insert(id, v);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub generic_id: String,
    pub template_id: TemplateId,
    /// Generic sentence, connective and stem.
    pub text: String,
    /// The stem alone: concept surface and (possibly negated) relation.
    pub stem: String,
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

/// Relation surface as used after the given concept surface.
pub fn relation_surface(g: &Generic, negated: bool, concept_plural: bool, lexicon: &dyn Lexicon) -> String {
    let rel = normalize_phrase(&g.relation.surface);
    let kind = g.relation_kind();
    if !negated {
        return match kind {
            RelationKind::ImplicitDo => String::new(),
            _ => rel,
        };
    }
    let mut words: Vec<&str> = rel.split_whitespace().collect();
    match kind {
        RelationKind::Modal if rel == "can" => "cannot".into(),
        RelationKind::Modal | RelationKind::Copula => format!("{rel} not"),
        RelationKind::ModalCopula | RelationKind::ModalVerb => {
            words.insert(1, "not");
            words.join(" ")
        }
        RelationKind::ImplicitDo => if concept_plural { "do not" } else { "does not" }.into(),
        RelationKind::Lexical => {
            let aux = if concept_plural { "do not" } else { "does not" };
            format!("{aux} {}", lexicon.verb_lemma(&rel))
        }
    }
}

fn join_sentence(generic_text: &str, connective: &str, stem: &str) -> String {
    let generic_text = generic_text.trim();
    let sep = if generic_text.ends_with(['.', '!', '?']) { "" } else { "." };
    format!("{generic_text}{sep} {connective} {stem}")
}

/// One prompt per admissible concept surface.
pub fn build_prompts(
    g: &Generic,
    spec: &TemplateSpec,
    concept_subtypes: &[SubtypeRecord],
    connectives: &ConnectiveConfig,
    lexicon: &dyn Lexicon,
) -> Result<Vec<Prompt>> {
    let concept = normalize_phrase(&g.concept.surface);
    let plural = lexicon::is_plural_phrase(&concept);
    let surfaces: Vec<String> = match spec.concept_slot {
        ConceptSlot::Base => vec![concept.clone()],
        ConceptSlot::Subtype => {
            let mut seen = BTreeSet::new();
            seen.insert(lemma_key(&concept));
            concept_subtypes
                .iter()
                .map(|r| {
                    let t = normalize_phrase(&r.term);
                    if plural {
                        pluralize_phrase(&lemma_key(&t))
                    } else {
                        t
                    }
                })
                .filter(|s| seen.insert(lemma_key(s)))
                .collect()
        }
    };
    if surfaces.is_empty() {
        return Err(Error::NoPromptsForTemplate {
            template: spec.id.to_string(),
            reason: "no concept subtypes available".into(),
        });
    }
    let negated = spec.relation_slot == RelationSlot::Negated;
    let relation = relation_surface(g, negated, plural, lexicon);
    let connective = connectives.connective(spec);
    Ok(surfaces
        .into_iter()
        .enumerate()
        .map(|(i, surface)| {
            let stem = if relation.is_empty() { surface.clone() } else { format!("{surface} {relation}") };
            let mut bindings = BTreeMap::new();
            bindings.insert("concept".to_string(), surface);
            bindings.insert("relation".to_string(), relation.clone());
            bindings.insert("connective".to_string(), connective.to_string());
            Prompt {
                id: format!("{}:{}:{}", g.id, spec.id, i),
                generic_id: g.id.clone(),
                template_id: spec.id,
                text: join_sentence(&g.text, connective, &stem),
                stem,
                bindings,
                perplexity: None,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Constraints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClauseMode {
    Inclusion,
    Exclusion,
}

/// A disjunction of word n-grams. Inclusion is satisfied when some n-gram
/// occurs in the completion, exclusion when none does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintClause {
    pub mode: ClauseMode,
    pub ngrams: Vec<String>,
}

impl ConstraintClause {
    /// Lowercases, deduplicates and sorts the n-grams. Each must have 1 to
    /// 4 words and the set must be non-empty.
    pub fn new(mode: ClauseMode, ngrams: impl IntoIterator<Item = String>) -> Result<Self> {
        let set: BTreeSet<String> = ngrams.into_iter().map(|n| normalize_phrase(&n)).collect();
        if set.is_empty() || set.contains("") {
            return Err(Error::ConstraintCompile("constraint clause needs at least one non-empty n-gram".into()));
        }
        if let Some(long) = set.iter().find(|n| n.split_whitespace().count() > MAX_NGRAM_WORDS) {
            return Err(Error::ConstraintCompile(format!("n-gram {long:?} exceeds {MAX_NGRAM_WORDS} words")));
        }
        Ok(Self { mode, ngrams: set.into_iter().collect() })
    }

    pub fn inclusion<S: Into<String>>(ngrams: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(ClauseMode::Inclusion, ngrams.into_iter().map(Into::into))
    }

    pub fn exclusion<S: Into<String>>(ngrams: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(ClauseMode::Exclusion, ngrams.into_iter().map(Into::into))
    }

    pub fn ngram_words(&self) -> impl Iterator<Item = Vec<&str>> {
        self.ngrams.iter().map(|n| n.split_whitespace().collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub clauses: Vec<ConstraintClause>,
}

impl ConstraintSet {
    pub fn new(clauses: Vec<ConstraintClause>) -> Self {
        Self { clauses }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }
}

fn subtype_kind(term: &str, property_kind: PhraseKind, lexicon: &dyn Lexicon) -> PhraseKind {
    let first = term.split_whitespace().next().unwrap_or("");
    if property_kind == PhraseKind::Verb && lexicon.is_verb(&lexicon.verb_lemma(first)) {
        PhraseKind::Verb
    } else {
        PhraseKind::Noun
    }
}

/// Lexical family of the generic's property span.
pub fn property_family(g: &Generic, lexicon: &dyn Lexicon) -> Vec<String> {
    lexicon.family(&g.property_core(), g.property_kind(lexicon))
}

/// Compiles the completion requirement of `spec` into lexical clauses.
pub fn compile_constraints(
    g: &Generic,
    spec: &TemplateSpec,
    property_subtypes: &[SubtypeRecord],
    lexicon: &dyn Lexicon,
) -> Result<ConstraintSet> {
    let family = property_family(g, lexicon);
    if family.is_empty() {
        return Err(Error::ConstraintCompile(format!("empty lexical family for property {:?}", g.property.surface)));
    }
    let clauses = match spec.property_slot {
        PropertySlot::RequiredBase => vec![ConstraintClause::inclusion(family)?],
        PropertySlot::PragmaticNegation => vec![ConstraintClause::exclusion(family)?],
        PropertySlot::RequiredSubtype => {
            let kind = g.property_kind(lexicon);
            let excluded: BTreeSet<&String> = family.iter().collect();
            let included: BTreeSet<String> = property_subtypes
                .iter()
                .flat_map(|r| lexicon.family(&r.term, subtype_kind(&normalize_phrase(&r.term), kind, lexicon)))
                .filter(|n| !excluded.contains(n))
                .collect();
            if included.is_empty() {
                return Err(Error::ConstraintCompile(format!(
                    "template {} needs property subtypes of {:?}",
                    spec.id, g.property.surface
                )));
            }
            vec![ConstraintClause::inclusion(included)?, ConstraintClause::exclusion(family)?]
        }
    };
    Ok(ConstraintSet::new(clauses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_generic, Interpretation, RuleSpanProvider};
    use crate::lexicon::RuleLexicon;
    use crate::subtype::SubtypeSource;

    fn lex() -> RuleLexicon {
        RuleLexicon::new(
            ["fly", "produce", "hunt", "enjoy", "carry", "bark", "swim"].map(String::from),
            BTreeMap::new(),
        )
    }

    fn generic(text: &str, cat: GenericCategory) -> Generic {
        let l = lex();
        parse_generic("g1", text, cat, &RuleSpanProvider::new(&l)).unwrap()
    }

    fn sub(term: &str) -> SubtypeRecord {
        SubtypeRecord { term: term.into(), parent: "x".into(), source: SubtypeSource::Kb, score: 1.0 }
    }

    fn ids(specs: &[TemplateSpec]) -> Vec<&'static str> {
        specs.iter().map(|s| s.id.as_str()).collect()
    }

    #[test]
    fn catalog_is_admissible_and_ordered() {
        for (i, s) in catalog().iter().enumerate() {
            assert!(s.is_admissible(), "{:?}", s);
            assert_eq!(s.id as usize, i);
        }
        let bad = TemplateSpec {
            id: TemplateId::T7,
            exemplar_kind: ExemplarKind::Exception,
            concept_slot: ConceptSlot::Subtype,
            relation_slot: RelationSlot::Negated,
            property_slot: PropertySlot::RequiredSubtype,
        };
        assert!(!bad.is_admissible());
    }

    #[test]
    fn templates_per_category() {
        assert_eq!(ids(&templates_for(GenericCategory::QuasiDefinitional)), vec!["t1", "t2", "t5", "t6", "t7"]);
        assert_eq!(ids(&templates_for(GenericCategory::Principled)), vec!["t3", "t4", "t5", "t6", "t7"]);
        for i in [Interpretation::AsQuasiDefinitional, Interpretation::AsPrincipled] {
            assert_eq!(templates_for(GenericCategory::Characterizing(i)).len(), 7);
        }
    }

    #[test]
    fn prompt_examples() {
        let l = lex();
        let cc = ConnectiveConfig::default();
        let birds = generic("Birds can fly", GenericCategory::Principled);
        let p = build_prompts(&birds, &TemplateId::T3.spec(), &[sub("penguin")], &cc, &l).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].text, "Birds can fly. However, penguins cannot");
        let p = build_prompts(&birds, &TemplateId::T5.spec(), &[sub("owls")], &cc, &l).unwrap();
        assert_eq!(p[0].text, "Birds can fly. For example, owls can");

        let quakes = generic("Quakes produce seismic waves", GenericCategory::QuasiDefinitional);
        let p = build_prompts(&quakes, &TemplateId::T1.spec(), &[], &cc, &l).unwrap();
        assert_eq!(p[0].text, "Quakes produce seismic waves. However, quakes produce");
        assert_eq!(p[0].stem, "quakes produce");
    }

    #[test]
    fn prompt_negation_rules() {
        let l = lex();
        let cc = ConnectiveConfig::default();
        let quakes = generic("Quakes produce seismic waves", GenericCategory::Principled);
        let p = build_prompts(&quakes, &TemplateId::T3.spec(), &[sub("tremor")], &cc, &l).unwrap();
        assert_eq!(p[0].stem, "tremors do not produce");
        let dogs = generic("Dogs bark", GenericCategory::Principled);
        let p = build_prompts(&dogs, &TemplateId::T3.spec(), &[sub("puppy")], &cc, &l).unwrap();
        assert_eq!(p[0].stem, "puppies do not");
        let p = build_prompts(&dogs, &TemplateId::T5.spec(), &[sub("puppy")], &cc, &l).unwrap();
        assert_eq!(p[0].stem, "puppies");
    }

    #[test]
    fn prompts_dedupe_and_require_subtypes() {
        let l = lex();
        let cc = ConnectiveConfig::default();
        let birds = generic("Birds can fly", GenericCategory::Principled);
        let subs = [sub("penguin"), sub("penguins"), sub("bird"), sub("owl")];
        let p = build_prompts(&birds, &TemplateId::T2.spec(), &subs, &cc, &l).unwrap();
        assert_eq!(p.iter().map(|p| p.stem.as_str()).collect::<Vec<_>>(), vec!["penguins can", "owls can"]);
        let err = build_prompts(&birds, &TemplateId::T2.spec(), &[], &cc, &l);
        assert!(matches!(err, Err(Error::NoPromptsForTemplate { .. })));
    }

    #[test]
    fn constraint_examples() {
        let l = lex();
        let birds = generic("Birds can fly", GenericCategory::Principled);
        let cs = compile_constraints(&birds, &TemplateId::T3.spec(), &[], &l).unwrap();
        assert_eq!(cs.clauses, vec![ConstraintClause::inclusion(["fly", "flies", "flying", "flight"]).unwrap()]);

        let quakes = generic("Quakes produce seismic waves", GenericCategory::QuasiDefinitional);
        let cs = compile_constraints(&quakes, &TemplateId::T1.spec(), &[], &l).unwrap();
        assert_eq!(cs.clauses, vec![ConstraintClause::exclusion(["seismic wave", "seismic waves"]).unwrap()]);

        let wolves = generic("Wolves enjoy hunting", GenericCategory::Principled);
        let cs = compile_constraints(&wolves, &TemplateId::T6.spec(), &[sub("small game")], &l).unwrap();
        assert_eq!(
            cs.clauses,
            vec![
                ConstraintClause::inclusion(["small game"]).unwrap(),
                ConstraintClause::exclusion(["hunt", "hunting", "hunts"]).unwrap(),
            ]
        );
    }

    #[test]
    fn subtype_constraints_need_subtypes_and_stay_disjoint() {
        let l = lex();
        let birds = generic("Birds can fly", GenericCategory::Principled);
        assert!(matches!(
            compile_constraints(&birds, &TemplateId::T4.spec(), &[], &l),
            Err(Error::ConstraintCompile(_))
        ));
        let cs = compile_constraints(&birds, &TemplateId::T4.spec(), &[sub("flying"), sub("swim")], &l).unwrap();
        let inc: BTreeSet<&String> = cs.clauses[0].ngrams.iter().collect();
        assert!(cs.clauses[1].ngrams.iter().all(|n| !inc.contains(n)));
        assert_eq!(cs.clauses[0].ngrams, vec!["swim", "swimming", "swims"]);
    }

    #[test]
    fn clause_validation() {
        assert!(ConstraintClause::inclusion(Vec::<String>::new()).is_err());
        assert!(ConstraintClause::inclusion(["a b c d e"]).is_err());
        let c = ConstraintClause::inclusion(["Fly", "fly", " fly "]).unwrap();
        assert_eq!(c.ngrams, vec!["fly"]);
    }
}
