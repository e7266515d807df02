//! Generic statements: preprocessing, span extraction, categories and
//! logical forms.

use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, JsonContext};
use crate::lexicon::{
    self, capitalize, normalize_phrase, singularize, Lexicon, PhraseKind, COPULAS, DETERMINERS, MODALS,
    PREPOSITIONS,
};
use crate::{Error, Result};

/// How a characterizing generic is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpretation {
    #[serde(alias = "quasi_definitional", alias = "QuasiDefinitional")]
    AsQuasiDefinitional,
    #[serde(alias = "Principled")]
    AsPrincipled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "interpretation")]
pub enum GenericCategory {
    QuasiDefinitional,
    Principled,
    Characterizing(Interpretation),
}

impl GenericCategory {
    /// The logical-form row this category uses.
    pub fn shape(self) -> FormShape {
        match self {
            GenericCategory::QuasiDefinitional
            | GenericCategory::Characterizing(Interpretation::AsQuasiDefinitional) => FormShape::Definitional,
            GenericCategory::Principled | GenericCategory::Characterizing(Interpretation::AsPrincipled) => {
                FormShape::Principled
            }
        }
    }

    pub fn is_characterizing(self) -> bool {
        matches!(self, GenericCategory::Characterizing(_))
    }

    pub fn label(self) -> &'static str {
        match self {
            GenericCategory::QuasiDefinitional => "quasi-definitional",
            GenericCategory::Principled => "principled",
            GenericCategory::Characterizing(_) => "characterizing",
        }
    }
}

/// A phrase of the generic. `range` indexes the whitespace-separated words
/// of the generic text; it is `None` for the implicit auxiliary "do" used as
/// the relation of intransitive generics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub surface: String,
    pub range: Option<(usize, usize)>,
}

impl TokenSpan {
    fn from_words(words: &[String], start: usize, end: usize) -> Self {
        Self {
            surface: words[start..end].join(" "),
            range: Some((start, end)),
        }
    }

    pub fn implicit(surface: &str) -> Self {
        Self {
            surface: surface.to_string(),
            range: None,
        }
    }

    pub fn is_implicit(&self) -> bool {
        self.range.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generic {
    pub id: String,
    pub text: String,
    pub concept: TokenSpan,
    pub relation: TokenSpan,
    pub property: TokenSpan,
    pub category: GenericCategory,
    #[serde(default)]
    pub source: String,
}

/// Grammatical shape of the relation span. Decides how it is negated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    /// "can", "will"
    Modal,
    /// "must be"
    ModalCopula,
    /// "are"
    Copula,
    /// "produce"
    Lexical,
    /// Implicit "do" of an intransitive generic.
    ImplicitDo,
    /// A modal followed by a lexical verb, as in "will find".
    ModalVerb,
}

impl Generic {
    pub fn relation_kind(&self) -> RelationKind {
        if self.relation.is_implicit() {
            return RelationKind::ImplicitDo;
        }
        let words: Vec<String> = self.relation.surface.split_whitespace().map(str::to_lowercase).collect();
        match words.as_slice() {
            [w] if MODALS.contains(&w.as_str()) => RelationKind::Modal,
            [w] if COPULAS.contains(&w.as_str()) => RelationKind::Copula,
            [m, b] if MODALS.contains(&m.as_str()) && b == "be" => RelationKind::ModalCopula,
            [m, _] if MODALS.contains(&m.as_str()) => RelationKind::ModalVerb,
            _ => RelationKind::Lexical,
        }
    }

    /// Whether the property span is a verb phrase (after a modal or implicit
    /// "do") or a noun phrase object. Gerund objects count as verb phrases.
    pub fn property_kind(&self, lexicon: &dyn Lexicon) -> PhraseKind {
        match self.relation_kind() {
            RelationKind::Modal | RelationKind::ImplicitDo => PhraseKind::Verb,
            _ => {
                let core = self.property_core();
                let first = core.split_whitespace().next().unwrap_or("");
                if first.ends_with("ing") && lexicon.is_verb(&lexicon.verb_lemma(first)) {
                    PhraseKind::Verb
                } else {
                    PhraseKind::Noun
                }
            }
        }
    }

    /// Property with leading prepositions and determiners removed, lowercase.
    pub fn property_core(&self) -> String {
        strip_function_words(&self.property.surface)
    }

    /// Concept with leading determiners removed, lowercase.
    pub fn concept_core(&self) -> String {
        strip_function_words(&self.concept.surface)
    }
}

pub(crate) fn strip_function_words(phrase: &str) -> String {
    let words: Vec<String> = phrase
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let skip = words
        .iter()
        .take_while(|w| DETERMINERS.contains(&w.as_str()) || PREPOSITIONS.contains(&w.as_str()))
        .count();
    if skip == words.len() {
        return words.join(" ");
    }
    words[skip..].join(" ")
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    VerbOfConsideration,
    HumanReferent,
    InOrderTo,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub removed_adverbs: Vec<String>,
    pub hedges_rewritten: Vec<(String, String)>,
    pub excluded: Option<ExclusionReason>,
}

impl PreprocessReport {
    pub fn is_excluded(&self) -> bool {
        self.excluded.is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.removed_adverbs.is_empty() && self.hedges_rewritten.is_empty() && self.excluded.is_none()
    }
}

pub const DEFAULT_ADVERBS: &[&str] = &["usually", "typically", "generally"];
pub const CONSIDERATION_VERBS: &[&str] = &["consider", "posit", "suppose", "suspect", "think"];
pub const DEFAULT_HEDGES: &[(&str, &str)] = &[
    ("may have to be", "must be"),
    ("might have to be", "must be"),
    ("may need to be", "must be"),
    ("might need to be", "must be"),
];

/// Text normalization applied before parsing: adverb removal, hedge
/// rewriting and exclusion checks.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    adverbs: BTreeSet<String>,
    hedges: Vec<(Vec<String>, Vec<String>)>,
    consideration_forms: BTreeSet<String>,
    human_referents: Vec<Vec<String>>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(
            DEFAULT_HEDGES.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            std::iter::empty::<String>(),
        )
    }
}

impl Preprocessor {
    pub fn new(
        hedges: impl IntoIterator<Item = (String, String)>,
        human_referents: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut consideration_forms = BTreeSet::new();
        for v in CONSIDERATION_VERBS {
            consideration_forms.insert(v.to_string());
            consideration_forms.insert(lexicon::third_person(v));
            consideration_forms.insert(lexicon::gerund(v));
            consideration_forms.insert(lexicon::past(v));
        }
        consideration_forms.insert("thought".into());
        let hedges = hedges
            .into_iter()
            .map(|(from, to)| (words_lower(&from), words_lower(&to)))
            .filter(|(from, _)| !from.is_empty())
            .collect();
        let human_referents = human_referents
            .into_iter()
            .map(|t| words_lower(&t).iter().map(|w| singularize(w)).collect::<Vec<_>>())
            .filter(|t: &Vec<String>| !t.is_empty())
            .collect();
        Self {
            adverbs: DEFAULT_ADVERBS.iter().map(|s| s.to_string()).collect(),
            hedges,
            consideration_forms,
            human_referents,
        }
    }

    /// Loads a hedge table (`from<TAB>to` per line) and a human-referent seed
    /// list (one term per line). Missing paths fall back to the built-in
    /// hedge table and an empty seed list.
    pub fn load(hedges: Option<&Path>, human_referents: Option<&Path>) -> Result<Self> {
        let hedge_rows: Vec<(String, String)> = match hedges {
            Some(p) => lexicon::read_lines(p)?
                .into_iter()
                .filter_map(|l| {
                    let (a, b) = l.split_once('\t')?;
                    Some((a.trim().to_string(), b.trim().to_string()))
                })
                .collect(),
            None => DEFAULT_HEDGES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        };
        let seeds = match human_referents {
            Some(p) => lexicon::read_lines(p)?,
            None => Vec::new(),
        };
        Ok(Self::new(hedge_rows, seeds))
    }

    pub fn preprocess(&self, raw: &str) -> Result<(String, PreprocessReport)> {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidInput("empty generic text".into()));
        }
        let mut report = PreprocessReport::default();
        let mut words: Vec<String> = trimmed.split_whitespace().map(String::from).collect();
        strip_terminal_punctuation(&mut words);

        // Adverbs of quantification.
        let mut kept: Vec<String> = Vec::with_capacity(words.len());
        let mut capitalize_next = false;
        for (i, w) in words.iter().enumerate() {
            let bare = w.trim_end_matches(',').to_lowercase();
            if self.adverbs.contains(&bare) {
                report.removed_adverbs.push(bare);
                if w.ends_with(',') {
                    if let Some(prev) = kept.last_mut() {
                        if prev.ends_with(',') {
                            prev.pop();
                        }
                    }
                }
                if i == 0 && w.chars().next().is_some_and(char::is_uppercase) {
                    capitalize_next = true;
                }
                continue;
            }
            if capitalize_next && kept.is_empty() {
                kept.push(capitalize(w.trim_start_matches(',')));
                capitalize_next = false;
            } else {
                kept.push(w.clone());
            }
        }
        let mut words = kept;

        // Hedges, repeated to a fixed point.
        for _ in 0..8 {
            let mut changed = false;
            for (from, to) in &self.hedges {
                if let Some(pos) = find_phrase(&words, from) {
                    let original = words[pos..pos + from.len()].join(" ");
                    let mut replacement: Vec<String> = to.clone();
                    if pos == 0 {
                        if let Some(first) = replacement.first_mut() {
                            if original.chars().next().is_some_and(char::is_uppercase) {
                                *first = capitalize(first);
                            }
                        }
                    }
                    words.splice(pos..pos + from.len(), replacement);
                    report.hedges_rewritten.push((from.join(" "), to.join(" ")));
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        strip_terminal_punctuation(&mut words);
        let text = words.join(" ");

        report.excluded = self.exclusion(&words);
        Ok((text, report))
    }

    fn exclusion(&self, words: &[String]) -> Option<ExclusionReason> {
        let lower: Vec<String> = words.iter().map(|w| bare_word(w)).collect();
        if lower.len() >= 3 && lower[0] == "in" && lower[1] == "order" && lower[2] == "to" {
            return Some(ExclusionReason::InOrderTo);
        }
        if lower.iter().any(|w| self.consideration_forms.contains(w)) {
            return Some(ExclusionReason::VerbOfConsideration);
        }
        let lemmas: Vec<String> = lower.iter().map(|w| singularize(w)).collect();
        if self
            .human_referents
            .iter()
            .any(|seed| lemmas.windows(seed.len()).any(|win| win == seed.as_slice()))
        {
            return Some(ExclusionReason::HumanReferent);
        }
        None
    }
}

fn words_lower(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn bare_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_lowercase()
}

fn strip_terminal_punctuation(words: &mut Vec<String>) {
    while let Some(last) = words.last_mut() {
        let stripped = last.trim_end_matches(['.', '!', '?', ',', ';']).to_string();
        if stripped.is_empty() {
            words.pop();
        } else {
            *last = stripped;
            break;
        }
    }
}

fn find_phrase(words: &[String], phrase: &[String]) -> Option<usize> {
    if phrase.len() > words.len() {
        return None;
    }
    (0..=words.len() - phrase.len()).find(|&i| {
        words[i..i + phrase.len()]
            .iter()
            .zip(phrase)
            .all(|(w, p)| w.to_lowercase() == *p)
    })
}

// ---------------------------------------------------------------------------
// Span extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSpans {
    pub concept: TokenSpan,
    pub relation: TokenSpan,
    pub property: TokenSpan,
}

/// Source of concept/relation/property spans for a generic sentence.
pub trait SpanProvider: Send + Sync {
    fn spans(&self, text: &str) -> Option<ParsedSpans>;
}

/// Rule-based span extraction over a closed word-class lexicon.
///
/// Handles `subject modal complement`, `subject copula complement`,
/// `subject verb object` and intransitive `subject verb` shapes, plus a
/// leading locative/temporal frame ("In a hotel, you will find a bed").
pub struct RuleSpanProvider<'a> {
    lexicon: &'a dyn Lexicon,
}

impl<'a> RuleSpanProvider<'a> {
    pub fn new(lexicon: &'a dyn Lexicon) -> Self {
        Self { lexicon }
    }

    fn is_verb_form(&self, w: &str) -> bool {
        let lemma = self.lexicon.verb_lemma(w);
        self.lexicon.is_verb(&lemma)
    }

    /// Parses `words[start..]` as a clause; indices are absolute.
    fn clause(&self, words: &[String], start: usize) -> Option<(TokenSpan, TokenSpan, TokenSpan)> {
        let lower: Vec<String> = words.iter().map(|w| bare_word(w)).collect();
        let n = words.len();
        if n < start + 2 {
            return None;
        }
        let mut verb_at = None;
        for i in start + 1..n {
            let w = lower[i].as_str();
            if MODALS.contains(&w) || COPULAS.contains(&w) || w == "do" || w == "does" {
                verb_at = Some(i);
                break;
            }
            if self.is_verb_form(w) {
                // A plural noun followed by a base-form verb belongs to the subject
                // ("polar bears eat").
                let next_is_base_verb = i + 1 < n && self.lexicon.is_verb(&lower[i + 1]);
                if next_is_base_verb && self.lexicon.verb_lemma(w) != w {
                    continue;
                }
                verb_at = Some(i);
                break;
            }
        }
        let v = verb_at.unwrap_or(start + 1);
        let concept = TokenSpan::from_words(words, start, v);
        let head = lower[v].as_str();
        if MODALS.contains(&head) {
            let mut rel_end = v + 1;
            if rel_end < n && lower[rel_end] == "be" {
                rel_end += 1;
            }
            if rel_end >= n {
                return None;
            }
            return Some((concept, TokenSpan::from_words(words, v, rel_end), TokenSpan::from_words(words, rel_end, n)));
        }
        if COPULAS.contains(&head) || head == "do" || head == "does" {
            if v + 1 >= n {
                return None;
            }
            return Some((concept, TokenSpan::from_words(words, v, v + 1), TokenSpan::from_words(words, v + 1, n)));
        }
        if v + 1 == n {
            // Intransitive: the verb is the property and "do" the relation.
            return Some((concept, TokenSpan::implicit("do"), TokenSpan::from_words(words, v, n)));
        }
        Some((concept, TokenSpan::from_words(words, v, v + 1), TokenSpan::from_words(words, v + 1, n)))
    }
}

impl SpanProvider for RuleSpanProvider<'_> {
    fn spans(&self, text: &str) -> Option<ParsedSpans> {
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| w.trim_end_matches(['.', '!', '?']).to_string())
            .filter(|w| !w.is_empty())
            .collect();
        if words.len() < 2 {
            return None;
        }
        let first = bare_word(&words[0]);
        let framed = ["in", "on", "at", "during"].contains(&first.as_str());
        if framed {
            if let Some(comma) = words.iter().position(|w| w.ends_with(',')) {
                let mut frame_start = 1;
                while frame_start < comma && DETERMINERS.contains(&bare_word(&words[frame_start]).as_str()) {
                    frame_start += 1;
                }
                if frame_start > comma {
                    return None;
                }
                let concept = TokenSpan {
                    surface: words[frame_start..=comma].join(" ").trim_end_matches(',').to_string(),
                    range: Some((frame_start, comma + 1)),
                };
                let (_, relation, property) = self.clause(&words, comma + 1)?;
                // Fold a modal and the following lexical verb into one relation.
                let (relation, property) = match (relation.range, property.range) {
                    (Some((rs, re)), Some((ps, pe)))
                        if re - rs == 1 && MODALS.contains(&bare_word(&words[rs]).as_str()) && pe - ps >= 2 =>
                    {
                        (TokenSpan::from_words(&words, rs, ps + 1), TokenSpan::from_words(&words, ps + 1, pe))
                    }
                    _ => (relation, property),
                };
                return Some(ParsedSpans {
                    concept,
                    relation,
                    property,
                });
            }
        }
        let (concept, relation, property) = self.clause(&words, 0)?;
        if concept.surface.is_empty() || property.surface.is_empty() {
            return None;
        }
        Some(ParsedSpans {
            concept,
            relation,
            property,
        })
    }
}

/// Builds a [`Generic`] from preprocessed text.
pub fn parse_generic(
    id: &str,
    text: &str,
    category: GenericCategory,
    provider: &dyn SpanProvider,
) -> Result<Generic> {
    let spans = provider
        .spans(text)
        .ok_or_else(|| Error::UnparsableGeneric(text.to_string()))?;
    Ok(Generic {
        id: id.to_string(),
        text: text.to_string(),
        concept: spans.concept,
        relation: spans.relation,
        property: spans.property,
        category,
        source: String::new(),
    })
}

// ---------------------------------------------------------------------------
// Logical forms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormKind {
    Base,
    Instantiation,
    Exception,
}

impl FormKind {
    fn name(self) -> &'static str {
        match self {
            FormKind::Base => "Base",
            FormKind::Instantiation => "Instantiation",
            FormKind::Exception => "Exception",
        }
    }
}

/// Which atom the implication concludes.
///
/// `Definitional`: K(x) ∧ r(x,y) ⇒ P(y). `Principled`: K(x) ∧ P(y) ⇒ r(x,y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormShape {
    Definitional,
    Principled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connective {
    Implies,
    Conjunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegatedSlot {
    None,
    /// ∼P
    PropertyPragmatic,
    /// ∼K
    ConceptPragmatic,
    /// ¬r
    RelationNeg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalForm {
    pub kind: FormKind,
    pub shape: FormShape,
    pub concept_predicate: String,
    pub property_predicate: String,
    pub relation_predicate: String,
    pub connective: Connective,
    pub negated_slot: NegatedSlot,
    pub variables: (String, String),
}

fn camel(phrase: &str) -> String {
    phrase
        .split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(capitalize)
        .collect()
}

/// Base logical form of a parsed generic.
pub fn logical_form(g: &Generic, lexicon: &dyn Lexicon) -> LogicalForm {
    let concept = lexicon::singularize_phrase(&g.concept_core());
    let property = match g.property_kind(lexicon) {
        PhraseKind::Verb => {
            let mut words: Vec<String> = g.property_core().split_whitespace().map(String::from).collect();
            if let Some(first) = words.first_mut() {
                *first = lexicon.verb_lemma(first);
            }
            words.join(" ")
        }
        PhraseKind::Noun => lexicon::singularize_phrase(&g.property_core()),
    };
    let relation = match g.relation_kind() {
        RelationKind::Lexical => lexicon.verb_lemma(&g.relation.surface),
        _ => normalize_phrase(&g.relation.surface).replace(' ', "_"),
    };
    LogicalForm {
        kind: FormKind::Base,
        shape: g.category.shape(),
        concept_predicate: camel(&concept),
        property_predicate: camel(&property),
        relation_predicate: relation,
        connective: Connective::Implies,
        negated_slot: NegatedSlot::None,
        variables: ("x".into(), "y".into()),
    }
}

fn require_base(lf: &LogicalForm) -> Result<()> {
    if lf.kind != FormKind::Base {
        return Err(Error::InvalidKind {
            expected: FormKind::Base.name(),
            found: lf.kind.name(),
        });
    }
    Ok(())
}

/// The implication replaced by a conjunction.
pub fn instantiation_form(lf: &LogicalForm) -> Result<LogicalForm> {
    require_base(lf)?;
    Ok(LogicalForm {
        kind: FormKind::Instantiation,
        connective: Connective::Conjunction,
        negated_slot: NegatedSlot::None,
        ..lf.clone()
    })
}

/// Negation of the base form with the concluded atom negated: pragmatically
/// for the definitional shape (∼P), logically for the principled one (¬r).
pub fn exception_form(lf: &LogicalForm) -> Result<LogicalForm> {
    require_base(lf)?;
    let negated_slot = match lf.shape {
        FormShape::Definitional => NegatedSlot::PropertyPragmatic,
        FormShape::Principled => NegatedSlot::RelationNeg,
    };
    Ok(LogicalForm {
        kind: FormKind::Exception,
        connective: Connective::Conjunction,
        negated_slot,
        ..lf.clone()
    })
}

impl fmt::Display for LogicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (x, y) = (&self.variables.0, &self.variables.1);
        let concept_neg = if self.negated_slot == NegatedSlot::ConceptPragmatic { "∼" } else { "" };
        let prop_neg = if self.negated_slot == NegatedSlot::PropertyPragmatic { "∼" } else { "" };
        let rel_neg = if self.negated_slot == NegatedSlot::RelationNeg { "¬" } else { "" };
        let k = format!("{concept_neg}{}({x})", self.concept_predicate);
        let p = format!("{prop_neg}{}({y})", self.property_predicate);
        let r = format!("{rel_neg}{}({x},{y})", self.relation_predicate);
        let last = match self.connective {
            Connective::Implies => "⇒",
            Connective::Conjunction => "∧",
        };
        match self.shape {
            FormShape::Definitional => write!(f, "{k} ∧ {r} {last} {p}"),
            FormShape::Principled => write!(f, "{k} ∧ {p} {last} {r}"),
        }
    }
}

/// Universally quantified paraphrases used to judge exceptions:
/// "[K] [REL] only [P]" for the definitional reading and
/// "All [K] [REL] [P]" for the principled one.
pub fn modified_forms(g: &Generic) -> Vec<String> {
    let rel = if g.relation.is_implicit() { String::new() } else { format!("{} ", g.relation.surface) };
    let only = format!("{} {rel}only {}", g.concept.surface, g.property.surface);
    let all = format!("All {} {rel}{}", lowercase_first(&g.concept.surface), g.property.surface);
    match g.category {
        GenericCategory::QuasiDefinitional => vec![only],
        GenericCategory::Principled => vec![all],
        GenericCategory::Characterizing(_) => vec![only, all],
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

// ---------------------------------------------------------------------------
// Input file
// ---------------------------------------------------------------------------

/// One line of the generics JSON-lines input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenericRecord {
    pub id: String,
    pub text: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<Interpretation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl GenericRecord {
    /// Resolves the category string. A characterizing generic without an
    /// explicit interpretation reads as quasi-definitional; both readings'
    /// templates are produced either way.
    pub fn category(&self) -> Result<GenericCategory> {
        let key = self.category.trim().to_lowercase().replace(['_', ' '], "-");
        match key.as_str() {
            "quasi-definitional" | "quasidefinitional" => Ok(GenericCategory::QuasiDefinitional),
            "principled" => Ok(GenericCategory::Principled),
            "characterizing" => Ok(GenericCategory::Characterizing(
                self.interpretation.unwrap_or(Interpretation::AsQuasiDefinitional),
            )),
            other => Err(Error::InvalidInput(format!("unknown generic category {other:?}"))),
        }
    }
}

pub fn load_generics(path: &Path) -> Result<Vec<GenericRecord>> {
    let file = std::fs::File::open(path).io_context(path)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.io_context(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenericRecord =
            serde_json::from_str(&line).json_context(|| format!("{}:{}", path.display(), n + 1))?;
        out.push(rec);
    }
    Ok(out)
}
