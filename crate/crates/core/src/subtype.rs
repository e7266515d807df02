//! Subtypes of concepts and properties from a local knowledge-base edge file
//! and from pluggable language-model providers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lexicon::{self, normalize_phrase, pluralize_phrase, singularize_phrase};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubtypeSource {
    #[serde(rename = "kb")]
    Kb,
    #[serde(rename = "lm-prompt")]
    LmPrompt,
    #[serde(rename = "mlm-infill")]
    MlmInfill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtypeRecord {
    pub term: String,
    pub parent: String,
    pub source: SubtypeSource,
    /// In `[0, 1]`.
    pub score: f64,
}

/// Lemma-level identity used for deduplication and the term ≠ parent rule.
pub fn lemma_key(term: &str) -> String {
    singularize_phrase(&normalize_phrase(term))
}

/// Sorts by descending score, then term; drops lemma duplicates (keeping
/// the best-scored one) and any record equal to its parent.
fn finalize(mut records: Vec<SubtypeRecord>) -> Vec<SubtypeRecord> {
    records.retain(|r| !r.term.trim().is_empty() && lemma_key(&r.term) != lemma_key(&r.parent));
    records.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
    let mut seen = BTreeSet::new();
    records.retain(|r| seen.insert(lemma_key(&r.term)));
    records
}

/// Merges subtype lists from several sources: highest score wins per lemma,
/// the parent itself is dropped, and at most `cap` records are kept.
pub fn merge_subtypes(lists: impl IntoIterator<Item = Vec<SubtypeRecord>>, cap: usize) -> Vec<SubtypeRecord> {
    let mut out = finalize(lists.into_iter().flatten().collect());
    out.truncate(cap);
    out
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEdge {
    pub start: String,
    pub relation: String,
    pub end: String,
    pub weight: f64,
}

pub const DEFAULT_KB_RELATIONS: &[&str] = &["IsA", "InstanceOf", "Synonym"];
const SYNONYM: &str = "Synonym";

/// Read-only edge store indexed by lemma.
#[derive(Debug, Clone, Default)]
pub struct EdgeStore {
    /// end lemma -> (start surface, weight) for hierarchical edges.
    incoming: HashMap<String, Vec<(String, f64)>>,
    /// lemma -> (neighbor surface, weight) for synonym edges, both directions.
    synonyms: HashMap<String, Vec<(String, f64)>>,
    max_weight: f64,
    len: usize,
}

impl EdgeStore {
    /// Builds a store keeping only edges whose relation is in `relations`.
    pub fn new(edges: impl IntoIterator<Item = KbEdge>, relations: &[&str]) -> Result<Self> {
        let mut store = EdgeStore::default();
        for e in edges {
            if !relations.contains(&e.relation.as_str()) {
                continue;
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(Error::InvalidInput(format!("edge weight {} must be finite and >= 0", e.weight)));
            }
            let start = normalize_phrase(&e.start);
            let end = normalize_phrase(&e.end);
            store.max_weight = store.max_weight.max(e.weight);
            store.len += 1;
            if e.relation == SYNONYM {
                store.synonyms.entry(lemma_key(&start)).or_default().push((end.clone(), e.weight));
                store.synonyms.entry(lemma_key(&end)).or_default().push((start, e.weight));
            } else {
                store.incoming.entry(lemma_key(&end)).or_default().push((start, e.weight));
            }
        }
        Ok(store)
    }

    /// Loads a tab-separated file with columns start, relation, end, weight.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_relations(path, DEFAULT_KB_RELATIONS)
    }

    pub fn load_with_relations(path: &Path, relations: &[&str]) -> Result<Self> {
        let mut edges = Vec::new();
        for (n, line) in lexicon::read_lines(path)?.into_iter().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: expected 4 tab-separated columns, found {}",
                    path.display(),
                    n + 1,
                    cols.len()
                )));
            }
            let weight: f64 = cols[3].trim().parse().map_err(|_| {
                Error::InvalidInput(format!("{}:{}: bad weight {:?}", path.display(), n + 1, cols[3]))
            })?;
            edges.push(KbEdge {
                start: cols[0].to_string(),
                relation: cols[1].trim().to_string(),
                end: cols[2].to_string(),
                weight,
            });
        }
        Self::new(edges, relations)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn normalize(&self, w: f64) -> f64 {
        if self.max_weight > 0.0 {
            (w / self.max_weight).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }
}

/// All terms with an IsA/InstanceOf path of at most `max_depth` edges into
/// `term`, plus synonyms of `term`. A multi-edge path is weighted by its
/// weakest edge; each term keeps its best path.
pub fn kb_subtypes(term: &str, kb: &EdgeStore, max_depth: usize) -> Result<Vec<SubtypeRecord>> {
    if max_depth == 0 {
        return Err(Error::InvalidInput("maxDepth must be at least 1".into()));
    }
    let root = lemma_key(term);
    // lemma -> (surface, best bottleneck weight)
    let mut best: BTreeMap<String, (String, f64)> = BTreeMap::new();
    let mut frontier: BTreeMap<String, f64> = BTreeMap::from([(root.clone(), f64::INFINITY)]);
    for _ in 0..max_depth {
        let mut next: BTreeMap<String, f64> = BTreeMap::new();
        for (node, through) in &frontier {
            for (start, w) in kb.incoming.get(node).into_iter().flatten() {
                let key = lemma_key(start);
                if key == root {
                    continue;
                }
                let weight = through.min(*w);
                let improved = best.get(&key).is_none_or(|(_, old)| weight > *old);
                if improved {
                    best.insert(key.clone(), (start.clone(), weight));
                    let e = next.entry(key).or_insert(weight);
                    *e = e.max(weight);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    for (syn, w) in kb.synonyms.get(&root).into_iter().flatten() {
        let key = lemma_key(syn);
        if best.get(&key).is_none_or(|(_, old)| *w > *old) {
            best.insert(key, (syn.clone(), *w));
        }
    }
    let parent = normalize_phrase(term);
    Ok(finalize(
        best.into_values()
            .map(|(surface, w)| SubtypeRecord {
                term: surface,
                parent: parent.clone(),
                source: SubtypeSource::Kb,
                score: kb.normalize(w),
            })
            .collect(),
    ))
}

// ---------------------------------------------------------------------------
// Kind categories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindCategory {
    Person,
    Animal,
    OtherLiving,
    Location,
    Temporal,
    Other,
}

impl KindCategory {
    pub const ALL: [KindCategory; 6] = [
        KindCategory::Person,
        KindCategory::Animal,
        KindCategory::OtherLiving,
        KindCategory::Location,
        KindCategory::Temporal,
        KindCategory::Other,
    ];

    pub fn key(self) -> &'static str {
        match self {
            KindCategory::Person => "person",
            KindCategory::Animal => "animal",
            KindCategory::OtherLiving => "other-living",
            KindCategory::Location => "location",
            KindCategory::Temporal => "temporal",
            KindCategory::Other => "other",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        let key = key.trim().to_lowercase().replace(['_', ' '], "-");
        Self::ALL.into_iter().find(|c| c.key() == key)
    }
}

/// Per-category seed lists, keyed by lemma.
#[derive(Debug, Clone, Default)]
pub struct KindSeeds {
    seeds: BTreeMap<KindCategory, BTreeSet<String>>,
}

impl KindSeeds {
    pub fn insert(&mut self, category: KindCategory, term: &str) {
        self.seeds.entry(category).or_default().insert(lemma_key(term));
    }

    pub fn contains(&self, category: KindCategory, term: &str) -> bool {
        self.seeds.get(&category).is_some_and(|s| s.contains(&lemma_key(term)))
    }

    /// Reads `category<TAB>term` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let mut seeds = KindSeeds::default();
        for line in lexicon::read_lines(path)? {
            let Some((cat, term)) = line.split_once('\t') else {
                return Err(Error::InvalidInput(format!("{}: malformed seed line {line:?}", path.display())));
            };
            let cat = KindCategory::from_key(cat)
                .ok_or_else(|| Error::InvalidInput(format!("{}: unknown category {cat:?}", path.display())))?;
            seeds.insert(cat, term);
        }
        Ok(seeds)
    }
}

/// Seed-list membership decides person/animal/other-living/location; a
/// generic opening with On/In/At/During forces location or temporal.
pub fn assign_kind_category(term: &str, seeds: &KindSeeds, generic_text: &str) -> KindCategory {
    let first = generic_text
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match first.as_str() {
        "during" => return KindCategory::Temporal,
        "on" | "in" | "at" => {
            return if seeds.contains(KindCategory::Temporal, term) {
                KindCategory::Temporal
            } else {
                KindCategory::Location
            }
        }
        _ => {}
    }
    [
        KindCategory::Person,
        KindCategory::Animal,
        KindCategory::OtherLiving,
        KindCategory::Location,
        KindCategory::Temporal,
    ]
    .into_iter()
    .find(|c| seeds.contains(*c, term))
    .unwrap_or(KindCategory::Other)
}

// ---------------------------------------------------------------------------
// Language-model subtypes
// ---------------------------------------------------------------------------

/// Free-text completion (few-shot subtype prompting).
pub trait TextCompletionProvider: Send + Sync {
    fn complete(&self, prompt: &str, n_sequences: usize) -> Result<Vec<String>>;

    /// Suggested number of concurrent requests.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Masked-token infilling. `text` contains one [`MASK`] marker.
pub trait MaskInfillProvider: Send + Sync {
    fn infill(&self, text: &str, k: usize) -> Result<Vec<(String, f64)>>;

    fn max_in_flight(&self) -> usize {
        1
    }
}

pub const MASK: &str = "<MASK>";

/// One exemplar type and five of its subtypes per kind category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptExemplar {
    pub term: String,
    pub subtypes: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SubtypePromptConfig {
    exemplars: BTreeMap<KindCategory, PromptExemplar>,
}

impl SubtypePromptConfig {
    pub fn insert(&mut self, category: KindCategory, exemplar: PromptExemplar) {
        self.exemplars.insert(category, exemplar);
    }

    pub fn get(&self, category: KindCategory) -> Option<&PromptExemplar> {
        self.exemplars.get(&category)
    }

    /// Parses `category = term: sub1, sub2, sub3, sub4, sub5` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (cat, rest) = line
                .split_once('=')
                .ok_or_else(|| Error::Configuration(format!("subtype prompt line {line:?} lacks '='")))?;
            let cat = KindCategory::from_key(cat)
                .ok_or_else(|| Error::Configuration(format!("unknown kind category {:?}", cat.trim())))?;
            let (term, subs) = rest
                .split_once(':')
                .ok_or_else(|| Error::Configuration(format!("subtype prompt line {line:?} lacks ':'")))?;
            let subtypes: Vec<String> = subs.split(',').map(normalize_phrase).filter(|s| !s.is_empty()).collect();
            if subtypes.len() != 5 {
                return Err(Error::Configuration(format!(
                    "category {} needs exactly five example subtypes, found {}",
                    cat.key(),
                    subtypes.len()
                )));
            }
            cfg.insert(cat, PromptExemplar { term: normalize_phrase(term), subtypes });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }
}

/// The few-shot prompt for one kind: the category's exemplar line followed
/// by an open line for `term`.
pub fn subtype_prompt(term: &str, exemplar: &PromptExemplar) -> String {
    format!(
        "Types of {}: {}.\nTypes of {}:",
        pluralize_phrase(&exemplar.term),
        exemplar.subtypes.join(", "),
        pluralize_phrase(&lemma_key(term))
    )
}

/// Concept subtypes from few-shot completion. Each record's score is the
/// fraction of sequences that produced it.
pub fn lm_subtypes(
    term: &str,
    category: KindCategory,
    provider: &dyn TextCompletionProvider,
    n_sequences: usize,
    config: &SubtypePromptConfig,
) -> Result<Vec<SubtypeRecord>> {
    if category == KindCategory::Person {
        return Err(Error::InvalidInput(format!("refusing subtype prompting for person kind {term:?}")));
    }
    if n_sequences == 0 {
        return Err(Error::InvalidInput("nSequences must be at least 1".into()));
    }
    let exemplar = config
        .get(category)
        .ok_or_else(|| Error::Configuration(format!("no subtype prompt for category {}", category.key())))?;
    let prompt = subtype_prompt(term, exemplar);
    let completions = provider
        .complete(&prompt, n_sequences)
        .map_err(|e| Error::SubtypeProvider(e.to_string()))?;
    let mut counts: BTreeMap<String, (String, usize)> = BTreeMap::new();
    for completion in &completions {
        let mut in_this: BTreeSet<String> = BTreeSet::new();
        for piece in completion.split([',', '\n']) {
            let cleaned = normalize_phrase(piece.trim().trim_end_matches(['.', ';']).trim());
            if cleaned.is_empty() || cleaned.split_whitespace().count() > lexicon::MAX_NGRAM_WORDS {
                continue;
            }
            let key = lemma_key(&cleaned);
            if in_this.insert(key.clone()) {
                counts.entry(key).or_insert_with(|| (cleaned.clone(), 0)).1 += 1;
            }
        }
    }
    let denom = completions.len().max(1) as f64;
    let parent = normalize_phrase(term);
    Ok(finalize(
        counts
            .into_values()
            .map(|(surface, c)| SubtypeRecord {
                term: surface,
                parent: parent.clone(),
                source: SubtypeSource::LmPrompt,
                score: (c as f64 / denom).min(1.0),
            })
            .collect(),
    ))
}

/// The singular and plural infill templates for `term`.
pub fn infill_templates(term: &str) -> [String; 2] {
    let singular = lemma_key(term);
    [
        format!("{MASK} is a kind of {singular}."),
        format!("{MASK} are kinds of {}.", pluralize_phrase(&singular)),
    ]
}

/// Top-`k` infill fills across both templates, scored by fill probability.
pub fn mlm_subtypes(term: &str, provider: &dyn MaskInfillProvider, k: usize) -> Result<Vec<SubtypeRecord>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let parent = normalize_phrase(term);
    let mut records = Vec::new();
    for template in infill_templates(term) {
        // One spare fill in case the parent itself comes back.
        let fills = provider.infill(&template, k + 1).map_err(|e| Error::SubtypeProvider(e.to_string()))?;
        for (fill, p) in fills {
            records.push(SubtypeRecord {
                term: normalize_phrase(&fill),
                parent: parent.clone(),
                source: SubtypeSource::MlmInfill,
                score: if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 },
            });
        }
    }
    let mut out = finalize(records);
    out.truncate(k);
    Ok(out)
}

// ---------------------------------------------------------------------------
// In-process stubs
// ---------------------------------------------------------------------------

/// Completion stub answering from a table keyed by the lemma of the kind
/// named on the prompt's last line.
#[derive(Debug, Clone, Default)]
pub struct ScriptedCompletion {
    by_term: BTreeMap<String, Vec<String>>,
}

impl ScriptedCompletion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, term: &str, completion: &str) -> Self {
        self.by_term.entry(lemma_key(term)).or_default().push(completion.to_string());
        self
    }

    /// Reads `term<TAB>completion` lines; repeated terms add sequences.
    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Self::default();
        for line in lexicon::read_lines(path)? {
            if let Some((term, completion)) = line.split_once('\t') {
                s = s.with(term, completion);
            }
        }
        Ok(s)
    }
}

impl TextCompletionProvider for ScriptedCompletion {
    fn complete(&self, prompt: &str, n_sequences: usize) -> Result<Vec<String>> {
        let last = prompt.lines().last().unwrap_or("");
        let term = last.trim().trim_start_matches("Types of ").trim_end_matches(':');
        Ok(self
            .by_term
            .get(&lemma_key(term))
            .map(|v| v.iter().take(n_sequences).cloned().collect())
            .unwrap_or_default())
    }
}

/// Infill stub keyed by the lemma of the kind in the template.
#[derive(Debug, Clone, Default)]
pub struct TableInfill {
    by_term: BTreeMap<String, Vec<(String, f64)>>,
}

impl TableInfill {
    pub fn with(mut self, term: &str, fills: &[(&str, f64)]) -> Self {
        self.by_term
            .entry(lemma_key(term))
            .or_default()
            .extend(fills.iter().map(|(f, p)| (f.to_string(), *p)));
        self
    }

    /// Reads `term<TAB>fill<TAB>probability` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let mut t = Self::default();
        for line in lexicon::read_lines(path)? {
            let cols: Vec<&str> = line.split('\t').collect();
            let [term, fill, p] = cols[..] else {
                return Err(Error::InvalidInput(format!("{}: expected 3 columns in {line:?}", path.display())));
            };
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{}: bad probability {p:?}", path.display())))?;
            t = t.with(term, &[(fill.trim(), p)]);
        }
        Ok(t)
    }
}

impl MaskInfillProvider for TableInfill {
    fn infill(&self, text: &str, k: usize) -> Result<Vec<(String, f64)>> {
        let kind = text
            .trim_end_matches('.')
            .rsplit_once(" of ")
            .map(|(_, t)| t)
            .unwrap_or("");
        let mut fills = self.by_term.get(&lemma_key(kind)).cloned().unwrap_or_default();
        fills.sort_by(|a, b| b.1.total_cmp(&a.1));
        fills.truncate(k);
        Ok(fills)
    }
}
