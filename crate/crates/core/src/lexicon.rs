//! Word-level text handling and a rule-based English inflector.
//!
//! All constraint matching in the crate happens on the token sequences
//! produced by [`tokenize`]: lowercase, whitespace separated, with sentence
//! punctuation split off into its own token.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use crate::error::IoContext;

/// Longest n-gram (in words) a lexical constraint may carry.
pub const MAX_NGRAM_WORDS: usize = 4;

const SPLIT_PUNCT: &[char] = &[',', '.', '!', '?', ';', ':', '"', '(', ')'];

/// Lowercases and splits text into word tokens. Punctuation in
/// `SPLIT_PUNCT` becomes its own token; apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut word = String::new();
        for ch in raw.chars() {
            if SPLIT_PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Joins tokens back into a sentence, attaching punctuation to the
/// preceding word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for tok in tokens {
        let tok = tok.as_ref();
        let attaches = tok.len() == 1 && matches!(tok, "," | "." | "!" | "?" | ";" | ":");
        if !out.is_empty() && !attaches {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Uppercases the first character.
pub fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Lowercases and collapses internal whitespace.
pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub(crate) const MODALS: &[&str] = &[
    "can", "could", "may", "might", "must", "shall", "should", "will", "would",
];
pub(crate) const COPULAS: &[&str] = &["is", "are", "was", "were", "be"];
pub(crate) const DETERMINERS: &[&str] = &[
    "a", "an", "the", "some", "many", "most", "their", "its", "his", "her", "our", "your",
];
pub(crate) const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "during", "for", "with", "from", "into", "to", "of", "by", "under", "over",
];
pub(crate) const NEGATIONS: &[&str] = &["not", "cannot", "never", "no", "n't", "don't", "doesn't", "can't", "won't"];

const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("mouse", "mice"),
    ("goose", "geese"),
    ("child", "children"),
    ("person", "people"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("man", "men"),
    ("woman", "women"),
    ("ox", "oxen"),
    ("louse", "lice"),
    ("cactus", "cacti"),
    ("fungus", "fungi"),
    ("larva", "larvae"),
    ("wolf", "wolves"),
    ("leaf", "leaves"),
    ("knife", "knives"),
    ("life", "lives"),
    ("wife", "wives"),
    ("calf", "calves"),
    ("half", "halves"),
    ("shelf", "shelves"),
    ("thief", "thieves"),
    ("loaf", "loaves"),
    ("potato", "potatoes"),
    ("tomato", "tomatoes"),
    ("hero", "heroes"),
    ("volcano", "volcanoes"),
    ("mosquito", "mosquitoes"),
    ("tornado", "tornadoes"),
];

const UNCOUNTABLE: &[&str] = &[
    "fish", "sheep", "deer", "moose", "salmon", "trout", "bison", "species", "series", "malaria",
    "blood", "water", "honey", "grass", "game", "milk", "rice", "information", "furniture",
    "nectar", "pollen", "silk", "wool", "meat", "food", "lava", "ash", "rain", "snow", "sunlight",
    "oxygen", "sand", "mud", "news", "seafood", "poultry", "livestock", "cattle", "plankton",
    "hunting", "flight", "music", "salt", "sugar", "soil", "wood", "fur", "prey",
];

const IRREGULAR_VERBS: &[(&str, &str, &str)] = &[
    // lemma, third person singular, past
    ("be", "is", "was"),
    ("have", "has", "had"),
    ("do", "does", "did"),
    ("go", "goes", "went"),
    ("fly", "flies", "flew"),
    ("eat", "eats", "ate"),
    ("drink", "drinks", "drank"),
    ("swim", "swims", "swam"),
    ("run", "runs", "ran"),
    ("make", "makes", "made"),
    ("lay", "lays", "laid"),
    ("grow", "grows", "grew"),
    ("give", "gives", "gave"),
    ("sing", "sings", "sang"),
    ("sting", "stings", "stung"),
    ("bite", "bites", "bit"),
    ("find", "finds", "found"),
    ("take", "takes", "took"),
    ("see", "sees", "saw"),
    ("shed", "sheds", "shed"),
    ("spin", "spins", "spun"),
    ("build", "builds", "built"),
    ("catch", "catches", "caught"),
    ("feed", "feeds", "fed"),
    ("sleep", "sleeps", "slept"),
    ("lie", "lies", "lay"),
    ("die", "dies", "died"),
];

const NOMINALIZATIONS: &[(&str, &str)] = &[
    ("fly", "flight"),
    ("produce", "production"),
    ("grow", "growth"),
    ("die", "death"),
    ("breathe", "breath"),
    ("migrate", "migration"),
    ("pollinate", "pollination"),
    ("hibernate", "hibernation"),
    ("reproduce", "reproduction"),
    ("erupt", "eruption"),
    ("digest", "digestion"),
];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn ends_consonant_y(w: &str) -> bool {
    let b = w.as_bytes();
    b.len() >= 2 && b[b.len() - 1] == b'y' && !is_vowel(b[b.len() - 2] as char)
}

fn sibilant(w: &str) -> bool {
    w.ends_with('s') || w.ends_with('x') || w.ends_with('z') || w.ends_with("ch") || w.ends_with("sh")
}

/// Plural of a single lowercase noun.
pub fn pluralize(word: &str) -> String {
    if UNCOUNTABLE.contains(&word) {
        return word.to_string();
    }
    if let Some((_, p)) = IRREGULAR_PLURALS.iter().find(|(s, _)| *s == word) {
        return p.to_string();
    }
    if IRREGULAR_PLURALS.iter().any(|(_, p)| *p == word) {
        return word.to_string();
    }
    if ends_consonant_y(word) {
        return format!("{}ies", &word[..word.len() - 1]);
    }
    if sibilant(word) {
        return format!("{word}es");
    }
    format!("{word}s")
}

/// Singular of a single lowercase noun. Words that do not look plural are
/// returned unchanged.
pub fn singularize(word: &str) -> String {
    if UNCOUNTABLE.contains(&word) {
        return word.to_string();
    }
    if let Some((s, _)) = IRREGULAR_PLURALS.iter().find(|(_, p)| *p == word) {
        return s.to_string();
    }
    if IRREGULAR_PLURALS.iter().any(|(s, _)| *s == word) {
        return word.to_string();
    }
    if word.len() <= 3 || word.ends_with("ss") || word.ends_with("us") || word.ends_with("is") {
        return word.to_string();
    }
    if let Some(stem) = word.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suf in ["ches", "shes", "sses", "xes", "zes"] {
        if word.ends_with(suf) {
            return word[..word.len() - 2].to_string();
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        return stem.to_string();
    }
    word.to_string()
}

/// Singularizes the last word of a phrase.
pub fn singularize_phrase(phrase: &str) -> String {
    map_head(phrase, singularize)
}

/// Pluralizes the last word of a phrase.
pub fn pluralize_phrase(phrase: &str) -> String {
    map_head(phrase, pluralize)
}

fn map_head(phrase: &str, f: impl Fn(&str) -> String) -> String {
    let mut words: Vec<String> = phrase.split_whitespace().map(str::to_lowercase).collect();
    if let Some(last) = words.last_mut() {
        *last = f(last);
    }
    words.join(" ")
}

/// True when the head noun of `phrase` reads as plural.
pub fn is_plural_phrase(phrase: &str) -> bool {
    let head = phrase.split_whitespace().last().unwrap_or("").to_lowercase();
    if UNCOUNTABLE.contains(&head.as_str()) {
        return true;
    }
    singularize(&head) != head
}

/// Third person singular present.
pub fn third_person(lemma: &str) -> String {
    if let Some((_, s, _)) = IRREGULAR_VERBS.iter().find(|(l, _, _)| *l == lemma) {
        return s.to_string();
    }
    if ends_consonant_y(lemma) {
        return format!("{}ies", &lemma[..lemma.len() - 1]);
    }
    if sibilant(lemma) || lemma.ends_with('o') {
        return format!("{lemma}es");
    }
    format!("{lemma}s")
}

fn doubles_final_consonant(lemma: &str) -> bool {
    let c: Vec<char> = lemma.chars().collect();
    let n = c.len();
    (3..=4).contains(&n)
        && !is_vowel(c[n - 1])
        && !matches!(c[n - 1], 'w' | 'x' | 'y')
        && is_vowel(c[n - 2])
        && !is_vowel(c[n - 3])
}

/// Present participle / gerund.
pub fn gerund(lemma: &str) -> String {
    if lemma == "be" {
        return "being".into();
    }
    if let Some(stem) = lemma.strip_suffix("ie") {
        return format!("{stem}ying");
    }
    if lemma.ends_with('e') && !lemma.ends_with("ee") && !lemma.ends_with("ye") && !lemma.ends_with("oe") {
        return format!("{}ing", &lemma[..lemma.len() - 1]);
    }
    if doubles_final_consonant(lemma) {
        let last = lemma.chars().last().unwrap_or_default();
        return format!("{lemma}{last}ing");
    }
    format!("{lemma}ing")
}

/// Simple past.
pub fn past(lemma: &str) -> String {
    if let Some((_, _, p)) = IRREGULAR_VERBS.iter().find(|(l, _, _)| *l == lemma) {
        return p.to_string();
    }
    if lemma.ends_with('e') {
        return format!("{lemma}d");
    }
    if ends_consonant_y(lemma) {
        return format!("{}ied", &lemma[..lemma.len() - 1]);
    }
    if doubles_final_consonant(lemma) {
        let last = lemma.chars().last().unwrap_or_default();
        return format!("{lemma}{last}ed");
    }
    format!("{lemma}ed")
}

/// Derived noun for a verb, when one is known.
pub fn nominalization(lemma: &str) -> Option<&'static str> {
    NOMINALIZATIONS.iter().find(|(v, _)| *v == lemma).map(|(_, n)| *n)
}

/// Whether a multiword or single word phrase is treated as a verb phrase or
/// a noun phrase when expanding its lexical family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseKind {
    Verb,
    Noun,
}

/// Morphology and synonym lookup used to expand constraint n-grams.
pub trait Lexicon: Send + Sync {
    /// Verb lemma for an inflected form.
    fn verb_lemma(&self, word: &str) -> String;
    /// Whether `word` is a known verb lemma.
    fn is_verb(&self, word: &str) -> bool;
    /// Synonyms of a lowercase phrase.
    fn synonyms(&self, phrase: &str) -> Vec<String>;

    /// Lemma used for equality tests between terms (noun-singular).
    fn lemma(&self, phrase: &str) -> String {
        singularize_phrase(&normalize_phrase(phrase))
    }

    /// Surface forms sharing the phrase's lemma, plus synonyms and their
    /// forms. Past tense forms are not part of the family.
    fn family(&self, phrase: &str, kind: PhraseKind) -> Vec<String> {
        let phrase = normalize_phrase(phrase);
        let mut out = BTreeSet::new();
        if phrase.is_empty() {
            return Vec::new();
        }
        let base = match kind {
            PhraseKind::Noun => singularize_phrase(&phrase),
            PhraseKind::Verb => {
                let mut words: Vec<String> = phrase.split_whitespace().map(String::from).collect();
                words[0] = self.verb_lemma(&words[0]);
                words.join(" ")
            }
        };
        let mut seeds = vec![phrase.clone()];
        seeds.extend(self.synonyms(&phrase));
        if base != phrase {
            seeds.extend(self.synonyms(&base));
        }
        for seed in seeds {
            match kind {
                PhraseKind::Verb => {
                    let mut words: Vec<String> = seed.split_whitespace().map(String::from).collect();
                    let lemma = self.verb_lemma(&words[0]);
                    let tail = words.split_off(1);
                    for form in [lemma.clone(), third_person(&lemma), gerund(&lemma)] {
                        let mut w = vec![form];
                        w.extend(tail.iter().cloned());
                        out.insert(w.join(" "));
                    }
                    if tail.is_empty() {
                        if let Some(n) = nominalization(&lemma) {
                            out.insert(n.to_string());
                        }
                    }
                }
                PhraseKind::Noun => {
                    out.insert(singularize_phrase(&seed));
                    out.insert(pluralize_phrase(&singularize_phrase(&seed)));
                }
            }
        }
        out.into_iter()
            .filter(|p| p.split_whitespace().count() <= MAX_NGRAM_WORDS)
            .collect()
    }
}

/// Default lexicon: rule-based inflection, a verb lemma list and a synonym
/// table.
#[derive(Debug, Clone, Default)]
pub struct RuleLexicon {
    verbs: BTreeSet<String>,
    synonyms: BTreeMap<String, Vec<String>>,
}

impl RuleLexicon {
    pub fn new(verbs: impl IntoIterator<Item = String>, synonyms: BTreeMap<String, Vec<String>>) -> Self {
        let mut verbs: BTreeSet<String> = verbs.into_iter().map(|v| v.to_lowercase()).collect();
        for (l, _, _) in IRREGULAR_VERBS {
            verbs.insert(l.to_string());
        }
        Self { verbs, synonyms }
    }

    /// Loads a verb list (one lemma per line) and a synonym table.
    pub fn load(verbs_path: Option<&Path>, synonyms_path: Option<&Path>) -> crate::Result<Self> {
        let verbs = match verbs_path {
            Some(p) => read_lines(p)?,
            None => Vec::new(),
        };
        let synonyms = match synonyms_path {
            Some(p) => load_synonym_table(p)?,
            None => BTreeMap::new(),
        };
        Ok(Self::new(verbs, synonyms))
    }

    pub fn verbs(&self) -> impl Iterator<Item = &str> {
        self.verbs.iter().map(String::as_str)
    }
}

impl Lexicon for RuleLexicon {
    fn verb_lemma(&self, word: &str) -> String {
        let word = word.to_lowercase();
        if let Some((l, _, _)) = IRREGULAR_VERBS.iter().find(|(l, s, p)| *l == word || *s == word || *p == word) {
            return l.to_string();
        }
        if self.verbs.contains(&word) {
            return word;
        }
        let mut candidates = Vec::new();
        if let Some(stem) = word.strip_suffix("ying") {
            candidates.push(format!("{stem}ie"));
            candidates.push(format!("{stem}y"));
        }
        if let Some(stem) = word.strip_suffix("ing") {
            candidates.push(format!("{stem}e"));
            let c: Vec<char> = stem.chars().collect();
            if c.len() >= 2 && c[c.len() - 1] == c[c.len() - 2] {
                candidates.push(c[..c.len() - 1].iter().collect());
            }
            candidates.push(stem.to_string());
        }
        if let Some(stem) = word.strip_suffix("ies") {
            candidates.push(format!("{stem}y"));
        }
        if let Some(stem) = word.strip_suffix("es") {
            candidates.push(stem.to_string());
        }
        if let Some(stem) = word.strip_suffix('s') {
            candidates.push(stem.to_string());
        }
        if let Some(stem) = word.strip_suffix("ed") {
            candidates.push(stem.to_string());
            candidates.push(format!("{stem}e"));
        }
        if let Some(hit) = candidates.iter().find(|c| self.verbs.contains(*c)) {
            return hit.clone();
        }
        // Unknown verb: fall back to the shortest plausible stem.
        if let Some(stem) = word.strip_suffix("ing") {
            return stem.to_string();
        }
        if word.ends_with("ies") {
            return format!("{}y", &word[..word.len() - 3]);
        }
        if sibilant(word.trim_end_matches("es")) && word.ends_with("es") {
            return word[..word.len() - 2].to_string();
        }
        if word.ends_with('s') && !word.ends_with("ss") {
            return word[..word.len() - 1].to_string();
        }
        word
    }

    fn is_verb(&self, word: &str) -> bool {
        self.verbs.contains(&word.to_lowercase())
    }

    fn synonyms(&self, phrase: &str) -> Vec<String> {
        self.synonyms.get(phrase).cloned().unwrap_or_default()
    }
}

pub(crate) fn read_lines(path: &Path) -> crate::Result<Vec<String>> {
    let file = std::fs::File::open(path).io_context(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.io_context(path)?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.to_string());
    }
    Ok(out)
}

/// Reads a tab-separated synonym table: `term<TAB>syn1, syn2, ...`.
/// Entries are symmetric.
pub fn load_synonym_table(path: &Path) -> crate::Result<BTreeMap<String, Vec<String>>> {
    let mut table: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for line in read_lines(path)? {
        let Some((term, syns)) = line.split_once('\t') else {
            continue;
        };
        let term = normalize_phrase(term);
        for syn in syns.split(',').map(normalize_phrase).filter(|s| !s.is_empty()) {
            table.entry(term.clone()).or_default().insert(syn.clone());
            table.entry(syn).or_default().insert(term.clone());
        }
    }
    Ok(table
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect())
}
