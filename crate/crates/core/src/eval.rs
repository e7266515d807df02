//! Precision@k, per-template validity, dataset statistics and run
//! comparisons.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::filter::{Exemplar, ExemplarStatus};
use crate::jsonl;
use crate::rank::NliFilterMode;
use crate::template::{ExemplarKind, TemplateId};
use crate::{Error, Result};

pub const LABEL_SCHEMA: &str = "genex.label";

/// One line of a labels file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    #[serde(rename = "exemplarId", alias = "exemplar_id")]
    pub exemplar_id: String,
    pub kind: ExemplarKind,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub exemplar_id: String,
    pub valid_instantiation: Option<bool>,
    pub valid_exception: Option<bool>,
}

impl GoldLabel {
    pub fn valid_as(&self, kind: ExemplarKind) -> Option<bool> {
        match kind {
            ExemplarKind::Exception => self.valid_exception,
            ExemplarKind::Instantiation => self.valid_instantiation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldLabels {
    labels: BTreeMap<String, GoldLabel>,
}

impl GoldLabels {
    /// Merges records; a later record for the same id and kind overrides.
    pub fn from_records(records: impl IntoIterator<Item = LabelRecord>) -> Self {
        let mut labels: BTreeMap<String, GoldLabel> = BTreeMap::new();
        for r in records {
            let g = labels.entry(r.exemplar_id.clone()).or_insert_with(|| GoldLabel {
                exemplar_id: r.exemplar_id.clone(),
                valid_instantiation: None,
                valid_exception: None,
            });
            match r.kind {
                ExemplarKind::Exception => g.valid_exception = Some(r.valid),
                ExemplarKind::Instantiation => g.valid_instantiation = Some(r.valid),
            }
        }
        Self { labels }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(jsonl::read::<LabelRecord>(path, LABEL_SCHEMA, 1, false)?))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, exemplar_id: &str) -> Option<&GoldLabel> {
        self.labels.get(exemplar_id)
    }

    /// The label of an exemplar for its own kind.
    pub fn valid(&self, ex: &Exemplar) -> Option<bool> {
        self.get(&ex.id).and_then(|g| g.valid_as(ex.kind))
    }
}

/// Output order: validity probability descending, then combined rank, then id.
pub fn output_order(a: &Exemplar, b: &Exemplar) -> Ordering {
    let p = |e: &Exemplar| e.validity.as_ref().map_or(f64::NEG_INFINITY, |s| s.probability);
    p(b).total_cmp(&p(a))
        .then_with(|| a.combined_rank.total_cmp(&b.combined_rank))
        .then_with(|| a.id.cmp(&b.id))
}

/// Per-generic exemplars in output order, restricted to selected ones when
/// `selected_only`.
pub fn rank_per_generic(exs: &[Exemplar], selected_only: bool) -> BTreeMap<String, Vec<Exemplar>> {
    let mut out: BTreeMap<String, Vec<Exemplar>> = BTreeMap::new();
    for ex in exs.iter().filter(|e| !selected_only || e.status == ExemplarStatus::SelectedValid) {
        out.entry(ex.generic_id.clone()).or_default().push(ex.clone());
    }
    for list in out.values_mut() {
        list.sort_by(output_order);
    }
    out
}

/// Pooled precision over every generic's first `k` exemplars.
pub fn precision_at_k(ranked: &BTreeMap<String, Vec<Exemplar>>, labels: &GoldLabels, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let mut missing = Vec::new();
    let (mut valid, mut counted) = (0usize, 0usize);
    for ex in ranked.values().flat_map(|list| list.iter().take(k)) {
        counted += 1;
        match labels.valid(ex) {
            Some(true) => valid += 1,
            Some(false) => {}
            None => missing.push(ex.id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingLabel(missing));
    }
    if counted == 0 {
        return Err(Error::InvalidInput("no exemplars to evaluate".into()));
    }
    Ok(valid as f64 / counted as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateValidity {
    pub valid_fraction: f64,
    pub n_gens: usize,
}

/// Fraction valid among each template's first `n_per_template` exemplars in
/// output order. Templates without exemplars are omitted.
pub fn per_template_validity(
    exs: &[Exemplar],
    labels: &GoldLabels,
    n_per_template: usize,
) -> Result<BTreeMap<TemplateId, TemplateValidity>> {
    let mut by_template: BTreeMap<TemplateId, Vec<&Exemplar>> = BTreeMap::new();
    for ex in exs {
        by_template.entry(ex.template_id).or_default().push(ex);
    }
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for (t, mut list) in by_template {
        list.sort_by(|a, b| output_order(a, b));
        list.truncate(n_per_template);
        if list.is_empty() {
            continue;
        }
        let mut valid = 0;
        for ex in &list {
            match labels.valid(ex) {
                Some(true) => valid += 1,
                Some(false) => {}
                None => missing.push(ex.id.clone()),
            }
        }
        out.insert(t, TemplateValidity { valid_fraction: valid as f64 / list.len() as f64, n_gens: list.len() });
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::MissingLabel(missing));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_generics: usize,
    pub n_exceptions: usize,
    pub n_instantiations: usize,
    pub n_total: usize,
    pub by_template: BTreeMap<TemplateId, usize>,
}

pub fn dataset_stats(exs: &[Exemplar]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    let mut generics = BTreeSet::new();
    for ex in exs {
        generics.insert(ex.generic_id.as_str());
        match ex.kind {
            ExemplarKind::Exception => stats.n_exceptions += 1,
            ExemplarKind::Instantiation => stats.n_instantiations += 1,
        }
        *stats.by_template.entry(ex.template_id).or_default() += 1;
    }
    stats.n_generics = generics.len();
    stats.n_total = stats.n_exceptions + stats.n_instantiations;
    stats
}

/// Lowercase, whitespace collapsed, terminal punctuation stripped.
pub fn normalize_for_uniqueness(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?' | ',' | ';' | ':') || c.is_whitespace())
        .to_string()
}

pub fn unique_count<'a>(texts: impl IntoIterator<Item = &'a str>) -> usize {
    texts.into_iter().map(normalize_for_uniqueness).collect::<BTreeSet<_>>().len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: String,
    pub run_a: Option<f64>,
    pub run_b: Option<f64>,
    /// `run_a - run_b`.
    pub delta: Option<f64>,
}

impl AblationRow {
    fn new(metric: impl Into<String>, a: Option<f64>, b: Option<f64>) -> Self {
        let delta = a.zip(b).map(|(a, b)| a - b);
        Self { metric: metric.into(), run_a: a, run_b: b, delta }
    }
}

fn labeled_precision<'a>(items: impl Iterator<Item = &'a Exemplar>, labels: &GoldLabels) -> Option<f64> {
    let (mut valid, mut n) = (0usize, 0usize);
    for ex in items {
        if let Some(v) = labels.valid(ex) {
            n += 1;
            valid += usize::from(v);
        }
    }
    (n > 0).then(|| valid as f64 / n as f64)
}

/// Change in labeled precision of `kind` exemplars when the NLI filter
/// `mode` is applied.
pub fn nli_precision_gain(exs: &[Exemplar], labels: &GoldLabels, kind: ExemplarKind, mode: NliFilterMode) -> Option<f64> {
    let of_kind = || exs.iter().filter(move |e| e.kind == kind);
    let before = labeled_precision(of_kind(), labels)?;
    let after = labeled_precision(of_kind().filter(|e| mode.keeps(&e.nli, kind)), labels)?;
    Some(after - before)
}

/// Compares two runs over the same generics. Label-based rows are added when
/// labels are given; unlabeled exemplars are left out of those rows.
pub fn ablation_report(run_a: &[Exemplar], run_b: &[Exemplar], labels: Option<&GoldLabels>) -> Result<Vec<AblationRow>> {
    let ids = |run: &[Exemplar]| run.iter().map(|e| e.generic_id.clone()).collect::<BTreeSet<_>>();
    let (ga, gb) = (ids(run_a), ids(run_b));
    if ga != gb {
        let only_a: Vec<_> = ga.difference(&gb).cloned().collect();
        let only_b: Vec<_> = gb.difference(&ga).cloned().collect();
        return Err(Error::InputMismatch(format!(
            "runs cover different generics (only in A: {only_a:?}, only in B: {only_b:?})"
        )));
    }
    let uniq = |run: &[Exemplar], kind: Option<ExemplarKind>| {
        unique_count(run.iter().filter(|e| kind.is_none_or(|k| e.kind == k)).map(|e| e.text.as_str())) as f64
    };
    let mut rows = vec![AblationRow::new("unique generations", Some(uniq(run_a, None)), Some(uniq(run_b, None)))];
    for kind in [ExemplarKind::Exception, ExemplarKind::Instantiation] {
        rows.push(AblationRow::new(
            format!("unique {}s", kind.as_str()),
            Some(uniq(run_a, Some(kind))),
            Some(uniq(run_b, Some(kind))),
        ));
    }
    if let Some(labels) = labels {
        for kind in [ExemplarKind::Exception, ExemplarKind::Instantiation] {
            rows.push(AblationRow::new(
                format!("valid proportion ({})", kind.as_str()),
                labeled_precision(run_a.iter().filter(|e| e.kind == kind), labels),
                labeled_precision(run_b.iter().filter(|e| e.kind == kind), labels),
            ));
            for mode in NliFilterMode::ALL {
                rows.push(AblationRow::new(
                    format!("{} precision gain ({})", mode.as_str(), kind.as_str()),
                    nli_precision_gain(run_a, labels, kind, mode),
                    nli_precision_gain(run_b, labels, kind, mode),
                ));
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision_at_k: BTreeMap<usize, f64>,
    pub per_template: BTreeMap<TemplateId, TemplateValidity>,
    pub stats: DatasetStats,
    pub ablation_rows: Vec<AblationRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "{}", line(widths.iter().map(|_| "").collect()).replace(' ', "-"));
    for row in rows {
        let _ = writeln!(out, "{}", line(row.iter().map(String::as_str).collect()));
    }
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let s = &self.stats;
        let _ = writeln!(
            out,
            "generics {}  exceptions {}  instantiations {}  total {}\n",
            s.n_generics, s.n_exceptions, s.n_instantiations, s.n_total
        );
        if !s.by_template.is_empty() {
            let rows: Vec<Vec<String>> = s.by_template.iter().map(|(t, n)| vec![t.to_string(), n.to_string()]).collect();
            table(&mut out, &["template", "exemplars"], &rows);
            out.push('\n');
        }
        if !self.precision_at_k.is_empty() {
            let rows: Vec<Vec<String>> =
                self.precision_at_k.iter().map(|(k, p)| vec![format!("p@{k}"), format!("{p:.4}")]).collect();
            table(&mut out, &["metric", "value"], &rows);
            out.push('\n');
        }
        if !self.per_template.is_empty() {
            let rows: Vec<Vec<String>> = self
                .per_template
                .iter()
                .map(|(t, v)| vec![t.to_string(), format!("{:.4}", v.valid_fraction), v.n_gens.to_string()])
                .collect();
            table(&mut out, &["template", "valid", "n"], &rows);
            out.push('\n');
        }
        if !self.ablation_rows.is_empty() {
            let rows: Vec<Vec<String>> = self
                .ablation_rows
                .iter()
                .map(|r| vec![r.metric.clone(), fmt_opt(r.run_a), fmt_opt(r.run_b), fmt_opt(r.delta)])
                .collect();
            table(&mut out, &["metric", "run A", "run B", "delta"], &rows);
        }
        out
    }
}
