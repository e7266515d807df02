//! Batch orchestration: configuration, the generate and eval runs, and the
//! run manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{
    BridgeClient, BridgeCompletion, BridgeDiscriminator, BridgeInfill, BridgeLm, BridgeNli, DEFAULT_TOP_K,
};
use crate::corpus::{load_generics, parse_generic, Generic, GenericRecord, Preprocessor, RuleSpanProvider};
use crate::decode::{beam_decode, constrained_decode, DecoderConfig, LmScorer, NgramScorer, ToyScorer, Vocabulary};
use crate::error::{IoContext, JsonContext};
use crate::eval::{
    ablation_report, dataset_stats, per_template_validity, precision_at_k, rank_per_generic, DatasetStats, EvalReport,
    GoldLabels,
};
use crate::filter::{
    canonical_order, read_exemplars, render_exemplars, validity_select, viability_filter, DiscriminatorKind,
    DiscriminatorProvider, Exemplar, ExemplarStatus, KeywordDiscriminator, RejectStage, StubDefault, ValidityScorers,
};
use crate::lexicon::{capitalize, detokenize, tokenize, RuleLexicon};
use crate::rank::{rank_outputs, select_prompts, NliFilterMode, NliProvider, Output, RuleNli};
use crate::subtype::{
    assign_kind_category, kb_subtypes, lm_subtypes, merge_subtypes, mlm_subtypes, EdgeStore, KindCategory,
    KindSeeds, MaskInfillProvider, ScriptedCompletion, SubtypePromptConfig, SubtypeRecord, SubtypeSource,
    TableInfill, TextCompletionProvider,
};
use crate::template::{
    build_prompts, compile_constraints, templates_for, ConnectiveConfig, ConstraintSet, Prompt, TemplateId,
    TemplateSpec,
};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "genex.manifest";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const EXEMPLARS_FILE: &str = "exemplars.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub generics: PathBuf,
    pub kb: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hedges: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_referents: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind_seeds: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype_prompts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connectives: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubtypeConfig {
    pub sources: Vec<SubtypeSource>,
    pub kb_max_depth: usize,
    /// Records requested from each source.
    pub per_source: usize,
    pub n_sequences: usize,
    pub max_concept_subtypes: usize,
    pub max_property_subtypes: usize,
}

impl Default for SubtypeConfig {
    fn default() -> Self {
        Self {
            sources: vec![SubtypeSource::Kb, SubtypeSource::LmPrompt, SubtypeSource::MlmInfill],
            kb_max_depth: 2,
            per_source: 10,
            n_sequences: 5,
            max_concept_subtypes: 10,
            max_property_subtypes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LmConfig {
    /// Interpolated trigram model trained on a corpus file.
    Ngram { corpus: PathBuf },
    /// Table-driven scorer from a JSON file.
    Toy { path: PathBuf },
    Bridge {
        #[serde(default = "default_top_k")]
        top_k: usize,
        /// Word list used as the decoding vocabulary.
        vocabulary: PathBuf,
    },
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NliConfig {
    #[default]
    Stub,
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TableProviderConfig {
    Stub { path: PathBuf },
    Bridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscriminatorConfig {
    Stub {
        model_id: String,
        #[serde(default)]
        rules: Vec<(String, f64)>,
        default: StubDefault,
    },
    Bridge {
        model: String,
    },
}

impl DiscriminatorConfig {
    fn stub(model_id: &str) -> Self {
        DiscriminatorConfig::Stub { model_id: model_id.into(), rules: Vec::new(), default: StubDefault::Constant(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub lm: LmConfig,
    #[serde(default)]
    pub nli: NliConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<TableProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infill: Option<TableProviderConfig>,
    #[serde(default = "default_viability")]
    pub viability: DiscriminatorConfig,
    #[serde(default = "default_validity_exception")]
    pub validity_exception: DiscriminatorConfig,
    #[serde(default = "default_validity_instantiation")]
    pub validity_instantiation: DiscriminatorConfig,
}

fn default_viability() -> DiscriminatorConfig {
    DiscriminatorConfig::stub("stub-viability")
}

fn default_validity_exception() -> DiscriminatorConfig {
    DiscriminatorConfig::stub("stub-validity-exception")
}

fn default_validity_instantiation() -> DiscriminatorConfig {
    DiscriminatorConfig::stub("stub-validity-instantiation")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    /// Program and arguments of a bridge speaking over stdio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub socket: Option<PathBuf>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_in_flight() -> usize {
    crate::bridge::DEFAULT_MAX_IN_FLIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub viability_threshold: f64,
    pub validity_threshold: f64,
    /// Exemplars selected per generic and kind.
    pub top_n: usize,
    pub fail_open: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nli_filter: Option<NliFilterMode>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            viability_threshold: crate::filter::DEFAULT_THRESHOLD,
            validity_threshold: crate::filter::DEFAULT_THRESHOLD,
            top_n: 10,
            fail_open: false,
            nli_filter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub workers: usize,
    /// Plain beam search when false.
    pub constrained: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { workers: 4, constrained: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Propagated to every stochastic component.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: PathsConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub subtypes: SubtypeConfig,
    pub providers: ProvidersConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeConfig>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl PipelineConfig {
    /// Sets the run seed and the decoder seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.decoder.seed = seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.decoder.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).io_context(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.output_dir);
        let paths = &mut self.paths;
        fix(&mut paths.generics);
        fix(&mut paths.kb);
        for p in [
            &mut paths.verbs,
            &mut paths.synonyms,
            &mut paths.hedges,
            &mut paths.human_referents,
            &mut paths.kind_seeds,
            &mut paths.subtype_prompts,
            &mut paths.connectives,
        ] {
            fix_opt(p);
        }
        match &mut self.providers.lm {
            LmConfig::Ngram { corpus } => fix(corpus),
            LmConfig::Toy { path } => fix(path),
            LmConfig::Bridge { vocabulary, .. } => fix(vocabulary),
        }
        for p in [&mut self.providers.completion, &mut self.providers.infill].into_iter().flatten() {
            if let TableProviderConfig::Stub { path } = p {
                fix(path);
            }
        }
        if let Some(b) = &mut self.bridge {
            fix_opt(&mut b.socket);
        }
    }

    fn input_paths(&self) -> Vec<(&'static str, &Path)> {
        let p = &self.paths;
        let mut out: Vec<(&'static str, &Path)> = vec![("generics", &p.generics), ("kb", &p.kb)];
        let optional = [
            ("verbs", &p.verbs),
            ("synonyms", &p.synonyms),
            ("hedges", &p.hedges),
            ("human_referents", &p.human_referents),
            ("kind_seeds", &p.kind_seeds),
            ("subtype_prompts", &p.subtype_prompts),
            ("connectives", &p.connectives),
        ];
        out.extend(optional.into_iter().filter_map(|(n, p)| p.as_deref().map(|p| (n, p))));
        match &self.providers.lm {
            LmConfig::Ngram { corpus } => out.push(("lm corpus", corpus)),
            LmConfig::Toy { path } => out.push(("toy scorer", path)),
            LmConfig::Bridge { vocabulary, .. } => out.push(("lm vocabulary", vocabulary)),
        }
        if let Some(TableProviderConfig::Stub { path }) = &self.providers.completion {
            out.push(("completion table", path));
        }
        if let Some(TableProviderConfig::Stub { path }) = &self.providers.infill {
            out.push(("infill table", path));
        }
        out
    }

    fn uses_bridge(&self) -> bool {
        let p = &self.providers;
        matches!(p.lm, LmConfig::Bridge { .. })
            || p.nli == NliConfig::Bridge
            || matches!(p.completion, Some(TableProviderConfig::Bridge))
            || matches!(p.infill, Some(TableProviderConfig::Bridge))
            || [&p.viability, &p.validity_exception, &p.validity_instantiation]
                .iter()
                .any(|d| matches!(d, DiscriminatorConfig::Bridge { .. }))
    }

    /// Checks every referenced path and value range before any work starts.
    pub fn validate(&self) -> Result<()> {
        for (name, path) in self.input_paths() {
            if !path.exists() {
                return Err(Error::Configuration(format!("{name} path {} does not exist", path.display())));
            }
        }
        self.decoder.validate()?;
        if self.decoder.seed != self.seed {
            return Err(Error::Configuration("decoder seed must equal the run seed".into()));
        }
        let f = &self.filter;
        for (name, t) in [("viability_threshold", f.viability_threshold), ("validity_threshold", f.validity_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Configuration(format!("{name} {t} outside [0, 1]")));
            }
        }
        if f.top_n == 0 {
            return Err(Error::Configuration("filter.top_n must be positive".into()));
        }
        if self.run.workers == 0 {
            return Err(Error::Configuration("run.workers must be positive".into()));
        }
        let s = &self.subtypes;
        if s.kb_max_depth == 0 || s.per_source == 0 || s.n_sequences == 0 {
            return Err(Error::Configuration("subtype depth, per_source and n_sequences must be positive".into()));
        }
        let check_stub = |name: &str, d: &DiscriminatorConfig| match d {
            DiscriminatorConfig::Stub { rules, default, .. } => {
                let d = match default {
                    StubDefault::Constant(p) => *p,
                    StubDefault::Hash { low } => *low,
                };
                if rules.iter().map(|r| r.1).chain([d]).all(|p| (0.0..=1.0).contains(&p)) {
                    Ok(())
                } else {
                    Err(Error::Configuration(format!("{name} stub probabilities must lie in [0, 1]")))
                }
            }
            DiscriminatorConfig::Bridge { .. } => Ok(()),
        };
        check_stub("viability", &self.providers.viability)?;
        check_stub("validity_exception", &self.providers.validity_exception)?;
        check_stub("validity_instantiation", &self.providers.validity_instantiation)?;
        if self.uses_bridge() {
            let b = self
                .bridge
                .as_ref()
                .ok_or_else(|| Error::Configuration("a provider uses the bridge but [bridge] is missing".into()))?;
            if b.command.is_some() == b.socket.is_some() {
                return Err(Error::Configuration("[bridge] needs exactly one of command or socket".into()));
            }
            if b.command.as_ref().is_some_and(|c| c.is_empty()) {
                return Err(Error::Configuration("[bridge] command is empty".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.run.workers = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

// ---------------------------------------------------------------------------
// Resources
// ---------------------------------------------------------------------------

struct Resources {
    lexicon: RuleLexicon,
    preprocessor: Preprocessor,
    kb: EdgeStore,
    seeds: KindSeeds,
    prompt_config: Option<SubtypePromptConfig>,
    connectives: ConnectiveConfig,
    completion: Option<Box<dyn TextCompletionProvider>>,
    infill: Option<Box<dyn MaskInfillProvider>>,
    nli: Box<dyn NliProvider>,
    viability: Box<dyn DiscriminatorProvider>,
    validity_exception: Box<dyn DiscriminatorProvider>,
    validity_instantiation: Box<dyn DiscriminatorProvider>,
    bridge: Option<Arc<BridgeClient>>,
}

fn connect_bridge(cfg: &BridgeConfig) -> Result<Arc<BridgeClient>> {
    let client = match (&cfg.command, &cfg.socket) {
        (Some(cmd), _) => BridgeClient::spawn(&cmd[0], &cmd[1..])?,
        #[cfg(unix)]
        (None, Some(sock)) => BridgeClient::connect_unix(sock)?,
        _ => return Err(Error::Configuration("no bridge transport configured".into())),
    };
    Ok(Arc::new(
        client.with_timeout(Duration::from_secs(cfg.timeout_secs)).with_max_in_flight(cfg.max_in_flight),
    ))
}

fn discriminator(
    cfg: &DiscriminatorConfig,
    kind: DiscriminatorKind,
    bridge: &Option<Arc<BridgeClient>>,
) -> Result<Box<dyn DiscriminatorProvider>> {
    Ok(match cfg {
        DiscriminatorConfig::Stub { model_id, rules, default } => Box::new(KeywordDiscriminator {
            kind,
            model_id: model_id.clone(),
            rules: rules.iter().map(|(k, p)| (k.to_lowercase(), *p)).collect(),
            default: *default,
        }),
        DiscriminatorConfig::Bridge { model } => Box::new(BridgeDiscriminator::new(need_bridge(bridge)?, kind, model)),
    })
}

fn need_bridge(bridge: &Option<Arc<BridgeClient>>) -> Result<Arc<BridgeClient>> {
    bridge.clone().ok_or_else(|| Error::Configuration("bridge provider requested without [bridge]".into()))
}

impl Resources {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let p = &cfg.paths;
        let bridge = match (&cfg.bridge, cfg.uses_bridge()) {
            (Some(b), true) => Some(connect_bridge(b)?),
            _ => None,
        };
        let completion: Option<Box<dyn TextCompletionProvider>> = match &cfg.providers.completion {
            Some(TableProviderConfig::Stub { path }) => Some(Box::new(ScriptedCompletion::load(path)?)),
            Some(TableProviderConfig::Bridge) => Some(Box::new(BridgeCompletion(need_bridge(&bridge)?))),
            None => None,
        };
        let infill: Option<Box<dyn MaskInfillProvider>> = match &cfg.providers.infill {
            Some(TableProviderConfig::Stub { path }) => Some(Box::new(TableInfill::load(path)?)),
            Some(TableProviderConfig::Bridge) => Some(Box::new(BridgeInfill(need_bridge(&bridge)?))),
            None => None,
        };
        let nli: Box<dyn NliProvider> = match cfg.providers.nli {
            NliConfig::Stub => Box::new(RuleNli::new()),
            NliConfig::Bridge => Box::new(BridgeNli(need_bridge(&bridge)?)),
        };
        let pv = &cfg.providers;
        Ok(Self {
            lexicon: RuleLexicon::load(p.verbs.as_deref(), p.synonyms.as_deref())?,
            preprocessor: Preprocessor::load(p.hedges.as_deref(), p.human_referents.as_deref())?,
            kb: EdgeStore::load(&p.kb)?,
            seeds: match &p.kind_seeds {
                Some(path) => KindSeeds::load(path)?,
                None => KindSeeds::default(),
            },
            prompt_config: p.subtype_prompts.as_deref().map(SubtypePromptConfig::load).transpose()?,
            connectives: match &p.connectives {
                Some(path) => ConnectiveConfig::load(path)?,
                None => ConnectiveConfig::default(),
            },
            completion,
            infill,
            nli,
            viability: discriminator(&pv.viability, DiscriminatorKind::Viability, &bridge)?,
            validity_exception: discriminator(&pv.validity_exception, DiscriminatorKind::ValidityException, &bridge)?,
            validity_instantiation: discriminator(
                &pv.validity_instantiation,
                DiscriminatorKind::ValidityInstantiation,
                &bridge,
            )?,
            bridge,
        })
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Items entering a stage and how many passed or were rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTally {
    pub input: usize,
    pub passed: usize,
    pub rejected: usize,
}

impl StageTally {
    fn add(&mut self, passed: usize, rejected: usize) {
        self.input += passed + rejected;
        self.passed += passed;
        self.rejected += rejected;
    }

    fn merge(&mut self, o: &StageTally) {
        self.input += o.input;
        self.passed += o.passed;
        self.rejected += o.rejected;
    }

    pub fn is_consistent(&self) -> bool {
        self.input == self.passed + self.rejected
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTallies {
    /// Generics read; passed = reached generation.
    pub generics: StageTally,
    /// (generic, template) pairs; passed = prompts and constraints built.
    pub templates: StageTally,
    /// Prompts built; passed = kept by perplexity selection.
    pub prompts: StageTally,
    /// Finished hypotheses; passed = distinct outputs meeting every clause.
    pub decoding: StageTally,
    /// Outputs ranked; passed = kept under the k_r and per-prompt caps.
    pub ranking: StageTally,
    pub nli_filter: StageTally,
    pub viability: StageTally,
    pub validity: StageTally,
}

impl StageTallies {
    fn merge(&mut self, o: &StageTallies) {
        for (a, b) in self.stages_mut().into_iter().zip(o.stages()) {
            a.merge(&b);
        }
    }

    fn stages(&self) -> [StageTally; 8] {
        [
            self.generics,
            self.templates,
            self.prompts,
            self.decoding,
            self.ranking,
            self.nli_filter,
            self.viability,
            self.validity,
        ]
    }

    fn stages_mut(&mut self) -> [&mut StageTally; 8] {
        [
            &mut self.generics,
            &mut self.templates,
            &mut self.prompts,
            &mut self.decoding,
            &mut self.ranking,
            &mut self.nli_filter,
            &mut self.viability,
            &mut self.validity,
        ]
    }

    pub fn is_consistent(&self) -> bool {
        self.stages().iter().all(StageTally::is_consistent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub generic_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_id: Option<TemplateId>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub constrained: bool,
    pub tallies: StageTallies,
    pub skipped: Vec<SkipRecord>,
    /// Counts per (generic, template) of exemplars produced.
    pub candidates: BTreeMap<String, BTreeMap<TemplateId, usize>>,
    /// Statistics over the selected exemplars.
    pub stats: DatasetStats,
    pub exemplars_sha256: String,
}

impl Manifest {
    /// Whether any generic or template was skipped, by preprocessing or by
    /// failure.
    pub fn is_partial(&self) -> bool {
        self.tallies.generics.rejected > 0 || !self.skipped.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub exemplars_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub manifest_sha256: String,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct PreparedTemplate {
    spec: TemplateSpec,
    prompts: Vec<Prompt>,
    constraints: ConstraintSet,
}

struct Prepared {
    generic: Generic,
    templates: Vec<PreparedTemplate>,
    tallies: StageTallies,
    skipped: Vec<SkipRecord>,
}

enum Preparation {
    Ready(Box<Prepared>),
    Skipped(SkipRecord),
}

fn concept_subtypes(
    g: &Generic,
    res: &Resources,
    cfg: &SubtypeConfig,
    skipped: &mut Vec<SkipRecord>,
) -> Vec<SubtypeRecord> {
    let term = g.concept_core();
    let mut lists = Vec::new();
    let mut note = |source: &str, e: Error| {
        log::info!("{}: {source} subtypes unavailable: {e}", g.id);
        skipped.push(SkipRecord { generic_id: g.id.clone(), template_id: None, reason: format!("{source}: {e}") });
    };
    for source in &cfg.sources {
        let got = match source {
            SubtypeSource::Kb => kb_subtypes(&term, &res.kb, cfg.kb_max_depth).map(|mut v| {
                v.truncate(cfg.per_source);
                v
            }),
            SubtypeSource::LmPrompt => {
                let (Some(provider), Some(prompts)) = (&res.completion, &res.prompt_config) else { continue };
                let category = assign_kind_category(&term, &res.seeds, &g.text);
                if category == KindCategory::Person {
                    continue;
                }
                lm_subtypes(&term, category, provider.as_ref(), cfg.n_sequences, prompts).map(|mut v| {
                    v.truncate(cfg.per_source);
                    v
                })
            }
            SubtypeSource::MlmInfill => {
                let Some(provider) = &res.infill else { continue };
                mlm_subtypes(&term, provider.as_ref(), cfg.per_source)
            }
        };
        match got {
            Ok(v) => lists.push(v),
            Err(e) => note(source_name(*source), e),
        }
    }
    merge_subtypes(lists, cfg.max_concept_subtypes)
}

fn source_name(s: SubtypeSource) -> &'static str {
    match s {
        SubtypeSource::Kb => "kb",
        SubtypeSource::LmPrompt => "lm_prompt",
        SubtypeSource::MlmInfill => "mlm_infill",
    }
}

fn prepare(rec: &GenericRecord, res: &Resources, cfg: &PipelineConfig) -> Preparation {
    let skip = |reason: String| {
        Preparation::Skipped(SkipRecord { generic_id: rec.id.clone(), template_id: None, reason })
    };
    let category = match rec.category() {
        Ok(c) => c,
        Err(e) => return skip(e.to_string()),
    };
    let (text, report) = match res.preprocessor.preprocess(&rec.text) {
        Ok(r) => r,
        Err(e) => return skip(e.to_string()),
    };
    if let Some(reason) = report.excluded {
        return skip(format!("excluded by preprocessing: {reason:?}"));
    }
    let spans = RuleSpanProvider::new(&res.lexicon);
    let mut generic = match parse_generic(&rec.id, &text, category, &spans) {
        Ok(g) => g,
        Err(e) => return skip(e.to_string()),
    };
    generic.source = rec.source.clone().unwrap_or_default();

    let mut skipped = Vec::new();
    let mut tallies = StageTallies::default();
    let specs = templates_for(category);
    let concept_subs = if specs.iter().any(TemplateSpec::needs_concept_subtypes) {
        concept_subtypes(&generic, res, &cfg.subtypes, &mut skipped)
    } else {
        Vec::new()
    };
    let property_subs = if specs.iter().any(TemplateSpec::needs_property_subtypes) {
        match kb_subtypes(&generic.property_core(), &res.kb, cfg.subtypes.kb_max_depth) {
            Ok(mut v) => {
                v.truncate(cfg.subtypes.max_property_subtypes);
                v
            }
            Err(e) => {
                skipped.push(SkipRecord { generic_id: rec.id.clone(), template_id: None, reason: format!("property subtypes: {e}") });
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };

    let mut templates = Vec::new();
    for spec in specs {
        let built = build_prompts(&generic, &spec, &concept_subs, &res.connectives, &res.lexicon)
            .and_then(|prompts| Ok((prompts, compile_constraints(&generic, &spec, &property_subs, &res.lexicon)?)));
        match built {
            Ok((prompts, constraints)) => {
                tallies.templates.add(1, 0);
                templates.push(PreparedTemplate { spec, prompts, constraints });
            }
            Err(e) => {
                tallies.templates.add(0, 1);
                log::info!("{} {}: {e}", rec.id, spec.id);
                skipped.push(SkipRecord { generic_id: rec.id.clone(), template_id: Some(spec.id), reason: e.to_string() });
            }
        }
    }
    Preparation::Ready(Box::new(Prepared { generic, templates, tallies, skipped }))
}

/// Words the scorer must be able to emit or read for a prepared generic.
fn required_words(p: &Prepared) -> BTreeSet<String> {
    let mut words: BTreeSet<String> = tokenize(&p.generic.text).into_iter().collect();
    for t in &p.templates {
        for prompt in &t.prompts {
            words.extend(tokenize(&prompt.text));
        }
        for clause in &t.constraints.clauses {
            for ngram in clause.ngram_words() {
                words.extend(ngram.iter().map(|w| w.to_lowercase()));
            }
        }
    }
    words
}

fn build_lm(cfg: &PipelineConfig, prepared: &[&Prepared], bridge: &Option<Arc<BridgeClient>>) -> Result<Box<dyn LmScorer>> {
    let extra: BTreeSet<String> = prepared.iter().flat_map(|p| required_words(p)).collect();
    Ok(match &cfg.providers.lm {
        LmConfig::Ngram { corpus } => Box::new(NgramScorer::load_corpus(corpus, extra)?),
        LmConfig::Toy { path } => Box::new(ToyScorer::load(path)?),
        LmConfig::Bridge { top_k, vocabulary } => {
            let mut words: BTreeSet<String> = crate::lexicon::read_lines(vocabulary)?.into_iter().collect();
            words.extend(extra);
            words.remove(crate::decode::DEFAULT_EOS);
            let vocab = Vocabulary::new(words, crate::decode::DEFAULT_EOS)?;
            Box::new(BridgeLm::new(need_bridge(bridge)?, vocab, *top_k))
        }
    })
}

/// One (generic, template) pair ready for decoding.
#[derive(Debug, Clone)]
pub struct DecodeUnit {
    pub generic: Generic,
    pub spec: TemplateSpec,
    pub prompts: Vec<Prompt>,
    pub constraints: ConstraintSet,
}

/// Runs every stage up to decoding and returns the scorer the run would
/// use together with its decode units, in generic order.
pub fn decode_units(cfg: &PipelineConfig) -> Result<(Box<dyn LmScorer>, Vec<DecodeUnit>)> {
    cfg.validate()?;
    let records = load_generics(&cfg.paths.generics)?;
    let res = Resources::load(cfg)?;
    let ready: Vec<Box<Prepared>> = records
        .iter()
        .filter_map(|r| match prepare(r, &res, cfg) {
            Preparation::Ready(p) => Some(p),
            Preparation::Skipped(_) => None,
        })
        .collect();
    let refs: Vec<&Prepared> = ready.iter().map(|b| b.as_ref()).collect();
    let lm = build_lm(cfg, &refs, &res.bridge)?;
    let units = ready
        .into_iter()
        .flat_map(|p| {
            let generic = p.generic;
            p.templates.into_iter().map(move |t| DecodeUnit {
                generic: generic.clone(),
                spec: t.spec,
                prompts: t.prompts,
                constraints: t.constraints,
            })
        })
        .collect();
    Ok((lm, units))
}

struct GenericOutcome {
    exemplars: Vec<Exemplar>,
    tallies: StageTallies,
    skipped: Vec<SkipRecord>,
}

fn exemplar_text(stem: &str, completion: &[String]) -> String {
    let mut tokens = tokenize(stem);
    tokens.extend(completion.iter().cloned());
    capitalize(&detokenize(&tokens))
}

fn decode_template(
    g: &Generic,
    t: &PreparedTemplate,
    lm: &dyn LmScorer,
    cfg: &PipelineConfig,
    tallies: &mut StageTallies,
) -> Result<Vec<Output>> {
    let selected = select_prompts(t.prompts.clone(), lm, &cfg.decoder)?;
    tallies.prompts.add(selected.len(), t.prompts.len() - selected.len());
    let vocab = lm.vocabulary();
    let mut seen = BTreeSet::new();
    let mut outs = Vec::new();
    for prompt in &selected {
        let symbols = vocab.encode_text(&prompt.text)?;
        let hyps = if cfg.run.constrained {
            constrained_decode(lm, &symbols, &t.constraints, &cfg.decoder)?
        } else {
            beam_decode(lm, &symbols, &cfg.decoder)?
        };
        for h in hyps {
            let words = h.words(vocab);
            let keep = (!cfg.run.constrained || h.all_satisfied())
                && words.iter().any(|w| w.chars().any(char::is_alphanumeric));
            if !keep {
                tallies.decoding.add(0, 1);
                continue;
            }
            let text = exemplar_text(&prompt.stem, &words);
            if seen.insert(crate::eval::normalize_for_uniqueness(&text)) {
                tallies.decoding.add(1, 0);
                outs.push(Output { text, prompt_id: prompt.id.clone() });
            } else {
                tallies.decoding.add(0, 1);
            }
        }
    }
    log::debug!("{} {}: {} outputs", g.id, t.spec.id, outs.len());
    Ok(outs)
}

fn process_generic(p: &Prepared, lm: &dyn LmScorer, res: &Resources, cfg: &PipelineConfig) -> GenericOutcome {
    let mut tallies = StageTallies::default();
    let mut skipped = Vec::new();
    let g = &p.generic;
    let mut candidates: Vec<Exemplar> = Vec::new();
    for t in &p.templates {
        let ranked = decode_template(g, t, lm, cfg, &mut tallies).and_then(|outs| {
            let n = outs.len();
            let ranked = rank_outputs(outs, lm, res.nli.as_ref(), &g.text, t.spec.id, t.spec.exemplar_kind, &cfg.decoder)?;
            tallies.ranking.add(ranked.len(), n - ranked.len());
            Ok(ranked)
        });
        let ranked = match ranked {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{} {}: {e}", g.id, t.spec.id);
                skipped.push(SkipRecord { generic_id: g.id.clone(), template_id: Some(t.spec.id), reason: e.to_string() });
                continue;
            }
        };
        candidates.extend(ranked.into_iter().enumerate().map(|(i, r)| Exemplar {
            id: format!("{}:{}:{:02}", g.id, t.spec.id, i),
            generic_id: g.id.clone(),
            generic_text: g.text.clone(),
            template_id: t.spec.id,
            kind: t.spec.exemplar_kind,
            prompt_id: r.prompt_id,
            text: r.text,
            perplexity: r.perplexity,
            ppl_rank: r.ppl_rank,
            nli_rank: r.nli_rank,
            combined_rank: r.combined,
            nli: r.nli,
            viability: None,
            validity: None,
            status: ExemplarStatus::Candidate,
            scorer_unavailable: false,
        }));
    }

    if let Some(mode) = cfg.filter.nli_filter {
        for ex in candidates.iter_mut() {
            if mode.keeps(&ex.nli, ex.kind) {
                tallies.nli_filter.add(1, 0);
            } else {
                tallies.nli_filter.add(0, 1);
                ex.status = ExemplarStatus::Rejected(RejectStage::Nli);
            }
        }
    }

    let outcome = filter_stages(candidates, res, cfg, &mut tallies);
    let exemplars = match outcome {
        Ok(exs) => exs,
        Err(e) => {
            log::warn!("{}: filtering failed: {e}", g.id);
            skipped.push(SkipRecord { generic_id: g.id.clone(), template_id: None, reason: e.to_string() });
            Vec::new()
        }
    };
    GenericOutcome { exemplars, tallies, skipped }
}

/// Viability on candidates, then validity on the viable, merged back in
/// the original order.
fn filter_stages(
    exs: Vec<Exemplar>,
    res: &Resources,
    cfg: &PipelineConfig,
    tallies: &mut StageTallies,
) -> Result<Vec<Exemplar>> {
    let (candidates, mut done): (Vec<_>, Vec<_>) =
        exs.into_iter().enumerate().partition(|(_, e)| e.status == ExemplarStatus::Candidate);
    let (idx, cands): (Vec<usize>, Vec<Exemplar>) = candidates.into_iter().unzip();
    let scored = viability_filter(cands, res.viability.as_ref(), cfg.filter.viability_threshold, cfg.filter.fail_open)?;
    let passed = scored.iter().filter(|e| e.status == ExemplarStatus::Viable).count();
    tallies.viability.add(passed, scored.len() - passed);

    let (viable, other): (Vec<_>, Vec<_>) =
        idx.into_iter().zip(scored).partition(|(_, e)| e.status == ExemplarStatus::Viable);
    done.extend(other);
    let (vidx, vexs): (Vec<usize>, Vec<Exemplar>) = viable.into_iter().unzip();
    let scorers = ValidityScorers {
        instantiation: res.validity_instantiation.as_ref(),
        exception: res.validity_exception.as_ref(),
    };
    let selected = validity_select(vexs, scorers, cfg.filter.top_n, cfg.filter.validity_threshold)?;
    let chosen = selected.iter().filter(|e| e.status == ExemplarStatus::SelectedValid).count();
    tallies.validity.add(chosen, selected.len() - chosen);
    done.extend(vidx.into_iter().zip(selected));
    done.sort_by_key(|(i, _)| *i);
    Ok(done.into_iter().map(|(_, e)| e).collect())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .thread_name(|i| format!("genex-worker-{i}"))
        .build()
        .map_err(|e| Error::Configuration(format!("cannot build worker pool: {e}")))
}

/// Everything [`run_generate`] computes, before anything is written.
#[derive(Debug, Clone)]
pub struct Generation {
    pub exemplars: Vec<Exemplar>,
    pub manifest: Manifest,
}

/// Runs the full generation pipeline in memory.
pub fn generate(cfg: &PipelineConfig) -> Result<Generation> {
    cfg.validate()?;
    let records = load_generics(&cfg.paths.generics)?;
    let res = Resources::load(cfg)?;
    let workers = pool(cfg.run.workers)?;

    let preparations: Vec<Preparation> = workers.install(|| records.par_iter().map(|r| prepare(r, &res, cfg)).collect());
    let mut tallies = StageTallies::default();
    let mut skipped = Vec::new();
    let mut ready = Vec::new();
    for p in preparations {
        match p {
            Preparation::Ready(p) => {
                tallies.generics.add(1, 0);
                ready.push(p);
            }
            Preparation::Skipped(s) => {
                tallies.generics.add(0, 1);
                log::info!("{}: {}", s.generic_id, s.reason);
                skipped.push(s);
            }
        }
    }
    let refs: Vec<&Prepared> = ready.iter().map(|b| b.as_ref()).collect();
    let lm = build_lm(cfg, &refs, &res.bridge)?;

    let outcomes: Vec<GenericOutcome> =
        workers.install(|| refs.par_iter().map(|p| process_generic(p, lm.as_ref(), &res, cfg)).collect());

    let mut exemplars = Vec::new();
    let mut candidates: BTreeMap<String, BTreeMap<TemplateId, usize>> = BTreeMap::new();
    for (p, o) in refs.iter().zip(outcomes) {
        tallies.merge(&p.tallies);
        skipped.extend(p.skipped.iter().cloned());
        tallies.merge(&o.tallies);
        skipped.extend(o.skipped);
        let per = candidates.entry(p.generic.id.clone()).or_default();
        for t in &p.templates {
            per.insert(t.spec.id, 0);
        }
        for ex in &o.exemplars {
            *per.entry(ex.template_id).or_default() += 1;
        }
        exemplars.extend(o.exemplars);
    }
    exemplars.sort_by(canonical_order);
    skipped.sort_by(|a, b| (&a.generic_id, a.template_id, &a.reason).cmp(&(&b.generic_id, b.template_id, &b.reason)));
    let selected: Vec<Exemplar> =
        exemplars.iter().filter(|e| e.status == ExemplarStatus::SelectedValid).cloned().collect();
    let rendered = render_exemplars(&exemplars)?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        constrained: cfg.run.constrained,
        tallies,
        skipped,
        candidates,
        stats: dataset_stats(&selected),
        exemplars_sha256: hex::encode(Sha256::digest(rendered.as_bytes())),
    };
    Ok(Generation { exemplars, manifest })
}

/// Runs generation and writes the exemplar file and manifest into the
/// configured output directory.
pub fn run_generate(cfg: &PipelineConfig) -> Result<RunSummary> {
    write_generation(cfg, generate(cfg)?)
}

fn write_generation(cfg: &PipelineConfig, generation: Generation) -> Result<RunSummary> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).io_context(dir)?;
    let exemplars_path = dir.join(EXEMPLARS_FILE);
    let rendered = render_exemplars(&generation.exemplars)?;
    std::fs::write(&exemplars_path, &rendered).io_context(&exemplars_path)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest_text =
        serde_json::to_string_pretty(&generation.manifest).json_context(|| "manifest".to_string())?;
    manifest_text.push('\n');
    std::fs::write(&manifest_path, &manifest_text).io_context(&manifest_path)?;
    Ok(RunSummary {
        exemplars_path,
        manifest_path,
        manifest: generation.manifest,
        manifest_sha256: hex::encode(Sha256::digest(manifest_text.as_bytes())),
    })
}

/// Output of [`run_ablation`]: the constrained run, the unconstrained run
/// and the comparison rows (constrained minus unconstrained).
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub constrained: RunSummary,
    pub unconstrained: RunSummary,
    pub rows: Vec<crate::eval::AblationRow>,
}

/// Runs the pipeline with and without lexical constraints, writing each run
/// under `constrained/` and `unconstrained/` of the output directory.
pub fn run_ablation(cfg: &PipelineConfig, labels: Option<&GoldLabels>) -> Result<AblationRun> {
    let mut a = cfg.clone();
    a.run.constrained = true;
    a.output_dir = cfg.output_dir.join("constrained");
    let mut b = cfg.clone();
    b.run.constrained = false;
    b.output_dir = cfg.output_dir.join("unconstrained");
    let ga = generate(&a)?;
    let gb = generate(&b)?;
    let rows = ablation_report(&ga.exemplars, &gb.exemplars, labels)?;
    Ok(AblationRun { constrained: write_generation(&a, ga)?, unconstrained: write_generation(&b, gb)?, rows })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Exemplars counted per template; defaults to the smallest template.
    pub n_per_template: Option<usize>,
    /// Restrict to selected exemplars.
    pub selected_only: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: vec![1, 5], n_per_template: None, selected_only: true }
    }
}

/// Builds an evaluation report from exemplar files. Without labels only
/// statistics (and unique counts when comparing) are reported.
pub fn run_eval(
    exemplars: &Path,
    labels: Option<&Path>,
    comparison: Option<&Path>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let exs = read_exemplars(exemplars)?;
    let pool: Vec<Exemplar> = if opts.selected_only {
        exs.iter().filter(|e| e.status == ExemplarStatus::SelectedValid).cloned().collect()
    } else {
        exs.clone()
    };
    let mut report = EvalReport { stats: dataset_stats(&pool), ..EvalReport::default() };
    let labels = labels.map(GoldLabels::load).transpose()?;
    if let Some(labels) = &labels {
        let ranked = rank_per_generic(&pool, false);
        for &k in &opts.ks {
            report.precision_at_k.insert(k, precision_at_k(&ranked, labels, k)?);
        }
        let n = opts.n_per_template.unwrap_or_else(|| report.stats.by_template.values().copied().min().unwrap_or(0));
        if n > 0 {
            report.per_template = per_template_validity(&pool, labels, n)?;
        }
    }
    if let Some(other) = comparison {
        let b = read_exemplars(other)?;
        report.ablation_rows = ablation_report(&exs, &b, labels.as_ref())?;
    }
    Ok(report)
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).io_context(dir)?;
    let json_path = dir.join("report.json");
    let mut json = serde_json::to_string_pretty(report).json_context(|| "report".to_string())?;
    json.push('\n');
    std::fs::write(&json_path, json).io_context(&json_path)?;
    let text_path = dir.join("report.txt");
    std::fs::write(&text_path, report.render_text()).io_context(&text_path)?;
    Ok((json_path, text_path))
}
