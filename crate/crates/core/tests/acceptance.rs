//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use genex::corpus::{load_generics, Preprocessor};
use genex::decode::{
    beam_decode, constrained_decode, constrained_decode_with, satisfies, DecoderConfig, Hypothesis, LmScorer,
    ToyScorer, ToyScorerSpec,
};
use genex::eval::{ablation_report, dataset_stats, precision_at_k, rank_per_generic, unique_count, GoldLabels};
use genex::filter::{read_exemplars, ExemplarStatus};
use genex::lexicon::{detokenize, tokenize};
use genex::pipeline::{decode_units, run_generate, Manifest, PipelineConfig};
use genex::rank::{nli_filter, rank_scored, select_prompts, NliFilterMode, NliJudgment, ScoredOutput};
use genex::template::{catalog, templates_for, ClauseMode, ConstraintClause, ConstraintSet, ExemplarKind, TemplateId};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn fixture_config(output_dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&data_dir().join("example.toml")).expect("example config loads");
    cfg.output_dir = output_dir.to_path_buf();
    cfg
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Clause check by padded substring search over the space-joined text.
fn naive_satisfies(cs: &ConstraintSet, words: &[String]) -> Vec<bool> {
    let text = format!(" {} ", words.iter().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" "));
    cs.clauses
        .iter()
        .map(|c| {
            let hit = c.ngrams.iter().any(|g| text.contains(&format!(" {} ", g.to_lowercase())));
            match c.mode {
                ClauseMode::Inclusion => hit,
                ClauseMode::Exclusion => !hit,
            }
        })
        .collect()
}

/// A random conditional table over `words` plus EOS for every prefix of
/// fewer than `max_len` completion tokens after `prompt`.
struct RandomLm {
    words: Vec<String>,
    prompt: String,
    max_len: usize,
    /// Prefix key to probabilities over `words` followed by EOS.
    probs: BTreeMap<String, Vec<f64>>,
}

const EOS: &str = "</s>";

impl RandomLm {
    fn new(rng: &mut ChaCha8Rng, n_words: usize, max_len: usize) -> Self {
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
        let prompt = words[0].clone();
        let mut probs = BTreeMap::new();
        let mut frontier = vec![prompt.clone()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for key in frontier {
                let raw: Vec<f64> = (0..=n_words).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
                let total: f64 = raw.iter().sum();
                probs.insert(key.clone(), raw.iter().map(|p| p / total).collect());
                next.extend(words.iter().map(|w| format!("{key} {w}")));
            }
            frontier = next;
        }
        Self { words, prompt, max_len, probs }
    }

    fn spec(&self) -> ToyScorerSpec {
        let mut symbols = self.words.clone();
        symbols.push(EOS.into());
        let table = self
            .probs
            .iter()
            .map(|(k, ps)| (k.clone(), symbols.iter().cloned().zip(ps.iter().copied()).collect()))
            .collect();
        ToyScorerSpec { vocabulary: self.words.clone(), eos: EOS.into(), backoff: Default::default(), table }
    }

    /// Every finished completion: ends in EOS within `max_len` tokens, or
    /// reaches `max_len` without it. Returns (words, log probability).
    fn enumerate(&self) -> Vec<(Vec<String>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<String>::new(), 0.0f64)];
        while let Some((seq, lp)) = stack.pop() {
            if seq.len() == self.max_len {
                out.push((seq, lp));
                continue;
            }
            let key = std::iter::once(self.prompt.clone()).chain(seq.iter().cloned()).collect::<Vec<_>>().join(" ");
            let ps = &self.probs[&key];
            out.push((seq.clone(), lp + ps[self.words.len()].ln()));
            for (i, w) in self.words.iter().enumerate() {
                let mut s = seq.clone();
                s.push(w.clone());
                stack.push((s, lp + ps[i].ln()));
            }
        }
        out
    }
}

fn random_constraints(rng: &mut ChaCha8Rng, words: &[String], max_clauses: usize) -> ConstraintSet {
    let n = rng.gen_range(1..=max_clauses);
    let clauses = (0..n)
        .map(|_| {
            let ngrams: BTreeSet<String> = (0..rng.gen_range(1..=2))
                .map(|_| {
                    let len = rng.gen_range(1..=2);
                    (0..len).map(|_| words[rng.gen_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ")
                })
                .collect();
            let mode = if rng.gen_bool(0.7) { ClauseMode::Inclusion } else { ClauseMode::Exclusion };
            ConstraintClause::new(mode, ngrams).expect("valid clause")
        })
        .collect();
    ConstraintSet::new(clauses)
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn decoder_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_231);
    // (words excluding EOS, max_len): vocabulary of at most 8 symbols and
    // at most 6 tokens.
    let shapes = [(2, 6), (2, 5), (3, 5), (3, 4), (4, 4), (5, 3), (6, 3), (7, 3), (7, 2), (4, 3)];
    let (mut agree, mut with_solution) = (0, 0);
    for case in 0..50 {
        let (n_words, max_len) = shapes[case % shapes.len()];
        let lm = RandomLm::new(&mut rng, n_words, max_len);
        let scorer = ToyScorer::from_spec(&lm.spec()).map_err(|e| e.to_string())?;
        let cs = random_constraints(&mut rng, &lm.words, 3);
        let all = lm.enumerate();
        let best = all
            .iter()
            .filter(|(w, _)| naive_satisfies(&cs, w).iter().all(|&b| b))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let cfg = DecoderConfig { beam_size: all.len(), max_len, ..DecoderConfig::default() };
        let prompt = scorer.vocabulary().encode(&[lm.prompt.as_str()]).map_err(|e| e.to_string())?;
        let hyps = constrained_decode(&scorer, &prompt, &cs, &cfg).map_err(|e| e.to_string())?;
        let top = hyps.first().filter(|h| h.all_satisfied());
        let ok = match (best, top) {
            (Some((words, lp)), Some(h)) => {
                with_solution += 1;
                h.words(scorer.vocabulary()) == *words && (h.log_prob - lp).abs() < 1e-9
            }
            (None, None) => true,
            _ => false,
        };
        ensure!(ok, "case {case}: decoder top {:?} vs oracle {:?}", top.map(|h| h.words(scorer.vocabulary())), best);
        agree += 1;
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{agree}/50 agree ({with_solution} with a satisfying sequence) in {:.2}s", elapsed.as_secs_f64()))
}

fn constraint_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let words: Vec<String> = ["fly", "birds", "can", "seismic", "waves", "not"].map(String::from).to_vec();
    for case in 0..1000 {
        let cs = random_constraints(&mut rng, &words, 4);
        let len = rng.gen_range(0..=8);
        let text: Vec<String> = (0..len)
            .map(|_| {
                let w = &words[rng.gen_range(0..words.len())];
                if rng.gen_bool(0.2) { w.to_uppercase() } else { w.clone() }
            })
            .collect();
        let got = satisfies(&cs, &text);
        let want = naive_satisfies(&cs, &text);
        ensure!(got == want, "case {case}: {cs:?} on {text:?}: {got:?} vs {want:?}");
    }
    for (mode, gram, text, want) in [
        (ClauseMode::Inclusion, "fly", "penguins cannot fly", true),
        (ClauseMode::Exclusion, "fly", "penguins swim", true),
        (ClauseMode::Inclusion, "seismic waves", "waves seismic", false),
    ] {
        let cs = ConstraintSet::new(vec![ConstraintClause::new(mode, [gram.to_string()]).unwrap()]);
        ensure!(satisfies(&cs, &tokenize(text)) == vec![want], "documented example {gram:?} / {text:?}");
    }
    Ok("1000/1000 agree with the substring oracle".into())
}

fn tolerance_invariant() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = fixture_config(dir.path());
    let (lm, units) = decode_units(&cfg).map_err(|e| e.to_string())?;
    let extra = ["they", "and", "do", "not", "in", "at"];
    let (mut steps, mut pruned, mut runs) = (0usize, 0usize, 0usize);
    for unit in units.iter().take(20) {
        let mut clauses = unit.constraints.clauses.clone();
        clauses.extend(extra.iter().map(|w| ConstraintClause::inclusion([w.to_string()]).unwrap()));
        let cs = ConstraintSet::new(clauses);
        let prompt = lm.vocabulary().encode_text(&unit.prompts[0].text).map_err(|e| e.to_string())?;
        let mut violation = None;
        let mut observe = |r: &genex::decode::StepReport| {
            steps += 1;
            pruned += r.pruned;
            let beam_max = r.live.iter().map(|h| h.satisfied_count).max().unwrap_or(0);
            for h in r.live {
                if h.satisfied_count + r.tolerance < beam_max.max(r.candidate_max) && violation.is_none() {
                    violation = Some((r.step, h.satisfied_count, beam_max));
                }
            }
        };
        constrained_decode_with(lm.as_ref(), &prompt, &cs, &cfg.decoder, &mut observe).map_err(|e| e.to_string())?;
        ensure!(violation.is_none(), "{} {}: violation {violation:?}", unit.generic.id, unit.spec.id);
        runs += 1;
    }
    ensure!(runs == 20, "only {runs} fixture units available");
    Ok(format!("0 violations over {runs} runs, {steps} steps ({pruned} candidates pruned by the rule)"))
}

fn ablation_property() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = fixture_config(dir.path());
    let (lm, units) = decode_units(&cfg).map_err(|e| e.to_string())?;
    let vocab = lm.vocabulary();
    let (mut constrained_texts, mut beam_texts) = (Vec::new(), Vec::new());
    let mut compared = 0;
    for unit in &units {
        let prompts = select_prompts(unit.prompts.clone(), lm.as_ref(), &cfg.decoder).map_err(|e| e.to_string())?;
        for p in &prompts {
            let symbols = vocab.encode_text(&p.text).map_err(|e| e.to_string())?;
            let text = |h: &Hypothesis| detokenize(&[tokenize(&p.stem), h.words(vocab)].concat());
            let beam = beam_decode(lm.as_ref(), &symbols, &cfg.decoder).map_err(|e| e.to_string())?;
            let cons = constrained_decode(lm.as_ref(), &symbols, &unit.constraints, &cfg.decoder).map_err(|e| e.to_string())?;
            beam_texts.extend(beam.iter().map(text));
            constrained_texts.extend(cons.iter().filter(|h| h.all_satisfied()).map(text));

            let empty = constrained_decode(lm.as_ref(), &symbols, &ConstraintSet::empty(), &cfg.decoder)
                .map_err(|e| e.to_string())?;
            let a = serde_json::to_string(&empty).unwrap();
            let b = serde_json::to_string(&beam).unwrap();
            ensure!(a == b, "{}: empty constraints differ from beam search", p.id);
            compared += 1;
        }
    }
    let uc = unique_count(constrained_texts.iter().map(String::as_str));
    let ub = unique_count(beam_texts.iter().map(String::as_str));
    ensure!(uc >= ub, "constrained uniques {uc} < unconstrained uniques {ub}");
    Ok(format!(
        "unique outputs constrained {uc} >= unconstrained {ub} (ratio {:.2}); {compared} empty-constraint runs byte-identical",
        uc as f64 / ub as f64
    ))
}

fn judgment(contradict: f64) -> NliJudgment {
    let entail = (1.0 - contradict) / 2.0;
    NliJudgment::new(entail, 1.0 - contradict - entail, contradict).unwrap()
}

fn ranking_fixture() -> Vec<ScoredOutput> {
    (0..30)
        .map(|i| ScoredOutput {
            text: format!("output {i:02}"),
            prompt_id: format!("p{}", i % 6),
            perplexity: 5.0 + ((i * 7) % 13) as f64 * 0.5,
            nli: judgment(0.1 + ((i * 11) % 9) as f64 * 0.1),
        })
        .collect()
}

fn ranking_arithmetic() -> Outcome {
    // (ppl_rank, nli_rank) of output 00..29, by hand.
    let ranks: [(usize, usize); 30] = [
        (1, 9), (8, 7), (2, 5), (9, 3), (3, 1), (10, 8), (4, 6), (11, 4), (5, 2), (12, 9),
        (6, 7), (13, 5), (7, 3), (1, 1), (8, 8), (2, 6), (9, 4), (3, 2), (10, 9), (4, 7),
        (11, 5), (5, 3), (12, 1), (6, 8), (13, 6), (7, 4), (1, 2), (8, 9), (2, 7), (9, 5),
    ];
    let uncapped = DecoderConfig { k_r: 30, per_prompt_cap: 30, ..DecoderConfig::default() };
    let all = rank_scored(ranking_fixture(), TemplateId::T3, ExemplarKind::Exception, &uncapped);
    ensure!(all.len() == 30, "uncapped ranking kept {}", all.len());
    for r in &all {
        let i: usize = r.text[7..].parse().unwrap();
        let (p, n) = ranks[i];
        ensure!(
            (r.ppl_rank, r.nli_rank, r.combined) == (p, n, (p + n) as f64 / 2.0),
            "{}: got ({}, {}, {})",
            r.text,
            r.ppl_rank,
            r.nli_rank,
            r.combined
        );
    }
    // Kept under k_r = 10 and two per prompt; output 08 is the third p2 entry.
    let expected = [
        ("output 13", 1.0), ("output 26", 1.5), ("output 04", 2.0), ("output 17", 2.5), ("output 02", 3.5),
        ("output 15", 4.0), ("output 21", 4.0), ("output 28", 4.5), ("output 00", 5.0), ("output 06", 5.0),
    ];
    let kept = rank_scored(ranking_fixture(), TemplateId::T3, ExemplarKind::Exception, &DecoderConfig::default());
    let got: Vec<(&str, f64)> = kept.iter().map(|r| (r.text.as_str(), r.combined)).collect();
    ensure!(got == expected, "kept {got:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let k_r = rng.gen_range(1..=12);
        let cfg = DecoderConfig { k_r, per_prompt_cap: rng.gen_range(1..=k_r), ..DecoderConfig::default() };
        let n = rng.gen_range(0..60);
        let outs: Vec<ScoredOutput> = (0..n)
            .map(|i| ScoredOutput {
                text: format!("o{i}"),
                prompt_id: format!("p{}", rng.gen_range(0..8)),
                perplexity: rng.gen_range(1..20) as f64,
                nli: judgment(rng.gen_range(0..10) as f64 / 10.0),
            })
            .collect();
        let kept = rank_scored(outs, TemplateId::T5, ExemplarKind::Instantiation, &cfg);
        ensure!(kept.len() <= cfg.k_r, "case {case}: {} kept over k_r {}", kept.len(), cfg.k_r);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &kept {
            *per.entry(&r.prompt_id).or_default() += 1;
        }
        ensure!(per.values().all(|&c| c <= cfg.per_prompt_cap), "case {case}: per-prompt cap broken {per:?}");
        ensure!(kept.windows(2).all(|w| w[0].combined <= w[1].combined), "case {case}: not ordered");
    }
    Ok("30-output fixture exact; caps held on 200/200 random inputs".into())
}

fn nli_filter_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0..5) as f64).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1.0);
        let j = if raw.iter().sum::<f64>() == 0.0 {
            NliJudgment::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap()
        } else {
            NliJudgment::new(raw[0] / total, raw[1] / total, raw[2] / total).unwrap()
        };
        for kind in [ExemplarKind::Exception, ExemplarKind::Instantiation] {
            let items = vec![((), j)];
            let union = nli_filter(items.clone(), kind, NliFilterMode::NliSimPlusNeu).len();
            let sim = nli_filter(items.clone(), kind, NliFilterMode::NliSim).len();
            let neu = nli_filter(items, kind, NliFilterMode::NliNeu).len();
            ensure!(union == (sim | neu), "case {case} {kind:?}: {j:?}");
        }
    }

    let run = read_exemplars(&data_dir().join("eval/nli_run.jsonl")).map_err(|e| e.to_string())?;
    let labels = GoldLabels::load(&data_dir().join("eval/nli_labels.jsonl")).map_err(|e| e.to_string())?;
    let rows = ablation_report(&run, &run, Some(&labels)).map_err(|e| e.to_string())?;
    // Exceptions: 4 contradiction (3 valid), 3 neutral (1 valid), 3 entailment
    // (0 valid). Instantiations: 3 entailment (2 valid), 2 neutral (1 valid),
    // 1 contradiction (0 valid).
    let expected = [
        ("nli_sim precision gain (exception)", 3.0 / 4.0 - 4.0 / 10.0),
        ("nli_neu precision gain (exception)", 1.0 / 3.0 - 4.0 / 10.0),
        ("nli_sim_plus_neu precision gain (exception)", 4.0 / 7.0 - 4.0 / 10.0),
        ("nli_sim precision gain (instantiation)", 2.0 / 3.0 - 3.0 / 6.0),
        ("nli_neu precision gain (instantiation)", 0.0), // 1/2 before and after
        ("nli_sim_plus_neu precision gain (instantiation)", 3.0 / 5.0 - 3.0 / 6.0),
    ];
    for (metric, want) in expected {
        let row = rows.iter().find(|r| r.metric == metric).ok_or_else(|| format!("missing row {metric}"))?;
        let got = row.run_a.ok_or_else(|| format!("{metric}: no value"))?;
        ensure!((got - want).abs() <= 1e-12, "{metric}: {got} vs {want}");
        ensure!(row.delta == Some(0.0), "{metric}: self-comparison delta {:?}", row.delta);
    }
    Ok("union exact on 500/500 judgments; 6 precision deltas within 1e-12".into())
}

fn end_to_end_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_a = fixture_config(a.path());
    let mut cfg_b = fixture_config(b.path());
    cfg_b.run.workers = 1;
    let ra = run_generate(&cfg_a).map_err(|e| e.to_string())?;
    let rb = run_generate(&cfg_b).map_err(|e| e.to_string())?;
    let ea = std::fs::read(&ra.exemplars_path).map_err(|e| e.to_string())?;
    let eb = std::fs::read(&rb.exemplars_path).map_err(|e| e.to_string())?;
    ensure!(ea == eb, "exemplar files differ");
    ensure!(ra.manifest_sha256 == rb.manifest_sha256, "manifest hashes differ");

    let m = &ra.manifest;
    ensure!(m.tallies.is_consistent(), "stage tallies do not add up: {:?}", m.tallies);
    let records = load_generics(&cfg_a.paths.generics).map_err(|e| e.to_string())?;
    ensure!(records.len() == 10, "fixture has {} generics", records.len());
    let mut pairs = 0;
    for r in &records {
        let Some(per) = m.candidates.get(&r.id) else { continue };
        let category = r.category().map_err(|e| e.to_string())?;
        for spec in templates_for(category) {
            let n = per.get(&spec.id).copied().unwrap_or(0);
            ensure!(n >= 1, "{} {} has no candidates", r.id, spec.id);
            pairs += 1;
        }
    }
    let skipped: Vec<&str> = m.skipped.iter().map(|s| s.generic_id.as_str()).collect();
    ensure!(m.candidates.len() + skipped.len() == 10, "generics unaccounted for");
    Ok(format!(
        "identical outputs (manifest sha256 {}...); {pairs} template runs all with candidates; skipped {skipped:?}",
        &ra.manifest_sha256[..12]
    ))
}

fn eval_exactness() -> Outcome {
    let exs = read_exemplars(&data_dir().join("eval/exemplars.jsonl")).map_err(|e| e.to_string())?;
    let labels = GoldLabels::load(&data_dir().join("eval/labels.jsonl")).map_err(|e| e.to_string())?;
    let ranked = rank_per_generic(&exs, true);
    // Top-5 labels in validity order: a [1,0,1,1,0], b [0,1,1,0,1], c [1,1,0,0,0].
    let p1 = precision_at_k(&ranked, &labels, 1).map_err(|e| e.to_string())?;
    let p5 = precision_at_k(&ranked, &labels, 5).map_err(|e| e.to_string())?;
    ensure!(p1 == 2.0 / 3.0, "p@1 = {p1}");
    ensure!(p5 == 8.0 / 15.0, "p@5 = {p5}");

    let text = std::fs::read_to_string(data_dir().join("eval/manifest.json")).map_err(|e| e.to_string())?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let selected: Vec<_> = exs.iter().filter(|e| e.status == ExemplarStatus::SelectedValid).cloned().collect();
    let stats = dataset_stats(&selected);
    ensure!(stats == manifest.stats, "stats {stats:?} vs manifest {:?}", manifest.stats);
    Ok(format!("p@1 = {p1:.4}, p@5 = {p5:.4}; stats match the manifest ({} exemplars)", stats.n_total))
}

fn template_catalog() -> Outcome {
    for spec in catalog() {
        ensure!(spec.is_admissible(), "{} fails the subtype restriction", spec.id);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = fixture_config(dir.path());
    let (_, units) = decode_units(&cfg).map_err(|e| e.to_string())?;
    let records = load_generics(&cfg.paths.generics).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for r in &records {
        let compiled: BTreeSet<TemplateId> = units
            .iter()
            .filter(|u| u.generic.id == r.id && u.spec.exemplar_kind == ExemplarKind::Exception)
            .map(|u| {
                ensure!(!u.constraints.is_empty(), "{} {}: empty constraint set", r.id, u.spec.id);
                Ok(u.spec.id)
            })
            .collect::<Result<_, String>>()?;
        if !units.iter().any(|u| u.generic.id == r.id) {
            continue;
        }
        let wanted: BTreeSet<TemplateId> = templates_for(r.category().map_err(|e| e.to_string())?)
            .into_iter()
            .filter(|s| s.exemplar_kind == ExemplarKind::Exception)
            .map(|s| s.id)
            .collect();
        ensure!(compiled == wanted, "{}: compiled {compiled:?}, expected {wanted:?}", r.id);
        checked += compiled.len();
    }
    Ok(format!("7/7 templates admissible; {checked} exception constraint sets non-empty"))
}

fn preprocessing() -> Outcome {
    let p = Preprocessor::load(None, Some(&data_dir().join("human_referents.txt"))).map_err(|e| e.to_string())?;
    let (text, report) = p.preprocess("Birds usually fly.").map_err(|e| e.to_string())?;
    ensure!(text == "Birds fly" && report.removed_adverbs == ["usually"], "adverb removal: {text:?}");
    let (text, _) = p.preprocess("Vaccines may have to be refrigerated").map_err(|e| e.to_string())?;
    ensure!(text == "Vaccines must be refrigerated", "hedge rewrite: {text:?}");
    let (_, report) = p.preprocess("In order to bake, you need flour").map_err(|e| e.to_string())?;
    ensure!(report.excluded.is_some(), "in-order-to sentence not excluded");

    let raw = std::fs::read_to_string(data_dir().join("raw_generics.txt")).map_err(|e| e.to_string())?;
    let mut inputs: Vec<String> = raw.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(String::from).collect();
    let records = load_generics(&data_dir().join("generics.jsonl")).map_err(|e| e.to_string())?;
    inputs.extend(records.into_iter().map(|r| r.text));
    for s in &inputs {
        let (once, r1) = p.preprocess(s).map_err(|e| e.to_string())?;
        let (twice, r2) = p.preprocess(&once).map_err(|e| e.to_string())?;
        ensure!(once == twice, "not idempotent: {s:?} -> {once:?} -> {twice:?}");
        ensure!(r1.excluded == r2.excluded, "exclusion changed on re-run for {s:?}");
    }
    Ok(format!("3 transformations hold; idempotent on {} fixture sentences", inputs.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("decoder-oracle equivalence", decoder_oracle_equivalence),
        ("constraint semantics", constraint_semantics),
        ("tolerance invariant", tolerance_invariant),
        ("ablation property", ablation_property),
        ("ranking arithmetic", ranking_arithmetic),
        ("nli filter", nli_filter_criterion),
        ("end-to-end determinism", end_to_end_determinism),
        ("eval exactness", eval_exactness),
        ("template catalog", template_catalog),
        ("preprocessing", preprocessing),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
