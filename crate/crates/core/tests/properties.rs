use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use proptest::prelude::*;

use genex::corpus::Preprocessor;
use genex::decode::{
    beam_decode, constrained_decode, perplexity, satisfies, sequence_log_prob, DecoderConfig, LmScorer, ToyScorer,
    ToyScorerSpec,
};
use genex::eval::{ablation_report, precision_at_k, rank_per_generic, unique_count, GoldLabels};
use genex::filter::{read_exemplars, Exemplar};
use genex::rank::{dense_ranks, NliFilterMode, NliJudgment};
use genex::template::{ClauseMode, ConstraintClause, ConstraintSet, ExemplarKind};

const WORDS: [&str; 5] = ["a", "b", "c", "d", "e"];

fn data(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(path)
}

/// Table over all prefixes of up to `depth` words after the prompt "a".
fn scorer_from(weights: &[f64], depth: usize) -> (ToyScorer, ToyScorerSpec) {
    let mut symbols: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    symbols.push("</s>".into());
    let mut table = BTreeMap::new();
    let mut frontier = vec!["a".to_string()];
    let mut w = weights.iter().cycle();
    for _ in 0..depth {
        let mut next = Vec::new();
        for key in frontier {
            let row: BTreeMap<String, f64> = symbols.iter().map(|s| (s.clone(), *w.next().unwrap())).collect();
            table.insert(key.clone(), row);
            next.extend(WORDS.iter().map(|x| format!("{key} {x}")));
        }
        frontier = next;
    }
    let spec = ToyScorerSpec {
        vocabulary: WORDS.iter().map(|w| w.to_string()).collect(),
        eos: "</s>".into(),
        backoff: Default::default(),
        table,
    };
    (ToyScorer::from_spec(&spec).unwrap(), spec)
}

fn clause() -> impl Strategy<Value = ConstraintClause> {
    let gram = prop::collection::vec(prop::sample::select(&WORDS[..]), 1..=2).prop_map(|ws| ws.join(" "));
    (any::<bool>(), prop::collection::btree_set(gram, 1..=2)).prop_map(|(inc, grams)| {
        let mode = if inc { ClauseMode::Inclusion } else { ClauseMode::Exclusion };
        ConstraintClause::new(mode, grams).unwrap()
    })
}

fn constraints() -> impl Strategy<Value = ConstraintSet> {
    prop::collection::vec(clause(), 0..=5).prop_map(ConstraintSet::new)
}

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 7..40)
}

fn judgment() -> impl Strategy<Value = NliJudgment> {
    (0u32..10, 0u32..10, 0u32..10).prop_map(|(e, n, c)| {
        let total = (e + n + c).max(1) as f64;
        if e + n + c == 0 {
            NliJudgment::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap()
        } else {
            NliJudgment::new(e as f64 / total, n as f64 / total, c as f64 / total).unwrap()
        }
    })
}

fn eval_fixture() -> (Vec<Exemplar>, GoldLabels) {
    (
        read_exemplars(&data("eval/exemplars.jsonl")).unwrap(),
        GoldLabels::load(&data("eval/labels.jsonl")).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn satisfied_count_matches_recomputation(w in weights(), cs in constraints(), beam in 1usize..8) {
        let (lm, _) = scorer_from(&w, 4);
        let prompt = lm.vocabulary().encode(&["a"]).unwrap();
        let cfg = DecoderConfig { beam_size: beam, max_len: 4, ..DecoderConfig::default() };
        for h in constrained_decode(&lm, &prompt, &cs, &cfg).unwrap() {
            let words = h.words(lm.vocabulary());
            let flags = satisfies(&cs, &words);
            prop_assert_eq!(h.satisfied_count, flags.iter().filter(|&&b| b).count());
            prop_assert_eq!(h.all_satisfied(), flags.iter().all(|&b| b));
        }
    }

    #[test]
    fn hypothesis_scores_are_sequence_log_probs(w in weights(), cs in constraints()) {
        let (lm, _) = scorer_from(&w, 3);
        let prompt = lm.vocabulary().encode(&["a"]).unwrap();
        let cfg = DecoderConfig { beam_size: 6, max_len: 3, ..DecoderConfig::default() };
        for h in constrained_decode(&lm, &prompt, &cs, &cfg).unwrap() {
            let direct = sequence_log_prob(&lm, &prompt, &h.tokens).unwrap();
            prop_assert!((h.log_prob - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn decoding_is_deterministic(w in weights(), cs in constraints(), beam in 1usize..6) {
        let (lm, _) = scorer_from(&w, 4);
        let prompt = lm.vocabulary().encode(&["a"]).unwrap();
        let cfg = DecoderConfig { beam_size: beam, max_len: 4, ..DecoderConfig::default() };
        let a = serde_json::to_string(&constrained_decode(&lm, &prompt, &cs, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&constrained_decode(&lm, &prompt, &cs, &cfg).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn empty_constraints_reduce_to_beam_search(w in weights(), beam in 1usize..6, len in 1usize..5) {
        let (lm, _) = scorer_from(&w, 4);
        let prompt = lm.vocabulary().encode(&["a"]).unwrap();
        let cfg = DecoderConfig { beam_size: beam, max_len: len, ..DecoderConfig::default() };
        let a = serde_json::to_string(&constrained_decode(&lm, &prompt, &ConstraintSet::empty(), &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&beam_decode(&lm, &prompt, &cfg).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn finished_hypotheses_respect_max_len(w in weights(), cs in constraints(), len in 1usize..5) {
        let (lm, _) = scorer_from(&w, 4);
        let prompt = lm.vocabulary().encode(&["a"]).unwrap();
        let cfg = DecoderConfig { beam_size: 4, max_len: len, ..DecoderConfig::default() };
        let eos = lm.vocabulary().eos();
        for h in constrained_decode(&lm, &prompt, &cs, &cfg).unwrap() {
            prop_assert!(h.tokens.len() <= len);
            prop_assert!(h.tokens.len() == len || h.tokens.last() == Some(&eos));
        }
    }

    #[test]
    fn uniform_perplexity_is_vocabulary_size(tokens in prop::collection::vec(0usize..5, 1..10)) {
        let spec = ToyScorerSpec {
            vocabulary: WORDS.iter().map(|w| w.to_string()).collect(),
            eos: "</s>".into(),
            backoff: Default::default(),
            table: BTreeMap::new(),
        };
        let lm = ToyScorer::from_spec(&spec).unwrap();
        let words: Vec<&str> = tokens.iter().map(|&i| WORDS[i]).collect();
        let ids = lm.vocabulary().encode(&words).unwrap();
        let ppl = perplexity(&lm, &ids).unwrap();
        prop_assert!((ppl - 6.0).abs() < 1e-9);
    }

    #[test]
    fn dense_ranks_are_dense_and_monotone(values in prop::collection::vec(0u8..10, 0..30)) {
        let xs: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let ranks = dense_ranks(&xs, |a, b| a.total_cmp(&b));
        let distinct = values.iter().collect::<std::collections::BTreeSet<_>>().len();
        prop_assert_eq!(ranks.iter().copied().max().unwrap_or(0), distinct);
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                prop_assert_eq!(xs[i].total_cmp(&xs[j]), ranks[i].cmp(&ranks[j]));
            }
        }
    }

    #[test]
    fn sim_plus_neu_is_the_union(j in judgment(), exception in any::<bool>()) {
        let kind = if exception { ExemplarKind::Exception } else { ExemplarKind::Instantiation };
        let union = NliFilterMode::NliSimPlusNeu.keeps(&j, kind);
        prop_assert_eq!(union, NliFilterMode::NliSim.keeps(&j, kind) || NliFilterMode::NliNeu.keeps(&j, kind));
    }

    #[test]
    fn precision_ignores_input_order(seed in any::<u64>(), k in 1usize..6) {
        use rand::{seq::SliceRandom, SeedableRng};
        let (mut exs, labels) = eval_fixture();
        let want = precision_at_k(&rank_per_generic(&exs, true), &labels, k).unwrap();
        exs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let got = precision_at_k(&rank_per_generic(&exs, true), &labels, k).unwrap();
        prop_assert_eq!(want, got);
    }

    #[test]
    fn unique_count_bounded_and_case_insensitive(texts in prop::collection::vec("[a-cA-C ]{0,6}", 0..20)) {
        let n = unique_count(texts.iter().map(String::as_str));
        prop_assert!(n <= texts.len());
        let upper: Vec<String> = texts.iter().map(|t| t.to_uppercase()).collect();
        prop_assert_eq!(n, unique_count(upper.iter().map(String::as_str)));
    }

    #[test]
    fn preprocess_is_idempotent(words in prop::collection::vec(
        prop::sample::select(vec!["Birds", "usually", "may", "have", "to", "be", "fly", "in", "order", "generally", "cats"]),
        1..8,
    )) {
        let p = Preprocessor::default();
        let text = words.join(" ");
        if let Ok((once, r1)) = p.preprocess(&text) {
            if r1.excluded.is_none() && !once.is_empty() {
                let (twice, r2) = p.preprocess(&once).unwrap();
                prop_assert_eq!(&once, &twice);
                prop_assert!(r2.excluded.is_none());
            }
        }
    }
}

#[test]
fn self_ablation_has_zero_deltas() {
    let (exs, labels) = eval_fixture();
    for row in ablation_report(&exs, &exs, Some(&labels)).unwrap() {
        assert_eq!(row.run_a, row.run_b, "{}", row.metric);
        if let Some(d) = row.delta {
            assert_eq!(d, 0.0, "{}", row.metric);
        }
    }
}
