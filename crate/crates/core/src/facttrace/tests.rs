use std::collections::HashSet;

use super::*;
use crate::index::{Hit, RetrievalResult};
use crate::Error;
use crate::tinylm::{self, ModelConfig, OptimizerState, TrainHyper};

fn ranked(query: u64, ids: &[u64]) -> RetrievalResult {
    RetrievalResult {
        query_id: ExampleId(query),
        fingerprint: "test".into(),
        hits: ids
            .iter()
            .enumerate()
            .map(|(i, &id)| Hit { example_id: ExampleId(id), score: 1.0 - i as f64 * 0.01, rank: i + 1 })
            .collect(),
        truncated: true,
    }
}

fn set(ids: &[u64]) -> HashSet<ExampleId> {
    ids.iter().map(|&i| ExampleId(i)).collect()
}

#[test]
fn mrr_fixtures() {
    let all_first = vec![ranked(0, &[5, 1, 2]), ranked(1, &[7, 3])];
    assert_eq!(mrr(&all_first, &[set(&[5]), set(&[7])], 100).unwrap(), 1.0);

    let first_second = vec![ranked(0, &[5, 1, 2]), ranked(1, &[3, 7])];
    assert_eq!(mrr(&first_second, &[set(&[5]), set(&[7])], 100).unwrap(), 0.75);

    let miss = vec![ranked(0, &[1, 2, 3])];
    assert_eq!(mrr(&miss, &[set(&[9])], 100).unwrap(), 0.0);
    // Hit beyond the cap contributes nothing.
    assert_eq!(mrr(&miss, &[set(&[3])], 2).unwrap(), 0.0);
    assert_eq!(mrr(&miss, &[set(&[3])], 3).unwrap(), 1.0 / 3.0);

    assert!(matches!(mrr(&[], &[], 100), Err(Error::Empty(_))));
}

#[test]
fn mrr_requires_depth_or_truncation_flag() {
    let mut r = ranked(0, &[1, 2]);
    r.truncated = false;
    assert!(mrr(&[r.clone()], &[set(&[1])], 100).is_err());
    assert_eq!(mrr(&[r], &[set(&[1])], 2).unwrap(), 1.0);
}

#[test]
fn recall_fixtures() {
    let truth = [set(&[1]), set(&[2]), set(&[3]), set(&[4])];
    let hits: Vec<_> = (0..4).map(|q| ranked(q, &[q + 1, 50])).collect();
    assert_eq!(recall_at_k(&hits, &truth, 10).unwrap(), 1.0);
    let none: Vec<_> = (0..4).map(|q| ranked(q, &[50, 60])).collect();
    assert_eq!(recall_at_k(&none, &truth, 10).unwrap(), 0.0);
    let one: Vec<_> = (0..4).map(|q| ranked(q, if q == 2 { &[3, 60] } else { &[50, 60] })).collect();
    assert_eq!(recall_at_k(&one, &truth, 10).unwrap(), 0.25);

    let late: Vec<_> = (0..4).map(|q| ranked(q, &(100..111).chain([q + 1]).collect::<Vec<_>>())).collect();
    assert_eq!(recall_at_k(&late, &truth, 10).unwrap(), 0.0);
}

#[test]
fn mrr_never_exceeds_recall_at_cap() {
    let truth = [set(&[3]), set(&[9]), set(&[1])];
    let r = vec![ranked(0, &[1, 2, 3]), ranked(1, &[4, 5]), ranked(2, &[1])];
    assert!(mrr(&r, &truth, 3).unwrap() <= recall_at_k(&r, &truth, 3).unwrap());
}

fn entity(id: u32, kind: EntityKind, aliases: &[&str]) -> Entity {
    Entity { id, kind, aliases: aliases.iter().map(|s| s.to_string()).collect() }
}

fn fact() -> FactRecord {
    FactRecord {
        id: 7,
        subject: entity(0, EntityKind::Person, &["Abebe Alemayehu"]),
        relation: "citizen_of".into(),
        object: entity(1, EntityKind::Country, &["United States", "USA"]),
        template: "{s} is a citizen of the following country:".into(),
        prompt: "Abebe Alemayehu is a citizen of the following country:".into(),
        target: "United States".into(),
        bucket: "1-2".into(),
        frequency: 1,
    }
}

fn passage(text: &str, label: PassageLabel) -> CorpusPassage {
    CorpusPassage { id: ExampleId(0), text: text.into(), label, token_ids: vec![] }
}

#[test]
fn categorization_precedence() {
    let f = fact();
    let entailing = passage("Abebe Alemayehu holds citizenship of the USA.", PassageLabel::Entails { facts: vec![7] });
    assert_eq!(categorize_proponent(&entailing, &f), Category::Entailing);
    // Same text, but labelled for another fact: both entities appear.
    let other = passage("Abebe Alemayehu holds citizenship of the USA.", PassageLabel::Entails { facts: vec![8] });
    assert_eq!(categorize_proponent(&other, &f), Category::BothEntities);
    let both = passage("A report on ABEBE ALEMAYEHU and the usa.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&both, &f), Category::BothEntities);
    let one = passage("The United States exports grain.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&one, &f), Category::OneEntity);
    let partial = passage("Gebre Alemayehu gave a speech.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&partial, &f), Category::PartialMatch);
    let neither = passage("The weather was mild.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&neither, &f), Category::Neither);
    // A shared content word is a partial match, a shared stopword is not.
    let stop = passage("The states of matter.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&stop, &f), Category::PartialMatch);
    let only_stop = passage("It was the time.", PassageLabel::Distractor);
    assert_eq!(categorize_proponent(&only_stop, &f), Category::Neither);
}

#[test]
fn fact_frequency_counts_co_mentions() {
    let f = fact();
    let texts = ["Abebe Alemayehu visited the USA.", "abebe alemayehu left the united states.", "USA and abebe alemayehu."];
    assert_eq!(fact_frequency(texts, &f), 3);
    assert_eq!(fact_frequency(["Abebe Alemayehu.", "The USA."], &f), 0);
    // Substrings of longer words are not mentions.
    assert_eq!(fact_frequency(["Abebe Alemayehu met the USAF."], &f), 0);
}

#[test]
fn correctness_split() {
    let mut a = fact();
    a.id = 1;
    let mut b = fact();
    b.id = 2;
    let mut c = fact();
    c.id = 3;
    let facts = [a, b, c];
    let preds = ["united STATES".to_string(), "the USA".to_string(), String::new()];
    let (correct, incorrect) = split_by_correctness(&facts, &preds);
    assert_eq!(correct, vec![1, 2]);
    assert_eq!(incorrect, vec![3]);
    let (c2, i2) = split_by_correctness(&facts, &["the".into(), "Canada".into(), "USA".into()]);
    assert_eq!((c2, i2), (vec![3], vec![1, 2]));
}

#[test]
fn vocab_round_trip() {
    let v = Vocab::from_texts(["Kavel Harbor is: near.", "kavel, harbor"]);
    assert_eq!(pieces("Kavel Harbor is: near."), vec!["kavel", "harbor", "is", ":", "near", "."]);
    let ids = v.encode("Kavel Harbor is: near.");
    assert!(ids.iter().all(|&i| i as usize >= tinylm::RESERVED_TOKENS));
    assert_eq!(v.decode(&ids), "kavel harbor is: near.");
    assert_eq!(v.encode("unknown"), vec![tinylm::UNK]);
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    assert!(serde_json::from_str::<Vocab>(r#"["a","a"]"#).is_err());
}

fn small_spec(seed: u64) -> BenchmarkSpec {
    let b = |label: &str, min, max, facts| BucketSpec { label: label.into(), min, max, facts };
    BenchmarkSpec {
        seed,
        people: 20,
        cities: 8,
        countries: 5,
        organizations: 6,
        languages: 4,
        background_entities: 4,
        buckets: vec![b("1-10", 1, 10, 10), b("11-20", 11, 20, 4)],
        template_mimics: 20,
        distractors: 20,
        ..BenchmarkSpec::default()
    }
}

#[test]
fn generator_contract() {
    let spec = small_spec(3);
    let bench = generate_benchmark(&spec).unwrap();
    assert_eq!(bench, generate_benchmark(&spec).unwrap());
    assert_ne!(bench.passages, generate_benchmark(&small_spec(4)).unwrap().passages);

    let counts = bucket_counts(&bench.facts);
    assert_eq!(counts["1-10"], 10);
    assert_eq!(counts["11-20"], 4);
    let texts: Vec<&str> = bench.passages.iter().map(|p| p.text.as_str()).collect();
    let truth = bench.truth_sets();
    for (f, t) in bench.facts.iter().zip(&truth) {
        let spec_bucket = spec.buckets.iter().find(|b| b.label == f.bucket).unwrap();
        let n = fact_frequency(texts.iter().copied(), f);
        assert!((spec_bucket.min..=spec_bucket.max).contains(&n), "fact {} has {n}", f.id);
        assert_eq!(n, f.frequency);
        assert!(!t.is_empty());
        assert!(f.prompt.ends_with(':'));
        assert!(f.subject.aliases.iter().chain(&f.object.aliases).all(|a| a.len() >= 3));
        // Every entailing passage really mentions both entities.
        for id in t {
            let p = bench.passage(*id).unwrap();
            assert!(p.entails(f.id));
            assert_eq!(categorize_proponent(p, f), Category::Entailing);
            assert_eq!(categorize_text(&p.text, &f.subject, &f.object), Category::BothEntities);
        }
    }
    for (i, p) in bench.passages.iter().enumerate() {
        assert_eq!(p.id, ExampleId(i as u64));
        assert!(!p.token_ids.is_empty() && !p.token_ids.contains(&tinylm::UNK));
        if let PassageLabel::OneEntity { entity } = p.label {
            let f = bench.facts.iter().find(|f| f.subject.id == entity || f.object.id == entity).unwrap();
            assert_eq!(categorize_proponent(p, f), Category::OneEntity);
        }
    }
    assert!(bench.vocab.size() <= 512);
}

#[test]
fn zero_frequency_bucket_has_no_entailing_passages() {
    let mut spec = small_spec(1);
    spec.buckets.push(BucketSpec { label: "0".into(), min: 0, max: 0, facts: 2 });
    let bench = generate_benchmark(&spec).unwrap();
    let truth = bench.truth_sets();
    for (f, t) in bench.facts.iter().zip(&truth) {
        assert_eq!(t.is_empty(), f.bucket == "0");
    }
}

#[test]
fn aligned_variant_repeats_the_query_template() {
    let mut spec = small_spec(2);
    spec.lexically_aligned = true;
    let bench = generate_benchmark(&spec).unwrap();
    let truth = bench.truth_sets();
    for (f, t) in bench.facts.iter().zip(&truth) {
        for id in t {
            let words = text::words(&bench.passage(*id).unwrap().text);
            for part in f.template.split("{s}").map(text::words).filter(|w| !w.is_empty()) {
                assert!(text::contains_phrase(&words, &part));
            }
        }
    }
}

#[test]
fn infeasible_specs_name_the_constraint() {
    let mut spec = small_spec(0);
    spec.buckets[0].facts = 10_000;
    assert!(matches!(generate_benchmark(&spec), Err(Error::Infeasible(m)) if m.contains("facts")));
    let mut spec = small_spec(0);
    spec.buckets[0].min = 5;
    spec.buckets[0].max = 2;
    assert!(matches!(generate_benchmark(&spec), Err(Error::Infeasible(m)) if m.contains("min")));
    let mut spec = small_spec(0);
    spec.vocab_limit = 50;
    assert!(matches!(generate_benchmark(&spec), Err(Error::Infeasible(m)) if m.contains("vocab_limit")));
    let mut spec = small_spec(0);
    spec.people = 100_000;
    assert!(matches!(generate_benchmark(&spec), Err(Error::Infeasible(m)) if m.contains("people")));
}

#[test]
fn jsonl_round_trip_with_offsets() {
    let bench = generate_benchmark(&small_spec(5)).unwrap();
    let mut buf = Vec::new();
    let offsets = write_corpus(&mut buf, &bench.passages).unwrap();
    let (off, len) = offsets[3];
    let line = &buf[off as usize..(off + len) as usize];
    let p: CorpusPassage = serde_json::from_slice(line).unwrap();
    assert_eq!(p.text, bench.passages[3].text);
    assert_eq!(read_corpus(&buf[..], &bench.vocab).unwrap(), bench.passages);

    let mut fb = Vec::new();
    write_facts(&mut fb, &bench.facts).unwrap();
    assert_eq!(read_facts(&fb[..]).unwrap(), bench.facts);
    assert!(read_facts(&b"{not json\n"[..]).is_err());
}

fn trained(bench: &Benchmark, steps: usize) -> tinylm::TrainOutput {
    let cfg = ModelConfig { vocab_size: bench.vocab.size(), embed_dim: 32, mlp_hidden: 64, seed: 1, ..ModelConfig::default() };
    let hyper = TrainHyper { learning_rate: 0.02, warmup_steps: 20, ..TrainHyper::default() };
    tinylm::train(&cfg, &bench.corpus_examples(), steps, &hyper).unwrap()
}

#[test]
fn training_raises_entailing_passage_probability() {
    let bench = generate_benchmark(&small_spec(6)).unwrap();
    let before = trained(&bench, 0);
    let after = trained(&bench, 150);
    let ex = bench.corpus_examples();
    let entailing: Vec<_> = bench.passages.iter().filter(|p| matches!(p.label, PassageLabel::Entails { .. })).collect();
    for p in entailing.iter().take(10) {
        let e = &ex[p.id.0 as usize];
        let lp0 = tinylm::sequence_log_prob(&before.state, e).unwrap();
        let lp1 = tinylm::sequence_log_prob(&after.state, e).unwrap();
        assert!(lp1 > lp0, "passage {} log prob {lp0} -> {lp1}", p.id);
    }
}

#[test]
fn tail_patch_eval_behaviour() {
    let bench = generate_benchmark(&small_spec(7)).unwrap();
    let out = trained(&bench, 150);
    let corpus = bench.corpus_examples();
    let truth = bench.truth_sets();
    let queries: Vec<TailPatchQuery> = bench
        .facts
        .iter()
        .map(|f| {
            let (prompt, target) = bench.encode_query(&f.prompt, &f.target);
            TailPatchQuery { id: f.query_id(), prompt, target }
        })
        .collect();
    let entailing: Vec<Vec<&ExampleRecord>> = truth
        .iter()
        .map(|t| {
            let mut ids: Vec<_> = t.iter().copied().collect();
            ids.sort();
            (0..3).map(|i| &corpus[ids[i % ids.len()].0 as usize]).collect()
        })
        .collect();
    let distractors: Vec<&ExampleRecord> = bench
        .passages
        .iter()
        .filter(|p| p.label == PassageLabel::Distractor && !p.text.contains(':'))
        .map(|p| &corpus[p.id.0 as usize])
        .collect();
    let random: Vec<Vec<&ExampleRecord>> = (0..queries.len()).map(|q| (0..3).map(|i| distractors[(q * 3 + i) % distractors.len()]).collect()).collect();

    let hyper = out.optimizer.hyper.clone();
    let ent = tail_patch_eval(&out.state, &out.optimizer, &hyper, &queries, &entailing, &[1, 3]).unwrap();
    let rnd = tail_patch_eval(&out.state, &out.optimizer, &hyper, &queries, &random, &[1, 3]).unwrap();
    assert!(ent.at(3).unwrap() > 0.0, "entailing {:?}", ent.absolute_pp);
    assert!(rnd.at(3).unwrap().abs() < ent.at(3).unwrap(), "random {:?} entailing {:?}", rnd.absolute_pp, ent.absolute_pp);

    let frozen = TrainHyper { learning_rate: 0.0, ..hyper.clone() };
    let zero = tail_patch_eval(&out.state, &out.optimizer, &frozen, &queries, &entailing, &[1, 3]).unwrap();
    assert!(zero.absolute_pp.iter().all(|v| v.abs() <= 1e-9), "{:?}", zero.absolute_pp);
    assert!(zero.deltas.iter().flatten().all(|v| v.abs() <= 1e-9));

    assert!(tail_patch_eval(&out.state, &out.optimizer, &hyper, &queries, &entailing, &[5]).is_err());
    let other = OptimizerState::new(&tinylm::ParamLayout::new(&ModelConfig { vocab_size: 40, ..ModelConfig::default() }), hyper.clone());
    assert!(tail_patch_eval(&out.state, &other, &hyper, &queries, &entailing, &[1]).is_err());
}

#[test]
fn report_formats() {
    let bench = generate_benchmark(&small_spec(8)).unwrap();
    let truth = bench.truth_sets();
    let retrievals: Vec<RetrievalResult> = bench
        .facts
        .iter()
        .zip(&truth)
        .map(|(f, t)| {
            let mut ids: Vec<u64> = t.iter().map(|i| i.0).collect();
            ids.sort();
            ranked(f.query_id().0, &ids)
        })
        .collect();
    let correct: HashSet<u64> = [bench.facts[0].id].into();
    let m = MethodReport::from_retrievals("oracle", "fp", &bench, &retrievals, &correct, 100, 10).unwrap();
    assert_eq!(m.mrr, 1.0);
    assert_eq!(m.recall, 1.0);
    assert_eq!(m.by_bucket.len(), 2);
    assert_eq!(m.by_correctness.iter().map(|r| r.queries).sum::<usize>(), bench.facts.len());
    assert!((m.categories[&Category::Entailing] - 1.0).abs() < 1e-12);
    let report = EvalReport {
        config_hash: "abc".into(),
        passages: bench.passages.len(),
        facts: bench.facts.len(),
        accuracy: 0.5,
        lambda: Some(0.9),
        mrr_cap: 100,
        recall_k: 10,
        methods: vec![m],
    };
    let jsonl = report.to_jsonl().unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    assert_eq!(EvalReport::from_jsonl(&jsonl).unwrap(), report);
    assert!(report.to_table().contains("oracle"));
}

#[test]
fn default_benchmark_shape() {
    let bench = generate_benchmark(&BenchmarkSpec::default()).unwrap();
    let max_len = bench.passages.iter().map(|p| p.token_ids.len()).max().unwrap();
    eprintln!(
        "passages {} facts {} vocab {} max tokens {max_len}",
        bench.passages.len(),
        bench.facts.len(),
        bench.vocab.size()
    );
    for p in bench.passages.iter().take(6) {
        eprintln!("  {} {:?}", p.text, p.label);
    }
    assert_eq!(bench.facts.len(), 200);
    assert!((4000..=6000).contains(&bench.passages.len()));
    assert!(max_len + 2 <= ModelConfig::default().seq_len_max);
}
