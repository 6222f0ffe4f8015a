use super::*;
use crate::corpus::{synthesize_corpus, Polarity, SynthConfig};
use crate::criteria::{AttributeSchema, Comparator, CriteriaParser, Number};
use crate::generation::{GenerationConfig, Generator, Variant};
use crate::lexer::lex;
use crate::model::{BackboneConfig, ModelState};
use crate::textproto::{Assembler, InstructionRegistry, Vocabulary};
use alloc::string::ToString;
use alloc::vec;
use proptest::prelude::*;

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

#[test]
fn bleu_clips_and_penalizes_brevity() {
    assert!(close(bleu1(&w("a a a"), &[w("a b")]), 100.0 / 3.0));
    assert!(close(bleu1(&w("a"), &[w("a b c")]), 100.0 * (-2.0f64).exp()));
    // Closest reference length wins; ties take the shorter one.
    assert!(close(bleu1(&w("a b"), &[w("a b c d e"), w("a b x")]), 100.0 * (1.0 - 3.0 / 2.0f64).exp()));
    assert!(close(bleu1(&w("a b"), &[w("a"), w("a b x")]), 100.0));
    assert!(close(bleu1(&w("a b c"), &[w("c b a")]), 100.0));
    assert_eq!(bleu1(&[], &[w("a")]), 0.0);
}

#[test]
fn rouge_l_uses_beta() {
    let (p, r) = (0.75, 1.0);
    let want = 100.0 * 2.44 * p * r / (r + 1.44 * p);
    assert!(close(rouge_l(&w("a b c d"), &w("a c d")), want));
    assert_eq!(lcs_len(&w("a b c d"), &w("b d a c")), 2);
    assert!(close(rouge_l(&w("x y"), &w("x y")), 100.0));
    assert_eq!(rouge_l(&w("x"), &w("y")), 0.0);
}

#[test]
fn meteor_fragmentation() {
    for m in 1..6usize {
        let s: Vec<String> = (0..m).map(|i| i.to_string()).collect();
        assert!(close(meteor(&s, &s), 100.0 * (1.0 - 0.5 / (m * m * m) as f64)));
    }
    assert_eq!(align(&w("a b c"), &w("c a b")), Alignment { matches: 3, chunks: 2 });
    assert!(close(meteor(&w("a b c"), &w("c a b")), 100.0 * (1.0 - 4.0 / 27.0)));
    // Stem stage picks up inflections the exact stage misses.
    assert_eq!(stem("ages"), "age");
    assert_eq!(stem("diseases"), "disease");
    assert_eq!(stem("therapies"), "therapy");
    assert_eq!(stem("status"), "status");
    assert_eq!(align(&w("patient ages"), &w("patient age")), Alignment { matches: 2, chunks: 1 });
    assert!(close(meteor(&w("patient ages"), &w("patient age")), 100.0 * (1.0 - 0.5 / 8.0)));
    // Recall weighs nine times precision.
    let (p, r) = (1.0, 0.5);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    assert!(close(meteor(&w("a b"), &w("a b c d")), 100.0 * fmean * (1.0 - 0.5 / 8.0)));
}

#[test]
fn cider_matches_hand_tfidf() {
    let idf = CiderIdf::new(&[w("a b"), w("a c"), w("d")]);
    assert!(close(idf.idf(&["a"]), (1.5f64).ln()));
    assert!(close(idf.idf(&["zz"]), 3.0f64.ln()));
    let (ia, ib) = ((1.5f64).ln(), 3.0f64.ln());
    let cos1 = ia * ia / (ia * ia + ib * ib);
    assert!(close(cider(&w("a b"), &[w("a c")], &idf), 10.0 * cos1 / 4.0));

    let idf = CiderIdf::new(&[w("a b c d e"), w("x y")]);
    assert!(close(cider(&w("a b c d e"), &[w("a b c d e")], &idf), 10.0));
    let refs = [w("a b c"), w("b c d e"), w("e a")];
    let mut rev = refs.clone();
    rev.reverse();
    assert!(close(cider(&w("a b c d"), &refs, &idf), cider(&w("a b c d"), &rev, &idf)));
}

#[test]
fn clinical_micro_arithmetic() {
    let mut c = SetCounts { tp: 2, fp: 1, fn_: 1 };
    c += SetCounts { tp: 1, fp: 0, fn_: 1 };
    let k = Clinical::from_counts(c).unwrap();
    assert!(close(k.precision, 0.75) && close(k.recall, 0.6) && close(k.jaccard, 0.5));
    assert!(close(k.f1, 2.0 * 0.75 * 0.6 / 1.35));
    assert!(Clinical::from_counts(SetCounts { tp: 0, fp: 3, fn_: 0 }).is_err());

    // Micro averaging differs from the mean of per-pair scores.
    let rel = |a: &str, v: i64| Relation::numeric(a, Comparator::Ge, Number::from_int(v), None);
    let pairs = vec![
        ([rel("age", 18)].into(), [rel("age", 18)].into()),
        ([rel("age", 1)].into(), [rel("bmi", 1), rel("bmi", 2), rel("bmi", 3)].into()),
    ];
    let micro = clinical_accuracy(&pairs).unwrap();
    assert!(close(micro.precision, 0.5) && close(micro.recall, 0.25) && close(micro.jaccard, 0.2));
    assert!(close(micro.f1, 1.0 / 3.0));
}

#[test]
fn quartiles_interpolate() {
    let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
    assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    assert_eq!(Quartiles::of(&[7.0]).unwrap().median, 7.0);
    assert!(Quartiles::of(&[]).is_none());
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["age", "years", "bmi", "kg", "18", "no", "prior"]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn overlap_scores_are_bounded(c in sentence(), r in sentence()) {
        let idf = CiderIdf::new(&[c.clone(), r.clone(), w("other")]);
        for s in [bleu1(&c, std::slice::from_ref(&r)), rouge_l(&c, &r), meteor(&c, &r)] {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        }
        let ci = cider(&c, std::slice::from_ref(&r), &idf);
        prop_assert!((0.0..=10.0 + 1e-9).contains(&ci));
        prop_assert!(close(bleu1(&r, std::slice::from_ref(&r)), 100.0));
        prop_assert!(close(rouge_l(&r, &r), 100.0));
        prop_assert_eq!(lcs_len(&c, &r), lcs_len(&r, &c));
    }
}

fn item(
    pol: Polarity,
    disease: &str,
    cand: &str,
    reference: &str,
    parser: &CriteriaParser,
    follows: Option<bool>,
) -> ItemResult {
    ItemResult {
        trial_id: alloc::format!("{disease}-{cand}"),
        disease: disease.into(),
        polarity: pol,
        instruction: follows.map(|_| "age".into()),
        candidate: cand.into(),
        reference: reference.into(),
        pred: parser.parse_criterion(cand),
        gold: parser.parse_criterion(reference),
        follows,
    }
}

#[test]
fn score_items_groups_and_counts() {
    let parser = CriteriaParser::new(AttributeSchema::default()).unwrap();
    let items = vec![
        item(Polarity::Inclusion, "asthma", "age at least 18 years", "age at least 18 years", &parser, Some(true)),
        item(Polarity::Inclusion, "gout", "age at least 21 years", "age at least 18 years", &parser, Some(true)),
        item(Polarity::Exclusion, "gout", "pregnant", "age at least 18 years", &parser, Some(false)),
    ];
    let idf = CiderIdf::new(&[lex("age at least 18 years"), lex("pregnant")]);
    let ev = score_items(items, Level::Criteria, true, &idf).unwrap();
    assert!(close(ev.instruction_following.unwrap(), 2.0 / 3.0));
    let inc = ev.overall(Polarity::Inclusion).unwrap();
    assert_eq!((inc.n_items, inc.n_trials), (2, 2));
    let k = inc.clinical.unwrap();
    assert!(close(k.precision, 0.5) && close(k.recall, 0.5));
    let asthma = ev.reports.iter().find(|r| r.group.as_deref() == Some("asthma")).unwrap();
    assert!(close(asthma.bleu1, 100.0) && close(asthma.rouge_l, 100.0));
    assert!(ev.summaries.iter().any(|s| s.metric == "f1" && s.polarity == Polarity::Inclusion));
    assert!(score_items(vec![], Level::Trial, false, &idf).is_err());
}

#[test]
fn evaluate_runs_both_levels() {
    let corpus = synthesize_corpus(&SynthConfig { n_trials: 4, seed: 9, schema: AttributeSchema::default() }).unwrap();
    let tags: Vec<String> = AttributeSchema::default().tags().map(|s| s.to_string()).collect();
    let registry = InstructionRegistry::new(tags.iter().cloned()).unwrap();
    let texts: Vec<&str> = corpus
        .iter()
        .flat_map(|t| {
            [t.title.as_str(), t.disease.as_str(), t.treatment.as_str()]
                .into_iter()
                .chain(t.criteria().map(|c| c.text.as_str()))
        })
        .collect();
    let vocab = Vocabulary::build(texts, 1, 12, &tags).unwrap();
    let cfg = BackboneConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        context_window: 256,
        vocab_size: vocab.len(),
        instruction_slots: 12,
        prompt_dim: 4,
        ..Default::default()
    };
    let model = ModelState::<f32>::init(cfg, registry.clone()).unwrap();
    let parser = CriteriaParser::new(AttributeSchema::default()).unwrap();
    let g = Generator {
        state: &model,
        assembler: Assembler::new(&vocab, &registry),
        store: None,
        variant: Variant::default(),
    };
    let ecfg = EvalConfig {
        generation: GenerationConfig {
            top_k: 10,
            candidates: 4,
            clusters: 2,
            max_new_tokens: 10,
            temperature: 1.0,
            seed: 2,
        },
        ..Default::default()
    };
    let ev = evaluate(&g, &parser, &corpus[..2], &ecfg).unwrap();
    let n_req: usize = corpus[..2].iter().map(|t| t.criteria().filter(|c| c.attribute.is_some()).count()).sum();
    assert_eq!(ev.items.len(), n_req);
    assert!(ev.instruction_following.is_some());
    assert_eq!(ev, evaluate(&g, &parser, &corpus[..2], &ecfg).unwrap());
    for it in ev.items.iter().filter(|it| !it.candidate.is_empty()) {
        // Three gold words were forced after the block opener.
        let head: Vec<String> = lex(&it.reference).into_iter().take(3).collect();
        assert_eq!(lex(&it.candidate).into_iter().take(head.len()).collect::<Vec<_>>(), head);
    }

    let tcfg = EvalConfig { level: Level::Trial, trial_max_new_tokens: 24, ..ecfg };
    let ev = evaluate(&g, &parser, &corpus[..2], &tcfg).unwrap();
    assert_eq!(ev.items.len(), 4);
    assert!(ev.instruction_following.is_none());
    assert!(evaluate(&g, &parser, &[], &tcfg).is_err());
}
