use super::*;
use crate::corpus::{synthesize_corpus, SynthConfig};
use crate::criteria::AttributeSchema;
use crate::model::BackboneConfig;
use crate::textproto::InstructionRegistry;
use alloc::string::ToString;
use alloc::vec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn probs_logits(p: &[f64]) -> Vec<f32> {
    p.iter().map(|x| x.ln() as f32).collect()
}

#[test]
fn top_k_renormalizes() {
    let l = probs_logits(&[0.5, 0.3, 0.2]);
    let d = top_k_distribution(&l, 2, 1.0);
    assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), [0, 1]);
    assert!((d[0].1 - 0.625).abs() < 1e-6 && (d[1].1 - 0.375).abs() < 1e-6);
    assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
    // Ties go to the lower id.
    let d = top_k_distribution(&[1.0, 2.0, 2.0, 2.0], 2, 1.0);
    assert_eq!(d.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2]);
    // Temperature reshapes before restriction.
    let d = top_k_distribution(&[0.0, 1.0f32.ln()], 2, 0.5);
    assert!((d[0].1 - 0.5).abs() < 1e-9);
    let d = top_k_distribution(&[2.0f32.ln(), 0.0], 2, 0.5);
    assert!((d[0].1 - 0.8).abs() < 1e-6);
    assert!(top_k_distribution(&[f32::NEG_INFINITY, 0.0], 2, 1.0).len() == 1);
}

#[test]
fn greedy_and_monte_carlo() {
    let l = probs_logits(&[0.2, 0.5, 0.3]);
    let mut r = rng::stream(1, "t");
    for _ in 0..50 {
        assert_eq!(sample_step(&l, 1, 1.0, &mut r), 1);
    }
    let l = probs_logits(&[0.5, 0.3, 0.2]);
    let n = 100_000;
    let zeros = (0..n).filter(|_| sample_step(&l, 2, 1.0, &mut r) == 0).count();
    assert!((zeros as f64 / n as f64 - 0.625).abs() < 0.01);
}

proptest! {
    #[test]
    fn top_k_sums_to_one(l in prop::collection::vec(-5.0f32..5.0, 2..40), k in 1usize..50, t in 0.2f64..3.0) {
        let d = top_k_distribution(&l, k, t);
        prop_assert_eq!(d.len(), k.min(l.len()));
        prop_assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
        for w in d.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
    }
}

fn blob(r: &mut StreamRng, c: [f32; 2], n: usize) -> Vec<Vec<f32>> {
    (0..n).map(|_| vec![c[0] + r.random_range(-0.1..0.1), c[1] + r.random_range(-0.1..0.1)]).collect()
}

/// Minimum-WCSS 2-partition by enumeration.
fn best_partition(points: &[Vec<f32>]) -> Vec<usize> {
    let n = points.len();
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1..(1u32 << n) - 1 {
        let a: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let w = wcss(points, &a, 2);
        if w < best.0 {
            best = (w, a);
        }
    }
    best.1
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.iter().zip(b).all(|(x, y)| x == y) || a.iter().zip(b).all(|(x, y)| x != y)
}

#[test]
fn kmeans_fixtures() {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut pts = blob(&mut r, [0.0, 0.0], 5);
    pts.extend(blob(&mut r, [10.0, 3.0], 6));
    for seed in 0..5 {
        let c = kmeans(&pts, 2, seed);
        assert_eq!(c.k, 2);
        assert!(same_partition(&c.assign, &best_partition(&pts)));
        assert!(c.wcss <= c.initial_wcss + 1e-12);
    }
    assert!(kmeans(&pts, 1, 0).assign.iter().all(|&a| a == 0));
    let same = vec![vec![1.0, 2.0]; 3];
    let c = kmeans(&same, 3, 0);
    assert_eq!(c.k, 1);
    assert_eq!(c.assign, [0, 0, 0]);
    assert_eq!(kmeans(&pts, 2, 7), kmeans(&pts, 2, 7));
}

proptest! {
    #[test]
    fn kmeans_never_worsens_seeding(seed in 0u64..500, n in 2usize..20, k in 1usize..6) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f32>> = (0..n).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let c = kmeans(&pts, k, seed);
        prop_assert!(c.wcss <= c.initial_wcss + 1e-9);
        prop_assert!(c.assign.iter().all(|&a| a < c.k));
    }
}

fn cand(ppl: f64, cluster: usize) -> Candidate {
    Candidate { ids: vec![], text: String::new(), nll: vec![], ppl, embedding: vec![], cluster }
}

#[test]
fn selection_fixtures() {
    let c = [cand(3.2, 0), cand(1.1, 0), cand(9.0, 0)];
    assert_eq!(select_candidates(&c), [1]);
    let c = [cand(2.0, 1), cand(2.0, 0), cand(f64::INFINITY, 2), cand(2.0, 1), cand(1.5, 0)];
    assert_eq!(select_candidates(&c), [4, 0]);
}

proptest! {
    #[test]
    fn selection_is_per_cluster_argmin(ppls in prop::collection::vec((0.5f64..20.0, 0usize..4), 1..30)) {
        let c: Vec<Candidate> = ppls.iter().map(|&(p, k)| cand(p, k)).collect();
        let got = select_candidates(&c);
        let mut want = Vec::new();
        for j in 0..4 {
            let mut best: Option<usize> = None;
            for i in 0..c.len() {
                if c[i].cluster == j && best.is_none_or(|b| c[i].ppl < c[b].ppl) {
                    best = Some(i);
                }
            }
            want.extend(best);
        }
        prop_assert_eq!(&got, &want);
        for &s in &got {
            prop_assert!(c.iter().filter(|x| x.cluster == c[s].cluster).all(|x| c[s].ppl <= x.ppl));
        }
    }
}

struct Toy {
    vocab: Vocabulary,
    registry: InstructionRegistry,
    corpus: Vec<TrialDocument>,
    model: ModelState<f32>,
}

fn toy() -> Toy {
    let corpus = synthesize_corpus(&SynthConfig { n_trials: 6, seed: 3, schema: AttributeSchema::default() }).unwrap();
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
        context_window: 128,
        vocab_size: vocab.len(),
        instruction_slots: 12,
        prompt_dim: 4,
        ..Default::default()
    };
    let model = ModelState::init(cfg, registry.clone()).unwrap();
    Toy { vocab, registry, corpus, model }
}

#[test]
fn rollouts_are_reproducible_and_greedy_matches_forward() {
    let t = toy();
    let a = Assembler::new(&t.vocab, &t.registry);
    let g = Generator { state: &t.model, assembler: a, store: None, variant: Variant::default() };
    let trial = &t.corpus[0];
    let cfg = GenerationConfig { top_k: 20, candidates: 6, clusters: 3, max_new_tokens: 12, temperature: 1.0, seed: 4 };
    let r1 = g.generate_criteria(trial, "age", &cfg, &[]).unwrap();
    let r2 = g.generate_criteria(trial, "age", &cfg, &[]).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.exemplar_trial.is_none());
    let distinct: alloc::collections::BTreeSet<&str> = r1.candidates.iter().map(|c| c.text.as_str()).collect();
    assert!(distinct.len() >= 2);
    for c in &r1.candidates {
        if c.ppl.is_finite() {
            let mean = c.nll.iter().sum::<f64>() / c.nll.len() as f64;
            assert!((c.ppl - mean.exp()).abs() < 1e-6);
        }
    }

    // Greedy rollout against argmax over masked full-forward logits.
    let greedy = GenerationConfig::greedy(8);
    let r = g.generate_criteria(trial, "age", &greedy, &[]).unwrap();
    let prompt = a.prompt(&Setup::from(trial), None, Some("age"), 128 - 8).unwrap();
    let mask = generatable(&t.vocab);
    let mut ids = prompt.input_ids.clone();
    let v = t.vocab.len();
    let mut want = Vec::new();
    for _ in 0..r.candidates[0].ids.len() {
        let opts = ForwardOptions { prompt: prompt.instruction_index, block_prompt_attention: false };
        let logits = t.model.forward(&ids, opts).unwrap();
        let last = &logits[logits.len() - v..];
        let best = (0..v)
            .filter(|&i| mask[i])
            .max_by(|&x, &y| last[x].partial_cmp(&last[y]).unwrap().then(y.cmp(&x)))
            .unwrap();
        want.push(best as TokenId);
        ids.push(best as TokenId);
    }
    assert_eq!(r.candidates[0].ids, want);
}

#[test]
fn forced_prefix_follows_block_opener() {
    let t = toy();
    let a = Assembler::new(&t.vocab, &t.registry);
    let state = &t.model;
    let prompt = a.prompt(&Setup::from(&t.corpus[0]), None, Some("bmi"), 100).unwrap();
    let mut dec = Decoder::new(state, ForwardOptions::default()).unwrap();
    let mut first = dec.feed(&prompt.input_ids).unwrap();
    // Make the block opener the only sensible first token.
    first[INCS as usize] = 1e4;
    let prefix = t.vocab.tokenize("body mass index");
    let cfg = GenerationConfig { top_k: 5, candidates: 3, clusters: 1, max_new_tokens: 10, temperature: 1.0, seed: 1 };
    let cands = sample_candidates(state, &t.vocab, &dec, &first, &cfg, Forcing { prefix: &prefix }).unwrap();
    for c in &cands {
        assert_eq!(c.ids[0], INCS);
        assert_eq!(c.ids[1], INC);
        assert_eq!(&c.ids[2..5], &prefix[..]);
        assert!(c.ids.iter().all(|&id| generatable(&t.vocab)[id as usize]));
    }
}

#[test]
fn appendix_style_output_parses() {
    let t = toy();
    let mut ids = vec![INCS, INC];
    ids.extend(t.vocab.tokenize("age 18 years"));
    ids.extend([INCS_END, EOS]);
    let p = parse_output(&t.vocab, &ids);
    assert!(p.target.is_some());
}

#[test]
fn retrieval_excludes_the_requested_trial() {
    let t = toy();
    let a = Assembler::new(&t.vocab, &t.registry);
    let parser = crate::criteria::CriteriaParser::new(AttributeSchema::default()).unwrap();
    let (pairs, _) = crate::corpus::extract_pairs(&t.corpus, &parser, 2);
    let store = KnowledgeStore::build(&t.model, &a, &t.corpus, &pairs).unwrap();
    let g = Generator { state: &t.model, assembler: a, store: Some(&store), variant: Variant::default() };
    let trial = &t.corpus[1];
    let r = g.generate_criteria(trial, "age", &GenerationConfig::greedy(6), &[]).unwrap();
    let ex = r.exemplar_trial.unwrap();
    assert_ne!(ex, trial.trial_id);
    let tr = g.generate_trial(trial, 20).unwrap();
    assert_eq!(tr.selected, [0]);
    assert_ne!(tr.exemplar_trial.unwrap(), trial.trial_id);
    let no_rag = Generator { variant: Variant { rag: false, ..Variant::default() }, ..g };
    assert!(no_rag
        .generate_criteria(trial, "age", &GenerationConfig::greedy(6), &[])
        .unwrap()
        .exemplar_trial
        .is_none());
    assert!(GenerationConfig { clusters: 10, candidates: 5, ..Default::default() }.validate(100).is_err());
}
