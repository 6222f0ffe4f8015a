use super::*;
use crate::corpus::{build_pretrain_set, synthesize_corpus, PretrainConfig, SynthConfig};
use crate::criteria::AttributeSchema;
use crate::model::BackboneConfig;
use crate::textproto::{Assembler, InstructionRegistry, Setup, Vocabulary};
use alloc::string::ToString;
use alloc::vec;

struct Fixture {
    vocab: Vocabulary,
    registry: InstructionRegistry,
    pre: Vec<PromptSequence>,
    ft: Vec<PromptSequence>,
}

fn fixture(n_trials: usize, msr: bool) -> Fixture {
    let corpus = synthesize_corpus(&SynthConfig { n_trials, seed: 5, schema: AttributeSchema::default() }).unwrap();
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
    let a = Assembler::new(&vocab, &registry);
    let cfg = PretrainConfig { targets_per_trial: Some(1), exemplar_count: 1, seed: 1 };
    let samples = build_pretrain_set(&corpus, None, &cfg);
    let mut pre = Vec::new();
    let mut ft = Vec::new();
    for s in &samples {
        let trial = corpus.iter().find(|t| t.trial_id == s.trial_id).unwrap();
        let setup = Setup::from(trial);
        pre.push(a.pretrain_sequence(&setup, s, msr, 128).unwrap());
        if let Some(tag) = &s.target.attribute {
            let mut p = a.prompt(&setup, None, Some(tag), 128).unwrap();
            a.attach_target(&mut p, &s.rationale, &s.target, msr, 128).unwrap();
            ft.push(p);
        }
    }
    Fixture { vocab, registry, pre, ft }
}

fn small_model<T: Real>(f: &Fixture, d: usize, seed: u64) -> ModelState<T> {
    let cfg = BackboneConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        context_window: 128,
        vocab_size: f.vocab.len(),
        instruction_slots: 12,
        prompt_dim: 4,
        prompt_len: 1,
        seed,
    };
    ModelState::init(cfg, f.registry.clone()).unwrap()
}

#[test]
fn uniform_model_loss_is_log_vocab() {
    let logits = vec![0.0f64; 100];
    assert!((token_nll(&logits, 7, None) - 100f64.ln()).abs() < 1e-12);
    let f = fixture(4, true);
    let mut m: ModelState<f64> = small_model(&f, 8, 1);
    let k = m.ix.lm_head;
    m.params[k].data.iter_mut().for_each(|x| *x = 0.0);
    let l = mle_loss(&m, &f.pre, false).unwrap();
    assert!((l - (f.vocab.len() as f64).ln()).abs() < 1e-6);
}

#[test]
fn duplicated_batch_keeps_mean() {
    let f = fixture(4, false);
    let m: ModelState<f64> = small_model(&f, 8, 2);
    let one = mle_loss(&m, &f.pre, false).unwrap();
    let mut dup = f.pre.clone();
    dup.extend(f.pre.iter().cloned());
    assert!((mle_loss(&m, &dup, false).unwrap() - one).abs() < 1e-12);
    assert_eq!(mle_loss(&m, &[], false), Err(Error::Empty("batch")));
}

#[test]
fn contrastive_fixtures() {
    let h = [0.3f64, -1.0, 2.0].repeat(4);
    assert!((contrastive_loss(&h, 4, 3, 0.5, None) - 0.5).abs() < 1e-12);
    let eye = [2.0f64, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 3.0];
    assert_eq!(contrastive_loss(&eye, 3, 3, 0.5, None), 0.0);
    assert_eq!(contrastive_loss(&eye[..3], 1, 3, 0.5, None), 0.0);
    // Margin zero: cosine never exceeds one, so nothing is active.
    let h = [1.0f64, 0.2, 0.9, 0.1];
    assert_eq!(contrastive_loss(&h, 2, 2, 0.0, None), 0.0);

    let h = [0.9f64, 0.1, 0.3, 0.8, 0.2, 0.4, 0.85, 0.3, 0.25];
    let cos = |a: &[f64], b: &[f64]| {
        let n = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
    };
    let rows: Vec<&[f64]> = h.chunks(3).collect();
    let mut want = 0.0;
    for l in 0..3 {
        for j in 0..3 {
            if l != j {
                want += (0.5 - 1.0 + cos(rows[l], rows[j])).max(0.0);
            }
        }
    }
    want /= 6.0;
    assert!(want > 0.0);
    assert!((contrastive_loss(&h, 3, 3, 0.5, None) - want).abs() < 1e-12);

    let mut g = vec![0.0; 9];
    contrastive_loss(&h, 3, 3, 0.5, Some((&mut g, 1.0)));
    for k in 0..9 {
        let mut hp = h;
        hp[k] += 1e-6;
        let mut hm = h;
        hm[k] -= 1e-6;
        let fd = (contrastive_loss(&hp, 3, 3, 0.5, None) - contrastive_loss(&hm, 3, 3, 0.5, None)) / 2e-6;
        assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
    }
}

#[test]
fn finetune_loss_is_sum_of_parts() {
    let f = fixture(6, true);
    let m: ModelState<f64> = small_model(&f, 8, 3);
    let r = finetune_loss(&m, &f.ft, 0.5).unwrap();
    let mle = mle_loss(&m, &f.ft, true).unwrap();
    let mut cl = 0.0;
    for seq in &f.ft {
        let tape =
            m.forward_tape(&seq.ids(), ForwardOptions { prompt: seq.instruction_index, ..Default::default() }).unwrap();
        let tp = seq.target_positions();
        let h: Vec<f64> = tp.iter().flat_map(|&p| tape.hidden_row(p + 1, 8).to_vec()).collect();
        cl += contrastive_loss(&h, tp.len(), 8, 0.5, None);
    }
    cl /= f.ft.len() as f64;
    assert!((r.mle - mle).abs() < 1e-9);
    assert!((r.cl - cl).abs() < 1e-9);
    assert!((r.ft - (mle + cl)).abs() < 1e-6);
    assert!(r.cl >= 0.0 && r.cl <= 0.5);
    let no_instr = f.pre[0].clone();
    assert!(finetune_loss(&m, &[no_instr], 0.5).is_err());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let f = fixture(4, false);
    let mut m: ModelState<f32> = small_model(&f, 8, 4);
    let before = m.clone();
    let cfg = OptimizerConfig { learning_rate: 0.0, batch_size: 2, epochs: 1, ..Default::default() };
    train(&mut m, &f.pre[..2], &cfg, &Objective::pretrain(), |_| {}).unwrap();
    assert_eq!(m, before);
}

#[test]
fn frozen_tensors_do_not_move() {
    let f = fixture(6, false);
    let mut m: ModelState<f32> = small_model(&f, 8, 5);
    m.set_trainable(|n| n.starts_with("prompt.e_r") || n.starts_with("prompt.mlp"));
    let before = m.clone();
    let cfg = OptimizerConfig { learning_rate: 1e-2, batch_size: 4, epochs: 3, ..Default::default() };
    train(&mut m, &f.ft, &cfg, &Objective::finetune(0.5), |_| {}).unwrap();
    let changed = changed_tensors(&before, &m);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("prompt.e_r") || n.starts_with("prompt.mlp")), "{changed:?}");
}

#[test]
fn overfits_small_set_and_is_deterministic() {
    let f = fixture(8, false);
    let data = &f.pre[..8];
    let cfg = OptimizerConfig {
        learning_rate: 3e-3,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 200,
        seed: 9,
        ..Default::default()
    };
    let mut a: ModelState<f32> = small_model(&f, 32, 6);
    let mut log = Vec::new();
    let s = train(&mut a, data, &cfg, &Objective::pretrain(), |r| log.push(*r)).unwrap();
    assert_eq!(s.epochs, 200);
    assert!(s.epoch_loss[199] < s.epoch_loss[0]);
    let end = mle_loss(&a, data, false).unwrap();
    assert!(end < 0.1, "final loss {end}");
    assert_eq!(log.len(), 400);
    assert!(log.iter().all(|r| (r.ft - (r.mle + r.cl)).abs() < 1e-6));

    let mut b: ModelState<f32> = small_model(&f, 32, 6);
    let cfg2 = OptimizerConfig { epochs: 5, ..cfg.clone() };
    let mut c = b.clone();
    train(&mut b, data, &cfg2, &Objective::pretrain(), |_| {}).unwrap();
    train(&mut c, data, &cfg2, &Objective::pretrain(), |_| {}).unwrap();
    assert_eq!(b, c);
}

#[test]
fn early_stop_on_target_perplexity() {
    let f = fixture(4, false);
    let mut m: ModelState<f32> = small_model(&f, 16, 7);
    let cfg = OptimizerConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        batch_size: 4,
        epochs: 300,
        target_ppl: Some(2.0),
        ..Default::default()
    };
    let s = train(&mut m, &f.pre[..4], &cfg, &Objective::pretrain(), |_| {}).unwrap();
    assert!(s.epochs < 300);
    assert!(*s.epoch_ppl.last().unwrap() <= 2.0);
    assert!(perplexity(&m, &f.pre[..4], false).unwrap() <= 2.0);
}

#[test]
fn divergence_restores_parameters() {
    let f = fixture(4, false);
    let mut m: ModelState<f32> = small_model(&f, 8, 8);
    let k = m.ix.lm_head;
    m.params[k].data[0] = f32::NAN;
    let before = m.clone();
    let cfg = OptimizerConfig { batch_size: 2, epochs: 1, ..Default::default() };
    let err = train(&mut m, &f.pre[..2], &cfg, &Objective::pretrain(), |_| {}).unwrap_err();
    assert_eq!(err, Error::Diverged { step: 1 });
    assert_eq!(m.params[1], before.params[1]);
    assert!(OptimizerConfig { margin: 3.0, ..Default::default() }.validate().is_err());
}

#[test]
fn gradient_check_full_model() {
    let f = fixture(3, false);
    let mut m: ModelState<f64> = small_model(&f, 8, 10);
    // At the default 0.02 embedding scale a 1e-3 step is not small relative
    // to what the first layer norm sees.
    for t in [m.ix.tok_emb, m.ix.pos_emb] {
        m.params[t].data.iter_mut().for_each(|x| *x *= 25.0);
    }
    assert!(m.param_count() <= 10_000, "{}", m.param_count());
    let batch = &f.ft[..2];
    let obj = Objective::finetune(0.5);
    let r = grad_check(&m, batch, &obj, 50, 11).unwrap();
    assert_eq!(r.probes.len(), 50);
    assert!(r.max_rel_err <= 1e-4, "{:?}", r.probes.iter().filter(|p| p.rel_err > 1e-4).collect::<Vec<_>>());
    // The E_r -> MLP -> h_p path explicitly.
    let t = m.tensor_index("prompt.e_r.0").unwrap();
    let idx = batch[0].instruction_index.unwrap() * 4;
    let w = m.tensor_index("prompt.mlp.fc.w").unwrap();
    let r = grad_check_at(&m, batch, &obj, &[(t, idx), (t, idx + 3), (w, 5)]).unwrap();
    assert!(r.probes.iter().all(|p| p.analytic != 0.0));
    assert!(r.max_rel_err <= 1e-4, "{:?}", r.probes);
}

#[test]
fn gradient_check_frozen_and_linear_head() {
    let f = fixture(3, false);
    let mut m: ModelState<f64> = small_model(&f, 8, 12);
    m.set_trainable(|n| n == "lm_head.w");
    let r = grad_check(&m, &f.pre[..2], &Objective::pretrain(), 40, 1).unwrap();
    assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
    let frozen: Vec<_> = r.probes.iter().filter(|p| p.frozen).collect();
    assert!(!frozen.is_empty());
    assert!(frozen.iter().all(|p| p.analytic == 0.0));
    assert!(frozen.iter().any(|p| p.numeric.abs() > 1e-6));
}
