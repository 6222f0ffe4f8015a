use super::*;
use crate::math::gelu;
use alloc::vec;

fn tiny(layers: usize, prompt_len: usize) -> BackboneConfig {
    BackboneConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        context_window: 32,
        vocab_size: INSTR_BASE as usize + 4 + 10,
        instruction_slots: 4,
        prompt_dim: 4,
        prompt_len,
        seed: 3,
    }
}

fn registry() -> InstructionRegistry {
    InstructionRegistry::new(["age", "bmi"]).unwrap()
}

fn model(layers: usize, p: usize) -> ModelState<f64> {
    ModelState::init(tiny(layers, p), registry()).unwrap()
}

const W0: TokenId = INSTR_BASE + 4;

#[test]
fn init_is_deterministic_and_counted() {
    let a = model(2, 1);
    assert_eq!(a, model(2, 1));
    assert_eq!(a.param_count(), a.config.param_count(2));
    // Closed form written out for this config.
    let (v, d, f, c, dp) = (31usize, 8usize, 16usize, 32usize, 4usize);
    let block = 4 * d + 3 * d * d + 3 * d + d * d + d + d * f + f + f * d + d;
    let expect = v * d + c * d + 2 * block + 2 * d + d * v + 2 * d + 2 * dp + dp * d + d + d * d + d;
    assert_eq!(a.param_count(), expect);
    assert!(a.trainable.iter().all(|&t| t));
    let mut c2 = tiny(1, 3);
    c2.seed = 4;
    assert_ne!(ModelState::<f64>::init(c2.clone(), registry()).unwrap().params[0], a.params[0]);
    assert_eq!(ModelState::<f64>::init(c2, registry()).unwrap().param_count(), tiny(1, 3).param_count(2));
    let bad = BackboneConfig { d_model: 127, n_heads: 4, ..tiny(1, 1) };
    assert!(matches!(ModelState::<f32>::init(bad, registry()), Err(Error::Config(_))));
}

#[test]
fn zero_prompt_row_gives_zero_prompt() {
    let mut m = model(1, 1);
    let i = m.ix.e_r[0];
    m.params[i].data.iter_mut().for_each(|x| *x = 0.0);
    for name in ["prompt.mlp.fc.b", "prompt.mlp.out.b"] {
        let k = m.tensor_index(name).unwrap();
        m.params[k].data.iter_mut().for_each(|x| *x = 0.0);
    }
    assert!(m.embed_instruction(1).unwrap().iter().all(|&x| x == 0.0));
    let m = model(1, 1);
    assert_eq!(m.embed_instruction(0).unwrap(), m.embed_instruction(0).unwrap());
    assert_eq!(m.embed_instruction(2), Err(Error::InstructionIndex { index: 2, len: 2 }));
}

#[test]
fn prompt_gradient_matches_finite_differences() {
    for p in [1, 3] {
        let m = model(1, p);
        let idx = 1;
        let hp = m.embed_instruction(idx).unwrap();
        let dhp: Vec<f64> = hp.iter().map(|&x| 2.0 * x).collect();
        let mut g = Grads::zeros(&m);
        m.embed_instruction_backward(idx, &dhp, &mut g).unwrap();
        let t = m.ix.e_r[0];
        let dp = m.config.prompt_dim;
        for j in 0..dp {
            let k = idx * dp + j;
            let f = |delta: f64| {
                let mut mm = m.clone();
                mm.params[t].data[k] += delta;
                mm.embed_instruction(idx).unwrap().iter().map(|x| x * x).sum::<f64>()
            };
            let fd = (f(1e-3) - f(-1e-3)) / 2e-3;
            let an = g.data[t][k];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4, "{fd} vs {an}");
        }
    }
}

#[test]
fn prompt_shifts_output_by_p() {
    for p in [1, 3] {
        let m = model(1, p);
        let ids = [W0, W0 + 1, W0 + 2];
        let v = m.config.vocab_size;
        let plain = m.forward(&ids, ForwardOptions::default()).unwrap();
        let prompted = m.forward(&ids, ForwardOptions { prompt: Some(0), ..Default::default() }).unwrap();
        assert_eq!(plain.len(), 3 * v);
        assert_eq!(prompted.len(), (3 + p) * v);
    }
}

#[test]
fn causal_masking() {
    let m = model(2, 1);
    let v = m.config.vocab_size;
    let a = m.forward(&[W0, W0 + 1, W0 + 2, W0 + 3], ForwardOptions::default()).unwrap();
    let b = m.forward(&[W0, W0 + 1, W0 + 5, W0 + 3], ForwardOptions::default()).unwrap();
    assert_eq!(a[..2 * v], b[..2 * v]);
    assert_ne!(a[2 * v..3 * v], b[2 * v..3 * v]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let m = model(1, 1);
    let v = m.config.vocab_size;
    let logits = m.forward(&[W0, W0 + 1], ForwardOptions::default()).unwrap();
    for row in logits.chunks(v) {
        let mut r = row.to_vec();
        crate::math::softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ablated_zero_prompt_leaves_text_logits_unchanged() {
    let mut m = model(2, 2);
    for name in ["prompt.e_r.0", "prompt.mlp.fc.b", "prompt.mlp.out.b", "prompt.slot"] {
        let k = m.tensor_index(name).unwrap();
        m.params[k].data.iter_mut().for_each(|x| *x = 0.0);
    }
    let ids = [W0, W0 + 3, W0 + 1];
    let v = m.config.vocab_size;
    let plain = m.forward(&ids, ForwardOptions::default()).unwrap();
    let opts = ForwardOptions { prompt: Some(1), block_prompt_attention: true };
    let prompted = m.forward(&ids, opts).unwrap();
    for (a, b) in plain.iter().zip(&prompted[2 * v..]) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Independent scalar forward for a one-layer model.
fn oracle_logits(m: &ModelState<f64>, ids: &[TokenId]) -> Vec<Vec<f64>> {
    let c = &m.config;
    let (d, f, h, v) = (c.d_model, c.d_ff, c.n_heads, c.vocab_size);
    let dh = d / h;
    let t = |n: &str| &m.tensor(n).unwrap().data;
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        (0..d).map(|j| (x[j] - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
    };
    let mat = |x: &[f64], w: &[f64], b: Option<&[f64]>, din: usize, dout: usize| -> Vec<f64> {
        (0..dout).map(|o| (0..din).map(|i| x[i] * w[i * dout + o]).sum::<f64>() + b.map_or(0.0, |b| b[o])).collect()
    };
    let xs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| (0..d).map(|j| t("tok_emb")[id as usize * d + j] + t("pos_emb")[p * d + j]).collect())
        .collect();
    let a1: Vec<Vec<f64>> = xs.iter().map(|x| ln(x, t("blocks.0.ln1.g"), t("blocks.0.ln1.b"))).collect();
    let qkv: Vec<Vec<f64>> =
        a1.iter().map(|a| mat(a, t("blocks.0.attn.qkv.w"), Some(t("blocks.0.attn.qkv.b")), d, 3 * d)).collect();
    let n = ids.len();
    let mut out = Vec::new();
    for i in 0..n {
        let mut o = vec![0.0; d];
        for hd in 0..h {
            let q = &qkv[i][hd * dh..(hd + 1) * dh];
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q.iter().zip(&qkv[j][d + hd * dh..d + (hd + 1) * dh]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for j in 0..=i {
                let w = (scores[j] - mx).exp() / z;
                for k in 0..dh {
                    o[hd * dh + k] += w * qkv[j][2 * d + hd * dh + k];
                }
            }
        }
        let proj = mat(&o, t("blocks.0.attn.proj.w"), Some(t("blocks.0.attn.proj.b")), d, d);
        let xm: Vec<f64> = (0..d).map(|j| xs[i][j] + proj[j]).collect();
        let a2 = ln(&xm, t("blocks.0.ln2.g"), t("blocks.0.ln2.b"));
        let hid: Vec<f64> =
            mat(&a2, t("blocks.0.mlp.fc.w"), Some(t("blocks.0.mlp.fc.b")), d, f).into_iter().map(gelu).collect();
        let mo = mat(&hid, t("blocks.0.mlp.proj.w"), Some(t("blocks.0.mlp.proj.b")), f, d);
        let xo: Vec<f64> = (0..d).map(|j| xm[j] + mo[j]).collect();
        let hf = ln(&xo, t("ln_f.g"), t("ln_f.b"));
        out.push(mat(&hf, t("lm_head.w"), None, d, v));
    }
    out
}

#[test]
fn forward_matches_scalar_oracle() {
    let m = model(1, 1);
    let ids = [W0 + 2, TokenId::from(5u8), W0 + 7];
    let got = m.forward(&ids, ForwardOptions::default()).unwrap();
    let want = oracle_logits(&m, &ids);
    let v = m.config.vocab_size;
    for (i, row) in want.iter().enumerate() {
        for (a, b) in row.iter().zip(&got[i * v..(i + 1) * v]) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn instruction_tokens_read_segment_tables() {
    let m = model(1, 1);
    let e = m.tensor("instr_emb.0").unwrap().data[8..16].to_vec();
    let (t, off) = m.embedding_row(INSTR_BASE + 1).unwrap();
    assert_eq!(&m.params[t].data[off..off + 8], &e[..]);
    assert!(m.forward(&[INSTR_BASE + 3], ForwardOptions::default()).is_err());
}

#[test]
fn context_overflow_names_segment() {
    let m = model(1, 1);
    let ids = vec![W0; 32];
    assert!(m.forward(&ids, ForwardOptions::default()).is_ok());
    let err = m.forward(&ids, ForwardOptions { prompt: Some(0), ..Default::default() }).unwrap_err();
    assert_eq!(err, Error::ContextOverflow { segment: "text", len: 33, window: 32 });
}

#[test]
fn decoder_matches_full_forward() {
    let m = model(2, 2);
    let ids = [W0, W0 + 4, INSTR_BASE, W0 + 1, W0 + 9, W0 + 2];
    let v = m.config.vocab_size;
    for opts in [ForwardOptions::default(), ForwardOptions { prompt: Some(1), block_prompt_attention: false }] {
        let full = m.forward(&ids, opts).unwrap();
        let np = if opts.prompt.is_some() { 2 } else { 0 };
        let mut dec = Decoder::new(&m, opts).unwrap();
        let mut last = dec.feed(&ids[..3]).unwrap();
        let row = |p: usize| &full[(np + p) * v..(np + p + 1) * v];
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(&last, row(2)));
        let fork = dec.clone();
        for (p, &id) in ids.iter().enumerate().skip(3) {
            last = dec.feed(&[id]).unwrap();
            assert!(close(&last, row(p)));
        }
        assert_eq!(fork.text_len(), 3);
        assert_eq!(dec.text_len(), ids.len());
    }
}

#[test]
fn extension_adds_segments_and_freezes_old_tensors() {
    let mut m = model(1, 1);
    let before = m.clone();
    m.extend_instructions(&[]).unwrap();
    assert_eq!(m, before);
    m.extend_instructions(&["nyha".into(), "ecog".into()]).unwrap();
    assert_eq!(m.registry.len(), 4);
    assert_eq!(m.registry.frozen_prefix_len(), 2);
    for i in 0..2 {
        assert_eq!(m.e_r_row(i).unwrap(), before.e_r_row(i).unwrap());
    }
    let trainable: Vec<&str> =
        m.params.iter().zip(&m.trainable).filter(|(_, &t)| t).map(|(p, _)| p.name.as_str()).collect();
    assert_eq!(trainable, ["instr_emb.1", "prompt.e_r.1"]);
    assert_eq!(m.tensor("prompt.e_r.1").unwrap().shape, [2, 4]);
    assert_eq!(m.encoder_version(), before.encoder_version());
    assert!(m.extend_instructions(&["age".into()]).is_err());
    assert!(m.extend_instructions(&["a".into(), "b".into(), "c".into()]).is_err());
    let back =
        ModelState::from_parts(m.config.clone(), m.registry.clone(), m.params.clone(), m.trainable.clone()).unwrap();
    assert_eq!(back, m);
}
