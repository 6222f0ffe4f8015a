//! Decoding: repeated top-k sampling, candidate clustering, and
//! minimum-perplexity selection; plus criteria-level and trial-level
//! generation requests.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::corpus::{Criterion, Polarity, TrialDocument};
use crate::embedstore::{encode_ids, encode_setup, KnowledgeStore};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, Real};
use crate::model::{Decoder, ForwardOptions, ModelState};
use crate::rng::{self, StreamRng};
use crate::textproto::vocab::*;
use crate::textproto::{parse_output, Assembler, Exemplar, ParsedOutput, Setup};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenerationConfig {
    /// `k_s`.
    pub top_k: usize,
    /// `Q`.
    pub candidates: usize,
    /// `k_q`.
    pub clusters: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { top_k: 50, candidates: 20, clusters: 5, max_new_tokens: 64, temperature: 1.0, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { top_k: 1, candidates: 1, clusters: 1, max_new_tokens, temperature: 1.0, seed: 0 }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let mut bad = Vec::new();
        if self.top_k == 0 || self.top_k > vocab_size {
            bad.push(alloc::format!("top_k must lie in 1..={vocab_size}"));
        }
        if self.candidates == 0 {
            bad.push("candidates must be positive".into());
        }
        if self.clusters == 0 || self.clusters > self.candidates {
            bad.push("k_q ≤ Q violated: clusters must lie in 1..=candidates".into());
        }
        if self.max_new_tokens == 0 {
            bad.push("max_new_tokens must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad.push("temperature must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// The `k` most probable tokens after temperature scaling, ties by lower id,
/// with renormalized probabilities. `-inf` logits are never chosen.
pub fn top_k_distribution(logits: &[f32], k: usize, temperature: f64) -> Vec<(TokenId, f64)> {
    let mut ids: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] != f32::NEG_INFINITY).collect();
    ids.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k.max(1));
    let scaled: Vec<f64> = ids.iter().map(|&i| logits[i] as f64 / temperature).collect();
    let lse = log_sum_exp(&scaled);
    ids.iter().zip(&scaled).map(|(&i, &s)| (i as TokenId, num_traits::Float::exp(s - lse))).collect()
}

/// One draw from the renormalized top-`k` distribution.
pub fn sample_step(logits: &[f32], k: usize, temperature: f64, rng: &mut StreamRng) -> TokenId {
    let dist = top_k_distribution(logits, k, temperature);
    if dist.len() == 1 {
        return dist[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return id;
        }
    }
    dist[dist.len() - 1].0
}

/// Tokens a decoder may emit: words, `<unk>` excluded, polarity and
/// criteria-block tokens, `<eos>`.
pub fn generatable(vocab: &Vocabulary) -> Vec<bool> {
    (0..vocab.len() as TokenId)
        .map(|id| match vocab.kind(id) {
            None => true,
            Some(SpecialKind::Polarity) => true,
            Some(SpecialKind::Structure) => matches!(id, INCS | INCS_END | EXCS | EXCS_END),
            Some(SpecialKind::Control) => id == EOS,
            Some(SpecialKind::Instruction) => false,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Candidate {
    /// Emitted ids, forced ones included, up to and including `<eos>`.
    pub ids: Vec<TokenId>,
    pub text: String,
    /// NLL of each sampled (not forced) token.
    pub nll: Vec<f64>,
    /// `exp(mean nll)`; `+inf` for an empty generation.
    pub ppl: f64,
    pub embedding: Vec<f32>,
    pub cluster: usize,
}

impl Candidate {
    /// Ids without the trailing `<eos>`.
    pub fn body(&self) -> &[TokenId] {
        match self.ids.last() {
            Some(&EOS) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Words forced right after the first criteria-block opener.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Forcing<'a> {
    pub prefix: &'a [TokenId],
}

/// `Q` independent rollouts from a decoder already fed with the prompt.
pub fn sample_candidates<T: Real>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    decoder: &Decoder<'_, T>,
    first_logits: &[T],
    cfg: &GenerationConfig,
    forcing: Forcing<'_>,
) -> Result<Vec<Candidate>> {
    cfg.validate(state.config.vocab_size)?;
    let mask = generatable(vocab);
    let root = rng::derive(cfg.seed, "candidates");
    let mut out = Vec::with_capacity(cfg.candidates);
    for q in 0..cfg.candidates {
        let mut rng = rng::stream_index(root, q as u64);
        let mut dec = decoder.clone();
        let mut logits: Vec<f32> = first_logits.iter().map(|x| Real::to_f64(*x) as f32).collect();
        let mut ids = Vec::new();
        let mut nll = Vec::new();
        let mut forced: Vec<TokenId> = Vec::new();
        let mut opened = false;
        while ids.len() < cfg.max_new_tokens {
            let id = if let Some(f) = (!forced.is_empty()).then(|| forced.remove(0)) {
                f
            } else {
                for (l, &ok) in logits.iter_mut().zip(&mask) {
                    if !ok {
                        *l = f32::NEG_INFINITY;
                    }
                }
                let id = sample_step(&logits, cfg.top_k, cfg.temperature, &mut rng);
                let scaled: Vec<f64> = logits.iter().map(|&l| l as f64).collect();
                nll.push(log_sum_exp(&scaled) - logits[id as usize] as f64);
                id
            };
            ids.push(id);
            if id == EOS {
                break;
            }
            if !opened && (id == INCS || id == EXCS) {
                opened = true;
                if !forcing.prefix.is_empty() {
                    forced.push(if id == INCS { INC } else { EXC });
                    forced.extend_from_slice(forcing.prefix);
                }
            }
            if dec.len() >= state.config.context_window {
                break;
            }
            logits = dec.feed(&[id])?.iter().map(|x| Real::to_f64(*x) as f32).collect();
        }
        let mut c =
            Candidate { text: vocab.detokenize(&ids), ids, ppl: f64::INFINITY, embedding: Vec::new(), cluster: 0, nll };
        let body = c.body().to_vec();
        if body.is_empty() || c.nll.is_empty() {
            c.embedding = alloc::vec![0.0; state.config.d_model];
        } else {
            let mean = c.nll.iter().sum::<f64>() / c.nll.len() as f64;
            c.ppl = num_traits::Float::exp(mean);
            c.embedding = encode_ids(state, &body)?;
        }
        out.push(c);
    }
    Ok(out)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assign: Vec<usize>,
    /// Clusters used, after lowering to the number of distinct points.
    pub k: usize,
    pub iterations: usize,
    /// Within-cluster sum of squares of the seeding assignment.
    pub initial_wcss: f64,
    pub wcss: f64,
}

/// k-means++ seeding then Lloyd iterations (≤ 100, or until every centroid
/// moves less than 1e-6). Ties go to the lowest centroid index.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64) -> Clustering {
    if points.is_empty() {
        return Clustering { assign: Vec::new(), k: 0, iterations: 0, initial_wcss: 0.0, wcss: 0.0 };
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|&x| x as f64).collect()).collect();
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in &pts {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    let k = k.clamp(1, distinct.len());
    let mut rng = rng::stream(seed, "kmeans");
    let mut centroids: Vec<Vec<f64>> = alloc::vec![pts[rng.random_range(0..pts.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> =
            pts.iter().map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        for (i, &x) in d.iter().enumerate() {
            if x > 0.0 && u < x {
                pick = i;
                break;
            }
            u -= x;
        }
        centroids.push(pts[pick].clone());
    }
    let assign_all = |centroids: &[Vec<f64>]| -> Vec<usize> {
        pts.iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (j, c) in centroids.iter().enumerate() {
                    let dd = dist2(p, c);
                    if dd < best.1 {
                        best = (j, dd);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut assign = assign_all(&centroids);
    let initial_wcss = wcss(points, &assign, k);
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        let dim = pts[0].len();
        let mut shift: f64 = 0.0;
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut m = alloc::vec![0.0; dim];
            for p in &members {
                for (a, b) in m.iter_mut().zip(p.iter()) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|x| *x /= members.len() as f64);
            shift = shift.max(num_traits::Float::sqrt(dist2(&m, c)));
            *c = m;
        }
        assign = assign_all(&centroids);
        if shift < 1e-6 {
            break;
        }
    }
    let wcss = wcss(points, &assign, k);
    Clustering { assign, k, iterations, initial_wcss, wcss }
}

/// Within-cluster sum of squares of an assignment.
pub fn wcss(points: &[Vec<f32>], assign: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<&Vec<f32>> = points.iter().zip(assign).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let dim = members[0].len();
        let mut m = alloc::vec![0.0f64; dim];
        for p in &members {
            for (a, &b) in m.iter_mut().zip(p.iter()) {
                *a += b as f64;
            }
        }
        m.iter_mut().for_each(|x| *x /= members.len() as f64);
        for p in &members {
            total += p.iter().zip(&m).map(|(&x, y)| (x as f64 - y) * (x as f64 - y)).sum::<f64>();
        }
    }
    total
}

/// Per cluster (in cluster order) the index of the minimum-ppl candidate,
/// ties by lower index. Clusters holding only empty generations are dropped.
pub fn select_candidates(candidates: &[Candidate]) -> Vec<usize> {
    let n_clusters = candidates.iter().map(|c| c.cluster + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for j in 0..n_clusters {
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.cluster == j && c.ppl.is_finite())
            .min_by(|a, b| a.1.ppl.partial_cmp(&b.1.ppl).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        match best {
            Some((i, _)) => out.push(i),
            None if candidates.iter().any(|c| c.cluster == j) => {
                log::warn!("cluster {j} has only empty generations; dropped");
            }
            None => {}
        }
    }
    out
}

/// Ablation switches shared by training-sequence assembly and generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct Variant {
    pub msr: bool,
    pub rag: bool,
    pub prompt: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self { msr: true, rag: true, prompt: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationReport {
    pub trial_id: String,
    pub instruction: Option<String>,
    /// Trial whose exemplar was placed in the prompt.
    pub exemplar_trial: Option<String>,
    pub candidates: Vec<Candidate>,
    pub selected: Vec<usize>,
    #[cfg_attr(feature = "serde", serde(skip))]
    pub outputs: Vec<ParsedOutput>,
}

impl GenerationReport {
    /// Target criteria of the selected outputs, in selection order.
    pub fn criteria(&self) -> Vec<Criterion> {
        self.outputs.iter().filter_map(|o| o.target.clone()).collect()
    }
}

/// Shared inputs of generation requests.
#[derive(Clone, Copy)]
pub struct Generator<'a, T: Real> {
    pub state: &'a ModelState<T>,
    pub assembler: Assembler<'a>,
    pub store: Option<&'a KnowledgeStore>,
    pub variant: Variant,
}

impl<'a, T: Real> Generator<'a, T> {
    fn exemplar(&self, trial: &TrialDocument, instruction: Option<&str>) -> Result<Option<(String, Exemplar)>> {
        let Some(store) = self.store.filter(|s| self.variant.rag && !s.is_empty()) else {
            if self.variant.rag {
                log::info!("no store entries; generating {} without an exemplar", trial.trial_id);
            }
            return Ok(None);
        };
        store.check_model(self.state)?;
        let q = encode_setup(self.state, &self.assembler, &trial.trial_id, &Setup::from(trial))?;
        let hits = match instruction {
            Some(tag) => store.retrieve_for(&q.vector, 1, Some(&trial.trial_id), tag),
            None => store.retrieve(&q.vector, 1, Some(&trial.trial_id)),
        };
        Ok(hits.first().map(|(e, _)| (e.trial_id.clone(), e.value.clone())))
    }

    /// Criteria-level request: sample, cluster, select, parse.
    pub fn generate_criteria(
        &self,
        trial: &TrialDocument,
        instruction: &str,
        cfg: &GenerationConfig,
        prefix: &[TokenId],
    ) -> Result<GenerationReport> {
        let window = self.state.config.context_window;
        let ex = self.exemplar(trial, Some(instruction))?;
        let budget = window.saturating_sub(cfg.max_new_tokens);
        let prompt =
            self.assembler.prompt(&Setup::from(trial), ex.as_ref().map(|e| &e.1), Some(instruction), budget)?;
        let opts = ForwardOptions {
            prompt: if self.variant.prompt { prompt.instruction_index } else { None },
            block_prompt_attention: false,
        };
        let mut dec = Decoder::new(self.state, opts)?;
        let first = dec.feed(&prompt.input_ids)?;
        let mut cands = sample_candidates(self.state, self.assembler.vocab, &dec, &first, cfg, Forcing { prefix })?;
        let points: Vec<Vec<f32>> = cands.iter().map(|c| c.embedding.clone()).collect();
        let clustering = kmeans(&points, cfg.clusters, rng::derive(cfg.seed, "clusters"));
        for (c, a) in cands.iter_mut().zip(clustering.assign) {
            c.cluster = a;
        }
        let selected = select_candidates(&cands);
        let outputs = selected.iter().map(|&i| parse_output(self.assembler.vocab, &cands[i].ids)).collect();
        Ok(GenerationReport {
            trial_id: trial.trial_id.clone(),
            instruction: Some(instruction.into()),
            exemplar_trial: ex.map(|e| e.0),
            candidates: cands,
            selected,
            outputs,
        })
    }

    /// Trial-level request: greedy decoding of the whole criteria list with
    /// no instruction and no neural prompt.
    pub fn generate_trial(&self, trial: &TrialDocument, max_new_tokens: usize) -> Result<GenerationReport> {
        let window = self.state.config.context_window;
        let ex = self.exemplar(trial, None)?.map(|(id, e)| {
            let mut chain = e.chain;
            chain.extend(e.target);
            (id, Exemplar { chain, instruction: None, target: None })
        });
        let max_new = max_new_tokens.min(window / 2).max(1);
        let prompt = self.assembler.prompt(&Setup::from(trial), ex.as_ref().map(|e| &e.1), None, window - max_new)?;
        let mut dec = Decoder::new(self.state, ForwardOptions::default())?;
        let first = dec.feed(&prompt.input_ids)?;
        let cfg = GenerationConfig::greedy(max_new);
        let cands = sample_candidates(self.state, self.assembler.vocab, &dec, &first, &cfg, Forcing::default())?;
        let outputs = alloc::vec![parse_output(self.assembler.vocab, &cands[0].ids)];
        Ok(GenerationReport {
            trial_id: trial.trial_id.clone(),
            instruction: None,
            exemplar_trial: ex.map(|e| e.0),
            candidates: cands,
            selected: alloc::vec![0],
            outputs,
        })
    }
}

/// Criteria of a trial-level output split by polarity.
pub fn split_by_polarity(criteria: &[Criterion]) -> (Vec<Criterion>, Vec<Criterion>) {
    criteria.iter().cloned().partition(|c| c.polarity == Polarity::Inclusion)
}

#[cfg(test)]
mod tests;
