//! Losses, the AdamW optimizer, training loops, and finite-difference
//! gradient verification.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_at, GradCheckReport, Probe};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, Real};
use crate::model::{ForwardOptions, Grads, ModelState, Tensor};
use crate::rng;
use crate::textproto::PromptSequence;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Contrastive margin ρ.
    pub margin: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once an epoch's pooled training perplexity reaches this value.
    pub target_ppl: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 5,
            seed: 0,
            margin: 0.5,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            target_ppl: None,
        }
    }
}

impl OptimizerConfig {
    /// Recorded pretraining hyperparameters.
    pub fn published_pretrain() -> Self {
        Self::default()
    }

    /// Recorded finetuning hyperparameters.
    pub fn published_finetune() -> Self {
        Self { batch_size: 16, weight_decay: 1e-5, epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive");
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive");
        }
        if !(self.margin >= 0.0 && self.margin <= 2.0) {
            bad.push("margin must lie in [0, 2]");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            bad.push("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            bad.push("eps must be positive");
        }
        if matches!(self.target_ppl, Some(p) if p.is_nan() || p < 1.0) {
            bad.push("target_ppl must be at least 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Which terms enter the loss and how sequences are conditioned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Prepend the neural prompt of each sequence's instruction.
    pub use_prompt: bool,
    /// Add the contrastive term over target-token states.
    pub contrastive: bool,
    pub margin: f64,
}

impl Objective {
    /// MLE only, no neural prompt.
    pub fn pretrain() -> Self {
        Self { use_prompt: false, contrastive: false, margin: 0.0 }
    }

    /// MLE plus contrastive, conditioned on the neural prompt.
    pub fn finetune(margin: f64) -> Self {
        Self { use_prompt: true, contrastive: true, margin }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub step: usize,
    pub mle: f64,
    pub cl: f64,
    pub ft: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Summed token NLL of the batch, for pooled perplexity.
    pub nll_sum: f64,
    pub tokens: usize,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} l_mle={:.6} l_cl={:.6} l_ft={:.6} grad_norm={:.6} lr={:e}",
            self.step, self.mle, self.cl, self.ft, self.grad_norm, self.lr
        )
    }
}

/// Negative log-likelihood of `target` under `logits`, and optionally the
/// gradient `softmax - onehot` scaled by `scale`.
pub fn token_nll<T: Real>(logits: &[T], target: usize, grad: Option<(&mut [T], T)>) -> T {
    let lse = log_sum_exp(logits);
    if let Some((g, scale)) = grad {
        for (gi, &l) in g.iter_mut().zip(logits) {
            *gi = (l - lse).exp() * scale;
        }
        g[target] -= scale;
    }
    lse - logits[target]
}

/// Margin loss over `n` rows of `hidden` (`n × d`): the mean over ordered
/// pairs `l ≠ j` of `max(0, ρ - 1 + cos(h_l, h_j))`. Returns the loss and,
/// when `grad` is given, accumulates `scale · ∂loss/∂hidden` into it.
pub fn contrastive_loss<T: Real>(hidden: &[T], n: usize, d: usize, margin: f64, grad: Option<(&mut [T], T)>) -> T {
    if n < 2 {
        log::warn!("contrastive loss over {n} states has no pairs");
        return T::zero();
    }
    let rho = T::from_f64(margin);
    let mut unit = alloc::vec![T::zero(); n * d];
    let mut norms = alloc::vec![T::zero(); n];
    for r in 0..n {
        let row = &hidden[r * d..(r + 1) * d];
        let nr = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::from_f64(1e-12));
        norms[r] = nr;
        for j in 0..d {
            unit[r * d + j] = row[j] / nr;
        }
    }
    let pairs = T::from_f64((n * (n - 1)) as f64);
    let mut total = T::zero();
    let mut du = alloc::vec![T::zero(); if grad.is_some() { n * d } else { 0 }];
    for l in 0..n {
        for j in (l + 1)..n {
            let (ul, uj) = (&unit[l * d..(l + 1) * d], &unit[j * d..(j + 1) * d]);
            let s = ul.iter().zip(uj).map(|(&a, &b)| a * b).sum::<T>();
            let term = rho - T::one() + s;
            if term > T::zero() {
                // (l, j) and (j, l) contribute the same term.
                total += term + term;
                if !du.is_empty() {
                    let two = T::from_f64(2.0);
                    for k in 0..d {
                        du[l * d + k] += two * uj[k];
                        du[j * d + k] += two * ul[k];
                    }
                }
            }
        }
    }
    if let Some((g, scale)) = grad {
        let c = scale / pairs;
        for r in 0..n {
            let u = &unit[r * d..(r + 1) * d];
            let dur = &du[r * d..(r + 1) * d];
            let proj = u.iter().zip(dur).map(|(&a, &b)| a * b).sum::<T>();
            for k in 0..d {
                g[r * d + k] += c * (dur[k] - u[k] * proj) / norms[r];
            }
        }
    }
    total / pairs
}

fn forward_options(seq: &PromptSequence, obj: &Objective) -> Result<ForwardOptions> {
    let prompt = if obj.use_prompt {
        Some(
            seq.instruction_index
                .ok_or_else(|| Error::Invalid("sequence has no instruction for the neural prompt".into()))?,
        )
    } else {
        None
    };
    Ok(ForwardOptions { prompt, block_prompt_attention: false })
}

/// Batch loss under `obj`. When `grads` is given, the gradient of `L_FT`
/// is accumulated into it.
pub fn batch_loss<T: Real>(
    state: &ModelState<T>,
    batch: &[PromptSequence],
    obj: &Objective,
    mut grads: Option<&mut Grads<T>>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (d, v) = (state.config.d_model, state.config.vocab_size);
    let inv_b = T::from_f64(1.0 / batch.len() as f64);
    let mut mle = 0.0;
    let mut cl = 0.0;
    let mut nll_sum = 0.0;
    let mut tokens = 0;
    for seq in batch {
        let lp = seq.loss_positions();
        if lp.is_empty() {
            return Err(Error::EmptyMask);
        }
        let opts = forward_options(seq, obj)?;
        let tape = state.forward_tape(&seq.ids(), opts)?;
        let np = tape.n_prompt;
        let positions: Vec<usize> = lp.iter().map(|&(p, _)| p + np).collect();
        let logits = state.logits_at(&tape, &positions);
        let scale = inv_b / T::from_f64(lp.len() as f64);
        let mut dlogits = if grads.is_some() { alloc::vec![T::zero(); logits.len()] } else { Vec::new() };
        let mut seq_nll = 0.0;
        for (r, &(_, next)) in lp.iter().enumerate() {
            let row = &logits[r * v..(r + 1) * v];
            let g = if dlogits.is_empty() { None } else { Some((&mut dlogits[r * v..(r + 1) * v], scale)) };
            seq_nll += token_nll(row, next as usize, g).to_f64();
        }
        nll_sum += seq_nll;
        tokens += lp.len();
        mle += seq_nll / lp.len() as f64;

        let mut dhidden = Vec::new();
        if obj.contrastive {
            let tp = seq.target_positions();
            let mut h = Vec::with_capacity(tp.len() * d);
            for &p in &tp {
                h.extend_from_slice(tape.hidden_row(p + np, d));
            }
            let mut dh = if grads.is_some() { alloc::vec![T::zero(); tp.len() * d] } else { Vec::new() };
            let g = if dh.is_empty() { None } else { Some((dh.as_mut_slice(), inv_b)) };
            cl += contrastive_loss(&h, tp.len(), d, obj.margin, g).to_f64();
            if !dh.is_empty() {
                dhidden = alloc::vec![T::zero(); tape.len * d];
                for (r, &p) in tp.iter().enumerate() {
                    dhidden[(p + np) * d..(p + np + 1) * d].copy_from_slice(&dh[r * d..(r + 1) * d]);
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            state.backward(&tape, &positions, &dlogits, &dhidden, g);
        }
    }
    let n = batch.len() as f64;
    let (mle, cl) = (mle / n, cl / n);
    Ok(LossReport { mle, cl, ft: mle + cl, nll_sum, tokens, ..Default::default() })
}

/// `L_MLE`: batch mean of per-sequence mean token NLL.
pub fn mle_loss<T: Real>(state: &ModelState<T>, batch: &[PromptSequence], use_prompt: bool) -> Result<f64> {
    let obj = Objective { use_prompt, contrastive: false, margin: 0.0 };
    Ok(batch_loss(state, batch, &obj, None)?.mle)
}

/// `L_FT = L_MLE + L_CL` with the neural prompt enabled.
pub fn finetune_loss<T: Real>(state: &ModelState<T>, batch: &[PromptSequence], margin: f64) -> Result<LossReport> {
    batch_loss(state, batch, &Objective::finetune(margin), None)
}

/// Pooled perplexity `exp(Σ nll / Σ tokens)` over a dataset.
pub fn perplexity<T: Real>(state: &ModelState<T>, data: &[PromptSequence], use_prompt: bool) -> Result<f64> {
    let obj = Objective { use_prompt, contrastive: false, margin: 0.0 };
    let (mut nll, mut tok) = (0.0, 0usize);
    for chunk in data.chunks(32) {
        let r = batch_loss(state, chunk, &obj, None)?;
        nll += r.nll_sum;
        tok += r.tokens;
    }
    if tok == 0 {
        return Err(Error::Empty("dataset"));
    }
    Ok(Float::exp(nll / tok as f64))
}

/// AdamW with decoupled weight decay on matrices and a fixed learning rate.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(state: &ModelState<T>) -> Self {
        let z = |i: usize| {
            if state.trainable[i] {
                alloc::vec![T::zero(); state.params[i].len()]
            } else {
                Vec::new()
            }
        };
        let n = state.params.len();
        Self { m: (0..n).map(z).collect(), v: (0..n).map(z).collect(), t: 0 }
    }

    pub fn step(&mut self, state: &mut ModelState<T>, grads: &Grads<T>, cfg: &OptimizerConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - Float::powi(b1, self.t);
        let bc2 = 1.0 - Float::powi(b2, self.t);
        let lr = T::from_f64(cfg.learning_rate);
        let step = T::from_f64(cfg.learning_rate / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
        let eps = T::from_f64(cfg.eps);
        let wd = T::from_f64(cfg.weight_decay);
        for (i, p) in state.params.iter_mut().enumerate() {
            let g = &grads.data[i];
            if !state.trainable[i] || g.is_empty() {
                continue;
            }
            let decay = p.shape.len() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                if decay {
                    let x = p.data[k];
                    p.data[k] = x - lr * wd * x;
                }
                p.data[k] -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    /// Pooled training perplexity of each epoch, accumulated during the epoch.
    pub epoch_ppl: Vec<f64>,
    pub epoch_loss: Vec<f64>,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch AdamW over `data`.
///
/// On a non-finite loss or gradient the parameters from before the last
/// update are restored and [`Error::Diverged`] is returned.
pub fn train<T: Real>(
    state: &mut ModelState<T>,
    data: &[PromptSequence],
    cfg: &OptimizerConfig,
    obj: &Objective,
    mut on_step: impl FnMut(&LossReport),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !state.trainable.iter().any(|&t| t) {
        return Err(Error::Invalid("no trainable tensors".into()));
    }
    let mut opt = AdamW::new(state);
    let mut grads = Grads::zeros(state);
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let shuffle_seed = rng::derive(cfg.seed, "shuffle");
    let mut last_good: Vec<Tensor<T>> = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream_index(shuffle_seed, epoch as u64));
        let (mut nll, mut tok, mut loss_sum, mut n_batches) = (0.0, 0usize, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data[i].clone()));
            grads.clear();
            let mut report = batch_loss(state, &batch, obj, Some(&mut grads))?;
            let norm = grads.norm().to_f64();
            summary.steps += 1;
            report.step = summary.steps;
            report.grad_norm = norm;
            report.lr = cfg.learning_rate;
            if !report.ft.is_finite() || !norm.is_finite() {
                if !last_good.is_empty() {
                    for (p, g) in state.params.iter_mut().zip(last_good) {
                        *p = g;
                    }
                }
                log::error!("training diverged at step {}", summary.steps);
                return Err(Error::Diverged { step: summary.steps });
            }
            if norm > cfg.clip_norm {
                grads.scale(T::from_f64(cfg.clip_norm / norm));
            }
            on_step(&report);
            nll += report.nll_sum;
            tok += report.tokens;
            loss_sum += report.ft;
            n_batches += 1;
            last_good.clone_from(&state.params);
            opt.step(state, &grads, cfg);
        }
        let ppl = Float::exp(nll / tok as f64);
        summary.epochs = epoch + 1;
        summary.epoch_ppl.push(ppl);
        summary.epoch_loss.push(loss_sum / n_batches as f64);
        log::info!("epoch {} ppl {:.4} loss {:.4}", epoch + 1, ppl, loss_sum / n_batches as f64);
        if matches!(cfg.target_ppl, Some(t) if ppl <= t) {
            break;
        }
    }
    Ok(summary)
}

/// Names of tensors whose contents differ between two states of the same
/// architecture, in parameter order.
pub fn changed_tensors<T: Real>(before: &ModelState<T>, after: &ModelState<T>) -> Vec<String> {
    after
        .params
        .iter()
        .filter(|t| before.tensor(&t.name).is_none_or(|b| b.data != t.data || b.shape != t.shape))
        .map(|t| t.name.clone())
        .collect()
}

#[cfg(test)]
mod tests;
