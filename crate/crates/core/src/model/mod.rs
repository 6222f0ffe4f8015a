//! Decoder-only transformer with a neural prompt table.
//!
//! Parameters are a flat list of named tensors with a parallel freeze mask.
//! Instruction-token embeddings and prompt-table rows are stored per
//! registry segment (`instr_emb.{k}`, `prompt.e_r.{k}`) so extending the
//! registry adds tensors instead of growing frozen ones.

mod decoder;
mod forward;

pub use decoder::Decoder;
pub use forward::{ForwardOptions, Grads, Tape};

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::rng;
use crate::textproto::vocab::INSTR_BASE;
use crate::textproto::{InstructionRegistry, TokenId};

pub const LN_EPS: f64 = 1e-5;
pub const MAX_CONTEXT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    /// Instruction slots reserved in the vocabulary after the polarity tokens.
    pub instruction_slots: usize,
    /// Width `d'` of the prompt-table rows.
    pub prompt_dim: usize,
    /// Prompt vectors per instruction.
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            context_window: 256,
            vocab_size: 0,
            instruction_slots: 32,
            prompt_dim: 32,
            prompt_len: 1,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.prompt_dim == 0 {
            errs.push("layer, head, width and prompt dimensions must be positive".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(alloc::format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_window == 0 || self.context_window > MAX_CONTEXT {
            errs.push(alloc::format!("context_window must be in 1..={MAX_CONTEXT}"));
        }
        if self.prompt_len == 0 {
            errs.push("prompt_len must be at least 1".into());
        }
        if self.vocab_size < INSTR_BASE as usize + self.instruction_slots {
            errs.push(alloc::format!("vocab_size {} leaves no room for the special tokens", self.vocab_size));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count of the backbone and prompt table for `n_instr`
    /// registered instructions.
    pub fn param_count(&self, n_instr: usize) -> usize {
        let (d, f, v, c, l) = (self.d_model, self.d_ff, self.vocab_size, self.context_window, self.n_layers);
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let prompt = n_instr * self.prompt_dim + (self.prompt_dim * d + d) + (d * d + d);
        let slot = if self.prompt_len > 1 { self.prompt_len * d } else { 0 };
        v * d + c * d + l * block + 2 * d + d * v + n_instr * d + prompt + slot
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(Real::to_f64(*x))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Ix {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockIx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub lm_head: usize,
    pub instr_emb: Vec<usize>,
    pub e_r: Vec<usize>,
    pub p_fc_w: usize,
    pub p_fc_b: usize,
    pub p_out_w: usize,
    pub p_out_b: usize,
    pub slot: Option<usize>,
}

/// Backbone parameters, prompt table, registry and freeze mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: BackboneConfig,
    pub registry: InstructionRegistry,
    pub params: Vec<Tensor<T>>,
    /// `trainable[i]` applies to `params[i]`.
    pub trainable: Vec<bool>,
    pub(crate) ix: Ix,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Uniform with the given standard deviation.
    Uniform(f64),
}

fn init_tensor<T: Real>(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => alloc::vec![T::zero(); n],
        Init::Ones => alloc::vec![T::one(); n],
        Init::Uniform(std) => {
            let a = std * num_traits::Float::sqrt(3f64);
            let mut r = rng::stream(seed, name);
            (0..n).map(|_| T::from_f64(r.random_range(-a..a))).collect()
        }
    };
    Tensor { name: name.into(), shape: shape.to_vec(), data }
}

const EMB_STD: f64 = 0.02;

fn segment_tensors<T: Real>(cfg: &BackboneConfig, k: usize, rows: usize) -> [Tensor<T>; 2] {
    [
        init_tensor(cfg.seed, &alloc::format!("instr_emb.{k}"), &[rows, cfg.d_model], Init::Uniform(EMB_STD)),
        init_tensor(cfg.seed, &alloc::format!("prompt.e_r.{k}"), &[rows, cfg.prompt_dim], Init::Uniform(1.0)),
    ]
}

impl<T: Real> ModelState<T> {
    /// Seeded initialization; every tensor is trainable.
    pub fn init(config: BackboneConfig, registry: InstructionRegistry) -> Result<Self> {
        config.validate()?;
        if registry.len() > config.instruction_slots {
            return Err(Error::Config(alloc::format!(
                "{} instructions exceed {} slots",
                registry.len(),
                config.instruction_slots
            )));
        }
        let c = &config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let lin = |fan_in: usize| Init::Uniform(1.0 / num_traits::Float::sqrt(3.0 * fan_in as f64));
        let out_scale = Init::Uniform(1.0 / num_traits::Float::sqrt(3.0 * d as f64 * 2.0 * c.n_layers as f64));
        let mut p: Vec<Tensor<T>> = Vec::new();
        let mut t = |name: &str, shape: &[usize], init: Init| p.push(init_tensor(c.seed, name, shape, init));
        t("tok_emb", &[v, d], Init::Uniform(EMB_STD));
        t("pos_emb", &[c.context_window, d], Init::Uniform(EMB_STD));
        for l in 0..c.n_layers {
            let n = |s: &str| alloc::format!("blocks.{l}.{s}");
            t(&n("ln1.g"), &[d], Init::Ones);
            t(&n("ln1.b"), &[d], Init::Zeros);
            t(&n("attn.qkv.w"), &[d, 3 * d], lin(d));
            t(&n("attn.qkv.b"), &[3 * d], Init::Zeros);
            t(&n("attn.proj.w"), &[d, d], out_scale);
            t(&n("attn.proj.b"), &[d], Init::Zeros);
            t(&n("ln2.g"), &[d], Init::Ones);
            t(&n("ln2.b"), &[d], Init::Zeros);
            t(&n("mlp.fc.w"), &[d, f], lin(d));
            t(&n("mlp.fc.b"), &[f], Init::Zeros);
            t(
                &n("mlp.proj.w"),
                &[f, d],
                Init::Uniform(1.0 / num_traits::Float::sqrt(3.0 * f as f64 * 2.0 * c.n_layers as f64)),
            );
            t(&n("mlp.proj.b"), &[d], Init::Zeros);
        }
        t("ln_f.g", &[d], Init::Ones);
        t("ln_f.b", &[d], Init::Zeros);
        t("lm_head.w", &[d, v], lin(d));
        t("prompt.mlp.fc.w", &[c.prompt_dim, d], lin(c.prompt_dim));
        t("prompt.mlp.fc.b", &[d], Init::Zeros);
        t("prompt.mlp.out.w", &[d, d], lin(d));
        t("prompt.mlp.out.b", &[d], Init::Zeros);
        if c.prompt_len > 1 {
            t("prompt.slot", &[c.prompt_len, d], Init::Uniform(EMB_STD));
        }
        for (k, (s, e)) in registry.segment_ranges().into_iter().enumerate() {
            p.extend(segment_tensors(c, k, e - s));
        }
        let trainable = alloc::vec![true; p.len()];
        Self::from_parts(config, registry, p, trainable)
    }

    /// Reassembles a state from persisted parts, checking names and shapes.
    pub fn from_parts(
        config: BackboneConfig,
        registry: InstructionRegistry,
        params: Vec<Tensor<T>>,
        trainable: Vec<bool>,
    ) -> Result<Self> {
        config.validate()?;
        if trainable.len() != params.len() {
            return Err(Error::Shape("freeze mask length differs from parameter count".into()));
        }
        let find = |name: &str| -> Result<usize> {
            params
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::Shape(alloc::format!("missing tensor `{name}`")))
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut expect: Vec<(usize, Vec<usize>)> = Vec::new();
        let mut get = |name: &str, shape: &[usize]| -> Result<usize> {
            let i = find(name)?;
            expect.push((i, shape.to_vec()));
            Ok(i)
        };
        let tok_emb = get("tok_emb", &[v, d])?;
        let pos_emb = get("pos_emb", &[config.context_window, d])?;
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let n = |s: &str| alloc::format!("blocks.{l}.{s}");
            blocks.push(BlockIx {
                ln1_g: get(&n("ln1.g"), &[d])?,
                ln1_b: get(&n("ln1.b"), &[d])?,
                qkv_w: get(&n("attn.qkv.w"), &[d, 3 * d])?,
                qkv_b: get(&n("attn.qkv.b"), &[3 * d])?,
                proj_w: get(&n("attn.proj.w"), &[d, d])?,
                proj_b: get(&n("attn.proj.b"), &[d])?,
                ln2_g: get(&n("ln2.g"), &[d])?,
                ln2_b: get(&n("ln2.b"), &[d])?,
                fc_w: get(&n("mlp.fc.w"), &[d, f])?,
                fc_b: get(&n("mlp.fc.b"), &[f])?,
                out_w: get(&n("mlp.proj.w"), &[f, d])?,
                out_b: get(&n("mlp.proj.b"), &[d])?,
            });
        }
        let lnf_g = get("ln_f.g", &[d])?;
        let lnf_b = get("ln_f.b", &[d])?;
        let lm_head = get("lm_head.w", &[d, v])?;
        let p_fc_w = get("prompt.mlp.fc.w", &[config.prompt_dim, d])?;
        let p_fc_b = get("prompt.mlp.fc.b", &[d])?;
        let p_out_w = get("prompt.mlp.out.w", &[d, d])?;
        let p_out_b = get("prompt.mlp.out.b", &[d])?;
        let slot = if config.prompt_len > 1 { Some(get("prompt.slot", &[config.prompt_len, d])?) } else { None };
        let mut instr_emb = Vec::new();
        let mut e_r = Vec::new();
        for (k, (s, e)) in registry.segment_ranges().into_iter().enumerate() {
            instr_emb.push(get(&alloc::format!("instr_emb.{k}"), &[e - s, d])?);
            e_r.push(get(&alloc::format!("prompt.e_r.{k}"), &[e - s, config.prompt_dim])?);
        }
        if registry.len() > config.instruction_slots {
            return Err(Error::Config("registry exceeds the instruction slots".into()));
        }
        let mut used = alloc::vec![false; params.len()];
        for (i, shape) in &expect {
            let t = &params[*i];
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(alloc::format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name,
                    t.shape,
                    shape
                )));
            }
            if core::mem::replace(&mut used[*i], true) {
                return Err(Error::Shape(alloc::format!("tensor `{}` listed twice", t.name)));
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::Shape(alloc::format!("unexpected tensor `{}`", params[i].name)));
        }
        let ix = Ix {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
            instr_emb,
            e_r,
            p_fc_w,
            p_fc_b,
            p_out_w,
            p_out_b,
            slot,
        };
        Ok(Self { config, registry, params, trainable, ix })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|t| t.name == name)
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (t, m) in self.params.iter().zip(self.trainable.iter_mut()) {
            *m = pred(&t.name);
        }
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            registry: self.registry.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            ix: self.ix.clone(),
        }
    }

    /// Row `i` of the prompt table `E_r`.
    pub fn e_r_row(&self, i: usize) -> Result<&[T]> {
        let (seg, off) = self.registry.locate(i)?;
        let w = self.config.prompt_dim;
        Ok(&self.params[self.ix.e_r[seg]].data[off * w..(off + 1) * w])
    }

    /// Appends a registry segment for `new_tags` with freshly initialized
    /// instruction embeddings and prompt rows. The new tensors are trainable;
    /// every pre-existing tensor is frozen.
    pub fn extend_instructions(&mut self, new_tags: &[String]) -> Result<()> {
        if new_tags.is_empty() {
            return Ok(());
        }
        let mut registry = self.registry.clone();
        registry.extend(new_tags.iter().cloned())?;
        if registry.len() > self.config.instruction_slots {
            return Err(Error::Config(alloc::format!(
                "{} instructions exceed {} slots",
                registry.len(),
                self.config.instruction_slots
            )));
        }
        let ranges = registry.segment_ranges();
        let mut params = self.params.clone();
        let mut trainable = alloc::vec![false; params.len()];
        // An initially empty registry grows its first segment in place.
        let first_new = self.ix.e_r.len().min(ranges.len() - 1);
        for (k, &(s, e)) in ranges.iter().enumerate().skip(first_new) {
            for t in segment_tensors::<T>(&self.config, k, e - s) {
                match params.iter().position(|p| p.name == t.name) {
                    Some(i) => params[i] = t,
                    None => params.push(t),
                }
            }
        }
        trainable.resize(params.len(), false);
        for (i, p) in params.iter().enumerate() {
            let k = p.name.rsplit('.').next().and_then(|s| s.parse::<usize>().ok());
            if (p.name.starts_with("instr_emb.") || p.name.starts_with("prompt.e_r.")) && k >= Some(first_new) {
                trainable[i] = true;
            }
        }
        *self = Self::from_parts(self.config.clone(), registry, params, trainable)?;
        Ok(())
    }

    /// Token embedding row for `id`; instruction slots read the
    /// per-segment tables.
    pub(crate) fn embedding_row(&self, id: TokenId) -> Result<(usize, usize)> {
        let d = self.config.d_model;
        let i = id as usize;
        if i >= self.config.vocab_size {
            return Err(Error::Invalid(alloc::format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let base = INSTR_BASE as usize;
        if (base..base + self.config.instruction_slots).contains(&i) {
            let (seg, off) = self.registry.locate(i - base)?;
            return Ok((self.ix.instr_emb[seg], off * d));
        }
        Ok((self.ix.tok_emb, i * d))
    }

    /// Digest of the tensors the setup encoder reads. Store keys built with a
    /// different digest are stale.
    pub fn encoder_version(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.params {
            let enc = t.name == "tok_emb"
                || t.name == "pos_emb"
                || t.name.starts_with("blocks.")
                || t.name.starts_with("ln_f.");
            if !enc {
                continue;
            }
            for b in t.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for x in &t.data {
                for b in Real::to_f64(*x).to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        alloc::format!("mean-pool-{:016x}", h)
    }
}

#[cfg(test)]
mod tests;
