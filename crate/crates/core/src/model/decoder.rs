//! Incremental decoding with a key/value cache.

use alloc::vec::Vec;

use super::forward::{layer_norm, linear, ForwardOptions};
use super::ModelState;
use crate::error::{Error, Result};
use crate::math::{gelu, gemm, Real, View, ViewMut};
use crate::textproto::TokenId;

/// Autoregressive decoder state. Cloning forks the cache, so a shared prompt
/// is processed once for many rollouts.
#[derive(Debug, Clone)]
pub struct Decoder<'a, T: Real> {
    state: &'a ModelState<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    n_prompt: usize,
    len: usize,
    block_prompt: bool,
    last_hidden: Vec<T>,
}

impl<'a, T: Real> Decoder<'a, T> {
    pub fn new(state: &'a ModelState<T>, opts: ForwardOptions) -> Result<Self> {
        let c = &state.config;
        let mut dec = Self {
            state,
            keys: alloc::vec![Vec::new(); c.n_layers],
            values: alloc::vec![Vec::new(); c.n_layers],
            n_prompt: 0,
            len: 0,
            block_prompt: opts.block_prompt_attention,
            last_hidden: Vec::new(),
        };
        if let Some(i) = opts.prompt {
            let hp = state.embed_instruction(i)?;
            dec.n_prompt = c.prompt_len;
            dec.run(hp, c.prompt_len)?;
        }
        Ok(dec)
    }

    /// Positions consumed so far, prompt included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Text tokens consumed so far.
    pub fn text_len(&self) -> usize {
        self.len - self.n_prompt
    }

    /// Final hidden state (after `ln_f`) of the last consumed position.
    pub fn last_hidden(&self) -> &[T] {
        &self.last_hidden
    }

    /// Consumes `ids` and returns the logits at the last of them.
    pub fn feed(&mut self, ids: &[TokenId]) -> Result<Vec<T>> {
        if ids.is_empty() {
            return Err(Error::Empty("decoder input"));
        }
        let c = &self.state.config;
        let d = c.d_model;
        if self.len + ids.len() > c.context_window {
            return Err(Error::ContextOverflow {
                segment: "generation",
                len: self.len + ids.len(),
                window: c.context_window,
            });
        }
        let p = &self.state.params;
        let pos = &p[self.state.ix.pos_emb].data;
        let t0 = self.text_len();
        let mut x = alloc::vec![T::zero(); ids.len() * d];
        for (k, &id) in ids.iter().enumerate() {
            let (ti, off) = self.state.embedding_row(id)?;
            for j in 0..d {
                x[k * d + j] = p[ti].data[off + j] + pos[(t0 + k) * d + j];
            }
        }
        self.run(x, ids.len())?;
        let v = c.vocab_size;
        let mut logits = alloc::vec![T::zero(); v];
        gemm(
            T::one(),
            View::new(&self.last_hidden, 1, d),
            View::new(&p[self.state.ix.lm_head].data, d, v),
            T::zero(),
            ViewMut::new(&mut logits, 1, v),
        );
        Ok(logits)
    }

    fn run(&mut self, mut x: Vec<T>, m: usize) -> Result<()> {
        let st = self.state;
        let c = &st.config;
        let (d, f, h) = (c.d_model, c.d_ff, c.n_heads);
        let dh = c.head_dim();
        let p = &st.params;
        let start = self.len;
        let total = start + m;
        let scale = T::from_f64(1.0 / num_traits::Float::sqrt(dh as f64));
        let mut xhat = alloc::vec![T::zero(); m * d];
        let mut rstd = alloc::vec![T::zero(); m];
        let mut a = alloc::vec![T::zero(); m * d];
        for (l, b) in st.ix.blocks.iter().enumerate() {
            layer_norm(&x, m, d, &p[b.ln1_g].data, &p[b.ln1_b].data, &mut xhat, &mut rstd, &mut a);
            let mut qkv = alloc::vec![T::zero(); m * 3 * d];
            linear(&a, m, d, &p[b.qkv_w].data, &p[b.qkv_b].data, 3 * d, &mut qkv);
            for r in 0..m {
                self.keys[l].extend_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                self.values[l].extend_from_slice(&qkv[r * 3 * d + 2 * d..(r + 1) * 3 * d]);
            }
            let mut o = alloc::vec![T::zero(); m * d];
            let mut s = alloc::vec![T::zero(); m * total];
            for hd in 0..h {
                let q = View::strided(&qkv[hd * dh..], m, dh, 3 * d);
                let k = View::strided(&self.keys[l][hd * dh..], total, dh, d);
                gemm(scale, q, k.t(), T::zero(), ViewMut::new(&mut s, m, total));
                for i in 0..m {
                    let abs = start + i;
                    let row = &mut s[i * total..(i + 1) * total];
                    let lo = if self.block_prompt && abs >= self.n_prompt { self.n_prompt } else { 0 };
                    let max = row[lo..=abs].iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for (j, v) in row.iter_mut().enumerate() {
                        if j < lo || j > abs {
                            *v = T::zero();
                        } else {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                let v = View::strided(&self.values[l][hd * dh..], total, dh, d);
                gemm(T::one(), View::new(&s, m, total), v, T::zero(), ViewMut::strided(&mut o[hd * dh..], m, dh, d));
            }
            gemm(
                T::one(),
                View::new(&o, m, d),
                View::new(&p[b.proj_w].data, d, d),
                T::one(),
                ViewMut::new(&mut x, m, d),
            );
            for r in 0..m {
                for j in 0..d {
                    x[r * d + j] += p[b.proj_b].data[j];
                }
            }
            layer_norm(&x, m, d, &p[b.ln2_g].data, &p[b.ln2_b].data, &mut xhat, &mut rstd, &mut a);
            let mut fpre = alloc::vec![T::zero(); m * f];
            linear(&a, m, d, &p[b.fc_w].data, &p[b.fc_b].data, f, &mut fpre);
            fpre.iter_mut().for_each(|z| *z = gelu(*z));
            gemm(
                T::one(),
                View::new(&fpre, m, f),
                View::new(&p[b.out_w].data, f, d),
                T::one(),
                ViewMut::new(&mut x, m, d),
            );
            for r in 0..m {
                for j in 0..d {
                    x[r * d + j] += p[b.out_b].data[j];
                }
            }
        }
        let last = &x[(m - 1) * d..m * d];
        let mut xh = alloc::vec![T::zero(); d];
        let mut rs = alloc::vec![T::zero(); 1];
        let mut hid = alloc::vec![T::zero(); d];
        layer_norm(last, 1, d, &p[st.ix.lnf_g].data, &p[st.ix.lnf_b].data, &mut xh, &mut rs, &mut hid);
        self.last_hidden = hid;
        self.len = total;
        Ok(())
    }
}
