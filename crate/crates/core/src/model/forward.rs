//! Full-sequence forward pass with an activation tape, and its backward pass.

use alloc::vec::Vec;

use super::{ModelState, LN_EPS};
use crate::error::{Error, Result};
use crate::math::{gelu, gelu_grad, gemm, Real, View, ViewMut};
use crate::textproto::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Registry index whose neural prompt is prepended.
    pub prompt: Option<usize>,
    /// Text positions may not attend to prompt positions.
    pub block_prompt_attention: bool,
}

/// Per-tensor gradients; frozen tensors have empty buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub data: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros(state: &ModelState<T>) -> Self {
        let data = state
            .params
            .iter()
            .zip(&state.trainable)
            .map(|(t, &tr)| if tr { alloc::vec![T::zero(); t.len()] } else { Vec::new() })
            .collect();
        Self { data }
    }

    pub fn clear(&mut self) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.data {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> T {
        self.data.iter().flat_map(|g| g.iter()).map(|&x| x * x).sum::<T>().sqrt()
    }

    fn get(&mut self, i: usize) -> Option<&mut [T]> {
        let g = &mut self.data[i];
        if g.is_empty() {
            None
        } else {
            Some(g.as_mut_slice())
        }
    }
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    ln1_xhat: Vec<T>,
    ln1_rstd: Vec<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    ln2_xhat: Vec<T>,
    ln2_rstd: Vec<T>,
    a2: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

#[derive(Debug, Clone)]
struct PromptTape<T> {
    index: usize,
    e: Vec<T>,
    act: Vec<T>,
}

/// Activations of one forward pass, consumed by [`ModelState::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub ids: Vec<TokenId>,
    /// Prompt positions prepended before the text.
    pub n_prompt: usize,
    /// Total positions (`n_prompt + ids.len()`).
    pub len: usize,
    layers: Vec<LayerTape<T>>,
    lnf_xhat: Vec<T>,
    lnf_rstd: Vec<T>,
    /// Final hidden states after `ln_f`, `len × d`.
    pub hidden: Vec<T>,
    prompt: Option<PromptTape<T>>,
}

impl<T: Real> Tape<T> {
    pub fn hidden_row(&self, pos: usize, d: usize) -> &[T] {
        &self.hidden[pos * d..(pos + 1) * d]
    }
}

pub(crate) fn linear<T: Real>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize, out: &mut [T]) {
    for r in 0..rows {
        out[r * dout..(r + 1) * dout].copy_from_slice(b);
    }
    gemm(T::one(), View::new(x, rows, din), View::new(w, din, dout), T::one(), ViewMut::new(out, rows, dout));
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm<T: Real>(
    x: &[T],
    rows: usize,
    d: usize,
    g: &[T],
    b: &[T],
    xhat: &mut [T],
    rstd: &mut [T],
    y: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
}

/// Adds the input gradient of a layer norm to `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    rows: usize,
    d: usize,
    dx: &mut [T],
    mut dg: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            let t = dyr[j] * g[j];
            m1 += t;
            m2 += t * xh[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for j in 0..d {
            dx[r * d + j] += rstd[r] * (dyr[j] * g[j] - m1 - xh[j] * m2);
        }
        if let Some(dg) = dg.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
    }
}

/// Weight and bias gradients of `y = x W + b`, and optionally `dx += dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_back<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dw {
        gemm(T::one(), View::new(x, rows, din).t(), View::new(dy, rows, dout), T::one(), ViewMut::new(dw, din, dout));
    }
    if let Some(db) = db {
        for r in 0..rows {
            for j in 0..dout {
                db[j] += dy[r * dout + j];
            }
        }
    }
    if let Some(dx) = dx {
        gemm(T::one(), View::new(dy, rows, dout), View::new(w, din, dout).t(), T::one(), ViewMut::new(dx, rows, din));
    }
}

impl<T: Real> ModelState<T> {
    /// Neural prompt `h_p` for registry index `i`, `P × d` row-major.
    pub fn embed_instruction(&self, i: usize) -> Result<Vec<T>> {
        Ok(self.prompt_forward(i)?.0)
    }

    fn prompt_forward(&self, i: usize) -> Result<(Vec<T>, PromptTape<T>)> {
        let c = &self.config;
        let (d, dp) = (c.d_model, c.prompt_dim);
        let e = self.e_r_row(i)?.to_vec();
        let p = &self.params;
        let mut act = alloc::vec![T::zero(); d];
        linear(&e, 1, dp, &p[self.ix.p_fc_w].data, &p[self.ix.p_fc_b].data, d, &mut act);
        act.iter_mut().for_each(|x| *x = x.tanh());
        let mut h = alloc::vec![T::zero(); d];
        linear(&act, 1, d, &p[self.ix.p_out_w].data, &p[self.ix.p_out_b].data, d, &mut h);
        let mut hp = Vec::with_capacity(c.prompt_len * d);
        for j in 0..c.prompt_len {
            match self.ix.slot {
                Some(s) => hp.extend(h.iter().zip(&p[s].data[j * d..(j + 1) * d]).map(|(&a, &b)| a + b)),
                None => hp.extend_from_slice(&h),
            }
        }
        Ok((hp, PromptTape { index: i, e, act }))
    }

    /// Runs the backbone over `ids`, optionally behind a neural prompt.
    pub fn forward_tape(&self, ids: &[TokenId], opts: ForwardOptions) -> Result<Tape<T>> {
        let c = &self.config;
        let d = c.d_model;
        let n_prompt = if opts.prompt.is_some() { c.prompt_len } else { 0 };
        let len = n_prompt + ids.len();
        if len > c.context_window {
            let segment = if n_prompt > c.context_window { "prompt" } else { "text" };
            return Err(Error::ContextOverflow { segment, len, window: c.context_window });
        }
        if len == 0 {
            return Err(Error::Empty("forward input"));
        }
        let p = &self.params;
        let mut x = alloc::vec![T::zero(); len * d];
        let prompt = match opts.prompt {
            Some(i) => {
                let (hp, tape) = self.prompt_forward(i)?;
                x[..n_prompt * d].copy_from_slice(&hp);
                Some(tape)
            }
            None => None,
        };
        let pos = &p[self.ix.pos_emb].data;
        for (t, &id) in ids.iter().enumerate() {
            let (ti, off) = self.embedding_row(id)?;
            let row = &mut x[(n_prompt + t) * d..(n_prompt + t + 1) * d];
            for j in 0..d {
                row[j] = p[ti].data[off + j] + pos[t * d + j];
            }
        }
        let mut layers = Vec::with_capacity(c.n_layers);
        for b in &self.ix.blocks {
            let (lt, out) = self.block_forward(b, x, len, n_prompt, opts.block_prompt_attention);
            layers.push(lt);
            x = out;
        }
        let mut lnf_xhat = alloc::vec![T::zero(); len * d];
        let mut lnf_rstd = alloc::vec![T::zero(); len];
        let mut hidden = alloc::vec![T::zero(); len * d];
        layer_norm(
            &x,
            len,
            d,
            &p[self.ix.lnf_g].data,
            &p[self.ix.lnf_b].data,
            &mut lnf_xhat,
            &mut lnf_rstd,
            &mut hidden,
        );
        Ok(Tape { ids: ids.to_vec(), n_prompt, len, layers, lnf_xhat, lnf_rstd, hidden, prompt })
    }

    fn block_forward(
        &self,
        b: &super::BlockIx,
        x: Vec<T>,
        len: usize,
        n_prompt: usize,
        block_prompt: bool,
    ) -> (LayerTape<T>, Vec<T>) {
        let c = &self.config;
        let (d, f, h) = (c.d_model, c.d_ff, c.n_heads);
        let dh = c.head_dim();
        let p = &self.params;
        let mut ln1_xhat = alloc::vec![T::zero(); len * d];
        let mut ln1_rstd = alloc::vec![T::zero(); len];
        let mut a1 = alloc::vec![T::zero(); len * d];
        layer_norm(&x, len, d, &p[b.ln1_g].data, &p[b.ln1_b].data, &mut ln1_xhat, &mut ln1_rstd, &mut a1);
        let mut qkv = alloc::vec![T::zero(); len * 3 * d];
        linear(&a1, len, d, &p[b.qkv_w].data, &p[b.qkv_b].data, 3 * d, &mut qkv);
        let mut probs = alloc::vec![T::zero(); h * len * len];
        let mut o = alloc::vec![T::zero(); len * d];
        let scale = T::from_f64(1.0 / num_traits::Float::sqrt(dh as f64));
        for hd in 0..h {
            let s = &mut probs[hd * len * len..(hd + 1) * len * len];
            let q = View::strided(&qkv[hd * dh..], len, dh, 3 * d);
            let k = View::strided(&qkv[d + hd * dh..], len, dh, 3 * d);
            gemm(scale, q, k.t(), T::zero(), ViewMut::new(s, len, len));
            for i in 0..len {
                let row = &mut s[i * len..(i + 1) * len];
                let lo = if block_prompt && i >= n_prompt { n_prompt } else { 0 };
                let max = row[lo..=i].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (j, v) in row.iter_mut().enumerate() {
                    if j < lo || j > i {
                        *v = T::zero();
                    } else {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            let v = View::strided(&qkv[2 * d + hd * dh..], len, dh, 3 * d);
            gemm(T::one(), View::new(s, len, len), v, T::zero(), ViewMut::strided(&mut o[hd * dh..], len, dh, d));
        }
        let mut x_mid = x;
        gemm(
            T::one(),
            View::new(&o, len, d),
            View::new(&p[b.proj_w].data, d, d),
            T::one(),
            ViewMut::new(&mut x_mid, len, d),
        );
        for r in 0..len {
            for j in 0..d {
                x_mid[r * d + j] += p[b.proj_b].data[j];
            }
        }
        let mut ln2_xhat = alloc::vec![T::zero(); len * d];
        let mut ln2_rstd = alloc::vec![T::zero(); len];
        let mut a2 = alloc::vec![T::zero(); len * d];
        layer_norm(&x_mid, len, d, &p[b.ln2_g].data, &p[b.ln2_b].data, &mut ln2_xhat, &mut ln2_rstd, &mut a2);
        let mut f_pre = alloc::vec![T::zero(); len * f];
        linear(&a2, len, d, &p[b.fc_w].data, &p[b.fc_b].data, f, &mut f_pre);
        let f_act: Vec<T> = f_pre.iter().map(|&v| gelu(v)).collect();
        let mut out = x_mid;
        gemm(
            T::one(),
            View::new(&f_act, len, f),
            View::new(&p[b.out_w].data, f, d),
            T::one(),
            ViewMut::new(&mut out, len, d),
        );
        for r in 0..len {
            for j in 0..d {
                out[r * d + j] += p[b.out_b].data[j];
            }
        }
        let lt = LayerTape { ln1_xhat, ln1_rstd, a1, qkv, probs, o, ln2_xhat, ln2_rstd, a2, f_pre, f_act };
        (lt, out)
    }

    /// Logits for the given positions of a tape, `positions.len() × V`.
    pub fn logits_at(&self, tape: &Tape<T>, positions: &[usize]) -> Vec<T> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let mut hsel = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            hsel.extend_from_slice(tape.hidden_row(p, d));
        }
        let mut out = alloc::vec![T::zero(); positions.len() * v];
        gemm(
            T::one(),
            View::new(&hsel, positions.len(), d),
            View::new(&self.params[self.ix.lm_head].data, d, v),
            T::zero(),
            ViewMut::new(&mut out, positions.len(), v),
        );
        out
    }

    /// Logits at every position, `len × V` where `len` includes prompt
    /// positions.
    pub fn forward(&self, ids: &[TokenId], opts: ForwardOptions) -> Result<Vec<T>> {
        let tape = self.forward_tape(ids, opts)?;
        let all: Vec<usize> = (0..tape.len).collect();
        Ok(self.logits_at(&tape, &all))
    }

    /// Backpropagates logit gradients at `positions` (`dlogits`,
    /// `positions.len() × V`) plus direct hidden-state gradients `dhidden`
    /// (`len × d`, may be empty) into `grads`.
    pub fn backward(&self, tape: &Tape<T>, positions: &[usize], dlogits: &[T], dhidden: &[T], grads: &mut Grads<T>) {
        let c = &self.config;
        let (d, v, f, h) = (c.d_model, c.vocab_size, c.d_ff, c.n_heads);
        let dh = c.head_dim();
        let len = tape.len;
        let p = &self.params;
        let ix = &self.ix;

        let mut dhid = if dhidden.is_empty() { alloc::vec![T::zero(); len * d] } else { dhidden.to_vec() };
        if !positions.is_empty() {
            let m = positions.len();
            let mut hsel = Vec::with_capacity(m * d);
            for &pp in positions {
                hsel.extend_from_slice(tape.hidden_row(pp, d));
            }
            if let Some(g) = grads.get(ix.lm_head) {
                gemm(T::one(), View::new(&hsel, m, d).t(), View::new(dlogits, m, v), T::one(), ViewMut::new(g, d, v));
            }
            let mut dsel = alloc::vec![T::zero(); m * d];
            gemm(
                T::one(),
                View::new(dlogits, m, v),
                View::new(&p[ix.lm_head].data, d, v).t(),
                T::zero(),
                ViewMut::new(&mut dsel, m, d),
            );
            for (k, &pp) in positions.iter().enumerate() {
                for j in 0..d {
                    dhid[pp * d + j] += dsel[k * d + j];
                }
            }
        }

        let mut dx = alloc::vec![T::zero(); len * d];
        {
            let (dg, db) = two(grads, ix.lnf_g, ix.lnf_b);
            layer_norm_back(&dhid, &tape.lnf_xhat, &tape.lnf_rstd, &p[ix.lnf_g].data, len, d, &mut dx, dg, db);
        }

        let scale = T::from_f64(1.0 / num_traits::Float::sqrt(dh as f64));
        for (b, lt) in ix.blocks.iter().zip(&tape.layers).rev() {
            // MLP branch: out = x_mid + gelu(a2 W1 + b1) W2 + b2.
            let mut dfact = alloc::vec![T::zero(); len * f];
            {
                let (dw, db) = two(grads, b.out_w, b.out_b);
                linear_back(&lt.f_act, &dx, len, f, d, &p[b.out_w].data, dw, db, Some(&mut dfact));
            }
            for (g, &z) in dfact.iter_mut().zip(&lt.f_pre) {
                *g *= gelu_grad(z);
            }
            let mut da2 = alloc::vec![T::zero(); len * d];
            {
                let (dw, db) = two(grads, b.fc_w, b.fc_b);
                linear_back(&lt.a2, &dfact, len, d, f, &p[b.fc_w].data, dw, db, Some(&mut da2));
            }
            {
                let (dg, db) = two(grads, b.ln2_g, b.ln2_b);
                layer_norm_back(&da2, &lt.ln2_xhat, &lt.ln2_rstd, &p[b.ln2_g].data, len, d, &mut dx, dg, db);
            }
            // Attention branch: x_mid = x_in + o Wp + bp.
            let mut d_o = alloc::vec![T::zero(); len * d];
            {
                let (dw, db) = two(grads, b.proj_w, b.proj_b);
                linear_back(&lt.o, &dx, len, d, d, &p[b.proj_w].data, dw, db, Some(&mut d_o));
            }
            let mut dqkv = alloc::vec![T::zero(); len * 3 * d];
            let mut dp = alloc::vec![T::zero(); len * len];
            for hd in 0..h {
                let pr = &lt.probs[hd * len * len..(hd + 1) * len * len];
                let dout = View::strided(&d_o[hd * dh..], len, dh, d);
                let vv = View::strided(&lt.qkv[2 * d + hd * dh..], len, dh, 3 * d);
                gemm(T::one(), dout, vv.t(), T::zero(), ViewMut::new(&mut dp, len, len));
                gemm(
                    T::one(),
                    View::new(pr, len, len).t(),
                    dout,
                    T::zero(),
                    ViewMut::strided(&mut dqkv[2 * d + hd * dh..], len, dh, 3 * d),
                );
                for i in 0..len {
                    let row_p = &pr[i * len..(i + 1) * len];
                    let row_d = &mut dp[i * len..(i + 1) * len];
                    let s: T = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in row_d.iter_mut().zip(row_p) {
                        *g = pv * (*g - s) * scale;
                    }
                }
                let q = View::strided(&lt.qkv[hd * dh..], len, dh, 3 * d);
                let k = View::strided(&lt.qkv[d + hd * dh..], len, dh, 3 * d);
                gemm(
                    T::one(),
                    View::new(&dp, len, len),
                    k,
                    T::zero(),
                    ViewMut::strided(&mut dqkv[hd * dh..], len, dh, 3 * d),
                );
                gemm(
                    T::one(),
                    View::new(&dp, len, len).t(),
                    q,
                    T::zero(),
                    ViewMut::strided(&mut dqkv[d + hd * dh..], len, dh, 3 * d),
                );
            }
            let mut da1 = alloc::vec![T::zero(); len * d];
            {
                let (dw, db) = two(grads, b.qkv_w, b.qkv_b);
                linear_back(&lt.a1, &dqkv, len, d, 3 * d, &p[b.qkv_w].data, dw, db, Some(&mut da1));
            }
            {
                let (dg, db) = two(grads, b.ln1_g, b.ln1_b);
                layer_norm_back(&da1, &lt.ln1_xhat, &lt.ln1_rstd, &p[b.ln1_g].data, len, d, &mut dx, dg, db);
            }
        }

        // Embeddings.
        let np = tape.n_prompt;
        if let Some(g) = grads.get(ix.pos_emb) {
            for t in 0..tape.ids.len() {
                for j in 0..d {
                    g[t * d + j] += dx[(np + t) * d + j];
                }
            }
        }
        for (t, &id) in tape.ids.iter().enumerate() {
            let (ti, off) = self.embedding_row(id).expect("validated in forward");
            if let Some(g) = grads.get(ti) {
                for j in 0..d {
                    g[off + j] += dx[(np + t) * d + j];
                }
            }
        }
        if let Some(pt) = &tape.prompt {
            self.prompt_backward(pt, &dx[..np * d], grads);
        }
    }

    /// Gradient of a loss w.r.t. the prompt-table path, given `dhp`
    /// (`P × d`) for the output of [`ModelState::embed_instruction`].
    pub fn embed_instruction_backward(&self, i: usize, dhp: &[T], grads: &mut Grads<T>) -> Result<()> {
        let (_, pt) = self.prompt_forward(i)?;
        if dhp.len() != self.config.prompt_len * self.config.d_model {
            return Err(Error::Shape("prompt gradient must be P × d".into()));
        }
        self.prompt_backward(&pt, dhp, grads);
        Ok(())
    }

    fn prompt_backward(&self, pt: &PromptTape<T>, dp_rows: &[T], grads: &mut Grads<T>) {
        let c = &self.config;
        let d = c.d_model;
        let np = c.prompt_len;
        let p = &self.params;
        let ix = &self.ix;
        if let Some(s) = ix.slot {
            if let Some(g) = grads.get(s) {
                for (gi, &x) in g.iter_mut().zip(dp_rows) {
                    *gi += x;
                }
            }
        }
        let mut dhp = alloc::vec![T::zero(); d];
        for r in 0..np {
            for j in 0..d {
                dhp[j] += dp_rows[r * d + j];
            }
        }
        let mut dact = alloc::vec![T::zero(); d];
        {
            let (dw, db) = two(grads, ix.p_out_w, ix.p_out_b);
            linear_back(&pt.act, &dhp, 1, d, d, &p[ix.p_out_w].data, dw, db, Some(&mut dact));
        }
        for (g, &a) in dact.iter_mut().zip(&pt.act) {
            *g *= T::one() - a * a;
        }
        let dpd = c.prompt_dim;
        let mut de = alloc::vec![T::zero(); dpd];
        {
            let (dw, db) = two(grads, ix.p_fc_w, ix.p_fc_b);
            linear_back(&pt.e, &dact, 1, dpd, d, &p[ix.p_fc_w].data, dw, db, Some(&mut de));
        }
        let (seg, off) = self.registry.locate(pt.index).expect("validated in forward");
        if let Some(g) = grads.get(ix.e_r[seg]) {
            for j in 0..dpd {
                g[off * dpd + j] += de[j];
            }
        }
    }
}

/// Two distinct gradient buffers at once.
fn two<T: Real>(grads: &mut Grads<T>, a: usize, b: usize) -> (Option<&mut [T]>, Option<&mut [T]>) {
    assert_ne!(a, b);
    let (ga, gb) = if a < b {
        let (lo, hi) = grads.data.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = grads.data.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    };
    (
        if ga.is_empty() { None } else { Some(ga.as_mut_slice()) },
        if gb.is_empty() { None } else { Some(gb.as_mut_slice()) },
    )
}
