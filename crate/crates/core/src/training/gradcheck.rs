use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{batch_loss, Objective};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{Grads, ModelState};
use crate::rng;
use crate::textproto::PromptSequence;

const STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub frozen: bool,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Maximum relative error over trainable probes.
    pub max_rel_err: f64,
}

/// Central-difference check of the `L_FT` gradient at `n_probes` parameters
/// drawn uniformly over all scalars. Runs in `f64`.
pub fn grad_check<T: Real>(
    state: &ModelState<T>,
    batch: &[PromptSequence],
    obj: &Objective,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let total = state.param_count();
    if total == 0 {
        return Err(Error::Empty("parameters"));
    }
    let mut r = rng::stream(seed, "gradcheck");
    let mut at = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let mut flat = r.random_range(0..total);
        let mut t = 0;
        while flat >= state.params[t].len() {
            flat -= state.params[t].len();
            t += 1;
        }
        at.push((t, flat));
    }
    grad_check_at(state, batch, obj, &at)
}

/// Like [`grad_check`] at explicit `(tensor index, offset)` locations.
pub fn grad_check_at<T: Real>(
    state: &ModelState<T>,
    batch: &[PromptSequence],
    obj: &Objective,
    at: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let mut s: ModelState<f64> = state.cast();
    let mut grads = Grads::zeros(&s);
    batch_loss(&s, batch, obj, Some(&mut grads))?;
    let mut report = GradCheckReport::default();
    for &(t, k) in at {
        if t >= s.params.len() || k >= s.params[t].len() {
            return Err(Error::Invalid("probe out of range".into()));
        }
        let frozen = !s.trainable[t];
        let analytic = if frozen { 0.0 } else { grads.data[t][k] };
        let orig = s.params[t].data[k];
        s.params[t].data[k] = orig + STEP;
        let plus = batch_loss(&s, batch, obj, None)?.ft;
        s.params[t].data[k] = orig - STEP;
        let minus = batch_loss(&s, batch, obj, None)?.ft;
        s.params[t].data[k] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel_err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        if !frozen {
            report.max_rel_err = report.max_rel_err.max(rel_err);
        }
        report.probes.push(Probe { tensor: s.params[t].name.clone(), index: k, analytic, numeric, frozen, rel_err });
    }
    Ok(report)
}
