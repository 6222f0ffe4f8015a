//! Instruction extension with a frozen backbone, incremental prompt-only
//! updates, and the continual-learning and ablation harnesses.

mod harness;
mod pipeline;

pub use harness::{
    ablation_harness, continual_harness, partition_instructions, AblationReport, ContinualReport, CurvePoint,
    HarnessConfig, TrainingRecord, ABLATIONS,
};
pub use pipeline::{
    corpus_texts, corpus_vocab, finetune_sequences, finetune_stage, pretrain_sequences, pretrain_stage, train_pipeline,
    Phase, PipelineConfig, Trained,
};

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{InstructionCriterionPair, TrialDocument};
use crate::embedstore::{encode_setup, exemplar_of, KnowledgeStore, StoreEntry};
use crate::error::{Error, Result};
use crate::generation::Variant;
use crate::math::Real;
use crate::model::ModelState;
use crate::textproto::vocab::INSTR_BASE;
use crate::textproto::{Assembler, Setup, Vocabulary};
use crate::training::{changed_tensors, train, LossReport, Objective, OptimizerConfig, TrainSummary};

/// Trainable and frozen tensor names after an extension.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpdatePlan {
    pub new_tags: Vec<String>,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

impl UpdatePlan {
    pub fn of<T: Real>(state: &ModelState<T>, new_tags: &[String]) -> Self {
        let mut plan = Self { new_tags: new_tags.to_vec(), ..Self::default() };
        for (t, &m) in state.params.iter().zip(&state.trainable) {
            if m { &mut plan.trainable } else { &mut plan.frozen }.push(t.name.clone());
        }
        plan
    }
}

/// Appends `new_tags` to the registry, binds their vocabulary slots and adds
/// fresh prompt rows. Only the new tensors stay trainable. Nothing changes
/// on error.
pub fn extend_instructions<T: Real>(
    state: &mut ModelState<T>,
    vocab: &mut Vocabulary,
    new_tags: &[String],
) -> Result<UpdatePlan> {
    if new_tags.is_empty() {
        return Ok(UpdatePlan::of(state, new_tags));
    }
    let mut next = state.clone();
    next.extend_instructions(new_tags)?;
    let mut v = vocab.clone();
    for tag in new_tags {
        let i = next.registry.index(tag)?;
        let id = v.bind_instruction(tag)?;
        if id as usize != INSTR_BASE as usize + i {
            return Err(Error::Invalid(alloc::format!(
                "instruction `{tag}` is registry entry {i} but vocabulary slot {}",
                id as usize - INSTR_BASE as usize
            )));
        }
    }
    *state = next;
    *vocab = v;
    Ok(UpdatePlan::of(state, new_tags))
}

/// Per-tensor comparison before and after an update.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorDiff {
    pub name: String,
    pub trainable: bool,
    pub changed: bool,
    pub max_abs_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UpdateReport {
    pub summary: TrainSummary,
    pub diff: Vec<TensorDiff>,
    pub upserted: usize,
}

pub fn tensor_diff<T: Real>(before: &ModelState<T>, after: &ModelState<T>) -> Vec<TensorDiff> {
    let changed = changed_tensors(before, after);
    after
        .params
        .iter()
        .zip(&after.trainable)
        .map(|(t, &m)| {
            let max_abs_delta = match before.tensor(&t.name) {
                Some(b) if b.shape == t.shape => b
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(x, y)| (Real::to_f64(*x) - Real::to_f64(*y)).abs())
                    .fold(0.0, f64::max),
                _ => f64::INFINITY,
            };
            TensorDiff { name: t.name.clone(), trainable: m, changed: changed.contains(&t.name), max_abs_delta }
        })
        .collect()
}

/// Finetunes only the newest registry segment on `new_pairs`, then upserts
/// the pairs into `store`. Exemplars come from the store as it was before
/// the update.
#[allow(clippy::too_many_arguments)]
pub fn incremental_update(
    state: &mut ModelState<f32>,
    vocab: &Vocabulary,
    store: &mut KnowledgeStore,
    corpus: &[TrialDocument],
    new_pairs: &[InstructionCriterionPair],
    cfg: &OptimizerConfig,
    variant: Variant,
    on_step: impl FnMut(&LossReport),
) -> Result<UpdateReport> {
    let frozen = state.registry.frozen_prefix_len();
    for p in new_pairs {
        let i = state.registry.index(&p.instruction)?;
        if i < frozen {
            return Err(Error::Invalid(alloc::format!(
                "pair for trial {} uses `{}`, which belongs to the frozen instruction range",
                p.trial_id,
                p.instruction
            )));
        }
    }
    let registry = state.registry.clone();
    let assembler = Assembler::new(vocab, &registry);
    let seqs = finetune_sequences(state, &assembler, corpus, new_pairs, Some(store), variant)?;
    let before = state.clone();
    let obj = Objective { use_prompt: variant.prompt, ..Objective::finetune(cfg.margin) };
    let summary = train(state, &seqs, cfg, &obj, on_step)?;
    let diff = tensor_diff(&before, state);
    if let Some(d) = diff.iter().find(|d| !d.trainable && d.changed) {
        return Err(Error::Invalid(alloc::format!("frozen tensor {} changed during the update", d.name)));
    }
    let mut upserted = 0;
    for p in new_pairs {
        let Some(trial) = corpus.iter().find(|t| t.trial_id == p.trial_id) else {
            continue;
        };
        let key = encode_setup(state, &assembler, &trial.trial_id, &Setup::from(trial))?;
        store.upsert(StoreEntry::new(key, exemplar_of(p))?)?;
        upserted += 1;
    }
    Ok(UpdateReport { summary, diff, upserted })
}
