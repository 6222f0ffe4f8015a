use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{build_pretrain_set, extract_pairs, InstructionCriterionPair, PretrainConfig, TrialDocument};
use crate::criteria::CriteriaParser;
use crate::embedstore::{encode_setup, KnowledgeStore};
use crate::error::{Error, Result};
use crate::generation::Variant;
use crate::math::Real;
use crate::model::{BackboneConfig, ModelState};
use crate::textproto::{Assembler, InstructionRegistry, PromptSequence, Setup, Vocabulary};
use crate::training::{train, LossReport, Objective, OptimizerConfig, TrainSummary};

/// Everything needed to go from a training split to a finetuned model and
/// its knowledge store.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PipelineConfig {
    /// `vocab_size` is overwritten from the built vocabulary.
    pub backbone: BackboneConfig,
    pub pretrain: OptimizerConfig,
    pub finetune: OptimizerConfig,
    pub pretrain_data: PretrainConfig,
    /// Preceding criteria kept as the rationale chain of a pair.
    pub chain_len: usize,
    pub min_frequency: usize,
    pub variant: Variant,
    pub skip_pretrain: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            pretrain: OptimizerConfig::default(),
            finetune: OptimizerConfig::published_finetune(),
            pretrain_data: PretrainConfig::default(),
            chain_len: 3,
            min_frequency: 1,
            variant: Variant::default(),
            skip_pretrain: false,
        }
    }
}

pub fn corpus_texts(corpus: &[TrialDocument]) -> Vec<&str> {
    corpus
        .iter()
        .flat_map(|t| {
            [t.title.as_str(), t.disease.as_str(), t.treatment.as_str()]
                .into_iter()
                .chain(t.criteria().map(|c| c.text.as_str()))
        })
        .collect()
}

/// Word vocabulary of `corpus` with `tags` bound to the first slots.
pub fn corpus_vocab(
    corpus: &[TrialDocument],
    min_frequency: usize,
    slots: usize,
    tags: &[String],
) -> Result<Vocabulary> {
    Vocabulary::build(corpus_texts(corpus), min_frequency, slots, tags)
}

/// Pretraining sequences. Without RAG the exemplar chain is dropped.
pub fn pretrain_sequences(
    assembler: &Assembler<'_>,
    corpus: &[TrialDocument],
    cfg: &PretrainConfig,
    variant: Variant,
    window: usize,
) -> Result<Vec<PromptSequence>> {
    let by_id: BTreeMap<&str, &TrialDocument> = corpus.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut out = Vec::new();
    for mut s in build_pretrain_set(corpus, None, cfg) {
        if !variant.rag {
            s.exemplar.clear();
        }
        let trial = by_id[s.trial_id.as_str()];
        match assembler.pretrain_sequence(&Setup::from(trial), &s, variant.msr, window) {
            Ok(p) => out.push(p),
            Err(e @ Error::ContextOverflow { .. }) => {
                log::warn!("skipping pretraining sample of {}: {e}", s.trial_id)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Finetuning sequences. With RAG each pair's exemplar is the most similar
/// other trial's entry for the same instruction, as at generation time.
pub fn finetune_sequences<T: Real>(
    model: &ModelState<T>,
    assembler: &Assembler<'_>,
    corpus: &[TrialDocument],
    pairs: &[InstructionCriterionPair],
    store: Option<&KnowledgeStore>,
    variant: Variant,
) -> Result<Vec<PromptSequence>> {
    let window = model.config.context_window;
    let by_id: BTreeMap<&str, &TrialDocument> = corpus.iter().map(|t| (t.trial_id.as_str(), t)).collect();
    let store = store.filter(|s| variant.rag && !s.is_empty());
    if let Some(s) = store {
        s.check_model(model)?;
    }
    let mut keys: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    let mut out = Vec::new();
    for p in pairs {
        let trial = *by_id
            .get(p.trial_id.as_str())
            .ok_or_else(|| Error::Invalid(alloc::format!("pair references unknown trial {}", p.trial_id)))?;
        let setup = Setup::from(trial);
        let ex = match store {
            Some(s) => {
                if !keys.contains_key(p.trial_id.as_str()) {
                    keys.insert(&p.trial_id, encode_setup(model, assembler, &p.trial_id, &setup)?.vector);
                }
                let q = &keys[p.trial_id.as_str()];
                s.retrieve_for(q, 1, Some(&p.trial_id), &p.instruction).first().map(|(e, _)| e.value.clone())
            }
            None => None,
        };
        let (_, t) = assembler.target_ids(&[], &p.target, false);
        let seq = window
            .checked_sub(t.len())
            .ok_or(Error::ContextOverflow { segment: "target", len: t.len(), window })
            .and_then(|budget| assembler.prompt(&setup, ex.as_ref(), Some(&p.instruction), budget))
            .and_then(|mut s| {
                assembler.attach_target(&mut s, &p.rationale_chain, &p.target, variant.msr, window).map(|_| s)
            });
        match seq {
            Ok(s) => out.push(s),
            Err(e @ Error::ContextOverflow { .. }) => {
                log::warn!("skipping pair of {}: {e}", p.trial_id)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Output of [`train_pipeline`].
#[derive(Debug, Clone)]
pub struct Trained {
    pub vocab: Vocabulary,
    pub model: ModelState<f32>,
    pub store: KnowledgeStore,
    pub pairs: Vec<InstructionCriterionPair>,
    pub pretrain: Option<TrainSummary>,
    pub finetune: TrainSummary,
}

/// Which phase a logged step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Incremental,
}

/// Builds the vocabulary and model for `tags` and, unless skipped, pretrains.
pub fn pretrain_stage(
    train_set: &[TrialDocument],
    tags: &[String],
    cfg: &PipelineConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<(Vocabulary, ModelState<f32>, Option<TrainSummary>)> {
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let registry = InstructionRegistry::new(tags.iter().cloned())?;
    let vocab = corpus_vocab(train_set, cfg.min_frequency, cfg.backbone.instruction_slots, tags)?;
    let backbone = BackboneConfig { vocab_size: vocab.len(), ..cfg.backbone.clone() };
    let mut model = ModelState::<f32>::init(backbone, registry)?;
    let summary = if cfg.skip_pretrain {
        None
    } else {
        let assembler = Assembler::new(&vocab, &model.registry);
        let seqs =
            pretrain_sequences(&assembler, train_set, &cfg.pretrain_data, cfg.variant, model.config.context_window)?;
        Some(train(&mut model, &seqs, &cfg.pretrain, &Objective::pretrain(), &mut on_step)?)
    };
    Ok((vocab, model, summary))
}

/// Finetunes on every pair whose instruction is registered, with exemplars
/// from a store keyed by the incoming encoder, then re-keys the store with
/// the finetuned encoder.
pub fn finetune_stage(
    model: &mut ModelState<f32>,
    vocab: &Vocabulary,
    train_set: &[TrialDocument],
    parser: &CriteriaParser,
    cfg: &PipelineConfig,
    on_step: impl FnMut(&LossReport),
) -> Result<(KnowledgeStore, Vec<InstructionCriterionPair>, TrainSummary)> {
    let registry = model.registry.clone();
    let assembler = Assembler::new(vocab, &registry);
    let (pairs, stats) = extract_pairs(train_set, parser, cfg.chain_len);
    let pairs: Vec<InstructionCriterionPair> =
        pairs.into_iter().filter(|p| registry.index(&p.instruction).is_ok()).collect();
    log::info!("{} finetuning pairs ({} criteria without an attribute)", pairs.len(), stats.skipped);
    let store = KnowledgeStore::build(model, &assembler, train_set, &pairs)?;
    let seqs = finetune_sequences(model, &assembler, train_set, &pairs, Some(&store), cfg.variant)?;
    let obj = Objective { use_prompt: cfg.variant.prompt, ..Objective::finetune(cfg.finetune.margin) };
    let summary = train(model, &seqs, &cfg.finetune, &obj, on_step)?;
    let store = KnowledgeStore::build(model, &assembler, train_set, &pairs)?;
    Ok((store, pairs, summary))
}

/// Pretrains on `train`, builds the store, finetunes on every pair whose
/// instruction is in `tags`, then re-keys the store with the finetuned
/// encoder.
pub fn train_pipeline(
    train_set: &[TrialDocument],
    parser: &CriteriaParser,
    tags: &[String],
    cfg: &PipelineConfig,
    mut on_step: impl FnMut(Phase, &LossReport),
) -> Result<Trained> {
    let (vocab, mut model, pretrain) = pretrain_stage(train_set, tags, cfg, |r| on_step(Phase::Pretrain, r))?;
    let (store, pairs, finetune) =
        finetune_stage(&mut model, &vocab, train_set, parser, cfg, |r| on_step(Phase::Finetune, r))?;
    Ok(Trained { vocab, model, store, pairs, pretrain, finetune })
}
