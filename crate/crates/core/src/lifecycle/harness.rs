use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::pipeline::{corpus_vocab, finetune_sequences, pretrain_sequences, train_pipeline, PipelineConfig};
use super::{extend_instructions, incremental_update};
use crate::corpus::{extract_pairs, InstructionCriterionPair, Polarity, TrialDocument};
use crate::criteria::CriteriaParser;
use crate::embedstore::KnowledgeStore;
use crate::error::{Error, Result};
use crate::generation::{Generator, Variant};
use crate::metrics::{evaluate, EvalConfig, Evaluation};
use crate::model::{BackboneConfig, ModelState};
use crate::rng;
use crate::textproto::{Assembler, InstructionRegistry, Vocabulary};
use crate::training::{train, Objective, OptimizerConfig};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct HarnessConfig {
    pub pipeline: PipelineConfig,
    /// Optimizer for prompt-only updates.
    pub incremental: OptimizerConfig,
    pub eval: EvalConfig,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            incremental: OptimizerConfig { learning_rate: 1e-3, ..OptimizerConfig::published_finetune() },
            eval: EvalConfig::default(),
            n_subsets: 4,
            seed: 0,
        }
    }
}

/// Seeded shuffle of `tags`, dealt round-robin into `n` disjoint subsets
/// whose sizes differ by at most one.
pub fn partition_instructions(tags: &[String], n: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if n == 0 || tags.len() < n {
        return Err(Error::Config(alloc::format!("{} instruction types cannot fill {n} subsets", tags.len())));
    }
    let mut t = tags.to_vec();
    t.sort();
    t.dedup();
    if t.len() < n {
        return Err(Error::Config(alloc::format!("{} distinct instruction types cannot fill {n} subsets", t.len())));
    }
    t.shuffle(&mut rng::stream(seed, "partition"));
    let mut out = alloc::vec![Vec::new(); n];
    for (i, tag) in t.into_iter().enumerate() {
        out[i % n].push(tag);
    }
    Ok(out)
}

/// One row of the curve file.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurvePoint {
    pub variant: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// What a variant trained on at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingRecord {
    pub variant: String,
    pub step: usize,
    pub tags: Vec<String>,
    pub pairs: usize,
    pub trainable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ContinualReport {
    pub subsets: Vec<Vec<String>>,
    pub points: Vec<CurvePoint>,
    pub records: Vec<TrainingRecord>,
}

fn curve_points(variant: &str, step: usize, ev: &Evaluation) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    let mut push = |metric: String, value: f64| out.push(CurvePoint { variant: variant.into(), step, metric, value });
    for pol in [Polarity::Inclusion, Polarity::Exclusion] {
        if let Some(r) = ev.overall(pol) {
            let p = pol.name();
            push(alloc::format!("{p}.bleu1"), r.bleu1);
            push(alloc::format!("{p}.meteor"), r.meteor);
            push(alloc::format!("{p}.rouge_l"), r.rouge_l);
            push(alloc::format!("{p}.cider"), r.cider);
        }
    }
    if let Ok(c) = ev.pooled_clinical() {
        push("precision".into(), c.precision);
        push("recall".into(), c.recall);
        push("f1".into(), c.f1);
        push("jaccard".into(), c.jaccard);
    }
    if let Some(f) = ev.instruction_following {
        push("instruction_following".into(), f);
    }
    out
}

struct Stage {
    model: ModelState<f32>,
    vocab: Vocabulary,
    store: KnowledgeStore,
}

impl Stage {
    fn evaluate(
        &self,
        parser: &CriteriaParser,
        test: &[TrialDocument],
        cfg: &EvalConfig,
        variant: Variant,
    ) -> Result<Evaluation> {
        let g = Generator {
            state: &self.model,
            assembler: Assembler::new(&self.vocab, &self.model.registry),
            store: Some(&self.store),
            variant,
        };
        evaluate(&g, parser, test, cfg)
    }
}

/// Registers `tags` on a copy of the pretrained model, then finetunes every
/// tensor on `pairs`.
fn finetune_fresh(
    base: &ModelState<f32>,
    vocab: &Vocabulary,
    train_set: &[TrialDocument],
    tags: &[String],
    pairs: &[InstructionCriterionPair],
    cfg: &PipelineConfig,
) -> Result<Stage> {
    let mut model = base.clone();
    let mut vocab = vocab.clone();
    extend_instructions(&mut model, &mut vocab, tags)?;
    model.set_trainable(|_| true);
    let registry = model.registry.clone();
    let a = Assembler::new(&vocab, &registry);
    let store = KnowledgeStore::build(&model, &a, train_set, pairs)?;
    let seqs = finetune_sequences(&model, &a, train_set, pairs, Some(&store), cfg.variant)?;
    let obj = Objective { use_prompt: cfg.variant.prompt, ..Objective::finetune(cfg.finetune.margin) };
    train(&mut model, &seqs, &cfg.finetune, &obj, |r| log::debug!("finetune {r}"))?;
    let store = KnowledgeStore::build(&model, &a, train_set, pairs)?;
    Ok(Stage { model, vocab, store })
}

/// Reveals the instruction subsets one at a time. Re-train finetunes the
/// pretrained backbone on every subset seen so far; Incremental extends the
/// previous model with the new subset and updates only its prompt rows.
/// Both are evaluated on the seen instructions after every reveal.
pub fn continual_harness(
    train_set: &[TrialDocument],
    test: &[TrialDocument],
    parser: &CriteriaParser,
    tags: &[String],
    cfg: &HarnessConfig,
) -> Result<ContinualReport> {
    let subsets = partition_instructions(tags, cfg.n_subsets, cfg.seed)?;
    let p = &cfg.pipeline;
    let vocab = corpus_vocab(train_set, p.min_frequency, p.backbone.instruction_slots, &[])?;
    let backbone = BackboneConfig { vocab_size: vocab.len(), ..p.backbone.clone() };
    let mut base = ModelState::<f32>::init(backbone, InstructionRegistry::default())?;
    if !p.skip_pretrain {
        let empty = InstructionRegistry::default();
        let seqs = pretrain_sequences(
            &Assembler::new(&vocab, &empty),
            train_set,
            &p.pretrain_data,
            p.variant,
            base.config.context_window,
        )?;
        train(&mut base, &seqs, &p.pretrain, &Objective::pretrain(), |r| log::debug!("pretrain {r}"))?;
    }
    let (all_pairs, _) = extract_pairs(train_set, parser, p.chain_len);
    let pairs_for = |tags: &[String]| -> Vec<InstructionCriterionPair> {
        all_pairs.iter().filter(|q| tags.contains(&q.instruction)).cloned().collect()
    };

    let mut points = Vec::new();
    let mut records = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    let mut inc: Option<Stage> = None;
    for (k, subset) in subsets.iter().enumerate() {
        let step = k + 1;
        seen.extend(subset.iter().cloned());
        let pairs = pairs_for(&seen);
        let re = finetune_fresh(&base, &vocab, train_set, &seen, &pairs, p)?;
        records.push(TrainingRecord {
            variant: "retrain".into(),
            step,
            tags: seen.clone(),
            pairs: pairs.len(),
            trainable: re.model.params.iter().map(|t| t.name.clone()).collect(),
        });
        let ev = re.evaluate(parser, test, &cfg.eval, p.variant)?;
        points.extend(curve_points("retrain", step, &ev));
        log::info!("continual step {step}: retrain on {} pairs", pairs.len());

        let stage = match inc.take() {
            None => {
                records.push(TrainingRecord { variant: "incremental".into(), ..records[records.len() - 1].clone() });
                Stage { model: re.model.clone(), vocab: re.vocab.clone(), store: re.store.clone() }
            }
            Some(mut st) => {
                let new_pairs = pairs_for(subset);
                let plan = extend_instructions(&mut st.model, &mut st.vocab, subset)?;
                incremental_update(
                    &mut st.model,
                    &st.vocab,
                    &mut st.store,
                    train_set,
                    &new_pairs,
                    &cfg.incremental,
                    p.variant,
                    |r| log::debug!("incremental {r}"),
                )?;
                records.push(TrainingRecord {
                    variant: "incremental".into(),
                    step,
                    tags: subset.clone(),
                    pairs: new_pairs.len(),
                    trainable: plan.trainable,
                });
                st
            }
        };
        let ev = stage.evaluate(parser, test, &cfg.eval, p.variant)?;
        points.extend(curve_points("incremental", step, &ev));
        inc = Some(stage);
    }
    Ok(ContinualReport { subsets, points, records })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationReport {
    pub name: String,
    pub variant: Variant,
    pub final_pretrain_ppl: Option<f64>,
    pub final_finetune_ppl: Option<f64>,
    pub evaluation: Evaluation,
}

pub const ABLATIONS: [(&str, Variant); 4] = [
    ("full", Variant { msr: true, rag: true, prompt: true }),
    ("w/o MSR", Variant { msr: false, rag: true, prompt: true }),
    ("w/o RAG", Variant { msr: true, rag: false, prompt: true }),
    ("w/o Prompt", Variant { msr: true, rag: true, prompt: false }),
];

/// Trains and evaluates the full model and each single-component ablation
/// with identical seeds and budgets.
pub fn ablation_harness(
    train_set: &[TrialDocument],
    test: &[TrialDocument],
    parser: &CriteriaParser,
    tags: &[String],
    cfg: &HarnessConfig,
) -> Result<Vec<AblationReport>> {
    let mut out = Vec::new();
    for (name, variant) in ABLATIONS {
        let pc = PipelineConfig { variant, ..cfg.pipeline.clone() };
        let t = train_pipeline(train_set, parser, tags, &pc, |_, r| log::debug!("{name} {r}"))?;
        let g = Generator {
            state: &t.model,
            assembler: Assembler::new(&t.vocab, &t.model.registry),
            store: Some(&t.store),
            variant,
        };
        let evaluation = evaluate(&g, parser, test, &cfg.eval)?;
        log::info!("ablation {name} done");
        out.push(AblationReport {
            name: name.to_string(),
            variant,
            final_pretrain_ppl: t.pretrain.as_ref().and_then(|s| s.epoch_ppl.last().copied()),
            final_finetune_ppl: t.finetune.epoch_ppl.last().copied(),
            evaluation,
        });
    }
    Ok(out)
}
