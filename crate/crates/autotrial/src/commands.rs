//! Subcommand bodies. Each reads its inputs, writes artifacts under the
//! output directory and finishes with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use autotrial_core::corpus::{extract_pairs, split, synthesize_corpus, DatasetSplit, SynthConfig, TrialDocument};
use autotrial_core::criteria::CriteriaParser;
use autotrial_core::embedstore::KnowledgeStore;
use autotrial_core::generation::Generator;
use autotrial_core::lexer::lex;
use autotrial_core::lifecycle::{
    ablation_harness, continual_harness, extend_instructions, finetune_sequences, finetune_stage, incremental_update,
    pretrain_stage, HarnessConfig, PipelineConfig,
};
use autotrial_core::metrics::{evaluation_items, score_items, CiderIdf, EvalConfig, Evaluation, ItemResult};
use autotrial_core::model::ModelState;
use autotrial_core::textproto::{Assembler, Vocabulary};
use autotrial_core::training::{grad_check, Objective, TrainSummary};
use serde::Serialize;

use crate::cli::Invocation;
use crate::config::RunConfig;
use crate::formats::*;
use crate::ingest::ingest;
use crate::manifest::write_manifest;

/// Bad or missing arguments discovered after parsing; exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

struct Ctx<'a> {
    inv: &'a Invocation,
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn path(&mut self, key: &str) -> Result<PathBuf> {
        let p = self.cfg.paths.get(key).ok_or_else(|| UsageError(format!("paths.{key} is required (--{key})")))?;
        if !p.exists() {
            bail!(UsageError(format!("paths.{key}: {} does not exist", p.display())));
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn opt_path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.cfg.paths.get(key) {
            Some(_) => self.path(key).map(Some),
            None => Ok(None),
        }
    }

    fn extra(&self, key: &str) -> Option<&str> {
        self.inv.extra.get(key).map(String::as_str)
    }

    fn parser(&mut self) -> Result<CriteriaParser> {
        let schema = self.opt_path("schema")?;
        Ok(CriteriaParser::new(read_schema(schema.as_deref())?)?)
    }

    fn tags(&self, parser: &CriteriaParser) -> Vec<String> {
        if self.cfg.instructions.is_empty() {
            parser.schema().tags().map(str::to_owned).collect()
        } else {
            self.cfg.instructions.clone()
        }
    }

    fn corpus(&mut self) -> Result<Vec<TrialDocument>> {
        let p = self.path("corpus")?;
        read_corpus(&p)
    }

    /// Train and test documents. Without a split file every document is in
    /// both.
    fn splits(&mut self) -> Result<(Vec<TrialDocument>, Vec<TrialDocument>)> {
        let corpus = self.corpus()?;
        match self.opt_path("split")? {
            None => Ok((corpus.clone(), corpus)),
            Some(p) => {
                let s = read_split(&p)?;
                let pick = |ids: &[String]| DatasetSplit::select(&corpus, ids).into_iter().cloned().collect::<Vec<_>>();
                Ok((pick(&s.train), pick(&s.test)))
            }
        }
    }

    fn checkpoint(&mut self) -> Result<(ModelState<f32>, Vocabulary)> {
        let p = self.path("checkpoint")?;
        read_checkpoint(&p)
    }

    fn store(&mut self) -> Result<Option<KnowledgeStore>> {
        match self.opt_path("store")? {
            Some(p) => Ok(Some(read_store(&p)?)),
            None => Ok(None),
        }
    }

    fn pipeline(&self) -> PipelineConfig {
        let c = &self.cfg;
        PipelineConfig {
            backbone: c.backbone.clone(),
            pretrain: c.pretrain.clone(),
            finetune: c.finetune.clone(),
            pretrain_data: c.pretrain_data.clone(),
            chain_len: c.data.chain_len,
            min_frequency: c.data.min_frequency,
            variant: c.variant,
            skip_pretrain: false,
        }
    }

    fn harness(&self) -> HarnessConfig {
        HarnessConfig {
            pipeline: self.pipeline(),
            incremental: self.cfg.lifecycle.incremental.clone(),
            eval: self.cfg.eval_config(),
            n_subsets: self.cfg.lifecycle.n_subsets,
            seed: self.cfg.lifecycle.seed,
        }
    }

    fn finish(self) -> Result<()> {
        write_manifest(&self.out, &self.inv.command, self.inv.extra_args(), &self.cfg, &self.inputs)?;
        log::info!("wrote {}", self.out.display());
        Ok(())
    }
}

pub fn run(inv: &Invocation) -> Result<()> {
    let cfg = inv.resolve()?;
    let out = cfg.paths.get("out").ok_or_else(|| UsageError("paths.out is required (--out)".into()))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut ctx = Ctx { inv, cfg, out, inputs: Vec::new() };
    match inv.command.as_str() {
        "synth" => synth(&mut ctx)?,
        "ingest" => ingest_cmd(&mut ctx)?,
        "split" => split_cmd(&mut ctx)?,
        "pretrain" => pretrain(&mut ctx)?,
        "finetune" => finetune(&mut ctx)?,
        "store" => store_cmd(&mut ctx)?,
        "generate" => generate(&mut ctx)?,
        "evaluate" => evaluate_cmd(&mut ctx)?,
        "extend" => extend(&mut ctx)?,
        "continual" => continual(&mut ctx)?,
        "ablate" => ablate(&mut ctx)?,
        "gradcheck" => gradcheck(&mut ctx)?,
        other => bail!(UsageError(format!("unknown command `{other}`"))),
    }
    ctx.finish()
}

fn synth(ctx: &mut Ctx) -> Result<()> {
    let schema = ctx.opt_path("schema")?;
    let cfg = SynthConfig {
        n_trials: ctx.cfg.synth.n_trials,
        seed: ctx.cfg.synth.seed,
        schema: read_schema(schema.as_deref())?,
    };
    let corpus = synthesize_corpus(&cfg)?;
    write_corpus(&ctx.out.join("corpus.jsonl"), &corpus)
}

fn ingest_cmd(ctx: &mut Ctx) -> Result<()> {
    let p = ctx.path("input")?;
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let (docs, stats) = ingest(&text)?;
    log::info!("kept {} of {} records", stats.kept, stats.lines);
    write_corpus(&ctx.out.join("corpus.jsonl"), &docs)?;
    #[derive(Serialize)]
    struct Stats {
        lines: usize,
        kept: usize,
        malformed: usize,
        dropped: usize,
    }
    write_json(
        &ctx.out.join("ingest_stats.json"),
        &Stats { lines: stats.lines, kept: stats.kept, malformed: stats.malformed, dropped: stats.dropped },
    )
}

fn split_cmd(ctx: &mut Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let s = split(&corpus, ctx.cfg.split.ratios, ctx.cfg.split.seed)?;
    write_split(&ctx.out.join("split.json"), &s)
}

/// Streams the training log and keeps the first write error.
struct StepSink {
    log: TrainLog,
    err: Option<anyhow::Error>,
}

impl StepSink {
    fn new(path: &Path) -> Result<Self> {
        Ok(Self { log: TrainLog::create(path)?, err: None })
    }

    fn step(&mut self, r: &autotrial_core::training::LossReport) {
        log::debug!("{r}");
        if self.err.is_none() {
            if let Err(e) = self.log.record(r) {
                self.err = Some(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.err {
            Some(e) => Err(e),
            None => self.log.finish(),
        }
    }
}

fn write_summary(path: &Path, s: Option<&TrainSummary>) -> Result<()> {
    write_json(path, &s)
}

fn pretrain(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let tags = ctx.tags(&parser);
    let (train_set, _) = ctx.splits()?;
    let mut sink = StepSink::new(&ctx.out.join("train_log.jsonl"))?;
    let (vocab, model, summary) = pretrain_stage(&train_set, &tags, &ctx.pipeline(), |r| sink.step(r))?;
    sink.finish()?;
    write_checkpoint(&ctx.out.join("checkpoint"), &model, &vocab)?;
    write_summary(&ctx.out.join("summary.json"), summary.as_ref())
}

fn finetune(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let (mut model, vocab) = ctx.checkpoint()?;
    let (train_set, _) = ctx.splits()?;
    let mut sink = StepSink::new(&ctx.out.join("train_log.jsonl"))?;
    let (store, _, summary) =
        finetune_stage(&mut model, &vocab, &train_set, &parser, &ctx.pipeline(), |r| sink.step(r))?;
    sink.finish()?;
    write_checkpoint(&ctx.out.join("checkpoint"), &model, &vocab)?;
    write_store(&ctx.out.join("store.jsonl"), &store)?;
    write_summary(&ctx.out.join("summary.json"), Some(&summary))
}

fn store_cmd(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let (model, vocab) = ctx.checkpoint()?;
    let (train_set, _) = ctx.splits()?;
    let (pairs, _) = extract_pairs(&train_set, &parser, ctx.cfg.data.chain_len);
    let pairs: Vec<_> = pairs.into_iter().filter(|p| model.registry.index(&p.instruction).is_ok()).collect();
    let store = KnowledgeStore::build(&model, &Assembler::new(&vocab, &model.registry), &train_set, &pairs)?;
    write_store(&ctx.out.join("store.jsonl"), &store)
}

fn generate(ctx: &mut Ctx) -> Result<()> {
    let (model, vocab) = ctx.checkpoint()?;
    let store = ctx.store()?;
    let corpus = ctx.corpus()?;
    let id = ctx.extra("trial-id").ok_or_else(|| UsageError("--trial-id is required".into()))?;
    let trial =
        corpus.iter().find(|t| t.trial_id == id).ok_or_else(|| UsageError(format!("no trial `{id}` in corpus")))?;
    let g = Generator {
        state: &model,
        assembler: Assembler::new(&vocab, &model.registry),
        store: store.as_ref(),
        variant: ctx.cfg.variant,
    };
    let report = match ctx.extra("instruction") {
        Some(tag) => {
            if model.registry.index(tag).is_err() {
                bail!(UsageError(format!("instruction `{tag}` is not registered in the checkpoint")));
            }
            g.generate_criteria(trial, tag, &ctx.cfg.generation, &[])?
        }
        None => g.generate_trial(trial, ctx.cfg.eval.trial_max_new_tokens)?,
    };
    write_jsonl(&ctx.out.join("generation.jsonl"), [GenerationRecord::of(&report, &vocab)])
}

/// Generates evaluation items for contiguous chunks of `trials` on `threads`
/// threads and scores all items together. Results equal the serial run.
pub fn evaluate_parallel(
    generator: &Generator<'_, f32>,
    parser: &CriteriaParser,
    trials: &[TrialDocument],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<Evaluation> {
    if trials.is_empty() {
        bail!("no trials to evaluate");
    }
    let chunk = trials.len().div_ceil(threads.max(1));
    let parts: Vec<Result<Vec<ItemResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = trials
            .chunks(chunk)
            .map(|c| s.spawn(move || evaluation_items(generator, parser, c, cfg).map_err(anyhow::Error::from)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("evaluation worker panicked")))).collect()
    });
    let mut items = Vec::new();
    for p in parts {
        items.extend(p?);
    }
    let docs: Vec<Vec<String>> = trials.iter().flat_map(|t| t.criteria().map(|c| lex(&c.text))).collect();
    Ok(score_items(items, cfg.level, cfg.group_by_disease, &CiderIdf::new(&docs))?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

/// Plain-text table: one row per polarity and group.
pub fn report_table(ev: &Evaluation) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<10} {:<28} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6} {:>6}",
        "level", "polarity", "group", "trials", "items", "B1", "METEOR", "ROUGE-L", "CIDEr", "P", "R", "F1", "Jac"
    );
    for r in &ev.reports {
        let c = r.clinical;
        let _ = writeln!(
            s,
            "{:<8} {:<10} {:<28} {:>6} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6} {:>6} {:>6} {:>6}",
            r.level.name(),
            r.polarity.name(),
            r.group.as_deref().unwrap_or("all"),
            r.n_trials,
            r.n_items,
            r.bleu1,
            r.meteor,
            r.rouge_l,
            r.cider,
            opt(c.map(|c| c.precision)),
            opt(c.map(|c| c.recall)),
            opt(c.map(|c| c.f1)),
            opt(c.map(|c| c.jaccard)),
        );
    }
    if let Some(f) = ev.instruction_following {
        let _ = writeln!(s, "instruction following: {f:.4}");
    }
    if let Ok(c) = ev.pooled_clinical() {
        let _ =
            writeln!(s, "pooled relations: P {:.4} R {:.4} F1 {:.4} Jac {:.4}", c.precision, c.recall, c.f1, c.jaccard);
    }
    s
}

pub fn quartiles_csv(ev: &Evaluation) -> String {
    let mut s = String::from("polarity,metric,min,q1,median,q3,max\n");
    for g in &ev.summaries {
        let q = g.quartiles;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", g.polarity.name(), g.metric, q.min, q.q1, q.median, q.q3, q.max);
    }
    s
}

fn write_evaluation(out: &Path, ev: &Evaluation) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        level: &'static str,
        instruction_following: Option<f64>,
        pooled: Option<autotrial_core::metrics::Clinical>,
        reports: &'a [autotrial_core::metrics::MetricReport],
        summaries: &'a [autotrial_core::metrics::GroupSummary],
    }
    write_json(
        &out.join("report.json"),
        &Report {
            level: ev.level.name(),
            instruction_following: ev.instruction_following,
            pooled: ev.pooled_clinical().ok(),
            reports: &ev.reports,
            summaries: &ev.summaries,
        },
    )?;
    write_bytes(&out.join("report.txt"), report_table(ev).as_bytes())?;
    write_bytes(&out.join("quartiles.csv"), quartiles_csv(ev).as_bytes())?;
    write_jsonl(&out.join("items.jsonl"), &ev.items)
}

fn evaluate_cmd(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let (model, vocab) = ctx.checkpoint()?;
    let store = ctx.store()?;
    let (_, test) = ctx.splits()?;
    let g = Generator {
        state: &model,
        assembler: Assembler::new(&vocab, &model.registry),
        store: store.as_ref(),
        variant: ctx.cfg.variant,
    };
    let ev = evaluate_parallel(&g, &parser, &test, &ctx.cfg.eval_config(), ctx.cfg.threads)?;
    write_evaluation(&ctx.out, &ev)
}

fn extend(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let (mut model, mut vocab) = ctx.checkpoint()?;
    let mut store = ctx.store()?.ok_or_else(|| UsageError("paths.store is required (--store)".into()))?;
    let (train_set, _) = ctx.splits()?;
    let new_tags: Vec<String> = ctx
        .extra("new-tags")
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    let (pairs, _) = extract_pairs(&train_set, &parser, ctx.cfg.data.chain_len);
    let new_pairs: Vec<_> = pairs.into_iter().filter(|p| new_tags.contains(&p.instruction)).collect();
    extend_instructions(&mut model, &mut vocab, &new_tags)?;
    let mut sink = StepSink::new(&ctx.out.join("train_log.jsonl"))?;
    let report = incremental_update(
        &mut model,
        &vocab,
        &mut store,
        &train_set,
        &new_pairs,
        &ctx.cfg.lifecycle.incremental,
        ctx.cfg.variant,
        |r| sink.step(r),
    )?;
    sink.finish()?;
    write_checkpoint(&ctx.out.join("checkpoint"), &model, &vocab)?;
    write_store(&ctx.out.join("store.jsonl"), &store)?;
    write_json(&ctx.out.join("update_report.json"), &report)
}

fn continual(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let tags = ctx.tags(&parser);
    let (train_set, test) = ctx.splits()?;
    let rep = continual_harness(&train_set, &test, &parser, &tags, &ctx.harness())?;
    let mut csv = String::from("variant,step,metric,value\n");
    for p in &rep.points {
        let _ = writeln!(csv, "{},{},{},{}", p.variant, p.step, p.metric, p.value);
    }
    write_bytes(&ctx.out.join("curves.csv"), csv.as_bytes())?;
    write_json(&ctx.out.join("continual.json"), &rep)
}

fn ablate(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let tags = ctx.tags(&parser);
    let (train_set, test) = ctx.splits()?;
    let reps = ablation_harness(&train_set, &test, &parser, &tags, &ctx.harness())?;
    let mut txt = String::new();
    for r in &reps {
        let _ = writeln!(txt, "== {} ==\n{}", r.name, report_table(&r.evaluation));
    }
    write_bytes(&ctx.out.join("report.txt"), txt.as_bytes())?;
    write_json(&ctx.out.join("ablation.json"), &reps)
}

fn gradcheck(ctx: &mut Ctx) -> Result<()> {
    let parser = ctx.parser()?;
    let tags = ctx.tags(&parser);
    let corpus = match ctx.opt_path("corpus")? {
        Some(p) => read_corpus(&p)?,
        None => synthesize_corpus(&SynthConfig {
            n_trials: ctx.cfg.gradcheck.n_trials,
            seed: ctx.cfg.gradcheck.seed,
            schema: parser.schema().clone(),
        })?,
    };
    let pc = PipelineConfig { skip_pretrain: true, backbone: ctx.cfg.gradcheck.backbone.clone(), ..ctx.pipeline() };
    let (vocab, model, _) = pretrain_stage(&corpus, &tags, &pc, |_| {})?;
    let (pairs, _) = extract_pairs(&corpus, &parser, ctx.cfg.data.chain_len);
    let pairs: Vec<_> = pairs.into_iter().filter(|p| model.registry.index(&p.instruction).is_ok()).collect();
    let a = Assembler::new(&vocab, &model.registry);
    let mut seqs = finetune_sequences(&model, &a, &corpus, &pairs, None, ctx.cfg.variant)?;
    seqs.truncate(ctx.cfg.gradcheck.batch);
    if seqs.is_empty() {
        bail!("no sequences to check");
    }
    let model64: ModelState<f64> = model.cast();
    let obj = Objective { use_prompt: ctx.cfg.variant.prompt, ..Objective::finetune(ctx.cfg.finetune.margin) };
    let rep = grad_check(&model64, &seqs, &obj, ctx.cfg.gradcheck.probes, ctx.cfg.gradcheck.seed)?;
    log::info!("max relative error {:.3e} over {} probes", rep.max_rel_err, rep.probes.len());
    #[derive(Serialize)]
    struct Probe<'a> {
        tensor: &'a str,
        index: usize,
        analytic: f64,
        numeric: f64,
        frozen: bool,
        rel_err: f64,
    }
    #[derive(Serialize)]
    struct Out<'a> {
        params: usize,
        max_rel_err: f64,
        probes: Vec<Probe<'a>>,
    }
    let probes = rep
        .probes
        .iter()
        .map(|p| Probe {
            tensor: &p.tensor,
            index: p.index,
            analytic: p.analytic,
            numeric: p.numeric,
            frozen: p.frozen,
            rel_err: p.rel_err,
        })
        .collect();
    write_json(
        &ctx.out.join("gradcheck.json"),
        &Out { params: model.param_count(), max_rel_err: rep.max_rel_err, probes },
    )
}
