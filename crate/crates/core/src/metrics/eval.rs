use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use super::{bleu1, cider, meteor, rouge_l, CiderIdf, Clinical, Quartiles};
use crate::corpus::{Criterion, Polarity, TrialDocument};
use crate::criteria::{compare_sets, CriteriaParser, Relation, SetCounts};
use crate::error::{Error, Result};
use crate::generation::{GenerationConfig, GenerationReport, Generator};
use crate::lexer::lex;
use crate::math::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Level {
    Criteria,
    Trial,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Criteria => "criteria",
            Level::Trial => "trial",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct EvalConfig {
    pub level: Level,
    pub generation: GenerationConfig,
    /// Gold words forced at the start of each criteria-level output.
    pub prefix_len: usize,
    pub group_by_disease: bool,
    pub trial_max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level: Level::Criteria,
            generation: GenerationConfig::default(),
            prefix_len: 3,
            group_by_disease: false,
            trial_max_new_tokens: 128,
        }
    }
}

/// One scored comparison: a criteria-level request or one polarity of a
/// trial-level output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ItemResult {
    pub trial_id: String,
    pub disease: String,
    pub polarity: Polarity,
    pub instruction: Option<String>,
    pub candidate: String,
    pub reference: String,
    pub pred: BTreeSet<Relation>,
    pub gold: BTreeSet<Relation>,
    /// Whether the output parses to the requested attribute.
    pub follows: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub level: Level,
    pub polarity: Polarity,
    pub group: Option<String>,
    pub n_trials: usize,
    pub n_items: usize,
    pub bleu1: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Absent when the items carry no gold relations.
    pub clinical: Option<Clinical>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupSummary {
    pub polarity: Polarity,
    pub metric: String,
    pub quartiles: Quartiles,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub level: Level,
    /// Overall reports per polarity, then per-group reports.
    pub reports: Vec<MetricReport>,
    pub summaries: Vec<GroupSummary>,
    /// Fraction of criteria-level requests answered with the requested
    /// attribute.
    pub instruction_following: Option<f64>,
    pub items: Vec<ItemResult>,
}

impl Evaluation {
    pub fn overall(&self, polarity: Polarity) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.group.is_none() && r.polarity == polarity)
    }

    /// Micro relation accuracy pooled over both polarities.
    pub fn pooled_clinical(&self) -> Result<Clinical> {
        let mut c = SetCounts::default();
        for it in &self.items {
            c += compare_sets(&it.pred, &it.gold);
        }
        Clinical::from_counts(c)
    }
}

fn gold_of(trial: &TrialDocument, idx: usize, c: &Criterion, parser: &CriteriaParser) -> BTreeSet<Relation> {
    if trial.gold_relations.is_empty() {
        parser.parse_criterion(&c.text)
    } else {
        trial.gold_for(idx)
    }
}

fn best_output(r: &GenerationReport) -> Option<Criterion> {
    let mut best: Option<(f64, &Criterion)> = None;
    for (k, &i) in r.selected.iter().enumerate() {
        if let Some(t) = r.outputs[k].target.as_ref() {
            let ppl = r.candidates[i].ppl;
            if best.is_none_or(|b| ppl < b.0) {
                best = Some((ppl, t));
            }
        }
    }
    best.map(|b| b.1.clone())
}

/// Runs generation over `trials` and scores it. Criteria level issues one
/// request per criterion whose attribute is a registered instruction and
/// scores the lowest-perplexity selected output; trial level decodes each
/// trial once and scores each polarity's concatenated criteria.
pub fn evaluate<T: Real>(
    generator: &Generator<'_, T>,
    parser: &CriteriaParser,
    trials: &[TrialDocument],
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if trials.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let items = evaluation_items(generator, parser, trials, cfg)?;
    let idf_docs: Vec<Vec<String>> = trials.iter().flat_map(|t| t.criteria().map(|c| lex(&c.text))).collect();
    score_items(items, cfg.level, cfg.group_by_disease, &CiderIdf::new(&idf_docs))
}

/// The generation half of [`evaluate`]: unscored items in trial order.
/// Items of a trial depend only on that trial, so chunks of a split can be
/// processed independently and concatenated.
pub fn evaluation_items<T: Real>(
    generator: &Generator<'_, T>,
    parser: &CriteriaParser,
    trials: &[TrialDocument],
    cfg: &EvalConfig,
) -> Result<Vec<ItemResult>> {
    let vocab = generator.assembler.vocab;
    let registry = generator.assembler.registry;
    let mut items = Vec::new();
    for trial in trials {
        match cfg.level {
            Level::Criteria => {
                for (idx, c) in trial.criteria().enumerate() {
                    let Some(tag) = c.attribute.clone().or_else(|| parser.primary_attribute(&c.text)) else {
                        continue;
                    };
                    if registry.index(&tag).is_err() {
                        continue;
                    }
                    let words = vocab.tokenize(&c.text);
                    let prefix = &words[..cfg.prefix_len.min(words.len())];
                    let report = generator.generate_criteria(trial, &tag, &cfg.generation, prefix)?;
                    let out = best_output(&report);
                    let text = out.map(|o| o.text).unwrap_or_default();
                    let pred = parser.parse_criterion(&text);
                    let follows = pred.iter().any(|r| r.attribute == tag);
                    items.push(ItemResult {
                        trial_id: trial.trial_id.clone(),
                        disease: trial.disease.clone(),
                        polarity: c.polarity,
                        instruction: Some(tag),
                        candidate: text,
                        reference: c.text.clone(),
                        pred,
                        gold: gold_of(trial, idx, c, parser),
                        follows: Some(follows),
                    });
                }
            }
            Level::Trial => {
                let report = generator.generate_trial(trial, cfg.trial_max_new_tokens)?;
                let generated = report.outputs[0].all();
                for pol in [Polarity::Inclusion, Polarity::Exclusion] {
                    let pred_c: Vec<&Criterion> = generated.iter().filter(|c| c.polarity == pol).collect();
                    let mut gold = BTreeSet::new();
                    let mut refs = Vec::new();
                    for (idx, c) in trial.criteria().enumerate().filter(|(_, c)| c.polarity == pol) {
                        gold.extend(gold_of(trial, idx, c, parser));
                        refs.push(c.text.as_str());
                    }
                    items.push(ItemResult {
                        trial_id: trial.trial_id.clone(),
                        disease: trial.disease.clone(),
                        polarity: pol,
                        instruction: None,
                        candidate: pred_c.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" "),
                        reference: refs.join(" "),
                        pred: parser.relation_set(pred_c.iter().map(|c| c.text.as_str())),
                        gold,
                        follows: None,
                    });
                }
            }
        }
    }
    Ok(items)
}

type MetricField = (&'static str, fn(&MetricReport) -> Option<f64>);

fn report(
    level: Level,
    polarity: Polarity,
    group: Option<String>,
    items: &[&ItemResult],
    idf: &CiderIdf,
) -> MetricReport {
    let n = items.len().max(1) as f64;
    let (mut b, mut m, mut r, mut c) = (0.0, 0.0, 0.0, 0.0);
    let mut counts = SetCounts::default();
    for it in items {
        let cand = lex(&it.candidate);
        let refr = lex(&it.reference);
        let refs = [refr.clone()];
        b += bleu1(&cand, &refs);
        m += meteor(&cand, &refr);
        r += rouge_l(&cand, &refr);
        c += cider(&cand, &refs, idf);
        counts += compare_sets(&it.pred, &it.gold);
    }
    let trials: BTreeSet<&str> = items.iter().map(|i| i.trial_id.as_str()).collect();
    MetricReport {
        level,
        polarity,
        group,
        n_trials: trials.len(),
        n_items: items.len(),
        bleu1: b / n,
        meteor: m / n,
        rouge_l: r / n,
        cider: c / n,
        clinical: Clinical::from_counts(counts).ok(),
    }
}

/// Aggregates scored items into per-polarity reports, optionally per
/// disease, with quartile summaries across diseases.
pub fn score_items(items: Vec<ItemResult>, level: Level, group_by_disease: bool, idf: &CiderIdf) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation items"));
    }
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    for pol in [Polarity::Inclusion, Polarity::Exclusion] {
        let sel: Vec<&ItemResult> = items.iter().filter(|i| i.polarity == pol).collect();
        if sel.is_empty() {
            continue;
        }
        reports.push(report(level, pol, None, &sel, idf));
        if group_by_disease {
            let mut groups: BTreeMap<&str, Vec<&ItemResult>> = BTreeMap::new();
            for it in &sel {
                groups.entry(it.disease.as_str()).or_default().push(it);
            }
            let group_reports: Vec<MetricReport> =
                groups.iter().map(|(g, its)| report(level, pol, Some((*g).into()), its, idf)).collect();
            let metrics: [MetricField; 5] = [
                ("bleu1", |r| Some(r.bleu1)),
                ("meteor", |r| Some(r.meteor)),
                ("rouge_l", |r| Some(r.rouge_l)),
                ("cider", |r| Some(r.cider)),
                ("f1", |r| r.clinical.map(|c| c.f1)),
            ];
            for (name, get) in metrics {
                let vals: Vec<f64> = group_reports.iter().filter_map(get).collect();
                if let Some(q) = Quartiles::of(&vals) {
                    summaries.push(GroupSummary { polarity: pol, metric: name.into(), quartiles: q });
                }
            }
            reports.extend(group_reports);
        }
    }
    let follow: Vec<bool> = items.iter().filter_map(|i| i.follows).collect();
    let instruction_following =
        (!follow.is_empty()).then(|| follow.iter().filter(|&&f| f).count() as f64 / follow.len() as f64);
    Ok(Evaluation { level, reports, summaries, instruction_following, items })
}
