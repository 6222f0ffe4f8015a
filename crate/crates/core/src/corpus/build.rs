use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{Criterion, DatasetSplit, InstructionCriterionPair, TrialDocument};
use crate::criteria::CriteriaParser;
use crate::error::{Error, Result};
use crate::rng;

/// One pretraining sample `(x_s, x_e, y_t, y_c)`; `x_s` is looked up from
/// the trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainSample {
    pub trial_id: String,
    /// Same-trial criteria shown as the exemplar, in document order.
    pub exemplar: Vec<Criterion>,
    /// All criteria except the target, in document order.
    pub rationale: Vec<Criterion>,
    pub target: Criterion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PretrainConfig {
    /// Targets sampled per trial; `None` uses every criterion.
    pub targets_per_trial: Option<usize>,
    /// Size of `x_e` drawn from the trial's other criteria.
    pub exemplar_count: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { targets_per_trial: None, exemplar_count: 2, seed: 0 }
    }
}

/// Pretraining samples from `corpus`. Only trials in `allowed` (the training
/// split) contribute when given. Trials with fewer than two criteria yield
/// nothing.
pub fn build_pretrain_set(
    corpus: &[TrialDocument],
    allowed: Option<&[String]>,
    cfg: &PretrainConfig,
) -> Vec<PretrainSample> {
    let allowed: Option<BTreeSet<&str>> = allowed.map(|a| a.iter().map(String::as_str).collect());
    let mut out = Vec::new();
    for trial in corpus {
        if allowed.as_ref().is_some_and(|a| !a.contains(trial.trial_id.as_str())) {
            continue;
        }
        let all: Vec<&Criterion> = trial.criteria().collect();
        if all.len() < 2 {
            log::info!("trial {} has {} criterion; no pretraining sample", trial.trial_id, all.len());
            continue;
        }
        let mut rng = rng::stream(cfg.seed, &trial.trial_id);
        let mut targets: Vec<usize> = (0..all.len()).collect();
        if let Some(k) = cfg.targets_per_trial {
            targets.shuffle(&mut rng);
            targets.truncate(k);
            targets.sort_unstable();
        }
        for t in targets {
            let others: Vec<usize> = (0..all.len()).filter(|&i| i != t).collect();
            let mut pick = others.clone();
            pick.shuffle(&mut rng);
            pick.truncate(cfg.exemplar_count);
            pick.sort_unstable();
            out.push(PretrainSample {
                trial_id: trial.trial_id.clone(),
                exemplar: pick.iter().map(|&i| all[i].clone()).collect(),
                rationale: others.iter().map(|&i| all[i].clone()).collect(),
                target: all[t].clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairStats {
    pub pairs: usize,
    pub skipped: usize,
}

/// One instruction/criterion pair per parseable criterion. The rationale
/// chain is up to `chain_len` criteria preceding the target in document
/// order.
pub fn extract_pairs(
    corpus: &[TrialDocument],
    parser: &CriteriaParser,
    chain_len: usize,
) -> (Vec<InstructionCriterionPair>, PairStats) {
    let mut out = Vec::new();
    let mut stats = PairStats::default();
    for trial in corpus {
        let all: Vec<&Criterion> = trial.criteria().collect();
        for (i, c) in all.iter().enumerate() {
            let Some(tag) = parser.primary_attribute(&c.text) else {
                stats.skipped += 1;
                continue;
            };
            let start = i.saturating_sub(chain_len);
            out.push(InstructionCriterionPair {
                trial_id: trial.trial_id.clone(),
                instruction: tag.clone(),
                target: Criterion { attribute: Some(tag), ..(*c).clone() },
                rationale_chain: all[start..i].iter().map(|&c| c.clone()).collect(),
            });
        }
    }
    stats.pairs = out.len();
    (out, stats)
}

/// Seeded shuffle, then largest-remainder sizing of train/valid/test.
pub fn split(corpus: &[TrialDocument], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(alloc::format!("split ratios sum to {sum}, not 1")));
    }
    let n = corpus.len();
    let mut sizes = [0usize; 3];
    let mut rem = [0f64; 3];
    for i in 0..3 {
        let exact = n as f64 * ratios[i];
        sizes[i] = num_traits::Float::floor(exact) as usize;
        rem[i] = exact - sizes[i] as f64;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].partial_cmp(&rem[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    let mut ids: Vec<String> = corpus.iter().map(|t| t.trial_id.clone()).collect();
    let mut r = rng::stream(seed, "split");
    ids.shuffle(&mut r);
    let test = ids.split_off(sizes[0] + sizes[1]);
    let valid = ids.split_off(sizes[0]);
    Ok(DatasetSplit { train: ids, valid, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, Polarity, SynthConfig};
    use crate::criteria::AttributeSchema;
    use alloc::string::ToString;
    use alloc::vec;

    fn trial(id: &str, n: usize) -> TrialDocument {
        TrialDocument {
            trial_id: id.into(),
            title: "t".into(),
            disease: "d".into(),
            treatment: "r".into(),
            inclusion: (0..n).map(|i| Criterion::new(alloc::format!("c{i}"), Polarity::Inclusion)).collect(),
            exclusion: vec![],
            gold_relations: vec![],
        }
    }

    #[test]
    fn construction_rule_on_three_criteria() {
        let corpus = vec![trial("T1", 3)];
        let cfg = PretrainConfig { exemplar_count: 5, ..Default::default() };
        let s = build_pretrain_set(&corpus, None, &cfg);
        assert_eq!(s.len(), 3);
        let last = &s[2];
        assert_eq!(last.target.text, "c2");
        assert_eq!(last.rationale.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), ["c0", "c1"]);
        assert_eq!(last.exemplar, last.rationale);
        assert!(build_pretrain_set(&[trial("T2", 1)], None, &cfg).is_empty());
    }

    #[test]
    fn pretrain_count_matches_enumeration_and_respects_split() {
        let schema = AttributeSchema::default();
        let corpus = synthesize_corpus(&SynthConfig { n_trials: 200, seed: 7, schema }).unwrap();
        let s = build_pretrain_set(&corpus, None, &PretrainConfig::default());
        let mut oracle = 0;
        for t in &corpus {
            let n = t.inclusion.len() + t.exclusion.len();
            if n >= 2 {
                for _target in 0..n {
                    oracle += 1;
                }
            }
        }
        assert_eq!(s.len(), oracle);

        let sp = split(&corpus, [0.72, 0.08, 0.20], 3).unwrap();
        let s = build_pretrain_set(
            &corpus,
            Some(&sp.train),
            &PretrainConfig { targets_per_trial: Some(1), ..Default::default() },
        );
        assert_eq!(s.len(), sp.train.len());
        let held: BTreeSet<&String> = sp.valid.iter().chain(&sp.test).collect();
        assert!(s.iter().all(|x| !held.contains(&x.trial_id)));
        assert!(s.iter().all(|x| !x.rationale.contains(&x.target)));
    }

    #[test]
    fn split_sizes_and_errors() {
        let corpus: Vec<TrialDocument> = (0..10).map(|i| trial(&alloc::format!("T{i}"), 1)).collect();
        let s = split(&corpus, [0.72, 0.08, 0.20], 1).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (7, 1, 2));
        assert_eq!(split(&corpus, [0.72, 0.08, 0.20], 1).unwrap(), s);
        let mut all: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).cloned().collect();
        all.sort();
        let mut ids: Vec<String> = corpus.iter().map(|t| t.trial_id.to_string()).collect();
        ids.sort();
        assert_eq!(all, ids);
        assert!(split(&corpus, [0.5, 0.5, 0.5], 1).is_err());
        assert!(split(&corpus, [1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn pairs_follow_gold_attributes() {
        let schema = AttributeSchema::default();
        let parser = CriteriaParser::new(schema.clone()).unwrap();
        let corpus = synthesize_corpus(&SynthConfig { n_trials: 50, seed: 11, schema }).unwrap();
        let (pairs, stats) = extract_pairs(&corpus, &parser, 2);
        let oracle = corpus.iter().flat_map(|t| t.criteria()).filter(|c| c.attribute.is_some()).count();
        assert_eq!(pairs.len(), oracle);
        assert_eq!(stats.pairs + stats.skipped, corpus.iter().map(|t| t.n_criteria()).sum::<usize>());
        for p in &pairs {
            assert_eq!(p.target.attribute.as_deref(), Some(p.instruction.as_str()));
            assert!(!p.rationale_chain.contains(&p.target));
            assert!(p.rationale_chain.len() <= 2);
        }

        let t = TrialDocument {
            inclusion: vec![
                Criterion::new("NYHA class is above II", Polarity::Inclusion),
                Criterion::new("patient consents in writing", Polarity::Inclusion),
            ],
            ..trial("X", 0)
        };
        let (pairs, stats) = extract_pairs(&[t], &parser, 2);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].instruction, "nyha");
        assert_eq!(stats.skipped, 1);
    }
}
