//! Text-overlap metrics, clinical relation accuracy, and the criteria-level
//! and trial-level evaluation protocols.

mod eval;

pub use eval::{
    evaluate, evaluation_items, score_items, EvalConfig, Evaluation, GroupSummary, ItemResult, Level, MetricReport,
};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::criteria::{compare_sets, Relation, SetCounts};
use crate::error::{Error, Result};

type Gram<'a> = Vec<&'a str>;

fn counts<'a>(toks: &'a [String], n: usize) -> BTreeMap<Gram<'a>, usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(String::as_str).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-1 ×100: clipped unigram precision times the brevity penalty, with
/// the reference length closest to the candidate's (shorter on ties).
pub fn bleu1(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let c = counts(candidate, 1);
    let mut max_ref: BTreeMap<Gram<'_>, usize> = BTreeMap::new();
    for r in references {
        for (g, n) in counts(r, 1) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(n);
        }
    }
    let clipped: usize = c.iter().map(|(g, &n)| n.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    let cl = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by(|&a, &b| (a as f64 - cl).abs().partial_cmp(&(b as f64 - cl).abs()).unwrap().then(a.cmp(&b)))
        .unwrap() as f64;
    let bp = num_traits::Float::exp((1.0 - r / cl).min(0.0));
    100.0 * bp * clipped as f64 / cl
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = prev.clone();
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L ×100: LCS F-measure `(1+β²)RP / (R+β²P)` with β = 1.2.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / candidate.len() as f64, l / reference.len() as f64);
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * r * p / (r + b2 * p)
}

/// Suffix-stripping stem used by the second METEOR matching stage.
pub fn stem(w: &str) -> String {
    let n = w.chars().count();
    if !w.chars().all(|c| c.is_ascii_alphabetic()) || n <= 3 {
        return w.into();
    }
    if let Some(s) = w.strip_suffix("ies").filter(|_| n > 4) {
        return alloc::format!("{s}y");
    }
    if w.ends_with("sses") {
        return w[..w.len() - 2].into();
    }
    for suf in ["ing", "ed", "ly"] {
        if let Some(s) = w.strip_suffix(suf).filter(|s| s.len() >= 3) {
            return s.into();
        }
    }
    if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") {
        return w[..w.len() - 1].into();
    }
    w.into()
}

/// Alignment statistics behind [`meteor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Exact matches first, then stem matches among the leftovers; each stage
/// pairs a candidate word with the leftmost free reference word.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut to_ref: Vec<Option<usize>> = alloc::vec![None; candidate.len()];
    let mut used = alloc::vec![false; reference.len()];
    let cs: Vec<String> = candidate.iter().map(|w| stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        for (i, w) in candidate.iter().enumerate() {
            if to_ref[i].is_some() {
                continue;
            }
            let hit = (0..reference.len())
                .find(|&j| !used[j] && if stage == 0 { *w == reference[j] } else { cs[i] == rs[j] });
            if let Some(j) = hit {
                used[j] = true;
                to_ref[i] = Some(j);
            }
        }
    }
    let matches = to_ref.iter().filter(|m| m.is_some()).count();
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for m in &to_ref {
        match (*m, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *m;
    }
    Alignment { matches, chunks }
}

/// METEOR ×100: `F_mean = 10PR / (R + 9P)` times `1 - 0.5 (chunks/m)³`.
pub fn meteor(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = align(candidate, reference);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let (p, r) = (m / candidate.len() as f64, m / reference.len() as f64);
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let frag = a.chunks as f64 / m;
    100.0 * fmean * (1.0 - 0.5 * frag * frag * frag)
}

/// Document frequencies of 1..4-grams over a reference corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CiderIdf {
    df: [BTreeMap<Vec<String>, usize>; 4],
    n_docs: usize,
}

impl CiderIdf {
    pub fn new(documents: &[Vec<String>]) -> Self {
        let mut df: [BTreeMap<Vec<String>, usize>; 4] = Default::default();
        for doc in documents {
            for (n, table) in df.iter_mut().enumerate() {
                let grams: BTreeSet<Vec<String>> =
                    counts(doc, n + 1).into_keys().map(|g| g.into_iter().map(String::from).collect()).collect();
                for g in grams {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Self { df, n_docs: documents.len() }
    }

    /// `ln(N / max(df, 1))`.
    pub fn idf(&self, gram: &[&str]) -> f64 {
        let key: Vec<String> = gram.iter().map(|s| String::from(*s)).collect();
        let df = self.df[gram.len() - 1].get(&key).copied().unwrap_or(0).max(1);
        num_traits::Float::ln(self.n_docs.max(1) as f64 / df as f64)
    }

    fn vector<'a>(&self, toks: &'a [String], n: usize) -> BTreeMap<Gram<'a>, f64> {
        counts(toks, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * self.idf(&g);
                (g, w)
            })
            .collect()
    }
}

fn cosine_map(a: &BTreeMap<Gram<'_>, f64>, b: &BTreeMap<Gram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = num_traits::Float::sqrt(a.values().map(|x| x * x).sum::<f64>());
    let nb = num_traits::Float::sqrt(b.values().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr ×10: mean over n = 1..4 of the mean TF-IDF cosine to each reference.
pub fn cider(candidate: &[String], references: &[Vec<String>], idf: &CiderIdf) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=4 {
        let vc = idf.vector(candidate, n);
        let s: f64 = references.iter().map(|r| cosine_map(&vc, &idf.vector(r, n))).sum();
        total += s / references.len() as f64;
    }
    10.0 * total / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Clinical {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub jaccard: f64,
}

impl Clinical {
    pub fn from_counts(c: SetCounts) -> Result<Self> {
        if c.tp + c.fn_ == 0 {
            return Err(Error::Empty("gold relations"));
        }
        let union = c.tp + c.fp + c.fn_;
        Ok(Self { precision: c.precision(), recall: c.recall(), f1: c.f1(), jaccard: c.tp as f64 / union as f64 })
    }
}

/// Micro-averaged relation accuracy over `(predicted, gold)` pairs.
pub fn clinical_accuracy(pairs: &[(BTreeSet<Relation>, BTreeSet<Relation>)]) -> Result<Clinical> {
    let mut c = SetCounts::default();
    for (p, g) in pairs {
        c += compare_sets(p, g);
    }
    Clinical::from_counts(c)
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let lo = num_traits::Float::floor(x) as usize;
            let hi = (lo + 1).min(v.len() - 1);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Some(Self { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1] })
    }
}

#[cfg(test)]
mod tests;
