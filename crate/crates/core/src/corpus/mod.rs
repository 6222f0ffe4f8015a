//! Trial documents, dataset construction and splitting.

mod build;
mod synth;

pub use build::{build_pretrain_set, extract_pairs, split, PairStats, PretrainConfig, PretrainSample};
pub use synth::{synthesize_corpus, SynthConfig};

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::criteria::Relation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Polarity {
    Inclusion,
    Exclusion,
}

impl Polarity {
    pub fn name(self) -> &'static str {
        match self {
            Polarity::Inclusion => "inclusion",
            Polarity::Exclusion => "exclusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Criterion {
    pub text: String,
    pub polarity: Polarity,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub attribute: Option<String>,
}

impl Criterion {
    pub fn new(text: impl Into<String>, polarity: Polarity) -> Self {
        Self { text: text.into(), polarity, attribute: None }
    }

    pub fn with_attribute(mut self, tag: impl Into<String>) -> Self {
        self.attribute = Some(tag.into());
        self
    }
}

/// A gold relation pinned to the criterion that realizes it. `criterion`
/// indexes [`TrialDocument::criteria`] (inclusion first, then exclusion).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GoldRelation {
    pub criterion: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialDocument {
    pub trial_id: String,
    pub title: String,
    pub disease: String,
    pub treatment: String,
    pub inclusion: Vec<Criterion>,
    pub exclusion: Vec<Criterion>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub gold_relations: Vec<GoldRelation>,
}

impl TrialDocument {
    /// Inclusion criteria followed by exclusion criteria.
    pub fn criteria(&self) -> impl Iterator<Item = &Criterion> {
        self.inclusion.iter().chain(&self.exclusion)
    }

    pub fn n_criteria(&self) -> usize {
        self.inclusion.len() + self.exclusion.len()
    }

    pub fn criterion(&self, idx: usize) -> Option<&Criterion> {
        self.inclusion.get(idx).or_else(|| idx.checked_sub(self.inclusion.len()).and_then(|j| self.exclusion.get(j)))
    }

    pub fn gold_for(&self, idx: usize) -> BTreeSet<Relation> {
        self.gold_relations.iter().filter(|g| g.criterion == idx).map(|g| g.relation.clone()).collect()
    }

    /// Gold relations of one polarity block.
    pub fn gold_set(&self, polarity: Polarity) -> BTreeSet<Relation> {
        let n_inc = self.inclusion.len();
        self.gold_relations
            .iter()
            .filter(|g| (g.criterion < n_inc) == (polarity == Polarity::Inclusion))
            .map(|g| g.relation.clone())
            .collect()
    }

    pub fn block(&self, polarity: Polarity) -> &[Criterion] {
        match polarity {
            Polarity::Inclusion => &self.inclusion,
            Polarity::Exclusion => &self.exclusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trial_id.is_empty() {
            return Err(Error::Invalid("trial_id is empty".into()));
        }
        if self.n_criteria() == 0 {
            return Err(Error::Invalid(alloc::format!("trial {} has no criteria", self.trial_id)));
        }
        for (p, block) in [(Polarity::Inclusion, &self.inclusion), (Polarity::Exclusion, &self.exclusion)] {
            if let Some(c) = block.iter().find(|c| c.polarity != p || c.text.trim().is_empty()) {
                return Err(Error::Invalid(alloc::format!(
                    "trial {}: criterion {:?} is empty or in the wrong block",
                    self.trial_id,
                    c.text
                )));
            }
        }
        Ok(())
    }
}

/// Checks per-document invariants and trial_id uniqueness.
pub fn validate_corpus(corpus: &[TrialDocument]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for t in corpus {
        t.validate()?;
        if !ids.insert(t.trial_id.as_str()) {
            return Err(Error::Invalid(alloc::format!("duplicate trial_id {}", t.trial_id)));
        }
    }
    Ok(())
}

/// One finetuning example: produce `target` for `instruction`, preceded by
/// the rationale chain.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstructionCriterionPair {
    pub trial_id: String,
    pub instruction: String,
    pub target: Criterion,
    pub rationale_chain: Vec<Criterion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Documents of `ids`, in corpus order.
    pub fn select<'a>(corpus: &'a [TrialDocument], ids: &[String]) -> Vec<&'a TrialDocument> {
        let set: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        corpus.iter().filter(|t| set.contains(t.trial_id.as_str())).collect()
    }
}
