//! Dense setup embeddings and the editable exemplar store.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::{InstructionCriterionPair, TrialDocument};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{ForwardOptions, ModelState};
use crate::textproto::{Assembler, Exemplar, Setup, TokenId};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialEmbedding {
    pub vector: Vec<f32>,
    pub trial_id: String,
    pub encoder_version: String,
}

/// Mean of the final hidden states over `ids`, L2-normalized. Sequences
/// longer than the context window are cut to it.
pub fn encode_ids<T: Real>(model: &ModelState<T>, ids: &[TokenId]) -> Result<Vec<f32>> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence to encode"));
    }
    let ids = &ids[..ids.len().min(model.config.context_window)];
    let d = model.config.d_model;
    let tape = model.forward_tape(ids, ForwardOptions::default())?;
    let mut v = alloc::vec![0.0f64; d];
    for p in 0..ids.len() {
        for (a, &h) in v.iter_mut().zip(tape.hidden_row(p, d)) {
            *a += h.to_f64();
        }
    }
    let norm = num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Invalid("degenerate embedding".into()));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

/// `h_s` for a trial setup.
pub fn encode_setup<T: Real>(
    model: &ModelState<T>,
    assembler: &Assembler<'_>,
    trial_id: &str,
    setup: &Setup<'_>,
) -> Result<TrialEmbedding> {
    let ids = assembler.setup_ids(setup);
    Ok(TrialEmbedding {
        vector: encode_ids(model, &ids)?,
        trial_id: trial_id.into(),
        encoder_version: model.encoder_version(),
    })
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = num_traits::Float::sqrt(a.iter().map(|x| x * x).sum::<f32>());
    let nb = num_traits::Float::sqrt(b.iter().map(|x| x * x).sum::<f32>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StoreEntry {
    pub key: TrialEmbedding,
    /// Always carries an instruction and a target.
    pub value: Exemplar,
    pub trial_id: String,
    /// Insertion order, for tie-breaking.
    pub counter: u64,
}

impl StoreEntry {
    pub fn new(key: TrialEmbedding, value: Exemplar) -> Result<Self> {
        if value.instruction.is_none() || value.target.is_none() {
            return Err(Error::Invalid("store values need an instruction and a target".into()));
        }
        Ok(Self { trial_id: key.trial_id.clone(), key, value, counter: 0 })
    }

    pub fn instruction(&self) -> &str {
        self.value.instruction.as_deref().unwrap_or_default()
    }

    fn slot(&self) -> (&str, &str, u8) {
        let t = self.value.target.as_ref().expect("validated on insert");
        (&self.trial_id, &t.text, t.polarity as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeStore {
    entries: Vec<StoreEntry>,
    dim: usize,
    encoder_version: String,
    next_counter: u64,
}

impl KnowledgeStore {
    pub fn new(dim: usize, encoder_version: impl Into<String>) -> Self {
        Self { entries: Vec::new(), dim, encoder_version: encoder_version.into(), next_counter: 0 }
    }

    /// Restores a store from persisted parts. Entries keep their counters.
    pub fn from_parts(dim: usize, encoder_version: String, entries: Vec<StoreEntry>) -> Result<Self> {
        let mut s = Self::new(dim, encoder_version);
        for e in &entries {
            s.check(e)?;
        }
        s.next_counter = entries.iter().map(|e| e.counter + 1).max().unwrap_or(0);
        s.entries = entries;
        Ok(s)
    }

    /// One entry per pair whose trial is in `corpus`, keyed by that trial's
    /// setup embedding.
    pub fn build<T: Real>(
        model: &ModelState<T>,
        assembler: &Assembler<'_>,
        corpus: &[TrialDocument],
        pairs: &[InstructionCriterionPair],
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut store = Self::new(model.config.d_model, model.encoder_version());
        let by_id: BTreeMap<&str, &TrialDocument> = corpus.iter().map(|t| (t.trial_id.as_str(), t)).collect();
        let mut keys: BTreeMap<&str, TrialEmbedding> = BTreeMap::new();
        for p in pairs {
            let Some(trial) = by_id.get(p.trial_id.as_str()) else {
                continue;
            };
            let key = match keys.get(p.trial_id.as_str()) {
                Some(k) => k.clone(),
                None => {
                    let k = encode_setup(model, assembler, &trial.trial_id, &Setup::from(*trial))?;
                    keys.insert(&trial.trial_id, k.clone());
                    k
                }
            };
            store.upsert(StoreEntry::new(key, exemplar_of(p))?)?;
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_version(&self) -> &str {
        &self.encoder_version
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    fn check(&self, e: &StoreEntry) -> Result<()> {
        if e.key.vector.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: e.key.vector.len() });
        }
        if e.key.encoder_version != self.encoder_version {
            return Err(Error::EncoderVersion {
                store: self.encoder_version.clone(),
                model: e.key.encoder_version.clone(),
            });
        }
        if e.trial_id != e.key.trial_id {
            return Err(Error::Invalid("entry trial_id differs from its key".into()));
        }
        if e.value.instruction.is_none() || e.value.target.is_none() {
            return Err(Error::Invalid("store values need an instruction and a target".into()));
        }
        Ok(())
    }

    /// Inserts, or replaces the entry with the same trial and target
    /// criterion. A replaced entry keeps its insertion position.
    pub fn upsert(&mut self, mut entry: StoreEntry) -> Result<()> {
        self.check(&entry)?;
        if let Some(old) = self.entries.iter_mut().find(|e| e.slot() == entry.slot()) {
            entry.counter = old.counter;
            *old = entry;
        } else {
            entry.counter = self.next_counter;
            self.next_counter += 1;
            self.entries.push(entry);
        }
        Ok(())
    }

    /// Removes every entry of `trial_id`; returns how many were removed.
    pub fn remove(&mut self, trial_id: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.trial_id != trial_id);
        before - self.entries.len()
    }

    /// Fails when `model` would produce keys from a different encoder.
    pub fn check_model<T: Real>(&self, model: &ModelState<T>) -> Result<()> {
        let v = model.encoder_version();
        if v != self.encoder_version {
            return Err(Error::EncoderVersion { store: self.encoder_version.clone(), model: v });
        }
        Ok(())
    }

    /// Top-`k` entries by descending cosine similarity, ties by insertion
    /// order, never returning `exclude_trial_id`.
    pub fn retrieve(&self, query: &[f32], k: usize, exclude_trial_id: Option<&str>) -> Vec<(&StoreEntry, f32)> {
        self.ranked(query, k, exclude_trial_id, |_| true)
    }

    /// Like [`KnowledgeStore::retrieve`], restricted to entries for
    /// `instruction`; falls back to all entries when none match.
    pub fn retrieve_for(
        &self,
        query: &[f32],
        k: usize,
        exclude_trial_id: Option<&str>,
        instruction: &str,
    ) -> Vec<(&StoreEntry, f32)> {
        let hits = self.ranked(query, k, exclude_trial_id, |e| e.instruction() == instruction);
        if hits.is_empty() {
            self.retrieve(query, k, exclude_trial_id)
        } else {
            hits
        }
    }

    fn ranked(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<&str>,
        keep: impl Fn(&StoreEntry) -> bool,
    ) -> Vec<(&StoreEntry, f32)> {
        let mut scored: Vec<(&StoreEntry, f32)> = self
            .entries
            .iter()
            .filter(|e| exclude != Some(e.trial_id.as_str()) && keep(e))
            .map(|e| (e, cosine(query, &e.key.vector)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.counter.cmp(&b.0.counter)));
        scored.truncate(k);
        scored
    }
}

pub fn exemplar_of(p: &InstructionCriterionPair) -> Exemplar {
    Exemplar {
        chain: p.rationale_chain.clone(),
        instruction: Some(p.instruction.clone()),
        target: Some(p.target.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Criterion, Polarity};
    use crate::model::BackboneConfig;
    use crate::textproto::{InstructionRegistry, Vocabulary};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn entry(trial: &str, v: Vec<f32>, text: &str, tag: &str) -> StoreEntry {
        let key = TrialEmbedding { vector: v, trial_id: trial.into(), encoder_version: "v".into() };
        let value = Exemplar {
            chain: alloc::vec![],
            instruction: Some(tag.into()),
            target: Some(Criterion::new(text, Polarity::Inclusion).with_attribute(tag)),
        };
        StoreEntry::new(key, value).unwrap()
    }

    fn unit(r: &mut impl Rng, d: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn self_retrieval_and_exclusion() {
        let mut s = KnowledgeStore::new(2, "v");
        s.upsert(entry("T1", alloc::vec![0.6, 0.8], "age > 18", "age")).unwrap();
        let hits = s.retrieve(&[0.6, 0.8], 1, None);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0.trial_id, "T1");
        assert!(s.retrieve(&[0.6, 0.8], 1, Some("T1")).is_empty());
        assert_eq!(s.remove("T1"), 1);
        assert!(s.retrieve(&[0.6, 0.8], 1, None).is_empty());
    }

    #[test]
    fn upsert_replaces_same_slot_and_checks_keys() {
        let mut s = KnowledgeStore::new(2, "v");
        s.upsert(entry("T1", alloc::vec![1.0, 0.0], "age > 18", "age")).unwrap();
        s.upsert(entry("T2", alloc::vec![0.0, 1.0], "bmi < 30", "bmi")).unwrap();
        s.upsert(entry("T1", alloc::vec![0.0, 1.0], "age > 18", "age")).unwrap();
        assert_eq!(s.len(), 2);
        // Same similarity: the earlier insertion wins.
        let hits = s.retrieve(&[0.0, 1.0], 2, None);
        assert_eq!(hits[0].0.trial_id, "T1");
        assert_eq!(s.retrieve_for(&[0.0, 1.0], 1, None, "bmi")[0].0.trial_id, "T2");
        assert_eq!(s.retrieve_for(&[0.0, 1.0], 1, None, "ecog")[0].0.trial_id, "T1");
        let bad = entry("T3", alloc::vec![1.0], "x", "age");
        assert_eq!(s.upsert(bad), Err(Error::Dimension { expected: 2, got: 1 }));
        let mut stale = entry("T3", alloc::vec![1.0, 0.0], "x", "age");
        stale.key.encoder_version = "w".into();
        assert!(matches!(s.upsert(stale), Err(Error::EncoderVersion { .. })));
    }

    #[test]
    fn exact_against_brute_force() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = KnowledgeStore::new(16, "v");
        for i in 0..1000 {
            s.upsert(entry(&alloc::format!("T{i}"), unit(&mut r, 16), "c", "age")).unwrap();
        }
        for _ in 0..20 {
            let q = unit(&mut r, 16);
            let got: Vec<&str> = s.retrieve(&q, 5, None).iter().map(|(e, _)| e.trial_id.as_str()).collect();
            let mut all: Vec<(usize, f32)> =
                s.entries().iter().enumerate().map(|(i, e)| (i, cosine(&q, &e.key.vector))).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let want: Vec<&str> = all[..5].iter().map(|&(i, _)| s.entries()[i].trial_id.as_str()).collect();
            assert_eq!(got, want);
        }
    }

    proptest! {
        #[test]
        fn results_are_monotone_and_upserts_visible(seed in 0u64..1000, n in 1usize..40, k in 1usize..8) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = KnowledgeStore::new(6, "v");
            for i in 0..n {
                s.upsert(entry(&alloc::format!("T{i}"), unit(&mut r, 6), "c", "age")).unwrap();
            }
            let q = unit(&mut r, 6);
            let hits = s.retrieve(&q, k, None);
            prop_assert_eq!(hits.len(), k.min(n));
            for w in hits.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
            let key = unit(&mut r, 6);
            s.upsert(entry("NEW", key.clone(), "c", "age")).unwrap();
            prop_assert_eq!(s.retrieve(&key, 1, None)[0].0.trial_id.as_str(), "NEW");
        }
    }

    #[test]
    fn setup_embeddings_are_unit_and_self_similar() {
        let reg = InstructionRegistry::new(["age"]).unwrap();
        let texts = ["alpha beta gamma", "delta epsilon zeta", "asthma", "drug", "heart", "pill"];
        let vocab = Vocabulary::build(texts, 1, 4, reg.tags()).unwrap();
        let cfg = BackboneConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_window: 32,
            vocab_size: vocab.len(),
            instruction_slots: 4,
            prompt_dim: 4,
            ..Default::default()
        };
        let m: ModelState<f32> = ModelState::init(cfg, reg.clone()).unwrap();
        let a = Assembler::new(&vocab, &reg);
        let sa = Setup { title: "alpha beta gamma", disease: "asthma", treatment: "drug" };
        let sb = Setup { title: "delta epsilon zeta", disease: "heart", treatment: "pill" };
        let ea = encode_setup(&m, &a, "A", &sa).unwrap();
        let eb = encode_setup(&m, &a, "B", &sb).unwrap();
        let n: f32 = ea.vector.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(ea.vector, encode_setup(&m, &a, "A", &sa).unwrap().vector);
        let self_sim = cosine(&ea.vector, &ea.vector);
        assert!((self_sim - 1.0).abs() < 1e-6);
        assert!(self_sim >= cosine(&ea.vector, &eb.vector));
        assert_eq!(encode_ids(&m, &[]), Err(Error::Empty("token sequence to encode")));
        assert_eq!(ea.encoder_version, m.encoder_version());
    }
}
