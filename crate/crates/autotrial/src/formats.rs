//! On-disk artifact formats.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use autotrial_core::corpus::{Criterion, DatasetSplit, GoldRelation, Polarity, TrialDocument};
use autotrial_core::criteria::AttributeSchema;
use autotrial_core::embedstore::{KnowledgeStore, StoreEntry, TrialEmbedding};
use autotrial_core::generation::GenerationReport;
use autotrial_core::model::{BackboneConfig, ModelState, Tensor};
use autotrial_core::textproto::{Exemplar, InstructionRegistry, Vocabulary};
use autotrial_core::training::LossReport;
use serde::{Deserialize, Serialize};

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Criterion on the wire: a bare string, or an object when it carries an
/// attribute. Polarity comes from the enclosing list.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireCriterion {
    Text(String),
    Tagged { text: String, attribute: String },
}

impl WireCriterion {
    fn of(c: &Criterion) -> Self {
        match &c.attribute {
            Some(a) => WireCriterion::Tagged { text: c.text.clone(), attribute: a.clone() },
            None => WireCriterion::Text(c.text.clone()),
        }
    }

    fn into_criterion(self, polarity: Polarity) -> Criterion {
        match self {
            WireCriterion::Text(t) => Criterion::new(t, polarity),
            WireCriterion::Tagged { text, attribute } => Criterion::new(text, polarity).with_attribute(attribute),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTrial {
    trial_id: String,
    title: String,
    disease: String,
    treatment: String,
    inclusion: Vec<WireCriterion>,
    exclusion: Vec<WireCriterion>,
    #[serde(default)]
    gold_relations: Vec<GoldRelation>,
}

pub fn trial_to_json(t: &TrialDocument) -> Result<String> {
    let w = WireTrial {
        trial_id: t.trial_id.clone(),
        title: t.title.clone(),
        disease: t.disease.clone(),
        treatment: t.treatment.clone(),
        inclusion: t.inclusion.iter().map(WireCriterion::of).collect(),
        exclusion: t.exclusion.iter().map(WireCriterion::of).collect(),
        gold_relations: t.gold_relations.clone(),
    };
    Ok(serde_json::to_string(&w)?)
}

pub fn trial_from_json(line: &str) -> Result<TrialDocument> {
    let w: WireTrial = serde_json::from_str(line)?;
    let t = TrialDocument {
        trial_id: w.trial_id,
        title: w.title,
        disease: w.disease,
        treatment: w.treatment,
        inclusion: w.inclusion.into_iter().map(|c| c.into_criterion(Polarity::Inclusion)).collect(),
        exclusion: w.exclusion.into_iter().map(|c| c.into_criterion(Polarity::Exclusion)).collect(),
        gold_relations: w.gold_relations,
    };
    t.validate()?;
    Ok(t)
}

pub fn write_corpus(path: &Path, corpus: &[TrialDocument]) -> Result<()> {
    let mut out = String::new();
    for t in corpus {
        out.push_str(&trial_to_json(t)?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_corpus(path: &Path) -> Result<Vec<TrialDocument>> {
    let mut out = Vec::new();
    for (n, line) in jsonl_lines(path)? {
        out.push(trial_from_json(&line).with_context(|| format!("{}:{n}", path.display()))?);
    }
    autotrial_core::corpus::validate_corpus(&out)?;
    Ok(out)
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    read_json(path)
}

/// Schema files are JSON, or TOML when the extension says so.
pub fn read_schema(path: Option<&Path>) -> Result<AttributeSchema> {
    let Some(path) = path else {
        return Ok(AttributeSchema::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Vocabulary::from_tokens(text.lines().map(str::to_owned).collect())?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreHeader {
    d: usize,
    encoder_version: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreRecord {
    trial_id: String,
    counter: u64,
    key: Vec<f32>,
    value: Exemplar,
}

pub fn write_store(path: &Path, store: &KnowledgeStore) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &StoreHeader { d: store.dim(), encoder_version: store.encoder_version().into() })?;
    out.push(b'\n');
    for e in store.entries() {
        let r = StoreRecord {
            trial_id: e.trial_id.clone(),
            counter: e.counter,
            key: e.key.vector.clone(),
            value: e.value.clone(),
        };
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_store(path: &Path) -> Result<KnowledgeStore> {
    let lines = jsonl_lines(path)?;
    let Some(((_, head), rest)) = lines.split_first() else {
        bail!("{}: empty store file", path.display());
    };
    let h: StoreHeader = serde_json::from_str(head).with_context(|| format!("{}: header", path.display()))?;
    let mut entries = Vec::with_capacity(rest.len());
    for (n, line) in rest {
        let r: StoreRecord = serde_json::from_str(line).with_context(|| format!("{}:{n}", path.display()))?;
        let key =
            TrialEmbedding { vector: r.key, trial_id: r.trial_id.clone(), encoder_version: h.encoder_version.clone() };
        let mut e = StoreEntry::new(key, r.value)?;
        e.counter = r.counter;
        entries.push(e);
    }
    Ok(KnowledgeStore::from_parts(h.d, h.encoder_version, entries)?)
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `tensors.bin`.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: BackboneConfig,
    pub registry: InstructionRegistry,
    pub tensors: Vec<TensorRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// A checkpoint directory: manifest, little-endian f32 blob and vocabulary.
pub fn write_checkpoint(dir: &Path, model: &ModelState<f32>, vocab: &Vocabulary) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (t, &trainable) in model.params.iter().zip(&model.trainable) {
        tensors.push(TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset: blob.len(),
            trainable,
        });
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let m = CheckpointManifest { config: model.config.clone(), registry: model.registry.clone(), tensors };
    write_json(&dir.join(CHECKPOINT_FILE), &m)?;
    write_bytes(&dir.join(TENSOR_FILE), &blob)?;
    write_vocab(&dir.join(VOCAB_FILE), vocab)
}

pub fn read_checkpoint(dir: &Path) -> Result<(ModelState<f32>, Vocabulary)> {
    let m: CheckpointManifest = read_json(&dir.join(CHECKPOINT_FILE))?;
    let blob =
        fs::read(dir.join(TENSOR_FILE)).with_context(|| format!("reading {}", dir.join(TENSOR_FILE).display()))?;
    let mut params = Vec::with_capacity(m.tensors.len());
    let mut trainable = Vec::with_capacity(m.tensors.len());
    for r in &m.tensors {
        if r.dtype != "f32" {
            bail!("tensor `{}` has unsupported dtype `{}`", r.name, r.dtype);
        }
        let n: usize = r.shape.iter().product();
        let bytes = blob
            .get(r.offset..r.offset + 4 * n)
            .ok_or_else(|| anyhow!("tensor `{}` runs past the end of {TENSOR_FILE}", r.name))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.push(Tensor { name: r.name.clone(), shape: r.shape.clone(), data });
        trainable.push(r.trainable);
    }
    let model = ModelState::from_parts(m.config, m.registry, params, trainable)?;
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    if vocab.tokens().len() != model.config.vocab_size {
        bail!("vocabulary has {} tokens but the model expects {}", vocab.tokens().len(), model.config.vocab_size);
    }
    Ok((model, vocab))
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub l_mle: f64,
    pub l_cl: f64,
    pub l_ft: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl From<&LossReport> for LogRecord {
    fn from(r: &LossReport) -> Self {
        Self { step: r.step, l_mle: r.mle, l_cl: r.cl, l_ft: r.ft, grad_norm: r.grad_norm, lr: r.lr }
    }
}

/// Streams one training-log line per optimizer step.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(Self { out: BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?) })
    }

    pub fn record(&mut self, r: &LossReport) -> Result<()> {
        serde_json::to_writer(&mut self.out, &LogRecord::from(r))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub text: String,
    pub ppl: Option<f64>,
    pub cluster: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub trial_id: String,
    pub instruction: Option<String>,
    pub exemplar_trial: Option<String>,
    pub candidates: Vec<CandidateRecord>,
    pub selected: Vec<usize>,
    /// Parsed criteria of the selected outputs.
    pub criteria: Vec<Criterion>,
}

impl GenerationRecord {
    pub fn of(r: &GenerationReport, vocab: &Vocabulary) -> Self {
        Self {
            trial_id: r.trial_id.clone(),
            instruction: r.instruction.clone(),
            exemplar_trial: r.exemplar_trial.clone(),
            candidates: r
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    text: vocab.detokenize(c.body()),
                    ppl: c.ppl.is_finite().then_some(c.ppl),
                    cluster: c.cluster,
                })
                .collect(),
            selected: r.selected.clone(),
            criteria: r.criteria(),
        }
    }
}
