//! Run configuration: a TOML file, per-profile defaults, and flag overrides.
//!
//! Every leaf key `a.b.c` can be overridden with `--a-b-c VALUE`; keys of a
//! command's home sections also answer to their bare name (`--learning-rate`
//! under `finetune`). Flags win over the file, the file wins over the
//! profile defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use autotrial_core::corpus::PretrainConfig;
use autotrial_core::generation::{GenerationConfig, Variant};
use autotrial_core::metrics::{EvalConfig, Level};
use autotrial_core::model::{BackboneConfig, MAX_CONTEXT};
use autotrial_core::rng;
use autotrial_core::training::OptimizerConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const CONFIG_ENV: &str = "AUTOTRIAL_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Sized for one CPU core.
    #[default]
    Desk,
    /// Published optimizer settings; backbone stays desk-sized.
    Published,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: String,
    pub split: String,
    pub checkpoint: String,
    pub store: String,
    pub schema: String,
    pub input: String,
    pub out: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: String::new(),
            split: String::new(),
            checkpoint: String::new(),
            store: String::new(),
            schema: String::new(),
            input: String::new(),
            out: "out".into(),
        }
    }
}

impl Paths {
    pub fn get(&self, key: &str) -> Option<PathBuf> {
        let v = match key {
            "corpus" => &self.corpus,
            "split" => &self.split,
            "checkpoint" => &self.checkpoint,
            "store" => &self.store,
            "schema" => &self.schema,
            "input" => &self.input,
            "out" => &self.out,
            _ => return None,
        };
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { n_trials: 600, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { ratios: [0.72, 0.08, 0.20], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Preceding criteria kept as a pair's rationale chain.
    pub chain_len: usize,
    pub min_frequency: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { chain_len: 3, min_frequency: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub level: Level,
    pub prefix_len: usize,
    pub group_by_disease: bool,
    pub trial_max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            level: e.level,
            prefix_len: e.prefix_len,
            group_by_disease: true,
            trial_max_new_tokens: e.trial_max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifecycleSection {
    pub n_subsets: usize,
    /// Seed of the instruction partition.
    pub seed: u64,
    pub incremental: OptimizerConfig,
}

impl Default for LifecycleSection {
    fn default() -> Self {
        Self {
            n_subsets: 4,
            seed: 0,
            incremental: OptimizerConfig {
                learning_rate: 1e-2,
                weight_decay: 0.0,
                batch_size: 16,
                epochs: 10,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub probes: usize,
    pub batch: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// Model under test; kept below ten thousand parameters by default.
    pub backbone: BackboneConfig,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            probes: 50,
            batch: 2,
            n_trials: 4,
            seed: 0,
            backbone: BackboneConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                context_window: 128,
                instruction_slots: 12,
                prompt_dim: 4,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root of every module seed that is not set explicitly.
    pub seed: u64,
    /// Worker threads for generation and evaluation; results do not depend on it.
    pub threads: usize,
    /// Instruction tags to train on; empty means every schema attribute.
    pub instructions: Vec<String>,
    pub paths: Paths,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub backbone: BackboneConfig,
    pub pretrain: OptimizerConfig,
    pub pretrain_data: PretrainConfig,
    pub finetune: OptimizerConfig,
    pub data: DataSection,
    pub variant: Variant,
    pub generation: GenerationConfig,
    pub eval: EvalSection,
    pub lifecycle: LifecycleSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (pretrain, finetune) = match profile {
            Profile::Desk => (
                OptimizerConfig {
                    learning_rate: 1e-3,
                    weight_decay: 0.0,
                    batch_size: 16,
                    epochs: 5,
                    ..Default::default()
                },
                OptimizerConfig {
                    learning_rate: 1e-3,
                    weight_decay: 0.0,
                    batch_size: 16,
                    epochs: 12,
                    ..Default::default()
                },
            ),
            Profile::Published => (OptimizerConfig::published_pretrain(), OptimizerConfig::published_finetune()),
        };
        Self {
            profile,
            seed: 0,
            threads: 1,
            instructions: Vec::new(),
            paths: Paths::default(),
            synth: SynthSection::default(),
            split: SplitSection::default(),
            backbone: BackboneConfig { d_model: 64, d_ff: 256, ..Default::default() },
            pretrain,
            pretrain_data: PretrainConfig { targets_per_trial: Some(1), exemplar_count: 2, seed: 0 },
            finetune,
            data: DataSection::default(),
            variant: Variant::default(),
            generation: GenerationConfig { candidates: 5, clusters: 5, max_new_tokens: 128, ..Default::default() },
            eval: EvalSection::default(),
            lifecycle: LifecycleSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            level: self.eval.level,
            generation: self.generation.clone(),
            prefix_len: self.eval.prefix_len,
            group_by_disease: self.eval.group_by_disease,
            trial_max_new_tokens: self.eval.trial_max_new_tokens,
        }
    }

    /// Cross-field checks; every failure is reported.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad = Vec::new();
        for (name, b) in [("backbone", &self.backbone), ("gradcheck.backbone", &self.gradcheck.backbone)] {
            let b = BackboneConfig { vocab_size: usize::MAX / 2, ..b.clone() };
            if let Err(e) = b.validate() {
                bad.push(format!("{name}: {e}"));
            }
        }
        for (name, o) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("lifecycle.incremental", &self.lifecycle.incremental),
        ] {
            if let Err(e) = o.validate() {
                bad.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.generation.validate(usize::MAX) {
            bad.push(format!("generation: {e}"));
        }
        if self.generation.max_new_tokens >= self.backbone.context_window {
            bad.push(format!(
                "generation.max_new_tokens {} must be below backbone.context_window {}",
                self.generation.max_new_tokens, self.backbone.context_window
            ));
        }
        if self.backbone.context_window > MAX_CONTEXT {
            bad.push(format!("backbone.context_window exceeds {MAX_CONTEXT}"));
        }
        if self.threads == 0 {
            bad.push("threads must be at least 1".into());
        }
        if self.synth.n_trials == 0 {
            bad.push("synth.n_trials must be at least 1".into());
        }
        let sum: f64 = self.split.ratios.iter().sum();
        if self.split.ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            bad.push(format!("split.ratios must be positive and sum to 1 (sum {sum})"));
        }
        if self.lifecycle.n_subsets == 0 {
            bad.push("lifecycle.n_subsets must be at least 1".into());
        }
        if self.gradcheck.probes == 0 || self.gradcheck.batch == 0 {
            bad.push("gradcheck.probes and gradcheck.batch must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(bad))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Every problem found while resolving a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for m in &self.0 {
            write!(f, "\n  - {m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn tree(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("config serializes")
}

/// Keys whose default is absent, with a value of their type.
const OPTIONAL: [(&str, f64); 3] =
    [("pretrain.target_ppl", 1.0), ("finetune.target_ppl", 1.0), ("lifecycle.incremental.target_ppl", 1.0)];

/// Default tree plus the optional keys; the set of accepted keys.
fn known_tree(profile: Profile) -> Table {
    let mut t = tree(&RunConfig::for_profile(profile));
    for (k, v) in OPTIONAL {
        set_path(&mut t, k, Value::Float(v));
    }
    t
}

/// Dotted paths of every leaf key.
pub fn leaf_paths(profile: Profile) -> Vec<(String, Value)> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<(String, Value)>) {
        for (k, v) in t {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Table(sub) => walk(&p, sub, out),
                _ => out.push((p, v.clone())),
            }
        }
    }
    let mut out = Vec::new();
    walk("", &known_tree(profile), &mut out);
    out
}

fn unknown_keys(prefix: &str, given: &Table, known: &Table, out: &mut Vec<String>) {
    for (k, v) in given {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(p),
            (Value::Table(g), Some(Value::Table(kn))) => unknown_keys(&p, g, kn, out),
            _ => {}
        }
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn contains(t: &Table, path: &str) -> bool {
    let mut cur = t;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(sub)) if i + 1 < parts.len() => cur = sub,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

pub fn set_path(t: &mut Table, path: &str, v: Value) {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let e = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        if !e.is_table() {
            *e = Value::Table(Table::new());
        }
        cur = e.as_table_mut().unwrap();
    }
    cur.insert(parts[parts.len() - 1].to_string(), v);
}

/// Parses a flag value as the TOML type of the key's default.
pub fn parse_value(template: &Value, raw: &str) -> Result<Value, String> {
    let bad = |what: &str| format!("expected {what}, got `{raw}`");
    Ok(match template {
        Value::Integer(_) => Value::Integer(raw.parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| bad("a number"))?),
        Value::Boolean(_) => Value::Boolean(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Array(a) => {
            let elem = a.first().cloned().unwrap_or(Value::String(String::new()));
            let items: Result<Vec<Value>, String> =
                raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(&elem, s)).collect();
            Value::Array(items?)
        }
        _ => Value::String(raw.into()),
    })
}

/// Module seeds left unset in the file or flags derive from the global seed.
const MODULE_SEEDS: [&str; 11] = [
    "synth.seed",
    "generation.seed",
    "lifecycle.seed",
    "gradcheck.seed",
    "gradcheck.backbone.seed",
    "split.seed",
    "backbone.seed",
    "pretrain.seed",
    "pretrain_data.seed",
    "finetune.seed",
    "lifecycle.incremental.seed",
];

/// Resolves the configuration from a file (if any) and dotted-path
/// overrides. Unknown keys and failed checks are all reported together.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let mut given = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?;
            text.parse::<Table>().map_err(|e| ConfigError(vec![format!("{}: {e}", p.display())]))?
        }
        None => Table::new(),
    };
    for (path, v) in overrides {
        set_path(&mut given, path, v.clone());
    }
    let profile = match given.get("profile") {
        None => Profile::Desk,
        Some(v) => Profile::deserialize(v.clone()).map_err(|e| ConfigError(vec![format!("profile: {e}")]))?,
    };
    let mut unknown = Vec::new();
    unknown_keys("", &given, &known_tree(profile), &mut unknown);
    if !unknown.is_empty() {
        return Err(ConfigError(unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect()));
    }
    let mut merged = tree(&RunConfig::for_profile(profile));
    merge(&mut merged, &given);
    let global = merged.get("seed").and_then(Value::as_integer).unwrap_or(0) as u64;
    for path in MODULE_SEEDS {
        if !contains(&given, path) {
            set_path(&mut merged, path, Value::Integer((rng::derive(global, path) >> 1) as i64));
        }
    }
    let cfg = RunConfig::deserialize(merged).map_err(|e| ConfigError(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The `--config` flag, else the environment variable.
pub fn config_path(flag: Option<&str>) -> Option<PathBuf> {
    flag.map(PathBuf::from).or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk_defaults() {
        let c = resolve(None, &[]).unwrap();
        assert_eq!(c.profile, Profile::Desk);
        assert_eq!(c.finetune.learning_rate, RunConfig::default().finetune.learning_rate);
        assert_eq!(c.backbone.seed, (rng::derive(0, "backbone.seed") >> 1));
    }

    #[test]
    fn published_profile_sets_pretraining() {
        let c = resolve(None, &[("profile".into(), Value::String("published".into()))]).unwrap();
        assert_eq!(
            (c.pretrain.batch_size, c.pretrain.learning_rate, c.pretrain.weight_decay, c.pretrain.epochs),
            (64, 5e-5, 1e-4, 5)
        );
        assert_eq!((c.finetune.batch_size, c.finetune.weight_decay), (16, 1e-5));
    }

    #[test]
    fn every_failed_check_is_listed() {
        let o = vec![
            ("generation.clusters".into(), Value::Integer(10)),
            ("generation.candidates".into(), Value::Integer(5)),
            ("threads".into(), Value::Integer(0)),
        ];
        let e = resolve(None, &o).unwrap_err();
        assert_eq!(e.0.len(), 2, "{e}");
        assert!(e.to_string().contains("k_q ≤ Q"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "sed = 1\n[finetune]\nlearning_rte = 0.1\nepochs = 2\n").unwrap();
        let e = resolve(Some(&p), &[]).unwrap_err();
        assert_eq!(e.0, ["unknown key `finetune.learning_rte`", "unknown key `sed`"]);
    }

    #[test]
    fn explicit_module_seed_is_kept_and_resolution_round_trips() {
        let o = vec![("seed".into(), Value::Integer(9)), ("finetune.seed".into(), Value::Integer(3))];
        let c = resolve(None, &o).unwrap();
        assert_eq!(c.finetune.seed, 3);
        assert_eq!(c.pretrain.seed, rng::derive(9, "pretrain.seed") >> 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(resolve(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn flag_values_follow_key_types() {
        assert_eq!(parse_value(&Value::Integer(0), "12"), Ok(Value::Integer(12)));
        assert!(parse_value(&Value::Integer(0), "1.5").is_err());
        assert_eq!(
            parse_value(&Value::Array(vec![Value::Float(0.5)]), "0.8,0.1,0.1"),
            Ok(Value::Array(vec![Value::Float(0.8), Value::Float(0.1), Value::Float(0.1)]))
        );
    }
}
