//! Argument parsing. Every config leaf `a.b_c` is a flag `--a-b-c`; keys in
//! a command's home sections are also accepted unqualified.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Command};
use toml::Value;

use crate::config::{self, leaf_paths, parse_value, ConfigError, Profile, RunConfig};

pub struct CommandSpec {
    pub name: &'static str,
    pub about: &'static str,
    /// Sections whose keys also answer to their bare name, first match wins.
    pub home: &'static [&'static str],
}

pub const COMMANDS: [CommandSpec; 12] = [
    CommandSpec { name: "synth", about: "Write a synthetic trial corpus", home: &["", "synth", "paths"] },
    CommandSpec { name: "ingest", about: "Normalize external trial records into a corpus", home: &["", "paths"] },
    CommandSpec { name: "split", about: "Split a corpus into train/valid/test ids", home: &["", "split", "paths"] },
    CommandSpec {
        name: "pretrain",
        about: "Build the vocabulary and pretrain the backbone",
        home: &["", "pretrain", "pretrain_data", "backbone", "paths", "data"],
    },
    CommandSpec {
        name: "finetune",
        about: "Finetune a checkpoint on instruction-criterion pairs",
        home: &["", "finetune", "data", "variant", "paths"],
    },
    CommandSpec { name: "store", about: "Build the retrieval store for a checkpoint", home: &["", "paths", "data"] },
    CommandSpec {
        name: "generate",
        about: "Generate criteria for one trial",
        home: &["", "generation", "eval", "paths", "variant"],
    },
    CommandSpec {
        name: "evaluate",
        about: "Generate for the test split and score it",
        home: &["", "eval", "generation", "paths", "variant"],
    },
    CommandSpec {
        name: "extend",
        about: "Register new instructions and train only their prompts",
        home: &["", "lifecycle.incremental", "paths", "variant", "data"],
    },
    CommandSpec {
        name: "continual",
        about: "Compare re-training with incremental updates over instruction subsets",
        home: &["", "lifecycle", "paths"],
    },
    CommandSpec { name: "ablate", about: "Train and evaluate the component ablations", home: &["", "paths", "eval"] },
    CommandSpec {
        name: "gradcheck",
        about: "Check analytic gradients against central differences",
        home: &["", "gradcheck", "gradcheck.backbone", "paths"],
    },
];

/// A parsed invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<(String, Value)>,
    /// Arguments that are not config keys, by long name.
    pub extra: BTreeMap<String, String>,
}

impl Invocation {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        config::resolve(self.config_file.as_deref(), &self.overrides)
    }

    pub fn extra_args(&self) -> Vec<String> {
        self.extra.iter().map(|(k, v)| format!("--{k}={v}")).collect()
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Help or version output; exit 0.
    Display(String),
    Usage(String),
}

fn flag(path: &str) -> String {
    path.replace(['.', '_'], "-")
}

fn section(path: &str) -> &str {
    path.rsplit_once('.').map_or("", |(s, _)| s)
}

fn short_value(v: &Value) -> String {
    match v {
        Value::String(s) if s.is_empty() => "\"\"".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flag name to config path, for one command.
fn flags_for(spec: &CommandSpec, leaves: &[(String, Value)]) -> BTreeMap<String, String> {
    let mut map: BTreeMap<String, String> = leaves.iter().map(|(p, _)| (flag(p), p.clone())).collect();
    for home in spec.home {
        for (p, _) in leaves.iter().filter(|(p, _)| section(p) == *home) {
            let key = p.rsplit('.').next().unwrap_or(p);
            map.entry(flag(key)).or_insert_with(|| p.clone());
        }
    }
    map
}

fn extra_args(name: &str) -> Vec<Arg> {
    match name {
        "generate" => vec![
            Arg::new("trial-id").long("trial-id").required(true).help("Trial to generate for"),
            Arg::new("instruction")
                .long("instruction")
                .help("Instruction tag; without it the whole criteria section is generated"),
        ],
        "extend" => vec![Arg::new("new-tags")
            .long("new-tags")
            .required(true)
            .help("Comma-separated instruction tags to register")],
        _ => Vec::new(),
    }
}

pub fn command() -> Command {
    let leaves = leaf_paths(Profile::Desk);
    let templates: BTreeMap<&str, &Value> = leaves.iter().map(|(p, v)| (p.as_str(), v)).collect();
    let mut root = Command::new("autotrial")
        .version(crate::manifest::VERSION)
        .about("Instruction-controlled clinical-trial eligibility-criteria generation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in &COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help(format!("TOML config file (default: ${})", config::CONFIG_ENV)),
        );
        for a in extra_args(spec.name) {
            sub = sub.arg(a);
        }
        for (f, p) in flags_for(spec, &leaves) {
            let help = format!("{p} [default: {}]", short_value(templates[p.as_str()]));
            sub = sub.arg(Arg::new(f.clone()).long(f).value_name("VALUE").action(ArgAction::Set).help(help));
        }
        root = root.subcommand(sub);
    }
    root
}

pub fn parse<I, T>(argv: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command().try_get_matches_from(argv).map_err(|e| {
        use clap::error::ErrorKind::*;
        match e.kind() {
            DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => {
                CliError::Display(e.render().to_string())
            }
            _ => CliError::Usage(e.render().to_string()),
        }
    })?;
    let (name, sub) = m.subcommand().expect("subcommand required");
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("known command");
    let leaves = leaf_paths(Profile::Desk);
    let templates: BTreeMap<&str, &Value> = leaves.iter().map(|(p, v)| (p.as_str(), v)).collect();
    let mut overrides = Vec::new();
    let mut errors = Vec::new();
    for (f, p) in flags_for(spec, &leaves) {
        if let Some(raw) = sub.get_one::<String>(&f) {
            match parse_value(templates[p.as_str()], raw) {
                Ok(v) => overrides.push((p, v)),
                Err(e) => errors.push(format!("--{f}: {e}")),
            }
        }
    }
    if !errors.is_empty() {
        return Err(CliError::Usage(format!("error: {}", errors.join("\nerror: "))));
    }
    let mut extra = BTreeMap::new();
    for a in extra_args(name) {
        let id = a.get_id().as_str().to_owned();
        if let Some(v) = sub.get_one::<String>(&id) {
            extra.insert(id, v.clone());
        }
    }
    Ok(Invocation {
        command: name.to_owned(),
        config_file: config::config_path(sub.get_one::<String>("config").map(String::as_str)),
        overrides,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qualified_and_home_flags_map_to_keys() {
        let inv = parse(["autotrial", "finetune", "--learning-rate", "1e-4", "--pretrain-epochs", "3", "--seed", "7"])
            .unwrap();
        let mut o = inv.overrides.clone();
        o.sort_by(|a, b| a.0.cmp(&b.0));
        assert_eq!(
            o,
            [
                ("finetune.learning_rate".to_string(), Value::Float(1e-4)),
                ("pretrain.epochs".to_string(), Value::Integer(3)),
                ("seed".to_string(), Value::Integer(7)),
            ]
        );
    }

    #[test]
    fn misspelled_flag_is_a_usage_error_naming_it() {
        match parse(["autotrial", "finetune", "--learning-rte", "1e-4"]) {
            Err(CliError::Usage(m)) => assert!(m.contains("learning-rte"), "{m}"),
            other => panic!("{other:?}"),
        }
        match parse(["autotrial", "split", "--ratios", "0.5,x"]) {
            Err(CliError::Usage(m)) => assert!(m.contains("--ratios"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn help_is_not_an_error() {
        assert!(matches!(parse(["autotrial", "--help"]), Err(CliError::Display(_))));
        assert!(matches!(parse(["autotrial", "evaluate", "--help"]), Err(CliError::Display(_))));
    }

    #[test]
    fn command_specific_arguments() {
        let inv = parse(["autotrial", "generate", "--trial-id", "T42", "--instruction", "bmi"]).unwrap();
        assert_eq!(inv.extra.get("trial-id").map(String::as_str), Some("T42"));
        assert!(parse(["autotrial", "generate"]).is_err());
        command().debug_assert();
    }
}
