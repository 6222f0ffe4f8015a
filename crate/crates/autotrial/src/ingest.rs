//! Normalizes external trial records into corpus documents.
//!
//! Two record shapes are accepted, one JSON object per line:
//! `{trial_id?, title, condition, intervention, eligibility}` with free-text
//! eligibility, or the corpus shape without gold relations.

use anyhow::{bail, Result};
use autotrial_core::corpus::{Criterion, Polarity, TrialDocument};
use serde_json::Value;

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct IngestStats {
    pub lines: usize,
    pub kept: usize,
    pub malformed: usize,
    pub dropped: usize,
}

fn text_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| match v.get(k) {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim()),
        Some(Value::Array(a)) => a.iter().find_map(|x| x.as_str()).map(str::trim).filter(|s| !s.is_empty()),
        _ => None,
    })
}

fn strip_bullet(line: &str) -> &str {
    let l = line.trim();
    let l = l.trim_start_matches(['-', '*', '•', '·']).trim_start();
    let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 && l[digits..].starts_with(['.', ')']) {
        return l[digits + 1..].trim_start();
    }
    l
}

/// Splits free-text eligibility into inclusion and exclusion criteria by
/// the usual section headers and bullet lines. Text before any header
/// counts as inclusion.
pub fn split_eligibility(text: &str) -> (Vec<String>, Vec<String>) {
    let (mut inc, mut exc) = (Vec::new(), Vec::new());
    let mut pol = Polarity::Inclusion;
    for raw in text.lines() {
        let lower = raw.trim().to_lowercase();
        if lower.starts_with("inclusion criteria") {
            pol = Polarity::Inclusion;
            continue;
        }
        if lower.starts_with("exclusion criteria") {
            pol = Polarity::Exclusion;
            continue;
        }
        let c = strip_bullet(raw);
        if c.chars().any(char::is_alphanumeric) {
            match pol {
                Polarity::Inclusion => inc.push(c.to_string()),
                Polarity::Exclusion => exc.push(c.to_string()),
            }
        }
    }
    (inc, exc)
}

fn criteria_list(v: &Value, key: &str, pol: Polarity) -> Option<Vec<Criterion>> {
    let a = v.get(key)?.as_array()?;
    let mut out = Vec::new();
    for x in a {
        let c = match x {
            Value::String(s) => Criterion::new(s.trim(), pol),
            Value::Object(o) => {
                let text = o.get("text")?.as_str()?.trim();
                let c = Criterion::new(text, pol);
                match o.get("attribute").and_then(Value::as_str) {
                    Some(a) => c.with_attribute(a),
                    None => c,
                }
            }
            _ => return None,
        };
        if !c.text.is_empty() {
            out.push(c);
        }
    }
    Some(out)
}

/// One record, or `None` when it lacks a title, disease, intervention or
/// any criterion.
pub fn normalize(v: &Value, fallback_id: &str) -> Option<TrialDocument> {
    let title = text_field(v, &["title", "brief_title"])?;
    let disease = text_field(v, &["disease", "condition", "conditions"])?;
    let treatment = text_field(v, &["treatment", "intervention", "interventions"])?;
    let trial_id = text_field(v, &["trial_id", "nct_id", "id"]).unwrap_or(fallback_id).to_string();
    let (inclusion, exclusion) = if let Some(e) = text_field(v, &["eligibility", "criteria"]) {
        let (i, x) = split_eligibility(e);
        (
            i.into_iter().map(|t| Criterion::new(t, Polarity::Inclusion)).collect(),
            x.into_iter().map(|t| Criterion::new(t, Polarity::Exclusion)).collect(),
        )
    } else {
        (criteria_list(v, "inclusion", Polarity::Inclusion)?, criteria_list(v, "exclusion", Polarity::Exclusion)?)
    };
    let t = TrialDocument {
        trial_id,
        title: title.into(),
        disease: disease.into(),
        treatment: treatment.into(),
        inclusion,
        exclusion,
        gold_relations: Vec::new(),
    };
    (t.n_criteria() > 0 && t.validate().is_ok()).then_some(t)
}

/// Parses line-delimited records. Malformed lines and incomplete records
/// are skipped with a warning; duplicate ids keep the first record.
pub fn ingest(text: &str) -> Result<(Vec<TrialDocument>, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut out: Vec<TrialDocument> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let v: Value = match serde_json::from_str(line) {
            Ok(v @ Value::Object(_)) => v,
            Ok(_) | Err(_) => {
                log::warn!("line {}: not a JSON object, skipped", i + 1);
                stats.malformed += 1;
                continue;
            }
        };
        match normalize(&v, &format!("T{:05}", i + 1)) {
            Some(t) if seen.insert(t.trial_id.clone()) => {
                out.push(t);
                stats.kept += 1;
            }
            Some(t) => {
                log::warn!("line {}: duplicate trial id {}, skipped", i + 1, t.trial_id);
                stats.dropped += 1;
            }
            None => {
                log::warn!("line {}: missing title, disease, intervention or criteria, skipped", i + 1);
                stats.dropped += 1;
            }
        }
    }
    if out.is_empty() {
        bail!("no valid trials in input ({} lines read)", stats.lines);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligibility_splits_on_headers_and_bullets() {
        let (i, e) = split_eligibility(
            "Inclusion Criteria:\n\n  - Age 18 years or older\n  * BMI 19-35 kg/m2\nExclusion Criteria:\n 1. Pregnant women\n 2) NYHA class IV\n -\n",
        );
        assert_eq!(i, ["Age 18 years or older", "BMI 19-35 kg/m2"]);
        assert_eq!(e, ["Pregnant women", "NYHA class IV"]);
    }

    #[test]
    fn bad_lines_are_skipped_and_empty_input_fails() {
        let text = concat!(
            "{\"title\": \"A\", \"condition\": \"asthma\", \"intervention\": \"x\", \"eligibility\": \"Inclusion Criteria:\\n- age above 18\"}\n",
            "not json\n",
            "{\"title\": \"B\", \"condition\": \"asthma\", \"eligibility\": \"- age above 18\"}\n",
            "{\"trial_id\": \"N1\", \"title\": \"C\", \"disease\": \"d\", \"treatment\": \"t\", \"inclusion\": [\"a\"], \"exclusion\": [{\"text\": \"b\", \"attribute\": \"bmi\"}]}\n",
        );
        let (docs, stats) = ingest(text).unwrap();
        assert_eq!(stats, IngestStats { lines: 4, kept: 2, malformed: 1, dropped: 1 });
        assert_eq!(docs[0].trial_id, "T00001");
        assert_eq!(docs[1].exclusion[0].attribute.as_deref(), Some("bmi"));
        assert!(ingest("nope\n").unwrap_err().to_string().contains("no valid trials"));
    }
}
