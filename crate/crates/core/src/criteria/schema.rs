use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// The twelve attributes every schema and synthetic lexicon must cover.
pub const REQUIRED_ATTRIBUTES: [&str; 12] = [
    "age",
    "bmi",
    "gender",
    "hba1c",
    "nyha",
    "sbp",
    "qtc",
    "egfr",
    "life_expectancy",
    "pregnancy",
    "ecog",
    "hemoglobin",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ValueKind {
    /// Thresholds and ranges over numbers with a canonical unit.
    Numeric,
    /// Ordered class labels; comparisons expand to label sets.
    Ordinal,
    /// Unordered labels collected anywhere in the criterion.
    Categorical,
    /// Presence of the concept is the relation.
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Label {
    pub name: String,
    pub surfaces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnitSpec {
    pub canonical: String,
    pub surfaces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSpec {
    pub tag: String,
    /// Lowercase surface phrases; the first one is the canonical display name.
    pub synonyms: Vec<String>,
    pub kind: ValueKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub unit: Option<UnitSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributeSchema {
    pub attributes: Vec<AttributeSpec>,
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn numeric(tag: &str, synonyms: &[&str], unit: &str, unit_surfaces: &[&str]) -> AttributeSpec {
    AttributeSpec {
        tag: tag.to_string(),
        synonyms: strs(synonyms),
        kind: ValueKind::Numeric,
        unit: Some(UnitSpec { canonical: unit.to_string(), surfaces: strs(unit_surfaces) }),
        labels: Vec::new(),
    }
}

fn labelled(tag: &str, kind: ValueKind, synonyms: &[&str], labels: &[(&str, &[&str])]) -> AttributeSpec {
    AttributeSpec {
        tag: tag.to_string(),
        synonyms: strs(synonyms),
        kind,
        unit: None,
        labels: labels.iter().map(|(n, s)| Label { name: n.to_string(), surfaces: strs(s) }).collect(),
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        use ValueKind::*;
        let attributes = alloc::vec![
            numeric("age", &["age", "aged"], "years", &["years", "year", "yrs", "yr"]),
            numeric("bmi", &["bmi", "body mass index"], "kg/m2", &["kg/m2", "kg/m^2", "kg per m2"]),
            labelled(
                "gender",
                Categorical,
                &["gender", "sex"],
                &[("female", &["female", "females", "women", "woman"]), ("male", &["male", "males", "men", "man"])],
            ),
            numeric(
                "hba1c",
                &["hba1c", "hemoglobin a1c", "glycated hemoglobin", "glycosylated hemoglobin", "a1c"],
                "%",
                &["%", "percent"],
            ),
            labelled(
                "nyha",
                Ordinal,
                &["nyha", "new york heart association"],
                &[("I", &["i"]), ("II", &["ii"]), ("III", &["iii"]), ("IV", &["iv"])],
            ),
            numeric("sbp", &["systolic blood pressure", "sbp", "systolic pressure"], "mmHg", &["mmhg", "mm hg"]),
            numeric(
                "qtc",
                &["qtc", "qtc interval", "qtcf", "corrected qt interval"],
                "ms",
                &["ms", "msec", "milliseconds"]
            ),
            numeric(
                "egfr",
                &["egfr", "estimated glomerular filtration rate"],
                "mL/min/1.73m2",
                &["ml/min/1.73m2", "ml/min/1.73 m2", "ml/min per 1.73 m2"],
            ),
            numeric("life_expectancy", &["life expectancy", "expected survival"], "weeks", &["weeks", "week", "wks"]),
            labelled(
                "pregnancy",
                Boolean,
                &["pregnant", "pregnancy", "breastfeeding", "breast-feeding", "lactating", "lactation"],
                &[],
            ),
            labelled(
                "ecog",
                Ordinal,
                &[
                    "ecog performance status",
                    "ecog",
                    "eastern cooperative oncology group performance status",
                    "eastern cooperative oncology group"
                ],
                &[("0", &["0"]), ("1", &["1"]), ("2", &["2"]), ("3", &["3"]), ("4", &["4"]), ("5", &["5"])],
            ),
            numeric("hemoglobin", &["hemoglobin", "haemoglobin", "hgb"], "g/dL", &["g/dl", "g / dl", "gm/dl"]),
        ];
        Self { attributes }
    }
}

impl AttributeSchema {
    pub fn get(&self, tag: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.tag == tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.tag.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = alloc::collections::BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.tag.as_str()) {
                return Err(Error::DuplicateInstruction(a.tag.clone()));
            }
            if a.synonyms.is_empty() {
                return Err(Error::Config(alloc::format!("attribute `{}` has no synonyms", a.tag)));
            }
            if let Some(s) = a.synonyms.iter().find(|s| s.to_lowercase() != **s) {
                return Err(Error::Config(alloc::format!("synonym `{s}` of `{}` is not lowercase", a.tag)));
            }
            match a.kind {
                ValueKind::Ordinal | ValueKind::Categorical if a.labels.is_empty() => {
                    return Err(Error::Config(alloc::format!("attribute `{}` needs labels", a.tag)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Fails unless every tag in [`REQUIRED_ATTRIBUTES`] is present.
    pub fn require_defaults(&self) -> Result<()> {
        for t in REQUIRED_ATTRIBUTES {
            if self.get(t).is_none() {
                return Err(Error::MissingAttribute(t.to_string()));
            }
        }
        Ok(())
    }
}
