//! Rule-based relation extraction over lexed criterion text.
//!
//! Pipeline: attribute mention (longest synonym match) → comparator cue →
//! number/label capture → unit and label normalization against the schema.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::schema::{AttributeSchema, ValueKind};
use super::{Comparator, Number, Relation};
use crate::error::Result;
use crate::lexer::lex;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Cue {
    Cmp(Comparator),
    Between,
}

const PREFIX_CUES: &[(&[&str], Cue)] = &[
    (&["greater", "than", "or", "equal", "to"], Cue::Cmp(Comparator::Ge)),
    (&["more", "than", "or", "equal", "to"], Cue::Cmp(Comparator::Ge)),
    (&["less", "than", "or", "equal", "to"], Cue::Cmp(Comparator::Le)),
    (&["at", "least"], Cue::Cmp(Comparator::Ge)),
    (&["no", "less", "than"], Cue::Cmp(Comparator::Ge)),
    (&["not", "less", "than"], Cue::Cmp(Comparator::Ge)),
    (&["minimum", "of"], Cue::Cmp(Comparator::Ge)),
    (&["≥"], Cue::Cmp(Comparator::Ge)),
    (&["at", "most"], Cue::Cmp(Comparator::Le)),
    (&["no", "more", "than"], Cue::Cmp(Comparator::Le)),
    (&["not", "more", "than"], Cue::Cmp(Comparator::Le)),
    (&["not", "exceeding"], Cue::Cmp(Comparator::Le)),
    (&["maximum", "of"], Cue::Cmp(Comparator::Le)),
    (&["up", "to"], Cue::Cmp(Comparator::Le)),
    (&["≤"], Cue::Cmp(Comparator::Le)),
    (&["greater", "than"], Cue::Cmp(Comparator::Gt)),
    (&["more", "than"], Cue::Cmp(Comparator::Gt)),
    (&["higher", "than"], Cue::Cmp(Comparator::Gt)),
    (&["older", "than"], Cue::Cmp(Comparator::Gt)),
    (&["above"], Cue::Cmp(Comparator::Gt)),
    (&["over"], Cue::Cmp(Comparator::Gt)),
    (&["exceeding"], Cue::Cmp(Comparator::Gt)),
    (&[">"], Cue::Cmp(Comparator::Gt)),
    (&["less", "than"], Cue::Cmp(Comparator::Lt)),
    (&["lower", "than"], Cue::Cmp(Comparator::Lt)),
    (&["younger", "than"], Cue::Cmp(Comparator::Lt)),
    (&["below"], Cue::Cmp(Comparator::Lt)),
    (&["under"], Cue::Cmp(Comparator::Lt)),
    (&["<"], Cue::Cmp(Comparator::Lt)),
    (&["equal", "to"], Cue::Cmp(Comparator::Eq)),
    (&["="], Cue::Cmp(Comparator::Eq)),
    (&["between"], Cue::Between),
];

const SUFFIX_CUES: &[(&[&str], Comparator)] = &[
    (&["or", "older"], Comparator::Ge),
    (&["or", "more"], Comparator::Ge),
    (&["or", "above"], Comparator::Ge),
    (&["or", "greater"], Comparator::Ge),
    (&["or", "higher"], Comparator::Ge),
    (&["or", "over"], Comparator::Ge),
    (&["or", "worse"], Comparator::Ge),
    (&["and", "older"], Comparator::Ge),
    (&["and", "above"], Comparator::Ge),
    (&["or", "younger"], Comparator::Le),
    (&["or", "less"], Comparator::Le),
    (&["or", "below"], Comparator::Le),
    (&["or", "lower"], Comparator::Le),
    (&["or", "under"], Comparator::Le),
    (&["or", "better"], Comparator::Le),
    (&["and", "below"], Comparator::Le),
];

const CONNECTORS: &[&str] = &["or", "and", ",", "/"];
const RANGE_JOINERS: &[&str] = &["-", "to"];
/// Tokens an ordinal window may skip before the first label or cue.
const ORDINAL_SKIP: usize = 6;

fn starts_with(toks: &[String], at: usize, phrase: &[impl AsRef<str>]) -> bool {
    at + phrase.len() <= toks.len() && phrase.iter().zip(&toks[at..]).all(|(p, t)| p.as_ref() == t)
}

fn prefix_cue_at(toks: &[String], at: usize) -> Option<(Cue, usize)> {
    // Table is ordered longest-first within each family, and the families do
    // not share prefixes of different lengths except where listed first.
    PREFIX_CUES
        .iter()
        .filter(|(p, _)| starts_with(toks, at, p))
        .max_by_key(|(p, _)| p.len())
        .map(|(p, c)| (*c, p.len()))
}

fn suffix_cue_at(toks: &[String], at: usize) -> Option<(Comparator, usize)> {
    SUFFIX_CUES.iter().find(|(p, _)| starts_with(toks, at, p)).map(|(p, c)| (*c, p.len()))
}

fn number(tok: &str) -> Option<Number> {
    Number::parse(tok)
}

#[derive(Debug, Clone)]
struct Mention {
    attr: usize,
    start: usize,
    end: usize,
}

/// Schema-driven parser. Immutable after construction and cheap to share.
#[derive(Debug, Clone)]
pub struct CriteriaParser {
    schema: AttributeSchema,
    /// (lexed phrase, attribute index), longest phrases first.
    triggers: Vec<(Vec<String>, usize)>,
    units: Vec<Vec<Vec<String>>>,
    /// Per attribute: (lexed surface, label index).
    labels: Vec<Vec<(Vec<String>, usize)>>,
}

impl CriteriaParser {
    pub fn new(schema: AttributeSchema) -> Result<Self> {
        schema.validate()?;
        let mut triggers = Vec::new();
        let mut units = Vec::new();
        let mut labels = Vec::new();
        for (i, a) in schema.attributes.iter().enumerate() {
            for s in &a.synonyms {
                triggers.push((lex(s), i));
            }
            let mut ls = Vec::new();
            for (li, l) in a.labels.iter().enumerate() {
                for s in &l.surfaces {
                    ls.push((lex(s), li));
                    if a.kind == ValueKind::Categorical {
                        triggers.push((lex(s), i));
                    }
                }
            }
            ls.sort_by_key(|(p, _)| core::cmp::Reverse(p.len()));
            labels.push(ls);
            let mut us: Vec<Vec<String>> = a
                .unit
                .iter()
                .flat_map(|u| u.surfaces.iter().chain(core::iter::once(&u.canonical)))
                .map(|s| lex(s))
                .collect();
            us.sort_by_key(|p| core::cmp::Reverse(p.len()));
            units.push(us);
        }
        triggers.retain(|(p, _)| !p.is_empty());
        triggers.sort_by_key(|(p, _)| core::cmp::Reverse(p.len()));
        Ok(Self { schema, triggers, units, labels })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn mentions(&self, toks: &[String]) -> Vec<Mention> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            match self.triggers.iter().find(|(p, _)| starts_with(toks, i, p)) {
                Some((p, a)) => {
                    out.push(Mention { attr: *a, start: i, end: i + p.len() });
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }

    fn unit_len(&self, attr: usize, toks: &[String], at: usize) -> usize {
        self.units[attr].iter().find(|u| starts_with(toks, at, u)).map_or(0, |u| u.len())
    }

    fn label_at(&self, attr: usize, toks: &[String], at: usize) -> Option<(usize, usize)> {
        self.labels[attr].iter().find(|(p, _)| starts_with(toks, at, p)).map(|(p, l)| (*l, p.len()))
    }

    /// Extracts relations in mention order, without duplicates.
    pub fn parse_ordered(&self, text: &str) -> Vec<Relation> {
        let toks = lex(text);
        let mentions = self.mentions(&toks);
        let mut out: Vec<Relation> = Vec::new();
        let mut done = alloc::vec![false; self.schema.attributes.len()];
        for (mi, m) in mentions.iter().enumerate() {
            let spec = &self.schema.attributes[m.attr];
            let wend = mentions.get(mi + 1).map_or(toks.len(), |n| n.start);
            let rel = match spec.kind {
                ValueKind::Boolean if !done[m.attr] => {
                    done[m.attr] = true;
                    Some(Relation::boolean(&spec.tag))
                }
                ValueKind::Categorical if !done[m.attr] => {
                    done[m.attr] = true;
                    self.categorical(m.attr, &toks)
                }
                ValueKind::Numeric => self.numeric(m, &toks, wend),
                ValueKind::Ordinal => self.ordinal(m.attr, &toks[m.end..wend]),
                _ => None,
            };
            if let Some(r) = rel {
                if !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    /// The relation set of one criterion; empty when nothing parses.
    pub fn parse_criterion(&self, text: &str) -> BTreeSet<Relation> {
        self.parse_ordered(text).into_iter().collect()
    }

    /// Union of per-criterion parses.
    pub fn relation_set<'a, I>(&self, texts: I) -> BTreeSet<Relation>
    where
        I: IntoIterator<Item = &'a str>,
    {
        texts.into_iter().flat_map(|t| self.parse_ordered(t)).collect()
    }

    /// Attribute of the first relation found, used as the instruction tag.
    pub fn primary_attribute(&self, text: &str) -> Option<String> {
        self.parse_ordered(text).into_iter().next().map(|r| r.attribute)
    }

    fn categorical(&self, attr: usize, toks: &[String]) -> Option<Relation> {
        let spec = &self.schema.attributes[attr];
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < toks.len() {
            match self.label_at(attr, toks, i) {
                Some((l, n)) => {
                    found.insert(l);
                    i += n;
                }
                None => i += 1,
            }
        }
        if found.is_empty() {
            return None;
        }
        Some(Relation::set(&spec.tag, found.into_iter().map(|l| spec.labels[l].name.clone())))
    }

    fn numeric(&self, m: &Mention, toks: &[String], wend: usize) -> Option<Relation> {
        let spec = &self.schema.attributes[m.attr];
        let unit = spec.unit.as_ref().map(|u| u.canonical.as_str());
        let w = &toks[m.end..wend];
        let n1 = w.iter().position(|t| number(t).is_some())?;
        let v1 = number(&w[n1])?;
        let after = n1 + 1 + self.unit_len(m.attr, w, n1 + 1);

        // `7 % ≤ hba1c ≤ 10 %`
        if n1 == 1 && matches!(w[0].as_str(), "≤" | "<") && m.start >= 2 {
            let before = &toks[..m.start];
            if matches!(before[before.len() - 1].as_str(), "≤" | "<") {
                let mut k = before.len() - 1;
                if let Some(u) = self.units[m.attr].iter().find(|u| k >= u.len() && before[k - u.len()..k] == u[..]) {
                    k -= u.len();
                }
                if k >= 1 {
                    if let Some(v0) = number(&before[k - 1]) {
                        return Some(range(&spec.tag, v0, v1, unit));
                    }
                }
            }
        }

        if after + 1 < w.len() && RANGE_JOINERS.contains(&w[after].as_str()) {
            if let Some(v2) = number(&w[after + 1]) {
                return Some(range(&spec.tag, v1, v2, unit));
            }
        }

        let mut cue = None;
        let mut i = 0;
        while i < n1 {
            match prefix_cue_at(w, i) {
                Some((c, len)) if i + len <= n1 => {
                    cue = Some(c);
                    i += len;
                }
                _ => i += 1,
            }
        }
        match cue {
            Some(Cue::Between) => {
                if after + 1 < w.len() && w[after] == "and" {
                    if let Some(v2) = number(&w[after + 1]) {
                        return Some(range(&spec.tag, v1, v2, unit));
                    }
                }
                None
            }
            Some(Cue::Cmp(c)) => Some(Relation::numeric(&spec.tag, c, v1, unit)),
            None => {
                let c = suffix_cue_at(w, after).map_or(Comparator::Eq, |(c, _)| c);
                Some(Relation::numeric(&spec.tag, c, v1, unit))
            }
        }
    }

    fn ordinal(&self, attr: usize, w: &[String]) -> Option<Relation> {
        let spec = &self.schema.attributes[attr];
        let mut i = 0;
        while i < w.len() && self.label_at(attr, w, i).is_none() && prefix_cue_at(w, i).is_none() {
            i += 1;
            if i > ORDINAL_SKIP {
                return None;
            }
        }
        let n_labels = spec.labels.len();
        let mut chosen = BTreeSet::new();
        let mut pending: Option<Comparator> = None;
        let mut last: Option<usize> = None;
        let mut range_open = false;
        while i < w.len() {
            if let Some((l, n)) = self.label_at(attr, w, i) {
                let span: Vec<usize> = match (pending.take(), range_open, last) {
                    (Some(c), _, _) => expand(c, l, n_labels),
                    (None, true, Some(prev)) => (prev.min(l)..=prev.max(l)).collect(),
                    _ => alloc::vec![l],
                };
                chosen.extend(span);
                range_open = false;
                last = Some(l);
                i += n;
            } else if let Some((c, n)) = suffix_cue_at(w, i).filter(|_| last.is_some()) {
                chosen.extend(expand(c, last.unwrap_or(0), n_labels));
                i += n;
            } else if let Some((Cue::Cmp(c), n)) = prefix_cue_at(w, i) {
                pending = Some(c);
                i += n;
            } else if RANGE_JOINERS.contains(&w[i].as_str()) && last.is_some() {
                range_open = true;
                i += 1;
            } else if CONNECTORS.contains(&w[i].as_str()) {
                i += 1;
            } else {
                break;
            }
        }
        if chosen.is_empty() {
            return None;
        }
        Some(Relation::set(&spec.tag, chosen.into_iter().map(|l| spec.labels[l].name.clone())))
    }
}

fn range(tag: &str, a: Number, b: Number, unit: Option<&str>) -> Relation {
    Relation::range(tag, a.min(b), a.max(b), unit)
}

fn expand(c: Comparator, l: usize, n: usize) -> Vec<usize> {
    match c {
        Comparator::Gt => (l + 1..n).collect(),
        Comparator::Ge => (l..n).collect(),
        Comparator::Lt => (0..l).collect(),
        Comparator::Le => (0..=l).collect(),
        _ => alloc::vec![l],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::Value;
    use alloc::vec;

    fn parser() -> CriteriaParser {
        CriteriaParser::new(AttributeSchema::default()).unwrap()
    }

    fn one(text: &str) -> Relation {
        let rs = parser().parse_ordered(text);
        assert_eq!(rs.len(), 1, "{text}: {rs:?}");
        rs.into_iter().next().unwrap()
    }

    #[test]
    fn age_above_18_years() {
        assert_eq!(
            one("age is above 18 yrs old"),
            Relation::numeric("age", Comparator::Gt, Number::from_int(18), Some("years"))
        );
    }

    #[test]
    fn nyha_above_two_expands_to_label_set() {
        assert_eq!(one("NYHA class is above II"), Relation::set("nyha", ["III", "IV"]));
        assert_eq!(one("Heart failure (NYHA class III and IV)"), Relation::set("nyha", ["III", "IV"]));
        assert_eq!(
            one("New York Heart Association (NYHA) functional class III or IV"),
            Relation::set("nyha", ["III", "IV"])
        );
        assert_eq!(one("nyha class iii or higher"), Relation::set("nyha", ["III", "IV"]));
    }

    #[test]
    fn bmi_range_with_double_mention() {
        assert_eq!(
            one("Body mass index (BMI) within the range of 19-35 kg/m2"),
            Relation::range("bmi", Number::from_int(19), Number::from_int(35), Some("kg/m2"))
        );
        assert_eq!(
            one("subjects with bmi of 20-45 kg/m²"),
            Relation::range("bmi", Number::from_int(20), Number::from_int(45), Some("kg/m2"))
        );
    }

    #[test]
    fn comparator_cues() {
        let p = parser();
        let r = |t: &str| p.parse_ordered(t).remove(0);
        assert_eq!(r("Age 60 years or older").comparator, Comparator::Ge);
        assert_eq!(r("aged at least 18 years").comparator, Comparator::Ge);
        assert_eq!(r("hemoglobin < 9 g/dL").comparator, Comparator::Lt);
        assert_eq!(r("QTc interval >= 450 ms").comparator, Comparator::Ge);
        assert_eq!(r("sbp no more than 140 mmHg").comparator, Comparator::Le);
        assert_eq!(r("hba1c 7.5 %").comparator, Comparator::Eq);
        let between = r("age between 18 and 65 years");
        assert_eq!(between.comparator, Comparator::InRange);
        assert_eq!(between.values, vec![Value::Num(Number::from_int(18)), Value::Num(Number::from_int(65))]);
    }

    #[test]
    fn range_written_around_the_attribute() {
        assert_eq!(
            one("subjects with 7% ≤ hba1c ≤ 10%"),
            Relation::range("hba1c", Number::from_int(7), Number::from_int(10), Some("%"))
        );
    }

    #[test]
    fn multiple_mentions_of_one_attribute() {
        let rs = parser().parse_criterion(
            "hypotension (systolic blood pressure < 90 mmHg) or hypertension (systolic blood pressure ≥ 140 mmHg)",
        );
        assert_eq!(rs.len(), 2);
    }

    #[test]
    fn categorical_boolean_and_ordinal_numbers() {
        assert_eq!(one("male or female patients"), Relation::set("gender", ["female", "male"]));
        assert_eq!(one("both men and women are eligible"), Relation::set("gender", ["female", "male"]));
        assert_eq!(one("currently pregnant or breastfeeding"), Relation::boolean("pregnancy"));
        assert_eq!(one("ECOG performance status of 0 or 1"), Relation::set("ecog", ["0", "1"]));
        assert_eq!(one("ecog ≤ 2"), Relation::set("ecog", ["0", "1", "2"]));
        assert_eq!(one("ECOG performance status 0-1 within 28 days"), Relation::set("ecog", ["0", "1"]));
    }

    #[test]
    fn unparsable_text_is_empty() {
        let p = parser();
        assert!(p.parse_criterion("patient consents in writing").is_empty());
        assert!(p.parse_criterion("").is_empty());
        assert!(p.parse_criterion("age").is_empty());
        assert_eq!(p.primary_attribute("patient consents in writing"), None);
    }

    #[test]
    fn hba1c_synonym_wins_over_hemoglobin() {
        assert_eq!(one("glycated hemoglobin between 7 and 10 %").attribute, "hba1c");
        assert_eq!(one("hemoglobin a1c > 9 %").attribute, "hba1c");
    }
}
