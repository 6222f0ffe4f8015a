//! Normalized medical relations extracted from criterion text, the schema
//! that drives extraction, and set comparison for clinical-accuracy scoring.

mod parser;
mod schema;

pub use parser::CriteriaParser;
pub use schema::{AttributeSchema, AttributeSpec, Label, UnitSpec, ValueKind, REQUIRED_ATTRIBUTES};

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

/// Fixed-point decimal with three fractional digits. Exact equality is what
/// relation matching needs, so floats are avoided here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(into = "f64", from = "f64"))]
pub struct Number(i64);

impl Number {
    pub const SCALE: i64 = 1000;

    pub fn from_milli(m: i64) -> Self {
        Self(m)
    }

    pub fn from_int(v: i64) -> Self {
        Self(v * Self::SCALE)
    }

    pub fn milli(self) -> i64 {
        self.0
    }

    /// Parses a plain decimal literal (`18`, `18.5`, `0.25`).
    pub fn parse(s: &str) -> Option<Self> {
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) || (s.contains('.') && frac.is_empty()) {
            return None;
        }
        if int.len() > 12 {
            return None;
        }
        let mut v: i64 = int.parse().ok()?;
        v *= Self::SCALE;
        let mut scale = Self::SCALE / 10;
        for (k, b) in frac.bytes().enumerate() {
            let d = (b - b'0') as i64;
            if k < 3 {
                v += d * scale;
                scale /= 10;
            } else {
                if k == 3 && d >= 5 {
                    v += 1;
                }
                break;
            }
        }
        Some(Self(v))
    }
}

impl From<Number> for f64 {
    fn from(n: Number) -> f64 {
        n.0 as f64 / Number::SCALE as f64
    }
}

impl From<f64> for Number {
    fn from(x: f64) -> Self {
        Number(num_traits::Float::round(x * Number::SCALE as f64) as i64)
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        let int = a / Self::SCALE as u64;
        let frac = a % Self::SCALE as u64;
        if frac == 0 {
            write!(f, "{sign}{int}")
        } else {
            let mut digits = alloc::format!("{frac:03}");
            while digits.ends_with('0') {
                digits.pop();
            }
            write!(f, "{sign}{int}.{digits}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    InRange,
    InSet,
    Boolean,
}

impl Comparator {
    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "≤",
            Comparator::Gt => ">",
            Comparator::Ge => "≥",
            Comparator::Eq => "=",
            Comparator::InRange => "in_range",
            Comparator::InSet => "in_set",
            Comparator::Boolean => "boolean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(untagged))]
pub enum Value {
    Num(Number),
    Label(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(n) => n.fmt(f),
            Value::Label(l) => f.write_str(l),
        }
    }
}

/// `(attribute, comparator, values, unit)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Relation {
    pub attribute: String,
    pub comparator: Comparator,
    pub values: Vec<Value>,
    pub unit: Option<String>,
}

impl Relation {
    pub fn numeric(attribute: &str, comparator: Comparator, value: Number, unit: Option<&str>) -> Self {
        Self {
            attribute: attribute.to_string(),
            comparator,
            values: alloc::vec![Value::Num(value)],
            unit: unit.map(str::to_string),
        }
    }

    pub fn range(attribute: &str, low: Number, high: Number, unit: Option<&str>) -> Self {
        Self {
            attribute: attribute.to_string(),
            comparator: Comparator::InRange,
            values: alloc::vec![Value::Num(low), Value::Num(high)],
            unit: unit.map(str::to_string),
        }
    }

    pub fn set<I, S>(attribute: &str, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut values: Vec<Value> = labels.into_iter().map(|l| Value::Label(l.into())).collect();
        values.sort();
        values.dedup();
        Self { attribute: attribute.to_string(), comparator: Comparator::InSet, values, unit: None }
    }

    pub fn boolean(attribute: &str) -> Self {
        Self { attribute: attribute.to_string(), comparator: Comparator::Boolean, values: Vec::new(), unit: None }
    }

    /// Checks the structural invariants of a normalized relation.
    pub fn is_well_formed(&self) -> bool {
        match self.comparator {
            Comparator::InRange => match self.values.as_slice() {
                [Value::Num(lo), Value::Num(hi)] => lo <= hi,
                _ => false,
            },
            Comparator::Boolean => self.values.is_empty() && self.unit.is_none(),
            Comparator::InSet => !self.values.is_empty() && self.values.windows(2).all(|w| w[0] < w[1]),
            _ => matches!(self.values.as_slice(), [Value::Num(_)]),
        }
    }

    /// Canonical text rendering, parseable back into the same relation.
    pub fn render(&self, schema: &AttributeSchema) -> String {
        let spec = schema.get(&self.attribute);
        let name = spec.and_then(|s| s.synonyms.first()).map(String::as_str).unwrap_or(&self.attribute);
        let unit = self.unit.as_deref().unwrap_or("");
        let v = |i: usize| self.values.get(i).map(|v| v.to_string()).unwrap_or_default();
        let s = match self.comparator {
            Comparator::Boolean => name.to_string(),
            Comparator::InSet => {
                let labels: Vec<String> = self.values.iter().map(|v| v.to_string().to_lowercase()).collect();
                alloc::format!("{name} {}", labels.join(" or "))
            }
            Comparator::InRange => alloc::format!("{name} between {} and {} {unit}", v(0), v(1)),
            c => alloc::format!("{name} {} {} {unit}", c.symbol(), v(0)),
        };
        crate::lexer::normalize(&s)
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, ", self.attribute, self.comparator.symbol())?;
        match self.comparator {
            Comparator::InSet => {
                f.write_str("{")?;
                for (i, v) in self.values.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    v.fmt(f)?;
                }
                f.write_str("}")?;
            }
            Comparator::InRange => write!(f, "[{}, {}]", self.values[0], self.values[1])?,
            Comparator::Boolean => f.write_str("-")?,
            _ => self.values[0].fmt(f)?,
        }
        match &self.unit {
            Some(u) => write!(f, ", {u})"),
            None => f.write_str(", none)"),
        }
    }
}

/// True-positive / false-positive / false-negative counts of one comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SetCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SetCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
    /// `|pred ∩ gold| / |pred ∪ gold|`.
    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

impl core::ops::AddAssign for SetCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Exact-tuple comparison of two relation sets.
pub fn compare_sets(pred: &BTreeSet<Relation>, gold: &BTreeSet<Relation>) -> SetCounts {
    let tp = pred.intersection(gold).count();
    SetCounts { tp, fp: pred.len() - tp, fn_: gold.len() - tp }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn rel() -> impl Strategy<Value = Relation> {
        (0u8..4, 0i64..5).prop_map(|(a, v)| {
            Relation::numeric(["a", "b", "c", "d"][a as usize], Comparator::Gt, Number::from_int(v), None)
        })
    }

    proptest! {
        #[test]
        fn swapping_sides_swaps_fp_and_fn(p in proptest::collection::btree_set(rel(), 0..8),
                                         g in proptest::collection::btree_set(rel(), 0..8)) {
            let a = compare_sets(&p, &g);
            let b = compare_sets(&g, &p);
            prop_assert_eq!(a.tp, b.tp);
            prop_assert_eq!(a.fp, b.fn_);
            prop_assert_eq!(a.fn_, b.fp);
        }
    }
}
