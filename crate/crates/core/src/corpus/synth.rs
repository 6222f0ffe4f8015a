//! Synthetic trial generator with exact gold relations.
//!
//! Every disease gets a seeded profile fixing which attributes appear in its
//! inclusion and exclusion blocks and with which relation, so criteria of
//! held-out trials are predictable from the setup. Surface text varies per
//! criterion across three template classes.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Criterion, GoldRelation, Polarity, TrialDocument};
use crate::criteria::{AttributeSchema, Comparator, Number, Relation, ValueKind, REQUIRED_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_trials: usize,
    pub seed: u64,
    /// Attribute lexicon; must cover the twelve required attributes.
    pub schema: AttributeSchema,
}

pub const DISEASES: [&str; 12] = [
    "Type 2 Diabetes Mellitus",
    "Chronic Heart Failure",
    "Essential Hypertension",
    "Non-small Cell Lung Cancer",
    "Metastatic Breast Cancer",
    "Chronic Kidney Disease",
    "Obesity",
    "Moderate to Severe Asthma",
    "Rheumatoid Arthritis",
    "Major Depressive Disorder",
    "Atrial Fibrillation",
    "Colorectal Cancer",
];

const PHASES: [&str; 5] = ["Phase 1", "Phase 2", "Phase 3", "Phase 1/2", "Phase 2/3"];
const SYLLABLES: [&str; 16] =
    ["zor", "vel", "tra", "qui", "mer", "lan", "dex", "pri", "sol", "ket", "nor", "vam", "cel", "bri", "fen", "tal"];
const STEMS: [&str; 8] = ["mab", "nib", "tide", "stat", "vir", "zumab", "lisib", "parin"];
const FORMS: [&str; 4] = ["{}", "{} tablets", "{} injection", "{} plus standard of care"];

const INC_FILLERS: [&str; 12] = [
    "Able to provide written informed consent",
    "Willing and able to comply with the study visit schedule",
    "Diagnosis of {disease} confirmed by the treating physician",
    "Stable dose of background medication for at least 4 weeks",
    "Adequate bone marrow, liver and renal function",
    "Able to swallow oral medication",
    "Has a caregiver available for study visits if required",
    "Documented diagnosis of {disease} for at least 6 months",
    "Willing to use effective contraception during the study",
    "At least one measurable lesion per standard imaging criteria",
    "Resides within travel distance of the study site",
    "Agrees to refrain from blood donation during the study",
];

const EXC_FILLERS: [&str; 12] = [
    "Known hypersensitivity to {drug} or any of its excipients",
    "Participation in another interventional study within 30 days",
    "History of alcohol or drug abuse within the past year",
    "Active infection requiring systemic therapy",
    "Major surgery within 4 weeks before enrollment",
    "Positive test for human immunodeficiency virus",
    "Any condition that, in the opinion of the investigator, would interfere with study participation",
    "Prior treatment with {drug}",
    "Uncontrolled psychiatric illness",
    "Severe hepatic impairment",
    "History of organ transplantation",
    "Current use of strong cytochrome p450 inhibitors",
];

/// Clauses appended by the long template class.
const TAILS: [&str; 6] = [
    ", as documented in the medical record and confirmed at the screening visit",
    ", assessed during the screening period and verified before the first dose",
    ", according to local laboratory results obtained within the screening window",
    ", as determined by the site investigator using the available source documents",
    ", based on the most recent assessment recorded during the screening period",
    ", confirmed by a qualified member of the study team before randomization",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateClass {
    Short,
    Medium,
    Long,
}

/// Relation shape chosen by a disease profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spec {
    Num(Comparator, i64),
    Range(i64, i64),
    /// Contiguous label index range `[a, b]` of an ordinal attribute.
    Ordinal(usize, usize),
    Categorical(&'static [&'static str]),
    Bool,
}

const fn n(v: i64) -> i64 {
    v * Number::SCALE
}

fn menu(tag: &str, p: Polarity) -> Vec<Spec> {
    use Comparator::*;
    use Polarity::*;
    use Spec::*;

    match (tag, p) {
        ("age", Inclusion) => {
            alloc::vec![Num(Ge, n(18)), Num(Gt, n(18)), Num(Ge, n(60)), Range(n(18), n(65)), Range(n(40), n(80))]
        }
        ("age", Exclusion) => alloc::vec![Num(Lt, n(18)), Num(Gt, n(75)), Num(Gt, n(80))],
        ("bmi", Inclusion) => {
            alloc::vec![Range(n(19), n(35)), Range(18_500, n(30)), Range(n(20), n(45)), Num(Ge, n(30))]
        }
        ("bmi", Exclusion) => alloc::vec![Num(Gt, n(40)), Num(Gt, n(35)), Num(Lt, 18_500)],
        ("gender", Inclusion) => {
            alloc::vec![Categorical(&["female"]), Categorical(&["male"]), Categorical(&["female", "male"])]
        }
        ("gender", Exclusion) => alloc::vec![Categorical(&["male"]), Categorical(&["female"])],
        ("hba1c", Inclusion) => alloc::vec![Range(n(7), n(10)), Range(6_500, 9_500), Num(Ge, n(7))],
        ("hba1c", Exclusion) => alloc::vec![Num(Gt, n(10)), Num(Gt, n(11))],
        ("nyha", Inclusion) => alloc::vec![Ordinal(1, 2), Ordinal(0, 1), Ordinal(1, 3)],
        ("nyha", Exclusion) => alloc::vec![Ordinal(2, 3), Ordinal(3, 3)],
        ("sbp", Inclusion) => alloc::vec![Num(Le, n(140)), Num(Lt, n(160)), Range(n(90), n(140))],
        ("sbp", Exclusion) => alloc::vec![Num(Ge, n(160)), Num(Gt, n(180)), Num(Lt, n(90))],
        ("qtc", Inclusion) => alloc::vec![Num(Le, n(450)), Num(Lt, n(470))],
        ("qtc", Exclusion) => alloc::vec![Num(Gt, n(450)), Num(Gt, n(470)), Num(Ge, n(500))],
        ("egfr", Inclusion) => alloc::vec![Num(Ge, n(30)), Num(Ge, n(45)), Num(Ge, n(60))],
        ("egfr", Exclusion) => alloc::vec![Num(Lt, n(30)), Num(Lt, n(15)), Num(Lt, n(45))],
        ("life_expectancy", Inclusion) => {
            alloc::vec![Num(Ge, n(12)), Num(Ge, n(24)), Num(Gt, n(12))]
        }
        ("life_expectancy", Exclusion) => alloc::vec![Num(Lt, n(12)), Num(Lt, n(8))],
        ("pregnancy", _) => alloc::vec![Bool],
        ("ecog", Inclusion) => alloc::vec![Ordinal(0, 1), Ordinal(0, 2), Ordinal(0, 0)],
        ("ecog", Exclusion) => alloc::vec![Ordinal(2, 5), Ordinal(3, 5)],
        ("hemoglobin", Inclusion) => alloc::vec![Num(Ge, n(9)), Num(Ge, n(10))],
        ("hemoglobin", Exclusion) => alloc::vec![Num(Lt, n(8)), Num(Lt, n(9))],
        _ => Vec::new(),
    }
}

fn names(tag: &str) -> &'static [&'static str] {
    match tag {
        "age" => &["Age", "Aged"],
        "bmi" => &["BMI", "Body mass index", "Body mass index (BMI)"],
        "gender" => &["Sex", "Gender"],
        "hba1c" => &["HbA1c", "Glycated hemoglobin (HbA1c)", "Hemoglobin A1c"],
        "nyha" => &["NYHA class", "New York Heart Association (NYHA) class", "NYHA functional class"],
        "sbp" => &["Systolic blood pressure", "SBP", "Systolic blood pressure (SBP)"],
        "qtc" => &["QTc", "QTc interval", "Corrected QT interval (QTc)", "QTcF"],
        "egfr" => &["eGFR", "Estimated glomerular filtration rate (eGFR)"],
        "life_expectancy" => &["Life expectancy", "Expected survival"],
        "ecog" => &["ECOG performance status", "ECOG", "Eastern Cooperative Oncology Group performance status"],
        "hemoglobin" => &["Hemoglobin", "Haemoglobin", "Hgb"],
        _ => &[],
    }
}

fn units(tag: &str) -> &'static [&'static str] {
    match tag {
        "age" => &["years", "yrs"],
        "bmi" => &["kg/m2", "kg/m²"],
        "hba1c" => &["%"],
        "sbp" => &["mmHg"],
        "qtc" => &["ms", "msec"],
        "egfr" => &["mL/min/1.73m2"],
        "life_expectancy" => &["weeks"],
        "hemoglobin" => &["g/dL"],
        _ => &[""],
    }
}

#[derive(Debug, Clone)]
struct Profile {
    inc: Vec<(&'static str, Spec)>,
    exc: Vec<(&'static str, Spec)>,
}

fn pick<'a, T>(rng: &mut StreamRng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

fn profile(seed: u64, disease: &str) -> Profile {
    let mut rng = rng::stream(seed, &alloc::format!("profile/{disease}"));
    let mut tags: Vec<&'static str> = REQUIRED_ATTRIBUTES.to_vec();
    tags.shuffle(&mut rng);
    let n_inc = rng.random_range(3..=5);
    let n_exc = rng.random_range(2..=4);
    let take = |tags: &[&'static str], p: Polarity, rng: &mut StreamRng| -> Vec<(&'static str, Spec)> {
        tags.iter().map(|&t| (t, *pick(rng, &menu(t, p)))).collect()
    };
    let inc = take(&tags[..n_inc], Polarity::Inclusion, &mut rng);
    let exc = take(&tags[n_inc..n_inc + n_exc], Polarity::Exclusion, &mut rng);
    Profile { inc, exc }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn num(m: i64) -> String {
    Number::from_milli(m).to_string()
}

fn relation(schema: &AttributeSchema, tag: &str, spec: Spec) -> Relation {
    let a = schema.get(tag).expect("schema validated");
    let unit = a.unit.as_ref().map(|u| u.canonical.as_str());
    match spec {
        Spec::Num(c, v) => Relation::numeric(tag, c, Number::from_milli(v), unit),
        Spec::Range(lo, hi) => Relation::range(tag, Number::from_milli(lo), Number::from_milli(hi), unit),
        Spec::Ordinal(lo, hi) => Relation::set(tag, a.labels[lo..=hi].iter().map(|l| l.name.clone())),
        Spec::Categorical(ls) => Relation::set(tag, ls.iter().copied()),
        Spec::Bool => Relation::boolean(tag),
    }
}

fn numeric_phrase(rng: &mut StreamRng, tag: &str, class: TemplateClass, spec: Spec) -> String {
    use Comparator::*;
    let u = *pick(rng, units(tag));
    let older = if tag == "age" { "older" } else { "more" };
    let younger = if tag == "age" { "younger" } else { "less" };
    let s = match (spec, class) {
        (Spec::Num(c, v), TemplateClass::Short) => {
            let sym = match c {
                Ge => "≥",
                Gt => ">",
                Le => "≤",
                Lt => "<",
                _ => "=",
            };
            alloc::format!("{sym} {} {u}", num(v))
        }
        (Spec::Num(c, v), _) => {
            let v = num(v);
            let forms: &[&str] = match c {
                Ge => &["at least {v} {u}", "no less than {v} {u}", "{v} {u} or {older}", "of at least {v} {u}"],
                Gt => &["above {v} {u}", "greater than {v} {u}", "over {v} {u}", "more than {v} {u}"],
                Le => &["at most {v} {u}", "no more than {v} {u}", "{v} {u} or {younger}"],
                Lt => &["below {v} {u}", "less than {v} {u}", "under {v} {u}"],
                _ => &["{v} {u}"],
            };
            pick(rng, forms)
                .replace("{v}", &v)
                .replace("{u}", u)
                .replace("{older}", older)
                .replace("{younger}", younger)
        }
        (Spec::Range(lo, hi), TemplateClass::Short) => {
            alloc::format!("{}-{} {u}", num(lo), num(hi))
        }
        (Spec::Range(lo, hi), _) => {
            let forms = [
                "between {lo} and {hi} {u}",
                "within the range of {lo}-{hi} {u}",
                "from {lo} to {hi} {u}",
                "of {lo} - {hi} {u}",
            ];
            pick(rng, &forms).replace("{lo}", &num(lo)).replace("{hi}", &num(hi)).replace("{u}", u)
        }
        _ => String::new(),
    };
    let mut s = String::from(s.trim_end());
    if tag == "age" && u == "yrs" && class != TemplateClass::Short && !s.ends_with("older") && !s.ends_with("younger") {
        s.push_str(" old");
    }
    s
}

fn ordinal_phrase(rng: &mut StreamRng, labels: &[String], lo: usize, hi: usize) -> String {
    let top = labels.len() - 1;
    let l = |i: usize| labels[i].as_str();
    let mut forms: Vec<String> = Vec::new();
    let span: Vec<&str> = (lo..=hi).map(l).collect();
    match span.len() {
        1 => forms.push(span[0].into()),
        2 => {
            forms.push(alloc::format!("{} or {}", span[0], span[1]));
            forms.push(alloc::format!("{} and {}", span[0], span[1]));
        }
        _ => {
            let (last, head) = span.split_last().expect("nonempty");
            forms.push(alloc::format!("{} or {last}", head.join(", ")));
        }
    }
    if hi > lo {
        forms.push(alloc::format!("{}-{}", l(lo), l(hi)));
        forms.push(alloc::format!("{} to {}", l(lo), l(hi)));
    }
    if hi == top && lo > 0 {
        forms.push(alloc::format!("above {}", l(lo - 1)));
        forms.push(alloc::format!("≥ {}", l(lo)));
        forms.push(alloc::format!("{} or higher", l(lo)));
    }
    if lo == 0 && hi < top {
        forms.push(alloc::format!("≤ {}", l(hi)));
        forms.push(alloc::format!("below {}", l(hi + 1)));
        forms.push(alloc::format!("{} or lower", l(hi)));
    }
    pick(rng, &forms).clone()
}

fn categorical_phrase(rng: &mut StreamRng, labels: &[&str], class: TemplateClass) -> String {
    let forms: &[&str] = match (labels, class) {
        (["female"], TemplateClass::Short) => &["Female", "Women"],
        (["female"], _) => &["Female patients", "Women only", "Sex: female", "Participants must be female"],
        (["male"], TemplateClass::Short) => &["Male", "Men"],
        (["male"], _) => &["Male patients", "Men only", "Sex: male", "Participants must be male"],
        (_, TemplateClass::Short) => &["Male or female", "Men and women"],
        _ => &["Male or female patients", "Both men and women", "Patients of either sex (male or female)"],
    };
    pick(rng, forms).to_string()
}

fn bool_phrase(rng: &mut StreamRng, p: Polarity, class: TemplateClass) -> String {
    let forms: &[&str] = match (p, class) {
        (Polarity::Inclusion, TemplateClass::Short) => &["Not pregnant", "Negative pregnancy test"],
        (Polarity::Inclusion, _) => &["Negative serum pregnancy test at screening", "Not pregnant or breastfeeding"],
        (Polarity::Exclusion, TemplateClass::Short) => &["Pregnancy", "Pregnant or lactating"],
        (Polarity::Exclusion, _) => &[
            "Pregnant or breastfeeding",
            "Pregnancy or lactation",
            "Currently pregnant, breastfeeding, or planning pregnancy during the study",
        ],
    };
    pick(rng, forms).to_string()
}

fn render(
    rng: &mut StreamRng,
    schema: &AttributeSchema,
    tag: &str,
    spec: Spec,
    p: Polarity,
    class: TemplateClass,
) -> String {
    let a = schema.get(tag).expect("schema validated");
    let name = if names(tag).is_empty() { tag } else { *pick(rng, names(tag)) };
    let core = match a.kind {
        ValueKind::Numeric => {
            let phrase = numeric_phrase(rng, tag, class, spec);
            if class == TemplateClass::Short {
                alloc::format!("{name} {phrase}")
            } else {
                let lead = ["{n} is {p}", "{n} {p}", "Subjects with {n} {p}", "Patients with a {n} {p}"];
                let lead = if name == "Aged" { "{n} {p}" } else { pick(rng, &lead) };
                let lower = if lead.starts_with("{n}") { String::from(name) } else { name.to_lowercase() };
                lead.replace("{n}", &lower).replace("{p}", &phrase)
            }
        }
        ValueKind::Ordinal => {
            let Spec::Ordinal(lo, hi) = spec else { unreachable!("ordinal spec") };
            let labels: Vec<String> = a.labels.iter().map(|l| l.name.clone()).collect();
            let phrase = ordinal_phrase(rng, &labels, lo, hi);
            match class {
                TemplateClass::Short => alloc::format!("{name} {phrase}"),
                _ => {
                    let lead = ["{n} is {p}", "{n} {p}", "{n} of {p}", "Patients in {n} {p}"];
                    let lead = pick(rng, &lead);
                    lead.replace("{n}", name).replace("{p}", &phrase)
                }
            }
        }
        ValueKind::Categorical => {
            let Spec::Categorical(ls) = spec else { unreachable!("categorical spec") };
            categorical_phrase(rng, ls, class)
        }
        ValueKind::Boolean => bool_phrase(rng, p, class),
    };
    finish(rng, core, class)
}

fn finish(rng: &mut StreamRng, core: String, class: TemplateClass) -> String {
    let mut s = capitalize(&core);
    if class == TemplateClass::Long {
        s.push_str(pick(rng, &TAILS));
    }
    s
}

fn drug_name(rng: &mut StreamRng, used: &mut BTreeSet<String>) -> String {
    loop {
        let mut s = String::new();
        for _ in 0..rng.random_range(2..=3) {
            s.push_str(pick(rng, &SYLLABLES));
        }
        s.push_str(pick(rng, &STEMS));
        let s = capitalize(&s);
        if used.insert(s.clone()) {
            return s;
        }
    }
}

fn class(rng: &mut StreamRng) -> TemplateClass {
    *pick(rng, &[TemplateClass::Short, TemplateClass::Medium, TemplateClass::Long])
}

/// Generates `n_trials` documents. Deterministic in `(n_trials, seed, schema)`.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Vec<TrialDocument>> {
    if cfg.n_trials == 0 {
        return Err(Error::Config("n_trials must be at least 1".into()));
    }
    cfg.schema.validate()?;
    cfg.schema.require_defaults()?;
    for t in REQUIRED_ATTRIBUTES {
        let a = cfg.schema.get(t).expect("required");
        let needs = match t {
            "nyha" => 4,
            "ecog" => 6,
            _ => 0,
        };
        if a.labels.len() < needs {
            return Err(Error::Config(alloc::format!("attribute `{t}` needs {needs} ordered labels")));
        }
    }
    let profiles: Vec<Profile> = DISEASES.iter().map(|d| profile(cfg.seed, d)).collect();
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.n_trials);
    let width = (cfg.n_trials.max(2) - 1).to_string().len().max(4);
    for i in 0..cfg.n_trials {
        let mut rng = rng::stream_index(rng::derive(cfg.seed, "trials"), i as u64);
        let d = rng.random_range(0..DISEASES.len());
        let disease = DISEASES[d];
        let drug = drug_name(&mut rng, &mut names);
        let phase = pick(&mut rng, &PHASES);
        let treatment = pick(&mut rng, &FORMS).replace("{}", &drug);
        let title = alloc::format!("A {phase} Study of {drug} in {disease}");
        let mut doc = TrialDocument {
            trial_id: alloc::format!("SYN{:0width$}", i),
            title,
            disease: disease.into(),
            treatment,
            inclusion: Vec::new(),
            exclusion: Vec::new(),
            gold_relations: Vec::new(),
        };
        let prof = &profiles[d];
        for (p, specs, range, fillers) in [
            (Polarity::Inclusion, &prof.inc, 3..=8usize, &INC_FILLERS),
            (Polarity::Exclusion, &prof.exc, 2..=6usize, &EXC_FILLERS),
        ] {
            let chosen: Vec<&(&str, Spec)> = specs.iter().filter(|_| rng.random_bool(0.85)).collect();
            let count = rng.random_range(range).max(chosen.len());
            let mut block = Vec::new();
            let mut gold = Vec::new();
            for (tag, spec) in chosen.iter().copied() {
                let c = class(&mut rng);
                let text = render(&mut rng, &cfg.schema, tag, *spec, p, c);
                gold.push((block.len(), relation(&cfg.schema, tag, *spec)));
                block.push(Criterion::new(text, p).with_attribute(*tag));
            }
            let mut pool: Vec<&str> = fillers.to_vec();
            pool.shuffle(&mut rng);
            for f in pool.into_iter().take(count - block.len()) {
                let c = class(&mut rng);
                let core = f.replace("{disease}", &disease.to_lowercase()).replace("{drug}", &drug);
                block.push(Criterion::new(finish(&mut rng, core, c), p));
            }
            let offset = if p == Polarity::Inclusion { 0 } else { doc.inclusion.len() };
            doc.gold_relations
                .extend(gold.into_iter().map(|(k, relation)| GoldRelation { criterion: offset + k, relation }));
            match p {
                Polarity::Inclusion => doc.inclusion = block,
                Polarity::Exclusion => doc.exclusion = block,
            }
        }
        out.push(doc);
    }
    Ok(out)
}

/// Whether `text` was realized by the long template class.
#[cfg(test)]
fn is_long(text: &str) -> bool {
    TAILS.iter().any(|t| text.ends_with(t))
}
