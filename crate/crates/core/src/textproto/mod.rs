//! Vocabulary, special tokens, and assembly/parsing of prompt and target
//! sequences.

mod registry;
pub mod vocab;

pub use registry::InstructionRegistry;
pub use vocab::{TokenId, Vocabulary};

use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{Criterion, Polarity, PretrainSample, TrialDocument};
use crate::error::{Error, Result};
use vocab::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    Setup,
    Exemplar,
    Instruction,
    Rationale,
    Target,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Setup => "setup",
            Segment::Exemplar => "exemplar",
            Segment::Instruction => "instruction",
            Segment::Rationale => "rationale",
            Segment::Target => "target",
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Segment::Rationale | Segment::Target)
    }
}

/// Token sequence `x ⊕ y` with a segment label per position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptSequence {
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    /// One label per position of `input_ids ⊕ target_ids`.
    pub segments: Vec<Segment>,
    pub instruction_index: Option<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.input_ids.len() + self.target_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<TokenId> {
        let mut v = self.input_ids.clone();
        v.extend_from_slice(&self.target_ids);
        v
    }

    /// `(position, next token)` for every position whose next token lies in a
    /// rationale or target segment.
    pub fn loss_positions(&self) -> Vec<(usize, TokenId)> {
        let ids = self.ids();
        (0..ids.len().saturating_sub(1))
            .filter(|&p| self.segments[p + 1].is_supervised())
            .map(|p| (p, ids[p + 1]))
            .collect()
    }

    /// Positions of target-segment tokens.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.segments[p] == Segment::Target).collect()
    }

    /// Positions of setup tokens.
    pub fn setup_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.segments[p] == Segment::Setup).collect()
    }

    fn push_input(&mut self, ids: &[TokenId], seg: Segment) {
        self.input_ids.extend_from_slice(ids);
        self.segments.extend(core::iter::repeat_n(seg, ids.len()));
    }

    fn push_target(&mut self, ids: &[TokenId], seg: Segment) {
        self.target_ids.extend_from_slice(ids);
        self.segments.extend(core::iter::repeat_n(seg, ids.len()));
    }
}

/// The `x_s` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Setup<'a> {
    pub title: &'a str,
    pub disease: &'a str,
    pub treatment: &'a str,
}

impl<'a> From<&'a TrialDocument> for Setup<'a> {
    fn from(t: &'a TrialDocument) -> Self {
        Setup { title: &t.title, disease: &t.disease, treatment: &t.treatment }
    }
}

/// In-context exemplar `x_e`. Pretraining exemplars carry only a chain.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Exemplar {
    pub chain: Vec<Criterion>,
    pub instruction: Option<String>,
    pub target: Option<Criterion>,
}

fn polarity_id(p: Polarity) -> TokenId {
    match p {
        Polarity::Inclusion => INC,
        Polarity::Exclusion => EXC,
    }
}

fn block_ids(p: Polarity) -> (TokenId, TokenId) {
    match p {
        Polarity::Inclusion => (INCS, INCS_END),
        Polarity::Exclusion => (EXCS, EXCS_END),
    }
}

/// Builds prompt and target sequences for one vocabulary and registry.
#[derive(Debug, Clone, Copy)]
pub struct Assembler<'a> {
    pub vocab: &'a Vocabulary,
    pub registry: &'a InstructionRegistry,
    /// Place `<instr> … </instr>` before the setup instead of after the exemplar.
    pub instruction_first: bool,
}

impl<'a> Assembler<'a> {
    pub fn new(vocab: &'a Vocabulary, registry: &'a InstructionRegistry) -> Self {
        Self { vocab, registry, instruction_first: false }
    }

    pub fn setup_ids(&self, setup: &Setup<'_>) -> Vec<TokenId> {
        let mut v = alloc::vec![TITLE];
        v.extend(self.vocab.tokenize(setup.title));
        v.push(DISEASE);
        v.extend(self.vocab.tokenize(setup.disease));
        v.push(TREATMENT);
        v.extend(self.vocab.tokenize(setup.treatment));
        v
    }

    fn criterion_ids(&self, c: &Criterion) -> Vec<TokenId> {
        let mut v = alloc::vec![polarity_id(c.polarity)];
        v.extend(self.vocab.tokenize(&c.text));
        v
    }

    fn instruction_ids(&self, tag: &str) -> Result<(usize, [TokenId; 3])> {
        let idx = self.registry.index(tag)?;
        Ok((idx, [INSTR, self.vocab.instruction_id(idx)?, INSTR_END]))
    }

    pub fn exemplar_ids(&self, e: &Exemplar) -> Result<Vec<TokenId>> {
        let mut v = alloc::vec![REF];
        for c in &e.chain {
            v.extend(self.criterion_ids(c));
        }
        if let Some(tag) = &e.instruction {
            v.extend(self.instruction_ids(tag)?.1);
        }
        if let Some(t) = &e.target {
            v.extend(self.criterion_ids(t));
        }
        v.push(REF_END);
        Ok(v)
    }

    /// `setup ⊕ exemplar ⊕ instruction`. When the result exceeds `budget`
    /// tokens, exemplar tokens are dropped from the front (keeping `<ref>`
    /// and `</ref>`), then the whole exemplar; setup and instruction are never
    /// cut.
    pub fn prompt(
        &self,
        setup: &Setup<'_>,
        exemplar: Option<&Exemplar>,
        instruction: Option<&str>,
        budget: usize,
    ) -> Result<PromptSequence> {
        let setup_ids = self.setup_ids(setup);
        let (instruction_index, instr_ids) = match instruction {
            Some(tag) => {
                let (i, ids) = self.instruction_ids(tag)?;
                (Some(i), ids.to_vec())
            }
            None => (None, Vec::new()),
        };
        let fixed = setup_ids.len() + instr_ids.len();
        if fixed > budget {
            let segment = if setup_ids.len() > budget { "setup" } else { "instruction" };
            return Err(Error::ContextOverflow { segment, len: fixed, window: budget });
        }
        let mut ex_ids = match exemplar {
            Some(e) => self.exemplar_ids(e)?,
            None => Vec::new(),
        };
        let room = budget - fixed;
        if ex_ids.len() > room {
            if room >= 2 {
                let drop = ex_ids.len() - room;
                ex_ids.drain(1..1 + drop);
            } else {
                ex_ids.clear();
            }
        }
        let mut seq = PromptSequence { instruction_index, ..Default::default() };
        if self.instruction_first {
            seq.push_input(&instr_ids, Segment::Instruction);
        }
        seq.push_input(&setup_ids, Segment::Setup);
        seq.push_input(&ex_ids, Segment::Exemplar);
        if !self.instruction_first {
            seq.push_input(&instr_ids, Segment::Instruction);
        }
        Ok(seq)
    }

    /// Target side: optional rationale chain, then the wrapped target and
    /// `<eos>`.
    pub fn target_ids(&self, rationale: &[Criterion], target: &Criterion, msr: bool) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut r = Vec::new();
        if msr {
            for c in rationale {
                r.extend(self.criterion_ids(c));
            }
        }
        let (open, close) = block_ids(target.polarity);
        let mut t = alloc::vec![open];
        t.extend(self.criterion_ids(target));
        t.push(close);
        t.push(EOS);
        (r, t)
    }

    /// Appends the target side to `prompt`, dropping rationale tokens from the
    /// front if the window would overflow. Fails when even the bare target
    /// does not fit.
    pub fn attach_target(
        &self,
        prompt: &mut PromptSequence,
        rationale: &[Criterion],
        target: &Criterion,
        msr: bool,
        window: usize,
    ) -> Result<()> {
        let (mut r, t) = self.target_ids(rationale, target, msr);
        let used = prompt.len() + t.len();
        if used > window {
            return Err(Error::ContextOverflow { segment: "target", len: used, window });
        }
        let room = window - used;
        if r.len() > room {
            let drop = r.len() - room;
            r.drain(..drop);
            // Resume at a criterion boundary.
            let cut = r.iter().position(|&id| id == INC || id == EXC).unwrap_or(r.len());
            r.drain(..cut);
        }
        prompt.push_target(&r, Segment::Rationale);
        prompt.push_target(&t, Segment::Target);
        Ok(())
    }

    /// Pretraining sequence: setup and an instruction-free exemplar chain,
    /// then rationale and target with no neural prompt.
    pub fn pretrain_sequence(
        &self,
        setup: &Setup<'_>,
        sample: &PretrainSample,
        msr: bool,
        window: usize,
    ) -> Result<PromptSequence> {
        let ex = Exemplar { chain: sample.exemplar.clone(), instruction: None, target: None };
        let ex = if ex.chain.is_empty() { None } else { Some(&ex) };
        let (_, t) = self.target_ids(&[], &sample.target, false);
        let budget =
            window.checked_sub(t.len()).ok_or(Error::ContextOverflow { segment: "target", len: t.len(), window })?;
        let mut p = self.prompt(setup, ex, None, budget)?;
        self.attach_target(&mut p, &sample.rationale, &sample.target, msr, window)?;
        Ok(p)
    }

    /// Trial-level target: every criterion of the trial in document order,
    /// the last one wrapped as the target block.
    pub fn trial_target(&self, prompt: &mut PromptSequence, trial: &TrialDocument, window: usize) -> Result<()> {
        let all: Vec<Criterion> = trial.criteria().cloned().collect();
        let (last, chain) = all.split_last().ok_or(Error::Empty("trial criteria"))?;
        self.attach_target(prompt, chain, last, true, window)
    }
}

/// Result of splitting generated ids back into criteria.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedOutput {
    pub rationale: Vec<Criterion>,
    pub target: Option<Criterion>,
    /// The target block was cut off by `<eos>` or the end of input.
    pub unterminated: bool,
}

impl ParsedOutput {
    /// Rationale criteria followed by the target, if any.
    pub fn all(&self) -> Vec<Criterion> {
        let mut v = self.rationale.clone();
        v.extend(self.target.clone());
        v
    }
}

/// Inverse of [`Assembler::target_ids`]. Criteria outside a block are
/// rationale; the first `<incs>`/`<excs>` block is the target. Scanning stops
/// at `<eos>`.
pub fn parse_output(vocab: &Vocabulary, ids: &[TokenId]) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let mut cur: Option<(Polarity, Vec<TokenId>)> = None;
    let mut block: Option<(Polarity, Vec<TokenId>)> = None;
    let flush = |cur: &mut Option<(Polarity, Vec<TokenId>)>, dst: &mut Vec<Criterion>| {
        if let Some((p, words)) = cur.take() {
            if !words.is_empty() {
                dst.push(Criterion::new(vocab.detokenize(&words), p));
            }
        }
    };
    let finish_block = |block: &mut Option<(Polarity, Vec<TokenId>)>, out: &mut ParsedOutput| {
        if let Some((p, words)) = block.take() {
            out.target = Some(Criterion::new(vocab.detokenize(&words), p));
        }
    };
    for &id in ids {
        if id == EOS {
            break;
        }
        if let Some((bp, words)) = block.as_mut() {
            let close = block_ids(*bp).1;
            if id == close {
                finish_block(&mut block, &mut out);
                return out;
            }
            match vocab.kind(id) {
                None => words.push(id),
                Some(SpecialKind::Control) if id == UNK => words.push(id),
                _ => {}
            }
            continue;
        }
        match id {
            INC | EXC => {
                flush(&mut cur, &mut out.rationale);
                cur = Some((if id == INC { Polarity::Inclusion } else { Polarity::Exclusion }, Vec::new()));
            }
            INCS | EXCS => {
                flush(&mut cur, &mut out.rationale);
                block = Some((if id == INCS { Polarity::Inclusion } else { Polarity::Exclusion }, Vec::new()));
            }
            _ => match (vocab.kind(id), cur.as_mut()) {
                (None, Some((_, words))) => words.push(id),
                (Some(SpecialKind::Control), Some((_, words))) if id == UNK => words.push(id),
                _ => {}
            },
        }
    }
    flush(&mut cur, &mut out.rationale);
    if block.is_some() {
        out.unterminated = true;
        finish_block(&mut block, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn fixture() -> (Vocabulary, InstructionRegistry) {
        let reg = InstructionRegistry::new(["age", "bmi", "nyha"]).unwrap();
        let texts = [
            "A Phase 2 Study of Drugamab in Asthma",
            "asthma",
            "drugamab",
            "age ≥ 18",
            "heart failure (NYHA class III and IV)",
            "bmi 20 - 45 kg/m2",
            "signed consent",
        ];
        let v = Vocabulary::build(texts, 1, 8, reg.tags()).unwrap();
        (v, reg)
    }

    fn setup() -> Setup<'static> {
        Setup { title: "A Phase 2 Study of Drugamab in Asthma", disease: "asthma", treatment: "drugamab" }
    }

    #[test]
    fn prompt_without_exemplar_ends_in_instruction() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let p = a.prompt(&setup(), None, Some("bmi"), 64).unwrap();
        assert_eq!(v.detokenize(&p.input_ids[p.input_ids.len() - 3..]), "<instr> <bmi> </instr>");
        assert_eq!(p.instruction_index, Some(1));
        assert_eq!(p.input_ids[0], TITLE);
        assert_eq!(p.segments.len(), p.len());
        assert_eq!(a.prompt(&setup(), None, Some("bmi"), 64).unwrap(), p);
        assert_eq!(a.prompt(&setup(), None, Some("gender"), 64), Err(Error::UnregisteredInstruction("gender".into())));
    }

    #[test]
    fn exemplar_layout_and_front_truncation() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let e = Exemplar {
            chain: vec![Criterion::new("bmi 20 - 45 kg/m2", Polarity::Inclusion)],
            instruction: Some("age".into()),
            target: Some(Criterion::new("age ≥ 18", Polarity::Inclusion)),
        };
        let full = a.prompt(&setup(), Some(&e), Some("nyha"), 256).unwrap();
        let text = v.detokenize(&full.input_ids);
        assert!(text.contains(
            "<ref> <inc> bmi 20 - 45 kg / m2 <instr> <age> </instr> <inc> age ≥ 18 </ref> <instr> <nyha> </instr>"
        ));

        let setup_len = a.setup_ids(&setup()).len();
        let budget = setup_len + 3 + 6;
        let cut = a.prompt(&setup(), Some(&e), Some("nyha"), budget).unwrap();
        assert_eq!(cut.len(), budget);
        assert_eq!(cut.input_ids[..setup_len], full.input_ids[..setup_len]);
        let ex: Vec<TokenId> =
            (0..cut.len()).filter(|&p| cut.segments[p] == Segment::Exemplar).map(|p| cut.input_ids[p]).collect();
        assert_eq!(ex.first(), Some(&REF));
        assert_eq!(v.detokenize(&ex[1..]), "<inc> age ≥ 18 </ref>");
        assert_eq!(v.detokenize(&cut.input_ids[cut.len() - 3..]), "<instr> <nyha> </instr>");

        let overflow = a.prompt(&setup(), Some(&e), Some("nyha"), setup_len + 1);
        assert!(matches!(overflow, Err(Error::ContextOverflow { segment: "instruction", .. })));
    }

    #[test]
    fn instruction_first_order() {
        let (v, r) = fixture();
        let mut a = Assembler::new(&v, &r);
        a.instruction_first = true;
        let p = a.prompt(&setup(), None, Some("age"), 64).unwrap();
        assert_eq!(v.detokenize(&p.input_ids[..4]), "<instr> <age> </instr> <title>");
    }

    #[test]
    fn target_side_layout() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let t = Criterion::new("age ≥ 18", Polarity::Inclusion);
        let (rat, tgt) = a.target_ids(&[], &t, true);
        assert!(rat.is_empty());
        assert_eq!(v.detokenize(&tgt), "<incs> <inc> age ≥ 18 </incs> <eos>");

        let x = Criterion::new("Heart failure (NYHA class III and IV)", Polarity::Exclusion);
        assert_eq!(
            v.detokenize(&a.target_ids(&[], &x, true).1),
            "<excs> <exc> heart failure ( nyha class iii and iv ) </excs> <eos>"
        );

        let chain = vec![
            Criterion::new("bmi 20 - 45 kg/m2", Polarity::Inclusion),
            Criterion::new("signed consent", Polarity::Inclusion),
            x.clone(),
        ];
        let (rat, _) = a.target_ids(&chain, &t, false);
        assert!(rat.is_empty());
        let (rat, _) = a.target_ids(&chain, &t, true);
        assert_eq!(rat.iter().filter(|&&i| i == INC || i == EXC).count(), 3);
    }

    #[test]
    fn loss_positions_cover_rationale_and_target_only() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let mut p = a.prompt(&setup(), None, Some("age"), 64).unwrap();
        let chain = vec![Criterion::new("signed consent", Polarity::Inclusion)];
        a.attach_target(&mut p, &chain, &Criterion::new("age ≥ 18", Polarity::Inclusion), true, 64).unwrap();
        let lp = p.loss_positions();
        assert_eq!(lp.len(), p.target_ids.len());
        assert_eq!(lp[0].0, p.input_ids.len() - 1);
        assert_eq!(lp.last().unwrap().1, EOS);
        assert_eq!(p.segments.len(), p.len());
    }

    #[test]
    fn rationale_is_truncated_at_a_criterion_boundary() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let mut p = a.prompt(&setup(), None, Some("age"), 64).unwrap();
        let chain = vec![
            Criterion::new("bmi 20 - 45 kg/m2", Polarity::Inclusion),
            Criterion::new("signed consent", Polarity::Inclusion),
        ];
        let t = Criterion::new("age ≥ 18", Polarity::Inclusion);
        let window = p.len() + 7 + 4;
        a.attach_target(&mut p, &chain, &t, true, window).unwrap();
        let parsed = parse_output(&v, &p.target_ids);
        assert_eq!(parsed.rationale, vec![Criterion::new("signed consent", Polarity::Inclusion)]);
        assert_eq!(parsed.target, Some(t));
    }

    #[test]
    fn parse_output_round_trip_and_degenerate_cases() {
        let (v, r) = fixture();
        let a = Assembler::new(&v, &r);
        let chain = vec![
            Criterion::new("bmi 20 - 45 kg / m2", Polarity::Inclusion),
            Criterion::new("signed consent", Polarity::Exclusion),
        ];
        let t = Criterion::new("heart failure ( nyha class iii and iv )", Polarity::Exclusion);
        let (mut ids, tgt) = a.target_ids(&chain, &t, true);
        ids.extend(&tgt);
        let parsed = parse_output(&v, &ids);
        assert_eq!(parsed.rationale, chain);
        assert_eq!(parsed.target, Some(t.clone()));
        assert!(!parsed.unterminated);

        let no_block = v.encode_markup("<inc> age ≥ 18 <exc> signed consent <eos>").unwrap();
        let parsed = parse_output(&v, &no_block);
        assert_eq!(parsed.rationale.len(), 2);
        assert_eq!(parsed.target, None);

        let close = tgt.iter().position(|&i| i == EXCS_END).unwrap();
        let mut truncated = tgt[..close].to_vec();
        truncated.push(EOS);
        let parsed = parse_output(&v, &truncated);
        assert!(parsed.unterminated);
        assert_eq!(parsed.target, Some(t));

        assert_eq!(parse_output(&v, &[]), ParsedOutput::default());
        assert_eq!(v.detokenize(&v.tokenize("x")), "<unk>".to_string());
    }
}
