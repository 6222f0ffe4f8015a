use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lexer::lex;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

pub const CONTROL: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
pub const STRUCTURE: [&str; 11] = [
    "<title>",
    "<disease>",
    "<treatment>",
    "<ref>",
    "</ref>",
    "<instr>",
    "</instr>",
    "<incs>",
    "</incs>",
    "<excs>",
    "</excs>",
];
pub const POLARITY: [&str; 2] = ["<inc>", "<exc>"];

const fn structure_id(i: usize) -> TokenId {
    (CONTROL.len() + i) as TokenId
}

pub const TITLE: TokenId = structure_id(0);
pub const DISEASE: TokenId = structure_id(1);
pub const TREATMENT: TokenId = structure_id(2);
pub const REF: TokenId = structure_id(3);
pub const REF_END: TokenId = structure_id(4);
pub const INSTR: TokenId = structure_id(5);
pub const INSTR_END: TokenId = structure_id(6);
pub const INCS: TokenId = structure_id(7);
pub const INCS_END: TokenId = structure_id(8);
pub const EXCS: TokenId = structure_id(9);
pub const EXCS_END: TokenId = structure_id(10);
pub const INC: TokenId = structure_id(11);
pub const EXC: TokenId = structure_id(12);
/// First instruction slot.
pub const INSTR_BASE: TokenId = structure_id(13);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialKind {
    Control,
    Structure,
    Polarity,
    Instruction,
}

fn reserved_surface(i: usize) -> String {
    alloc::format!("<reserved_{i}>")
}

/// Word-level vocabulary. Layout: control tokens, structure tokens, polarity
/// tokens, `n_slots` instruction slots, then words by descending frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
    n_slots: usize,
    n_bound: usize,
    min_frequency: usize,
}

impl Vocabulary {
    /// Builds from raw texts; words seen fewer than `min_frequency` times map
    /// to `<unk>`. The first `tags.len()` slots are bound to `tags`.
    pub fn build<'a, I>(texts: I, min_frequency: usize, n_slots: usize, tags: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in lex(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_frequency.max(1)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> =
            CONTROL.iter().chain(&STRUCTURE).chain(&POLARITY).map(|s| s.to_string()).collect();
        tokens.extend((0..n_slots).map(reserved_surface));
        tokens.extend(words.into_iter().map(|(w, _)| w));
        let mut v = Self::from_tokens_with_slots(tokens, n_slots)?;
        v.min_frequency = min_frequency;
        for t in tags {
            v.bind_instruction(t)?;
        }
        Ok(v)
    }

    fn from_tokens_with_slots(tokens: Vec<String>, n_slots: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(alloc::format!("duplicate vocabulary token `{t}`")));
            }
        }
        let fixed = CONTROL.iter().chain(&STRUCTURE).chain(&POLARITY);
        if tokens.len() < INSTR_BASE as usize + n_slots || !fixed.zip(&tokens).all(|(a, b)| *a == b) {
            return Err(Error::Invalid("vocabulary does not start with the special tokens".into()));
        }
        let slots = &tokens[INSTR_BASE as usize..INSTR_BASE as usize + n_slots];
        let n_bound = slots.iter().take_while(|s| !s.starts_with("<reserved_")).count();
        if slots[n_bound..].iter().any(|s| !s.starts_with("<reserved_")) {
            return Err(Error::Invalid("bound instruction slots must precede reserved ones".into()));
        }
        if let Some(w) = tokens[INSTR_BASE as usize + n_slots..].iter().find(|w| is_markup(w)) {
            return Err(Error::Invalid(alloc::format!("word `{w}` collides with special-token markup")));
        }
        Ok(Self { tokens, index, n_slots, n_bound, min_frequency: 1 })
    }

    /// Restores a vocabulary from its file form (one token per line). The
    /// slot count is the length of the run of instruction tokens after the
    /// polarity tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let n_slots = tokens.iter().skip(INSTR_BASE as usize).take_while(|t| is_markup(t)).count();
        Self::from_tokens_with_slots(tokens, n_slots)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn n_bound(&self) -> usize {
        self.n_bound
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn kind(&self, id: TokenId) -> Option<SpecialKind> {
        let i = id as usize;
        if i < CONTROL.len() {
            Some(SpecialKind::Control)
        } else if i < CONTROL.len() + STRUCTURE.len() {
            Some(SpecialKind::Structure)
        } else if id == INC || id == EXC {
            Some(SpecialKind::Polarity)
        } else if i < INSTR_BASE as usize + self.n_slots {
            Some(SpecialKind::Instruction)
        } else {
            None
        }
    }

    /// First id after the special range.
    pub fn first_word(&self) -> TokenId {
        INSTR_BASE + self.n_slots as TokenId
    }

    /// Binds the next free slot to `tag`, surfacing as `<tag>`.
    pub fn bind_instruction(&mut self, tag: &str) -> Result<TokenId> {
        let surface = alloc::format!("<{tag}>");
        if let Some(id) = self.id(&surface) {
            return Ok(id);
        }
        if self.n_bound == self.n_slots {
            return Err(Error::Config(alloc::format!("no free instruction slot for `{tag}` ({} slots)", self.n_slots)));
        }
        let id = INSTR_BASE + self.n_bound as TokenId;
        let old = core::mem::replace(&mut self.tokens[id as usize], surface.clone());
        self.index.remove(&old);
        self.index.insert(surface, id);
        self.n_bound += 1;
        Ok(id)
    }

    /// Token id of instruction slot `index`, if bound.
    pub fn instruction_id(&self, index: usize) -> Result<TokenId> {
        if index < self.n_bound {
            Ok(INSTR_BASE + index as TokenId)
        } else {
            Err(Error::InstructionIndex { index, len: self.n_bound })
        }
    }

    pub fn word_id(&self, word: &str) -> TokenId {
        match self.id(word) {
            Some(id) if id >= self.first_word() => id,
            _ => UNK,
        }
    }

    /// Lowercased word-level segmentation; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        lex(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Space-joined surfaces. Padding is dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids.iter().filter(|&&i| i != PAD).map(|&i| self.token(i)).collect();
        crate::lexer::join(&words)
    }

    /// Encodes annotated text in which whitespace-separated `<...>` tokens are
    /// specials and everything else is lexed as words. The `<statement>` and
    /// `<target>` spellings are rewritten to the canonical block scheme:
    /// `<statement> x` becomes `<instr> <x> </instr>`, and `<target> [pol] …`
    /// becomes an `<incs>`/`<excs>` block closed before the next structure
    /// token.
    pub fn encode_markup(&self, text: &str) -> Result<Vec<TokenId>> {
        let pieces: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::new();
        let mut open_block: Option<TokenId> = None;
        let mut i = 0;
        while i < pieces.len() {
            let p = pieces[i];
            if p == "<statement>" {
                let tag = pieces.get(i + 1).ok_or_else(|| Error::Invalid("`<statement>` without a tag".into()))?;
                let tag = tag.trim_start_matches('<').trim_end_matches('>');
                let id =
                    self.id(&alloc::format!("<{tag}>")).ok_or_else(|| Error::UnregisteredInstruction(tag.into()))?;
                close(&mut out, &mut open_block);
                out.extend([INSTR, id, INSTR_END]);
                i += 2;
                continue;
            }
            if p == "<target>" {
                close(&mut out, &mut open_block);
                let pol = match pieces.get(i + 1) {
                    Some(&"<exc>") => EXC,
                    Some(&"<inc>") => INC,
                    _ => INC,
                };
                if matches!(pieces.get(i + 1), Some(&"<exc>") | Some(&"<inc>")) {
                    i += 1;
                }
                let (open, end) = if pol == EXC { (EXCS, EXCS_END) } else { (INCS, INCS_END) };
                out.extend([open, pol]);
                open_block = Some(end);
                i += 1;
                continue;
            }
            if is_markup(p) {
                let id = self.id(p).ok_or_else(|| Error::Invalid(alloc::format!("unknown special token `{p}`")))?;
                if matches!(self.kind(id), Some(SpecialKind::Structure) | Some(SpecialKind::Control)) {
                    if open_block == Some(id) {
                        open_block = None;
                    } else {
                        close(&mut out, &mut open_block);
                    }
                }
                out.push(id);
            } else {
                out.extend(self.tokenize(p));
            }
            i += 1;
        }
        close(&mut out, &mut open_block);
        Ok(out)
    }
}

fn close(out: &mut Vec<TokenId>, open: &mut Option<TokenId>) {
    if let Some(end) = open.take() {
        out.push(end);
    }
}

fn is_markup(s: &str) -> bool {
    s.len() > 2 && s.starts_with('<') && s.ends_with('>')
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vocab() -> Vocabulary {
        let tags = vec!["age".to_string(), "bmi".to_string()];
        Vocabulary::build(["Age 60 years or older", "age ≥ 18", "bmi 20 - 45 kg/m2"], 1, 4, &tags).unwrap()
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let v = vocab();
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.token(INCS), "<incs>");
        assert_eq!(v.token(EXC), "<exc>");
        assert_eq!(v.token(INSTR_BASE), "<age>");
        assert_eq!(v.token(INSTR_BASE + 2), "<reserved_2>");
        assert_eq!(v.first_word(), INSTR_BASE + 4);
        assert!((v.first_word() as usize..v.len()).all(|i| v.kind(i as TokenId).is_none()));
    }

    #[test]
    fn tokenize_round_trip_and_unk() {
        let v = vocab();
        let ids = v.tokenize("Age 60 years or older");
        assert_eq!(v.detokenize(&ids), "age 60 years or older");
        assert_eq!(v.tokenize(""), Vec::<TokenId>::new());
        assert_eq!(v.tokenize("zzyzx"), vec![UNK]);
        // Specials typed as text are words, not markup.
        assert!(!v.tokenize("<age>").contains(&INSTR_BASE));
    }

    #[test]
    fn file_form_round_trip() {
        let mut v = vocab();
        let back = Vocabulary::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back.n_slots(), 4);
        assert_eq!(back.n_bound(), 2);
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(v.bind_instruction("nyha").unwrap(), INSTR_BASE + 2);
        assert_eq!(v.bind_instruction("nyha").unwrap(), INSTR_BASE + 2);
        v.bind_instruction("ecog").unwrap();
        assert!(v.bind_instruction("sbp").is_err());
    }

    #[test]
    fn alias_scheme_matches_canonical_scheme() {
        let v = vocab();
        let canonical = v
            .encode_markup(
                "<ref> <inc> bmi 20 - 45 kg/m2 <instr> <age> </instr> <inc> age ≥ 18 </ref> <instr> <age> </instr>",
            )
            .unwrap();
        let alias = v
            .encode_markup("<ref> <inc> bmi 20 - 45 kg/m2 <statement> age <inc> age ≥ 18 </ref> <statement> age")
            .unwrap();
        assert_eq!(canonical, alias);

        let canonical = v.encode_markup("<incs> <inc> age 60 years or older </incs>").unwrap();
        let alias = v.encode_markup("<target> age 60 years or older").unwrap();
        assert_eq!(canonical, alias);
        let exc = v.encode_markup("<target> <exc> age ≥ 18 <eos>").unwrap();
        assert_eq!(exc, v.encode_markup("<excs> <exc> age ≥ 18 </excs> <eos>").unwrap());
        assert!(v.encode_markup("<statement> gender").is_err());
    }
}
