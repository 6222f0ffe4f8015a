use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Ordered, append-only instruction tags. Tags below `frozen_prefix_len`
/// came from earlier checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstructionRegistry {
    tags: Vec<String>,
    frozen_prefix_len: usize,
    /// Registry sizes at which each extension started; `segments[0] == 0`.
    segments: Vec<usize>,
}

impl Default for InstructionRegistry {
    fn default() -> Self {
        Self { tags: Vec::new(), frozen_prefix_len: 0, segments: alloc::vec![0] }
    }
}

impl InstructionRegistry {
    pub fn new<I, S>(tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut r = Self::default();
        for t in tags {
            r.push(t.into())?;
        }
        Ok(r)
    }

    /// Restores a registry from persisted parts.
    pub fn from_parts(tags: Vec<String>, frozen_prefix_len: usize, segments: Vec<usize>) -> Result<Self> {
        let mut r = Self::new(tags)?;
        let ok = frozen_prefix_len <= r.len()
            && segments.first() == Some(&0)
            && segments.windows(2).all(|w| w[0] < w[1])
            && segments.last().is_some_and(|&s| s <= r.len().max(1) && (s < r.len() || r.is_empty()));
        if !ok {
            return Err(Error::Invalid("inconsistent instruction registry segments".into()));
        }
        r.frozen_prefix_len = frozen_prefix_len;
        r.segments = segments;
        Ok(r)
    }

    fn push(&mut self, tag: String) -> Result<()> {
        if tag.is_empty() || tag.contains(char::is_whitespace) || tag.contains(['<', '>']) {
            return Err(Error::Invalid(alloc::format!("bad instruction tag `{tag}`")));
        }
        if self.tags.contains(&tag) {
            return Err(Error::DuplicateInstruction(tag));
        }
        self.tags.push(tag);
        Ok(())
    }

    /// Appends `new_tags` as a new segment and freezes everything before it.
    pub fn extend<I, S>(&mut self, new_tags: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let new: Vec<String> = new_tags.into_iter().map(Into::into).collect();
        if new.is_empty() {
            return Ok(());
        }
        let mut next = self.clone();
        let start = next.tags.len();
        for t in new {
            next.push(t)?;
        }
        next.frozen_prefix_len = start;
        if start > 0 {
            next.segments.push(start);
        }
        *self = next;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn frozen_prefix_len(&self) -> usize {
        self.frozen_prefix_len
    }

    pub fn index(&self, tag: &str) -> Result<usize> {
        self.tags.iter().position(|t| t == tag).ok_or_else(|| Error::UnregisteredInstruction(tag.into()))
    }

    pub fn tag(&self, index: usize) -> Result<&str> {
        self.tags.get(index).map(String::as_str).ok_or(Error::InstructionIndex { index, len: self.len() })
    }

    /// Start offsets of the extension segments.
    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    /// `[start, end)` of every segment.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (k, &s) in self.segments.iter().enumerate() {
            let e = self.segments.get(k + 1).copied().unwrap_or(self.tags.len());
            out.push((s, e));
        }
        out
    }

    /// Segment containing `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.len() {
            return Err(Error::InstructionIndex { index, len: self.len() });
        }
        let seg = self.segments.iter().rposition(|&s| s <= index).unwrap_or(0);
        Ok((seg, index - self.segments[seg]))
    }
}
