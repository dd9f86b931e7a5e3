//! Identifier space layout and the [`DocId`] type.
//!
//! Codes are numbered globally from 1: position `i` (0-based) owns the slice
//! `[V*i + 1, V*(i+1)]`. The decoder vocabulary puts `bos` at 0 and `eos`
//! after the last code, so a code's vocabulary index is the code itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdSpace {
    /// Identifier length `L`.
    pub length: usize,
    /// Codes per position `V`.
    pub codes_per_slot: usize,
}

impl Default for IdSpace {
    fn default() -> Self {
        Self {
            length: 4,
            codes_per_slot: 256,
        }
    }
}

impl IdSpace {
    pub fn new(length: usize, codes_per_slot: usize) -> Result<Self> {
        if length == 0 || codes_per_slot == 0 {
            return Err(Error::Config(format!(
                "id space {length}x{codes_per_slot} is empty"
            )));
        }
        Ok(Self {
            length,
            codes_per_slot,
        })
    }

    /// Total numeric codes `L * V`.
    pub fn num_codes(&self) -> usize {
        self.length * self.codes_per_slot
    }

    /// Decoder vocabulary: numeric codes plus `bos` and `eos`.
    pub fn vocab_size(&self) -> usize {
        self.num_codes() + 2
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn eos(&self) -> usize {
        self.num_codes() + 1
    }

    /// Smallest code of position `pos` (0-based).
    pub fn slot_start(&self, pos: usize) -> u32 {
        (self.codes_per_slot * pos + 1) as u32
    }

    pub fn slot_end(&self, pos: usize) -> u32 {
        (self.codes_per_slot * (pos + 1)) as u32
    }

    pub fn contains(&self, pos: usize, code: u32) -> bool {
        pos < self.length && code >= self.slot_start(pos) && code <= self.slot_end(pos)
    }

    /// Global code for a slot-local index (0-based).
    pub fn code(&self, pos: usize, local: usize) -> u32 {
        debug_assert!(local < self.codes_per_slot);
        self.slot_start(pos) + local as u32
    }

    pub fn local(&self, pos: usize, code: u32) -> usize {
        (code - self.slot_start(pos)) as usize
    }

    /// Number of distinct identifiers, saturating at `u128::MAX`.
    pub fn capacity(&self) -> u128 {
        (self.codes_per_slot as u128)
            .checked_pow(self.length as u32)
            .unwrap_or(u128::MAX)
    }

    pub fn validate(&self, id: &DocId) -> Result<()> {
        if id.0.len() != self.length {
            return Err(Error::Data(format!(
                "id {id} has {} codes, expected {}",
                id.0.len(),
                self.length
            )));
        }
        for (pos, &c) in id.0.iter().enumerate() {
            if !self.contains(pos, c) {
                return Err(Error::Data(format!(
                    "id {id}: code {c} outside slot {pos} [{}, {}]",
                    self.slot_start(pos),
                    self.slot_end(pos)
                )));
            }
        }
        Ok(())
    }
}

/// Discrete document identifier: one global code per position.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocId(pub Vec<u32>);

impl DocId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn from_locals(space: &IdSpace, locals: &[usize]) -> Self {
        DocId(
            locals
                .iter()
                .enumerate()
                .map(|(pos, &l)| space.code(pos, l))
                .collect(),
        )
    }

    pub fn locals(&self, space: &IdSpace) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .map(|(pos, &c)| space.local(pos, c))
            .collect()
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for DocId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let codes = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Data(format!("malformed id `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if codes.is_empty() {
            return Err(Error::Data("empty id".into()));
        }
        Ok(DocId(codes))
    }
}
