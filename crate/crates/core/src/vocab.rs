//! The fixed 96-symbol character table.
//!
//! | index  | symbols                                  |
//! |--------|------------------------------------------|
//! | 0..=94 | printable ASCII `0x20` (space) .. `0x7E` (`~`), by code point |
//! | 95     | newline `\n`                             |
//!
//! Characters outside the table are dropped by [`Vocabulary::encode`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 96;

/// Index used at padded positions. Masks decide validity, so any index works.
pub const PAD_INDEX: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::build()
    }
}

impl Vocabulary {
    pub fn build() -> Self {
        let mut symbols: Vec<char> = (0x20u8..=0x7e).map(char::from).collect();
        symbols.push('\n');
        Vocabulary { symbols }
    }

    /// Rebuild from a stored symbol table, rejecting anything that is not the fixed table.
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self> {
        let v = Vocabulary { symbols };
        if v != Self::build() {
            return Err(Error::Checkpoint("stored vocabulary differs from the built-in table".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        match c {
            ' '..='~' => Some(c as usize - 0x20),
            '\n' => Some(95),
            _ => None,
        }
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().filter_map(|c| self.index_of(c)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().filter_map(|&i| self.symbol(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn table_shape() {
        let v = Vocabulary::build();
        assert_eq!(v.len(), 96);
        assert_eq!(v.index_of(' '), Some(0));
        assert_eq!(v.index_of('\n'), Some(95));
        let distinct: HashSet<char> = v.symbols().iter().copied().collect();
        assert_eq!(distinct.len(), 96);
        for c in ('a'..='z').chain('A'..='Z').chain('0'..='9').chain([' ']) {
            assert!(v.index_of(c).is_some(), "{c:?} missing");
        }
        for (i, &c) in v.symbols().iter().enumerate() {
            assert_eq!(v.index_of(c), Some(i));
        }
    }

    #[test]
    fn encode_drops_unknown() {
        let v = Vocabulary::build();
        let ab = v.encode("ab");
        assert_eq!(ab, vec![v.index_of('a').unwrap(), v.index_of('b').unwrap()]);
        assert_eq!(v.encode("a✓b"), ab);
        assert!(v.encode("").is_empty());
        assert!(v.encode("✓é\t").is_empty());
    }

    proptest! {
        #[test]
        fn round_trip(s in "[ -~\n]{0,64}") {
            let v = Vocabulary::build();
            prop_assert_eq!(v.decode(&v.encode(&s)), s);
        }
    }
}
