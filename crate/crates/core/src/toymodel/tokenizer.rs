use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::TokenId;

pub const PAD: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
const N_SPECIAL: usize = 4;

const DEFAULT_CHARS: &str = " abcdefghijklmnopqrstuvwxyz0123456789.,;:!?'\"-()/%+=&";

/// Fixed character-to-id table. Input is lowercased; unknown characters map
/// to [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    chars: Vec<char>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self { chars: DEFAULT_CHARS.chars().collect() }
    }
}

impl Tokenizer {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &chars {
            if !seen.insert(*c) {
                return Err(Error::Config(format!("duplicate tokenizer char {c:?}")));
            }
        }
        Ok(Self { chars })
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL + self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> TokenId {
        let c = c.to_lowercase().next().unwrap_or(c);
        match self.chars.iter().position(|&x| x == c) {
            Some(i) => (i + N_SPECIAL) as TokenId,
            None => UNK,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Stops at the first [`EOS`]; other special ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter_map(|&t| (t as usize).checked_sub(N_SPECIAL).and_then(|i| self.chars.get(i)))
            .collect()
    }

    /// Ids of the segment-closing punctuation characters.
    pub fn punct_ids(&self, punct: &[char]) -> Vec<TokenId> {
        punct.iter().map(|&c| self.id(c)).filter(|&t| t != UNK).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_case() {
        let t = Tokenizer::default();
        assert!(t.vocab_size() <= 64);
        let ids = t.encode("Rome, 1972!");
        assert_eq!(t.decode(&ids), "rome, 1972!");
        assert_eq!(t.encode("~")[0], UNK);
        let mut with_eos = t.encode("ab");
        with_eos.extend([EOS, t.id('c')]);
        assert_eq!(t.decode(&with_eos), "ab");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Tokenizer::new(vec!['a', 'a']).is_err());
    }
}
