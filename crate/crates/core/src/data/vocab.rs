use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Character-level vocabulary. Ids 0, 1, 2 are pad, bos, eos; every other id
/// maps to exactly one character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Input(format!("duplicate vocabulary symbol {c:?}")));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.symbols.len() + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + SPECIALS)
    }

    pub fn symbol_of(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS).and_then(|i| self.symbols.get(i).copied())
    }

    /// `[bos, symbols.., eos]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        for c in text.chars() {
            ids.push(
                self.id_of(c)
                    .ok_or_else(|| Error::Input(format!("symbol {c:?} not in vocabulary")))?,
            );
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Inverse of [`Vocabulary::tokenize`]: special ids are dropped, any id
    /// outside the vocabulary is an error.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| {
                self.symbol_of(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary")))
            })
            .collect()
    }
}
