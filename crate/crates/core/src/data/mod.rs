//! Synthetic corpus generation, character tokenisation, and batching.

mod batch;
mod corpus;
mod grammar;
mod vocab;

pub use batch::{batch_iter, sequential_batches, Batch, BatchStream, StreamState};
pub use corpus::{
    generate_corpus, read_lines, split_prompt, Corpus, Manifest, PromptPair, EVAL_FILE,
    MANIFEST_FILE, PROMPTS_FILE, PROMPT_FRACTION, REFERENCES_FILE, TRAIN_FILE,
};
pub use grammar::{EntropyRate, GrammarConfig, SyntheticGrammar};
pub use vocab::{Vocabulary, BOS, EOS, PAD};

use crate::error::Result;

/// Tokenises every line of a split.
pub fn tokenize_all(vocab: &Vocabulary, lines: &[String]) -> Result<Vec<Vec<usize>>> {
    lines.iter().map(|l| vocab.tokenize(l)).collect()
}
