use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{GrammarConfig, SyntheticGrammar};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const REFERENCES_FILE: &str = "references.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Fraction of the prompt cut from the front of each eval sequence.
pub const PROMPT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub prompt: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub pairs: Vec<PromptPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub n_sequences: usize,
    pub train_fraction: f64,
    pub grammar: GrammarConfig,
    pub entropy_nats_per_token: f64,
    pub perplexity_floor: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_pairs: usize,
}

/// Splits a sequence into its prompt (first half) and reference
/// continuation; `None` when the reference would be empty.
pub fn split_prompt(sequence: &str) -> Option<PromptPair> {
    let chars: Vec<char> = sequence.chars().collect();
    let cut = (chars.len() as f64 * PROMPT_FRACTION).floor() as usize;
    (cut < chars.len() && cut > 0).then(|| PromptPair {
        prompt: chars[..cut].iter().collect(),
        reference: chars[cut..].iter().collect(),
    })
}

/// Draws `n_sequences` distinct strings from the grammar and splits them into
/// disjoint train and eval sets; prompt/reference pairs come from the eval
/// set.
pub fn generate_corpus(
    grammar: &SyntheticGrammar,
    n_sequences: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Corpus> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "data.train_fraction",
            "split ratios must both be positive and sum to 1",
        ));
    }
    let n_train = (n_sequences as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n_sequences {
        return Err(Error::config(
            "data.n_sequences",
            format!("{n_sequences} sequences cannot fill both splits"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n_sequences);
    let mut sequences = Vec::with_capacity(n_sequences);
    let max_attempts = n_sequences.saturating_mul(100).max(1000);
    let mut attempts = 0;
    while sequences.len() < n_sequences {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::config(
                "data.n_sequences",
                format!(
                    "grammar produced only {} distinct sequences in {max_attempts} draws",
                    sequences.len()
                ),
            ));
        }
        let s = grammar.sample(&mut rng);
        if seen.insert(s.clone()) {
            sequences.push(s);
        }
    }
    let eval = sequences.split_off(n_train);
    let pairs = eval.iter().filter_map(|s| split_prompt(s)).collect();
    Ok(Corpus {
        train: sequences,
        eval,
        pairs,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

impl Corpus {
    pub fn write(&self, dir: &Path, manifest: &Manifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join(TRAIN_FILE), &self.train)?;
        write_lines(&dir.join(EVAL_FILE), &self.eval)?;
        let prompts: Vec<String> = self.pairs.iter().map(|p| p.prompt.clone()).collect();
        let refs: Vec<String> = self.pairs.iter().map(|p| p.reference.clone()).collect();
        write_lines(&dir.join(PROMPTS_FILE), &prompts)?;
        write_lines(&dir.join(REFERENCES_FILE), &refs)?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(manifest)? + "\n";
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let train = read_lines(&dir.join(TRAIN_FILE))?;
        let eval = read_lines(&dir.join(EVAL_FILE))?;
        let prompts = read_lines(&dir.join(PROMPTS_FILE))?;
        let refs = read_lines(&dir.join(REFERENCES_FILE))?;
        if prompts.len() != refs.len() {
            return Err(Error::Input(format!(
                "{} prompts but {} references in {}",
                prompts.len(),
                refs.len(),
                dir.display()
            )));
        }
        let pairs = prompts
            .into_iter()
            .zip(refs)
            .map(|(prompt, reference)| PromptPair { prompt, reference })
            .collect();
        Ok(Corpus { train, eval, pairs })
    }
}

impl Manifest {
    pub fn new(grammar: &SyntheticGrammar, corpus: &Corpus, seed: u64, train_fraction: f64) -> Self {
        let rate = grammar.entropy_rate();
        Manifest {
            seed,
            n_sequences: corpus.train.len() + corpus.eval.len(),
            train_fraction,
            grammar: grammar.config().clone(),
            entropy_nats_per_token: rate.nats_per_token,
            perplexity_floor: rate.perplexity_floor,
            n_train: corpus.train.len(),
            n_eval: corpus.eval.len(),
            n_pairs: corpus.pairs.len(),
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
