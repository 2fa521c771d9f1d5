//! A probabilistic regular grammar of nested brackets with agreement.
//!
//! Strings are generated left to right by a finite-state process whose state
//! is the stack of currently open bracket kinds (bounded by `max_depth`) and
//! the number of symbols emitted so far. From each state the process picks
//! one of: open a bracket, close the innermost bracket, emit a letter, or end
//! (only at depth 0). Letters must agree with the innermost open bracket:
//! each bracket kind owns its own letter group, and top level has another.
//! Closing brackets are forced by the stack, which gives long-range
//! dependencies; the length budget forces closes near `max_len`.
//!
//! Every choice emits a distinct symbol, so the next-token distribution of
//! the generator is exactly the choice distribution and the entropy of the
//! process is computable in closed form.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const OPENERS: [char; 3] = ['(', '[', '{'];
const CLOSERS: [char; 3] = [')', ']', '}'];
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

/// Rule weights and bounds. Weights are relative; they are renormalised over
/// the choices available in each state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub bracket_kinds: usize,
    pub letters_per_group: usize,
    pub max_depth: usize,
    pub max_len: usize,
    pub open_weight: f64,
    pub close_weight: f64,
    pub letter_weight: f64,
    pub end_weight: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            bracket_kinds: 3,
            letters_per_group: 6,
            max_depth: 3,
            max_len: 24,
            open_weight: 0.3,
            close_weight: 0.3,
            letter_weight: 0.5,
            end_weight: 0.08,
        }
    }
}

impl GrammarConfig {
    /// Returns the first offending field (relative path) on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(1..=3).contains(&self.bracket_kinds) {
            return Err(("bracket_kinds", "must be between 1 and 3".into()));
        }
        if self.letters_per_group == 0
            || (self.bracket_kinds + 1) * self.letters_per_group > LETTERS.len()
        {
            return Err((
                "letters_per_group",
                format!(
                    "must be positive with (bracket_kinds + 1) * letters_per_group <= {}",
                    LETTERS.len()
                ),
            ));
        }
        if self.max_depth == 0 {
            return Err(("max_depth", "must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(("max_len", "must be at least 2".into()));
        }
        for (name, w) in [
            ("open_weight", self.open_weight),
            ("close_weight", self.close_weight),
            ("letter_weight", self.letter_weight),
            ("end_weight", self.end_weight),
        ] {
            if !(w > 0.0) || !w.is_finite() {
                return Err((name, "must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Choice {
    Open(usize),
    Close,
    Letter(usize),
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    stack: Vec<usize>,
    len: usize,
}

/// Exact information-theoretic floor of the grammar's next-token prediction
/// task (each symbol plus the closing end-of-sequence token).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyRate {
    /// Expected total entropy of one sequence, in nats.
    pub nats_per_sequence: f64,
    /// Expected number of predicted tokens per sequence (length + 1).
    pub tokens_per_sequence: f64,
    pub nats_per_token: f64,
    /// `exp(nats_per_token)`: no model can beat this perplexity in
    /// expectation.
    pub perplexity_floor: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    config: GrammarConfig,
    vocab: Vocabulary,
}

impl SyntheticGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        config
            .validate()
            .map_err(|(field, msg)| Error::config(format!("data.grammar.{field}"), msg))?;
        let k = config.bracket_kinds;
        let letters = LETTERS
            .chars()
            .take((k + 1) * config.letters_per_group);
        let vocab = Vocabulary::new(
            OPENERS[..k]
                .iter()
                .chain(&CLOSERS[..k])
                .copied()
                .chain(letters),
        )?;
        Ok(SyntheticGrammar { config, vocab })
    }

    pub fn config(&self) -> &GrammarConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn letter_char(&self, group: usize, i: usize) -> char {
        let idx = group * self.config.letters_per_group + i;
        LETTERS.as_bytes()[idx] as char
    }

    fn symbol(&self, state: &State, choice: Choice) -> Option<char> {
        match choice {
            Choice::Open(k) => Some(OPENERS[k]),
            Choice::Close => Some(CLOSERS[*state.stack.last().expect("close at depth 0")]),
            Choice::Letter(i) => {
                let group = state.stack.last().map_or(0, |&k| k + 1);
                Some(self.letter_char(group, i))
            }
            Choice::End => None,
        }
    }

    /// Available choices with their probabilities, in a fixed order.
    fn choices(&self, state: &State) -> Vec<(Choice, f64)> {
        let c = &self.config;
        let depth = state.stack.len();
        let remaining = c.max_len - state.len;
        let mut out = Vec::new();
        if depth == 0 {
            out.push((Choice::End, c.end_weight));
        } else {
            out.push((Choice::Close, c.close_weight));
        }
        if depth < c.max_depth && remaining >= depth + 2 {
            for k in 0..c.bracket_kinds {
                out.push((Choice::Open(k), c.open_weight / c.bracket_kinds as f64));
            }
        }
        if remaining > depth {
            for i in 0..c.letters_per_group {
                out.push((Choice::Letter(i), c.letter_weight / c.letters_per_group as f64));
            }
        }
        if remaining == 0 && depth == 0 {
            out.retain(|(ch, _)| *ch == Choice::End);
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        out.into_iter().map(|(ch, w)| (ch, w / total)).collect()
    }

    fn advance(state: &State, choice: Choice) -> State {
        let mut next = state.clone();
        next.len += 1;
        match choice {
            Choice::Open(k) => next.stack.push(k),
            Choice::Close => {
                next.stack.pop();
            }
            Choice::Letter(_) | Choice::End => {}
        }
        next
    }

    fn start() -> State {
        State {
            stack: Vec::new(),
            len: 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let mut state = Self::start();
        let mut out = String::new();
        loop {
            let choices = self.choices(&state);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut picked = choices.last().expect("no choices").0;
            for &(ch, p) in &choices {
                acc += p;
                if u < acc {
                    picked = ch;
                    break;
                }
            }
            match self.symbol(&state, picked) {
                Some(c) => out.push(c),
                None => return out,
            }
            state = Self::advance(&state, picked);
        }
    }

    /// Log-probability of generating exactly `text` (end included), or
    /// `None` when the grammar cannot produce it.
    pub fn log_prob(&self, text: &str) -> Option<f64> {
        let mut state = Self::start();
        let mut total = 0.0;
        for c in text.chars().map(Some).chain(std::iter::once(None)) {
            let (choice, p) = self
                .choices(&state)
                .into_iter()
                .find(|&(ch, _)| self.symbol(&state, ch) == c)?;
            total += p.ln();
            if choice == Choice::End {
                return Some(total);
            }
            state = Self::advance(&state, choice);
        }
        unreachable!("the end symbol always terminates the walk")
    }

    pub fn parses(&self, text: &str) -> bool {
        self.log_prob(text).is_some()
    }

    /// Next-token distribution of the generator after `prefix`, indexed by
    /// vocabulary id. `None` when the prefix is not derivable.
    pub fn next_token_distribution(&self, prefix: &str) -> Option<Vec<f64>> {
        let mut state = Self::start();
        for c in prefix.chars() {
            let (choice, _) = self
                .choices(&state)
                .into_iter()
                .find(|&(ch, _)| self.symbol(&state, ch) == Some(c))?;
            state = Self::advance(&state, choice);
        }
        let mut dist = vec![0.0; self.vocab.len()];
        for (ch, p) in self.choices(&state) {
            let id = match self.symbol(&state, ch) {
                Some(c) => self.vocab.id_of(c).expect("grammar symbol in vocab"),
                None => super::vocab::EOS,
            };
            dist[id] = p;
        }
        Some(dist)
    }

    /// Expected per-sequence entropy and length by dynamic programming over
    /// the (stack, length) state space.
    pub fn entropy_rate(&self) -> EntropyRate {
        let mut memo: HashMap<State, (f64, f64)> = HashMap::new();
        let (h, n) = self.expected_from(&Self::start(), &mut memo);
        EntropyRate {
            nats_per_sequence: h,
            tokens_per_sequence: n,
            nats_per_token: h / n,
            perplexity_floor: (h / n).exp(),
        }
    }

    fn expected_from(&self, state: &State, memo: &mut HashMap<State, (f64, f64)>) -> (f64, f64) {
        if let Some(&v) = memo.get(state) {
            return v;
        }
        let choices = self.choices(state);
        let mut h: f64 = choices.iter().map(|&(_, p)| -p * p.ln()).sum();
        let mut n = 1.0;
        for &(ch, p) in &choices {
            if ch == Choice::End {
                continue;
            }
            let (hc, nc) = self.expected_from(&Self::advance(state, ch), memo);
            h += p * hc;
            n += p * nc;
        }
        memo.insert(state.clone(), (h, n));
        (h, n)
    }
}
