//! Evaluation metrics: perplexity, BLEU-4, ROUGE-L F1, and character error
//! rate.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::log_softmax_row;
use crate::error::{Error, Result};

const BLEU_ORDER: usize = 4;

/// One evaluation run, serialized as a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub perplexity: f64,
    pub bleu: f64,
    pub rouge_l_f1: f64,
    pub cer: f64,
    pub n_eval_tokens: usize,
    pub n_generation_pairs: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `exp` of the mean negative log-likelihood of `targets` under row-wise
/// softmax of `logits` (`targets.len()` rows of `vocab` entries).
pub fn perplexity(logits: &[f64], vocab: usize, targets: &[usize]) -> Result<f64> {
    if targets.is_empty() || vocab == 0 {
        return Err(Error::Input("perplexity of an empty token stream".into()));
    }
    if logits.len() != targets.len() * vocab {
        return Err(Error::Input(format!(
            "{} logits do not cover {} targets over {vocab} symbols",
            logits.len(),
            targets.len()
        )));
    }
    let mut logp = vec![0.0; vocab];
    let mut nll = 0.0;
    for (row, &t) in logits.chunks(vocab).zip(targets) {
        if t >= vocab {
            return Err(Error::Input(format!("target {t} outside vocabulary of {vocab}")));
        }
        log_softmax_row(row, &mut logp);
        nll -= logp[t];
    }
    perplexity_from_nll(nll, targets.len())
}

/// `exp(total_nll / count)`.
pub fn perplexity_from_nll(total_nll: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::Input("perplexity of an empty token stream".into()));
    }
    Ok((total_nll / count as f64).exp())
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram totals for orders 1..=4.
fn bleu_stats<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> [(usize, usize); BLEU_ORDER] {
    let mut stats = [(0, 0); BLEU_ORDER];
    for (i, s) in stats.iter_mut().enumerate() {
        let n = i + 1;
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.0 = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        s.1 = hyp.len().saturating_sub(n - 1);
    }
    stats
}

fn bleu_from_stats(stats: &[(usize, usize); BLEU_ORDER], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || stats[0].0 == 0 {
        return 0.0;
    }
    let log_p: f64 = stats
        .iter()
        .enumerate()
        .map(|(i, &(m, t))| {
            if i > 0 && m == 0 {
                (1.0 / (t as f64 + 1.0)).ln()
            } else {
                (m as f64 / t as f64).ln()
            }
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    bp * log_p.exp()
}

/// Sentence BLEU-4 with add-one smoothing of zero counts for orders ≥ 2.
pub fn bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("BLEU needs a nonempty reference".into()));
    }
    Ok(bleu_from_stats(&bleu_stats(hyp, reference), hyp.len(), reference.len()))
}

/// Corpus BLEU-4: n-gram counts and lengths are summed over all pairs
/// before the geometric mean and brevity penalty.
pub fn corpus_bleu<T: Eq + Hash, S: AsRef<[T]>>(pairs: &[(S, S)]) -> Result<f64> {
    let mut total = [(0, 0); BLEU_ORDER];
    let (mut h_len, mut r_len) = (0, 0);
    for (h, r) in pairs {
        let (h, r) = (h.as_ref(), r.as_ref());
        if r.is_empty() {
            return Err(Error::Input("BLEU needs a nonempty reference".into()));
        }
        for (acc, s) in total.iter_mut().zip(bleu_stats(h, r)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        h_len += h.len();
        r_len += r.len();
    }
    if pairs.is_empty() {
        return Err(Error::Input("BLEU over an empty corpus".into()));
    }
    Ok(bleu_from_stats(&total, h_len, r_len))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 between hypothesis and reference.
pub fn rouge_l_f1<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("ROUGE-L needs a nonempty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edit distance divided by the reference length.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let h: Vec<char> = hyp.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Input("CER needs a nonempty reference".into()));
    }
    Ok(edit_distance(&h, &r) as f64 / r.len() as f64)
}

/// Total edits over total reference characters.
pub fn corpus_cer<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64> {
    let (mut edits, mut chars) = (0, 0);
    for (h, r) in pairs {
        let h: Vec<char> = h.as_ref().chars().collect();
        let r: Vec<char> = r.as_ref().chars().collect();
        if r.is_empty() {
            return Err(Error::Input("CER needs a nonempty reference".into()));
        }
        edits += edit_distance(&h, &r);
        chars += r.len();
    }
    if chars == 0 {
        return Err(Error::Input("CER over an empty corpus".into()));
    }
    Ok(edits as f64 / chars as f64)
}

/// BLEU, mean ROUGE-L and CER over (hypothesis, reference) text pairs,
/// scored at character level.
pub fn generation_scores<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<(f64, f64, f64)> {
    let chars: Vec<(Vec<char>, Vec<char>)> = pairs
        .iter()
        .map(|(h, r)| (h.as_ref().chars().collect(), r.as_ref().chars().collect()))
        .collect();
    let bleu = corpus_bleu(&chars)?;
    let mut rouge = 0.0;
    for (h, r) in &chars {
        rouge += rouge_l_f1(h, r)?;
    }
    Ok((bleu, rouge / chars.len() as f64, corpus_cer(pairs)?))
}
