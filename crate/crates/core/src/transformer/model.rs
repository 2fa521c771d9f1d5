use serde::{Deserialize, Serialize};

use super::decode::KvDecoder;
use super::params::{ParameterSet, PARAMS_PER_BLOCK};
use super::ModelConfig;
use crate::autograd::{kernels, no_grad, Tensor};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};

pub(super) const LN_EPS: f64 = 1e-5;

/// Where per-layer features are read from the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTap {
    /// The block output after its second residual add.
    #[default]
    Residual,
    /// The same output passed through a parameter-free layer norm.
    Normalized,
}

/// Everything one forward pass exposes to the distillation losses.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    /// One `[batch, seq, hidden]` tensor per block.
    pub features: Vec<Tensor>,
    /// One `[batch, heads, seq, seq]` post-softmax map per block.
    pub attentions: Vec<Tensor>,
}

struct Block<'a> {
    ln1: (&'a Tensor, &'a Tensor),
    wq: (&'a Tensor, &'a Tensor),
    wk: (&'a Tensor, &'a Tensor),
    wv: (&'a Tensor, &'a Tensor),
    wo: (&'a Tensor, &'a Tensor),
    ln2: (&'a Tensor, &'a Tensor),
    w1: (&'a Tensor, &'a Tensor),
    w2: (&'a Tensor, &'a Tensor),
}

/// A parameter set bound to tensors, ready to run forward passes. Bind with
/// `trainable = true` to record gradients for every parameter.
pub struct Model {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl Model {
    pub fn bind(params: &ParameterSet, trainable: bool) -> Model {
        Model {
            config: params.config.clone(),
            tensors: params.to_tensors(trainable),
        }
    }

    /// Wraps tensors laid out in the canonical parameter order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Model {
        assert_eq!(
            tensors.len(),
            2 + PARAMS_PER_BLOCK * config.num_layers + 2,
            "tensor count does not match the model layout"
        );
        Model { config, tensors }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Accumulated gradient of every parameter, in canonical order.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    fn block(&self, l: usize) -> Block<'_> {
        let t = &self.tensors[2 + l * PARAMS_PER_BLOCK..2 + (l + 1) * PARAMS_PER_BLOCK];
        Block {
            ln1: (&t[0], &t[1]),
            wq: (&t[2], &t[3]),
            wk: (&t[4], &t[5]),
            wv: (&t[6], &t[7]),
            wo: (&t[8], &t[9]),
            ln2: (&t[10], &t[11]),
            w1: (&t[12], &t[13]),
            w2: (&t[14], &t[15]),
        }
    }

    /// Causal forward pass over a row-major `[batch, seq]` token matrix.
    pub fn forward(
        &self,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        tap: FeatureTap,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} tokens do not form a [{batch}, {seq}] batch",
                tokens.len()
            )));
        }
        if seq > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        let (d, h) = (c.hidden_dim, c.num_heads);
        let dh = d / h;
        let tok_emb = &self.tensors[0];
        let pos = self.tensors[1].narrow(0, seq)?;
        let mut x = tok_emb.embedding(tokens, &[batch, seq])?.add(&pos)?;

        let linear = |x: &Tensor, (w, b): (&Tensor, &Tensor)| x.matmul(w)?.add(b);
        let norm = |x: &Tensor, (g, b): (&Tensor, &Tensor)| x.layer_norm(LN_EPS)?.mul(g)?.add(b);
        let split_heads = |x: Tensor| x.reshape(&[batch, seq, h, dh])?.permute(&[0, 2, 1, 3]);

        let mut features = Vec::with_capacity(c.num_layers);
        let mut attentions = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let blk = self.block(l);
            let a = norm(&x, blk.ln1)?;
            let q = split_heads(linear(&a, blk.wq)?)?;
            let k = linear(&a, blk.wk)?
                .reshape(&[batch, seq, h, dh])?
                .permute(&[0, 2, 3, 1])?;
            let v = split_heads(linear(&a, blk.wv)?)?;
            let att = q
                .matmul(&k)?
                .scale(1.0 / (dh as f64).sqrt())
                .causal_softmax()?;
            let o = att
                .matmul(&v)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[batch, seq, d])?;
            x = x.add(&linear(&o, blk.wo)?)?;
            let f = linear(&linear(&norm(&x, blk.ln2)?, blk.w1)?.gelu(), blk.w2)?;
            x = x.add(&f)?;
            features.push(match tap {
                FeatureTap::Residual => x.clone(),
                FeatureTap::Normalized => x.layer_norm(LN_EPS)?,
            });
            attentions.push(att);
        }
        let n = self.tensors.len();
        let hf = norm(&x, (&self.tensors[n - 2], &self.tensors[n - 1]))?;
        let logits = hf.matmul(&tok_emb.transpose()?)?;
        Ok(ForwardTrace {
            logits,
            features,
            attentions,
        })
    }

    /// Greedy continuation of `prompt` (symbol ids, no framing) until eos or
    /// the context fills. Returns only the generated ids, eos excluded.
    pub fn generate_greedy(&self, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let mut dec = KvDecoder::new(self);
        let mut logits = Vec::new();
        for &t in std::iter::once(&BOS).chain(prompt) {
            logits = dec.step(t)?;
        }
        let mut out = Vec::new();
        while out.len() < max_new {
            // First maximum wins, so ties resolve deterministically.
            let next = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                    if x > best.1 { (i, x) } else { best }
                })
                .0;
            if next == EOS {
                break;
            }
            out.push(next);
            if dec.len() == self.config.max_seq_len {
                break;
            }
            logits = dec.step(next)?;
        }
        Ok(out)
    }

    /// [`Model::generate_greedy`] over many prompts.
    pub fn generate_greedy_batch(&self, prompts: &[&[usize]], max_new: usize) -> Result<Vec<Vec<usize>>> {
        prompts.iter().map(|p| self.generate_greedy(p, max_new)).collect()
    }

    /// Sum of next-token negative log-likelihoods and the number of scored
    /// tokens for one batch, without recording.
    pub fn nll(&self, tokens: &[usize], targets: &[usize], mask: &[bool], batch: usize, seq: usize) -> Result<(f64, usize)> {
        no_grad(|| {
            let trace = self.forward(tokens, batch, seq, FeatureTap::Residual)?;
            let v = self.config.vocab_size;
            let mut logp = vec![0.0; v];
            let mut total = 0.0;
            let mut count = 0;
            for (r, row) in trace.logits.data().chunks(v).enumerate() {
                if mask[r] {
                    kernels::log_softmax_row(row, &mut logp);
                    total -= logp[targets[r]];
                    count += 1;
                }
            }
            Ok((total, count))
        })
    }
}
