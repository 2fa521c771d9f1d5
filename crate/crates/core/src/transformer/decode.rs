//! Incremental inference with a key/value cache, used for greedy decoding.
//! Computes the same function as [`Model::forward`] one position at a time,
//! off the tape.

use super::model::{Model, LN_EPS};
use super::params::PARAMS_PER_BLOCK;
use crate::autograd::kernels::{dot, gemm_nn, softmax_row};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mu) * r * g + b)
        .collect()
}

/// `x · W + b` for one row.
fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    gemm_nn(x, w, &mut out, 1, x.len(), b.len());
    out
}

pub(crate) struct KvDecoder<'a> {
    model: &'a Model,
    /// Per layer, `[position, hidden]` keys and values.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> KvDecoder<'a> {
    pub(crate) fn new(model: &'a Model) -> Self {
        let l = model.config().num_layers;
        KvDecoder {
            model,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
            len: 0,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    /// Appends `token` and returns the next-token logits at its position.
    pub(crate) fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let c = self.model.config();
        let (d, h, v) = (c.hidden_dim, c.num_heads, c.vocab_size);
        if token >= v {
            return Err(Error::Input(format!("token id {token} outside vocabulary of {v}")));
        }
        if self.len >= c.max_seq_len {
            return Err(Error::Input(format!("context full at {} tokens", c.max_seq_len)));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = self.model.tensors();
        let tok_emb = p[0].data();
        let pos_emb = p[1].data();
        let t = self.len;
        let mut x: Vec<f64> = (0..d)
            .map(|j| tok_emb[token * d + j] + pos_emb[t * d + j])
            .collect();
        for l in 0..c.num_layers {
            let b = &p[2 + l * PARAMS_PER_BLOCK..2 + (l + 1) * PARAMS_PER_BLOCK];
            let a = norm(&x, b[0].data(), b[1].data());
            let q = linear(&a, b[2].data(), b[3].data());
            self.keys[l].extend(linear(&a, b[4].data(), b[5].data()));
            self.values[l].extend(linear(&a, b[6].data(), b[7].data()));
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut o = vec![0.0; d];
            let mut scores = vec![0.0; t + 1];
            for hh in 0..h {
                let cols = hh * dh..(hh + 1) * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q[cols.clone()], &keys[j * d + hh * dh..j * d + (hh + 1) * dh]) * scale;
                }
                softmax_row(&mut scores, 1.0);
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &values[j * d + hh * dh..j * d + (hh + 1) * dh];
                    for (oi, &vi) in o[cols.clone()].iter_mut().zip(vrow) {
                        *oi += w * vi;
                    }
                }
            }
            let attn = linear(&o, b[8].data(), b[9].data());
            x.iter_mut().zip(&attn).for_each(|(xi, ai)| *xi += ai);
            let a2 = norm(&x, b[10].data(), b[11].data());
            let hidden: Vec<f64> = linear(&a2, b[12].data(), b[13].data())
                .into_iter()
                .map(gelu)
                .collect();
            let f = linear(&hidden, b[14].data(), b[15].data());
            x.iter_mut().zip(&f).for_each(|(xi, fi)| *xi += fi);
        }
        let n = p.len();
        let hf = norm(&x, p[n - 2].data(), p[n - 1].data());
        self.len += 1;
        Ok(tok_emb.chunks(d).map(|row| dot(&hf, row)).collect())
    }
}
