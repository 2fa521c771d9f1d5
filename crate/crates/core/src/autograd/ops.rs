//! Differentiable tensor operations.

use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs in [`Tensor::kl_divergence`].
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to vector norms in [`Tensor::cosine_similarity`].
pub const NORM_FLOOR: f64 = 1e-12;

/// How a squared distance is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Divide the sum by the number of elements.
    #[default]
    Mean,
    Sum,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `b` may equal `a` in shape or be a trailing suffix of it, in which case it
/// is repeated over the leading axes.
fn check_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() || (b.ndim() < a.ndim() && a.shape().ends_with(b.shape())) {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        check_broadcast(op, self, other)?;
        let nb = other.len();
        let a = self.data_rc();
        let b = other.data_rc();
        let data: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[i % nb]))
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            &[self, other],
            move |g, needs| {
                let mut ga = needs[0].then(|| vec![0.0; a.len()]);
                let mut gb = needs[1].then(|| vec![0.0; nb]);
                for (i, (&x, &gi)) in a.iter().zip(g).enumerate() {
                    let (da, db) = df(x, b[i % nb]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = gi * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i % nb] += gi * db;
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        self.binary(other, "div", |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let x = self.data_rc();
        let data: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let y = Rc::new(data.clone());
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g, _| {
            let gx = x
                .iter()
                .zip(y.iter())
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| c * x).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g, _| {
            vec![Some(g.iter().map(|&gi| c * gi).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                msg: format!("logarithm of non-positive value {bad}"),
            });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("square root of non-positive value {bad}"),
            });
        }
        Ok(self.unary(f64::sqrt, |_, y| 0.5 / y))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044_715;
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()),
            |x, _| {
                let t = (C * (x + K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x)
            },
        )
    }

    /// `max(x, floor)`; the gradient flows only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let x = self.data_rc();
        let data = x.iter().map(|&v| v.max(floor)).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g, _| {
            let gx = x
                .iter()
                .zip(g)
                .map(|(&v, &gi)| if v > floor { gi } else { 0.0 })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn sum(&self) -> Tensor {
        let n = self.len();
        let total = self.data().iter().sum();
        Tensor::from_op(vec![], vec![total], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::Contract(format!(
                "sum_axis({axis}) on tensor of shape {:?}",
                self.shape()
            )));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &x[(o * n + a) * inner..(o * n + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(shape, out, &[self], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for a in 0..n {
                    gx[(o * n + a) * inner..(o * n + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::Contract(format!("mean_axis({axis}) out of range")))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.ndim()];
        let valid = perm.len() == self.ndim()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            )));
        }
        let (shape, data) = kernels::permute(self.data(), self.shape(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = shape.clone();
        Ok(Tensor::from_op(shape, data, &[self], move |g, _| {
            vec![Some(kernels::permute(g, &out_shape, &inverse).1)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::Contract(format!(
                "transpose needs at least 2 axes, got {:?}",
                self.shape()
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    /// Rows `start..start + len` along the first axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows = *self.shape().first().unwrap_or(&0);
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "narrow({start}, {len}) on shape {:?}",
                self.shape()
            )));
        }
        let row = self.len() / rows;
        let data = self.data()[start * row..(start + len) * row].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let total = self.len();
        Ok(Tensor::from_op(shape, data, &[self], move |g, _| {
            let mut gx = vec![0.0; total];
            gx[start * row..(start + len) * row].copy_from_slice(g);
            vec![Some(gx)]
        }))
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// `[k, n]` matrix shared across every leading index of `self`, or has
    /// the same leading (batch) axes as `self`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(shape_err("matmul", self, other));
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let a = self.data_rc();
        let b = other.data_rc();
        if b_shape.len() == 2 {
            let rows = self.len() / k;
            let mut out = vec![0.0; rows * n];
            kernels::gemm_nn(&a, &b, &mut out, rows, k, n);
            let mut shape = a_shape.to_vec();
            *shape.last_mut().unwrap() = n;
            return Ok(Tensor::from_op(shape, out, &[self, other], move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; rows * k];
                    kernels::gemm_nt(g, &b, &mut ga, rows, n, k);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(&a, g, &mut gb, rows, k, n);
                    gb
                });
                vec![ga, gb]
            }));
        }
        if a_shape.len() != b_shape.len() || a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2]
        {
            return Err(shape_err("matmul", self, other));
        }
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm_nn(
                &a[i * m * k..(i + 1) * m * k],
                &b[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a_shape.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_op(shape, out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    kernels::gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &b[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    kernels::gemm_tn(
                        &a[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    fn softmax_impl(&self, tau: f64, causal: bool) -> Result<Tensor> {
        let n = *self.shape().last().ok_or_else(|| {
            Error::Contract("softmax of a scalar".into())
        })?;
        if causal && (self.ndim() < 2 || self.shape()[self.ndim() - 2] != n) {
            return Err(Error::Contract(format!(
                "causal softmax needs square trailing axes, got {:?}",
                self.shape()
            )));
        }
        let mut y = self.data().to_vec();
        for (r, row) in y.chunks_mut(n).enumerate() {
            if causal {
                let i = r % n;
                kernels::softmax_row(&mut row[..=i], tau);
                row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                kernels::softmax_row(row, tau);
            }
        }
        let y_saved = Rc::new(y.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), y, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for ((gx_row, g_row), y_row) in gx
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(y_saved.chunks(n))
            {
                let s: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                    *o = yi * (gi - s) / tau;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Softmax over the last axis of `self / tau`.
    pub fn softmax(&self, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive and finite, got {tau}"
            )));
        }
        if self.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain {
                op: "softmax",
                msg: "non-finite logits".into(),
            });
        }
        self.softmax_impl(tau, false)
    }

    /// Row-wise softmax over square trailing `[seq, seq]` blocks where row `i`
    /// only sees columns `0..=i`; entries above the diagonal are exactly 0.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        self.softmax_impl(1.0, true)
    }

    /// Normalises each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let n = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        let mut xhat = self.data().to_vec();
        let mut inv_std = Vec::with_capacity(self.len() / n);
        for row in xhat.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            inv_std.push(r);
        }
        let saved = Rc::new(xhat.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), xhat, &[self], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for (((gx_row, g_row), x_row), &r) in gx
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(saved.chunks(n))
                .zip(inv_std.iter())
            {
                let mean_g = g_row.iter().sum::<f64>() / n as f64;
                let mean_gx = g_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((o, &gi), &xi) in gx_row.iter_mut().zip(g_row).zip(x_row) {
                    *o = r * (gi - mean_g - xi * mean_gx);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Gathers rows of a `[vocab, dim]` table; the result has shape
    /// `[..index_shape, dim]`.
    pub fn embedding(&self, ids: &[usize], index_shape: &[usize]) -> Result<Tensor> {
        if self.ndim() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: self.shape().to_vec(),
                rhs: index_shape.to_vec(),
            });
        }
        let (vocab, dim) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let table = self.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&table[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(shape, out, &[self], move |g, _| {
            let mut gt = vec![0.0; vocab * dim];
            for (r, &i) in ids.iter().enumerate() {
                for (d, &s) in gt[i * dim..(i + 1) * dim]
                    .iter_mut()
                    .zip(&g[r * dim..(r + 1) * dim])
                {
                    *d += s;
                }
            }
            vec![Some(gt)]
        }))
    }

    /// Mean next-token cross-entropy over the rows (last axis = vocabulary)
    /// whose `mask` entry is set.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let v = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("cross_entropy of a scalar".into()))?;
        let rows = self.len() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v).map(|(t, _)| t) {
            return Err(Error::Input(format!("target id {bad} out of range for {v} classes")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Ok(Tensor::scalar(0.0));
        }
        let mut logp = vec![0.0; self.len()];
        let mut total = 0.0;
        for (r, (row, out)) in self.data().chunks(v).zip(logp.chunks_mut(v)).enumerate() {
            kernels::log_softmax_row(row, out);
            if mask[r] {
                total -= out[targets[r]];
            }
        }
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let inv = 1.0 / count as f64;
        Ok(Tensor::from_op(vec![], vec![total * inv], &[self], move |g, _| {
            let scale = g[0] * inv;
            let mut gx = vec![0.0; logp.len()];
            for (r, (gx_row, lp_row)) in gx.chunks_mut(v).zip(logp.chunks(v)).enumerate() {
                if !mask[r] {
                    continue;
                }
                for (o, &lp) in gx_row.iter_mut().zip(lp_row) {
                    *o = scale * lp.exp();
                }
                gx_row[targets[r]] -= scale;
            }
            vec![Some(gx)]
        }))
    }

    /// `KL(self ‖ q) = Σ p·ln(p/q)` along the last axis, averaged over all
    /// leading positions. Terms with `p = 0` contribute 0; `q` is floored at
    /// [`PROB_FLOOR`].
    pub fn kl_divergence(&self, q: &Tensor) -> Result<Tensor> {
        require_same_shape("kl_divergence", self, q)?;
        let v = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("kl_divergence of a scalar".into()))?;
        for (name, t) in [("p", self), ("q", q)] {
            for row in t.data().chunks(v) {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
                    return Err(Error::Domain {
                        op: "kl_divergence",
                        msg: format!("{name} is not a distribution along the last axis"),
                    });
                }
            }
        }
        let rows = self.len() / v;
        let inv = 1.0 / rows as f64;
        let p = self.data_rc();
        let qd = q.data_rc();
        let mut total = 0.0;
        for (&pi, &qi) in p.iter().zip(qd.iter()) {
            if pi > 0.0 {
                total += pi * (pi / qi.max(PROB_FLOOR)).ln();
            }
        }
        Ok(Tensor::from_op(vec![], vec![total * inv], &[self, q], move |g, needs| {
            let s = g[0] * inv;
            let gp = needs[0].then(|| {
                p.iter()
                    .zip(qd.iter())
                    .map(|(&pi, &qi)| s * ((pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln() + 1.0))
                    .collect()
            });
            let gq = needs[1].then(|| {
                p.iter()
                    .zip(qd.iter())
                    .map(|(&pi, &qi)| if qi > PROB_FLOOR { -s * pi / qi } else { 0.0 })
                    .collect()
            });
            vec![gp, gq]
        }))
    }

    /// Cosine similarity along the last axis; the result drops that axis.
    /// Each norm is floored at [`NORM_FLOOR`].
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        require_same_shape("cosine_similarity", self, other)?;
        let n = *self.shape().last().unwrap_or(&1);
        let u = self.data_rc();
        let w = other.data_rc();
        let rows = self.len() / n;
        let mut cos = Vec::with_capacity(rows);
        let mut norms = Vec::with_capacity(rows);
        for (ur, wr) in u.chunks(n).zip(w.chunks(n)) {
            let nu = kernels::dot(ur, ur).sqrt();
            let nw = kernels::dot(wr, wr).sqrt();
            let (fu, fw) = (nu.max(NORM_FLOOR), nw.max(NORM_FLOOR));
            cos.push(kernels::dot(ur, wr) / (fu * fw));
            norms.push((nu, nw));
        }
        let shape = if self.ndim() == 0 {
            vec![]
        } else {
            self.shape()[..self.ndim() - 1].to_vec()
        };
        let c_saved = cos.clone();
        Ok(Tensor::from_op(shape, cos, &[self, other], move |g, needs| {
            let mut gu = needs[0].then(|| vec![0.0; u.len()]);
            let mut gw = needs[1].then(|| vec![0.0; w.len()]);
            for r in 0..rows {
                let (nu, nw) = norms[r];
                let (fu, fw) = (nu.max(NORM_FLOOR), nw.max(NORM_FLOOR));
                let c = c_saved[r];
                let ur = &u[r * n..(r + 1) * n];
                let wr = &w[r * n..(r + 1) * n];
                // d cos / du = w/(|u||w|) - cos·u/|u|², the second term only
                // when the norm was not floored.
                let cu = if nu > NORM_FLOOR { c / (fu * fu) } else { 0.0 };
                let cw = if nw > NORM_FLOOR { c / (fw * fw) } else { 0.0 };
                if let Some(gu) = gu.as_mut() {
                    for i in 0..n {
                        gu[r * n + i] = g[r] * (wr[i] / (fu * fw) - cu * ur[i]);
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for i in 0..n {
                        gw[r * n + i] = g[r] * (ur[i] / (fu * fw) - cw * wr[i]);
                    }
                }
            }
            vec![gu, gw]
        }))
    }

    /// `Σ (self - other)²`, optionally divided by the element count.
    pub fn squared_l2_distance(&self, other: &Tensor, reduction: Reduction) -> Result<Tensor> {
        require_same_shape("squared_l2_distance", self, other)?;
        let u = self.data_rc();
        let w = other.data_rc();
        let norm = match reduction {
            Reduction::Mean => 1.0 / u.len() as f64,
            Reduction::Sum => 1.0,
        };
        let total: f64 = u.iter().zip(w.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(Tensor::from_op(vec![], vec![total * norm], &[self, other], move |g, needs| {
            let s = 2.0 * g[0] * norm;
            let diff: Vec<f64> = u.iter().zip(w.iter()).map(|(a, b)| s * (a - b)).collect();
            let gw = needs[1].then(|| diff.iter().map(|d| -d).collect());
            let gu = needs[0].then_some(diff);
            vec![gu, gw]
        }))
    }
}

/// Softmax of `logits / tau` along the last axis. `tau` must be positive.
pub fn softmax_with_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    logits.softmax(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::reset_tape;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn add_is_componentwise() {
        let a = Tensor::vector(&[1.0, 2.0]);
        let b = Tensor::vector(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let id = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(&[2, 2], vec![0.5, -1.5, 2.0, 3.25]).unwrap();
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn mean_of_vector() {
        assert_eq!(Tensor::vector(&[2.0, 4.0, 6.0]).mean().item(), 4.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
        let err = a.add(&Tensor::zeros(&[2])).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn bias_broadcast_over_leading_axes() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let b = Tensor::vector(&[1.0, 2.0, 3.0]);
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let err = Tensor::vector(&[1.0, 0.0]).ln().unwrap_err();
        assert!(matches!(err, Error::Domain { op: "ln", .. }));
        assert!(Tensor::vector(&[-1.0]).ln().is_err());
    }

    #[test]
    fn softmax_values() {
        let l = Tensor::vector(&[2.0, 0.0]);
        let p1 = softmax_with_temperature(&l, 1.0).unwrap();
        assert!(close(p1.data(), &[0.880_797_077_977_882_3, 0.119_202_922_022_117_6], 1e-12));
        let p2 = softmax_with_temperature(&l, 2.0).unwrap();
        assert!(close(p2.data(), &[0.731_058_578_630_004_9, 0.268_941_421_369_995_1], 1e-12));
        let hot = Tensor::vector(&[5.0, -3.0, 1.0, 0.0]);
        let u = softmax_with_temperature(&hot, 1e6).unwrap();
        assert!(u.data().iter().all(|&x| (x - 0.25).abs() < 1e-4));
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let l = Tensor::vector(&[1.0]);
        assert!(matches!(l.softmax(0.0), Err(Error::Parameter(_))));
        assert!(matches!(l.softmax(-1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = Tensor::new(&[1, 3, 3], (0..9).map(|i| i as f64 * 0.3).collect()).unwrap();
        let a = s.causal_softmax().unwrap();
        let d = a.data();
        assert_eq!(d[0], 1.0);
        assert_eq!((d[1], d[2], d[5]), (0.0, 0.0, 0.0));
        for row in d.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::vector(&[0.3, 0.7]);
        assert_eq!(p.kl_divergence(&p).unwrap().item(), 0.0);
        let p = Tensor::vector(&[0.5, 0.5]);
        let q = Tensor::vector(&[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((p.kl_divergence(&q).unwrap().item() - expected).abs() < 1e-15);
        assert!((expected - 0.143_841_036_225_890_2).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_probability_conventions() {
        let p = Tensor::vector(&[0.0, 1.0]);
        let q = Tensor::vector(&[0.5, 0.5]);
        assert!((p.kl_divergence(&q).unwrap().item() - 2f64.ln()).abs() < 1e-15);
        // q = 0 where p > 0 is clamped rather than rejected.
        let q0 = Tensor::vector(&[1.0, 0.0]);
        let v = p.kl_divergence(&q0).unwrap().item();
        assert!((v - (1.0 / PROB_FLOOR).ln()).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_non_distribution() {
        let p = Tensor::vector(&[0.5, 0.6]);
        assert!(p.kl_divergence(&p).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = Tensor::vector(&[1.0, 0.0]);
        let v = Tensor::vector(&[0.0, 1.0]);
        let w = Tensor::vector(&[1.0, 1.0]);
        assert_eq!(u.cosine_similarity(&u).unwrap().item(), 1.0);
        assert_eq!(u.cosine_similarity(&v).unwrap().item(), 0.0);
        let c = u.cosine_similarity(&w).unwrap().item();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        // All-zero vector hits the norm floor instead of dividing by zero.
        let z = Tensor::vector(&[0.0, 0.0]);
        assert_eq!(z.cosine_similarity(&u).unwrap().item(), 0.0);
    }

    #[test]
    fn squared_distance_examples() {
        let u = Tensor::vector(&[1.0, 2.0]);
        let v = Tensor::vector(&[3.0, 2.0]);
        assert_eq!(u.squared_l2_distance(&u, Reduction::Mean).unwrap().item(), 0.0);
        assert_eq!(u.squared_l2_distance(&v, Reduction::Sum).unwrap().item(), 4.0);
        assert_eq!(u.squared_l2_distance(&v, Reduction::Mean).unwrap().item(), 2.0);
        let (u3, v3) = (u.scale(3.0), v.scale(3.0));
        assert_eq!(u3.squared_l2_distance(&v3, Reduction::Sum).unwrap().item(), 36.0);
    }

    #[test]
    fn backward_square_sum() {
        reset_tape();
        let x = Tensor::parameter(&[1], vec![3.0]).unwrap();
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_of_constant_function_is_zero() {
        reset_tape();
        let x = Tensor::parameter(&[2], vec![3.0, -1.0]).unwrap();
        let f = x.scale(0.0).add_scalar(5.0).sum();
        f.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
        Tensor::scalar(5.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        reset_tape();
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.square().backward(), Err(Error::Contract(_))));
        reset_tape();
    }

    #[test]
    fn no_grad_records_nothing() {
        reset_tape();
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = crate::autograd::no_grad(|| x.square().sum());
        assert!(!y.requires_grad());
        assert_eq!(crate::autograd::tape_len(), 0);
    }
}
