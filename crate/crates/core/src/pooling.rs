//! MIL pooling operators over a bag of projected frame features `H` (`K x D'`).
//!
//! Mean and max pooling are fixed aggregations. Attention pooling takes a
//! weighted average `sum_i w_i h_i` whose weights come from a small network,
//! either `a^T tanh(V h_i)` or the gated form `a^T (tanh(V h_i) * sigmoid(U h_i))`,
//! normalized over the bag by softmax or sparsemax. Several heads give several
//! pooled vectors. Every differentiable path has an analytic backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::math::sigmoid;
use crate::serde_arrays;
use crate::{Error, Result};

/// Tolerance on `sum(w) == 1` accepted by [`attention_pool`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Softmax,
    Sparsemax,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalization::Softmax),
            "sparsemax" => Ok(Normalization::Sparsemax),
            _ => Err(Error::Config(format!(
                "normalization must be softmax or sparsemax, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Softmax => "softmax",
            Normalization::Sparsemax => "sparsemax",
        })
    }
}

impl Normalization {
    pub fn apply(self, z: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Normalization::Softmax => softmax(z),
            Normalization::Sparsemax => sparsemax(z),
        }
    }

    /// Vector-Jacobian product: gradient w.r.t. logits given output `p` and upstream `dp`.
    pub fn backward(self, p: ArrayView1<f64>, dp: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Normalization::Softmax => {
                let inner = p.dot(&dp);
                Array1::from_shape_fn(p.len(), |i| p[i] * (dp[i] - inner))
            }
            Normalization::Sparsemax => {
                let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
                let mean = support.iter().map(|&i| dp[i]).sum::<f64>() / support.len() as f64;
                let mut dz = Array1::zeros(p.len());
                for i in support {
                    dz[i] = dp[i] - mean;
                }
                dz
            }
        }
    }
}

fn nonempty(h: &ArrayView2<f64>) -> Result<()> {
    if h.nrows() == 0 {
        Err(Error::EmptyBag)
    } else {
        Ok(())
    }
}

pub fn mean_pool(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    nonempty(&h)?;
    Ok(h.mean_axis(Axis(0)).expect("nonempty"))
}

pub fn max_pool(h: ArrayView2<f64>) -> Result<Array1<f64>> {
    let idx = max_pool_argmax(h)?;
    Ok(Array1::from_shape_fn(h.ncols(), |j| h[[idx[j], j]]))
}

/// Row index of the first maximum in every column.
pub fn max_pool_argmax(h: ArrayView2<f64>) -> Result<Vec<usize>> {
    nonempty(&h)?;
    Ok(h.columns()
        .into_iter()
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Euclidean projection of `z` onto the probability simplex.
///
/// Sort descending, take the largest `k` with `1 + k z_(k) > sum_{j<=k} z_(j)`,
/// set `tau = (sum_{j<=k} z_(j) - 1) / k` and return `max(z - tau, 0)`.
/// The maximum is subtracted first, so a single-coordinate support yields exactly 1.
pub fn sparsemax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = z.mapv(|v| v - max);
    let tau = shifted_threshold(shifted.view());
    shifted.mapv(|v| (v - tau).max(0.0))
}

pub fn sparsemax_threshold(z: ArrayView1<f64>) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + shifted_threshold(z.mapv(|v| v - max).view())
}

fn shifted_threshold(z: ArrayView1<f64>) -> f64 {
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = sorted[0];
    let mut support = 1;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// Parameters `{a, V, U}` of one attention network. `V` and `U` are `L x D'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    #[serde(with = "serde_arrays::vec1")]
    pub a: Array1<f64>,
    #[serde(with = "serde_arrays::mat2")]
    pub v: Array2<f64>,
    #[serde(with = "serde_arrays::mat2")]
    pub u: Array2<f64>,
}

impl AttentionHead {
    pub fn new(a: Array1<f64>, v: Array2<f64>, u: Array2<f64>) -> Result<Self> {
        let head = AttentionHead { a, v, u };
        head.validate()?;
        Ok(head)
    }

    pub fn zeros(hidden: usize, feature_dim: usize) -> Self {
        AttentionHead {
            a: Array1::zeros(hidden),
            v: Array2::zeros((hidden, feature_dim)),
            u: Array2::zeros((hidden, feature_dim)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.a.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.a.len();
        if self.v.nrows() != l {
            return Err(Error::shape("attention V rows", l, self.v.nrows()));
        }
        if self.u.dim() != self.v.dim() {
            return Err(Error::shape(
                "attention U shape",
                format!("{:?}", self.v.dim()),
                format!("{:?}", self.u.dim()),
            ));
        }
        Ok(())
    }

    fn check_input(&self, h: &ArrayView2<f64>) -> Result<()> {
        self.validate()?;
        nonempty(h)?;
        if h.ncols() != self.feature_dim() {
            return Err(Error::shape("attention input", self.feature_dim(), h.ncols()));
        }
        Ok(())
    }
}

/// Intermediate values of one head, kept for the backward pass.
struct HeadForward {
    /// `tanh(H V^T)`, `K x L`.
    tanh: Array2<f64>,
    /// `sigmoid(H U^T)` when gated.
    gate: Option<Array2<f64>>,
    weights: Array1<f64>,
}

fn head_forward(
    h: ArrayView2<f64>,
    head: &AttentionHead,
    normalization: Normalization,
    gated: bool,
) -> HeadForward {
    let tanh = h.dot(&head.v.t()).mapv(f64::tanh);
    let (logits, gate) = if gated {
        let gate = h.dot(&head.u.t()).mapv(sigmoid);
        ((&tanh * &gate).dot(&head.a), Some(gate))
    } else {
        (tanh.dot(&head.a), None)
    };
    let weights = normalization.apply(logits.view());
    HeadForward {
        tanh,
        gate,
        weights,
    }
}

/// Ungated attention logits `e_i = a^T tanh(V h_i)`.
pub fn attention_logits(h: ArrayView2<f64>, head: &AttentionHead) -> Result<Array1<f64>> {
    head.check_input(&h)?;
    Ok(h.dot(&head.v.t()).mapv(f64::tanh).dot(&head.a))
}

/// Gated attention logits `e_i = a^T (tanh(V h_i) * sigmoid(U h_i))`.
pub fn gated_attention_logits(h: ArrayView2<f64>, head: &AttentionHead) -> Result<Array1<f64>> {
    head.check_input(&h)?;
    let tanh = h.dot(&head.v.t()).mapv(f64::tanh);
    let gate = h.dot(&head.u.t()).mapv(sigmoid);
    Ok((tanh * gate).dot(&head.a))
}

pub fn attention_weights(
    h: ArrayView2<f64>,
    head: &AttentionHead,
    normalization: Normalization,
) -> Result<Array1<f64>> {
    Ok(normalization.apply(attention_logits(h, head)?.view()))
}

pub fn gated_attention_weights(
    h: ArrayView2<f64>,
    head: &AttentionHead,
    normalization: Normalization,
) -> Result<Array1<f64>> {
    Ok(normalization.apply(gated_attention_logits(h, head)?.view()))
}

/// Weighted average `sum_i w_i h_i`; `w` must lie on the simplex.
pub fn attention_pool(h: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<Array1<f64>> {
    nonempty(&h)?;
    if w.len() != h.nrows() {
        return Err(Error::shape("attention weights", h.nrows(), w.len()));
    }
    let total = w.sum();
    if (total - 1.0).abs() > SIMPLEX_TOLERANCE || w.iter().any(|&v| v < 0.0) {
        return Err(Error::NotSimplex(total));
    }
    Ok(w.dot(&h))
}

/// `M` attention heads sharing `(L, D')`, one normalization and one gating choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiAttention {
    pub heads: Vec<AttentionHead>,
    pub normalization: Normalization,
    pub gated: bool,
}

impl MultiAttention {
    pub fn new(heads: Vec<AttentionHead>, normalization: Normalization, gated: bool) -> Result<Self> {
        let ma = MultiAttention {
            heads,
            normalization,
            gated,
        };
        ma.validate()?;
        Ok(ma)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::Config("multi-attention needs at least one head".into()))?;
        for head in &self.heads {
            head.validate()?;
            if head.v.dim() != first.v.dim() {
                return Err(Error::shape(
                    "attention head shape",
                    format!("{:?}", first.v.dim()),
                    format!("{:?}", head.v.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Attention weights of every head over the rows of `h`.
    pub fn weights(&self, h: ArrayView2<f64>) -> Result<Vec<Array1<f64>>> {
        self.heads
            .iter()
            .map(|head| {
                if self.gated {
                    gated_attention_weights(h, head, self.normalization)
                } else {
                    attention_weights(h, head, self.normalization)
                }
            })
            .collect()
    }
}

/// Row `m` is the bag pooled with head `m`'s weights.
pub fn multi_attention_pool(h: ArrayView2<f64>, ma: &MultiAttention) -> Result<Array2<f64>> {
    Ok(multi_attention_forward(h, ma)?.0)
}

/// Pooled rows together with the per-head weight vectors.
pub fn multi_attention_forward(
    h: ArrayView2<f64>,
    ma: &MultiAttention,
) -> Result<(Array2<f64>, Vec<Array1<f64>>)> {
    ma.validate()?;
    let weights = ma.weights(h)?;
    let mut pooled = Array2::zeros((ma.num_heads(), h.ncols()));
    for (mut row, w) in pooled.outer_iter_mut().zip(&weights) {
        row.assign(&attention_pool(h, w.view())?);
    }
    Ok((pooled, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub a: Array1<f64>,
    pub v: Array2<f64>,
    pub u: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    pub d_frames: Array2<f64>,
    pub d_heads: Vec<HeadGradients>,
}

/// Gradients of `sum(upstream * multi_attention_pool(h, ma))` w.r.t. `h` and every head.
pub fn pooling_backward(
    h: ArrayView2<f64>,
    ma: &MultiAttention,
    upstream: ArrayView2<f64>,
) -> Result<PoolGradients> {
    ma.validate()?;
    if upstream.dim() != (ma.num_heads(), h.ncols()) {
        return Err(Error::shape(
            "pooling upstream gradient",
            format!("({}, {})", ma.num_heads(), h.ncols()),
            format!("{:?}", upstream.dim()),
        ));
    }
    let mut d_frames = Array2::zeros(h.raw_dim());
    let mut d_heads = Vec::with_capacity(ma.num_heads());
    for (head, up) in ma.heads.iter().zip(upstream.outer_iter()) {
        head.check_input(&h)?;
        let fwd = head_forward(h, head, ma.normalization, ma.gated);
        // pooled = w^T H
        let d_weights = h.dot(&up);
        for (mut row, &w) in d_frames.outer_iter_mut().zip(fwd.weights.iter()) {
            row.scaled_add(w, &up);
        }
        let d_logits = ma.normalization.backward(fwd.weights.view(), d_weights.view());
        // d(logit_i)/d(hidden_i) = a, broadcast over frames
        let d_hidden = outer(&d_logits, &head.a);
        let one_minus_sq = fwd.tanh.mapv(|t| 1.0 - t * t);
        let grads = match &fwd.gate {
            None => {
                let da = fwd.tanh.t().dot(&d_logits);
                let dz_v = d_hidden * one_minus_sq;
                let dv = dz_v.t().dot(&h);
                d_frames += &dz_v.dot(&head.v);
                HeadGradients {
                    a: da,
                    v: dv,
                    u: Array2::zeros(head.u.raw_dim()),
                }
            }
            Some(gate) => {
                let da = (&fwd.tanh * gate).t().dot(&d_logits);
                let dz_v = &d_hidden * gate * one_minus_sq;
                let dz_u = &d_hidden * &fwd.tanh * gate.mapv(|g| g * (1.0 - g));
                let dv = dz_v.t().dot(&h);
                let du = dz_u.t().dot(&h);
                d_frames += &dz_v.dot(&head.v);
                d_frames += &dz_u.dot(&head.u);
                HeadGradients { a: da, v: dv, u: du }
            }
        };
        d_heads.push(grads);
    }
    Ok(PoolGradients { d_frames, d_heads })
}

/// Gradient of `upstream . mean_pool(h)` w.r.t. `h` for a bag of `rows` frames.
pub fn mean_pool_backward(rows: usize, upstream: ArrayView1<f64>) -> Array2<f64> {
    let scale = 1.0 / rows as f64;
    let mut d = Array2::zeros((rows, upstream.len()));
    for mut row in d.outer_iter_mut() {
        row.assign(&(&upstream * scale));
    }
    d
}

/// Routes each column's gradient to the row that attained its maximum.
pub fn max_pool_backward(h: ArrayView2<f64>, upstream: ArrayView1<f64>) -> Result<Array2<f64>> {
    let idx = max_pool_argmax(h)?;
    let mut d = Array2::zeros(h.raw_dim());
    for (j, &i) in idx.iter().enumerate() {
        d[[i, j]] = upstream[j];
    }
    Ok(d)
}

fn outer(x: &Array1<f64>, y: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), y.len()), |(i, j)| x[i] * y[j])
}
