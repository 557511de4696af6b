//! Bag-level classifier heads `g`: context gating, logistic and
//! mixture-of-experts scoring, the element-wise max over attention heads,
//! and the class-weighted cross entropy used for training.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::math::sigmoid;
use crate::serde_arrays;
use crate::{Error, Result};

/// Predictions are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const PREDICTION_CLAMP: f64 = 1e-7;

/// Independent per-class probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(pub Array1<f64>);

impl ClassScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

/// `out = sigmoid(W x + b) * x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextGateParams {
    #[serde(with = "serde_arrays::mat2")]
    pub w: Array2<f64>,
    #[serde(with = "serde_arrays::vec1")]
    pub b: Array1<f64>,
}

impl ContextGateParams {
    pub fn zeros(dim: usize) -> Self {
        ContextGateParams {
            w: Array2::zeros((dim, dim)),
            b: Array1::zeros(dim),
        }
    }

    fn check(&self, x: &ArrayView1<f64>) -> Result<()> {
        let d = self.b.len();
        if self.w.dim() != (d, d) {
            return Err(Error::shape("context gate W", format!("({d}, {d})"), format!("{:?}", self.w.dim())));
        }
        if x.len() != d {
            return Err(Error::shape("context gate input", d, x.len()));
        }
        Ok(())
    }
}

pub fn context_gate(x: ArrayView1<f64>, p: &ContextGateParams) -> Result<Array1<f64>> {
    p.check(&x)?;
    let gate = (p.w.dot(&x) + &p.b).mapv(sigmoid);
    Ok(gate * x)
}

/// Returns the input gradient and the parameter gradients.
pub fn context_gate_backward(
    x: ArrayView1<f64>,
    p: &ContextGateParams,
    upstream: ArrayView1<f64>,
) -> Result<(Array1<f64>, ContextGateParams)> {
    p.check(&x)?;
    if upstream.len() != x.len() {
        return Err(Error::shape("context gate upstream", x.len(), upstream.len()));
    }
    let gate = (p.w.dot(&x) + &p.b).mapv(sigmoid);
    let d_pre = Array1::from_shape_fn(x.len(), |i| upstream[i] * x[i] * gate[i] * (1.0 - gate[i]));
    let dx = &gate * &upstream + p.w.t().dot(&d_pre);
    let dw = outer(d_pre.view(), x);
    Ok((dx, ContextGateParams { w: dw, b: d_pre }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// `n x D'`
    #[serde(with = "serde_arrays::mat2")]
    pub w: Array2<f64>,
    #[serde(with = "serde_arrays::vec1")]
    pub b: Array1<f64>,
}

impl LogisticParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        LogisticParams {
            w: Array2::zeros((classes, dim)),
            b: Array1::zeros(classes),
        }
    }

    fn check(&self, x: &ArrayView1<f64>) -> Result<()> {
        if self.w.nrows() != self.b.len() {
            return Err(Error::shape("logistic bias", self.w.nrows(), self.b.len()));
        }
        if x.len() != self.w.ncols() {
            return Err(Error::shape("logistic input", self.w.ncols(), x.len()));
        }
        Ok(())
    }
}

pub fn logistic_classify(x: ArrayView1<f64>, p: &LogisticParams) -> Result<ClassScores> {
    p.check(&x)?;
    Ok(ClassScores((p.w.dot(&x) + &p.b).mapv(sigmoid)))
}

/// Per class: `E` logistic experts and a softmax gate over `E + 1` options,
/// the last being a "no expert" option that contributes a score of 0.
/// Every weight vector carries a trailing bias entry (length `D' + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEParams {
    /// `n x E x (D'+1)`
    #[serde(with = "serde_arrays::mat3")]
    pub experts: Array3<f64>,
    /// `n x (E+1) x (D'+1)`
    #[serde(with = "serde_arrays::mat3")]
    pub gates: Array3<f64>,
}

impl MoEParams {
    pub fn zeros(classes: usize, experts: usize, dim: usize) -> Self {
        MoEParams {
            experts: Array3::zeros((classes, experts, dim + 1)),
            gates: Array3::zeros((classes, experts + 1, dim + 1)),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.dim().1
    }

    fn check(&self, x: &ArrayView1<f64>) -> Result<()> {
        let (n, e, d1) = self.experts.dim();
        if e == 0 {
            return Err(Error::Config("mixture of experts needs at least one expert".into()));
        }
        if self.gates.dim() != (n, e + 1, d1) {
            return Err(Error::shape(
                "MoE gate",
                format!("({n}, {}, {d1})", e + 1),
                format!("{:?}", self.gates.dim()),
            ));
        }
        if x.len() + 1 != d1 {
            return Err(Error::shape("MoE input", d1 - 1, x.len()));
        }
        Ok(())
    }
}

/// Gate probabilities (`E+1`) and expert probabilities (`E`) for one class.
struct MoeClassForward {
    gate: Array1<f64>,
    expert: Array1<f64>,
}

fn moe_class_forward(p: &MoEParams, class: usize, x: ArrayView1<f64>) -> MoeClassForward {
    let d = x.len();
    let affine = |w: ArrayView1<f64>| w.slice(s![..d]).dot(&x) + w[d];
    let gate_logits: Array1<f64> = p
        .gates
        .index_axis(Axis(0), class)
        .outer_iter()
        .map(affine)
        .collect();
    let expert: Array1<f64> = p
        .experts
        .index_axis(Axis(0), class)
        .outer_iter()
        .map(|w| sigmoid(affine(w)))
        .collect();
    MoeClassForward {
        gate: crate::pooling::softmax(gate_logits.view()),
        expert,
    }
}

pub fn moe_classify(x: ArrayView1<f64>, p: &MoEParams) -> Result<ClassScores> {
    p.check(&x)?;
    let n = p.experts.dim().0;
    Ok(ClassScores(Array1::from_shape_fn(n, |c| {
        let f = moe_class_forward(p, c, x);
        let e = f.expert.len();
        // rounding can push the convex combination a few ulps past 1
        f.gate.slice(s![..e]).dot(&f.expert).min(1.0)
    })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Logistic,
    Moe,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ClassifierKind::Logistic),
            "moe" => Ok(ClassifierKind::Moe),
            _ => Err(Error::Config(format!("classifier must be logistic or moe, got `{s}`"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::Moe => "moe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Classifier {
    Logistic(LogisticParams),
    Moe(MoEParams),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Logistic(_) => ClassifierKind::Logistic,
            Classifier::Moe(_) => ClassifierKind::Moe,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Logistic(p) => p.b.len(),
            Classifier::Moe(p) => p.experts.dim().0,
        }
    }

    pub fn classify(&self, x: ArrayView1<f64>) -> Result<ClassScores> {
        match self {
            Classifier::Logistic(p) => logistic_classify(x, p),
            Classifier::Moe(p) => moe_classify(x, p),
        }
    }

    /// Gradients of `upstream . classify(x)` w.r.t. `x` and the parameters.
    pub fn backward(&self, x: ArrayView1<f64>, upstream: ArrayView1<f64>) -> Result<(Array1<f64>, Classifier)> {
        if upstream.len() != self.num_classes() {
            return Err(Error::shape("classifier upstream", self.num_classes(), upstream.len()));
        }
        match self {
            Classifier::Logistic(p) => {
                p.check(&x)?;
                let scores = (p.w.dot(&x) + &p.b).mapv(sigmoid);
                let d_logit = Array1::from_shape_fn(scores.len(), |c| upstream[c] * scores[c] * (1.0 - scores[c]));
                let dx = p.w.t().dot(&d_logit);
                let grad = LogisticParams {
                    w: outer(d_logit.view(), x),
                    b: d_logit,
                };
                Ok((dx, Classifier::Logistic(grad)))
            }
            Classifier::Moe(p) => {
                p.check(&x)?;
                let (n, e, _) = p.experts.dim();
                let d = x.len();
                let mut grad = MoEParams::zeros(n, e, d);
                let mut dx = Array1::zeros(d);
                for c in 0..n {
                    let f = moe_class_forward(p, c, x);
                    let score = f.gate.slice(s![..e]).dot(&f.expert);
                    let up = upstream[c];
                    for k in 0..=e {
                        // softmax backward: pi_k (d_pi_k - sum_j pi_j d_pi_j), sum_j pi_j d_pi_j = up * score
                        let d_pi = if k < e { up * f.expert[k] } else { 0.0 };
                        let d_logit = f.gate[k] * (d_pi - up * score);
                        accumulate_affine(grad.gates.slice_mut(s![c, k, ..]), p.gates.slice(s![c, k, ..]), x, d_logit, &mut dx);
                    }
                    for k in 0..e {
                        let d_logit = up * f.gate[k] * f.expert[k] * (1.0 - f.expert[k]);
                        accumulate_affine(grad.experts.slice_mut(s![c, k, ..]), p.experts.slice(s![c, k, ..]), x, d_logit, &mut dx);
                    }
                }
                Ok((dx, Classifier::Moe(grad)))
            }
        }
    }
}

/// Adds the gradient of `d_logit * (w[..d] . x + w[d])` into `grad` and `dx`.
fn accumulate_affine(
    mut grad: ndarray::ArrayViewMut1<f64>,
    w: ArrayView1<f64>,
    x: ArrayView1<f64>,
    d_logit: f64,
    dx: &mut Array1<f64>,
) {
    let d = x.len();
    grad.slice_mut(s![..d]).scaled_add(d_logit, &x);
    grad[d] += d_logit;
    dx.scaled_add(d_logit, &w.slice(s![..d]));
}

/// Element-wise maximum over the per-head scores.
pub fn combine_heads(per_head: &[ClassScores]) -> Result<ClassScores> {
    let winners = combine_heads_argmax(per_head)?;
    Ok(ClassScores(Array1::from_shape_fn(winners.len(), |c| per_head[winners[c]].0[c])))
}

/// Index of the first head attaining the maximum, per class.
pub fn combine_heads_argmax(per_head: &[ClassScores]) -> Result<Vec<usize>> {
    let first = per_head.first().ok_or(Error::Empty("head score list"))?;
    let n = first.len();
    if let Some(bad) = per_head.iter().find(|s| s.len() != n) {
        return Err(Error::shape("head scores", n, bad.len()));
    }
    Ok((0..n)
        .map(|c| {
            let mut best = 0;
            for (m, s) in per_head.iter().enumerate() {
                if s.0[c] > per_head[best].0[c] {
                    best = m;
                }
            }
            best
        })
        .collect())
}

fn check_loss_inputs(pred: &ClassScores, labels: &[f64], weights: &[f64]) -> Result<()> {
    if labels.len() != pred.len() {
        return Err(Error::shape("loss labels", pred.len(), labels.len()));
    }
    if weights.len() != pred.len() {
        return Err(Error::shape("loss weights", pred.len(), weights.len()));
    }
    Ok(())
}

/// `sum_c w_c [-y_c log p_c - (1 - y_c) log(1 - p_c)]` with `p` clamped to `[EPS, 1-EPS]`.
pub fn weighted_cross_entropy(pred: &ClassScores, labels: &[f64], weights: &[f64]) -> Result<f64> {
    check_loss_inputs(pred, labels, weights)?;
    Ok(pred
        .0
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            let p = p.clamp(PREDICTION_CLAMP, 1.0 - PREDICTION_CLAMP);
            w * (-y * p.ln() - (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

/// Derivative of [`weighted_cross_entropy`] w.r.t. the unclamped predictions.
/// Entries outside the clamp range have zero derivative.
pub fn weighted_cross_entropy_backward(pred: &ClassScores, labels: &[f64], weights: &[f64]) -> Result<Array1<f64>> {
    check_loss_inputs(pred, labels, weights)?;
    Ok(Array1::from_shape_fn(pred.len(), |c| {
        let p = pred.0[c];
        if !(PREDICTION_CLAMP..=1.0 - PREDICTION_CLAMP).contains(&p) {
            return 0.0;
        }
        let y = labels[c];
        weights[c] * (-y / p + (1.0 - y) / (1.0 - p))
    }))
}

fn outer(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.len(), y.len()), |(i, j)| x[i] * y[j])
}
