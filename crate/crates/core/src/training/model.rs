use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::classifier::{
    combine_heads, combine_heads_argmax, context_gate, context_gate_backward,
    weighted_cross_entropy, weighted_cross_entropy_backward, ClassScores, Classifier,
    ClassifierKind, ContextGateParams, LogisticParams, MoEParams,
};
use crate::pooling::{
    max_pool_argmax, mean_pool, mean_pool_backward, multi_attention_forward, pooling_backward,
    AttentionHead, MultiAttention, Normalization,
};
use crate::serde_arrays;
use crate::{Error, Result};

/// The MIL pooling operator `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingKind {
    Mean,
    Max,
    /// One head, logits `a^T tanh(V h)`.
    Attention,
    /// One head, logits `a^T (tanh(V h) * sigmoid(U h))`.
    GatedAttention,
    /// `M` gated heads, each classified separately, scores max-combined.
    MultiAttention,
}

impl PoolingKind {
    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            PoolingKind::Attention | PoolingKind::GatedAttention | PoolingKind::MultiAttention
        )
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolingKind::Mean),
            "max" => Ok(PoolingKind::Max),
            "attention" => Ok(PoolingKind::Attention),
            "gated-attention" => Ok(PoolingKind::GatedAttention),
            "multi-attention" => Ok(PoolingKind::MultiAttention),
            _ => Err(Error::Config(format!(
                "pooling must be one of mean, max, attention, gated-attention, multi-attention; got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Mean => "mean",
            PoolingKind::Max => "max",
            PoolingKind::Attention => "attention",
            PoolingKind::GatedAttention => "gated-attention",
            PoolingKind::MultiAttention => "multi-attention",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width `D'` of the projected frame features.
    pub hidden_dim: usize,
    /// Width `L` of the attention network.
    pub attention_dim: usize,
    /// Head count `M`; only multi-attention may use more than one.
    pub heads: usize,
    pub class_count: usize,
    pub pooling: PoolingKind,
    pub normalization: Normalization,
    pub classifier: ClassifierKind,
    pub experts: usize,
    pub context_gating: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, class_count: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 16,
            attention_dim: 8,
            heads: 1,
            class_count,
            pooling: PoolingKind::GatedAttention,
            normalization: Normalization::Softmax,
            classifier: ClassifierKind::Logistic,
            experts: 2,
            context_gating: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("heads", self.heads),
            ("class_count", self.class_count),
            ("experts", self.experts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.heads > 1 && self.pooling != PoolingKind::MultiAttention {
            return Err(Error::Config(format!(
                "{} pooling uses a single head, got heads = {}",
                self.pooling, self.heads
            )));
        }
        Ok(())
    }
}

/// All trainable parameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub pooling: PoolingKind,
    /// Frame projection `f(x) = relu(W x + b)`, `W` is `D' x D`.
    #[serde(with = "serde_arrays::mat2")]
    pub projection_w: Array2<f64>,
    #[serde(with = "serde_arrays::vec1")]
    pub projection_b: Array1<f64>,
    /// Present exactly for the attention pooling kinds.
    pub attention: Option<MultiAttention>,
    pub context_gate: Option<ContextGateParams>,
    pub classifier: Classifier,
}

impl ModelParams {
    /// Glorot-uniform weights drawn from a seeded stream; biases start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |shape: (usize, usize), fan_in: usize, fan_out: usize| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-r..=r))
        };
        let (d, h, l, n) = (
            config.input_dim,
            config.hidden_dim,
            config.attention_dim,
            config.class_count,
        );
        let projection_w = glorot((h, d), d, h);
        let attention = if config.pooling.uses_attention() {
            let gated = config.pooling != PoolingKind::Attention;
            let heads = (0..config.heads)
                .map(|_| {
                    let a = glorot((1, l), l, 1).into_shape_with_order(l).expect("1 x L");
                    let v = glorot((l, h), h, l);
                    let u = if gated {
                        glorot((l, h), h, l)
                    } else {
                        Array2::zeros((l, h))
                    };
                    AttentionHead { a, v, u }
                })
                .collect();
            Some(MultiAttention::new(heads, config.normalization, gated)?)
        } else {
            None
        };
        let context_gate = config.context_gating.then(|| ContextGateParams {
            w: glorot((h, h), h, h),
            b: Array1::zeros(h),
        });
        let classifier = match config.classifier {
            ClassifierKind::Logistic => Classifier::Logistic(LogisticParams {
                w: glorot((n, h), h, n),
                b: Array1::zeros(n),
            }),
            ClassifierKind::Moe => {
                let e = config.experts;
                let mut moe = MoEParams::zeros(n, e, h);
                let experts = glorot((n * e, h), h, e);
                let gates = glorot((n * (e + 1), h), h, e + 1);
                fill_weights(&mut moe.experts, &experts);
                fill_weights(&mut moe.gates, &gates);
                Classifier::Moe(moe)
            }
        };
        Ok(ModelParams {
            pooling: config.pooling,
            projection_w,
            projection_b: Array1::zeros(h),
            attention,
            context_gate,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.projection_w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection_w.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn num_heads(&self) -> usize {
        self.attention.as_ref().map_or(1, MultiAttention::num_heads)
    }

    /// Same structure with every parameter set to zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_b.len() != self.hidden_dim() {
            return Err(Error::shape("projection bias", self.hidden_dim(), self.projection_b.len()));
        }
        match (&self.attention, self.pooling.uses_attention()) {
            (Some(ma), true) => {
                ma.validate()?;
                if ma.heads[0].feature_dim() != self.hidden_dim() {
                    return Err(Error::shape("attention input", self.hidden_dim(), ma.heads[0].feature_dim()));
                }
                let gated = self.pooling != PoolingKind::Attention;
                if ma.gated != gated || (ma.num_heads() > 1 && self.pooling != PoolingKind::MultiAttention) {
                    return Err(Error::Config(format!(
                        "attention parameters do not match {} pooling",
                        self.pooling
                    )));
                }
            }
            (None, false) => {}
            _ => {
                return Err(Error::Config(format!(
                    "attention parameters present/absent inconsistently with {} pooling",
                    self.pooling
                )))
            }
        }
        Ok(())
    }
}

fn fill_weights(target: &mut Array3<f64>, rows: &Array2<f64>) {
    let (n, e, d1) = target.dim();
    for c in 0..n {
        for k in 0..e {
            for j in 0..d1 - 1 {
                target[[c, k, j]] = rows[[c * e + k, j]];
            }
        }
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("projection.w".into(), slice(self.projection_w.as_slice())),
            ("projection.b".into(), slice(self.projection_b.as_slice())),
        ];
        if let Some(ma) = &self.attention {
            for (m, head) in ma.heads.iter().enumerate() {
                out.push((format!("attention.{m}.a"), slice(head.a.as_slice())));
                out.push((format!("attention.{m}.v"), slice(head.v.as_slice())));
                out.push((format!("attention.{m}.u"), slice(head.u.as_slice())));
            }
        }
        if let Some(cg) = &self.context_gate {
            out.push(("context_gate.w".into(), slice(cg.w.as_slice())));
            out.push(("context_gate.b".into(), slice(cg.b.as_slice())));
        }
        match &self.classifier {
            Classifier::Logistic(p) => {
                out.push(("logistic.w".into(), slice(p.w.as_slice())));
                out.push(("logistic.b".into(), slice(p.b.as_slice())));
            }
            Classifier::Moe(p) => {
                out.push(("moe.experts".into(), slice(p.experts.as_slice())));
                out.push(("moe.gates".into(), slice(p.gates.as_slice())));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("projection.w".into(), slice_mut(self.projection_w.as_slice_mut())),
            ("projection.b".into(), slice_mut(self.projection_b.as_slice_mut())),
        ];
        if let Some(ma) = &mut self.attention {
            for (m, head) in ma.heads.iter_mut().enumerate() {
                out.push((format!("attention.{m}.a"), slice_mut(head.a.as_slice_mut())));
                out.push((format!("attention.{m}.v"), slice_mut(head.v.as_slice_mut())));
                out.push((format!("attention.{m}.u"), slice_mut(head.u.as_slice_mut())));
            }
        }
        if let Some(cg) = &mut self.context_gate {
            out.push(("context_gate.w".into(), slice_mut(cg.w.as_slice_mut())));
            out.push(("context_gate.b".into(), slice_mut(cg.b.as_slice_mut())));
        }
        match &mut self.classifier {
            Classifier::Logistic(p) => {
                out.push(("logistic.w".into(), slice_mut(p.w.as_slice_mut())));
                out.push(("logistic.b".into(), slice_mut(p.b.as_slice_mut())));
            }
            Classifier::Moe(p) => {
                out.push(("moe.experts".into(), slice_mut(p.experts.as_slice_mut())));
                out.push(("moe.gates".into(), slice_mut(p.gates.as_slice_mut())));
            }
        }
        out
    }
}

// Parameter arrays are always built in standard layout.
fn slice(s: Option<&[f64]>) -> &[f64] {
    s.expect("standard-layout parameter array")
}

fn slice_mut(s: Option<&mut [f64]>) -> &mut [f64] {
    s.expect("standard-layout parameter array")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Final scores `S(X)`, max-combined over heads.
    pub scores: ClassScores,
    /// `S^m(X)` for each pooled row.
    pub head_scores: Vec<ClassScores>,
    /// Attention weights per head; empty for mean and max pooling.
    pub attention: Vec<Array1<f64>>,
}

/// Everything the backward pass needs from the forward pass.
struct Trace {
    pre_activation: Array2<f64>,
    hidden: Array2<f64>,
    /// One row per pooled vector (one per head, or a single row).
    pooled: Array2<f64>,
    gated: Array2<f64>,
    out: ForwardOutput,
}

fn run_forward(model: &ModelParams, frames: ArrayView2<f64>) -> Result<Trace> {
    if frames.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    if frames.ncols() != model.input_dim() {
        return Err(Error::shape("model input", model.input_dim(), frames.ncols()));
    }
    let pre_activation = frames.dot(&model.projection_w.t()) + &model.projection_b;
    let hidden = pre_activation.mapv(|v| v.max(0.0));

    let (pooled, attention) = match model.pooling {
        PoolingKind::Mean => (row(mean_pool(hidden.view())?), Vec::new()),
        PoolingKind::Max => {
            let idx = max_pool_argmax(hidden.view())?;
            let v = Array1::from_shape_fn(hidden.ncols(), |j| hidden[[idx[j], j]]);
            (row(v), Vec::new())
        }
        _ => {
            let ma = model
                .attention
                .as_ref()
                .ok_or_else(|| Error::Config("attention pooling without attention parameters".into()))?;
            multi_attention_forward(hidden.view(), ma)?
        }
    };

    let mut gated = pooled.clone();
    if let Some(cg) = &model.context_gate {
        for (mut out, p) in gated.outer_iter_mut().zip(pooled.outer_iter()) {
            out.assign(&context_gate(p, cg)?);
        }
    }
    let head_scores = gated
        .outer_iter()
        .map(|z| model.classifier.classify(z))
        .collect::<Result<Vec<_>>>()?;
    let scores = combine_heads(&head_scores)?;
    Ok(Trace {
        pre_activation,
        hidden,
        pooled,
        gated,
        out: ForwardOutput {
            scores,
            head_scores,
            attention,
        },
    })
}

fn row(v: Array1<f64>) -> Array2<f64> {
    let n = v.len();
    v.into_shape_with_order((1, n)).expect("vector to row")
}

/// Projection (affine + ReLU), pooling, context gate, per-head classification, max-combine.
pub fn forward(model: &ModelParams, frames: ArrayView2<f64>) -> Result<ForwardOutput> {
    Ok(run_forward(model, frames)?.out)
}

/// Weighted cross entropy of one bag and its exact gradient w.r.t. every parameter.
pub fn loss_and_gradient(
    model: &ModelParams,
    frames: ArrayView2<f64>,
    targets: &[f64],
    class_weights: &[f64],
) -> Result<(f64, ModelParams)> {
    let trace = run_forward(model, frames)?;
    let scores = &trace.out.scores;
    let loss = weighted_cross_entropy(scores, targets, class_weights)?;
    let d_scores = weighted_cross_entropy_backward(scores, targets, class_weights)?;

    let mut grad = model.zeros_like();
    let winners = combine_heads_argmax(&trace.out.head_scores)?;
    let rows = trace.pooled.nrows();
    let mut d_pooled = Array2::zeros(trace.pooled.raw_dim());
    for r in 0..rows {
        let d_head = Array1::from_shape_fn(d_scores.len(), |c| if winners[c] == r { d_scores[c] } else { 0.0 });
        if d_head.iter().all(|&v| v == 0.0) {
            continue;
        }
        let (d_gated, d_clf) = model.classifier.backward(trace.gated.row(r), d_head.view())?;
        grad_classifier(&mut grad.classifier, &d_clf);
        let d_row = match (&model.context_gate, &mut grad.context_gate) {
            (Some(cg), Some(g_cg)) => {
                let (dp, d_cg) = context_gate_backward(trace.pooled.row(r), cg, d_gated.view())?;
                g_cg.w += &d_cg.w;
                g_cg.b += &d_cg.b;
                dp
            }
            _ => d_gated,
        };
        d_pooled.row_mut(r).assign(&d_row);
    }

    let d_hidden = match model.pooling {
        PoolingKind::Mean => mean_pool_backward(trace.hidden.nrows(), d_pooled.row(0)),
        PoolingKind::Max => crate::pooling::max_pool_backward(trace.hidden.view(), d_pooled.row(0))?,
        _ => {
            let ma = model.attention.as_ref().expect("checked in forward");
            let g = pooling_backward(trace.hidden.view(), ma, d_pooled.view())?;
            let g_ma = grad.attention.as_mut().expect("same structure as model");
            for (dst, src) in g_ma.heads.iter_mut().zip(g.d_heads) {
                dst.a += &src.a;
                dst.v += &src.v;
                dst.u += &src.u;
            }
            g.d_frames
        }
    };

    let mut d_pre = d_hidden;
    d_pre.zip_mut_with(&trace.pre_activation, |d, &z| {
        if z <= 0.0 {
            *d = 0.0;
        }
    });
    grad.projection_w += &d_pre.t().dot(&frames);
    grad.projection_b += &d_pre.sum_axis(ndarray::Axis(0));
    Ok((loss, grad))
}

fn grad_classifier(acc: &mut Classifier, g: &Classifier) {
    match (acc, g) {
        (Classifier::Logistic(a), Classifier::Logistic(g)) => {
            a.w += &g.w;
            a.b += &g.b;
        }
        (Classifier::Moe(a), Classifier::Moe(g)) => {
            a.experts += &g.experts;
            a.gates += &g.gates;
        }
        _ => unreachable!("gradient mirrors the model's classifier kind"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{concatenate, Axis};

    fn random_frames(seed: u64, k: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((k, d), || rng.random_range(-1.0..1.0))
    }

    fn tiny(pooling: PoolingKind, classifier: ClassifierKind) -> ModelConfig {
        ModelConfig {
            hidden_dim: 3,
            attention_dim: 2,
            heads: if pooling == PoolingKind::MultiAttention { 2 } else { 1 },
            pooling,
            classifier,
            ..ModelConfig::new(4, 3)
        }
    }

    #[test]
    fn single_frame_pools_identically() {
        let frames = random_frames(1, 1, 4);
        let base = ModelParams::init(&tiny(PoolingKind::GatedAttention, ClassifierKind::Moe), 5).unwrap();
        let mut reference = None;
        for kind in [
            PoolingKind::Mean,
            PoolingKind::Max,
            PoolingKind::Attention,
            PoolingKind::GatedAttention,
        ] {
            let mut m = ModelParams::init(&tiny(kind, ClassifierKind::Moe), 5).unwrap();
            m.projection_w = base.projection_w.clone();
            m.projection_b = base.projection_b.clone();
            m.context_gate = base.context_gate.clone();
            m.classifier = base.classifier.clone();
            let s = forward(&m, frames.view()).unwrap().scores;
            match &reference {
                None => reference = Some(s),
                Some(r) => assert_eq!(&s, r, "{kind}"),
            }
        }
    }

    #[test]
    fn uniform_attention_matches_mean_pool() {
        let frames = random_frames(2, 6, 4);
        let mut att = ModelParams::init(&tiny(PoolingKind::Attention, ClassifierKind::Logistic), 9).unwrap();
        for head in &mut att.attention.as_mut().unwrap().heads {
            head.a.fill(0.0);
        }
        let mut mean = att.clone();
        mean.pooling = PoolingKind::Mean;
        mean.attention = None;
        let a = forward(&att, frames.view()).unwrap();
        let b = forward(&mean, frames.view()).unwrap();
        for (x, y) in a.scores.0.iter().zip(b.scores.0.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(a.attention[0].iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn one_head_multi_attention_is_gated_attention() {
        let frames = random_frames(3, 9, 4);
        let cfg = ModelConfig { heads: 1, ..tiny(PoolingKind::MultiAttention, ClassifierKind::Moe) };
        let multi = ModelParams::init(&cfg, 4).unwrap();
        let mut single = multi.clone();
        single.pooling = PoolingKind::GatedAttention;
        assert_eq!(
            forward(&multi, frames.view()).unwrap(),
            forward(&single, frames.view()).unwrap()
        );
    }

    #[test]
    fn duplicated_frames_keep_softmax_scores() {
        let frames = random_frames(4, 7, 4);
        let doubled = concatenate(Axis(0), &[frames.view(), frames.view()]).unwrap();
        for kind in [PoolingKind::Attention, PoolingKind::GatedAttention, PoolingKind::MultiAttention, PoolingKind::Mean] {
            let m = ModelParams::init(&tiny(kind, ClassifierKind::Logistic), 6).unwrap();
            let a = forward(&m, frames.view()).unwrap().scores;
            let b = forward(&m, doubled.view()).unwrap().scores;
            for (x, y) in a.0.iter().zip(b.0.iter()) {
                assert!((x - y).abs() < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = ModelParams::init(&tiny(PoolingKind::Mean, ClassifierKind::Logistic), 1).unwrap();
        assert!(forward(&m, random_frames(1, 3, 5).view()).is_err());
        assert!(matches!(forward(&m, Array2::zeros((0, 4)).view()), Err(Error::EmptyBag)));
        let bad = ModelConfig { heads: 3, ..tiny(PoolingKind::GatedAttention, ClassifierKind::Logistic) };
        assert!(ModelParams::init(&bad, 0).is_err());
    }

    #[test]
    fn parameter_groups() {
        let m = ModelParams::init(&tiny(PoolingKind::MultiAttention, ClassifierKind::Moe), 1).unwrap();
        let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "projection.w", "projection.b", "attention.0.a", "attention.0.v", "attention.0.u",
                "attention.1.a", "attention.1.v", "attention.1.u", "context_gate.w", "context_gate.b",
                "moe.experts", "moe.gates"
            ]
        );
        // D'xD + D' + M(L + 2 L D') + D'^2 + D' + n E (D'+1) + n (E+1)(D'+1)
        assert_eq!(m.num_params(), 12 + 3 + 2 * (2 + 6 + 6) + 9 + 3 + 24 + 36);
        let z = m.zeros_like();
        assert!(z.to_flat().iter().all(|&v| v == 0.0));
        m.validate().unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny(PoolingKind::MultiAttention, ClassifierKind::Moe);
        assert_eq!(ModelParams::init(&cfg, 3).unwrap(), ModelParams::init(&cfg, 3).unwrap());
        assert_ne!(ModelParams::init(&cfg, 3).unwrap(), ModelParams::init(&cfg, 4).unwrap());
        let m = ModelParams::init(&cfg, 3).unwrap();
        let r = (6.0f64 / 7.0).sqrt();
        assert!(m.projection_w.iter().all(|v| v.abs() <= r));
        assert!(m.projection_b.iter().all(|&v| v == 0.0));
    }
}
