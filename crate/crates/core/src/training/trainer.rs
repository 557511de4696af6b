use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, loss_and_gradient, AdamConfig, AdamState, ModelParams, ParamSet};
use crate::datamodel::{sample_frames, Bag, SamplingScheme, Segment, Vocabulary};
use crate::{Error, Result};

const PHASE1_STREAM: u64 = 1;
const PHASE2_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    /// Frame sampling for phase 1; phase 2 always uses all five segment frames.
    pub sampling: SamplingScheme,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            phase1_steps: 500,
            phase2_steps: 100,
            sampling: SamplingScheme::RandomWithReplacement(30),
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let a = &self.adam;
        let ok = a.lr.is_finite()
            && a.lr >= 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {a:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub model: ModelParams,
    pub optimizer: AdamState,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Phase 1: bag-level labels, frames sampled per `config.sampling`.
pub fn train_phase1(
    model: ModelParams,
    bags: &[Bag],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<PhaseOutcome> {
    if bags.is_empty() {
        return Err(Error::Empty("training bag set"));
    }
    let targets = bags
        .iter()
        .map(|b| vocab.multi_hot(&b.labels))
        .collect::<Result<Vec<_>>>()?;
    run_phase(model, vocab, config, config.phase1_steps, PHASE1_STREAM, bags.len(), |i, seed| {
        let bag = &bags[i];
        let idx = sample_frames(bag, config.sampling, seed);
        (bag.frames.select(Axis(0), &idx), &targets[i])
    })
}

/// Phase 2: fine-tuning on labeled 5-frame segments, every frame used.
pub fn finetune_phase2(
    model: ModelParams,
    segments: &[Segment],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<PhaseOutcome> {
    if segments.is_empty() {
        return Err(Error::Empty("labeled segment set"));
    }
    let targets = segments
        .iter()
        .map(|s| vocab.multi_hot(&s.labels))
        .collect::<Result<Vec<_>>>()?;
    run_phase(model, vocab, config, config.phase2_steps, PHASE2_STREAM, segments.len(), |i, _| {
        (segments[i].frames.clone(), &targets[i])
    })
}

fn run_phase<'t, F>(
    mut model: ModelParams,
    vocab: &Vocabulary,
    config: &TrainConfig,
    steps: usize,
    stream: u64,
    corpus_len: usize,
    item: F,
) -> Result<PhaseOutcome>
where
    F: Fn(usize, u64) -> (Array2<f64>, &'t Vec<f64>) + Sync,
{
    config.validate()?;
    model.validate()?;
    if vocab.class_count() != model.class_count() {
        return Err(Error::shape("vocabulary classes", model.class_count(), vocab.class_count()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let mut optimizer = AdamState::new(&model, config.adam);
    let mut losses = Vec::with_capacity(steps);
    let weights = vocab.class_weights();
    let scale = 1.0 / config.batch_size as f64;

    for step in 0..steps {
        // Draws happen sequentially so the batch does not depend on thread count.
        let batch: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.random_range(0..corpus_len), rng.next_u64()))
            .collect();
        let results = batch
            .par_iter()
            .map(|&(i, seed)| {
                let (frames, targets) = item(i, seed);
                loss_and_gradient(&model, frames_view(&frames), targets, weights)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = model.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grad.add_scaled(scale, g);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        if let Some((tensor, _)) = grad.tensors().into_iter().find(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient { step, tensor });
        }
        losses.push(loss);
        adam_step(&mut model, &grad, &mut optimizer)?;
    }
    Ok(PhaseOutcome {
        model,
        optimizer,
        losses,
    })
}

fn frames_view(a: &Array2<f64>) -> ArrayView2<'_, f64> {
    a.view()
}
