//! Command-line flags. Every option is also accepted, under its snake_case
//! name, from the JSON file given by `--config`. Resolution order is
//! flag, then config file, then built-in default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use milattn::classifier::ClassifierKind;
use milattn::datamodel::SamplingScheme;
use milattn::pooling::Normalization;
use milattn::training::PoolingKind;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "milattn", version, about = "Attention-based multiple-instance learning for temporal localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic planted-segment corpus.
    GenData(GenDataArgs),
    /// Phase 1: train on bag-level labels.
    Train(TrainArgs),
    /// Phase 2: fine-tune a checkpoint on labeled 5-frame segments.
    Finetune(FinetuneArgs),
    /// Score segments with a checkpoint and write a submission CSV.
    Predict(PredictArgs),
    /// Compute MAP@K of a submission against labeled segments.
    Eval(EvalArgs),
    /// Blend submission files with simplex weights.
    Ensemble(EnsembleArgs),
    /// Compare analytic gradients with finite differences on a random tiny model.
    Gradcheck(GradcheckArgs),
    /// Dump per-head attention weights over one bag's frames.
    InspectAttention(InspectArgs),
}

/// Implemented by each subcommand's option struct.
pub trait Layered: Sized + Serialize + DeserializeOwned {
    fn config_path(&self) -> Option<&Path>;
    /// Field-wise `self.or(lower)`.
    fn over(self, lower: Self) -> Self;
    fn defaults() -> Self;

    /// Flags over config file over defaults.
    fn resolve(self) -> Result<Self, Failure> {
        let file = match self.config_path() {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
                let bad = |e: String| Failure::usage(format!("invalid config {}: {e}", path.display()));
                let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
                let known = serde_json::to_value(Self::defaults()).expect("options serialize");
                let (Some(given), Some(known)) = (value.as_object(), known.as_object()) else {
                    return Err(bad("expected a JSON object".into()));
                };
                if let Some(key) = given.keys().find(|k| !known.contains_key(*k)) {
                    return Err(bad(format!("unknown option `{key}`")));
                }
                serde_json::from_value::<Self>(value).map_err(|e| bad(e.to_string()))?
            }
            None => serde_json::from_str("{}").expect("all fields optional"),
        };
        Ok(self.over(file).over(Self::defaults()))
    }
}

macro_rules! layered {
    ($name:ident { $($field:ident),* $(,)? } defaults { $($dfield:ident: $dval:expr),* $(,)? }) => {
        impl Layered for $name {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }

            fn over(self, lower: Self) -> Self {
                $name {
                    config: self.config.or(lower.config),
                    $($field: self.$field.or(lower.$field),)*
                }
            }

            fn defaults() -> Self {
                $name {
                    $($dfield: Some($dval),)*
                    ..serde_json::from_str("{}").expect("all fields optional")
                }
            }
        }
    };
}

/// Unwraps a resolved option, reporting the missing flag as a usage error.
pub fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::usage(format!("missing required option --{flag} (flag or config file)")))
}

/// Options shared by `train` and `gradcheck` that define the architecture.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub pooling: Option<PoolingKind>,
    /// Attention heads (multi-attention only).
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "norm")]
    #[serde(rename = "norm")]
    pub normalization: Option<Normalization>,
    #[arg(long)]
    pub classifier: Option<ClassifierKind>,
    /// Mixture-of-experts size.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Width of the projected frame features.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Width of the attention network.
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long)]
    pub context_gate: Option<bool>,
}

impl ModelArgs {
    fn over(self, lower: Self) -> Self {
        ModelArgs {
            pooling: self.pooling.or(lower.pooling),
            heads: self.heads.or(lower.heads),
            normalization: self.normalization.or(lower.normalization),
            classifier: self.classifier.or(lower.classifier),
            experts: self.experts.or(lower.experts),
            hidden_dim: self.hidden_dim.or(lower.hidden_dim),
            attention_dim: self.attention_dim.or(lower.attention_dim),
            context_gate: self.context_gate.or(lower.context_gate),
        }
    }

    fn defaults(hidden_dim: usize, attention_dim: usize) -> Self {
        ModelArgs {
            pooling: Some(PoolingKind::GatedAttention),
            heads: Some(1),
            normalization: Some(Normalization::Softmax),
            classifier: Some(ClassifierKind::Logistic),
            experts: Some(2),
            hidden_dim: Some(hidden_dim),
            attention_dim: Some(attention_dim),
            context_gate: Some(true),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Feature dimension D.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Videos in the training and in the test split.
    #[arg(long)]
    pub bags: Option<usize>,
    /// Videos cut into labeled fine-tuning segments.
    #[arg(long)]
    pub labeled_bags: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub min_labels: Option<usize>,
    #[arg(long)]
    pub max_labels: Option<usize>,
    /// Prototype norm relative to unit noise.
    #[arg(long)]
    pub strength: Option<f64>,
    /// Planted window length in frames.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub segments_per_bag: Option<usize>,
    /// Number of localizable classes (the first N ids); defaults to all.
    #[arg(long)]
    pub localizable: Option<usize>,
}

layered!(GenDataArgs {
    out, seed, classes, dim, bags, labeled_bags, min_frames, max_frames, min_labels,
    max_labels, strength, window, segments_per_bag, localizable,
} defaults {
    seed: 7, classes: 10, dim: 16, bags: 200, labeled_bags: 100, min_frames: 60,
    max_frames: 120, min_labels: 1, max_labels: 3, strength: 5.0, window: 5,
    segments_per_bag: 5,
});

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training bags (line-delimited JSON).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss-trace CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sampling: Option<SamplingScheme>,
    /// Seeds both initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

impl Layered for TrainArgs {
    fn config_path(&self) -> Option<&Path> {
        self.config.as_deref()
    }

    fn over(self, lower: Self) -> Self {
        TrainArgs {
            config: self.config.or(lower.config),
            train: self.train.or(lower.train),
            vocab: self.vocab.or(lower.vocab),
            out: self.out.or(lower.out),
            loss_trace: self.loss_trace.or(lower.loss_trace),
            steps: self.steps.or(lower.steps),
            batch_size: self.batch_size.or(lower.batch_size),
            lr: self.lr.or(lower.lr),
            sampling: self.sampling.or(lower.sampling),
            seed: self.seed.or(lower.seed),
            model: self.model.over(lower.model),
        }
    }

    fn defaults() -> Self {
        TrainArgs {
            config: None,
            train: None,
            vocab: None,
            out: None,
            loss_trace: None,
            steps: Some(500),
            batch_size: Some(32),
            lr: Some(1e-3),
            sampling: Some(SamplingScheme::RandomWithReplacement(30)),
            seed: Some(1),
            model: ModelArgs::defaults(16, 8),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Phase-1 checkpoint to start from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled segments (line-delimited JSON).
    #[arg(long)]
    pub segments: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

layered!(FinetuneArgs {
    checkpoint, segments, vocab, out, loss_trace, steps, batch_size, lr, seed,
} defaults {
    steps: 100, batch_size: 32, lr: 1e-3, seed: 1,
});

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Segments to score (line-delimited JSON).
    #[arg(long)]
    pub segments: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Submission CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(PredictArgs { checkpoint, segments, vocab, out } defaults {});

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub submission: Option<PathBuf>,
    /// Segments whose labels are the ground truth.
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Restricts averaging to the vocabulary's localizable classes.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Rank cutoff K_s.
    #[arg(long)]
    pub k: Option<usize>,
    /// Metric JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(EvalArgs { submission, segments, vocab, k, out } defaults {
    k: milattn::evaluation::DEFAULT_K_S,
});

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EnsembleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Submission files, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub inputs: Option<Vec<PathBuf>>,
    /// One weight per input; must sum to 1.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(EnsembleArgs { inputs, weights, out } defaults {});

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames in the random bag.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Input feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

impl Layered for GradcheckArgs {
    fn config_path(&self) -> Option<&Path> {
        self.config.as_deref()
    }

    fn over(self, lower: Self) -> Self {
        GradcheckArgs {
            config: self.config.or(lower.config),
            out: self.out.or(lower.out),
            tolerance: self.tolerance.or(lower.tolerance),
            seed: self.seed.or(lower.seed),
            frames: self.frames.or(lower.frames),
            dim: self.dim.or(lower.dim),
            classes: self.classes.or(lower.classes),
            model: self.model.over(lower.model),
        }
    }

    fn defaults() -> Self {
        GradcheckArgs {
            config: None,
            out: None,
            tolerance: Some(1e-4),
            seed: Some(1),
            frames: Some(5),
            dim: Some(4),
            classes: Some(3),
            model: ModelArgs {
                pooling: Some(PoolingKind::MultiAttention),
                heads: Some(2),
                classifier: Some(ClassifierKind::Moe),
                ..ModelArgs::defaults(3, 2)
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InspectArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bags file (line-delimited JSON) containing the bag.
    #[arg(long)]
    pub bags: Option<PathBuf>,
    #[arg(long)]
    pub bag_id: Option<String>,
    /// Weights JSON; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(InspectArgs { checkpoint, bags, bag_id, out } defaults {});
