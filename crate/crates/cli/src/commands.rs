use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use milattn::datamodel::{
    generate_synthetic_corpus, load_bags, load_segments, load_vocabulary, save_bags, save_plants,
    save_segments, save_vocabulary, Bag, SyntheticConfig, Vocabulary,
};
use milattn::evaluation::{
    ensemble_blend, map_at_k, predict_segments, read_submission, save_metric_report,
    write_submission, GroundTruth, MetricConfig,
};
use milattn::fsutil::write_atomic;
use milattn::training::{
    finetune_phase2, forward, gradient_check, load_checkpoint, save_checkpoint, train_phase1,
    AdamConfig, Checkpoint, ModelConfig, ModelParams, TrainConfig,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{
    required, EnsembleArgs, EvalArgs, FinetuneArgs, GenDataArgs, GradcheckArgs, InspectArgs,
    ModelArgs, PredictArgs, TrainArgs,
};
use crate::failure::{Failure, EXIT_CHECK};

/// What a command touched, for its manifest.
#[derive(Debug, Default)]
pub struct Run {
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Where the manifest goes; `None` prints it to stderr.
    pub manifest: Option<PathBuf>,
    /// Nonzero when the command ran but its check failed.
    pub exit: u8,
}

pub const TRAIN_BAGS: &str = "train_bags.jsonl";
pub const LABELED_SEGMENTS: &str = "labeled_segments.jsonl";
pub const TEST_BAGS: &str = "test_bags.jsonl";
pub const TEST_SEGMENTS: &str = "test_segments.jsonl";
pub const VOCABULARY: &str = "vocabulary.json";
pub const PLANTS: &str = "plants.jsonl";

/// `<path>.manifest.json` next to the primary output.
fn manifest_for(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    match path {
        Some(p) => write_atomic(p, json.as_bytes())?,
        None => print!("{json}"),
    }
    Ok(())
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

fn default_trace(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    out.with_file_name(name)
}

pub fn gen_data(a: &GenDataArgs) -> Result<Run, Failure> {
    let out = required(&a.out, "out")?;
    let classes = *required(&a.classes, "classes")?;
    let config = SyntheticConfig {
        class_count: classes,
        feature_dim: *required(&a.dim, "dim")?,
        bags_per_split: *required(&a.bags, "bags")?,
        labeled_bags: *required(&a.labeled_bags, "labeled-bags")?,
        frames_per_bag: (*required(&a.min_frames, "min-frames")?, *required(&a.max_frames, "max-frames")?),
        labels_per_bag: (*required(&a.min_labels, "min-labels")?, *required(&a.max_labels, "max-labels")?),
        prototype_strength: *required(&a.strength, "strength")?,
        planted_segment_length: *required(&a.window, "window")?,
        segments_per_bag: *required(&a.segments_per_bag, "segments-per-bag")?,
        localizable_count: a.localizable.unwrap_or(classes),
        rng_seed: *required(&a.seed, "seed")?,
    };
    let corpus = generate_synthetic_corpus(&config)?;
    let files = [TRAIN_BAGS, LABELED_SEGMENTS, TEST_BAGS, TEST_SEGMENTS, VOCABULARY, PLANTS];
    let path = |name: &str| out.join(name);
    save_bags(&path(TRAIN_BAGS), &corpus.train_bags)?;
    save_segments(&path(LABELED_SEGMENTS), &corpus.labeled_segments)?;
    save_bags(&path(TEST_BAGS), &corpus.test_bags)?;
    save_segments(&path(TEST_SEGMENTS), &corpus.test_segments)?;
    save_vocabulary(&path(VOCABULARY), &corpus.vocabulary)?;
    save_plants(&path(PLANTS), &corpus.plants)?;
    eprintln!(
        "wrote {} train bags, {} labeled segments, {} test bags, {} test segments to {}",
        corpus.train_bags.len(),
        corpus.labeled_segments.len(),
        corpus.test_bags.len(),
        corpus.test_segments.len(),
        out.display()
    );
    Ok(Run {
        seed: Some(config.rng_seed),
        outputs: files.iter().map(|f| path(f)).collect(),
        manifest: Some(path("manifest.json")),
        ..Run::default()
    })
}

fn model_config(m: &ModelArgs, input_dim: usize, class_count: usize) -> Result<ModelConfig, Failure> {
    Ok(ModelConfig {
        input_dim,
        class_count,
        hidden_dim: *required(&m.hidden_dim, "hidden-dim")?,
        attention_dim: *required(&m.attention_dim, "attention-dim")?,
        heads: *required(&m.heads, "heads")?,
        pooling: *required(&m.pooling, "pooling")?,
        normalization: *required(&m.normalization, "norm")?,
        classifier: *required(&m.classifier, "classifier")?,
        experts: *required(&m.experts, "experts")?,
        context_gating: *required(&m.context_gate, "context-gate")?,
    })
}

fn adam(lr: f64) -> AdamConfig {
    AdamConfig { lr, ..AdamConfig::default() }
}

pub fn train(a: &TrainArgs) -> Result<Run, Failure> {
    let train_path = required(&a.train, "train")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let out = required(&a.out, "out")?;
    let trace = a.loss_trace.clone().unwrap_or_else(|| default_trace(out));
    let bags = load_bags(train_path)?;
    let vocab = load_vocabulary(vocab_path)?;
    let first = bags.first().ok_or_else(|| Failure::usage("training bag file is empty"))?;
    let seed = *required(&a.seed, "seed")?;
    let model = ModelParams::init(&model_config(&a.model, first.feature_dim(), vocab.class_count())?, seed)?;
    let config = TrainConfig {
        batch_size: *required(&a.batch_size, "batch-size")?,
        phase1_steps: *required(&a.steps, "steps")?,
        sampling: *required(&a.sampling, "sampling")?,
        adam: adam(*required(&a.lr, "lr")?),
        seed,
        ..TrainConfig::default()
    };
    let outcome = train_phase1(model, &bags, &vocab, &config)?;
    save_checkpoint(out, &Checkpoint::new(outcome.model, Some(outcome.optimizer)))?;
    write_atomic(&trace, loss_csv(&outcome.losses).as_bytes())?;
    report_losses("phase 1", &outcome.losses);
    Ok(Run {
        seed: Some(seed),
        inputs: vec![train_path.clone(), vocab_path.clone()],
        outputs: vec![out.clone(), trace],
        manifest: Some(manifest_for(out)),
        ..Run::default()
    })
}

fn report_losses(phase: &str, losses: &[f64]) {
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("{phase}: {} steps, loss {first:.4} -> {last:.4}", losses.len());
    }
}

pub fn finetune(a: &FinetuneArgs) -> Result<Run, Failure> {
    let ck_path = required(&a.checkpoint, "checkpoint")?;
    let seg_path = required(&a.segments, "segments")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let out = required(&a.out, "out")?;
    let trace = a.loss_trace.clone().unwrap_or_else(|| default_trace(out));
    let checkpoint = load_checkpoint(ck_path)?;
    let segments = load_segments(seg_path)?;
    let vocab = load_vocabulary(vocab_path)?;
    let seed = *required(&a.seed, "seed")?;
    let config = TrainConfig {
        batch_size: *required(&a.batch_size, "batch-size")?,
        phase2_steps: *required(&a.steps, "steps")?,
        adam: adam(*required(&a.lr, "lr")?),
        seed,
        ..TrainConfig::default()
    };
    let outcome = finetune_phase2(checkpoint.model, &segments, &vocab, &config)?;
    save_checkpoint(out, &Checkpoint::new(outcome.model, Some(outcome.optimizer)))?;
    write_atomic(&trace, loss_csv(&outcome.losses).as_bytes())?;
    report_losses("phase 2", &outcome.losses);
    Ok(Run {
        seed: Some(seed),
        inputs: vec![ck_path.clone(), seg_path.clone(), vocab_path.clone()],
        outputs: vec![out.clone(), trace],
        manifest: Some(manifest_for(out)),
        ..Run::default()
    })
}

pub fn predict(a: &PredictArgs) -> Result<Run, Failure> {
    let ck_path = required(&a.checkpoint, "checkpoint")?;
    let seg_path = required(&a.segments, "segments")?;
    let vocab_path = required(&a.vocab, "vocab")?;
    let out = required(&a.out, "out")?;
    let checkpoint = load_checkpoint(ck_path)?;
    let segments = load_segments(seg_path)?;
    let vocab = load_vocabulary(vocab_path)?;
    let pred = predict_segments(&checkpoint.model, &segments, &vocab)?;
    write_submission(&pred, out)?;
    eprintln!("wrote {} predictions for {} segments", pred.len(), segments.len());
    Ok(Run {
        inputs: vec![ck_path.clone(), seg_path.clone(), vocab_path.clone()],
        outputs: vec![out.clone()],
        manifest: Some(manifest_for(out)),
        ..Run::default()
    })
}

pub fn eval(a: &EvalArgs) -> Result<Run, Failure> {
    let sub_path = required(&a.submission, "submission")?;
    let seg_path = required(&a.segments, "segments")?;
    let k_s = *required(&a.k, "k")?;
    let pred = read_submission(sub_path)?;
    let gt = GroundTruth::from_segments(&load_segments(seg_path)?);
    let mut inputs = vec![sub_path.clone(), seg_path.clone()];
    let cfg = match &a.vocab {
        Some(v) => {
            inputs.push(v.clone());
            MetricConfig::for_vocabulary(&load_vocabulary(v)?, k_s)
        }
        None => MetricConfig { k_s, classes: None },
    };
    let report = map_at_k(&pred, &gt, &cfg)?;
    eprintln!("MAP@{k_s} = {:.6} over {} classes", report.map, report.per_class.len());
    match &a.out {
        Some(out) => save_metric_report(out, &report)?,
        None => write_json(None, &report)?,
    }
    Ok(Run {
        inputs,
        outputs: a.out.iter().cloned().collect(),
        manifest: a.out.as_deref().map(manifest_for),
        ..Run::default()
    })
}

pub fn ensemble(a: &EnsembleArgs) -> Result<Run, Failure> {
    let inputs = required(&a.inputs, "inputs")?;
    let weights = required(&a.weights, "weights")?;
    let out = required(&a.out, "out")?;
    if inputs.len() != weights.len() {
        return Err(Failure::usage(format!(
            "{} inputs but {} weights",
            inputs.len(),
            weights.len()
        )));
    }
    let sets = inputs
        .iter()
        .map(|p| read_submission(p))
        .collect::<Result<Vec<_>, _>>()?;
    // bad weights or mismatched keys are caller errors here, not numeric failures
    let blended = ensemble_blend(&sets, weights).map_err(|e| Failure::usage(e.to_string()))?;
    write_submission(&blended, out)?;
    Ok(Run {
        inputs: inputs.clone(),
        outputs: vec![out.clone()],
        manifest: Some(manifest_for(out)),
        ..Run::default()
    })
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Run, Failure> {
    let seed = *required(&a.seed, "seed")?;
    let tolerance = *required(&a.tolerance, "tolerance")?;
    let dim = *required(&a.dim, "dim")?;
    let classes = *required(&a.classes, "classes")?;
    let frames = *required(&a.frames, "frames")?;
    if classes == 0 || frames == 0 {
        return Err(Failure::usage("--classes and --frames must be >= 1"));
    }
    let model = ModelParams::init(&model_config(&a.model, dim, classes)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let x = Array2::from_shape_simple_fn((frames, dim), || rng.random_range(-1.5..1.5));
    let label = rng.random_range(0..classes);
    let bag = Bag::new("gradcheck", x, vec![label])?;
    let localizable: Vec<usize> = (0..classes.div_ceil(2)).collect();
    let vocab = Vocabulary::with_weight_factor(classes, &localizable, 3.0)?;
    let report = gradient_check(&model, &bag, &vocab, tolerance)?;
    write_json(a.out.as_deref(), &report)?;
    eprintln!(
        "max relative error {:e} at {} ({})",
        report.max_rel_error,
        report.worst_parameter,
        if report.passed { "pass" } else { "FAIL" }
    );
    Ok(Run {
        seed: Some(seed),
        outputs: a.out.iter().cloned().collect(),
        manifest: a.out.as_deref().map(manifest_for),
        exit: if report.passed { 0 } else { EXIT_CHECK },
        ..Run::default()
    })
}

#[derive(Serialize)]
struct HeadWeights {
    head: usize,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct AttentionDump {
    bag_id: String,
    pooling: String,
    frames: usize,
    heads: Vec<HeadWeights>,
}

pub fn inspect_attention(a: &InspectArgs) -> Result<Run, Failure> {
    let ck_path = required(&a.checkpoint, "checkpoint")?;
    let bags_path = required(&a.bags, "bags")?;
    let bag_id = required(&a.bag_id, "bag-id")?;
    let checkpoint = load_checkpoint(ck_path)?;
    if checkpoint.model.attention.is_none() {
        return Err(Failure::usage(format!(
            "checkpoint uses {} pooling, which has no attention weights",
            checkpoint.model.pooling
        )));
    }
    let bags = load_bags(bags_path)?;
    let bag = bags
        .iter()
        .find(|b| &b.id == bag_id)
        .ok_or_else(|| Failure::usage(format!("bag `{bag_id}` not found in {}", bags_path.display())))?;
    let out = forward(&checkpoint.model, bag.frames.view())?;
    let dump = AttentionDump {
        bag_id: bag.id.clone(),
        pooling: checkpoint.model.pooling.to_string(),
        frames: bag.num_frames(),
        heads: out
            .attention
            .into_iter()
            .enumerate()
            .map(|(head, w)| HeadWeights { head, weights: w.to_vec() })
            .collect(),
    };
    write_json(a.out.as_deref(), &dump)?;
    Ok(Run {
        inputs: vec![ck_path.clone(), bags_path.clone()],
        outputs: a.out.iter().cloned().collect(),
        manifest: a.out.as_deref().map(manifest_for),
        ..Run::default()
    })
}
