use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn milattn(args: &[&str]) -> Output {
    milattn_env(args, &[])
}

fn milattn_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_milattn"));
    cmd.args(args).env_remove("MILATTN_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = milattn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

struct Data {
    dir: PathBuf,
}

impl Data {
    fn file(&self, name: &str) -> String {
        s(&self.dir.join(name))
    }
}

fn small_data(root: &Path, extra: &[&str]) -> Data {
    let dir = root.join("data");
    let mut args = vec!["gen-data", "--out", dir.to_str().unwrap(), "--classes", "4", "--dim", "6"];
    if !extra.contains(&"--bags") {
        args.extend(["--bags", "40"]);
    }
    args.extend_from_slice(extra);
    ok(&args);
    Data { dir }
}

fn train(data: &Data, out: &Path, extra: &[&str]) {
    let (bags, vocab, out) = (data.file("train_bags.jsonl"), data.file("vocabulary.json"), s(out));
    let mut args = vec!["train", "--train", &bags, "--vocab", &vocab, "--out", &out];
    args.extend_from_slice(extra);
    ok(&args);
}

fn predict(data: &Data, checkpoint: &Path, out: &Path) {
    ok(&[
        "predict",
        "--checkpoint",
        &s(checkpoint),
        "--segments",
        &data.file("test_segments.jsonl"),
        "--vocab",
        &data.file("vocabulary.json"),
        "--out",
        &s(out),
    ]);
}

#[test]
fn gen_data_is_reproducible_and_honours_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = small_data(a.path(), &["--segments-per-bag", "3", "--labeled-bags", "10"]);
    let db = small_data(b.path(), &["--segments-per-bag", "3", "--labeled-bags", "10"]);
    for name in ["train_bags.jsonl", "labeled_segments.jsonl", "test_bags.jsonl", "test_segments.jsonl", "vocabulary.json", "plants.jsonl"] {
        assert_eq!(fs::read(da.dir.join(name)).unwrap(), fs::read(db.dir.join(name)).unwrap(), "{name}");
    }
    let lines = |name: &str| fs::read_to_string(da.dir.join(name)).unwrap().lines().count();
    assert_eq!(lines("train_bags.jsonl"), 40);
    assert_eq!(lines("test_bags.jsonl"), 40);
    // uniform segments plus one jittered segment per planted window, deduplicated
    let windows: usize = fs::read_to_string(da.dir.join("plants.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|p| p["id"].as_str().unwrap().starts_with("labeled"))
        .map(|p| p["windows"].as_array().unwrap().len())
        .sum();
    assert!((30..=30 + windows).contains(&lines("labeled_segments.jsonl")));
    assert_eq!(lines("test_segments.jsonl"), 120);
    let manifest = read_json(&da.dir.join("manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["exit_code"], 0);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(code(&milattn(&["gen-data"])), 2);
    assert_eq!(code(&milattn(&["predict", "--out", "x.csv"])), 2);
    assert_eq!(code(&milattn(&["no-such-command"])), 2);
}

#[test]
fn loss_trace_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let ck = dir.path().join("m.json");
    train(&data, &ck, &["--steps", "17", "--batch-size", "4"]);
    let trace = fs::read_to_string(dir.path().join("m.json.loss.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 17);
    for (i, row) in rows.iter().enumerate() {
        let (step, loss) = row.split_once(',').unwrap();
        assert_eq!(step.parse::<usize>().unwrap(), i);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }
    let manifest = read_json(&dir.path().join("m.json.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["steps"], 17);
}

#[test]
fn single_head_multi_attention_scores_match_gated_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let (gated, multi) = (dir.path().join("g.json"), dir.path().join("m.json"));
    train(&data, &gated, &["--steps", "20", "--pooling", "gated-attention"]);
    train(&data, &multi, &["--steps", "20", "--pooling", "multi-attention", "--heads", "1"]);
    let (sg, sm) = (dir.path().join("g.csv"), dir.path().join("m.csv"));
    predict(&data, &gated, &sg);
    predict(&data, &multi, &sm);
    assert_eq!(fs::read(sg).unwrap(), fs::read(sm).unwrap());
}

#[test]
fn heads_above_one_need_multi_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = milattn(&[
        "train",
        "--train",
        &data.file("train_bags.jsonl"),
        "--vocab",
        &data.file("vocabulary.json"),
        "--out",
        &s(&dir.path().join("m.json")),
        "--heads",
        "3",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ground_truth_submission_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let mut csv = String::from("class_id,segment_id,score\n");
    for line in fs::read_to_string(data.dir.join("test_segments.jsonl")).unwrap().lines() {
        let seg: Value = serde_json::from_str(line).unwrap();
        for c in seg["labels"].as_array().unwrap() {
            csv.push_str(&format!("{c},{}:{},1\n", seg["video_id"].as_str().unwrap(), seg["start"]));
        }
    }
    let sub = dir.path().join("truth.csv");
    fs::write(&sub, csv).unwrap();
    let report = dir.path().join("metrics.json");
    ok(&[
        "eval",
        "--submission",
        &s(&sub),
        "--segments",
        &data.file("test_segments.jsonl"),
        "--out",
        &s(&report),
    ]);
    let metrics = read_json(&report);
    assert_eq!(metrics["map"], 1.0);
    assert!(!metrics["per_class"].as_array().unwrap().is_empty());
}

#[test]
fn ensemble_of_one_reproduces_its_input_and_rejects_bad_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let ck = dir.path().join("m.json");
    train(&data, &ck, &["--steps", "10"]);
    let sub = dir.path().join("a.csv");
    predict(&data, &ck, &sub);
    let blended = dir.path().join("e.csv");
    ok(&["ensemble", "--inputs", &s(&sub), "--weights", "1", "--out", &s(&blended)]);
    assert_eq!(fs::read(&sub).unwrap(), fs::read(&blended).unwrap());

    let inputs = format!("{},{}", s(&sub), s(&sub));
    let bad = milattn(&["ensemble", "--inputs", &inputs, "--weights", "0.6,0.5", "--out", &s(&blended)]);
    assert_eq!(code(&bad), 2);
    let ok_pair = milattn(&["ensemble", "--inputs", &inputs, "--weights", "0.25,0.75", "--out", &s(&dir.path().join("p.csv"))]);
    assert_eq!(code(&ok_pair), 0);
    assert_eq!(fs::read(&sub).unwrap(), fs::read(dir.path().join("p.csv")).unwrap());
}

#[test]
fn gradcheck_passes_by_default_and_fails_an_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.json");
    ok(&["gradcheck", "--out", &s(&report)]);
    let r = read_json(&report);
    assert_eq!(r["passed"], true);
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    let names: Vec<&str> = r["groups"].as_array().unwrap().iter().map(|g| g["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "projection.w",
            "projection.b",
            "attention.0.a",
            "attention.0.v",
            "attention.0.u",
            "attention.1.a",
            "attention.1.v",
            "attention.1.u",
            "context_gate.w",
            "context_gate.b",
            "moe.experts",
            "moe.gates",
        ]
    );
    let strict = milattn(&["gradcheck", "--tolerance", "1e-15"]);
    assert_eq!(code(&strict), 1);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"tolerance": 1e-15, "seed": 4}"#).unwrap();
    let report = dir.path().join("g.json");
    let from_file = milattn(&["gradcheck", "--config", &s(&cfg), "--out", &s(&report)]);
    assert_eq!(code(&from_file), 1);
    let manifest = read_json(&dir.path().join("g.json.manifest.json"));
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["tolerance"], 1e-15);
    assert_eq!(manifest["config"]["frames"], 5);

    let flag_wins = milattn(&["gradcheck", "--config", &s(&cfg), "--tolerance", "1e-4", "--out", &s(&report)]);
    assert_eq!(code(&flag_wins), 0);

    fs::write(&cfg, r#"{"tolerence": 1e-4}"#).unwrap();
    assert_eq!(code(&milattn(&["gradcheck", "--config", &s(&cfg)])), 2);
    fs::write(&cfg, "{not json").unwrap();
    assert_eq!(code(&milattn(&["gradcheck", "--config", &s(&cfg)])), 2);
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    for bad in ["0", "many", "-2"] {
        assert_eq!(code(&milattn_env(&["gradcheck"], &[("MILATTN_THREADS", bad)])), 2, "{bad}");
    }
    assert_eq!(code(&milattn_env(&["gradcheck"], &[("MILATTN_THREADS", "2")])), 0);
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let out = milattn(&[
        "train",
        "--train",
        &data.file("train_bags.jsonl"),
        "--vocab",
        &data.file("vocabulary.json"),
        "--out",
        &s(&dir.path().join("m.json")),
        "--steps",
        "20",
        "--lr",
        "1e300",
    ]);
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("m.json").exists());
}

fn attention_weights(checkpoint: &Path, bags: &str, bag_id: &str) -> Vec<Vec<f64>> {
    let out = ok(&["inspect-attention", "--checkpoint", &s(checkpoint), "--bags", bags, "--bag-id", bag_id]);
    let dump: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(dump["bag_id"], bag_id);
    dump["heads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).collect())
        .collect()
}

#[test]
fn identical_frames_get_uniform_attention() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let ck = dir.path().join("m.json");
    train(&data, &ck, &["--steps", "10", "--pooling", "multi-attention", "--heads", "2"]);
    let frame = "[0.3,-1.2,0.8,0.0,2.5,-0.4]";
    let bag = format!("{{\"id\":\"flat\",\"labels\":[1],\"frames\":[{f},{f},{f},{f},{f},{f},{f}]}}\n", f = frame);
    let bags = dir.path().join("flat.jsonl");
    fs::write(&bags, bag).unwrap();
    let heads = attention_weights(&ck, &s(&bags), "flat");
    assert_eq!(heads.len(), 2);
    for w in heads {
        assert_eq!(w.len(), 7);
        for v in w {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
    }
}

#[test]
fn trained_attention_concentrates_on_planted_windows() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &["--strength", "10", "--bags", "100"]);
    let ck = dir.path().join("m.json");
    train(&data, &ck, &["--steps", "400", "--lr", "5e-3", "--pooling", "gated-attention"]);
    let plants = fs::read_to_string(data.dir.join("plants.jsonl")).unwrap();
    let bags = data.file("test_bags.jsonl");
    let (mut wins, mut total) = (0, 0);
    for line in plants.lines() {
        let p: Value = serde_json::from_str(line).unwrap();
        let id = p["id"].as_str().unwrap();
        let windows = p["windows"].as_array().unwrap();
        if !id.starts_with("test") || windows.is_empty() || total >= 20 {
            continue;
        }
        let w = &attention_weights(&ck, &bags, id)[0];
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let inside = |t: usize| {
            windows.iter().any(|x| {
                let start = x["start"].as_u64().unwrap() as usize;
                (start..start + x["len"].as_u64().unwrap() as usize).contains(&t)
            })
        };
        let mean = |keep: bool| {
            let v: Vec<f64> = w.iter().enumerate().filter(|(t, _)| inside(*t) == keep).map(|(_, v)| *v).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        total += 1;
        if mean(true) > mean(false) {
            wins += 1;
        }
    }
    assert!(total > 0);
    assert!(wins * 10 >= total * 8, "{wins}/{total}");
}

#[test]
fn inspect_attention_rejects_mean_pooling() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), &[]);
    let ck = dir.path().join("m.json");
    train(&data, &ck, &["--steps", "5", "--pooling", "mean"]);
    let out = milattn(&["inspect-attention", "--checkpoint", &s(&ck), "--bags", &data.file("test_bags.jsonl"), "--bag-id", "test-00000"]);
    assert_eq!(code(&out), 2);
}
