use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmr"))
        .args(args)
        .env_remove("MMR_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn aesop() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/aesop.txt")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Writes a toy run configuration into `dir`, with `edit` applied on top.
fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut doc = json!({
        "model": {
            "d_model": 32, "n_layers": 2, "n_heads": 2, "latent_dim": 16,
            "experts": {"n_experts": 8, "n_shared": 1, "top_k": 2},
            "dropout": 0.0, "max_seq_len": 64
        },
        "train": {"steps": 20, "batch_size": 4, "seq_len": 32, "lr_peak": 1e-3, "gamma": 3e-2},
        "paths": {"corpus": aesop(), "out-dir": dir.join("run")}
    });
    edit(&mut doc);
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, |_| {});
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let summary: Value = serde_json::from_str(&stdout(&mmr(&args))).unwrap();
    PathBuf::from(summary["checkpoint"].as_str().unwrap())
}

#[test]
fn missing_corpus_is_a_usage_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |d| d["paths"].as_object_mut().unwrap().clear());
    let out = mmr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.corpus"));
}

#[test]
fn unknown_keys_are_usage_errors_with_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |d| d["train"]["learning_rate"] = json!(0.1));
    let out = mmr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line"), "{err}");

    let out = mmr(&["train", "--config", dir.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_model_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |d| d["model"]["latent_dim"] = json!(0));
    assert_eq!(mmr(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn steps_flag_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), &["--steps", "10"]);
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let records: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 10);
    assert_eq!(records.last().unwrap()["step"], 10);
    assert!(ckpt.ends_with("final.mmr") && ckpt.exists());
    let routes = std::fs::read_to_string(dir.path().join("run/route_stats.jsonl")).unwrap();
    assert_eq!(routes.lines().count(), 10 * 2);
}

#[test]
fn identical_invocations_write_identical_metrics() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(a.path(), &["--seed", "5"]);
    train(b.path(), &["--seed", "5"]);
    train(c.path(), &["--seed", "6"]);
    let read = |d: &Path| std::fs::read(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
    assert_eq!(
        std::fs::read(a.path().join("run/final.mmr")).unwrap(),
        std::fs::read(b.path().join("run/final.mmr")).unwrap()
    );
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |d| {
        d["paths"].as_object_mut().unwrap().remove("out-dir");
        d["train"]["steps"] = json!(2);
    });
    let env_dir = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_mmr"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .env("MMR_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    stdout(&out);
    assert!(env_dir.join("metrics.jsonl").exists());

    let flag_dir = dir.path().join("from-flag");
    stdout(&mmr(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", flag_dir.to_str().unwrap()]));
    assert!(flag_dir.join("final.mmr").exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |d| d["train"]["steps"] = json!(3));
    let out = stdout(&mmr(&["train", "--config", cfg.to_str().unwrap(), "--sweep", "model.latent_dim=8,16"]));
    let mut reader = csv::Reader::from_path(dir.path().join("run/sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "8");
    assert_eq!(&rows[1][1], "16");
    assert!(rows[0][3].parse::<u64>().unwrap() < rows[1][3].parse::<u64>().unwrap());
    assert!(dir.path().join("run/model.latent_dim=16/metrics.jsonl").exists());
    assert!(out.starts_with("key,value"));

    let bad = mmr(&["train", "--config", cfg.to_str().unwrap(), "--sweep", "model.nope=1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn generate_echoes_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), &[]);
    let ckpt = ckpt.to_str().unwrap();
    let prompt = "Once upon a time, there was a little rabbit";
    let run = |extra: &[&str]| {
        let mut args = vec!["generate", "--ckpt", ckpt, "--prompt", prompt];
        args.extend_from_slice(extra);
        stdout(&mmr(&args))
    };
    assert_eq!(run(&["--max-new", "0"]), format!("{prompt}\n"));
    let greedy = run(&["--greedy", "--max-new", "16"]);
    assert!(greedy.starts_with(prompt) && greedy.len() > prompt.len() + 1);
    assert_eq!(greedy, run(&["--greedy", "--max-new", "16"]));
    assert_eq!(greedy, run(&["--greedy", "--max-new", "16", "--no-cache"]));
    assert_eq!(greedy, run(&["--max-new", "16"]));
    let sampled = run(&["--temperature", "1.0", "--seed", "9", "--max-new", "16"]);
    assert_eq!(sampled, run(&["--temperature", "1.0", "--seed", "9", "--max-new", "16"]));
    assert_eq!(
        run(&["--temperature", "0.8", "--top-p", "0.9", "--max-new", "16"]),
        run(&["--temperature", "0.8", "--top-p", "0.9", "--max-new", "16", "--no-cache"])
    );
}

#[test]
fn generate_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.mmr");
    std::fs::write(&bogus, b"NOPE not a checkpoint").unwrap();
    let out = mmr(&["generate", "--ckpt", bogus.to_str().unwrap(), "--prompt", "a"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let ckpt = train(dir.path(), &["--steps", "1"]);
    let ckpt = ckpt.to_str().unwrap();
    let conflicting = mmr(&["generate", "--ckpt", ckpt, "--prompt", "a", "--greedy", "--temperature", "1"]);
    assert_eq!(conflicting.status.code(), Some(2));
    let too_long = mmr(&["generate", "--ckpt", ckpt, "--prompt", "a", "--max-new", "500"]);
    assert_eq!(too_long.status.code(), Some(1));
}

#[test]
fn analyze_reports_the_cache_sizes_in_megabytes() {
    let cfg = configs().join("l12-d1024.json");
    let cfg = cfg.to_str().unwrap();
    let table = stdout(&mmr(&["analyze", "--config", cfg, "--seq-len", "512", "--batch", "16", "--format", "table"]));
    let mb_rows: Vec<&str> = table.lines().filter(|l| l.ends_with(" MB")).collect();
    assert!(mb_rows.iter().any(|l| l.contains("full attention") && l.contains(" 384 MB")), "{table}");
    assert!(mb_rows.iter().any(|l| l.contains("latent shared") && l.contains(" 192 MB")), "{table}");

    let json: Value = serde_json::from_str(&stdout(&mmr(&[
        "analyze", "--config", cfg, "--seq-len", "512", "--batch", "16", "--format", "json",
    ])))
    .unwrap();
    assert_eq!(json["analytic"]["kv_bytes_baseline"], 402_653_184u64);
    assert_eq!(json["analytic"]["kv_bytes_shared"], 201_326_592u64);

    let csv_out = stdout(&mmr(&["analyze", "--config", cfg, "--seq-len", "512", "--format", "csv"]));
    let mut reader = csv::Reader::from_reader(csv_out.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["metric", "value", "unit"]);
    assert!(reader.records().map(Result::unwrap).any(|r| &r[0] == "kv reduction factor" && &r[1] == "0.5"));
}

#[test]
fn analyze_measure_reconciles_exactly() {
    for cfg in ["toy.json", "l12-d1024.json"] {
        let cfg = configs().join(cfg);
        let seq_len = if cfg.ends_with("toy.json") { "100" } else { "8" };
        let out = stdout(&mmr(&["analyze", "--config", cfg.to_str().unwrap(), "--seq-len", seq_len, "--measure"]));
        assert!(out.lines().any(|l| l.starts_with("forward flops delta:") && l.contains(" 0 ")), "{out}");
        assert!(out.lines().any(|l| l.starts_with("kv cache bytes delta:") && l.contains(" 0 ")), "{out}");
    }
    let preset = stdout(&mmr(&["analyze", "--preset", "xs", "--seq-len", "64", "--format", "json"]));
    assert!(serde_json::from_str::<Value>(&preset).is_ok());
    assert_eq!(mmr(&["analyze", "--preset", "huge", "--seq-len", "64"]).status.code(), Some(2));
    assert_eq!(mmr(&["analyze", "--seq-len", "64"]).status.code(), Some(2));
}

#[test]
fn route_stats_conserve_token_slots() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), &["--steps", "1"]);
    let aesop = aesop();
    let out = stdout(&mmr(&[
        "route-stats", "--ckpt", ckpt.to_str().unwrap(), "--data", aesop.to_str().unwrap(), "--fraction", "0.1",
    ]));
    let stats: Value = serde_json::from_str(&out).unwrap();
    let tokens = stats["tokens"].as_u64().unwrap();
    assert_eq!(tokens, (9810.0f64 * 0.1).floor() as u64);
    for layer in stats["layers"].as_array().unwrap() {
        let slots: u64 = layer["histogram"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(slots, tokens * 2);
        assert!(layer["cv"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn bias_balancing_lowers_held_out_load_variation() {
    let cv = |strategy: &str| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), |d| {
            d["train"]["steps"] = json!(300);
            d["train"]["balance"] = json!(strategy);
        });
        let summary: Value =
            serde_json::from_str(&stdout(&mmr(&["train", "--config", cfg.to_str().unwrap(), "--seed", "11"]))).unwrap();
        let aesop = aesop();
        let out = stdout(&mmr(&[
            "route-stats",
            "--ckpt",
            summary["checkpoint"].as_str().unwrap(),
            "--data",
            aesop.to_str().unwrap(),
            "--fraction",
            "0.2",
        ]));
        let stats: Value = serde_json::from_str(&out).unwrap();
        let layers = stats["layers"].as_array().unwrap();
        layers.iter().map(|l| l["cv"].as_f64().unwrap()).sum::<f64>() / layers.len() as f64
    };
    let (balanced, free) = (cv("bias-diff"), cv("none"));
    assert!(balanced < free, "bias-diff {balanced} vs none {free}");
}
