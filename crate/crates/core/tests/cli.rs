//! End-to-end runs of the command layer on a tiny configuration.

use std::path::{Path, PathBuf};

use lsl_core::harness::checkpoint::Checkpoint;
use lsl_core::harness::cli::main_with;
use lsl_core::harness::config::{RunConfig, RESOLVED_CONFIG, SEED_FILE};
use lsl_core::harness::manifest::{Manifest, Split};
use serde_json::{json, Value};

fn tiny_config() -> Value {
    json!({
        "synth": {"n_scripts": 5, "phones_per_utterance": 4},
        "model": {
            "features": {"sample_rate": 8000, "n_mels": 20, "window_ms": 25.0, "hop_ms": 10.0},
            "feature_norm": "global",
            "encoder": {"input": "log-mel", "width": 8, "n_reduction_layers": 1, "residual_init_gain": 0.3},
            "bottleneck": {"mode": "vq", "latent_dim": 4, "codebook_size": 8, "codebook_init": "data"},
            "decoder": {
                "cond_width": 8,
                "cond_filter": 3,
                "wavenet": {"n_layers": 3, "cycle": 3, "residual_width": 8, "gate_width": 8,
                            "skip_width": 8, "output_width": 16, "levels": 256}
            },
            "n_speakers": 3
        },
        "train": {"batch_size": 2, "segment_samples": 1280, "steps": 20, "milestones": [10, 15, 18],
                  "polyak_decay": 0.9},
        "probe": {"hidden": 16, "steps": 40, "batch_size": 32},
        "eval": {"abx_max_per_cell": 20}
    })
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    manifest: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Self::with_config(tiny_config())
    }

    fn with_config(cfg: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let f = Self {
            manifest: dir.path().join("corpus/manifest.jsonl"),
            config,
            dir,
        };
        assert_eq!(f.run("synth-corpus", "corpus", &[]), 0);
        f
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, cmd: &str, out: &str, extra: &[&str]) -> i32 {
        let out = self.path(out);
        let mut args: Vec<String> = vec![
            "lsl".into(),
            cmd.into(),
            "--config".into(),
            self.config.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        main_with(args)
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let m = self.manifest.display().to_string();
        let mut a = vec!["--manifest", m.as_str()];
        a.extend_from_slice(extra);
        assert_eq!(self.run("train", out, &a), 0);
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_corpus_writes_valid_manifest() {
    let f = Fixture::new();
    let m = Manifest::load(&f.manifest).unwrap();
    assert_eq!(m.records.len(), 15);
    assert_eq!(m.n_speakers(), 3);
    assert_eq!(m.split(Split::Train).len(), 9);
    assert_eq!(m.split(Split::Dev).len(), 3);
    assert_eq!(m.split(Split::Test).len(), 3);
    for r in &m.records {
        assert!(m.wav_path(r).exists());
        assert!(m.alignment(r).unwrap().is_some());
    }
    assert!(f.path("corpus").join(RESOLVED_CONFIG).exists());
    assert_eq!(std::fs::read_to_string(f.path("corpus").join(SEED_FILE)).unwrap(), "0\n");
}

#[test]
fn train_writes_checkpoint_and_loss_rows() {
    let f = Fixture::new();
    f.train("run", &["--steps", "7"]);
    let csv = std::fs::read_to_string(f.path("run/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,loss,nll,kl_or_vq,commit");
    assert_eq!(lines.len(), 8);
    assert!(lines[7].starts_with("7,"));
    let timing = std::fs::read_to_string(f.path("run/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 8);
    let resolved = RunConfig::load(&f.path("run").join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.train.steps, 7);
    let c = Checkpoint::load(&f.path("run/checkpoint.ckpt"), Some(&resolved.model)).unwrap();
    assert_eq!(c.step, 7);
}

#[test]
fn fixed_seed_rerun_is_byte_identical() {
    let f = Fixture::new();
    f.train("a", &["--steps", "6"]);
    f.train("b", &["--steps", "6"]);
    assert_eq!(read(&f.path("a/loss.csv")), read(&f.path("b/loss.csv")));
    assert_eq!(read(&f.path("a/checkpoint.ckpt")), read(&f.path("b/checkpoint.ckpt")));
}

#[test]
fn different_seeds_differ() {
    let f = Fixture::new();
    f.train("a", &["--steps", "3"]);
    f.train("b", &["--steps", "3", "--seed", "5"]);
    assert_ne!(read(&f.path("a/loss.csv")), read(&f.path("b/loss.csv")));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let f = Fixture::new();
    f.train("full", &["--steps", "20"]);
    f.train("split", &["--steps", "10"]);
    let ck = f.path("split/checkpoint.ckpt").display().to_string();
    f.train("split", &["--steps", "20", "--resume", &ck]);
    assert_eq!(read(&f.path("full/loss.csv")), read(&f.path("split/loss.csv")));
    assert_eq!(read(&f.path("full/checkpoint.ckpt")), read(&f.path("split/checkpoint.ckpt")));
}

#[test]
fn token_pipeline_is_deterministic() {
    let f = Fixture::new();
    f.train("run", &["--steps", "4"]);
    let m = f.manifest.display().to_string();
    let ck = f.path("run/checkpoint.ckpt").display().to_string();
    for out in ["t1", "t2"] {
        assert_eq!(f.run("export-tokens", out, &["--manifest", &m, "--checkpoint", &ck]), 0);
        let tokens = f.path(out).join("tokens.jsonl").display().to_string();
        assert_eq!(f.run("map-tokens", out, &["--manifest", &m, "--tokens", &tokens]), 0);
    }
    assert_eq!(read(&f.path("t1/tokens.jsonl")), read(&f.path("t2/tokens.jsonl")));
    let acc = read(&f.path("t1/accuracy.json"));
    assert_eq!(acc, read(&f.path("t2/accuracy.json")));
    let v: Value = serde_json::from_slice(&acc).unwrap();
    let a = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(v["test_utterances"], 3);
    let first = std::fs::read_to_string(f.path("t1/tokens.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(rec["token_rate"], 50.0);
}

#[test]
fn abx_on_oracle_features_is_near_zero() {
    let mut cfg = tiny_config();
    cfg["synth"] = json!({});
    let f = Fixture::with_config(cfg);
    let m = f.manifest.display().to_string();
    assert_eq!(f.run("abx", "abx", &["--manifest", &m, "--point", "oracle"]), 0);
    let csv = std::fs::read_to_string(f.path("abx/abx.csv")).unwrap();
    let all = csv.lines().find(|l| l.starts_with("mean,all,")).unwrap();
    let err: f64 = all.rsplit(',').next().unwrap().parse().unwrap();
    assert!(err < 0.01, "{csv}");
}

#[test]
fn probe_grid_leaves_model_untouched() {
    let f = Fixture::new();
    f.train("run", &["--steps", "3"]);
    let m = f.manifest.display().to_string();
    let ckp = f.path("run/checkpoint.ckpt");
    let before = read(&ckp);
    let ck = ckp.display().to_string();
    assert_eq!(f.run("probe", "probe", &["--manifest", &m, "--checkpoint", &ck]), 0);
    assert_eq!(read(&ckp), before);
    let csv = std::fs::read_to_string(f.path("probe/probes.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "point,task,metric,value,n");
    assert_eq!(csv.lines().count(), 17);
    let meta: Value = serde_json::from_slice(&read(&f.path("probe/probe_meta.json"))).unwrap();
    assert_eq!(meta["params_sha256_before"], meta["params_sha256_after"]);
}

#[test]
fn generate_and_describe() {
    let f = Fixture::new();
    f.train("run", &["--steps", "2"]);
    let m = f.manifest.display().to_string();
    let ck = f.path("run/checkpoint.ckpt").display().to_string();
    let code = f.run(
        "generate",
        "gen",
        &["--manifest", &m, "--checkpoint", &ck, "--utterance", "spk1_s00", "--speaker", "0", "--samples", "400"],
    );
    assert_eq!(code, 0);
    let w = lsl_core::audio::read_wav(&f.path("gen/generated.wav"), 8000).unwrap();
    assert_eq!(w.samples.len(), 400);
    let out = f.path("desc").display().to_string();
    assert_eq!(main_with(["lsl", "describe", "--checkpoint", &ck, "--out", &out]), 0);
    let d = std::fs::read_to_string(f.path("desc/describe.txt")).unwrap();
    assert!(d.contains("step 2") && d.contains("section polyak"));
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let f = Fixture::new();
    let m = f.manifest.display().to_string();
    // unknown config key
    let mut bad = tiny_config();
    bad["train"]["learning_rate"] = json!(1.0);
    std::fs::write(f.path("bad.json"), bad.to_string()).unwrap();
    let out = f.path("x").display().to_string();
    let cfg = f.path("bad.json").display().to_string();
    let config_code = main_with(["lsl", "train", "--config", &cfg, "--out", &out, "--manifest", &m]);
    assert_eq!(config_code, 2);
    // missing manifest
    let data_code = f.run("train", "y", &["--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(data_code, 3);
    // unknown flag
    let usage_code = f.run("train", "z", &["--manifest", &m, "--bogus"]);
    assert_eq!(usage_code, 5);
    // checkpoint of another model configuration
    f.train("run", &["--steps", "1"]);
    let mut other = tiny_config();
    other["model"]["bottleneck"]["codebook_size"] = json!(6);
    std::fs::write(f.path("other.json"), other.to_string()).unwrap();
    let cfg = f.path("other.json").display().to_string();
    let ck = f.path("run/checkpoint.ckpt").display().to_string();
    let code = main_with(["lsl", "export-tokens", "--config", &cfg, "--out", &out, "--manifest", &m, "--checkpoint", &ck]);
    assert_eq!(code, 3);
    let codes = [config_code, data_code, usage_code];
    assert!(codes.iter().all(|&c| c != 0));
}

#[test]
fn feature_cache_serves_reruns() {
    let f = Fixture::new();
    let cache = f.path("cache");
    std::env::set_var("LSL_CACHE_DIR", &cache);
    let m = f.manifest.display().to_string();
    assert_eq!(f.run("extract-features", "feat1", &["--manifest", &m]), 0);
    let n = std::fs::read_dir(&cache).unwrap().count();
    assert_eq!(n, 15);
    assert_eq!(f.run("extract-features", "feat2", &["--manifest", &m]), 0);
    std::env::remove_var("LSL_CACHE_DIR");
    assert_eq!(
        read(&f.path("feat1/features/spk0_s00.feat")),
        read(&f.path("feat2/features/spk0_s00.feat"))
    );
}
