use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use embedforge::datasets::SyntheticSpec;
use embedforge::experiment::{DatasetSpec, EvalConfig, ExperimentConfig};
use embedforge::losses::LossKind;
use embedforge::trainer::TrainConfig;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embedforge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path, identities: usize, center_scale: f64, iters: u64) -> String {
    let mut train = TrainConfig::default().with_iterations(iters);
    train.hidden_dims = vec![16];
    train.embedding_dim = 4;
    train.checkpoint_every = 10;
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            num_identities: identities,
            per_identity: 6,
            input_dim: 8,
            center_scale,
            noise_sigma: 0.5,
            seed: 3,
        }),
        train,
        eval: EvalConfig::default(),
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn batch_larger_than_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 10, 1.0, 20);
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", &config, "--p", "11", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 10, 1.0, 20);
    let missing = dir.path().join("nope.json");
    let out_dir = dir.path().join("out");
    let out = run(&[
        "eval-rank",
        "--config",
        &config,
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_four_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 10, 1.0, 20);
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", &config, "--lr", "1e200", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("checkpoint-000000.json").exists());
    let status = json(&out_dir.join("manifest.json"))["status"].as_str().unwrap().to_string();
    assert!(status.starts_with("error"), "{status}");
}

#[test]
fn collapsed_means_without_stabiliser_is_a_numeric_domain_error() {
    let out = run(&["gradcheck", "--loss", "cluster", "--gamma", "0", "--collapse-means"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_for_every_loss() {
    for kind in LossKind::ALL {
        for extra in [&[][..], &["--network"][..]] {
            let mut args = vec!["gradcheck", "--loss", kind.name(), "--batches", "3"];
            args.extend_from_slice(extra);
            let out = run(&args);
            let text = String::from_utf8_lossy(&out.stdout);
            assert_eq!(code(&out), 0, "{kind} {extra:?}: {text}");
            assert!(text.contains("PASS"), "{text}");
        }
    }
}

#[test]
fn untrained_model_on_indistinguishable_identities_ranks_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), 100, 0.0, 1);
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let initial = out_dir.join("checkpoint-000000.json");
    let rank_dir = dir.path().join("rank");
    let out = run(&[
        "eval-rank",
        "--config",
        &config,
        "--checkpoint",
        initial.to_str().unwrap(),
        "--split",
        "all",
        "--out",
        rank_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let map = json(&rank_dir.join("rank_report.json"))["map"].as_f64().unwrap();
    // five same-identity items among 500: chance mAP is about 1/100
    assert!((1.0 / 300.0..3.0 / 100.0).contains(&map), "map {map}");
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let config = small_config(dir, 10, 1.0, 30);
    let out_dir = dir.join("out");
    let out_str = out_dir.to_str().unwrap();
    let ckpt = out_dir.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let stream_dir = format!("{out_str}/stream");
    let export_dir = format!("{out_str}/export");
    for args in [
        vec!["train", "--config", &config, "--out", out_str, "--seed", "5"],
        vec!["eval-stream", "--config", &config, "--checkpoint", ckpt, "--sweep", "--out", &stream_dir],
        vec!["export", "--config", &config, "--checkpoint", ckpt, "--out", &export_dir],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = Vec::new();
    for name in [
        "checkpoint.json",
        "checkpoint-000030.json",
        "stream/stream_report.json",
        "stream/curve.csv",
        "export/embeddings.csv",
    ] {
        files.push((name.to_string(), fs::read(out_dir.join(name)).unwrap()));
    }
    files
}

#[test]
fn repeated_runs_write_identical_artifacts_inside_the_output_directory() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    assert_eq!(first, pipeline(b.path()));

    // only the config we wrote and the output directory exist
    let mut top: Vec<String> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    top.sort();
    assert_eq!(top, vec!["config.json", "out"]);
    let manifest = json(&a.path().join("out/stream/manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert!(manifest["outputs"].as_array().unwrap().len() >= 3);
}
