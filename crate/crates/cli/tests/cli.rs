//! End-to-end checks of the binary: reproducibility of outputs from one
//! seed, exit-code conventions, and the documented file formats.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dagflow"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dagflow_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|_| panic!("missing {}", path.display()))
}

#[test]
fn gen_data_is_reproducible_and_validates_arguments() {
    let dir = tmp("gen");
    for sub in ["a", "b"] {
        let status = bin()
            .args([
                "gen-data",
                "--d",
                "5",
                "--er",
                "1",
                "--n",
                "100",
                "--kind",
                "lingauss",
                "--seed",
                "7",
                "--out-dir",
            ])
            .arg(dir.join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    // byte-identical outputs under the same seed
    assert_eq!(read(&dir.join("a/data.csv")), read(&dir.join("b/data.csv")));
    assert_eq!(read(&dir.join("a/ground_truth.txt")), read(&dir.join("b/ground_truth.txt")));
    // a different seed changes the data
    let status = bin()
        .args(["gen-data", "--d", "5", "--er", "1", "--n", "100", "--seed", "8", "--out-dir"])
        .arg(dir.join("c"))
        .status()
        .unwrap();
    assert!(status.success());
    assert_ne!(read(&dir.join("a/data.csv")), read(&dir.join("c/data.csv")));
    // argument error: d = 0 exits with code 2
    let status = bin()
        .args(["gen-data", "--d", "0", "--seed", "1", "--out-dir"])
        .arg(dir.join("bad"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_loss_is_an_argument_error_listing_the_valid_ones() {
    let dir = tmp("loss");
    let output = bin()
        .args([
            "train", "--env", "dag", "--loss", "bogus", "--steps", "10", "--seed", "1",
            "--out-dir",
        ])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    for name in ["tb", "modified-db", "sql", "reverse-kl"] {
        assert!(stderr.contains(name), "stderr should list '{name}': {stderr}");
    }
}

#[test]
fn train_galton_learns_the_binomial_and_reproduces_bytes() {
    let dir = tmp("galton");
    for sub in ["a", "b"] {
        let status = bin()
            .args([
                "train",
                "--env",
                "galton2",
                "--loss",
                "tb",
                "--steps",
                "2500",
                "--batch-size",
                "32",
                "--lr",
                "0.05",
                "--eps-start",
                "0.5",
                "--seed",
                "3",
                "--out-dir",
            ])
            .arg(dir.join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read(&dir.join("a/trace.csv")), read(&dir.join("b/trace.csv")));
    let dist = String::from_utf8(read(&dir.join("a/terminating_distribution.csv"))).unwrap();
    let probs: Vec<f64> = dist
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(probs.len(), 3);
    for (p, want) in probs.iter().zip([0.25, 0.5, 0.25]) {
        assert!((p - want).abs() < 1e-2, "learned {probs:?}");
    }
}

#[test]
fn full_pipeline_train_evaluate_baseline_enumerate() {
    let dir = tmp("pipeline");
    // data
    let status = bin()
        .args(["gen-data", "--d", "3", "--er", "1", "--n", "100", "--seed", "11", "--out-dir"])
        .arg(dir.join("data"))
        .status()
        .unwrap();
    assert!(status.success());
    let data = dir.join("data/data.csv");

    // train modified-db briefly with exact-eval
    let status = bin()
        .args([
            "train", "--env", "dag", "--loss", "modified-db", "--score", "bge", "--steps",
            "6000", "--seed", "1", "--exact-eval", "--early-stop-jsd", "0.05", "--data",
        ])
        .arg(&data)
        .arg("--out-dir")
        .arg(dir.join("train"))
        .status()
        .unwrap();
    assert!(status.success());
    let trace = String::from_utf8(read(&dir.join("train/trace.csv"))).unwrap();
    assert!(trace.starts_with("step,loss,mean_abs_residual,jsd"));

    // evaluate the checkpoint
    let status = bin()
        .args(["evaluate", "--score", "bge", "--samples", "100", "--seed", "5", "--checkpoint"])
        .arg(dir.join("train/checkpoint.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--g-star")
        .arg(dir.join("data/ground_truth.txt"))
        .arg("--features")
        .arg("edge,path,markov")
        .arg("--out-dir")
        .arg(dir.join("eval"))
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["features_edge.csv", "features_path.csv", "features_markov.csv", "metrics.json", "correlation.csv", "manifest.json"] {
        assert!(dir.join("eval").join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("eval/metrics.json"))).unwrap();
    assert!(metrics.get("e_shd").is_some());
    assert!(metrics.get("jsd_vs_exact").is_some());

    // baseline
    let status = bin()
        .args([
            "baseline", "--d", "3", "--steps", "200000", "--seed", "2", "--score", "bge",
            "--data",
        ])
        .arg(&data)
        .arg("--out-dir")
        .arg(dir.join("baseline"))
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("baseline/metrics.json"))).unwrap();
    let err = metrics["edge_marginal_max_abs_error"].as_f64().unwrap();
    assert!(err < 0.05, "baseline marginals off by {err}");
    // zero steps is an argument error
    let status = bin()
        .args(["baseline", "--d", "3", "--steps", "0", "--seed", "2", "--uniform-score", "--out-dir"])
        .arg(dir.join("baseline0"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // enumerate dumps one line per DAG
    let status = bin()
        .args(["enumerate", "--d", "3", "--score", "bge", "--data"])
        .arg(&data)
        .arg("--out-dir")
        .arg(dir.join("enum"))
        .status()
        .unwrap();
    assert!(status.success());
    let table = String::from_utf8(read(&dir.join("enum/posterior.txt"))).unwrap();
    assert_eq!(table.lines().count(), 25);
    let total: f64 = table
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<f64>().unwrap().exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn manifests_record_the_run() {
    let dir = tmp("manifest");
    let status = bin()
        .args(["gen-data", "--d", "3", "--n", "20", "--seed", "4", "--out-dir"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["master_seed"], 4);
    assert!(manifest["input_digests"].as_object().unwrap().len() == 1);
}

#[test]
fn discrete_data_trains_through_the_bde_score() {
    let dir = tmp("bde");
    let status = bin()
        .args([
            "gen-data", "--d", "3", "--n", "200", "--kind", "discrete", "--arity", "2",
            "--seed", "21", "--out-dir",
        ])
        .arg(dir.join("data"))
        .status()
        .unwrap();
    assert!(status.success());
    let status = bin()
        .args([
            "train", "--env", "dag", "--loss", "modified-db", "--score", "bde", "--arity",
            "2", "--steps", "4000", "--seed", "1", "--exact-eval", "--data",
        ])
        .arg(dir.join("data/data.csv"))
        .arg("--out-dir")
        .arg(dir.join("train"))
        .status()
        .unwrap();
    assert!(status.success());
    let trace = String::from_utf8(read(&dir.join("train/trace.csv"))).unwrap();
    // the JSD column is present and the last evaluation is finite and small-ish
    let last_jsd: f64 = trace
        .lines()
        .filter_map(|l| l.rsplit(',').next())
        .filter(|v| !v.is_empty() && *v != "jsd")
        .last()
        .unwrap()
        .parse()
        .unwrap();
    assert!(last_jsd.is_finite() && last_jsd < 0.5, "bde jsd {last_jsd}");
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tmp("workers");
    for (sub, workers) in [("w1", "1"), ("w3", "3")] {
        let status = bin()
            .args([
                "train", "--env", "galton2", "--loss", "tb", "--steps", "400",
                "--batch-size", "16", "--seed", "6", "--workers", workers, "--out-dir",
            ])
            .arg(dir.join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(read(&dir.join("w1/trace.csv")), read(&dir.join("w3/trace.csv")));
    assert_eq!(
        read(&dir.join("w1/terminating_distribution.csv")),
        read(&dir.join("w3/terminating_distribution.csv"))
    );
}

#[test]
fn config_file_fills_unset_flags_and_flags_win() {
    let dir = tmp("config");
    std::fs::write(dir.join("train.conf"), "steps=300\nbatch-size=8\n# comment\nlr=0.02\n")
        .unwrap();
    let status = bin()
        .args(["train", "--env", "galton2", "--loss", "tb", "--seed", "2", "--batch-size", "4"])
        .arg("--config")
        .arg(dir.join("train.conf"))
        .arg("--out-dir")
        .arg(dir.join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&dir.join("out/manifest.json"))).unwrap();
    // file supplied steps and lr; the explicit flag beat the file
    assert_eq!(manifest["config"]["steps"], "300");
    assert_eq!(manifest["config"]["lr"], "0.02");
    assert_eq!(manifest["config"]["batch_size"], "4");
    // unknown keys are argument errors
    std::fs::write(dir.join("bad.conf"), "stepz=300\n").unwrap();
    let status = bin()
        .args(["train", "--env", "galton2", "--loss", "tb", "--seed", "2"])
        .arg("--config")
        .arg(dir.join("bad.conf"))
        .arg("--out-dir")
        .arg(dir.join("out2"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
