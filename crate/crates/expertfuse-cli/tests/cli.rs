//! Black-box tests of the CLI binary on a miniature scenario.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_expertfuse"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let config = r#"{
        "scenario": {
            "image_height": 16,
            "image_width": 16,
            "class_names": ["c0", "c1", "c2", "c3", "c4"],
            "sites": [
                {"id": "base", "labels": [0, 1, 2], "patients": 6, "samples_per_patient": 4,
                 "role": "Base",
                 "shift": {"gain": 1.0, "bias": 0.0, "noise_sigma": 0.03, "max_translation": 1, "patient_sigma": 0.02}},
                {"id": "inc1", "labels": [3, 4], "patients": 6, "samples_per_patient": 4,
                 "role": {"Incremental": {"step": 1}},
                 "shift": {"gain": 1.1, "bias": 0.02, "noise_sigma": 0.03, "max_translation": 1, "patient_sigma": 0.02}},
                {"id": "ext1", "labels": [0, 1, 2, 3, 4], "patients": 5, "samples_per_patient": 3,
                 "role": "External",
                 "shift": {"gain": 0.95, "bias": 0.0, "noise_sigma": 0.04, "max_translation": 1, "patient_sigma": 0.02}}
            ],
            "split_ratios": [0.6, 0.2, 0.2],
            "template_waves": 3
        },
        "classifier_epochs": 5,
        "fusion_epochs": 3,
        "batch_size": 16,
        "lr": 0.001,
        "n_aug": 5
    }"#;
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let line_a = stdout_line(&run_ok(&[
        "gen-data", "--config", config.to_str().unwrap(),
        "--seed", "7", "--out", out_a.to_str().unwrap(),
    ]));
    let line_b = stdout_line(&run_ok(&[
        "gen-data", "--config", config.to_str().unwrap(),
        "--seed", "7", "--out", out_b.to_str().unwrap(),
    ]));
    let checksum = |line: &str| {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix("checksum="))
            .unwrap()
            .to_string()
    };
    assert_eq!(checksum(&line_a), checksum(&line_b));

    let line_c = stdout_line(&run_ok(&[
        "gen-data", "--config", config.to_str().unwrap(),
        "--seed", "8", "--out", dir.path().join("c").to_str().unwrap(),
    ]));
    assert_ne!(checksum(&line_a), checksum(&line_c));
}

#[test]
fn unknown_flags_and_kinds_exit_with_usage_code() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    run_ok(&[
        "gen-data", "--config", config.to_str().unwrap(),
        "--seed", "7", "--out", out_dir.to_str().unwrap(),
    ]);
    let out = bin()
        .args([
            "baseline", "--kind", "nonsense",
            "--config", config.to_str().unwrap(),
            "--seed", "7", "--out", out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train-base",
            "--seed", "7",
            "--out", dir.path().join("empty").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn scripted_command_chain_produces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let c = config.to_str().unwrap();
    let o = out_dir.to_str().unwrap();
    let seeded: &[&str] = &["--config", c, "--seed", "7", "--out", o];

    let chain: &[&[&str]] = &[
        &["gen-data"],
        &["train-base"],
        &["step", "--index", "1"],
        &["train-fusion", "--mode", "sf"],
        &["train-fusion", "--mode", "attn"],
        &["train-fusion", "--mode", "nmd"],
        &["baseline", "--kind", "combine-retrain"],
        &["baseline", "--kind", "max-logit"],
        &["evaluate", "--split", "internal"],
        &["evaluate", "--split", "external"],
        &["report", "--attention", "--efficiency"],
    ];
    for args in chain {
        let full: Vec<&str> = args.iter().copied().chain(seeded.iter().copied()).collect();
        run_ok(&full);
    }

    // The metrics CSV column contract.
    let internal = fs::read_to_string(out_dir.join("reports/metrics_internal.csv")).unwrap();
    assert!(internal.starts_with("method,experts,transfer,dataset,acc,f1\n"));
    for method in ["single-expert-base", "max-logit", "msp", "confidence-routing",
                   "sf", "attn-wsf", "nmd-wsf", "combine-retrain"] {
        assert!(internal.contains(method), "missing {method} in metrics");
    }
    assert!(out_dir.join("reports/metrics_external.csv").exists());
    assert!(out_dir.join("reports/attention_entropy.csv").exists());
    assert!(out_dir.join("reports/efficiency_training.csv").exists());
    assert!(out_dir.join("logs/transfer_log.csv").exists());
}
