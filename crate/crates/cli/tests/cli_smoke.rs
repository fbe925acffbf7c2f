//! End-to-end smoke test of the gcap binary: make-data, train, generate,
//! eval on a seconds-scale configuration.

use gcap_core::io::{self, Dims, RunConfig};
use std::path::Path;
use std::process::Command;

fn gcap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gcap"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(out.status.success(), "command failed:\n{stdout}\n{stderr}");
    stdout
}

fn tiny_config(path: &Path) {
    let mut cfg = RunConfig::desk();
    cfg.dims = Dims {
        e: 6,
        h: 8,
        d: 12,
        g: 2,
        n: 14,
    };
    cfg.k = 2;
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    cfg.batch_size = 4;
    cfg.max_decode_len = 8;
    cfg.data.n_samples = 10;
    cfg.data.max_objects = 1;
    cfg.data.dup_per_object = 1;
    cfg.data.min_noise = 2;
    io::save_config(path, &cfg).unwrap();
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    tiny_config(&config);
    let data = dir.path().join("data");
    let out = run(gcap()
        .arg("make-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&data));
    assert!(out.contains("train"), "{out}");
    assert!(data.join("train.jsonl").exists());
    assert!(data.join("vocab.json").exists());

    let run_dir = dir.path().join("run");
    run(gcap()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run_dir));
    assert!(run_dir.join("checkpoint.gcap").exists());
    assert!(run_dir.join("train_log.csv").exists());

    let preds = run_dir.join("preds.jsonl");
    run(gcap()
        .arg("generate")
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint.gcap"))
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("test")
        .arg("--out")
        .arg(&preds)
        .arg("--dump-attention"));
    assert!(preds.exists());

    let report = run_dir.join("report.json");
    let out = run(gcap()
        .arg("eval")
        .arg("--pred")
        .arg(&preds)
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("test")
        .arg("--out")
        .arg(&report));
    assert!(out.contains("B@1"), "{out}");
    assert!(report.exists());
    assert!(run_dir.join("report.csv").exists());
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    tiny_config(&config);
    let data = dir.path().join("data");
    run(gcap()
        .arg("make-data")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&data));
    // Train with k overridden to 1 and a different seed.
    let run_dir = dir.path().join("run");
    run(gcap()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--k")
        .arg("1")
        .arg("--seed")
        .arg("7")
        .arg("--epochs")
        .arg("1")
        .arg("--warmup")
        .arg("1")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&run_dir));
    let ckpt = io::load_checkpoint(&run_dir.join("checkpoint.gcap")).unwrap();
    assert_eq!(ckpt.config.k, 1);
    assert_eq!(ckpt.config.seed, 7);
    assert_eq!(ckpt.config.epochs, 1);
}
