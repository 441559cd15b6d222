//! End-to-end runs through the training loop and the command-line front end.

use std::path::Path;

use clap::Parser;
use gpt_stain::cli::{run, Cli};
use gpt_stain::data_io::{write_synthetic_dataset, Manifest, SynthOptions};
use gpt_stain::network::NetworkConfig;
use gpt_stain::training::{checkpoint_name, train, RunOptions, TrainConfig};

fn dataset(dir: &Path, samples: usize, size: usize) -> Manifest {
    write_synthetic_dataset(
        dir,
        &SynthOptions {
            samples,
            size,
            seed: 5,
            task_count: 2,
            tasks: vec![0, 1],
            test_every: 0,
            partial_labels: true,
        },
    )
    .unwrap()
}

fn losses(m: &Manifest, cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Vec<(u64, u64)> {
    let summary = train(
        m,
        &NetworkConfig::tiny(),
        cfg,
        &RunOptions {
            out: out.to_path_buf(),
            resume: resume.map(Path::to_path_buf),
            verbose: false,
        },
    )
    .unwrap();
    summary
        .losses
        .iter()
        .map(|r| (r.step, r.loss.to_bits()))
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), 2, 48);
    let cfg = TrainConfig {
        max_steps: 6,
        batch_size: 2,
        checkpoint_every: 3,
        ..TrainConfig::tiny()
    };
    let full = losses(&m, &cfg, &dir.path().join("full"), None);
    assert_eq!(full.len(), 6);

    let ck = dir.path().join("full").join(checkpoint_name(3));
    let resumed = losses(&m, &cfg, &dir.path().join("resumed"), Some(&ck));
    assert_eq!(resumed, full[3..]);

    // Resuming in place keeps the logged prefix.
    let again = losses(&m, &cfg, &dir.path().join("full"), Some(&ck));
    assert_eq!(again, full);
}

#[test]
fn training_in_double_precision_runs() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), 1, 40);
    let cfg = TrainConfig {
        max_steps: 2,
        batch_size: 1,
        precision: gpt_stain::training::Precision::F64,
        ..TrainConfig::tiny()
    };
    let log = losses(&m, &cfg, &dir.path().join("run"), None);
    assert!(log.iter().all(|&(_, bits)| f64::from_bits(bits).is_finite()));
}

#[test]
fn empty_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest {
        version: gpt_stain::data_io::MANIFEST_VERSION,
        task_count: 2,
        samples: Vec::new(),
        base: dir.path().to_path_buf(),
    };
    let err = train(
        &m,
        &NetworkConfig::tiny(),
        &TrainConfig::tiny(),
        &RunOptions {
            out: dir.path().join("run"),
            resume: None,
            verbose: false,
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

fn cli(args: &[&str]) -> gpt_stain::Result<()> {
    let mut argv = vec!["gpt-stain"];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv).expect("arguments parse"))
}

#[test]
fn command_line_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    let (data, runs, preds, report) = (p("data"), p("run"), p("pred"), p("report"));
    let manifest = format!("{data}/manifest.json");
    let model = format!("{runs}/model.gptc");

    cli(&[
        "synth",
        "--out",
        &data,
        "--samples",
        "3",
        "--size",
        "48",
        "--test-every",
        "3",
    ])
    .unwrap();
    cli(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        &runs,
        "--steps",
        "3",
        "--batch-size",
        "2",
    ])
    .unwrap();
    cli(&[
        "predict",
        "--checkpoint",
        &model,
        "--manifest",
        &manifest,
        "--out",
        &preds,
    ])
    .unwrap();
    for name in ["task0_argmax.pgm", "task1_expectation.pgm", "distributions.gptt"] {
        assert!(dir.path().join("pred/s002").join(name).exists(), "{name}");
    }
    cli(&[
        "eval",
        "--manifest",
        &manifest,
        "--pred",
        &preds,
        "--out",
        &report,
        "--sample-size",
        "500",
    ])
    .unwrap();
    for name in ["report.json", "table.txt", "confusion_task0.csv"] {
        assert!(dir.path().join("report").join(name).exists(), "{name}");
    }
    cli(&["inspect", "--checkpoint", &model]).unwrap();

    let log = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,seconds"));
    assert_eq!(log.lines().count(), 4);

    let missing = cli(&[
        "eval",
        "--manifest",
        &manifest,
        "--pred",
        &p("nowhere"),
        "--out",
        &report,
    ]);
    assert_eq!(missing.unwrap_err().exit_code(), 3);
    let bad_step = cli(&[
        "predict",
        "--checkpoint",
        &model,
        "--manifest",
        &manifest,
        "--out",
        &preds,
        "--step",
        "64",
    ]);
    assert_eq!(bad_step.unwrap_err().exit_code(), 2);
}

#[test]
fn cli_rejects_unknown_flags() {
    let err = Cli::try_parse_from(["gpt-stain", "train", "--bogus"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
