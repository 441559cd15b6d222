//! Generates a small synthetic dataset and trains the tiny model on it.
//!
//! ```bash
//! cargo run --release --example train_synthetic -- [steps] [out_dir]
//! ```

use std::path::PathBuf;

use gpt_stain::data_io::{write_synthetic_dataset, SynthOptions};
use gpt_stain::network::NetworkConfig;
use gpt_stain::training::{train, RunOptions, TrainConfig};

fn main() -> gpt_stain::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("steps"));
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("gpt_stain_train"), PathBuf::from);

    let data = out.join("data");
    let manifest = write_synthetic_dataset(
        &data,
        &SynthOptions {
            samples: 4,
            size: 128,
            seed: 1,
            task_count: 2,
            tasks: vec![0, 1],
            test_every: 0,
            partial_labels: false,
        },
    )?;

    let config = TrainConfig {
        max_steps: steps,
        ..TrainConfig::tiny()
    };
    let summary = train(
        &manifest,
        &NetworkConfig::tiny(),
        &config,
        &RunOptions {
            out: out.join("run"),
            resume: None,
            verbose: false,
        },
    )?;

    let losses: Vec<f64> = summary.losses.iter().map(|r| r.loss).collect();
    let head = losses.iter().take(10).sum::<f64>() / losses.len().min(10) as f64;
    let tail = losses.iter().rev().take(10).sum::<f64>() / losses.len().min(10) as f64;
    for r in summary.losses.iter().step_by((losses.len() / 20).max(1)) {
        println!("step {:5}  loss {:.4}", r.step, r.loss);
    }
    println!(
        "first-10 mean {head:.4}, last-10 mean {tail:.4}, ratio {:.3}",
        tail / head
    );
    println!("checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}
