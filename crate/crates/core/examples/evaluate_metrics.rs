//! Scores a degraded copy of a synthetic target with the sampled Pearson
//! coefficient and the 10-bin confusion matrix.
//!
//! ```bash
//! cargo run --example evaluate_metrics
//! ```

use gpt_stain::data_io::{generate_synthetic, GrayImage, SyntheticSceneSpec};
use gpt_stain::evaluation::{EvalOptions, TaskReport};

fn main() -> gpt_stain::Result<()> {
    let truth: Vec<GrayImage> = (0..3)
        .map(|seed| {
            generate_synthetic(&SyntheticSceneSpec::new(64, 1, seed)).map(|s| s.targets[0].clone().unwrap())
        })
        .collect::<gpt_stain::Result<_>>()?;
    // Compress the dynamic range, add an offset and a fixed jitter pattern.
    let pred: Vec<GrayImage> = truth
        .iter()
        .map(|t| {
            let px = t
                .pixels
                .iter()
                .enumerate()
                .map(|(i, &v)| (v as i32 * 3 / 4 + 20 + (i * 37 % 41) as i32 - 20).clamp(0, 255) as u8)
                .collect();
            GrayImage::new(t.height, t.width, px)
        })
        .collect::<gpt_stain::Result<_>>()?;

    let opts = EvalOptions {
        sample_size: 2000,
        ..EvalOptions::default()
    };
    for (name, p) in [("perfect", &truth), ("degraded", &pred)] {
        let report = TaskReport::compute(0, p, &truth, &opts)?;
        let pearson = report.pearson.as_ref().expect("non-constant images");
        println!(
            "{name:<8} pearson {:.4} +- {:.4} over {} draws of {}, overall bin accuracy {:.3}",
            pearson.mean,
            pearson.std,
            pearson.repetitions,
            pearson.sample_size,
            report.overall_accuracy.unwrap_or(f64::NAN)
        );
    }
    let report = TaskReport::compute(0, &pred, &truth, &opts)?;
    println!("confusion matrix of the degraded prediction (rows: true bin):");
    print!("{}", report.confusion.to_csv());
    Ok(())
}
