//! Predicts a whole image with overlapping windows and renders each task.
//!
//! ```bash
//! cargo run --example sliding_window -- [out_dir]
//! ```

use std::path::PathBuf;

use gpt_stain::data_io::{generate_synthetic, write_pgm, SyntheticSceneSpec};
use gpt_stain::inference::{coverage_map, predict_image, windows};
use gpt_stain::network::{Network, NetworkConfig, Reduction};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("gpt_stain_tiles"), PathBuf::from);
    std::fs::create_dir_all(&out)?;

    let (size, patch, step) = (80, 32, 16);
    let corners = windows(size, size, patch, step)?;
    let coverage = coverage_map(size, size, patch, step)?;
    println!(
        "{size}x{size} image, patch {patch}, step {step}: {} windows, coverage {}..={}",
        corners.len(),
        coverage.iter().min().unwrap(),
        coverage.iter().max().unwrap()
    );

    // An untrained network; the point is the tiling, not the picture.
    let net = Network::<f32>::new(NetworkConfig::tiny(), 0)?;
    let sample = generate_synthetic(&SyntheticSceneSpec::new(size, 2, 5))?;
    let prediction = predict_image(&net, &sample.input.to_tensor(), step)?;
    let worst = prediction
        .distributions
        .data()
        .chunks(prediction.value_classes)
        .map(|d| (d.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!("largest deviation of a merged distribution from unit mass: {worst:.2e}");
    for task in 0..prediction.task_count {
        for r in [Reduction::Argmax, Reduction::Expectation] {
            let path = out.join(format!("task{task}_{}.pgm", r.name()));
            write_pgm(&path, &prediction.render(task, r)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
