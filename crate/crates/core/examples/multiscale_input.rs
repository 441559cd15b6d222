//! Cuts the three-scale input for a patch near the image border, where
//! the context window has to be completed by reflection.
//!
//! ```bash
//! cargo run --example multiscale_input
//! ```

use gpt_stain::data_io::{generate_synthetic, SyntheticSceneSpec};
use gpt_stain::multiscale::{extract_multiscale, normalize_intensity, PatchSpec};
use gpt_stain::tensor::slice_channels;

fn main() -> gpt_stain::Result<()> {
    let sample = generate_synthetic(&SyntheticSceneSpec::new(96, 1, 4))?;
    let image = normalize_intensity(&sample.input.to_tensor());

    for spec in [PatchSpec::new(48, 48, 32)?, PatchSpec::at_top_left(0, 0, 32)?] {
        let input = extract_multiscale(&image, spec)?;
        println!(
            "patch centered at ({}, {}): {}",
            spec.row,
            spec.col,
            input.shape()
        );
        for (c, scale) in ["X0 (window)", "X1 (2x context)", "X2 (1/2 detail)"]
            .iter()
            .enumerate()
        {
            let ch = slice_channels(&input, c, 1)?;
            let d = ch.data();
            let mean = d.iter().sum::<f32>() / d.len() as f32;
            let (lo, hi) = d
                .iter()
                .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            println!("  {scale:<16} mean {mean:.3}  range [{lo:.3}, {hi:.3}]");
        }
    }
    Ok(())
}
