//! Writes a small synthetic dataset and summarizes what was rendered.
//!
//! ```bash
//! cargo run --example synthetic_data -- [out_dir]
//! ```

use std::path::PathBuf;

use gpt_stain::data_io::{validate_manifest, write_synthetic_dataset, SynthOptions, TaskRule};

fn main() -> gpt_stain::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("gpt_stain_synth"), PathBuf::from);
    let opts = SynthOptions {
        samples: 6,
        size: 96,
        seed: 11,
        task_count: 4,
        tasks: vec![0, 1, 2, 3],
        test_every: 3,
        partial_labels: true,
    };
    let manifest = write_synthetic_dataset(&out, &opts)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    for t in 0..opts.task_count {
        println!("  task {t}: {:?}", TaskRule::for_task(t));
    }
    for s in &manifest.samples {
        let tasks: Vec<_> = s.tasks().map(|(t, _)| t).collect();
        println!("  {} ({:?}) labeled tasks {tasks:?}", s.id, s.split);
    }
    let issues = validate_manifest(&manifest);
    println!("manifest issues: {}", issues.len());
    Ok(())
}
