//! Saves a network to a checkpoint, loads it back and confirms the
//! restored model computes bit-identical outputs.
//!
//! ```bash
//! cargo run --example checkpoint_roundtrip
//! ```

use gpt_stain::checkpoint::Checkpoint;
use gpt_stain::network::{Network, NetworkConfig};
use gpt_stain::params::Mode;
use gpt_stain::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.gptc");

    let net = Network::<f32>::new(NetworkConfig::tiny(), 42)?;
    Checkpoint::from_network(&net).save(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    let restored: Network<f32> = Checkpoint::load(&path)?.network()?;

    let p = net.config.patch;
    let x = Tensor::from_fn(Shape::new(1, p, p, 3), |_, y, x, c| {
        ((y * 7 + x + c) % 13) as f32 / 13.0
    });
    let a = net.forward(&x, Mode::Eval, 0)?;
    let b = restored.forward(&x, Mode::Eval, 0)?;
    println!(
        "checkpoint {} ({bytes} bytes, {} tensors)",
        path.display(),
        net.params.len()
    );
    println!("outputs identical after reload: {}", a == b);
    Ok(())
}
