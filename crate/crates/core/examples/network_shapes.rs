//! Prints the stage ledger and parameter count of each network preset,
//! then runs a forward pass of the tiny model.
//!
//! ```bash
//! cargo run --example network_shapes
//! ```

use gpt_stain::network::{Network, NetworkConfig};
use gpt_stain::params::Mode;
use gpt_stain::{Shape, Tensor};

fn main() -> gpt_stain::Result<()> {
    for name in ["default", "tiny", "gradcheck"] {
        let config = NetworkConfig::preset(name)?;
        println!("{name}: {} trainable scalars", config.parameter_count());
        for row in config.ledger() {
            println!(
                "  {:<9} {:>4} x {:<4} {:>5} channels",
                row.stage, row.spatial, row.spatial, row.channels
            );
        }
    }

    let config = NetworkConfig::tiny();
    let net = Network::<f32>::new(config.clone(), 0)?;
    let p = config.patch;
    let input = Tensor::from_fn(
        Shape::new(1, p, p, config.network_input_channels()),
        |_, y, x, c| ((y + 2 * x + c) % 16) as f32 / 16.0,
    );
    let logits = net.forward(&input, Mode::Eval, 0)?;
    println!("tiny forward: {} -> {}", input.shape(), logits.shape());
    Ok(())
}
