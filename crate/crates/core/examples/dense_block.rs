//! Builds a dense block, prints how the concatenated width grows layer by
//! layer and runs it in training and evaluation mode.
//!
//! ```bash
//! cargo run --example dense_block
//! ```

use gpt_stain::dense_block::{concat_width, dense_forward, DenseBlockParams, DEFAULT_GROWTH};
use gpt_stain::params::Mode;
use gpt_stain::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gpt_stain::Result<()> {
    for (c0, layers) in [(32, 2), (64, 4), (128, 8), (256, 8)] {
        println!(
            "C0 = {c0:3}, L = {layers}: concatenation reaches {} channels",
            concat_width(c0, layers, DEFAULT_GROWTH)
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = DenseBlockParams::<f32>::init(8, 3, 4, 12, 0.5, &mut rng);
    for (l, layer) in block.layers.iter().enumerate() {
        println!(
            "layer {l}: reads {} channels, adds {}",
            layer.conv.cin(),
            layer.conv.cout()
        );
    }
    println!(
        "1x1 output conv: {} -> {}",
        block.concat_channels(),
        block.output_channels()
    );

    let x = Tensor::<f32>::from_fn(Shape::new(2, 16, 16, 8), |n, y, x, c| {
        ((n + y * 3 + x * 5 + c) % 7) as f32 / 7.0
    });
    let train = dense_forward(&x, &block, Mode::Train, 1)?;
    let eval = dense_forward(&x, &block, Mode::Eval, 1)?;
    let eval_again = dense_forward(&x, &block, Mode::Eval, 99)?;
    println!("train output {}, eval output {}", train.shape(), eval.shape());
    println!("evaluation ignores the dropout seed: {}", eval == eval_again);
    Ok(())
}
