//! Runs the three GPT layer variants on a random feature map and checks
//! that every output is a convex combination of the value features.
//!
//! ```bash
//! cargo run --example attention_layers
//! ```

use gpt_stain::gpt_layer::{gpt_forward, GptLayerParams, GptVariant};
use gpt_stain::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gpt_stain::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = Tensor::<f32>::from_fn(Shape::new(1, 8, 8, 6), |_, _, _, _| rng.random_range(-1.0..1.0));

    for variant in [GptVariant::Down, GptVariant::Same, GptVariant::Up] {
        let params = GptLayerParams::<f32>::init_default(variant, 6, &mut rng);
        let out = gpt_forward(&input, &params)?;

        // Value features at every input position bound each output channel.
        let values = gpt_stain::tensor::conv2d(&input, &params.value.weight, Some(&params.value.bias), 1)?;
        let cv = params.cv();
        let mut inside = true;
        for c in 0..cv {
            let column = values.data().iter().skip(c).step_by(cv);
            let (lo, hi) = column.fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            inside &= out
                .data()
                .iter()
                .skip(c)
                .step_by(cv)
                .all(|&o| o >= lo - 1e-6 && o <= hi + 1e-6);
        }
        println!(
            "{}: {} -> {}  (C_Q = {}, C_V = {}, outputs within value range: {inside})",
            variant.short_name(),
            input.shape(),
            out.shape(),
            params.cq(),
            cv,
        );
    }
    Ok(())
}
