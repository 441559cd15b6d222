//! Dense blocks: each layer sees the concatenation of the block input and
//! every earlier layer's output, and contributes `growth` new maps.
//!
//! Layer `l` (1-based) reads `C0 + (l-1)*growth` channels and applies
//! 3x3 conv -> batch norm -> ReLU -> dropout, in that order. After the last
//! layer the `C0 + L*growth` concatenated maps go through a bare 1x1
//! convolution (no norm, no activation) to reach the block's output width.
//! Dropout is the final op of a layer and is applied before its output is
//! concatenated.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BatchNormParams, BnUpdate, Bound, ConvParams, ConvVars, Mode, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub use crate::tensor::concat_channels;

/// Growth rate used throughout the network.
pub const DEFAULT_GROWTH: usize = 16;

/// Channel count entering the trailing 1x1 convolution.
pub const fn concat_width(c0: usize, layers: usize, growth: usize) -> usize {
    c0 + layers * growth
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams<T: Scalar = f32> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseBlockParams<T: Scalar = f32> {
    pub input_channels: usize,
    pub growth: usize,
    pub dropout: f64,
    pub layers: Vec<DenseLayerParams<T>>,
    /// Trailing 1x1 convolution, `C0 + L*growth -> C_out`.
    pub out: ConvParams<T>,
}

impl<T: Scalar> DenseBlockParams<T> {
    pub fn init(
        c0: usize,
        layers: usize,
        growth: usize,
        cout: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| DenseLayerParams {
                conv: ConvParams::he(3, c0 + l * growth, growth, rng),
                bn: BatchNormParams::new(growth),
            })
            .collect::<Vec<_>>();
        let out = ConvParams::he(1, concat_width(c0, layers.len(), growth), cout, rng);
        DenseBlockParams {
            input_channels: c0,
            growth,
            dropout,
            layers,
            out,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn concat_channels(&self) -> usize {
        concat_width(self.input_channels, self.depth(), self.growth)
    }

    pub fn output_channels(&self) -> usize {
        self.out.cout()
    }

    pub(crate) fn insert(&self, set: &mut ParamSet<T>, prefix: &str) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.conv.insert(set, &format!("{prefix}.layer{l}.conv"));
            layer.bn.insert(set, &format!("{prefix}.layer{l}.bn"));
        }
        self.out.insert(set, &format!("{prefix}.out"));
    }

    /// Binds this block's parameters under `prefix` on a fresh bound set.
    pub fn bind(&self, tape: &mut Tape<T>, prefix: &str, train: bool) -> (Bound, DenseVars) {
        let mut set = ParamSet::new();
        self.insert(&mut set, prefix);
        let bound = set.bind(tape, train);
        let vars =
            DenseVars::from_bound(&bound, prefix, self.depth(), self.dropout).expect("names inserted above");
        (bound, vars)
    }
}

/// Tape handles of one dense layer.
#[derive(Clone, Debug)]
pub struct DenseLayerVars {
    pub prefix: String,
    pub conv: ConvVars,
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

/// Tape handles of a dense block.
#[derive(Clone, Debug)]
pub struct DenseVars {
    pub layers: Vec<DenseLayerVars>,
    pub out: ConvVars,
    pub dropout: f64,
}

impl DenseVars {
    pub fn from_bound(bound: &Bound, prefix: &str, depth: usize, dropout: f64) -> Result<Self> {
        let layers = (0..depth)
            .map(|l| {
                let bn = format!("{prefix}.layer{l}.bn");
                Ok(DenseLayerVars {
                    conv: bound.conv(&format!("{prefix}.layer{l}.conv"))?,
                    gamma: bound.var(&format!("{bn}.gamma"))?,
                    beta: bound.var(&format!("{bn}.beta"))?,
                    running_mean: bound.var(&format!("{bn}.running_mean"))?,
                    running_var: bound.var(&format!("{bn}.running_var"))?,
                    prefix: bn,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DenseVars {
            layers,
            out: bound.conv(&format!("{prefix}.out"))?,
            dropout,
        })
    }
}

/// Records a dense block on `tape`. In training mode the batch statistics
/// of every batch norm are appended to `bn_updates`.
pub fn dense_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &DenseVars,
    mode: Mode,
    bn_updates: &mut Vec<BnUpdate<T>>,
) -> Result<Var> {
    let mut features = vec![x];
    for layer in &p.layers {
        let input = if features.len() == 1 {
            x
        } else {
            tape.concat(&features)?
        };
        let expected = tape.value(layer.conv.weight).shape().w;
        let got = tape.value(input).shape().c;
        if expected != got {
            return Err(Error::ChannelMismatch {
                op: "dense_block",
                expected,
                found: got,
            });
        }
        let h = tape.conv2d(input, layer.conv.weight, Some(layer.conv.bias), 1)?;
        let h = match mode {
            Mode::Train => {
                let (y, stats) =
                    tape.batch_norm_train(h, layer.gamma, layer.beta, BatchNormParams::<T>::EPS)?;
                bn_updates.push(BnUpdate {
                    prefix: layer.prefix.clone(),
                    stats,
                });
                y
            }
            Mode::Eval => {
                let mean = tape.value(layer.running_mean).data().to_vec();
                let var = tape.value(layer.running_var).data().to_vec();
                tape.batch_norm_eval(h, layer.gamma, layer.beta, &mean, &var, BatchNormParams::<T>::EPS)?
            }
        };
        let h = tape.relu(h)?;
        let h = match mode {
            Mode::Train => tape.dropout(h, p.dropout)?,
            Mode::Eval => h,
        };
        features.push(h);
    }
    let all = if features.len() == 1 {
        x
    } else {
        tape.concat(&features)?
    };
    let expected = tape.value(p.out.weight).shape().w;
    let got = tape.value(all).shape().c;
    if expected != got {
        return Err(Error::ChannelMismatch {
            op: "dense_block output",
            expected,
            found: got,
        });
    }
    tape.conv2d(all, p.out.weight, Some(p.out.bias), 1)
}

/// Runs one dense block outside a training graph. `seed` drives dropout
/// in training mode.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &DenseBlockParams<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    if input.shape().c != params.input_channels {
        return Err(Error::ChannelMismatch {
            op: "dense_forward",
            expected: params.input_channels,
            found: input.shape().c,
        });
    }
    let mut tape = Tape::new(seed);
    let x = tape.input(input.clone());
    let (_, vars) = params.bind(&mut tape, "block", false);
    let mut updates = Vec::new();
    let y = dense_block(&mut tape, x, &vars, mode, &mut updates)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(c: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(2, 6, 5, c), |n, h, w, ch| {
            ((n * 31 + h * 7 + w * 3 + ch) as f32 * 0.37).sin()
        })
    }

    #[test]
    fn table_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (c0, l, out) in [(32, 2, 64), (64, 4, 128), (128, 8, 256), (256, 8, 384)] {
            let p = DenseBlockParams::<f32>::init(c0, l, 16, out, 0.5, &mut rng);
            assert_eq!(p.concat_channels(), out);
            assert_eq!(p.out.cin(), out);
        }
    }

    #[test]
    fn empty_block_is_plain_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DenseBlockParams::<f32>::init(3, 0, 16, 5, 0.5, &mut rng);
        let x = input(3);
        let y = dense_forward(&x, &p, Mode::Train, 0).unwrap();
        let direct = crate::tensor::conv2d(&x, &p.out.weight, Some(&p.out.bias), 1).unwrap();
        assert_eq!(y, direct);
    }

    #[test]
    fn spatial_size_preserved_and_eval_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = DenseBlockParams::<f32>::init(4, 3, 2, 7, 0.5, &mut rng);
        let x = input(4);
        let a = dense_forward(&x, &p, Mode::Eval, 1).unwrap();
        let b = dense_forward(&x, &p, Mode::Eval, 2).unwrap();
        assert_eq!(a.shape(), Shape::new(2, 6, 5, 7));
        assert_eq!(a, b);
        let t1 = dense_forward(&x, &p, Mode::Train, 9).unwrap();
        let t2 = dense_forward(&x, &p, Mode::Train, 9).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, dense_forward(&x, &p, Mode::Train, 10).unwrap());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DenseBlockParams::<f32>::init(4, 1, 2, 7, 0.5, &mut rng);
        assert!(matches!(
            dense_forward(&input(3), &p, Mode::Eval, 0),
            Err(Error::ChannelMismatch { .. })
        ));
    }
}
