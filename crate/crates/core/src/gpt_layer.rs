//! Global pixel transformer layers.
//!
//! A layer maps an input feature map `I` (H x W x C_in) to three tensors:
//! a query tensor from a *generator*, and key / value tensors from 1x1
//! convolutions of `I`. All three are unfolded along the channel mode into
//! `C x positions` matrices and combined as
//!
//! ```text
//! O = V * softmax_cols(K^T Q)
//! ```
//!
//! so every output position is a convex combination of the value vectors at
//! *all* input positions. The output grid is the query grid, which is what
//! makes the layer a resampler:
//!
//! | variant | generator                      | output size          |
//! |---------|--------------------------------|----------------------|
//! | Down    | 3x3 conv, stride 2, same pad   | ceil(H/2) x ceil(W/2)|
//! | Same    | 3x3 conv, stride 1, same pad   | H x W                |
//! | Up      | 3x3 transposed conv, stride 2  | 2H x 2W              |
//!
//! No `1/sqrt(d)` scaling is applied to the logits. Generator, key and value
//! convolutions all carry biases. "Same" padding for the generator is the
//! only choice that gives the 128 -> 64 -> 32 -> 16 ladder of the network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ConvParams, ConvVars, ParamSet};
use crate::tensor::{col_softmax, col_softmax_backward, matmul, Matrix, Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GptVariant {
    /// Halves the spatial extents (GDT).
    Down,
    /// Keeps the spatial extents (GST).
    Same,
    /// Doubles the spatial extents (GUT).
    Up,
}

impl GptVariant {
    pub fn output_size(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            GptVariant::Down => (h.div_ceil(2), w.div_ceil(2)),
            GptVariant::Same => (h, w),
            GptVariant::Up => (2 * h, 2 * w),
        }
    }

    /// Query/key width used when none is configured: `max(C_in / 2, 1)`.
    pub fn default_query_channels(cin: usize) -> usize {
        (cin / 2).max(1)
    }

    /// Output width used when none is configured: down / same layers keep
    /// `C_in`, up layers halve it (rounding up).
    pub fn default_value_channels(self, cin: usize) -> usize {
        match self {
            GptVariant::Down | GptVariant::Same => cin,
            GptVariant::Up => cin.div_ceil(2),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            GptVariant::Down => "GDT",
            GptVariant::Same => "GST",
            GptVariant::Up => "GUT",
        }
    }
}

/// Parameters of one GPT layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GptLayerParams<T: Scalar = f32> {
    pub variant: GptVariant,
    /// 3x3 query generator, `C_in -> C_Q`.
    pub generator: ConvParams<T>,
    /// 1x1 key convolution, `C_in -> C_K` with `C_K == C_Q`.
    pub key: ConvParams<T>,
    /// 1x1 value convolution, `C_in -> C_V`.
    pub value: ConvParams<T>,
}

impl<T: Scalar> GptLayerParams<T> {
    pub fn init(variant: GptVariant, cin: usize, cq: usize, cv: usize, rng: &mut impl Rng) -> Self {
        GptLayerParams {
            variant,
            generator: ConvParams::he(3, cin, cq, rng),
            key: ConvParams::he(1, cin, cq, rng),
            value: ConvParams::he(1, cin, cv, rng),
        }
    }

    /// Initialization with the default query and value widths.
    pub fn init_default(variant: GptVariant, cin: usize, rng: &mut impl Rng) -> Self {
        Self::init(
            variant,
            cin,
            GptVariant::default_query_channels(cin),
            variant.default_value_channels(cin),
            rng,
        )
    }

    pub fn cin(&self) -> usize {
        self.key.cin()
    }
    pub fn cq(&self) -> usize {
        self.generator.cout()
    }
    pub fn ck(&self) -> usize {
        self.key.cout()
    }
    pub fn cv(&self) -> usize {
        self.value.cout()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ck() != self.cq() {
            return Err(Error::ChannelMismatch {
                op: "gpt_layer key/query",
                expected: self.cq(),
                found: self.ck(),
            });
        }
        if self.generator.kernel() != 3 || self.key.kernel() != 1 || self.value.kernel() != 1 {
            return Err(Error::InvalidConfig(
                "gpt layer expects a 3x3 generator and 1x1 key/value".into(),
            ));
        }
        let cin = self.cin();
        if self.generator.cin() != cin || self.value.cin() != cin {
            return Err(Error::ChannelMismatch {
                op: "gpt_layer input",
                expected: cin,
                found: self.generator.cin(),
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> GptVars {
        GptVars {
            variant: self.variant,
            generator: self.generator.bind(tape, requires_grad),
            key: self.key.bind(tape, requires_grad),
            value: self.value.bind(tape, requires_grad),
        }
    }

    pub(crate) fn insert(&self, set: &mut ParamSet<T>, prefix: &str) {
        self.generator.insert(set, &format!("{prefix}.query"));
        self.key.insert(set, &format!("{prefix}.key"));
        self.value.insert(set, &format!("{prefix}.value"));
    }
}

/// Tape handles of a bound GPT layer.
#[derive(Clone, Copy, Debug)]
pub struct GptVars {
    pub variant: GptVariant,
    pub generator: ConvVars,
    pub key: ConvVars,
    pub value: ConvVars,
}

impl GptVars {
    pub fn from_bound(bound: &crate::params::Bound, prefix: &str, variant: GptVariant) -> Result<Self> {
        Ok(GptVars {
            variant,
            generator: bound.conv(&format!("{prefix}.query"))?,
            key: bound.conv(&format!("{prefix}.key"))?,
            value: bound.conv(&format!("{prefix}.value"))?,
        })
    }
}

/// `V * softmax_cols(K^T Q)` on mode-3 matrices: `Q` is `c x m`, `K` is
/// `c x n`, `V` is `d x n`; the result is `d x m`.
pub fn attention_core<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    check_attention(q, k, v)?;
    let weights = col_softmax(&matmul(&k.transpose(), q)?)?;
    matmul(v, &weights)
}

fn check_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if k.rows != q.rows {
        return Err(Error::dims(
            "attention_core",
            format!("key rows {} vs query rows {}", k.rows, q.rows),
        ));
    }
    if k.cols != v.cols {
        return Err(Error::dims(
            "attention_core",
            format!("key cols {} vs value cols {}", k.cols, v.cols),
        ));
    }
    Ok(())
}

/// Gradients of [`attention_core`] with respect to `(Q, K, V)` given the
/// output gradient `d_out` (`d x m`). Recomputes the attention weights.
pub fn attention_core_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    check_attention(q, k, v)?;
    let weights = col_softmax(&matmul(&k.transpose(), q)?)?;
    let dv = matmul(d_out, &weights.transpose())?;
    let dw = matmul(&v.transpose(), d_out)?;
    let ds = col_softmax_backward(&weights, &dw);
    let dq = matmul(k, &ds)?;
    let dk = matmul(q, &ds.transpose())?;
    Ok((dq, dk, dv))
}

/// Records a GPT layer on `tape`.
pub fn gpt_layer<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GptVars) -> Result<Var> {
    let cin = tape.value(x).shape().c;
    let expected = tape.value(p.key.weight).shape().w;
    if cin != expected {
        return Err(Error::ChannelMismatch {
            op: "gpt_layer",
            expected,
            found: cin,
        });
    }
    let q = match p.variant {
        GptVariant::Down => tape.conv2d(x, p.generator.weight, Some(p.generator.bias), 2)?,
        GptVariant::Same => tape.conv2d(x, p.generator.weight, Some(p.generator.bias), 1)?,
        GptVariant::Up => tape.deconv2d(x, p.generator.weight, Some(p.generator.bias))?,
    };
    let k = tape.conv2d(x, p.key.weight, Some(p.key.bias), 1)?;
    let v = tape.conv2d(x, p.value.weight, Some(p.value.bias), 1)?;
    tape.attention(q, k, v)
}

/// Forward pass of one GPT layer on an `(N, H, W, C_in)` input.
///
/// Attention runs independently per batch entry.
pub fn gpt_forward<T: Scalar>(input: &Tensor<T>, params: &GptLayerParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = Tape::new(0);
    let x = tape.input(input.clone());
    let vars = params.bind(&mut tape, false);
    let y = gpt_layer(&mut tape, x, &vars)?;
    Ok(tape.value(y).clone())
}
