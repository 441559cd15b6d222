//! The full U-shaped model.
//!
//! ```text
//! input (P, P, 3*C_img)
//!   stem      1x1 conv                          -> stem
//!   encoder i DB(enc_depth[i]) -> enc_ch[i]     at P / 2^i
//!             GDT                               -> P / 2^(i+1)
//!   bottom    DB(bottom_depth) -> bottom_ch, GST
//!   decoder i GUT (C_V = ceil(C/2))             -> doubles spatial size
//!             concat skip, DB(dec_depth[i])     -> dec_ch[i]
//!   head      1x1 conv                          -> T * V logits
//! ```
//!
//! Skip sources, from the bottom up: the second encoder GDT output, the
//! first encoder GDT output and the first encoder dense-block output (the
//! only full-resolution encoder activation).
//!
//! Parameter names:
//!
//! | prefix                      | content                                   |
//! |-----------------------------|-------------------------------------------|
//! | `stem.conv`                 | 1x1 input convolution                     |
//! | `enc{i}.db.layer{l}.conv`   | 3x3 dense-layer convolution               |
//! | `enc{i}.db.layer{l}.bn`     | batch norm (`gamma`, `beta`, running stats) |
//! | `enc{i}.db.out`             | trailing 1x1 convolution                  |
//! | `enc{i}.gdt.{query,key,value}` | GPT down layer                         |
//! | `bottom.db.*`, `bottom.gst.*` | bottom block and GPT same layer         |
//! | `dec{i}.gut.*`, `dec{i}.db.*` | GPT up layer and decoder block          |
//! | `head.conv`                 | output logits                             |
//!
//! Convolutions carry `.weight` `(k, k, C_in, C_out)` and `.bias`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dense_block::{dense_block, DenseBlockParams, DenseVars};
use crate::error::{Error, Result};
use crate::gpt_layer::{gpt_layer, GptLayerParams, GptVariant, GptVars};
use crate::params::{BnUpdate, Bound, ConvParams, Mode, ParamSet};
use crate::tensor::{softmax_groups, Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Raw image channels; the network sees three scales of each.
    pub input_channels: usize,
    pub task_count: usize,
    pub value_classes: usize,
    pub patch: usize,
    pub growth: usize,
    pub stem_channels: usize,
    pub encoder_depths: [usize; 3],
    pub encoder_channels: [usize; 3],
    pub bottom_depth: usize,
    pub bottom_channels: usize,
    pub decoder_depths: [usize; 3],
    pub decoder_channels: [usize; 3],
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 1,
            task_count: 8,
            value_classes: 256,
            patch: 128,
            growth: 16,
            stem_channels: 32,
            encoder_depths: [2, 4, 8],
            encoder_channels: [64, 128, 256],
            bottom_depth: 8,
            bottom_channels: 384,
            decoder_depths: [4, 2, 1],
            decoder_channels: [288, 165, 90],
            dropout: 0.5,
        }
    }
}

impl NetworkConfig {
    /// A small model for desk-scale training runs on 32x32 patches.
    pub fn tiny() -> Self {
        NetworkConfig {
            input_channels: 1,
            task_count: 2,
            value_classes: 256,
            patch: 32,
            growth: 4,
            stem_channels: 8,
            encoder_depths: [1, 1, 1],
            encoder_channels: [12, 16, 20],
            bottom_depth: 1,
            bottom_channels: 24,
            decoder_depths: [1, 1, 1],
            decoder_channels: [20, 16, 12],
            dropout: 0.5,
        }
    }

    /// The smallest useful model, sized for finite-difference checks.
    pub fn gradcheck() -> Self {
        NetworkConfig {
            input_channels: 1,
            task_count: 2,
            value_classes: 4,
            patch: 16,
            growth: 2,
            stem_channels: 4,
            encoder_depths: [1, 1, 1],
            encoder_channels: [4, 6, 8],
            bottom_depth: 1,
            bottom_channels: 8,
            decoder_depths: [1, 1, 1],
            decoder_channels: [6, 5, 4],
            dropout: 0.5,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            "gradcheck" => Ok(Self::gradcheck()),
            other => Err(Error::InvalidArgument(format!(
                "unknown network preset {other:?} (expected default, tiny or gradcheck)"
            ))),
        }
    }

    /// Channels of the multi-scale network input.
    pub fn network_input_channels(&self) -> usize {
        3 * self.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.task_count * self.value_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch < 8 || !self.patch.is_multiple_of(8) {
            return bad(format!("patch {} must be a positive multiple of 8", self.patch));
        }
        if self.input_channels == 0 || self.task_count == 0 {
            return bad("input_channels and task_count must be positive".into());
        }
        if !(2..=256).contains(&self.value_classes) {
            return bad(format!("value_classes {} outside 2..=256", self.value_classes));
        }
        if self.growth == 0 {
            return bad("growth must be positive".into());
        }
        let widths = [self.stem_channels, self.bottom_channels]
            .into_iter()
            .chain(self.encoder_channels)
            .chain(self.decoder_channels);
        if widths.into_iter().any(|c| c == 0) {
            return bad("stage channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Analytic stage ledger: spatial size and channel count after each
    /// stage, for a `patch x patch` input.
    pub fn ledger(&self) -> Vec<StageShape> {
        let p = self.patch;
        let mut rows = vec![StageShape::new("stem", p, self.stem_channels)];
        for i in 0..3 {
            rows.push(StageShape::new(
                ["encoder0", "encoder1", "encoder2"][i],
                p >> (i + 1),
                self.encoder_channels[i],
            ));
        }
        rows.push(StageShape::new("bottom", p / 8, self.bottom_channels));
        for i in 0..3 {
            rows.push(StageShape::new(
                ["decoder0", "decoder1", "decoder2"][i],
                p >> (2 - i),
                self.decoder_channels[i],
            ));
        }
        rows.push(StageShape::new("head", p, self.output_channels()));
        rows
    }

    /// Input width of each decoder dense block: GUT output plus skip.
    pub fn decoder_block_inputs(&self) -> [usize; 3] {
        let skips = self.skip_channels();
        let mut c = self.bottom_channels;
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = GptVariant::Up.default_value_channels(c) + skips[i];
            c = self.decoder_channels[i];
        }
        out
    }

    /// Channel count of the skip merged into each decoder stage.
    pub fn skip_channels(&self) -> [usize; 3] {
        [
            self.encoder_channels[1],
            self.encoder_channels[0],
            self.encoder_channels[0],
        ]
    }

    /// Number of trainable scalars, computed without allocating.
    pub fn parameter_count(&self) -> usize {
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
        let block = |c0: usize, depth: usize, cout: usize| {
            let layers: usize = (0..depth)
                .map(|l| conv(3, c0 + l * self.growth, self.growth) + 2 * self.growth)
                .sum();
            layers + conv(1, c0 + depth * self.growth, cout)
        };
        let gpt = |variant: GptVariant, cin: usize| {
            let cq = GptVariant::default_query_channels(cin);
            conv(3, cin, cq) + conv(1, cin, cq) + conv(1, cin, variant.default_value_channels(cin))
        };
        let mut total = conv(1, self.network_input_channels(), self.stem_channels);
        let mut c = self.stem_channels;
        for i in 0..3 {
            total += block(c, self.encoder_depths[i], self.encoder_channels[i]);
            c = self.encoder_channels[i];
            total += gpt(GptVariant::Down, c);
        }
        total += block(c, self.bottom_depth, self.bottom_channels);
        total += gpt(GptVariant::Same, self.bottom_channels);
        c = self.bottom_channels;
        let inputs = self.decoder_block_inputs();
        for i in 0..3 {
            total += gpt(GptVariant::Up, c);
            total += block(inputs[i], self.decoder_depths[i], self.decoder_channels[i]);
            c = self.decoder_channels[i];
        }
        total + conv(1, c, self.output_channels())
    }
}

/// One row of the stage ledger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub stage: String,
    pub spatial: usize,
    pub channels: usize,
}

impl StageShape {
    fn new(stage: &str, spatial: usize, channels: usize) -> Self {
        StageShape {
            stage: stage.to_string(),
            spatial,
            channels,
        }
    }
}

const ENC: [&str; 3] = ["enc0", "enc1", "enc2"];
const DEC: [&str; 3] = ["dec0", "dec1", "dec2"];

/// Allocates every parameter of `config` in a fixed order from `rng`.
pub fn build<T: Scalar>(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut set = ParamSet::new();
    ConvParams::<T>::he(1, config.network_input_channels(), config.stem_channels, rng)
        .insert(&mut set, "stem.conv");
    let mut c = config.stem_channels;
    for i in 0..3 {
        let db = DenseBlockParams::<T>::init(
            c,
            config.encoder_depths[i],
            config.growth,
            config.encoder_channels[i],
            config.dropout,
            rng,
        );
        db.insert(&mut set, &format!("{}.db", ENC[i]));
        c = config.encoder_channels[i];
        GptLayerParams::<T>::init_default(GptVariant::Down, c, rng)
            .insert(&mut set, &format!("{}.gdt", ENC[i]));
    }
    DenseBlockParams::<T>::init(
        c,
        config.bottom_depth,
        config.growth,
        config.bottom_channels,
        config.dropout,
        rng,
    )
    .insert(&mut set, "bottom.db");
    c = config.bottom_channels;
    GptLayerParams::<T>::init_default(GptVariant::Same, c, rng).insert(&mut set, "bottom.gst");
    let inputs = config.decoder_block_inputs();
    for i in 0..3 {
        GptLayerParams::<T>::init_default(GptVariant::Up, c, rng)
            .insert(&mut set, &format!("{}.gut", DEC[i]));
        DenseBlockParams::<T>::init(
            inputs[i],
            config.decoder_depths[i],
            config.growth,
            config.decoder_channels[i],
            config.dropout,
            rng,
        )
        .insert(&mut set, &format!("{}.db", DEC[i]));
        c = config.decoder_channels[i];
    }
    ConvParams::<T>::he(1, c, config.output_channels(), rng).insert(&mut set, "head.conv");
    debug_assert_eq!(set.trainable_count(), config.parameter_count());
    Ok(set)
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    pub config: NetworkConfig,
    pub params: ParamSet<T>,
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct Forward<T> {
    pub logits: Var,
    pub bound: Bound,
    /// Batch statistics from training-mode batch norms.
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Observed output shape after each ledger stage.
    pub stages: Vec<StageShape>,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build(&config, &mut rng)?;
        Ok(Network { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference = build::<T>(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t, kind) in reference.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks {name}")))?;
            if got.shape() != t.shape() || params.kind(name) != Some(kind) {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name}: expected {} found {}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        if params.len() != reference.len() {
            return Err(Error::InvalidConfig(format!(
                "{} parameters for a config with {}",
                params.len(),
                reference.len()
            )));
        }
        Ok(Network { config, params })
    }

    /// Binds parameters and records a forward pass of `x`.
    pub fn record(&self, tape: &mut Tape<T>, x: Var, mode: Mode, train: bool) -> Result<Forward<T>> {
        let bound = self.params.bind(tape, train);
        forward(tape, &self.config, bound, x, mode)
    }

    /// Logits for an `(N, P, P, 3*C_img)` batch. `seed` only matters in
    /// training mode, where it drives dropout.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        let mut tape = Tape::new(seed);
        let x = tape.input(input.clone());
        let f = self.record(&mut tape, x, mode, false)?;
        Ok(tape.value(f.logits).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Records the network on `tape` using the handles in `bound`, which may
/// have had individual entries replaced (see [`Bound::set`]).
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    config: &NetworkConfig,
    bound: Bound,
    x: Var,
    mode: Mode,
) -> Result<Forward<T>> {
    let s = tape.value(x).shape();
    if s.h != config.patch || s.w != config.patch {
        return Err(Error::dims(
            "network forward",
            format!("input {s} for patch size {}", config.patch),
        ));
    }
    if s.c != config.network_input_channels() {
        return Err(Error::ChannelMismatch {
            op: "network forward",
            expected: config.network_input_channels(),
            found: s.c,
        });
    }
    let mut updates = Vec::new();
    let mut stages = Vec::with_capacity(9);
    let mut note = |tape: &Tape<T>, name: &str, v: Var| {
        let s = tape.value(v).shape();
        stages.push(StageShape::new(name, s.h, s.c));
    };
    let block = |tape: &mut Tape<T>, x: Var, prefix: &str, depth: usize, u: &mut Vec<_>| {
        let vars = DenseVars::from_bound(&bound, prefix, depth, config.dropout)?;
        dense_block(tape, x, &vars, mode, u)
    };
    let gpt = |tape: &mut Tape<T>, x: Var, prefix: &str, variant| {
        let vars = GptVars::from_bound(&bound, prefix, variant)?;
        gpt_layer(tape, x, &vars)
    };

    let stem = bound.conv("stem.conv")?;
    let mut h = tape.conv2d(x, stem.weight, Some(stem.bias), 1)?;
    note(tape, "stem", h);

    let mut skips = Vec::with_capacity(3);
    for i in 0..3 {
        h = block(
            tape,
            h,
            &format!("{}.db", ENC[i]),
            config.encoder_depths[i],
            &mut updates,
        )?;
        if i == 0 {
            skips.push(h);
        }
        h = gpt(tape, h, &format!("{}.gdt", ENC[i]), GptVariant::Down)?;
        if i < 2 {
            skips.push(h);
        }
        note(tape, ["encoder0", "encoder1", "encoder2"][i], h);
    }

    h = block(tape, h, "bottom.db", config.bottom_depth, &mut updates)?;
    h = gpt(tape, h, "bottom.gst", GptVariant::Same)?;
    note(tape, "bottom", h);

    for i in 0..3 {
        h = gpt(tape, h, &format!("{}.gut", DEC[i]), GptVariant::Up)?;
        let skip = skips.pop().expect("three skips");
        h = tape.concat(&[h, skip])?;
        h = block(
            tape,
            h,
            &format!("{}.db", DEC[i]),
            config.decoder_depths[i],
            &mut updates,
        )?;
        note(tape, ["decoder0", "decoder1", "decoder2"][i], h);
    }

    let head = bound.conv("head.conv")?;
    let logits = tape.conv2d(h, head.weight, Some(head.bias), 1)?;
    note(tape, "head", logits);
    Ok(Forward {
        logits,
        bound,
        bn_updates: updates,
        stages,
    })
}

/// Softmax over the class axis of every `(pixel, task)` cell. The result
/// keeps the logits layout `(N, H, W, T*V)`, class innermost.
pub fn predict_distributions<T: Scalar>(logits: &Tensor<T>, value_classes: usize) -> Result<Tensor<T>> {
    let s = logits.shape();
    if value_classes == 0 || !s.c.is_multiple_of(value_classes) {
        return Err(Error::dims(
            "predict_distributions",
            format!("{} channels are not a multiple of {value_classes}", s.c),
        ));
    }
    let wide: Vec<f64> = logits.data().iter().map(|v| v.to_f64_lossy()).collect();
    let probs = softmax_groups(&wide, value_classes);
    Tensor::new(s, probs.into_iter().map(T::from_f64_lossy).collect())
}

/// How a distribution over intensity classes becomes one pixel value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Most probable class; ties go to the lower class.
    Argmax,
    /// `sum_i i * p_i`, rounded half up.
    Expectation,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Argmax => "argmax",
            Reduction::Expectation => "expectation",
        }
    }

    pub fn reduce<T: Scalar>(self, probs: &[T]) -> u8 {
        let v = match self {
            Reduction::Argmax => {
                let mut best = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                best as f64
            }
            Reduction::Expectation => {
                let e: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| i as f64 * p.to_f64_lossy())
                    .sum();
                (e + 0.5).floor()
            }
        };
        v.clamp(0.0, 255.0) as u8
    }
}

/// Renders task `task` of a distribution tensor as an `(N, H, W, 1)` image
/// with integer values in `0..=255`.
pub fn distributions_to_image<T: Scalar>(
    probs: &Tensor<T>,
    value_classes: usize,
    task: usize,
    reduction: Reduction,
) -> Result<Tensor<T>> {
    let s = probs.shape();
    let tasks = s.c / value_classes.max(1);
    if tasks * value_classes != s.c {
        return Err(Error::dims("distributions_to_image", format!("{} channels", s.c)));
    }
    if task >= tasks {
        return Err(Error::InvalidArgument(format!(
            "task {task} out of range for {tasks} tasks"
        )));
    }
    let pixels: Vec<T> = probs
        .data()
        .chunks(s.c)
        .map(|cell| {
            let d = &cell[task * value_classes..(task + 1) * value_classes];
            T::from_f64_lossy(reduction.reduce(d) as f64)
        })
        .collect();
    Tensor::new(Shape::new(s.n, s.h, s.w, 1), pixels)
}
