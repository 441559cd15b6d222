//! Masked multi-task cross-entropy, Adam and the training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, RngState};
use crate::data_io::{Manifest, Split};
use crate::error::{Error, Result};
use crate::multiscale::{batch, sample_training_patch, TrainingSample};
use crate::network::{Network, NetworkConfig};
use crate::params::{apply_bn_updates, Mode, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Precision {
    #[serde(rename = "32")]
    #[value(name = "32")]
    F32,
    #[serde(rename = "64")]
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_steps: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: 1000,
            checkpoint_every: 0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Settings for short desk-scale runs with [`NetworkConfig::tiny`].
    pub fn tiny() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_steps: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over active `(pixel, task)` cells and its gradient
/// with respect to the logits.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    mask: &[bool],
    tasks: usize,
    classes: usize,
) -> Result<(T, Tensor<T>)> {
    let mut tape = Tape::new(0);
    let x = tape.param(logits.clone());
    let loss = tape.masked_cross_entropy(x, targets, mask, tasks, classes)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let grad = grads.take(x).expect("logits require grad");
    Ok((value, grad))
}

/// First and second moments per trainable parameter.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .trainable()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        let cast = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        AdamState {
            step: self.step,
            m: cast(&self.m),
            v: cast(&self.v),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter that has a
/// gradient in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    config: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - config.beta2.powi(t));
    let lr = T::from_f64_lossy(config.learning_rate);
    let eps = T::from_f64_lossy(config.epsilon);
    for (name, p) in params.trainable_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::dims("adam_step", format!("{name}: shapes disagree")));
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Patch placements and tape seed of one step, dumped when a step fails.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub samples: Vec<String>,
    /// `(row, col)` patch centers.
    pub centers: Vec<(usize, usize)>,
    pub tape_seed: u64,
}

/// Training state that can be stepped, checkpointed and resumed.
pub struct Trainer<T: Scalar> {
    pub network: Network<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    pub step: u64,
    rng: ChaCha8Rng,
    samples: Vec<TrainingSample>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(network: Network<T>, config: TrainConfig, samples: Vec<TrainingSample>) -> Result<Self> {
        config.validate()?;
        check_samples(&network.config, &samples)?;
        let adam = AdamState::new(&network.params);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            network,
            adam,
            config,
            step: 0,
            rng,
            samples,
        })
    }

    pub fn resume(ck: &Checkpoint, samples: Vec<TrainingSample>) -> Result<Self> {
        let config = ck
            .train
            .clone()
            .ok_or_else(|| Error::Data("checkpoint has no training state".into()))?;
        let rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint has no sampler state".into()))?
            .restore()?;
        let network = ck.network::<T>()?;
        check_samples(&network.config, &samples)?;
        let adam = ck
            .adam
            .as_ref()
            .map(AdamState::cast)
            .unwrap_or_else(|| AdamState::new(&network.params));
        Ok(Trainer {
            network,
            adam,
            config,
            step: ck.step,
            rng,
            samples,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.network.config.clone(),
            train: Some(self.config.clone()),
            step: self.step,
            rng: Some(RngState::capture(self.config.seed, &self.rng)),
            params: self.network.params.cast(),
            adam: Some(self.adam.cast()),
        }
    }

    /// Draws a batch and applies one optimizer step. Returns the loss, or
    /// the error together with a record of the failing step.
    pub fn step(&mut self) -> std::result::Result<f64, (Error, StepRecord)> {
        let mut record = StepRecord {
            step: self.step + 1,
            samples: Vec::new(),
            centers: Vec::new(),
            tape_seed: 0,
        };
        match self.try_step(&mut record) {
            Ok(loss) => Ok(loss),
            Err(e) => Err((e, record)),
        }
    }

    fn try_step(&mut self, record: &mut StepRecord) -> Result<f64> {
        let cfg = &self.network.config;
        let mut patches = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let sample = &self.samples[self.rng.random_range(0..self.samples.len())];
            let patch = sample_training_patch::<T>(sample, cfg.patch, &mut self.rng)?;
            record.samples.push(sample.id.clone());
            record.centers.push((patch.spec.row, patch.spec.col));
            patches.push(patch);
        }
        record.tape_seed = self.rng.random();
        let (input, targets, mask) = batch(&patches)?;

        let mut tape = Tape::new(record.tape_seed);
        let x = tape.input(input);
        let f = self.network.record(&mut tape, x, Mode::Train, true)?;
        let loss = tape.masked_cross_entropy(f.logits, &targets, &mask, cfg.task_count, cfg.value_classes)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        let mut grads = tape.backward(loss)?;
        let mut named = BTreeMap::new();
        for (name, var) in f.bound.iter() {
            if tape.node(var).requires_grad() {
                let g = grads.take(var).expect("parameter gradient");
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name}")));
                }
                named.insert(name.to_string(), g);
            }
        }
        adam_step(&mut self.network.params, &named, &mut self.adam, &self.config)?;
        apply_bn_updates(&mut self.network.params, &f.bn_updates)?;
        self.step += 1;
        Ok(value.to_f64_lossy())
    }
}

fn check_samples(config: &NetworkConfig, samples: &[TrainingSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    for s in samples {
        if s.task_count() != config.task_count {
            return Err(Error::Data(format!(
                "sample {} has {} tasks, network expects {}",
                s.id,
                s.task_count(),
                config.task_count
            )));
        }
        if s.image.shape().c != config.input_channels {
            return Err(Error::Data(format!(
                "sample {} has {} channels, network expects {}",
                s.id,
                s.image.shape().c,
                config.input_channels
            )));
        }
        if s.height() < config.patch || s.width() < config.patch {
            return Err(Error::Data(format!(
                "sample {} is smaller than the {} patch",
                s.id, config.patch
            )));
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub seconds: f64,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "model.gptc";

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.gptc")
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let parsed = match parts.as_slice() {
            [s, l, t] => s.parse().ok().zip(l.parse().ok()).zip(t.parse().ok()),
            _ => None,
        };
        let ((step, loss), seconds) =
            parsed.ok_or_else(|| Error::Data(format!("{}:{}: malformed row", path.display(), i + 1)))?;
        rows.push(LossRecord { step, loss, seconds });
    }
    Ok(rows)
}

/// Where a training run writes, and an optional checkpoint to resume.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Print one line per step to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
}

/// Loads the training split of `manifest` and runs (or resumes) training,
/// writing `loss.csv`, periodic checkpoints and `model.gptc` under
/// `opts.out`. On a failing step the offending batch is described in
/// `failed_step.json` before the error is returned.
pub fn train(
    manifest: &Manifest,
    net: &NetworkConfig,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainSummary> {
    let mut samples = manifest.load_samples(Some(Split::Train))?;
    if samples.is_empty() {
        samples = manifest.load_samples(None)?;
    }
    match config.precision {
        Precision::F32 => run::<f32>(samples, net, config, opts),
        Precision::F64 => run::<f64>(samples, net, config, opts),
    }
}

fn run<T: Scalar>(
    samples: Vec<TrainingSample>,
    net: &NetworkConfig,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainSummary> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let log_path = opts.out.join(LOSS_LOG);
    let (mut trainer, mut losses) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut trainer = Trainer::<T>::resume(&ck, samples)?;
            trainer.config.max_steps = config.max_steps;
            trainer.config.checkpoint_every = config.checkpoint_every;
            let kept = if log_path.exists() {
                read_loss_log(&log_path)?
                    .into_iter()
                    .filter(|r| r.step <= ck.step)
                    .collect()
            } else {
                Vec::new()
            };
            (trainer, kept)
        }
        None => {
            let network = Network::<T>::new(net.clone(), config.seed)?;
            (Trainer::new(network, config.clone(), samples)?, Vec::new())
        }
    };
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let write_row = |log: &mut fs::File, r: &LossRecord| {
        writeln!(log, "{},{},{:.3}", r.step, r.loss, r.seconds).map_err(|e| Error::io(&log_path, e))
    };
    writeln!(log, "step,loss,seconds").map_err(|e| Error::io(&log_path, e))?;
    for r in &losses {
        write_row(&mut log, r)?;
    }
    let offset = losses.last().map_or(0.0, |r| r.seconds);
    let start = Instant::now();
    while trainer.step < trainer.config.max_steps {
        let loss = match trainer.step() {
            Ok(loss) => loss,
            Err((e, record)) => {
                let dump = opts.out.join("failed_step.json");
                let body = serde_json::json!({ "error": e.to_string(), "step": record });
                fs::write(&dump, serde_json::to_string_pretty(&body)? + "\n")
                    .map_err(|err| Error::io(&dump, err))?;
                return Err(e);
            }
        };
        let r = LossRecord {
            step: trainer.step,
            loss,
            seconds: offset + start.elapsed().as_secs_f64(),
        };
        write_row(&mut log, &r)?;
        if opts.verbose {
            eprintln!("step {} loss {:.5}", r.step, r.loss);
        }
        losses.push(r);
        let every = trainer.config.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            trainer
                .checkpoint()
                .save(opts.out.join(checkpoint_name(trainer.step)))?;
        }
    }
    let final_checkpoint = opts.out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        losses,
        final_checkpoint,
    })
}
