//! Parameter containers and initialization shared by the layers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Weight `(k, k, C_in, C_out)` and bias `(1, 1, 1, C_out)` of a
/// convolution or transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    /// He-normal weights (`std = sqrt(2 / (k*k*C_in))`), zero bias.
    pub fn he(k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            weight: he_normal(Shape::new(k, k, cin, cout), k * k * cin, rng),
            bias: Tensor::zeros(Shape::new(1, 1, 1, cout)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().n
    }

    pub fn cin(&self) -> usize {
        self.weight.shape().w
    }

    pub fn cout(&self) -> usize {
        self.weight.shape().c
    }

    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> ConvVars {
        ConvVars {
            weight: tape.leaf(self.weight.clone(), requires_grad),
            bias: tape.leaf(self.bias.clone(), requires_grad),
        }
    }

    pub(crate) fn insert(&self, set: &mut ParamSet<T>, prefix: &str) {
        set.insert(
            format!("{prefix}.weight"),
            self.weight.clone(),
            ParamKind::Trainable,
        );
        set.insert(format!("{prefix}.bias"), self.bias.clone(), ParamKind::Trainable);
    }
}

/// Tape handles of a [`ConvParams`].
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Batch-norm scale / shift plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(c: usize) -> Self {
        let s = Shape::new(1, 1, 1, c);
        BatchNormParams {
            gamma: Tensor::full(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::full(s, T::one()),
        }
    }

    pub(crate) fn insert(&self, set: &mut ParamSet<T>, prefix: &str) {
        set.insert(
            format!("{prefix}.gamma"),
            self.gamma.clone(),
            ParamKind::Trainable,
        );
        set.insert(format!("{prefix}.beta"), self.beta.clone(), ParamKind::Trainable);
        set.insert(
            format!("{prefix}.running_mean"),
            self.running_mean.clone(),
            ParamKind::Buffer,
        );
        set.insert(
            format!("{prefix}.running_var"),
            self.running_var.clone(),
            ParamKind::Buffer,
        );
    }
}

pub fn he_normal<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(dist.sample(rng)))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as running statistics; saved but not differentiated.
    Buffer,
}

/// Named parameters in a stable (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: BTreeMap<String, (Tensor<T>, ParamKind)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name, (t, kind));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|(t, _)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|(t, _)| t)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.entries.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(n, t, _)| (n, t))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .filter(|(_, (_, k))| *k == ParamKind::Trainable)
            .map(|(n, (t, _))| (n.as_str(), t))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, (t, k))| (n.clone(), (t.cast(), *k)))
                .collect(),
        }
    }

    /// Puts every entry on `tape`; trainable entries require gradients when
    /// `train` is set.
    pub fn bind(&self, tape: &mut Tape<T>, train: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, (t, k))| {
                let grad = train && *k == ParamKind::Trainable;
                (n.clone(), tape.leaf(t.clone(), grad))
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars {
            weight: self.var(&format!("{prefix}.weight"))?,
            bias: self.var(&format!("{prefix}.bias"))?,
        })
    }

    /// Replaces the handle for `name`, e.g. to probe one parameter.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Forward-pass mode.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Statistics observed by one training-mode batch norm, keyed by its
/// parameter prefix.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub stats: BatchStats<T>,
}

/// Folds observed batch statistics into the running averages:
/// `running = m * running + (1 - m) * batch` with `m = 0.9`.
pub fn apply_bn_updates<T: Scalar>(set: &mut ParamSet<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    let m = T::from_f64_lossy(BatchNormParams::<T>::MOMENTUM);
    let one = T::one();
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
            let name = format!("{}.{suffix}", u.prefix);
            let t = set
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing buffer {name}")))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = m * *r + (one - m) * b;
            }
        }
    }
    Ok(())
}
