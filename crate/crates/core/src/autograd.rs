//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the handles of its inputs. Because nodes are appended in
//! execution order, the tape is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse.
//!
//! ```
//! use gpt_stain::autograd::Tape;
//! use gpt_stain::{Shape, Tensor};
//!
//! let mut tape = Tape::<f64>::new(0);
//! let x = tape.param(Tensor::full(Shape::new(1, 2, 2, 1), 3.0));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 6.0));
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpt_layer::{attention_core, attention_core_backward};
use crate::tensor::{
    col_softmax, col_softmax_backward, concat_channels, conv2d, conv2d_backward, deconv2d, deconv2d_backward,
    fold_mode3, matmul, resize_bilinear, resize_bilinear_backward, split_channels, unfold_mode3, Scalar,
    Shape, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm, used by the
/// caller to update running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    ColSoftmax {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        /// Batch statistics were used (training mode).
        batch: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Resize {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        mask: Vec<bool>,
        classes: usize,
        active: usize,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::Attention { .. } => "attention",
            Op::MatMul { .. } => "matmul",
            Op::ColSoftmax { .. } => "col_softmax",
            Op::Concat { .. } => "concat",
            Op::Relu { .. } => "relu",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Resize { .. } => "resize_bilinear",
            Op::CrossEntropy { .. } => "masked_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum { .. } => "sum",
            Op::Mul { .. } => "mul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
        }
    }
}

/// One recorded value.
pub struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Scalar> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Records one forward pass. Single owner; not shareable while recording.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    rng: ChaCha8Rng,
    seed: u64,
    consumed: bool,
}

impl<T: Scalar> Tape<T> {
    /// `seed` drives every stochastic op (dropout masks) on this tape.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            consumed: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Which inputs of every recorded ReLU are positive, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// all ReLUs.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.value(x)),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Constant input: never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} output", op.name())));
        }
        let requires_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(y, Op::Conv2d { x, w, b, stride }, &inputs)
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = deconv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(y, Op::Deconv2d { x, w, b }, &inputs)
    }

    /// Global attention per batch entry: every output position of `q`'s
    /// grid is a softmax-weighted sum over all positions of `v`.
    ///
    /// `q` is `(N, Hq, Wq, Cq)`, `k` is `(N, Hk, Wk, Cq)`, `v` is
    /// `(N, Hk, Wk, Cv)`; the result is `(N, Hq, Wq, Cv)`. The attention
    /// matrix is not stored; backward recomputes it.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qs, ks, vs) = (
            self.value(q).shape(),
            self.value(k).shape(),
            self.value(v).shape(),
        );
        if qs.n != ks.n || ks.n != vs.n {
            return Err(Error::dims("attention", format!("batch {qs} {ks} {vs}")));
        }
        if (ks.h, ks.w) != (vs.h, vs.w) {
            return Err(Error::dims("attention", format!("key {ks} vs value {vs}")));
        }
        let out_shape = Shape::new(qs.n, qs.h, qs.w, vs.c);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..qs.n {
            let o = attention_core(
                &unfold_mode3(self.value(q), n),
                &unfold_mode3(self.value(k), n),
                &unfold_mode3(self.value(v), n),
            )?;
            data.extend_from_slice(fold_mode3(&o, qs.h, qs.w)?.data());
        }
        let y = Tensor::new(out_shape, data)?;
        self.push(y, Op::Attention { q, k, v }, &[q, k, v])
    }

    /// Matrix product of two matrix-valued nodes stored as `(1, rows, cols, 1)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(&self.value(a).to_matrix()?, &self.value(b).to_matrix()?)?;
        self.push(Tensor::from_matrix(&y), Op::MatMul { a, b }, &[a, b])
    }

    pub fn col_softmax(&mut self, a: Var) -> Result<Var> {
        let y = col_softmax(&self.value(a).to_matrix()?)?;
        self.push(Tensor::from_matrix(&y), Op::ColSoftmax { a }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = concat_channels(&tensors)?;
        self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x }, &[x])
    }

    /// Batch norm over `(N, H, W)` per channel using the batch's own
    /// statistics (biased variance). Returns the statistics for running
    /// average updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let xs = self.value(x).shape();
        let c = xs.c;
        let count = T::from_usize(xs.len() / c).unwrap();
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        for px in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / count;
        }
        let mut var = vec![T::zero(); c];
        for px in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        for s in var.iter_mut() {
            *s = *s / count;
        }
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.normalize(x, gamma, beta, &mean, &inv_std)?;
        let var_out = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch: true,
            },
            &[x, gamma, beta],
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let eps = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = self.normalize(x, gamma, beta, running_mean, &inv_std)?;
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                batch: false,
            },
            &[x, gamma, beta],
        )
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let c = xv.shape().c;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(Error::ChannelMismatch {
                op: "batch_norm",
                expected: c,
                found: g.len(),
            });
        }
        let mut out = xv.clone();
        for px in out.data_mut().chunks_mut(c) {
            for ch in 0..c {
                px[ch] = g[ch] * ((px[ch] - mean[ch]) * inv_std[ch]) + b[ch];
            }
        }
        Ok(out)
    }

    /// Inverted dropout: zeroes each value with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. The mask is drawn from the
    /// tape's generator and recorded for backward.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let len = self.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-supplied (already scaled) mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dims("dropout", "mask length"));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(xv.shape(), data)?;
        self.push(y, Op::Dropout { x, mask }, &[x])
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize_bilinear(self.value(x), out_h, out_w)?;
        self.push(y, Op::Resize { x }, &[x])
    }

    /// Mean negative log-likelihood over active `(pixel, task)` cells.
    ///
    /// `logits` is `(N, H, W, T*classes)` with the class axis innermost per
    /// task; `targets` holds `N*H*W*T` class indices and `mask` `N*T`
    /// presence flags. Cells of absent tasks contribute nothing; with no
    /// active cell the loss is exactly zero.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u8],
        mask: &[bool],
        tasks: usize,
        classes: usize,
    ) -> Result<Var> {
        let ls = self.value(logits).shape();
        if tasks == 0 || classes == 0 || ls.c != tasks * classes {
            return Err(Error::dims(
                "masked_cross_entropy",
                format!("{} channels for {tasks} tasks x {classes} classes", ls.c),
            ));
        }
        let cells = ls.n * ls.pixels();
        if targets.len() != cells * tasks || mask.len() != ls.n * tasks {
            return Err(Error::dims(
                "masked_cross_entropy",
                format!(
                    "{} targets / {} mask entries for logits {ls}",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let ld = self.value(logits).data();
        let per_item = ls.pixels();
        let mut total = 0.0f64;
        let mut active = 0usize;
        for cell in 0..cells {
            let n = cell / per_item;
            for t in 0..tasks {
                if !mask[n * tasks + t] {
                    continue;
                }
                let row = &ld[(cell * tasks + t) * classes..(cell * tasks + t + 1) * classes];
                let target = targets[cell * tasks + t] as usize;
                total += neg_log_softmax(row, target);
                active += 1;
            }
        }
        let loss = if active == 0 { 0.0 } else { total / active as f64 };
        self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                classes,
                active,
            },
            &[logits],
        )
    }

    /// `sum(x * weights)` for a constant weight tensor; a scalar probe used
    /// to reduce tensor-valued ops for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(x).shape() {
            return Err(Error::dims("weighted_sum", "weights shape"));
        }
        let y = Tensor::scalar(self.value(x).dot(&weights));
        self.push(y, Op::WeightedSum { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x }, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dims("mul", format!("{} vs {}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(av.shape(), data)?;
        self.push(y, Op::Mul { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dims("add", format!("{} vs {}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(av.shape(), data)?;
        self.push(y, Op::Add { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    /// Back-propagates from a scalar node. Every leaf created with
    /// `requires_grad` gets a gradient (zeros if it did not influence the
    /// loss). A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("tape already consumed by backward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got {}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (var, g) in self.node_backward(i, &dy)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[var.0], g);
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape())))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }

    fn node_backward(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), dy, *stride)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::Deconv2d { x, w, b } => {
                let (dx, dw, db) = deconv2d_backward(val(*x), val(*w), dy)?;
                let mut v = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    v.push((*b, db));
                }
                v
            }
            Op::Attention { q, k, v } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let (qs, ks, vs) = (qt.shape(), kt.shape(), vt.shape());
                let mut dq = Vec::with_capacity(qs.len());
                let mut dk = Vec::with_capacity(ks.len());
                let mut dv = Vec::with_capacity(vs.len());
                for n in 0..qs.n {
                    let (gq, gk, gv) = attention_core_backward(
                        &unfold_mode3(qt, n),
                        &unfold_mode3(kt, n),
                        &unfold_mode3(vt, n),
                        &unfold_mode3(dy, n),
                    )?;
                    dq.extend_from_slice(fold_mode3(&gq, qs.h, qs.w)?.data());
                    dk.extend_from_slice(fold_mode3(&gk, ks.h, ks.w)?.data());
                    dv.extend_from_slice(fold_mode3(&gv, vs.h, vs.w)?.data());
                }
                vec![
                    (*q, Tensor::new(qs, dq)?),
                    (*k, Tensor::new(ks, dk)?),
                    (*v, Tensor::new(vs, dv)?),
                ]
            }
            Op::MatMul { a, b } => {
                let (am, bm) = (val(*a).to_matrix()?, val(*b).to_matrix()?);
                let g = dy.to_matrix()?;
                let da = matmul(&g, &bm.transpose())?;
                let db = matmul(&am.transpose(), &g)?;
                vec![(*a, Tensor::from_matrix(&da)), (*b, Tensor::from_matrix(&db))]
            }
            Op::ColSoftmax { a } => {
                let s = node.value.to_matrix()?;
                let da = col_softmax_backward(&s, &dy.to_matrix()?);
                vec![(*a, Tensor::from_matrix(&da))]
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| val(p).shape().c).collect();
                parts.iter().copied().zip(split_channels(dy, &widths)?).collect()
            }
            Op::Relu { x } => {
                let xd = val(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, Tensor::new(dy.shape(), data)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            } => batch_norm_backward(val(*x), val(*gamma), dy, mean, inv_std, *batch)
                .map(|(dx, dg, db)| vec![(*x, dx), (*gamma, dg), (*beta, db)])?,
            Op::Dropout { x, mask } => {
                let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![(*x, Tensor::new(dy.shape(), data)?)]
            }
            Op::Resize { x } => {
                vec![(*x, resize_bilinear_backward(dy, val(*x).shape()))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                classes,
                active,
            } => {
                let lv = val(*logits);
                let ls = lv.shape();
                let tasks = ls.c / classes;
                let mut grad = vec![T::zero(); ls.len()];
                if *active > 0 {
                    let scale = dy.data()[0] / T::from_usize(*active).unwrap();
                    let per_item = ls.pixels();
                    let ld = lv.data();
                    for cell in 0..ls.n * per_item {
                        let n = cell / per_item;
                        for t in 0..tasks {
                            if !mask[n * tasks + t] {
                                continue;
                            }
                            let off = (cell * tasks + t) * classes;
                            let row = &ld[off..off + classes];
                            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                            let dst = &mut grad[off..off + classes];
                            let mut sum = T::zero();
                            for (d, &v) in dst.iter_mut().zip(row) {
                                *d = (v - max).exp();
                                sum = sum + *d;
                            }
                            let k = scale / sum;
                            for d in dst.iter_mut() {
                                // Subnormal gradients are flushed: they carry no
                                // useful signal and are very slow on common CPUs.
                                let g = *d * k;
                                *d = if g.abs() < T::min_positive_value() {
                                    T::zero()
                                } else {
                                    g
                                };
                            }
                            let target = targets[cell * tasks + t] as usize;
                            dst[target] = dst[target] - scale;
                        }
                    }
                }
                vec![(*logits, Tensor::new(ls, grad)?)]
            }
            Op::WeightedSum { x, weights } => {
                let g = dy.data()[0];
                vec![(*x, weights.map(|w| w * g))]
            }
            Op::Sum { x } => {
                vec![(*x, Tensor::full(val(*x).shape(), dy.data()[0]))]
            }
            Op::Mul { a, b } => {
                let da = Tensor::new(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(val(*b).data())
                        .map(|(&g, &v)| g * v)
                        .collect(),
                )?;
                let db = Tensor::new(
                    dy.shape(),
                    dy.data()
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&g, &v)| g * v)
                        .collect(),
                )?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Scale { x, factor } => vec![(*x, dy.map(|g| g * *factor))],
        };
        Ok(out)
    }
}

fn neg_log_softmax<T: Scalar>(row: &[T], target: usize) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64_lossy()));
    let lse = max
        + row
            .iter()
            .map(|&v| (v.to_f64_lossy() - max).exp())
            .sum::<f64>()
            .ln();
    lse - row[target].to_f64_lossy()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
    }
}

fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    batch: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (px, gp) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for ch in 0..c {
            let xhat = (px[ch] - mean[ch]) * inv_std[ch];
            dgamma[ch] = dgamma[ch] + gp[ch] * xhat;
            dbeta[ch] = dbeta[ch] + gp[ch];
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    if batch {
        let m = T::from_usize(x.len() / c).unwrap();
        for ((d, px), gp) in dx.chunks_mut(c).zip(x.data().chunks(c)).zip(dy.data().chunks(c)) {
            for ch in 0..c {
                let xhat = (px[ch] - mean[ch]) * inv_std[ch];
                d[ch] = g[ch] * inv_std[ch] / m * (m * gp[ch] - dbeta[ch] - xhat * dgamma[ch]);
            }
        }
    } else {
        for (d, gp) in dx.chunks_mut(c).zip(dy.data().chunks(c)) {
            for ch in 0..c {
                d[ch] = gp[ch] * g[ch] * inv_std[ch];
            }
        }
    }
    let bias_shape = Shape::new(1, 1, 1, c);
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(gamma.shape(), dgamma)?,
        Tensor::new(bias_shape, dbeta)?,
    ))
}

/// Gradients of the requires-grad leaves of one tape.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Result of a central finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

/// Compares the tape gradient of scalar map `f` at `x` against central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` on every coordinate.
///
/// Relative error uses the denominator `max(|a|, |b|, 1e-8)`. Every
/// evaluation runs on a fresh tape with seed 0, so dropout masks repeat.
/// A coordinate whose `x +- h e_i` flips the sign of any ReLU input is not
/// differentiable at that scale and is skipped (see
/// [`GradCheck::skipped`]).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, h, &coords)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new(0);
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .ok_or_else(|| Error::Graph("no gradient for probe input".into()))?;

    let base = tape.relu_pattern();

    let eval = |t: Tensor<f64>| -> Result<(f64, bool)> {
        let mut tape = Tape::new(0);
        let v = tape.param(t);
        let out = f(&mut tape, v)?;
        Ok((tape.value(out).data()[0], tape.relu_pattern() == base))
    };

    let mut report: Option<GradCheck> = None;
    let mut skipped = 0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let ((fp, same_p), (fm, same_m)) = (eval(plus)?, eval(minus)?);
        if !(same_p && same_m) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if report.is_none_or(|r| rel > r.max_rel_error) {
            report = Some(GradCheck {
                max_rel_error: rel,
                worst: i,
                analytic: a,
                numeric,
                coordinates: 0,
                skipped: 0,
            });
        }
    }
    let report = report.map(|r| GradCheck {
        coordinates: coords.len() - skipped,
        skipped,
        ..r
    });
    let report =
        report.ok_or_else(|| Error::InvalidArgument("no differentiable coordinates to check".into()))?;
    Ok(report)
}
