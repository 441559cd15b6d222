//! Whole-image prediction with overlapping windows.
//!
//! Window offsets along an axis of length `L` are `0, step, 2*step, ...`
//! while the window fits; if the last one does not end at `L`, one more
//! window is placed flush with the far border. Each window runs the
//! multi-scale extraction centered on the window, an eval-mode forward
//! pass and a per-task softmax. Overlapping distributions are averaged
//! and renormalized; windows are always merged in row-major order of their
//! top-left corners, so the result does not depend on evaluation order.

use crate::data_io::GrayImage;
use crate::error::{Error, Result};
use crate::multiscale::{extract_multiscale, normalize_intensity, PatchSpec};
use crate::network::{predict_distributions, Network, Reduction};
use crate::params::Mode;
use crate::tensor::{Scalar, Shape, Tensor};

/// Window offsets along one axis.
pub fn window_offsets(extent: usize, patch: usize, step: usize) -> Result<Vec<usize>> {
    if patch == 0 || step == 0 {
        return Err(Error::InvalidArgument("patch and step must be positive".into()));
    }
    if step > patch {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds patch {patch}; pixels would be skipped"
        )));
    }
    if patch > extent {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} larger than image extent {extent}"
        )));
    }
    let mut offsets: Vec<usize> = (0..=extent - patch).step_by(step).collect();
    if offsets.last() != Some(&(extent - patch)) {
        offsets.push(extent - patch);
    }
    Ok(offsets)
}

/// Top-left corners of every window, row-major.
pub fn windows(h: usize, w: usize, patch: usize, step: usize) -> Result<Vec<(usize, usize)>> {
    let rows = window_offsets(h, patch, step)?;
    let cols = window_offsets(w, patch, step)?;
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect())
}

/// Number of windows covering each pixel, row-major `h * w`.
pub fn coverage_map(h: usize, w: usize, patch: usize, step: usize) -> Result<Vec<u32>> {
    let mut map = vec![0u32; h * w];
    for (top, left) in windows(h, w, patch, step)? {
        for y in top..top + patch {
            for c in &mut map[y * w + left..y * w + left + patch] {
                *c += 1;
            }
        }
    }
    Ok(map)
}

/// Per-pixel distributions for a whole image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T: Scalar = f32> {
    /// `(1, H, W, T*V)`, class innermost; sums to one per `(pixel, task)`.
    pub distributions: Tensor<T>,
    pub task_count: usize,
    pub value_classes: usize,
    pub windows: usize,
}

impl<T: Scalar> Prediction<T> {
    pub fn render(&self, task: usize, reduction: Reduction) -> Result<GrayImage> {
        let s = self.distributions.shape();
        if task >= self.task_count {
            return Err(Error::InvalidArgument(format!(
                "task {task} out of range for {} tasks",
                self.task_count
            )));
        }
        let v = self.value_classes;
        let pixels = self
            .distributions
            .data()
            .chunks(s.c)
            .map(|cell| reduction.reduce(&cell[task * v..(task + 1) * v]))
            .collect();
        GrayImage::new(s.h, s.w, pixels)
    }
}

/// Distributions of one window, `(1, P, P, T*V)`.
pub fn predict_window<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    top: usize,
    left: usize,
) -> Result<Tensor<T>> {
    let p = net.config.patch;
    let input = extract_multiscale(image, PatchSpec::at_top_left(top, left, p)?)?;
    let logits = net.forward(&input, Mode::Eval, 0)?;
    predict_distributions(&logits, net.config.value_classes)
}

/// Averages window distributions into an `(1, H, W, C)` map. The windows
/// may arrive in any order; they are merged sorted by top-left corner.
pub fn merge_windows<T: Scalar>(
    h: usize,
    w: usize,
    group: usize,
    mut parts: Vec<((usize, usize), Tensor<T>)>,
) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no windows to merge".into()))?
        .1
        .shape();
    let (p, c) = (first.h, first.c);
    if group == 0 || c % group != 0 {
        return Err(Error::dims(
            "merge_windows",
            format!("{c} channels, group {group}"),
        ));
    }
    parts.sort_by_key(|(corner, _)| *corner);
    let mut acc = vec![T::zero(); h * w * c];
    let mut count = vec![0u32; h * w];
    for ((top, left), t) in &parts {
        if t.shape() != Shape::new(1, p, p, c) || top + p > h || left + p > w {
            return Err(Error::dims("merge_windows", format!("window at ({top}, {left})")));
        }
        let d = t.data();
        for y in 0..p {
            let dst = ((top + y) * w + left) * c;
            for (a, &v) in acc[dst..dst + p * c]
                .iter_mut()
                .zip(&d[y * p * c..(y + 1) * p * c])
            {
                *a = *a + v;
            }
            for n in &mut count[(top + y) * w + left..(top + y) * w + left + p] {
                *n += 1;
            }
        }
    }
    for (px, &n) in acc.chunks_mut(c).zip(&count) {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "window set leaves pixels uncovered".into(),
            ));
        }
        if n == 1 {
            continue;
        }
        for dist in px.chunks_mut(group) {
            let sum: f64 = dist.iter().map(|v| v.to_f64_lossy()).sum();
            let k = T::from_f64_lossy(1.0 / sum);
            for v in dist.iter_mut() {
                *v = *v * k;
            }
        }
    }
    Tensor::new(Shape::new(1, h, w, c), acc)
}

/// Predicts every pixel of a `(1, H, W, C_img)` image of raw 8-bit
/// intensities.
pub fn predict_image<T: Scalar>(net: &Network<T>, image: &Tensor<T>, step: usize) -> Result<Prediction<T>> {
    let s = image.shape();
    let cfg = &net.config;
    if s.n != 1 {
        return Err(Error::dims(
            "predict_image",
            format!("expected one image, got {s}"),
        ));
    }
    if s.c != cfg.input_channels {
        return Err(Error::ChannelMismatch {
            op: "predict_image",
            expected: cfg.input_channels,
            found: s.c,
        });
    }
    let corners = windows(s.h, s.w, cfg.patch, step)?;
    let normalized = normalize_intensity(image);
    let parts = corners
        .iter()
        .map(|&(top, left)| Ok(((top, left), predict_window(net, &normalized, top, left)?)))
        .collect::<Result<Vec<_>>>()?;
    let distributions = merge_windows(s.h, s.w, cfg.value_classes, parts)?;
    Ok(Prediction {
        distributions,
        task_count: cfg.task_count,
        value_classes: cfg.value_classes,
        windows: corners.len(),
    })
}
