//! Multi-scale patch input.
//!
//! For a patch of size `H` centered at `(row, col)`:
//!
//! * `X0`: the `H x H` window with top-left `(row - H/2, col - H/2)`,
//!   half-open, copied without resampling;
//! * `X1`: the `2H x 2H` window with the same center, resized down to `H`;
//! * `X2`: the `H/2 x H/2` window with the same center, resized up to `H`.
//!
//! The output stacks `[X0, X1, X2]` along channels. Windows that leave the
//! image are completed by reflection. Targets are only ever cut with the
//! `X0` window.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat_channels, crop_reflect, resize_bilinear, Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(row: usize, col: usize, size: usize) -> Result<Self> {
        if size < 2 || !size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("patch size {size} must be even")));
        }
        Ok(PatchSpec { row, col, size })
    }

    /// Patch whose `X0` window has top-left `(top, left)`.
    pub fn at_top_left(top: usize, left: usize, size: usize) -> Result<Self> {
        Self::new(top + size / 2, left + size / 2, size)
    }

    /// Top-left corner of the `X0` window.
    pub fn top_left(&self) -> (isize, isize) {
        let half = (self.size / 2) as isize;
        (self.row as isize - half, self.col as isize - half)
    }

    fn window(&self, size: usize) -> (isize, isize) {
        let half = (size / 2) as isize;
        (self.row as isize - half, self.col as isize - half)
    }
}

/// Maps 8-bit intensities onto `[0, 1]`, the scale the network sees.
pub fn normalize_intensity<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let k = T::from_f64_lossy(255.0);
    image.map(|v| v / k)
}

/// Builds the `(1, H, H, 3*C)` multi-scale input from a `(1, H_img, W_img, C)`
/// image.
pub fn extract_multiscale<T: Scalar>(image: &Tensor<T>, spec: PatchSpec) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::dims(
            "extract_multiscale",
            format!("expected one image, got {s}"),
        ));
    }
    if spec.row >= s.h || spec.col >= s.w {
        return Err(Error::InvalidArgument(format!(
            "center ({}, {}) outside {}x{} image",
            spec.row, spec.col, s.h, s.w
        )));
    }
    let h = spec.size;
    let (t0, l0) = spec.window(h);
    let x0 = crop_reflect(image, t0, l0, h, h)?;
    let (t1, l1) = spec.window(2 * h);
    let x1 = resize_bilinear(&crop_reflect(image, t1, l1, 2 * h, 2 * h)?, h, h)?;
    let (t2, l2) = spec.window(h / 2);
    let x2 = resize_bilinear(&crop_reflect(image, t2, l2, h / 2, h / 2)?, h, h)?;
    concat_channels(&[&x0, &x1, &x2])
}

/// One image with its per-task ground truth. `targets[t]` is `None` when
/// task `t` is unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    /// `(1, H, W, C)`, raw intensities in `0..=255`.
    pub image: Tensor<f32>,
    /// Row-major `H * W` class indices per task.
    pub targets: Vec<Option<Vec<u8>>>,
}

impl TrainingSample {
    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn task_count(&self) -> usize {
        self.targets.len()
    }
}

/// A training example cut from a [`TrainingSample`].
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T: Scalar = f32> {
    pub spec: PatchSpec,
    /// `(1, H, H, 3*C)`, normalized intensities.
    pub input: Tensor<T>,
    /// `H * H * T` class indices, task innermost; zero for unlabeled tasks.
    pub targets: Vec<u8>,
    pub mask: Vec<bool>,
}

/// Cuts the patch at `spec`. The `X0` window must lie inside the image.
pub fn patch_at<T: Scalar>(sample: &TrainingSample, spec: PatchSpec) -> Result<Patch<T>> {
    let (top, left) = spec.top_left();
    let h = spec.size;
    if top < 0 || left < 0 || top as usize + h > sample.height() || left as usize + h > sample.width() {
        return Err(Error::InvalidArgument(format!(
            "patch at ({}, {}) leaves the {}x{} image",
            spec.row,
            spec.col,
            sample.height(),
            sample.width()
        )));
    }
    let image: Tensor<T> = normalize_intensity(&sample.image).cast();
    let input = extract_multiscale(&image, spec)?;
    let tasks = sample.task_count();
    let (top, left) = (top as usize, left as usize);
    let width = sample.width();
    let mut targets = vec![0u8; h * h * tasks];
    for (t, target) in sample.targets.iter().enumerate() {
        let Some(target) = target else { continue };
        for y in 0..h {
            for x in 0..h {
                targets[(y * h + x) * tasks + t] = target[(top + y) * width + left + x];
            }
        }
    }
    Ok(Patch {
        spec,
        input,
        targets,
        mask: sample.targets.iter().map(Option::is_some).collect(),
    })
}

/// Draws a patch whose `X0` window is uniformly placed inside the image.
pub fn sample_training_patch<T: Scalar>(
    sample: &TrainingSample,
    size: usize,
    rng: &mut impl Rng,
) -> Result<Patch<T>> {
    if sample.height() < size || sample.width() < size {
        return Err(Error::Data(format!(
            "sample {} is {}x{}, smaller than patch {size}",
            sample.id,
            sample.height(),
            sample.width()
        )));
    }
    let top = rng.random_range(0..=sample.height() - size);
    let left = rng.random_range(0..=sample.width() - size);
    patch_at(sample, PatchSpec::at_top_left(top, left, size)?)
}

/// Stacks patches into a batch: `(N, H, H, 3C)` inputs, `N*H*H*T` targets
/// and `N*T` mask entries.
pub fn batch<T: Scalar>(patches: &[Patch<T>]) -> Result<(Tensor<T>, Vec<u8>, Vec<bool>)> {
    let inputs: Vec<Tensor<T>> = patches.iter().map(|p| p.input.clone()).collect();
    let input = Tensor::stack(&inputs)?;
    let targets = patches.iter().flat_map(|p| p.targets.iter().copied()).collect();
    let mask = patches.iter().flat_map(|p| p.mask.iter().copied()).collect();
    Ok((input, targets, mask))
}

/// `(1, H, W, 1)` tensor from row-major 8-bit pixels.
pub fn gray_tensor<T: Scalar>(h: usize, w: usize, pixels: &[u8]) -> Result<Tensor<T>> {
    Tensor::new(
        Shape::new(1, h, w, 1),
        pixels.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, h, w, 1), |_, y, x, _| (y * 3 + x) as f64 * 0.5)
    }

    #[test]
    fn constant_image_gives_constant_channels() {
        let img = Tensor::<f32>::full(Shape::new(1, 40, 30, 2), 7.0);
        let out = extract_multiscale(&img, PatchSpec::new(3, 28, 16).unwrap()).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 16, 16, 6));
        assert!(out.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn centered_window_rule() {
        let spec = PatchSpec::new(256, 256, 128).unwrap();
        assert_eq!(spec.top_left(), (192, 192));
        let img = Tensor::from_fn(Shape::new(1, 512, 512, 1), |_, y, x, _| (y * 512 + x) as f64);
        let out = extract_multiscale(&img, spec).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), (192 * 512 + 192) as f64);
        assert_eq!(out.get(0, 127, 127, 0), (319 * 512 + 319) as f64);
    }

    #[test]
    fn fine_scale_is_upsampled_center() {
        let img = ramp(64, 64);
        let spec = PatchSpec::new(30, 33, 32).unwrap();
        let out = extract_multiscale(&img, spec).unwrap();
        let mut center = Tensor::zeros(Shape::new(1, 16, 16, 1));
        for y in 0..16 {
            for x in 0..16 {
                center.set(0, y, x, 0, img.get(0, 30 - 8 + y, 33 - 8 + x, 0));
            }
        }
        let up = resize_bilinear(&center, 32, 32).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert!((out.get(0, y, x, 2) - up.get(0, y, x, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn center_outside_is_an_error() {
        let img = ramp(20, 20);
        assert!(extract_multiscale(&img, PatchSpec::new(20, 3, 8).unwrap()).is_err());
        assert!(PatchSpec::new(1, 1, 7).is_err());
    }

    fn sample() -> TrainingSample {
        let (h, w) = (24, 20);
        let pixels: Vec<u8> = (0..h * w).map(|i| (i * 7 % 256) as u8).collect();
        TrainingSample {
            id: "s".into(),
            image: gray_tensor(h, w, &pixels).unwrap(),
            targets: vec![
                Some(pixels.iter().map(|v| v / 2).collect()),
                None,
                Some(pixels.clone()),
            ],
        }
    }

    #[test]
    fn targets_follow_the_base_window() {
        let s = sample();
        let p: Patch<f32> = patch_at(&s, PatchSpec::at_top_left(5, 3, 8).unwrap()).unwrap();
        assert_eq!(p.mask, vec![true, false, true]);
        for y in 0..8 {
            for x in 0..8 {
                let src = (5 + y) * 20 + 3 + x;
                let cell = (y * 8 + x) * 3;
                assert_eq!(p.targets[cell], s.targets[0].as_ref().unwrap()[src]);
                assert_eq!(p.targets[cell + 1], 0);
                assert_eq!(p.targets[cell + 2], s.targets[2].as_ref().unwrap()[src]);
                assert_eq!(p.input.get(0, y, x, 0), s.image.data()[src] / 255.0);
            }
        }
    }

    #[test]
    fn sampling_is_seeded_and_in_bounds() {
        let s = sample();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_training_patch::<f32>(&s, 8, &mut rng).unwrap().spec)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
        assert!(sample_training_patch::<f32>(&s, 32, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
