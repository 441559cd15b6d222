//! Pure numeric kernels.
//!
//! Every reduction runs in a fixed order, so results are bit-identical
//! across runs and across thread counts: parallel loops only split work
//! by output rows, never inside a sum.

use rayon::prelude::*;

use super::{Matrix, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Mode-3 unfolding of batch entry `n`: a `C x (H*W)` matrix whose entry
/// `(c, h*W + w)` is tensor entry `(n, h, w, c)`.
///
/// Spatial positions are flattened row-major (h major, w minor).
pub fn unfold_mode3<T: Scalar>(t: &Tensor<T>, n: usize) -> Matrix<T> {
    let s = t.shape();
    assert!(n < s.n, "batch index {n} out of range for {s}");
    let item = t.item(n);
    let positions = s.pixels();
    let mut data = vec![T::zero(); item.len()];
    for p in 0..positions {
        for c in 0..s.c {
            data[c * positions + p] = item[p * s.c + c];
        }
    }
    Matrix {
        rows: s.c,
        cols: positions,
        data,
    }
}

/// Inverse of [`unfold_mode3`]: folds a `C x (H*W)` matrix into a
/// `(1, H, W, C)` tensor.
pub fn fold_mode3<T: Scalar>(m: &Matrix<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if m.cols != h * w {
        return Err(Error::dims(
            "fold_mode3",
            format!("{} columns cannot fold to {h}x{w}", m.cols),
        ));
    }
    let positions = m.cols;
    let mut data = vec![T::zero(); m.data.len()];
    for c in 0..m.rows {
        for p in 0..positions {
            data[p * m.rows + c] = m.data[c * positions + p];
        }
    }
    Tensor::new(Shape::new(1, h, w, m.rows), data)
}

/// Standard matrix product with a fixed k-loop order per output row.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let m = b.cols;
    let mut out = vec![T::zero(); a.rows * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let arow = &a.data[i * a.cols..(i + 1) * a.cols];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &b.data[k * m..(k + 1) * m];
                for (o, &bkj) in row.iter_mut().zip(brow) {
                    *o = *o + aik * bkj;
                }
            }
        });
    }
    Ok(Matrix {
        rows: a.rows,
        cols: m,
        data: out,
    })
}

/// Column-wise softmax: every column is normalized to sum to one.
///
/// The column maximum is subtracted before exponentiation. Weights below
/// the smallest normal float are stored as zero.
pub fn col_softmax<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("col_softmax input".into()));
    }
    let cols = m.cols;
    let mut max = vec![T::neg_infinity(); cols];
    for row in m.data.chunks(cols.max(1)) {
        for (mx, &v) in max.iter_mut().zip(row) {
            *mx = mx.max(v);
        }
    }
    let mut out = m.clone();
    let mut sum = vec![T::zero(); cols];
    for row in out.data.chunks_mut(cols.max(1)) {
        for ((v, &mx), s) in row.iter_mut().zip(&max).zip(sum.iter_mut()) {
            *v = (*v - mx).exp();
            *s = *s + *v;
        }
    }
    let inv: Vec<T> = sum.iter().map(|&s| T::one() / s).collect();
    let tiny = T::min_positive_value();
    for row in out.data.chunks_mut(cols.max(1)) {
        for (v, &k) in row.iter_mut().zip(&inv) {
            let p = *v * k;
            *v = if p < tiny { T::zero() } else { p };
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`col_softmax`] given its output `a`.
pub fn col_softmax_backward<T: Scalar>(a: &Matrix<T>, grad: &Matrix<T>) -> Matrix<T> {
    let cols = a.cols.max(1);
    let mut dot = vec![T::zero(); a.cols];
    for (ar, gr) in a.data.chunks(cols).zip(grad.data.chunks(cols)) {
        for ((d, &av), &gv) in dot.iter_mut().zip(ar).zip(gr) {
            *d = *d + av * gv;
        }
    }
    let tiny = T::min_positive_value();
    let mut out = Matrix::zeros(a.rows, a.cols);
    for ((o, ar), gr) in out
        .data
        .chunks_mut(cols)
        .zip(a.data.chunks(cols))
        .zip(grad.data.chunks(cols))
    {
        for (((ov, &av), &gv), &d) in o.iter_mut().zip(ar).zip(gr).zip(&dot) {
            let v = av * (gv - d);
            *ov = if v.abs() < tiny { T::zero() } else { v };
        }
    }
    out
}

/// Softmax over consecutive groups of `group` values (the trailing class
/// axis of a logits tensor). Max-subtracted.
pub fn softmax_groups<T: Scalar>(values: &[T], group: usize) -> Vec<T> {
    let mut out = vec![T::zero(); values.len()];
    for (src, dst) in values.chunks(group).zip(out.chunks_mut(group)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

/// Output extent and leading pad for "same" padding.
///
/// The output extent is `ceil(input / stride)`; when the total padding is
/// odd the extra pixel goes to the bottom / right.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Geometry shared by a strided convolution and its transpose. The
/// "large" side is the convolution input (transposed-convolution output).
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    k: usize,
    stride: usize,
    large_h: usize,
    large_w: usize,
    small_h: usize,
    small_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geom {
    fn conv(n: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let (small_h, pad_top) = same_padding(h, k, stride);
        let (small_w, pad_left) = same_padding(w, k, stride);
        Geom {
            n,
            k,
            stride,
            large_h: h,
            large_w: w,
            small_h,
            small_w,
            pad_top,
            pad_left,
        }
    }

    /// Large-side index reached from small index `o` through tap `t`.
    #[inline]
    fn up(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let i = (o * stride + t).checked_sub(pad)?;
        (i < extent).then_some(i)
    }

    /// Small-side index reaching large index `i` through tap `t`.
    #[inline]
    fn down(i: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let v = (i + pad).checked_sub(t)?;
        if v % stride != 0 {
            return None;
        }
        let o = v / stride;
        (o < extent).then_some(o)
    }

    fn large_rows(&self, n: usize, iy: usize) -> usize {
        n * self.large_h + iy
    }

    fn small_rows(&self, n: usize, oy: usize) -> usize {
        n * self.small_h + oy
    }
}

fn check_weight<T: Scalar>(
    op: &'static str,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cin: usize,
) -> Result<(usize, usize)> {
    let ws = w.shape();
    if ws.n != ws.h {
        return Err(Error::dims(op, format!("kernel must be square, weight {ws}")));
    }
    if ws.w != cin {
        return Err(Error::ChannelMismatch {
            op,
            expected: ws.w,
            found: cin,
        });
    }
    if let Some(b) = bias {
        if b.len() != ws.c {
            return Err(Error::ChannelMismatch {
                op,
                expected: ws.c,
                found: b.len(),
            });
        }
    }
    Ok((ws.n, ws.c))
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>) {
    if let Some(b) = bias {
        let b = b.data();
        for px in out.chunks_mut(b.len()) {
            for (o, &bv) in px.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
    }
}

/// 2-D convolution with "same" padding.
///
/// `w` has extents `(k, k, C_in, C_out)`; output spatial size is
/// `ceil(H/stride) x ceil(W/stride)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride 0".into()));
    }
    let xs = x.shape();
    let (k, cout) = check_weight("conv2d", w, bias, xs.c)?;
    let g = Geom::conv(xs.n, xs.h, xs.w, k, stride);
    let cin = xs.c;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.n * g.small_h * g.small_w * cout];
    out.par_chunks_mut(g.small_w * cout)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (n, oy) = (row / g.small_h, row % g.small_h);
            for ox in 0..g.small_w {
                let acc = &mut chunk[ox * cout..(ox + 1) * cout];
                for ky in 0..k {
                    let Some(iy) = Geom::up(oy, ky, stride, g.pad_top, g.large_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geom::up(ox, kx, stride, g.pad_left, g.large_w) else {
                            continue;
                        };
                        let xoff = (g.large_rows(n, iy) * g.large_w + ix) * cin;
                        let tap = (ky * k + kx) * cin;
                        for ci in 0..cin {
                            let xv = xd[xoff + ci];
                            let wrow = &wd[(tap + ci) * cout..(tap + ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + xv * wv;
                            }
                        }
                    }
                }
            }
        });
    add_bias(&mut out, bias);
    Tensor::new(Shape::new(g.n, g.small_h, g.small_w, cout), out)?.ensure_finite("conv2d")
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let (k, cout) = check_weight("conv2d_backward", w, None, xs.c)?;
    let g = Geom::conv(xs.n, xs.h, xs.w, k, stride);
    if dy.shape() != Shape::new(g.n, g.small_h, g.small_w, cout) {
        return Err(Error::dims("conv2d_backward", format!("gradient {}", dy.shape())));
    }
    let cin = xs.c;
    let wd = w.data();
    let dyd = dy.data();

    // Input gradient: gather over large positions.
    let mut dx = vec![T::zero(); xs.len()];
    dx.par_chunks_mut(g.large_w * cin)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (n, iy) = (row / g.large_h, row % g.large_h);
            for ix in 0..g.large_w {
                let acc = &mut chunk[ix * cin..(ix + 1) * cin];
                for ky in 0..k {
                    let Some(oy) = Geom::down(iy, ky, stride, g.pad_top, g.small_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ox) = Geom::down(ix, kx, stride, g.pad_left, g.small_w) else {
                            continue;
                        };
                        let doff = (g.small_rows(n, oy) * g.small_w + ox) * cout;
                        let drow = &dyd[doff..doff + cout];
                        let tap = (ky * k + kx) * cin;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &wd[(tap + ci) * cout..(tap + ci + 1) * cout];
                            *a = *a + dot(wrow, drow);
                        }
                    }
                }
            }
        });

    let dw = tap_outer(&g, x.data(), cin, dyd, cout, true);
    let db = channel_sums(dyd, cout);
    Ok((
        Tensor::from_parts_unchecked(xs, dx),
        Tensor::from_parts_unchecked(w.shape(), dw),
        Tensor::from_parts_unchecked(Shape::new(1, 1, 1, cout), db),
    ))
}

/// 3x3 (or any odd k) transposed convolution with stride 2: the adjoint of
/// a stride-2 "same" [`conv2d`] on a `2H x 2W` map.
///
/// `w` has extents `(k, k, C_in, C_out)`. Output size is exactly
/// `2H x 2W`. Input pixel `i` feeds output pixels `2i + t - p` for taps
/// `t in 0..k`, where `p = (k - 2) / 2` is the leading pad of the matching
/// convolution (0 for k = 3); contributions past the last row/column are
/// cropped.
pub fn deconv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (k, cout) = check_weight("deconv2d", w, bias, xs.c)?;
    let g = Geom::conv(xs.n, 2 * xs.h, 2 * xs.w, k, 2);
    debug_assert_eq!((g.small_h, g.small_w), (xs.h, xs.w));
    let cin = xs.c;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); g.n * g.large_h * g.large_w * cout];
    out.par_chunks_mut(g.large_w * cout)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (n, iy) = (row / g.large_h, row % g.large_h);
            for ix in 0..g.large_w {
                let acc = &mut chunk[ix * cout..(ix + 1) * cout];
                for ky in 0..k {
                    let Some(oy) = Geom::down(iy, ky, 2, g.pad_top, g.small_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ox) = Geom::down(ix, kx, 2, g.pad_left, g.small_w) else {
                            continue;
                        };
                        let soff = (g.small_rows(n, oy) * g.small_w + ox) * cin;
                        let tap = (ky * k + kx) * cin;
                        for ci in 0..cin {
                            let sv = xd[soff + ci];
                            let wrow = &wd[(tap + ci) * cout..(tap + ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + sv * wv;
                            }
                        }
                    }
                }
            }
        });
    add_bias(&mut out, bias);
    Tensor::new(Shape::new(g.n, g.large_h, g.large_w, cout), out)?.ensure_finite("deconv2d")
}

/// Gradients of [`deconv2d`] with respect to input, weight and bias.
pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let (k, cout) = check_weight("deconv2d_backward", w, None, xs.c)?;
    let g = Geom::conv(xs.n, 2 * xs.h, 2 * xs.w, k, 2);
    if dy.shape() != Shape::new(g.n, g.large_h, g.large_w, cout) {
        return Err(Error::dims(
            "deconv2d_backward",
            format!("gradient {}", dy.shape()),
        ));
    }
    let cin = xs.c;
    let wd = w.data();
    let dyd = dy.data();

    let mut dx = vec![T::zero(); xs.len()];
    dx.par_chunks_mut(g.small_w * cin)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (n, oy) = (row / g.small_h, row % g.small_h);
            for ox in 0..g.small_w {
                let acc = &mut chunk[ox * cin..(ox + 1) * cin];
                for ky in 0..k {
                    let Some(iy) = Geom::up(oy, ky, 2, g.pad_top, g.large_h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = Geom::up(ox, kx, 2, g.pad_left, g.large_w) else {
                            continue;
                        };
                        let doff = (g.large_rows(n, iy) * g.large_w + ix) * cout;
                        let drow = &dyd[doff..doff + cout];
                        let tap = (ky * k + kx) * cin;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &wd[(tap + ci) * cout..(tap + ci + 1) * cout];
                            *a = *a + dot(wrow, drow);
                        }
                    }
                }
            }
        });

    let dw = tap_outer(&g, dyd, cout, x.data(), cin, false);
    let db = channel_sums(dyd, cout);
    Ok((
        Tensor::from_parts_unchecked(xs, dx),
        Tensor::from_parts_unchecked(w.shape(), dw),
        Tensor::from_parts_unchecked(Shape::new(1, 1, 1, cout), db),
    ))
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn channel_sums<T: Scalar>(values: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for px in values.chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = *o + v;
        }
    }
    out
}

/// Per-tap outer products summed over all (batch, small position) pairs.
///
/// With `large_first` the result is laid out `(k, k, C_large, C_small)`
/// (convolution weight gradient); otherwise `(k, k, C_small, C_large)`
/// (transposed convolution weight gradient).
fn tap_outer<T: Scalar>(
    g: &Geom,
    large: &[T],
    cl: usize,
    small: &[T],
    cs: usize,
    large_first: bool,
) -> Vec<T> {
    let k = g.k;
    let per_tap = cl * cs;
    let mut out = vec![T::zero(); k * k * per_tap];
    out.par_chunks_mut(per_tap).enumerate().for_each(|(tap, acc)| {
        let (ky, kx) = (tap / k, tap % k);
        for n in 0..g.n {
            for oy in 0..g.small_h {
                let Some(iy) = Geom::up(oy, ky, g.stride, g.pad_top, g.large_h) else {
                    continue;
                };
                for ox in 0..g.small_w {
                    let Some(ix) = Geom::up(ox, kx, g.stride, g.pad_left, g.large_w) else {
                        continue;
                    };
                    let loff = (g.large_rows(n, iy) * g.large_w + ix) * cl;
                    let soff = (g.small_rows(n, oy) * g.small_w + ox) * cs;
                    let lrow = &large[loff..loff + cl];
                    let srow = &small[soff..soff + cs];
                    if large_first {
                        for (ci, &lv) in lrow.iter().enumerate() {
                            let dst = &mut acc[ci * cs..(ci + 1) * cs];
                            for (d, &sv) in dst.iter_mut().zip(srow) {
                                *d = *d + lv * sv;
                            }
                        }
                    } else {
                        for (ci, &sv) in srow.iter().enumerate() {
                            let dst = &mut acc[ci * cl..(ci + 1) * cl];
                            for (d, &lv) in dst.iter_mut().zip(lrow) {
                                *d = *d + sv * lv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Interpolation taps along one axis: `(i0, i1, frac)` per output index.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize with the half-pixel (align-corners = false) convention.
///
/// Output pixel `d` samples source coordinate `(d + 0.5) * in/out - 0.5`,
/// clamped to the valid range. Resizing to the same size is the identity.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize to zero extent".into()));
    }
    let s = x.shape();
    let ys = bilinear_axis(s.h, out_h);
    let xs = bilinear_axis(s.w, out_w);
    let c = s.c;
    let d = x.data();
    let mut out = vec![T::zero(); s.n * out_h * out_w * c];
    out.par_chunks_mut(out_w * c)
        .enumerate()
        .for_each(|(row, chunk)| {
            let (n, oy) = (row / out_h, row % out_h);
            let (y0, y1, fy) = ys[oy];
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let a = s.index(n, y0, x0, 0);
                let b = s.index(n, y0, x1, 0);
                let cc = s.index(n, y1, x0, 0);
                let dd = s.index(n, y1, x1, 0);
                for ch in 0..c {
                    let top = d[a + ch] + fx * (d[b + ch] - d[a + ch]);
                    let bot = d[cc + ch] + fx * (d[dd + ch] - d[cc + ch]);
                    chunk[ox * c + ch] = top + fy * (bot - top);
                }
            }
        });
    Tensor::new(Shape::new(s.n, out_h, out_w, c), out)
}

/// Adjoint of [`resize_bilinear`]: scatters `dy` back onto `input` shape.
pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let ds = dy.shape();
    let ys = bilinear_axis(input.h, ds.h);
    let xs = bilinear_axis(input.w, ds.w);
    let mut dx = vec![T::zero(); input.len()];
    let g = dy.data();
    for n in 0..ds.n {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let one = T::one();
                let weights = [
                    (y0, x0, (one - fx) * (one - fy)),
                    (y0, x1, fx * (one - fy)),
                    (y1, x0, (one - fx) * fy),
                    (y1, x1, fx * fy),
                ];
                let goff = ds.index(n, oy, ox, 0);
                for (yy, xx, wgt) in weights {
                    let base = input.index(n, yy, xx, 0);
                    for ch in 0..ds.c {
                        dx[base + ch] = dx[base + ch] + wgt * g[goff + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts_unchecked(input, dx)
}

/// Reflects index `i` (which may lie up to `extent - 1` outside) into
/// `0..extent` without repeating the border pixel.
#[inline]
fn reflect(i: isize, extent: usize) -> usize {
    let e = extent as isize;
    let r = if i < 0 {
        -i
    } else if i >= e {
        2 * (e - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflection padding that does not repeat the border pixel: `[1, 2, 3]`
/// padded by one on the left becomes `[2, 1, 2, 3]`.
pub fn mirror_pad<T: Scalar>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if top >= s.h || bottom >= s.h || left >= s.w || right >= s.w {
        return Err(Error::InvalidArgument(format!(
            "mirror pad ({top}, {bottom}, {left}, {right}) too large for {}x{}",
            s.h, s.w
        )));
    }
    let out = Shape::new(s.n, s.h + top + bottom, s.w + left + right, s.c);
    let d = x.data();
    let mut data = Vec::with_capacity(out.len());
    for n in 0..s.n {
        for y in 0..out.h {
            let sy = reflect(y as isize - top as isize, s.h);
            for xx in 0..out.w {
                let sx = reflect(xx as isize - left as isize, s.w);
                let off = s.index(n, sy, sx, 0);
                data.extend_from_slice(&d[off..off + s.c]);
            }
        }
    }
    Tensor::new(out, data)
}

/// Reflects any index into `0..extent` by repeated mirroring about the
/// border pixels (period `2 * (extent - 1)`).
#[inline]
fn reflect_any(i: isize, extent: usize) -> usize {
    if extent == 1 {
        return 0;
    }
    let period = 2 * (extent as isize - 1);
    let r = i.rem_euclid(period);
    if r < extent as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Crops an `h x w` window whose top-left corner is `(top, left)`. Parts of
/// the window outside the image are filled by reflection, matching
/// [`mirror_pad`] where that is defined and folding repeatedly beyond it.
pub fn crop_reflect<T: Scalar>(
    x: &Tensor<T>,
    top: isize,
    left: isize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("crop to zero extent".into()));
    }
    let s = x.shape();
    let cols: Vec<usize> = (0..w).map(|j| reflect_any(left + j as isize, s.w)).collect();
    let d = x.data();
    let mut data = Vec::with_capacity(s.n * h * w * s.c);
    for n in 0..s.n {
        for y in 0..h {
            let sy = reflect_any(top + y as isize, s.h);
            let inside = left >= 0 && left as usize + w <= s.w;
            if inside {
                let off = s.index(n, sy, left as usize, 0);
                data.extend_from_slice(&d[off..off + w * s.c]);
            } else {
                for &sx in &cols {
                    let off = s.index(n, sy, sx, 0);
                    data.extend_from_slice(&d[off..off + s.c]);
                }
            }
        }
    }
    Tensor::new(Shape::new(s.n, h, w, s.c), data)
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    let mut c = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dims("concat_channels", format!("{s} vs {first}")));
        }
        c += s.c;
    }
    let out = first.with_c(c);
    let mut data = Vec::with_capacity(out.len());
    for px in 0..first.n * first.pixels() {
        for p in parts {
            let pc = p.shape().c;
            data.extend_from_slice(&p.data()[px * pc..(px + 1) * pc]);
        }
    }
    Tensor::new(out, data)
}

/// Inverse of [`concat_channels`]: splits into pieces of the given widths.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = t.shape();
    if widths.iter().sum::<usize>() != s.c {
        return Err(Error::dims(
            "split_channels",
            format!("widths {widths:?} do not sum to {}", s.c),
        ));
    }
    let mut parts: Vec<Vec<T>> = widths
        .iter()
        .map(|&w| Vec::with_capacity(s.n * s.pixels() * w))
        .collect();
    for px in t.data().chunks(s.c) {
        let mut off = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::new(s.with_c(w), d))
        .collect()
}

/// Channel slice `[start, start + width)`.
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, start: usize, width: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if start + width > s.c || width == 0 {
        return Err(Error::dims(
            "slice_channels",
            format!("[{start}, {}) of {} channels", start + width, s.c),
        ));
    }
    let data = t
        .data()
        .chunks(s.c)
        .flat_map(|px| px[start..start + width].iter().copied())
        .collect();
    Tensor::new(s.with_c(width), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            (i * 0.37f64).sin()
        })
    }

    #[test]
    fn unfold_single_position() {
        let t = Tensor::new(Shape::new(1, 1, 1, 3), vec![1.0f32, 2.0, 3.0]).unwrap();
        let m = unfold_mode3(&t, 0);
        assert_eq!((m.rows, m.cols), (3, 1));
        assert_eq!(m.data, vec![1.0, 2.0, 3.0]);
        assert_eq!(fold_mode3(&m, 1, 1).unwrap(), t);
    }

    #[test]
    fn unfold_flattens_row_major() {
        let t = Tensor::new(Shape::new(1, 2, 2, 1), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let m = unfold_mode3(&t, 0);
        assert_eq!((m.rows, m.cols), (1, 4));
        assert_eq!(m.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fold_rejects_bad_columns() {
        let m = Matrix::<f32>::zeros(1, 5);
        assert!(matches!(
            fold_mode3(&m, 2, 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        let ones = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        // hand multiplication: [1+2, 3+4]
        assert_eq!(matmul(&a, &ones).unwrap().data, vec![3.0, 7.0]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert!(matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let eq = Matrix::from_rows(&[&[2.0f64], &[2.0], &[2.0], &[2.0]]).unwrap();
        for v in col_softmax(&eq).unwrap().data {
            assert_eq!(v, 0.25);
        }
        let single = Matrix::from_rows(&[&[-3.0f64, 0.5, 7.0]]).unwrap();
        assert_eq!(col_softmax(&single).unwrap().data, vec![1.0; 3]);
        // exp(ln 1) : exp(ln 3) = 1 : 3
        let m = Matrix::from_rows(&[&[0.0f64], &[3f64.ln()]]).unwrap();
        let s = col_softmax(&m).unwrap();
        assert!((s.data[0] - 0.25).abs() < 1e-12);
        assert!((s.data[1] - 0.75).abs() < 1e-12);
        let bad = Matrix::from_rows(&[&[f64::NAN]]).unwrap();
        assert!(matches!(col_softmax(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn same_padding_ladder() {
        assert_eq!(same_padding(128, 3, 2), (64, 0));
        assert_eq!(same_padding(5, 3, 2), (3, 1));
        assert_eq!(same_padding(7, 3, 1), (7, 1));
        assert_eq!(same_padding(4, 1, 1), (4, 0));
    }

    #[test]
    fn identity_1x1_conv() {
        let x = ramp(Shape::new(2, 3, 4, 3));
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        for c in 0..3 {
            w.set(0, 0, c, c, 1.0);
        }
        let b = Tensor::zeros(Shape::new(1, 1, 1, 3));
        assert_eq!(conv2d(&x, &w, Some(&b), 1).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::full(Shape::new(1, 3, 3, 1), 1.0f32);
        let w = Tensor::full(Shape::new(3, 3, 1, 1), 1.0f32);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.get(0, 1, 1, 0), 9.0);
        assert_eq!(y.get(0, 0, 0, 0), 4.0);
        assert_eq!(y.get(0, 2, 2, 0), 4.0);
        assert_eq!(y.get(0, 0, 1, 0), 6.0);
    }

    #[test]
    fn stride_two_halves_with_ceil() {
        let w = Tensor::full(Shape::new(3, 3, 2, 4), 0.1f32);
        let y = conv2d(&Tensor::full(Shape::new(1, 128, 128, 2), 1.0), &w, None, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 64, 64, 4));
        let y = conv2d(&Tensor::full(Shape::new(1, 5, 7, 2), 1.0), &w, None, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 4, 4));
    }

    #[test]
    fn conv_channel_mismatch() {
        let w = Tensor::full(Shape::new(3, 3, 2, 4), 0.1f32);
        let x = Tensor::full(Shape::new(1, 4, 4, 3), 1.0f32);
        assert!(matches!(
            conv2d(&x, &w, None, 1),
            Err(Error::ChannelMismatch { .. })
        ));
        assert!(matches!(
            deconv2d(&x, &w, None),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn deconv_doubles_and_places_impulse() {
        let w = Tensor::full(Shape::new(3, 3, 4, 2), 0.1f32);
        let y = deconv2d(&Tensor::full(Shape::new(1, 16, 16, 4), 1.0), &w, None).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 32, 2));

        let mut x = Tensor::zeros(Shape::new(1, 4, 4, 1));
        x.set(0, 1, 2, 0, 1.0f32);
        let mut k = Tensor::zeros(Shape::new(3, 3, 1, 1));
        k.set(1, 1, 0, 0, 1.0);
        let y = deconv2d(&x, &k, None).unwrap();
        // input (i, j) maps to output (2i + 1, 2j + 1) through the centre tap
        for (idx, &v) in y.data().iter().enumerate() {
            let expect = if idx == y.shape().index(0, 3, 5, 0) {
                1.0
            } else {
                0.0
            };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn deconv_is_adjoint_of_strided_conv() {
        // <deconv(x, w), y> == <x, conv(y, w^T)> with channel axes swapped
        let x = ramp(Shape::new(2, 5, 5, 3));
        let y = ramp(Shape::new(2, 10, 10, 2)).map(|v| v * 0.5 + 0.1);
        let w = ramp(Shape::new(3, 3, 3, 2)).map(|v| v - 0.2);
        let wt = Tensor::from_fn(Shape::new(3, 3, 2, 3), |a, b, i, o| w.get(a, b, o, i));
        let lhs = deconv2d(&x, &w, None).unwrap().dot(&y);
        let rhs = x.dot(&conv2d(&y, &wt, None, 2).unwrap());
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }

    #[test]
    fn resize_examples() {
        let x = ramp(Shape::new(1, 6, 5, 2));
        assert_eq!(resize_bilinear(&x, 6, 5).unwrap(), x);
        let c = Tensor::full(Shape::new(1, 3, 7, 1), 0.3f32);
        for v in resize_bilinear(&c, 11, 4).unwrap().data() {
            assert_eq!(*v, 0.3);
        }
        let r = Tensor::new(Shape::new(1, 2, 2, 1), vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let up = resize_bilinear(&r, 4, 4).unwrap();
        // sources for width 2 -> 4: -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1)
        for row in up.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn mirror_pad_examples() {
        let x = Tensor::new(Shape::new(1, 1, 3, 1), vec![1.0f32, 2.0, 3.0]).unwrap();
        assert_eq!(mirror_pad(&x, 0, 0, 0, 0).unwrap(), x);
        assert_eq!(mirror_pad(&x, 0, 0, 1, 0).unwrap().data(), &[2.0, 1.0, 2.0, 3.0]);
        assert_eq!(
            mirror_pad(&x, 0, 0, 2, 2).unwrap().data(),
            &[3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]
        );
        assert!(mirror_pad(&x, 0, 0, 4, 0).is_err());
        assert!(mirror_pad(&x, 0, 0, 3, 0).is_err());
    }

    #[test]
    fn concat_and_split() {
        let a = ramp(Shape::new(2, 4, 4, 2));
        let b = ramp(Shape::new(2, 4, 4, 3)).map(|v| v + 10.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 4, 4, 5));
        assert_eq!(c.get(1, 2, 3, 1), a.get(1, 2, 3, 1));
        assert_eq!(c.get(1, 2, 3, 4), b.get(1, 2, 3, 2));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(slice_channels(&c, 2, 3).unwrap(), b);
        let bad = ramp(Shape::new(2, 4, 3, 1));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn crop_reflect_in_bounds_is_plain_crop() {
        let x = ramp(Shape::new(1, 8, 8, 1));
        let c = crop_reflect(&x, 2, 3, 4, 4).unwrap();
        assert_eq!(c.get(0, 0, 0, 0), x.get(0, 2, 3, 0));
        assert_eq!(c.get(0, 3, 3, 0), x.get(0, 5, 6, 0));
        let e = crop_reflect(&x, -1, 0, 2, 2).unwrap();
        assert_eq!(e.get(0, 0, 0, 0), x.get(0, 1, 0, 0));
    }
}
