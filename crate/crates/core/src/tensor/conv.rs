//! Same-padding 2-D convolution over `[C, H, W]` fields, with periodic or
//! zero boundary handling, plus the two adjoint kernels the tape needs.
//!
//! Loops are arranged so the innermost work is a scaled row add / row dot on
//! contiguous slices, which the compiler vectorizes.

use serde::{Deserialize, Serialize};

use super::Field;
use crate::error::{CoreError, Result};
use crate::real::Real;

/// Boundary handling for same-padding convolution. Periodic matches the
/// periodic PDE domains of the data generators and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Periodic,
    Zero,
}

/// Validated geometry of a conv2d call.
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn validate<T: Real>(input: &Field<T>, kernel: &Field<T>) -> Result<ConvDims> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 3 {
        return Err(CoreError::shape(format!(
            "conv2d input must be [C,H,W], got {ishape:?}"
        )));
    }
    if kshape.len() != 4 {
        return Err(CoreError::shape(format!(
            "conv2d kernel must be [C_out,C_in,k,k], got {kshape:?}"
        )));
    }
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, kc_in, k, k2) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if k != k2 {
        return Err(CoreError::shape(format!(
            "conv2d kernel must be square, got {k}x{k2}"
        )));
    }
    if k % 2 == 0 {
        return Err(CoreError::config(format!(
            "conv2d kernel size must be odd, got {k}"
        )));
    }
    if kc_in != c_in {
        return Err(CoreError::shape(format!(
            "conv2d kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if h < k || w < k {
        return Err(CoreError::shape(format!(
            "conv2d spatial dims ({h},{w}) must be at least the kernel size {k}"
        )));
    }
    Ok(ConvDims { c_in, c_out, h, w, k })
}

/// Early shape check for callers that know their grid before building a
/// kernel: same-padding conv needs `h, w >= k`.
pub fn conv2d_shape_hint(h: usize, w: usize, k: usize) -> Result<()> {
    if h < k || w < k {
        return Err(CoreError::shape(format!(
            "spatial dims ({h},{w}) must be at least the kernel size {k}"
        )));
    }
    Ok(())
}

/// `dst[x] += w * src[(x + shift) mod W]` over a full row.
#[inline]
fn gather_row<T: Real>(dst: &mut [T], src: &[T], shift: usize, w: T) {
    let n = dst.len();
    let s = shift % n;
    for (d, &v) in dst[..n - s].iter_mut().zip(&src[s..]) {
        *d += w * v;
    }
    for (d, &v) in dst[n - s..].iter_mut().zip(&src[..s]) {
        *d += w * v;
    }
}

/// `dst[(x + shift) mod W] += w * src[x]` over a full row.
#[inline]
fn scatter_row<T: Real>(dst: &mut [T], src: &[T], shift: usize, w: T) {
    let n = dst.len();
    let s = shift % n;
    for (d, &v) in dst[s..].iter_mut().zip(&src[..n - s]) {
        *d += w * v;
    }
    for (d, &v) in dst[..s].iter_mut().zip(&src[n - s..]) {
        *d += w * v;
    }
}

/// `sum_x a[x] * b[(x + shift) mod W]` over a full row.
#[inline]
fn dot_row<T: Real>(a: &[T], b: &[T], shift: usize) -> T {
    let n = a.len();
    let s = shift % n;
    let mut acc = T::zero();
    for (&x, &y) in a[..n - s].iter().zip(&b[s..]) {
        acc += x * y;
    }
    for (&x, &y) in a[n - s..].iter().zip(&b[..s]) {
        acc += x * y;
    }
    acc
}

/// Same-padding cross-correlation: for tap offsets `(dy-r, dx-r)`,
/// `out[o,y,x] = sum_{i,dy,dx} in[i, y+dy-r, x+dx-r] * ker[o,i,dy,dx]`.
pub fn conv2d<T: Real>(input: &Field<T>, kernel: &Field<T>, padding: Padding) -> Result<Field<T>> {
    let dims = validate(input, kernel)?;
    let ConvDims { c_in, c_out, h, w, k } = dims;
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); c_out * h * w];
    let idata = input.data();
    let kdata = kernel.data();

    for co in 0..c_out {
        let out_c = &mut out[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let in_c = &idata[ci * h * w..(ci + 1) * h * w];
            for dy in 0..k {
                let sy = dy as isize - r;
                for dx in 0..k {
                    let sx = dx as isize - r;
                    let wgt = kdata[((co * c_in + ci) * k + dy) * k + dx];
                    match padding {
                        Padding::Periodic => {
                            let s_col = sx.rem_euclid(w as isize) as usize;
                            for y in 0..h {
                                let ys = (y as isize + sy).rem_euclid(h as isize) as usize;
                                gather_row(
                                    &mut out_c[y * w..(y + 1) * w],
                                    &in_c[ys * w..(ys + 1) * w],
                                    s_col,
                                    wgt,
                                );
                            }
                        }
                        Padding::Zero => {
                            let (xa, xb) = col_range(w, sx);
                            for y in 0..h {
                                let ys = y as isize + sy;
                                if ys < 0 || ys >= h as isize {
                                    continue;
                                }
                                let ys = ys as usize;
                                let dst = &mut out_c[y * w + xa..y * w + xb];
                                let src_off = (xa as isize + sx) as usize;
                                let src = &in_c[ys * w + src_off..ys * w + src_off + (xb - xa)];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wgt * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Field::from_parts(vec![c_out, h, w], out))
}

/// Valid output column range `[a, b)` such that `0 <= x + sx < w`.
#[inline]
fn col_range(w: usize, sx: isize) -> (usize, usize) {
    let a = (-sx).max(0) as usize;
    let b = ((w as isize - sx).min(w as isize)).max(0) as usize;
    (a, b.max(a))
}

/// Adjoint w.r.t. the input: scatters `d_out` back through the taps.
pub(crate) fn conv2d_backward_input<T: Real>(
    d_out: &Field<T>,
    kernel: &Field<T>,
    padding: Padding,
    input_shape: &[usize],
) -> Field<T> {
    let kshape = kernel.shape();
    let (c_out, c_in, k) = (kshape[0], kshape[1], kshape[2]);
    let (h, w) = (input_shape[1], input_shape[2]);
    let r = (k / 2) as isize;
    let mut d_in = vec![T::zero(); c_in * h * w];
    let kdata = kernel.data();
    let odata = d_out.data();

    for co in 0..c_out {
        let dout_c = &odata[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let din_c = &mut d_in[ci * h * w..(ci + 1) * h * w];
            for dy in 0..k {
                let sy = dy as isize - r;
                for dx in 0..k {
                    let sx = dx as isize - r;
                    let wgt = kdata[((co * c_in + ci) * k + dy) * k + dx];
                    match padding {
                        Padding::Periodic => {
                            let s_col = sx.rem_euclid(w as isize) as usize;
                            for y in 0..h {
                                let ys = (y as isize + sy).rem_euclid(h as isize) as usize;
                                scatter_row(
                                    &mut din_c[ys * w..(ys + 1) * w],
                                    &dout_c[y * w..(y + 1) * w],
                                    s_col,
                                    wgt,
                                );
                            }
                        }
                        Padding::Zero => {
                            let (xa, xb) = col_range(w, sx);
                            for y in 0..h {
                                let ys = y as isize + sy;
                                if ys < 0 || ys >= h as isize {
                                    continue;
                                }
                                let ys = ys as usize;
                                let src = &dout_c[y * w + xa..y * w + xb];
                                let dst_off = (xa as isize + sx) as usize;
                                let dst =
                                    &mut din_c[ys * w + dst_off..ys * w + dst_off + (xb - xa)];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d += wgt * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Field::from_parts(vec![c_in, h, w], d_in)
}

/// Adjoint w.r.t. the kernel: per-tap correlation of `d_out` with the input.
pub(crate) fn conv2d_backward_kernel<T: Real>(
    d_out: &Field<T>,
    input: &Field<T>,
    padding: Padding,
    kernel_shape: &[usize],
) -> Field<T> {
    let (c_out, c_in, k) = (kernel_shape[0], kernel_shape[1], kernel_shape[2]);
    let ishape = input.shape();
    let (h, w) = (ishape[1], ishape[2]);
    let r = (k / 2) as isize;
    let mut d_ker = vec![T::zero(); c_out * c_in * k * k];
    let idata = input.data();
    let odata = d_out.data();

    for co in 0..c_out {
        let dout_c = &odata[co * h * w..(co + 1) * h * w];
        for ci in 0..c_in {
            let in_c = &idata[ci * h * w..(ci + 1) * h * w];
            for dy in 0..k {
                let sy = dy as isize - r;
                for dx in 0..k {
                    let sx = dx as isize - r;
                    let mut acc = T::zero();
                    match padding {
                        Padding::Periodic => {
                            let s_col = sx.rem_euclid(w as isize) as usize;
                            for y in 0..h {
                                let ys = (y as isize + sy).rem_euclid(h as isize) as usize;
                                acc += dot_row(
                                    &dout_c[y * w..(y + 1) * w],
                                    &in_c[ys * w..(ys + 1) * w],
                                    s_col,
                                );
                            }
                        }
                        Padding::Zero => {
                            let (xa, xb) = col_range(w, sx);
                            for y in 0..h {
                                let ys = y as isize + sy;
                                if ys < 0 || ys >= h as isize {
                                    continue;
                                }
                                let ys = ys as usize;
                                let a = &dout_c[y * w + xa..y * w + xb];
                                let src_off = (xa as isize + sx) as usize;
                                let b = &in_c[ys * w + src_off..ys * w + src_off + (xb - xa)];
                                for (&x, &v) in a.iter().zip(b) {
                                    acc += x * v;
                                }
                            }
                        }
                    }
                    d_ker[((co * c_in + ci) * k + dy) * k + dx] = acc;
                }
            }
        }
    }
    Field::from_parts(kernel_shape.to_vec(), d_ker)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_field(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Field<f64> {
        Field::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn identity_kernel(c: usize, k: usize) -> Field<f64> {
        let mut ker = Field::zeros(vec![c, c, k, k]);
        let r = k / 2;
        for ch in 0..c {
            let idx = ((ch * c + ch) * k + r) * k + r;
            ker.data_mut()[idx] = 1.0;
        }
        ker
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_field(vec![2, 5, 4], &mut rng);
        for padding in [Padding::Periodic, Padding::Zero] {
            let y = conv2d(&x, &identity_kernel(2, 3), padding).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn ones_kernel_on_constant_field_sums_taps_periodically() {
        let x = Field::full(vec![1, 4, 4], 2.0f64);
        let ker = Field::full(vec![1, 1, 3, 3], 1.0f64);
        let y = conv2d(&x, &ker, Padding::Periodic).unwrap();
        for &v in y.data() {
            assert!((v - 18.0).abs() < 1e-12); // 9 taps * 2.0
        }
    }

    #[test]
    fn zero_padding_truncates_taps_at_the_corner() {
        let x = Field::full(vec![1, 4, 4], 1.0f64);
        let ker = Field::full(vec![1, 1, 3, 3], 1.0f64);
        let y = conv2d(&x, &ker, Padding::Zero).unwrap();
        // corner sees a 2x2 neighborhood, edge a 2x3, interior the full 3x3
        assert!((y.data()[0] - 4.0).abs() < 1e-12);
        assert!((y.data()[1] - 6.0).abs() < 1e-12);
        assert!((y.data()[5] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn even_kernel_is_a_config_error() {
        let x: Field<f64> = Field::zeros(vec![1, 4, 4]);
        let ker: Field<f64> = Field::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            conv2d(&x, &ker, Padding::Periodic),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn kernel_larger_than_input_is_a_shape_error() {
        let x: Field<f64> = Field::zeros(vec![1, 2, 2]);
        let ker: Field<f64> = Field::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(
            conv2d(&x, &ker, Padding::Periodic),
            Err(CoreError::Shape(_))
        ));
    }

    /// <conv(x), y> == <x, conv_adjoint(y)>: the input adjoint is exactly the
    /// transpose of the forward map.
    #[test]
    fn input_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for padding in [Padding::Periodic, Padding::Zero] {
            for _ in 0..5 {
                let x = random_field(vec![2, 6, 5], &mut rng);
                let ker = random_field(vec![3, 2, 3, 3], &mut rng);
                let y = random_field(vec![3, 6, 5], &mut rng);
                let lhs = conv2d(&x, &ker, padding).unwrap().dot(&y).unwrap();
                let rhs = conv2d_backward_input(&y, &ker, padding, x.shape())
                    .dot(&x)
                    .unwrap();
                assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
            }
        }
    }

    /// <conv(x; K), y> == <K, kernel_adjoint(y, x)>.
    #[test]
    fn kernel_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for padding in [Padding::Periodic, Padding::Zero] {
            for _ in 0..5 {
                let x = random_field(vec![2, 5, 7], &mut rng);
                let ker = random_field(vec![2, 2, 3, 3], &mut rng);
                let y = random_field(vec![2, 5, 7], &mut rng);
                let lhs = conv2d(&x, &ker, padding).unwrap().dot(&y).unwrap();
                let rhs = conv2d_backward_kernel(&y, &x, padding, ker.shape())
                    .dot(&ker)
                    .unwrap();
                assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
            }
        }
    }
}
