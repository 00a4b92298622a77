//! Radix-2 FFT over 2-D complex grids, used by the spectral flow solver and
//! the exact-translation evaluation metric.
//!
//! Forward transform is unnormalized; the inverse carries the full `1/(H*W)`
//! factor, so `ifft2(fft2(x)) == x` up to roundoff. Twiddles are evaluated in
//! f64 per entry rather than recurrence-accumulated, keeping the roundtrip
//! error near machine epsilon even for f32 grids.

use num_complex::Complex;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Dense row-major complex grid of shape `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField<T> {
    h: usize,
    w: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexField<T> {
    pub fn new(h: usize, w: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != h * w {
            return Err(CoreError::shape(format!(
                "complex grid [{h},{w}] needs {} entries, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![Complex::new(T::zero(), T::zero()); h * w] }
    }

    /// Lifts a real row-major grid into the complex plane.
    pub fn from_real(h: usize, w: usize, values: &[T]) -> Result<Self> {
        if values.len() != h * w {
            return Err(CoreError::shape(format!(
                "complex grid [{h},{w}] needs {} entries, got {}",
                h * w,
                values.len()
            )));
        }
        let data = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        Ok(Self { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn real_part(&self) -> Vec<T> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn sum_sq_modulus(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Signed frequency for bin `i` of an `n`-point transform: `0,1,..,n/2,-(n/2-1),..,-1`.
#[inline]
pub fn freq_index(n: usize, i: usize) -> isize {
    if i <= n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

fn require_power_of_two(n: usize, axis: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(CoreError::config(format!(
            "fft2 requires power-of-two grid dims, {axis} = {n}"
        )));
    }
    Ok(())
}

/// `table[j] = exp(sign * 2*pi*i * j / n)` for `j < n/2`.
fn twiddles<T: Real>(n: usize, sign: f64) -> Vec<Complex<T>> {
    (0..n / 2)
        .map(|j| {
            let angle = sign * 2.0 * std::f64::consts::PI * j as f64 / n as f64;
            Complex::new(T::of(angle.cos()), T::of(angle.sin()))
        })
        .collect()
}

/// In-place iterative radix-2 butterfly pass; `data.len()` must be a power of two.
fn fft_1d<T: Real>(data: &mut [Complex<T>], table: &[Complex<T>]) {
    let n = data.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        let mut start = 0;
        while start < n {
            for j in 0..half {
                let tw = table[j * stride];
                let a = data[start + j];
                let b = data[start + j + half] * tw;
                data[start + j] = a + b;
                data[start + j + half] = a - b;
            }
            start += len;
        }
        len *= 2;
    }
}

fn transform<T: Real>(x: &ComplexField<T>, sign: f64) -> Result<ComplexField<T>> {
    require_power_of_two(x.h, "height")?;
    require_power_of_two(x.w, "width")?;
    let (h, w) = (x.h, x.w);
    let mut out = x.clone();

    let row_table = twiddles::<T>(w, sign);
    for y in 0..h {
        fft_1d(&mut out.data[y * w..(y + 1) * w], &row_table);
    }

    let col_table = twiddles::<T>(h, sign);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for xcol in 0..w {
        for y in 0..h {
            col[y] = out.data[y * w + xcol];
        }
        fft_1d(&mut col, &col_table);
        for y in 0..h {
            out.data[y * w + xcol] = col[y];
        }
    }
    Ok(out)
}

/// Unnormalized forward 2-D DFT. Grid dims must be powers of two.
pub fn fft2<T: Real>(x: &ComplexField<T>) -> Result<ComplexField<T>> {
    transform(x, -1.0)
}

/// Inverse 2-D DFT including the `1/(H*W)` normalization.
pub fn ifft2<T: Real>(x: &ComplexField<T>) -> Result<ComplexField<T>> {
    let mut out = transform(x, 1.0)?;
    let scale = T::of(1.0 / (x.h * x.w) as f64);
    for c in out.data.iter_mut() {
        *c = Complex::new(c.re * scale, c.im * scale);
    }
    Ok(out)
}
