//! Small streaming statistics used across diagnostics and verifiers.

/// Welford running mean/variance accumulator: single pass, no catastrophic
/// cancellation, O(1) memory.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 until two observations arrive.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Least-squares fit of `y ≈ a + b / k` via the 2x2 normal equations.
/// Returns `(a, b)`. Panics are avoided by requiring two distinct k values.
pub fn fit_inverse_k(ks: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if ks.len() != ys.len() || ks.len() < 2 {
        return None;
    }
    let n = ks.len() as f64;
    let mut su = 0.0; // sum of 1/k
    let mut suu = 0.0; // sum of (1/k)^2
    let mut sy = 0.0;
    let mut suy = 0.0;
    for (&k, &y) in ks.iter().zip(ys) {
        let u = 1.0 / k;
        su += u;
        suu += u * u;
        sy += y;
        suy += u * y;
    }
    let det = n * suu - su * su;
    if det.abs() < 1e-12 * n * suu.max(1.0) {
        return None; // all k equal: slope unidentifiable
    }
    let b = (n * suy - su * sy) / det;
    let a = (sy - b * su) / n;
    Some((a, b))
}

/// Half-width of the 3-sigma normal-approximation band for a binomial
/// proportion estimated from `n` draws.
pub fn three_sigma_binomial(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Exponential moving average sequence with smoothing factor `alpha`
/// (weight of the new observation); seeded at the first value.
pub fn ema(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = f64::NAN;
    for (i, &v) in values.iter().enumerate() {
        acc = if i == 0 { v } else { alpha * v + (1.0 - alpha) * acc };
        out.push(acc);
    }
    out
}
