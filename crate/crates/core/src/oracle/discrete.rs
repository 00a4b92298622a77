//! Brute-force optimum of the weighted regression problem on finite support.
//!
//! For jointly distributed `(X, Y, Z)` with finite support, the minimizer of
//! `E‖Z ⊙ (g(Y) − X)‖²` over functions `g` is, component-wise,
//!
//! ```text
//! g*(y)_k = E[Z_k²·X_k | Y = y] / E[Z_k² | Y = y]
//! ```
//!
//! wherever the denominator is positive; components whose weight vanishes
//! given `y` never contribute to the loss and are flagged as arbitrary.
//! Everything here is exhaustive enumeration — no sampling, no model.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

/// A finitely supported distribution over vectors.
#[derive(Debug, Clone)]
pub struct DiscreteModel {
    support: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl DiscreteModel {
    pub fn new(support: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(CoreError::config("support must be non-empty"));
        }
        let d = support[0].len();
        if support.iter().any(|x| x.len() != d) {
            return Err(CoreError::shape("support vectors have mixed dimensions"));
        }
        if probs.len() != support.len() {
            return Err(CoreError::shape(format!(
                "{} probabilities for {} support points",
                probs.len(),
                support.len()
            )));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(CoreError::config("probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::config(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { support, probs })
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, &[f64], f64)> {
        self.support
            .iter()
            .zip(&self.probs)
            .enumerate()
            .map(|(i, (x, &p))| (i, x.as_slice(), p))
    }
}

/// One component of the tabulated optimum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimalComponent {
    Value(f64),
    /// The weight is zero almost surely given this `y`; any value is optimal.
    Arbitrary,
}

/// Conditional weight distribution: for support index `i` of `X`, the list of
/// `(z, probability)` pairs. Probabilities must sum to one per index.
pub type ZDist<'a> = dyn Fn(usize) -> Vec<(Vec<f64>, f64)> + 'a;

/// Deterministic label of the conditioning variable from `(x index, z)`.
pub type YMap<'a> = dyn Fn(usize, &[f64]) -> u64 + 'a;

/// Exhaustively tabulates the component-wise optimum `g*(y)` for every label
/// in the support of `Y`.
pub fn lemma1_optimum(
    model: &DiscreteModel,
    z_dist: &ZDist,
    y_map: &YMap,
) -> Result<BTreeMap<u64, Vec<OptimalComponent>>> {
    let d = model.dim();
    let mut num: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut den: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (i, x, p) in model.points() {
        let zs = z_dist(i);
        let z_total: f64 = zs.iter().map(|(_, q)| q).sum();
        if (z_total - 1.0).abs() > 1e-9 {
            return Err(CoreError::contract(format!(
                "weight distribution at support point {i} sums to {z_total}"
            )));
        }
        for (z, q) in zs {
            if z.len() != d {
                return Err(CoreError::shape(format!(
                    "weight vector of length {} for dimension {d}",
                    z.len()
                )));
            }
            let w = p * q;
            if w == 0.0 {
                continue;
            }
            let y = y_map(i, &z);
            let n = num.entry(y).or_insert_with(|| vec![0.0; d]);
            let m = den.entry(y).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                let zz = z[k] * z[k];
                n[k] += w * zz * x[k];
                m[k] += w * zz;
            }
        }
    }
    let mut table = BTreeMap::new();
    for (y, n) in num {
        let m = &den[&y];
        let row = n
            .iter()
            .zip(m)
            .map(|(&nk, &mk)| {
                if mk > 1e-15 {
                    OptimalComponent::Value(nk / mk)
                } else {
                    OptimalComponent::Arbitrary
                }
            })
            .collect();
        table.insert(y, row);
    }
    Ok(table)
}

/// The exhaustively computed objective `E‖Z ⊙ (g(Y) − X)‖²` for a tabulated
/// `g`. Arbitrary components must only occur where the weight vanishes.
pub fn weighted_mse(
    model: &DiscreteModel,
    z_dist: &ZDist,
    y_map: &YMap,
    g: &BTreeMap<u64, Vec<OptimalComponent>>,
) -> Result<f64> {
    let d = model.dim();
    let mut loss = 0.0;
    for (i, x, p) in model.points() {
        for (z, q) in z_dist(i) {
            let w = p * q;
            if w == 0.0 {
                continue;
            }
            let y = y_map(i, &z);
            let row = g
                .get(&y)
                .ok_or_else(|| CoreError::contract(format!("no table row for label {y}")))?;
            for k in 0..d {
                let zz = z[k] * z[k];
                if zz == 0.0 {
                    continue;
                }
                match row[k] {
                    OptimalComponent::Value(v) => {
                        let diff = v - x[k];
                        loss += w * zz * diff * diff;
                    }
                    OptimalComponent::Arbitrary => {
                        return Err(CoreError::contract(format!(
                            "component {k} is arbitrary but its weight is positive at label {y}"
                        )));
                    }
                }
            }
        }
    }
    Ok(loss)
}
