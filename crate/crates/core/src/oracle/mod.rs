//! Analytic ground truths for a Gaussian data distribution.
//!
//! When `x0 ~ N(μ, Σ)` and we observe `y = S(α_t·x0 + σ_t·ε)` on a selection
//! `S` of coordinates, the conditional of `x0` given `y` is again Gaussian
//! with closed-form mean and covariance. That closed form is the reference
//! everything else in this crate is graded against: trained denoisers should
//! approach it, ensemble error curves decompose around it, and the
//! brute-force estimators below cross-check it.

mod discrete;
mod verify;

pub use discrete::{lemma1_optimum, weighted_mse, DiscreteModel, OptimalComponent};
pub use verify::{
    ensemble_error_curve, verify_ensemble_decomposition, verify_variance_identity,
    EnsembleScenario, VerifierReport,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngExt;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::masks::Mask;
use crate::sampling::DenoiseFn;
use crate::schedule::NoiseSchedule;
use crate::tensor::Field;

/// A multivariate normal prior over flattened fields.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    /// Lower Cholesky factor of `sigma`, kept for sampling.
    chol_l: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(CoreError::shape(format!(
                "covariance is {}x{} but the mean has {d} entries",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let asym = (&sigma - sigma.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(CoreError::domain(format!(
                "covariance is not symmetric (max asymmetry {asym:.2e})"
            )));
        }
        let chol = nalgebra::linalg::Cholesky::new(sigma.clone()).ok_or_else(|| {
            CoreError::domain("covariance is not positive definite (Cholesky failed)")
        })?;
        Ok(Self { mu, sigma, chol_l: chol.l() })
    }

    /// Squared-exponential covariance on a 1-D integer grid, with a small
    /// diagonal jitter so the factorization stays robust at long lengthscales.
    pub fn squared_exponential(
        mu: DVector<f64>,
        variance: f64,
        lengthscale: f64,
    ) -> Result<Self> {
        if variance <= 0.0 || lengthscale <= 0.0 {
            return Err(CoreError::config("variance and lengthscale must be positive"));
        }
        let d = mu.len();
        let sigma = DMatrix::from_fn(d, d, |i, j| {
            let r = i as f64 - j as f64;
            let k = variance * (-r * r / (2.0 * lengthscale * lengthscale)).exp();
            if i == j { k + 1e-9 } else { k }
        });
        Self::new(mu, sigma)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mu + &self.chol_l * z
    }
}

fn check_selection(s: &[usize], d: usize) -> Result<()> {
    for w in s.windows(2) {
        if w[0] >= w[1] {
            return Err(CoreError::contract(
                "selection indices must be strictly increasing",
            ));
        }
    }
    if let Some(&last) = s.last() {
        if last >= d {
            return Err(CoreError::contract(format!(
                "selection index {last} out of range for dimension {d}"
            )));
        }
    }
    Ok(())
}

/// Conditional mean and covariance of `x0` given the noisy partial
/// observation `y = S(α_t·x0 + σ_t·ε)`:
///
/// ```text
/// mean = μ + α_t Σ Sᵀ (S(α_t²Σ + σ_t²I)Sᵀ)⁻¹ (y − α_t S μ)
/// cov  = Σ − α_t² Σ Sᵀ (S(α_t²Σ + σ_t²I)Sᵀ)⁻¹ S Σ
/// ```
///
/// An empty selection conditions on nothing and returns the prior, which is
/// also the α_t → 0 limit of the formulas above.
pub fn gaussian_posterior(
    model: &GaussianModel,
    t: f64,
    s: &[usize],
    y: &DVector<f64>,
    schedule: &NoiseSchedule,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(0.0..1.0).contains(&t) {
        return Err(CoreError::domain(format!(
            "conditioning time must lie in [0, 1), got {t}"
        )));
    }
    let d = model.dim();
    check_selection(s, d)?;
    if y.len() != s.len() {
        return Err(CoreError::shape(format!(
            "{} observed values for {} selected indices",
            y.len(),
            s.len()
        )));
    }
    if s.is_empty() {
        return Ok((model.mu.clone(), model.sigma.clone()));
    }
    let alpha = schedule.alpha(t);
    let sigma_t = schedule.sigma(t);

    // ΣSᵀ: columns of Σ at the selected indices; SΣSᵀ: their selected rows
    let sigma_st = model.sigma.select_columns(s.iter());
    let s_sigma_st = sigma_st.select_rows(s.iter());
    let k = s.len();
    let inner = &s_sigma_st * (alpha * alpha)
        + DMatrix::<f64>::identity(k, k) * (sigma_t * sigma_t);
    let chol = nalgebra::linalg::Cholesky::new(inner).ok_or_else(|| {
        CoreError::Numerical("observation covariance is singular".into())
    })?;

    let s_mu = DVector::from_iterator(k, s.iter().map(|&i| model.mu[i]));
    let resid = y - s_mu * alpha;
    let mean = &model.mu + &sigma_st * chol.solve(&resid) * alpha;
    let cov = &model.sigma
        - &sigma_st * chol.solve(&sigma_st.transpose()) * (alpha * alpha);
    Ok((mean, cov))
}

/// Monte Carlo cross-check of the posterior mean: since `(x0, y)` is jointly
/// Gaussian, `E[x0 | y]` is affine in `y`, so an ordinary least-squares fit
/// of sampled `x0` on sampled `y` evaluated at the query point is a
/// consistent estimator with standard errors from regression theory.
/// Returns per-coordinate `(estimate, standard error)`.
pub fn mc_posterior_mean_regression<R: Rng + ?Sized>(
    model: &GaussianModel,
    t: f64,
    s: &[usize],
    y: &DVector<f64>,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = model.dim();
    check_selection(s, d)?;
    let k = s.len();
    if n <= k + 2 {
        return Err(CoreError::contract("too few samples for the regression"));
    }
    let alpha = schedule.alpha(t);
    let sigma_t = schedule.sigma(t);
    let p = k + 1; // intercept plus one coefficient per observed coordinate

    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut cross = DMatrix::<f64>::zeros(p, d);
    let mut sq = DVector::<f64>::zeros(d);
    let mut row = DVector::<f64>::zeros(p);
    for _ in 0..n {
        let x0 = model.sample(rng);
        row[0] = 1.0;
        for (j, &idx) in s.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            row[j + 1] = alpha * x0[idx] + sigma_t * eps;
        }
        gram.ger(1.0, &row, &row, 1.0);
        for j in 0..d {
            for a in 0..p {
                cross[(a, j)] += row[a] * x0[j];
            }
            sq[j] += x0[j] * x0[j];
        }
    }

    let chol = nalgebra::linalg::Cholesky::new(gram.clone())
        .ok_or_else(|| CoreError::Numerical("regression Gram matrix is singular".into()))?;
    let mut query = DVector::<f64>::zeros(p);
    query[0] = 1.0;
    for j in 0..k {
        query[j + 1] = y[j];
    }
    let leverage = (query.transpose() * chol.solve(&query))[(0, 0)];

    let mut est = DVector::<f64>::zeros(d);
    let mut se = DVector::<f64>::zeros(d);
    for j in 0..d {
        let h: DVector<f64> = cross.column(j).clone_owned();
        let beta = chol.solve(&h);
        est[j] = query.dot(&beta);
        let rss = (sq[j] - h.dot(&beta)).max(0.0);
        let resid_var = rss / (n - p) as f64;
        se[j] = (resid_var * leverage).sqrt();
    }
    Ok((est, se))
}

/// The analytic posterior mean packaged as a denoiser: the context mask
/// selects the observed coordinates of the flattened field and the masked
/// input supplies their noisy values.
pub struct GaussianDenoiser<'a> {
    model: &'a GaussianModel,
    schedule: NoiseSchedule,
}

impl<'a> GaussianDenoiser<'a> {
    pub fn new(model: &'a GaussianModel, schedule: NoiseSchedule) -> Self {
        Self { model, schedule }
    }
}

impl DenoiseFn<f64> for GaussianDenoiser<'_> {
    fn eval(&self, t: f64, masked_input: &Field<f64>, ctx_mask: &Mask) -> Result<Field<f64>> {
        if masked_input.numel() != self.model.dim() {
            return Err(CoreError::shape(format!(
                "field has {} entries but the model dimension is {}",
                masked_input.numel(),
                self.model.dim()
            )));
        }
        let s: Vec<usize> = (0..ctx_mask.numel()).filter(|&i| ctx_mask.get(i)).collect();
        let y = DVector::from_iterator(s.len(), s.iter().map(|&i| masked_input.data()[i]));
        let (mean, _) = gaussian_posterior(self.model, t, &s, &y, &self.schedule)?;
        Field::new(masked_input.shape().to_vec(), mean.iter().copied().collect())
    }
}
