//! Ensemble imputation samplers.
//!
//! The single-step sampler perturbs the observation with minimal noise,
//! evaluates the denoiser under `K` independently drawn context masks, and
//! averages; the multi-step sampler runs the deterministic reverse ODE from
//! near-pure noise, steering observed entries toward their known values and
//! unobserved entries toward a weighted blend of the per-step model
//! prediction and a precomputed imputation expectation.
//!
//! Both samplers end by splicing the observed entries back in verbatim, so
//! `output ⊙ M == x_obs ⊙ M` holds bitwise.

use rand::Rng;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, DenoiserParams};
use crate::error::{CoreError, Result};
use crate::masks::{sample_mask, sample_partition, Mask, MaskSpec, PartitionSpec};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::tensor::Field;

/// A denoiser under test: anything that maps `(t, context-masked field,
/// context mask)` to a prediction of the clean field. Implemented by the
/// trained network and, in verification, by analytic posterior means.
pub trait DenoiseFn<T: Real> {
    fn eval(&self, t: f64, masked_input: &Field<T>, ctx_mask: &Mask) -> Result<Field<T>>;
}

impl<T: Real, F> DenoiseFn<T> for F
where
    F: Fn(f64, &Field<T>, &Mask) -> Result<Field<T>>,
{
    fn eval(&self, t: f64, masked_input: &Field<T>, ctx_mask: &Mask) -> Result<Field<T>> {
        self(t, masked_input, ctx_mask)
    }
}

/// The trained network as a [`DenoiseFn`].
pub struct NetDenoiser<'a, T> {
    params: &'a DenoiserParams<T>,
}

impl<'a, T: Real> NetDenoiser<'a, T> {
    pub fn new(params: &'a DenoiserParams<T>) -> Self {
        Self { params }
    }
}

impl<T: Real> DenoiseFn<T> for NetDenoiser<'_, T> {
    fn eval(&self, t: f64, masked_input: &Field<T>, ctx_mask: &Mask) -> Result<Field<T>> {
        denoiser::forward(self.params, t, masked_input, ctx_mask)
    }
}

/// Weight on the per-step model prediction in the multi-step blend
/// `x̂ = ω(t)·prediction + (1 − ω(t))·imputation_expectation`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKind {
    /// ω(t) = t.
    #[default]
    T,
    /// ω(t) = t².
    TSquared,
    /// ω ≡ 1: ignore the imputation expectation entirely.
    #[serde(rename = "none")]
    Unweighted,
    /// ω ≡ 0: pin the blend to the imputation expectation (diagnostics).
    Zero,
}

impl OmegaKind {
    pub fn weight(self, t: f64) -> f64 {
        match self {
            OmegaKind::T => t,
            OmegaKind::TSquared => t * t,
            OmegaKind::Unweighted => 1.0,
            OmegaKind::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Ensemble size.
    pub k: usize,
    /// Minimal-noise time for single-step evaluation and the endpoint of the
    /// multi-step grid.
    pub delta: f64,
    /// Number of reverse-ODE steps in the multi-step sampler.
    pub steps: usize,
    pub omega: OmegaKind,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { k: 16, delta: 1e-3, steps: 200, omega: OmegaKind::T, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::config("ensemble size must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(CoreError::config(format!(
                "delta must be a small positive time, got {}",
                self.delta
            )));
        }
        if self.steps == 0 {
            return Err(CoreError::config("multi-step sampler needs at least one step"));
        }
        Ok(())
    }
}

fn check_inputs<T: Real>(x_obs: &Field<T>, mask: &Mask, config: &SamplerConfig) -> Result<()> {
    config.validate()?;
    if x_obs.shape() != mask.shape() {
        return Err(CoreError::shape(format!(
            "observation shape {:?} does not match mask shape {:?}",
            x_obs.shape(),
            mask.shape()
        )));
    }
    if mask.is_all_zero() {
        return Err(CoreError::EmptyMask("imputation needs at least one observed entry".into()));
    }
    Ok(())
}

/// Mean of `K` denoiser evaluations at time `delta` on a shared minimally
/// noised observation, each under a freshly drawn context mask.
fn ensemble_raw_mean<T: Real, D: DenoiseFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_obs: &Field<T>,
    mask: &Mask,
    part_spec: &PartitionSpec,
    k: usize,
    delta: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Field<T>> {
    let eps = Field::from_fn(x_obs.shape().to_vec(), |_| {
        T::of(rng.sample::<f64, _>(StandardNormal))
    });
    let x_delta = schedule.perturb(x_obs, delta, &eps)?;
    let mut acc = Field::zeros(x_obs.shape().to_vec());
    for _ in 0..k {
        let (ctx, _) = sample_partition(mask, part_spec, rng)?;
        let input = ctx.apply(&x_delta)?;
        let pred = model.eval(delta, &input, &ctx)?;
        acc.add_scaled(&pred, T::one())?;
    }
    Ok(acc.mul_scalar(T::of(1.0 / k as f64)))
}

/// Single-step ensemble imputation: average `K` context-conditioned
/// predictions at minimal noise, then splice the observed entries back in.
pub fn single_step_impute<T: Real, D: DenoiseFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_obs: &Field<T>,
    mask: &Mask,
    part_spec: &PartitionSpec,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Field<T>> {
    check_inputs(x_obs, mask, config)?;
    let mean = ensemble_raw_mean(
        model, x_obs, mask, part_spec, config.k, config.delta, schedule, rng,
    )?;
    mask.select(x_obs, &mean)
}

/// One `(K, squared error)` row of an ensemble convergence curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EnsemblePoint {
    pub k: usize,
    pub sq_err: f64,
}

/// For each ensemble size, the mean squared L2 error of the raw ensemble
/// mean against a caller-supplied reference (typically an analytic
/// conditional expectation), averaged over `n_trials` independent runs.
/// The resulting curve is what `err(K) = a + b/K` is fitted to.
pub fn ensemble_mean_curve<T: Real, D: DenoiseFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_obs: &Field<T>,
    mask: &Mask,
    part_spec: &PartitionSpec,
    reference: &Field<T>,
    k_list: &[usize],
    n_trials: usize,
    delta: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<EnsemblePoint>> {
    if n_trials == 0 {
        return Err(CoreError::contract("ensemble_mean_curve needs at least one trial"));
    }
    if reference.shape() != x_obs.shape() {
        return Err(CoreError::shape(format!(
            "reference shape {:?} does not match observation shape {:?}",
            reference.shape(),
            x_obs.shape()
        )));
    }
    let mut curve = Vec::with_capacity(k_list.len());
    for &k in k_list {
        if k == 0 {
            return Err(CoreError::config("ensemble sizes must be at least 1"));
        }
        let mut err_acc = 0.0;
        for _ in 0..n_trials {
            let mean =
                ensemble_raw_mean(model, x_obs, mask, part_spec, k, delta, schedule, rng)?;
            let diff = mean.sub(reference)?;
            err_acc += diff.dot(&diff)?.wide();
        }
        curve.push(EnsemblePoint { k, sq_err: err_acc / n_trials as f64 });
    }
    Ok(curve)
}

// bounded retry for the rare all-zero draw from a pixelwise mask distribution
fn sample_nonempty_mask<R: Rng + ?Sized>(
    spec: &MaskSpec,
    shape: &[usize],
    rng: &mut R,
) -> Result<Mask> {
    for _ in 0..100 {
        let m = sample_mask(spec, shape, rng)?;
        if !m.is_all_zero() {
            return Ok(m);
        }
    }
    Err(CoreError::InfeasibleConditioning(
        "mask distribution keeps producing empty masks".into(),
    ))
}

/// Multi-step imputation: reverse-ODE from near-pure noise on a uniform time
/// grid over `[delta, 1 − delta]`. Each step blends the model's prediction
/// under one fresh context mask with a precomputed imputation expectation,
/// then advances with noise spliced from the observation on observed entries.
pub fn multi_step_impute<T: Real, D: DenoiseFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_obs: &Field<T>,
    mask: &Mask,
    mask_spec: &MaskSpec,
    part_spec: &PartitionSpec,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Field<T>> {
    check_inputs(x_obs, mask, config)?;
    let imputation = single_step_impute(
        model, x_obs, mask, part_spec, config, schedule, rng,
    )?;

    let shape = x_obs.shape().to_vec();
    let mut x = Field::from_fn(shape.clone(), |_| {
        T::of(rng.sample::<f64, _>(StandardNormal))
    });
    let (start, end) = (1.0 - config.delta, config.delta);
    let n = config.steps;
    let grid: Vec<f64> = (0..=n)
        .map(|i| start + (end - start) * i as f64 / n as f64)
        .collect();

    for w in grid.windows(2) {
        let (s, t) = (w[0], w[1]);
        let fresh = sample_nonempty_mask(mask_spec, &shape, rng)?;
        let (ctx, _) = sample_partition(&fresh, part_spec, rng)?;
        let pred = model.eval(s, &ctx.apply(&x)?, &ctx)?;
        let omega = T::of(config.omega.weight(s));
        let x_hat = pred
            .mul_scalar(omega)
            .add(&imputation.mul_scalar(T::one() - omega))?;
        let eps_unobs = schedule.data_to_noise(&x, &x_hat, s)?;
        let eps_obs = schedule.data_to_noise(&x, x_obs, s)?;
        let eps_full = mask.select(&eps_obs, &eps_unobs)?;
        x = schedule.ode_step(s, t, &x, &eps_full)?;
    }
    mask.select(x_obs, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::PartitionStrategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn part_spec() -> PartitionSpec {
        PartitionSpec {
            strategy: PartitionStrategy::PixelLevel,
            ctx_ratio: 0.5,
            qry_ratio: 0.7,
        }
    }

    fn checkerboard_mask(shape: Vec<usize>) -> Mask {
        let mut m = Mask::zeros(shape);
        for i in 0..m.numel() {
            m.set(i, i % 2 == 0);
        }
        m
    }

    /// A deterministic stand-in model: doubles the masked input and adds the
    /// context mask, so the output depends on every argument.
    fn affine_model(
        t: f64,
        input: &Field<f64>,
        ctx: &Mask,
    ) -> crate::error::Result<Field<f64>> {
        let two = input.mul_scalar(2.0);
        let shifted = two.add(&ctx.to_field())?;
        Ok(shifted.add_scalar(t))
    }

    #[test]
    fn k1_single_step_is_one_forward_pass_plus_splice() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let x_obs = Field::from_fn(vec![1, 4, 4], |i| (i as f64).sin());
        let mask = checkerboard_mask(vec![1, 4, 4]);
        let config = SamplerConfig { k: 1, ..Default::default() };
        let schedule = NoiseSchedule::cosine_vp();

        let mut replay = rng.clone();
        let out = single_step_impute(
            &affine_model, &x_obs, &mask, &part_spec(), &config, &schedule, &mut rng,
        )
        .unwrap();

        // replay the identical draw sequence by hand
        let eps = Field::from_fn(vec![1, 4, 4], |_| {
            replay.sample::<f64, _>(StandardNormal)
        });
        let x_delta = schedule.perturb(&x_obs, config.delta, &eps).unwrap();
        let (ctx, _) = sample_partition(&mask, &part_spec(), &mut replay).unwrap();
        let pred =
            affine_model(config.delta, &ctx.apply(&x_delta).unwrap(), &ctx).unwrap();
        let expected = mask.select(&x_obs, &pred).unwrap();
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn observed_entries_come_back_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let x_obs = Field::from_fn(vec![1, 4, 4], |i| 0.37 * i as f64 - 1.0);
        let mask = checkerboard_mask(vec![1, 4, 4]);
        let config = SamplerConfig { k: 3, steps: 8, ..Default::default() };
        let schedule = NoiseSchedule::cosine_vp();

        let single = single_step_impute(
            &affine_model, &x_obs, &mask, &part_spec(), &config, &schedule, &mut rng,
        )
        .unwrap();
        let multi = multi_step_impute(
            &affine_model,
            &x_obs,
            &mask,
            &MaskSpec::PixelIid { rate: 0.8 },
            &part_spec(),
            &config,
            &schedule,
            &mut rng,
        )
        .unwrap();
        for i in 0..mask.numel() {
            if mask.get(i) {
                assert_eq!(single.data()[i], x_obs.data()[i], "single, dim {i}");
                assert_eq!(multi.data()[i], x_obs.data()[i], "multi, dim {i}");
            }
        }
    }

    #[test]
    fn ensemble_output_is_the_mean_of_member_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let x_obs = Field::from_fn(vec![1, 2, 2], |i| i as f64);
        let mask = checkerboard_mask(vec![1, 2, 2]);
        let counter = Cell::new(0.0f64);
        // member k returns the constant field k+1
        let model = |_t: f64, input: &Field<f64>, _ctx: &Mask| {
            counter.set(counter.get() + 1.0);
            Ok(Field::full(input.shape().to_vec(), counter.get()))
        };
        let config = SamplerConfig { k: 4, ..Default::default() };
        let out = single_step_impute(
            &model,
            &x_obs,
            &mask,
            &part_spec(),
            &config,
            &NoiseSchedule::cosine_vp(),
            &mut rng,
        )
        .unwrap();
        // mean of 1..=4 on unobserved entries
        for i in 0..mask.numel() {
            if !mask.get(i) {
                assert!((out.data()[i] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_masks_are_rejected_by_both_samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let x_obs: Field<f64> = Field::zeros(vec![1, 2, 2]);
        let empty = Mask::zeros(vec![1, 2, 2]);
        let config = SamplerConfig::default();
        let schedule = NoiseSchedule::cosine_vp();
        let single = single_step_impute(
            &affine_model, &x_obs, &empty, &part_spec(), &config, &schedule, &mut rng,
        );
        assert!(matches!(single, Err(CoreError::EmptyMask(_))));
        let multi = multi_step_impute(
            &affine_model,
            &x_obs,
            &empty,
            &MaskSpec::PixelIid { rate: 0.8 },
            &part_spec(),
            &config,
            &schedule,
            &mut rng,
        );
        assert!(matches!(multi, Err(CoreError::EmptyMask(_))));
    }

    #[test]
    fn fully_observed_multi_step_returns_the_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let x_obs = Field::from_fn(vec![1, 3, 3], |i| (i as f64) * 0.11 - 0.4);
        let mask = Mask::ones(vec![1, 3, 3]);
        let config = SamplerConfig { k: 2, steps: 5, ..Default::default() };
        let out = multi_step_impute(
            &affine_model,
            &x_obs,
            &mask,
            &MaskSpec::PixelIid { rate: 0.9 },
            &part_spec(),
            &config,
            &NoiseSchedule::cosine_vp(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.data(), x_obs.data());
    }

    #[test]
    fn omega_zero_pins_unobserved_entries_to_the_imputation_expectation() {
        // with ω ≡ 0 and a constant model, every step's data estimate is the
        // imputation expectation, so the reverse ODE contracts onto it
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let x_obs = Field::from_fn(vec![1, 3, 3], |i| 0.2 * i as f64);
        let mask = checkerboard_mask(vec![1, 3, 3]);
        let target = 0.7;
        let model = move |_t: f64, input: &Field<f64>, _ctx: &Mask| {
            Ok(Field::full(input.shape().to_vec(), target))
        };
        let config = SamplerConfig {
            k: 2,
            steps: 50,
            omega: OmegaKind::Zero,
            ..Default::default()
        };
        let out = multi_step_impute(
            &model,
            &x_obs,
            &mask,
            &MaskSpec::PixelIid { rate: 0.8 },
            &part_spec(),
            &config,
            &NoiseSchedule::cosine_vp(),
            &mut rng,
        )
        .unwrap();
        for i in 0..mask.numel() {
            if !mask.get(i) {
                assert!(
                    (out.data()[i] - target).abs() < 1e-2,
                    "dim {i}: {} vs {target}",
                    out.data()[i]
                );
            }
        }
    }

    #[test]
    fn omega_weights_are_monotone_and_bounded() {
        for kind in [OmegaKind::T, OmegaKind::TSquared, OmegaKind::Unweighted, OmegaKind::Zero]
        {
            assert!(kind.weight(0.0) >= 0.0);
            assert!(kind.weight(1.0) <= 1.0);
            let mut prev = kind.weight(0.0);
            for i in 1..=100 {
                let w = kind.weight(i as f64 / 100.0);
                assert!(w >= prev - 1e-15, "{kind:?} decreased at {i}");
                prev = w;
            }
        }
    }

    #[test]
    fn unobserved_variance_decays_inversely_with_ensemble_size() {
        // the model answers with the context-mask density, so ensemble
        // variance comes purely from the random context draws
        let model = |_t: f64, input: &Field<f64>, ctx: &Mask| {
            let density =
                ctx.bits().iter().map(|&b| b as f64).sum::<f64>() / ctx.numel() as f64;
            Ok(Field::full(input.shape().to_vec(), density))
        };
        let x_obs = Field::from_fn(vec![1, 4, 4], |i| i as f64 * 0.1);
        let mask = checkerboard_mask(vec![1, 4, 4]);
        let schedule = NoiseSchedule::cosine_vp();
        let mut rng = ChaCha8Rng::seed_from_u64(96);
        let n_runs = 2000;

        let mut traces = Vec::new();
        for k in [1usize, 4, 16] {
            let config = SamplerConfig { k, ..Default::default() };
            let mut welford: Vec<crate::stats::Welford> =
                (0..mask.numel()).map(|_| crate::stats::Welford::new()).collect();
            for _ in 0..n_runs {
                let out = single_step_impute(
                    &model, &x_obs, &mask, &part_spec(), &config, &schedule, &mut rng,
                )
                .unwrap();
                for (w, &v) in welford.iter_mut().zip(out.data()) {
                    w.push(v);
                }
            }
            let trace: f64 = (0..mask.numel())
                .filter(|&i| !mask.get(i))
                .map(|i| welford[i].variance())
                .sum();
            traces.push(trace);
        }
        for (i, &k) in [4.0f64, 16.0].iter().enumerate() {
            let ratio = traces[0] / traces[i + 1];
            assert!(
                (ratio / k - 1.0).abs() < 0.15,
                "variance ratio at K={k}: {ratio}"
            );
        }
    }

    #[test]
    fn ensemble_curve_matches_the_inverse_k_law_for_a_pure_variance_model() {
        // reference equals the model's mean answer, so the fitted intercept
        // should vanish and the curve should be pure b/K
        let model = |_t: f64, input: &Field<f64>, ctx: &Mask| {
            let density =
                ctx.bits().iter().map(|&b| b as f64).sum::<f64>() / ctx.numel() as f64;
            Ok(Field::full(input.shape().to_vec(), density))
        };
        let x_obs = Field::from_fn(vec![1, 4, 4], |i| i as f64 * 0.05);
        let mask = Mask::ones(vec![1, 4, 4]);
        // E[density] = rate of the context draw over all 16 dims = 0.5
        let reference = Field::full(vec![1, 4, 4], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let curve = ensemble_mean_curve(
            &model,
            &x_obs,
            &mask,
            &part_spec(),
            &reference,
            &[1, 2, 4, 8],
            4000,
            1e-3,
            &NoiseSchedule::cosine_vp(),
            &mut rng,
        )
        .unwrap();
        let ks: Vec<f64> = curve.iter().map(|p| p.k as f64).collect();
        let ys: Vec<f64> = curve.iter().map(|p| p.sq_err).collect();
        let (a, b) = crate::stats::fit_inverse_k(&ks, &ys).unwrap();
        assert!(b > 0.0);
        // intercept is noise around zero: compare against the slope scale
        assert!(a.abs() < 0.05 * b, "a = {a}, b = {b}");
        // err(1) ≈ 4 × err(4)
        assert!((ys[0] / ys[2] / 4.0 - 1.0).abs() < 0.15);
    }

    #[test]
    fn invalid_sampler_configs_are_rejected() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { k: 0, ..ok }.validate().is_err());
        assert!(SamplerConfig { delta: 0.0, ..ok }.validate().is_err());
        assert!(SamplerConfig { delta: 0.6, ..ok }.validate().is_err());
        assert!(SamplerConfig { steps: 0, ..ok }.validate().is_err());
    }
}
