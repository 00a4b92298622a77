//! Reconstruction metrics, physics-based consistency checks, and ablation
//! orchestration over trained imputation models.
//!
//! Metrics operate on whatever units the caller passes; the normalization
//! helpers convert between standardized training space and physical units so
//! reported errors can always be brought back to the latter. Region-scoped
//! MSE satisfies the exact decomposition
//! `mse_all * N = mse_unobserved * N_unobs + sum of observed squared errors`,
//! which the tests pin down.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::io::ChannelStats;
use crate::masks::{Mask, MaskSpec};
use crate::real::Real;
use crate::sampling::{multi_step_impute, NetDenoiser, OmegaKind, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::{fft2, freq_index, ifft2, ComplexField, Field};
use crate::training::{fit, IncompleteSample, TrainConfig};

// ---------------------------------------------------------------------------
// region-scoped error

/// Which entries an error metric averages over, relative to the observation
/// mask that produced the imputation problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Unobserved,
    All,
}

/// Mean squared error between an imputed field and the ground truth over the
/// chosen region. An empty region (everything observed, region =
/// `Unobserved`) is a domain error rather than a silent 0/0.
pub fn mse<T: Real>(
    imputed: &Field<T>,
    truth: &Field<T>,
    mask: &Mask,
    region: Region,
) -> Result<f64> {
    if imputed.shape() != truth.shape() || imputed.shape() != mask.shape() {
        return Err(CoreError::shape(format!(
            "mse needs matching shapes, got {:?} / {:?} / mask {:?}",
            imputed.shape(),
            truth.shape(),
            mask.shape()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0u64;
    for ((&a, &b), &bit) in imputed.data().iter().zip(truth.data()).zip(mask.bits()) {
        let in_region = match region {
            Region::All => true,
            Region::Unobserved => bit == 0,
        };
        if in_region {
            let d = a.wide() - b.wide();
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::domain(
            "region contains no entries: the mask observes everything",
        ));
    }
    Ok(acc / n as f64)
}

// ---------------------------------------------------------------------------
// normalization helpers

fn check_stats<T: Real>(field: &Field<T>, stats: &[ChannelStats]) -> Result<usize> {
    let channels = *field
        .shape()
        .first()
        .ok_or_else(|| CoreError::shape("normalization needs a channel dimension"))?;
    if stats.len() != channels {
        return Err(CoreError::shape(format!(
            "{} channel stats for a {channels}-channel field",
            stats.len()
        )));
    }
    if stats.iter().any(|s| !(s.std > 0.0 && s.std.is_finite() && s.mean.is_finite())) {
        return Err(CoreError::config("channel stats must be finite with positive std"));
    }
    Ok(field.numel() / channels)
}

/// Physical units to standardized units, per channel.
pub fn normalize_field<T: Real>(field: &Field<T>, stats: &[ChannelStats]) -> Result<Field<T>> {
    let per_channel = check_stats(field, stats)?;
    let data = field
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = &stats[i / per_channel];
            T::of((v.wide() - s.mean) / s.std)
        })
        .collect();
    Field::new(field.shape().to_vec(), data)
}

/// Standardized units back to physical units, per channel.
pub fn denormalize_field<T: Real>(field: &Field<T>, stats: &[ChannelStats]) -> Result<Field<T>> {
    let per_channel = check_stats(field, stats)?;
    let data = field
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = &stats[i / per_channel];
            T::of(v.wide() * s.std + s.mean)
        })
        .collect();
    Field::new(field.shape().to_vec(), data)
}

/// Standardizes an incomplete observation and re-masks it so unobserved
/// entries stay exactly zero.
pub fn normalize_sample<T: Real>(
    sample: &IncompleteSample<T>,
    stats: &[ChannelStats],
) -> Result<IncompleteSample<T>> {
    let normalized = normalize_field(&sample.x_obs, stats)?;
    Ok(IncompleteSample { x_obs: sample.mask.apply(&normalized)?, mask: sample.mask.clone() })
}

/// Fills unobserved entries with the per-channel mean of the observed ones —
/// the classical baseline every learned imputer has to beat. Channels with
/// nothing observed fall back to the global observed mean.
pub fn mean_fill_impute<T: Real>(x_obs: &Field<T>, mask: &Mask) -> Result<Field<T>> {
    if x_obs.shape() != mask.shape() {
        return Err(CoreError::shape("observation and mask shapes differ"));
    }
    if mask.count_ones() == 0 {
        return Err(CoreError::EmptyMask("mean fill needs at least one observed entry".into()));
    }
    let channels = *x_obs.shape().first().unwrap_or(&1);
    let per_channel = x_obs.numel() / channels;
    let mut sums = vec![0.0f64; channels];
    let mut counts = vec![0u64; channels];
    for (i, (&v, &bit)) in x_obs.data().iter().zip(mask.bits()).enumerate() {
        if bit == 1 {
            sums[i / per_channel] += v.wide();
            counts[i / per_channel] += 1;
        }
    }
    let global = sums.iter().sum::<f64>() / counts.iter().sum::<u64>() as f64;
    let fills: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { global })
        .collect();
    let data = x_obs
        .data()
        .iter()
        .zip(mask.bits())
        .enumerate()
        .map(|(i, (&v, &bit))| if bit == 1 { v } else { T::of(fills[i / per_channel]) })
        .collect();
    Field::new(x_obs.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// physics-based consistency metrics

/// RMS residual of the linear rotating shallow-water equations over a stored
/// trajectory (variable-major `[3*frames, h, w]`), using centered differences
/// in both space and time. Needs at least three frames for the interior
/// time stencil.
pub fn shallow_water_residual<T: Real>(
    field: &Field<T>,
    f: f64,
    g: f64,
    h_depth: f64,
    dt: f64,
) -> Result<f64> {
    let shape = field.shape();
    if shape.len() != 3 || shape[0] % 3 != 0 {
        return Err(CoreError::shape(format!(
            "expected [3*frames, h, w] shallow-water channels, got {shape:?}"
        )));
    }
    let frames = shape[0] / 3;
    if frames < 3 {
        return Err(CoreError::config(format!(
            "centered time differences need at least 3 frames, got {frames}"
        )));
    }
    if !(dt > 0.0) {
        return Err(CoreError::config("dt must be positive"));
    }
    let (gh, gw) = (shape[1], shape[2]);
    let cells = gh * gw;
    let at = |var: usize, k: usize, i: usize| field.data()[(var * frames + k) * cells + i].wide();

    let cx = |var: usize, k: usize, y: usize, x: usize| {
        let xp = at(var, k, y * gw + (x + 1) % gw);
        let xm = at(var, k, y * gw + (x + gw - 1) % gw);
        (xp - xm) * 0.5 * gw as f64
    };
    let cy = |var: usize, k: usize, y: usize, x: usize| {
        let yp = at(var, k, ((y + 1) % gh) * gw + x);
        let ym = at(var, k, ((y + gh - 1) % gh) * gw + x);
        (yp - ym) * 0.5 * gh as f64
    };

    let mut acc = 0.0;
    let mut n = 0u64;
    for k in 1..frames - 1 {
        for y in 0..gh {
            for x in 0..gw {
                let i = y * gw + x;
                let ddt = |var: usize| (at(var, k + 1, i) - at(var, k - 1, i)) / (2.0 * dt);
                let r_u = ddt(0) - (f * at(1, k, i) - g * cx(2, k, y, x));
                let r_v = ddt(1) - (-f * at(0, k, i) - g * cy(2, k, y, x));
                let r_h = ddt(2) + h_depth * (cx(0, k, y, x) + cy(1, k, y, x));
                acc += r_u * r_u + r_v * r_v + r_h * r_h;
                n += 3;
            }
        }
    }
    Ok((acc / n as f64).sqrt())
}

/// Shifts every row of a `[h, w]` grid by `shift` cells (possibly fractional)
/// along x via the Fourier phase, i.e. trigonometric interpolation.
fn fourier_shift_rows(rows: &mut [f64], h: usize, w: usize, shift: f64) -> Result<()> {
    let tau = std::f64::consts::TAU;
    for y in 0..h {
        let row = ComplexField::from_real(1, w, &rows[y * w..(y + 1) * w])?;
        let mut spec = fft2(&row)?;
        for i in 0..w {
            let k = freq_index(w, i) as f64;
            let angle = -tau * k * shift / w as f64;
            spec.data_mut()[i] *= num_complex::Complex::new(angle.cos(), angle.sin());
        }
        let back = ifft2(&spec)?;
        for (dst, c) in rows[y * w..(y + 1) * w].iter_mut().zip(back.data()) {
            *dst = c.re;
        }
    }
    Ok(())
}

/// Mean squared error between exact transport of an imputed initial frame
/// and the true trajectory, averaged over all frames. `beta` is in domain
/// lengths per unit time, `dt` is the frame spacing. Non-integer cell shifts
/// use trigonometric interpolation and therefore need a power-of-two width.
pub fn advection_forward_mse<T: Real>(
    imputed_initial: &Field<T>,
    truth: &Field<T>,
    beta: f64,
    dt: f64,
) -> Result<f64> {
    let tshape = truth.shape();
    if tshape.len() != 3 {
        return Err(CoreError::shape(format!("truth must be [frames, h, w], got {tshape:?}")));
    }
    let (frames, h, w) = (tshape[0], tshape[1], tshape[2]);
    if imputed_initial.shape() != [h, w] && imputed_initial.shape() != [1, h, w] {
        return Err(CoreError::shape(format!(
            "initial frame shape {:?} does not match truth frames [{h}, {w}]",
            imputed_initial.shape()
        )));
    }
    let initial: Vec<f64> = imputed_initial.data().iter().map(|v| v.wide()).collect();
    let cells = h * w;

    let mut acc = 0.0;
    for k in 0..frames {
        let shift = beta * k as f64 * dt * w as f64;
        let nearest = shift.round();
        let mut advected = initial.clone();
        if (shift - nearest).abs() < 1e-9 {
            let s = (nearest.rem_euclid(w as f64)) as usize % w;
            if s != 0 {
                for y in 0..h {
                    let row = &initial[y * w..(y + 1) * w];
                    for x in 0..w {
                        advected[y * w + x] = row[(x + w - s) % w];
                    }
                }
            }
        } else {
            if !w.is_power_of_two() {
                return Err(CoreError::config(format!(
                    "fractional shift {shift:.3} cells needs a power-of-two width, got {w}"
                )));
            }
            fourier_shift_rows(&mut advected, h, w, shift)?;
        }
        let frame = &truth.data()[k * cells..(k + 1) * cells];
        acc += advected
            .iter()
            .zip(frame)
            .map(|(&a, &b)| (a - b.wide()) * (a - b.wide()))
            .sum::<f64>()
            / cells as f64;
    }
    Ok(acc / frames as f64)
}

// ---------------------------------------------------------------------------
// mask-regime transfer

/// Context ratio to use at evaluation time so the context density seen by
/// the model matches training: observing at `r_test` while the model was
/// trained at observation rate `r_train` with context ratio `alpha_train`
/// requires `r_train * alpha_train / r_test`. Infeasible when the training
/// context density exceeds what the test-time mask can provide.
pub fn adaptive_ctx_ratio(r_train: f64, alpha_train: f64, r_test: f64) -> Result<f64> {
    for (name, v) in [("r_train", r_train), ("alpha_train", alpha_train), ("r_test", r_test)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(CoreError::config(format!("{name} must be in (0, 1], got {v}")));
        }
    }
    let ratio = r_train * alpha_train / r_test;
    if ratio > 1.0 {
        return Err(CoreError::Infeasible(format!(
            "matching the training context density needs ratio {ratio:.4} > 1"
        )));
    }
    Ok(ratio)
}

// ---------------------------------------------------------------------------
// reports

/// SHA-256 over the JSON encodings of a run configuration and the dataset
/// manifest it consumed; ties every report to exactly what produced it.
pub fn fingerprint<A: Serialize, B: Serialize>(config: &A, manifest: &B) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(config)?);
    hasher.update([0u8]);
    hasher.update(serde_json::to_vec(manifest)?);
    Ok(hex::encode(hasher.finalize()))
}

/// One metric over one dataset: per-sample values plus cross-seed spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    /// Per-sample values, averaged over seeds; one entry per dataset sample.
    pub values: Vec<f64>,
    /// Mean of the per-seed dataset means.
    pub mean: f64,
    /// Population standard deviation of the per-seed dataset means.
    pub std: f64,
    pub fingerprint: String,
}

impl EvalReport {
    /// `sample,value` rows; stable across identical runs byte for byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,value\n");
        for (i, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{i},{v:.17e}\n"));
        }
        out
    }
}

fn spread(per_seed: &[f64]) -> (f64, f64) {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = per_seed.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// ablations

/// Everything an ablation grid holds fixed: data, base configuration, and
/// the seed list shared by every cell so comparisons are paired.
pub struct AblationBase<'a, T> {
    pub train_data: &'a [IncompleteSample<T>],
    pub eval_data: &'a [IncompleteSample<T>],
    /// Ground truth aligned with `eval_data`.
    pub truth: &'a [Field<T>],
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Mask distribution the multi-step sampler redraws from.
    pub mask_spec: MaskSpec,
    pub schedule: NoiseSchedule,
    pub seeds: Vec<u64>,
}

/// Which knob the ablation sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationAxis {
    /// `(ctx_ratio, qry_ratio)` pairs; `(1.0, 1.0)` recovers training on the
    /// full observation mask with no held-out query set.
    Partition(Vec<(f64, f64)>),
    /// Expectation-combination weight of the multi-step sampler.
    Omega(Vec<OmegaKind>),
    EnsembleSize(Vec<usize>),
}

#[derive(Debug)]
pub struct AblationCellResult {
    pub label: String,
    pub report: Result<EvalReport>,
}

fn omega_label(kind: OmegaKind) -> &'static str {
    match kind {
        OmegaKind::T => "t",
        OmegaKind::TSquared => "t2",
        OmegaKind::Unweighted => "none",
        OmegaKind::Zero => "zero",
    }
}

fn eval_cell<T: Real>(
    base: &AblationBase<'_, T>,
    train_cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
) -> Result<EvalReport> {
    if base.eval_data.len() != base.truth.len() || base.eval_data.is_empty() {
        return Err(CoreError::contract(
            "evaluation data and ground truth must align and be non-empty",
        ));
    }
    if base.seeds.is_empty() {
        return Err(CoreError::config("ablation needs at least one seed"));
    }
    let n = base.eval_data.len();
    let mut per_sample = vec![0.0f64; n];
    let mut per_seed = Vec::with_capacity(base.seeds.len());
    for &seed in &base.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fitted = fit(base.train_data, train_cfg, &base.schedule, &mut rng)?;
        let model = NetDenoiser::new(&fitted.params);
        let mut seed_mean = 0.0;
        for (i, (sample, truth)) in base.eval_data.iter().zip(base.truth).enumerate() {
            let imputed = multi_step_impute(
                &model,
                &sample.x_obs,
                &sample.mask,
                &base.mask_spec,
                &train_cfg.partition,
                sampler_cfg,
                &base.schedule,
                &mut rng,
            )?;
            let err = mse(&imputed, truth, &sample.mask, Region::Unobserved)?;
            per_sample[i] += err / base.seeds.len() as f64;
            seed_mean += err / n as f64;
        }
        per_seed.push(seed_mean);
    }
    let (mean, std) = spread(&per_seed);
    Ok(EvalReport {
        metric: "unobserved_mse".into(),
        values: per_sample,
        mean,
        std,
        fingerprint: fingerprint(
            &(train_cfg, sampler_cfg, &base.mask_spec, &base.schedule),
            &base.seeds,
        )?,
    })
}

/// Sweeps one axis while holding everything else fixed. Cells share the seed
/// list (paired comparisons) and a failing cell is recorded as its error
/// without aborting the remaining cells.
pub fn run_ablation<T: Real>(
    axis: &AblationAxis,
    base: &AblationBase<'_, T>,
) -> Vec<AblationCellResult> {
    let cells: Vec<(String, TrainConfig, SamplerConfig)> = match axis {
        AblationAxis::Partition(pairs) => pairs
            .iter()
            .map(|&(ctx, qry)| {
                let mut train = base.train;
                train.partition.ctx_ratio = ctx;
                train.partition.qry_ratio = qry;
                (format!("partition_{ctx}x{qry}"), train, base.sampler)
            })
            .collect(),
        AblationAxis::Omega(kinds) => kinds
            .iter()
            .map(|&kind| {
                let mut sampler = base.sampler;
                sampler.omega = kind;
                (format!("omega_{}", omega_label(kind)), base.train, sampler)
            })
            .collect(),
        AblationAxis::EnsembleSize(ks) => ks
            .iter()
            .map(|&k| {
                let mut sampler = base.sampler;
                sampler.k = k;
                (format!("k_{k}"), base.train, sampler)
            })
            .collect(),
    };
    cells
        .into_iter()
        .map(|(label, train_cfg, sampler_cfg)| AblationCellResult {
            report: eval_cell(base, &train_cfg, &sampler_cfg),
            label,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::masks::{sample_mask, PartitionSpec, PartitionStrategy};
    use crate::pdegen::{
        self, generate, FourierMode, GeneratedSet, PdeConfig, RangeCfg, SystemParams,
    };
    use rand::RngExt;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn region_mses_satisfy_the_exact_decomposition() {
        let mut r = rng(160);
        let shape = vec![2, 4, 4];
        let truth = Field::from_fn(shape.clone(), |_| r.random::<f64>());
        let imputed = Field::from_fn(shape.clone(), |_| r.random::<f64>());
        let mask = sample_mask(&MaskSpec::PixelIid { rate: 0.5 }, &shape, &mut r).unwrap();

        let all = mse(&imputed, &truth, &mask, Region::All).unwrap();
        let unobs = mse(&imputed, &truth, &mask, Region::Unobserved).unwrap();
        let n = mask.numel() as f64;
        let n_unobs = (mask.numel() - mask.count_ones()) as f64;
        let obs_sq: f64 = imputed
            .data()
            .iter()
            .zip(truth.data())
            .zip(mask.bits())
            .filter(|(_, &b)| b == 1)
            .map(|((&a, &b), _)| (a - b) * (a - b))
            .sum();
        assert!((all * n - (unobs * n_unobs + obs_sq)).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_on_unobserved_entries_scores_its_square() {
        let mut r = rng(161);
        let shape = vec![1, 6, 6];
        let truth = Field::from_fn(shape.clone(), |_| r.random::<f64>());
        let mask = sample_mask(&MaskSpec::PixelIid { rate: 0.4 }, &shape, &mut r).unwrap();
        let c = 0.3;
        let offset: Field<f64> = Field::new(
            shape.clone(),
            truth
                .data()
                .iter()
                .zip(mask.bits())
                .map(|(&v, &b)| if b == 1 { v } else { v + c })
                .collect(),
        )
        .unwrap();
        let got = mse(&offset, &truth, &mask, Region::Unobserved).unwrap();
        assert!((got - c * c).abs() < 1e-12);
    }

    #[test]
    fn empty_unobserved_regions_are_a_domain_error() {
        let shape = vec![1, 2, 2];
        let x: Field<f64> = Field::zeros(shape.clone());
        let mask = Mask::ones(shape);
        assert!(matches!(
            mse(&x, &x, &mask, Region::Unobserved),
            Err(CoreError::Domain(_))
        ));
        assert!(mse(&x, &x, &mask, Region::All).is_ok());
    }

    #[test]
    fn mean_fill_scores_unit_error_on_standardized_noise() {
        let mut r = rng(162);
        let shape = vec![1, 64, 64];
        let truth: Field<f64> =
            Field::from_fn(shape.clone(), |_| r.sample::<f64, _>(StandardNormal));
        let mask = sample_mask(&MaskSpec::PixelIid { rate: 0.5 }, &shape, &mut r).unwrap();
        let filled = mean_fill_impute(&mask.apply(&truth).unwrap(), &mask).unwrap();
        // observed entries are copied through
        for ((&f, &t), &b) in filled.data().iter().zip(truth.data()).zip(mask.bits()) {
            if b == 1 {
                assert_eq!(f, t);
            }
        }
        let got = mse(&filled, &truth, &mask, Region::Unobserved).unwrap();
        // E[(x - mean)^2] = 1 for standardized coordinates; var of x^2 is 2
        let sem = (2.0f64 / (0.5 * 4096.0)).sqrt();
        assert!((got - 1.0).abs() < 4.0 * sem, "mse {got}");
    }

    #[test]
    fn normalization_round_trips_and_remasks() {
        let mut r = rng(163);
        let shape = vec![2, 3, 3];
        let stats = [
            ChannelStats { mean: 1.5, std: 0.5 },
            ChannelStats { mean: -2.0, std: 3.0 },
        ];
        let x = Field::from_fn(shape.clone(), |_| r.random::<f64>() * 4.0 - 2.0);
        let z = normalize_field(&x, &stats).unwrap();
        let back = denormalize_field(&z, &stats).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // standardizing channel 0: (x - 1.5) / 0.5
        assert!((z.data()[0] - (x.data()[0] - 1.5) / 0.5).abs() < 1e-12);

        let mask = sample_mask(&MaskSpec::PixelIid { rate: 0.5 }, &shape, &mut r).unwrap();
        let sample = IncompleteSample { x_obs: mask.apply(&x).unwrap(), mask };
        let normalized = normalize_sample(&sample, &stats).unwrap();
        for (i, &b) in normalized.mask.bits().iter().enumerate() {
            if b == 0 {
                assert_eq!(normalized.x_obs.data()[i], 0.0);
            }
        }

        assert!(normalize_field(&x, &stats[..1]).is_err());
    }

    fn sw_config(dt: f64, frames: usize) -> PdeConfig {
        PdeConfig {
            system: SystemParams::ShallowWater {
                f: RangeCfg::fixed(1.0),
                g: 1.0,
                h_depth: 1.0,
            },
            grid: vec![16, 16],
            frames,
            dt,
            n_samples: 1,
            seed: 0,
        }
    }

    #[test]
    fn solver_output_has_tiny_residual_and_noise_does_not() {
        let set: GeneratedSet<f64> = generate(&sw_config(0.01, 8), &mut rng(164)).unwrap();
        let field = &set.fields[0];
        let res = shallow_water_residual(field, 1.0, 1.0, 1.0, 0.01).unwrap();

        let mut r = rng(165);
        let mut noisy = field.data().to_vec();
        let cells = 256;
        for v in noisy[16 * cells..].iter_mut() {
            *v = r.sample::<f64, _>(StandardNormal);
        }
        let noisy = Field::new(field.shape().to_vec(), noisy).unwrap();
        let res_noise = shallow_water_residual(&noisy, 1.0, 1.0, 1.0, 0.01).unwrap();
        assert!(
            res_noise > 1e3 * res,
            "solver residual {res} vs noise residual {res_noise}"
        );
    }

    #[test]
    fn resting_constant_state_has_zero_residual_without_rotation() {
        let frames = 4;
        let cells = 8 * 8;
        let mut data = vec![0.0f64; 3 * frames * cells];
        for v in data[2 * frames * cells..].iter_mut() {
            *v = 0.7; // constant height, zero velocity
        }
        let field = Field::new(vec![3 * frames, 8, 8], data).unwrap();
        assert_eq!(shallow_water_residual(&field, 0.0, 1.0, 1.0, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn too_few_frames_cannot_form_the_time_stencil() {
        let field: Field<f64> = Field::zeros(vec![6, 8, 8]);
        assert!(matches!(
            shallow_water_residual(&field, 1.0, 1.0, 1.0, 0.01),
            Err(CoreError::Config(_))
        ));
        let bad: Field<f64> = Field::zeros(vec![7, 8, 8]);
        assert!(shallow_water_residual(&bad, 1.0, 1.0, 1.0, 0.01).is_err());
    }

    #[test]
    fn residual_shrinks_like_the_time_step_squared() {
        // same initial state integrated at dt and dt/2
        let coarse: GeneratedSet<f64> =
            generate(&sw_config(0.02, 5), &mut rng(166)).unwrap();
        let fine: GeneratedSet<f64> = generate(&sw_config(0.01, 9), &mut rng(166)).unwrap();
        let res_c = shallow_water_residual(&coarse.fields[0], 1.0, 1.0, 1.0, 0.02).unwrap();
        let res_f = shallow_water_residual(&fine.fields[0], 1.0, 1.0, 1.0, 0.01).unwrap();
        assert!(res_f < res_c);
        // the halved-step run estimates the truncation error of the coarse one
        let truncation_estimate = 4.0 / 3.0 * (res_c - res_f).abs();
        assert!(
            res_c <= 2.0 * truncation_estimate,
            "residual {res_c} vs estimate {truncation_estimate}"
        );
    }

    #[test]
    fn transporting_the_true_initial_frame_reproduces_the_truth() {
        let modes = [
            FourierMode { kx: 1, ky: 1, amp: 0.8, phase: 0.4 },
            FourierMode { kx: 3, ky: -2, amp: 0.5, phase: 2.0 },
        ];
        // beta*dt*w = 0.35*0.31*16: a fractional shift, exercising interpolation
        let truth: Field<f64> =
            pdegen::advection_frames(&modes, 0.35, 5, 0.31, 8, 16).unwrap();
        let initial = Field::new(vec![8, 16], truth.data()[..128].to_vec()).unwrap();
        let err = advection_forward_mse(&initial, &truth, 0.35, 0.31).unwrap();
        assert!(err < 1e-20, "forward mse {err}");
    }

    #[test]
    fn forward_error_is_invariant_under_transport() {
        let modes = [FourierMode { kx: 2, ky: 0, amp: 1.0, phase: 0.1 }];
        let truth: Field<f64> = pdegen::advection_frames(&modes, 0.7, 6, 0.13, 4, 16).unwrap();
        // a band-limited error field: fractional shifts are exactly unitary on
        // it (white noise would lose Nyquist energy to trig interpolation)
        let bump_modes = [
            FourierMode { kx: 3, ky: 1, amp: 0.1, phase: 1.3 },
            FourierMode { kx: 1, ky: -1, amp: 0.05, phase: 0.2 },
        ];
        let bump: Field<f64> =
            pdegen::advection_frames(&bump_modes, 0.0, 1, 1.0, 4, 16).unwrap();
        let perturbed = Field::new(
            vec![4, 16],
            truth.data()[..64]
                .iter()
                .zip(bump.data())
                .map(|(&v, &b)| v + b)
                .collect(),
        )
        .unwrap();
        let mean_err = advection_forward_mse(&perturbed, &truth, 0.7, 0.13).unwrap();
        let frame0_err: f64 = perturbed
            .data()
            .iter()
            .zip(&truth.data()[..64])
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / 64.0;
        // the shift is unitary, so every frame contributes the same error
        assert!((mean_err - frame0_err).abs() < 1e-12 * frame0_err.max(1.0));
    }

    #[test]
    fn fractional_shifts_on_odd_widths_are_rejected() {
        let truth: Field<f64> = Field::zeros(vec![3, 4, 12]);
        let initial: Field<f64> = Field::zeros(vec![4, 12]);
        // beta*dt*w = 0.5*0.1*12 = 0.6 cells: fractional, width 12 not a power of two
        assert!(matches!(
            advection_forward_mse(&initial, &truth, 0.5, 0.1),
            Err(CoreError::Config(_))
        ));
        // integer shifts are fine on any width: 2.5*0.1*12 = 3 cells
        assert!(advection_forward_mse(&initial, &truth, 2.5, 0.1).is_ok());
    }

    #[test]
    fn context_ratio_transfer_matches_the_density_identity() {
        let got = adaptive_ctx_ratio(0.8, 0.5, 0.6).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
        assert!((adaptive_ctx_ratio(0.5, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            adaptive_ctx_ratio(0.8, 0.9, 0.5),
            Err(CoreError::Infeasible(_))
        ));
        assert!(matches!(adaptive_ctx_ratio(0.0, 0.5, 0.5), Err(CoreError::Config(_))));
        assert!(matches!(adaptive_ctx_ratio(0.5, 0.5, 1.2), Err(CoreError::Config(_))));
    }

    #[test]
    fn reports_serialize_stably_and_fingerprints_track_inputs() {
        let report = EvalReport {
            metric: "unobserved_mse".into(),
            values: vec![0.25, 0.5],
            mean: 0.375,
            std: 0.0,
            fingerprint: fingerprint(&("cfg", 1), &"manifest").unwrap(),
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("sample,value\n0,"));
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        assert_eq!(
            fingerprint(&("cfg", 1), &"manifest").unwrap(),
            report.fingerprint
        );
        assert_ne!(
            fingerprint(&("cfg", 2), &"manifest").unwrap(),
            report.fingerprint
        );
    }

    #[test]
    fn ablation_grids_share_seeds_and_survive_failing_cells() {
        let mut r = rng(168);
        let shape = vec![1, 4, 4];
        let mask_spec = MaskSpec::PixelIid { rate: 0.8 };
        let truth: Vec<Field<f64>> = (0..3)
            .map(|_| Field::from_fn(shape.clone(), |_| r.random::<f64>()))
            .collect();
        let data: Vec<IncompleteSample<f64>> = truth
            .iter()
            .map(|t| {
                let mask = sample_mask(&mask_spec, &shape, &mut r).unwrap();
                IncompleteSample { x_obs: mask.apply(t).unwrap(), mask }
            })
            .collect();
        let base = AblationBase {
            train_data: &data,
            eval_data: &data,
            truth: &truth,
            train: TrainConfig {
                denoiser: DenoiserConfig {
                    field_channels: 1,
                    hidden_channels: 4,
                    n_blocks: 1,
                    kernel: 3,
                    time_embed_dim: 4,
                    padding: Default::default(),
                },
                partition: PartitionSpec {
                    strategy: PartitionStrategy::PixelLevel,
                    ctx_ratio: 0.7,
                    qry_ratio: 0.7,
                },
                batch_size: 2,
                steps: 20,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig { k: 2, steps: 4, ..SamplerConfig::default() },
            mask_spec,
            schedule: NoiseSchedule::cosine_vp(),
            seeds: vec![5, 6],
        };

        let axis =
            AblationAxis::Partition(vec![(1.0, 1.0), (0.7, 0.7), (0.0, 0.5)]);
        let results = run_ablation(&axis, &base);
        assert_eq!(results.len(), 3);
        assert_eq!(results[0].label, "partition_1x1");
        assert!(results[0].report.is_ok());
        assert!(results[1].report.is_ok());
        // the degenerate context ratio fails its cell but not the sweep
        assert!(results[2].report.is_err());

        let ok = results[1].report.as_ref().unwrap();
        assert_eq!(ok.values.len(), 3);
        assert!(ok.mean.is_finite() && ok.std.is_finite());

        // identical base -> identical reports (shared seeds, no hidden state)
        let again = run_ablation(&axis, &base);
        assert_eq!(again[1].report.as_ref().unwrap(), ok);

        let omega_axis = AblationAxis::Omega(vec![
            OmegaKind::Unweighted,
            OmegaKind::T,
            OmegaKind::TSquared,
        ]);
        let labels: Vec<String> =
            run_ablation(&omega_axis, &base).into_iter().map(|c| c.label).collect();
        assert_eq!(labels, ["omega_none", "omega_t", "omega_t2"]);
    }
}
