//! Synthetic PDE trajectory generators and incomplete-dataset assembly.
//!
//! Three families, all periodic on the unit square (flow fields use a
//! 2π-periodic domain so wavenumbers are integers):
//!
//! - **advection** — passive transport evaluated exactly from a random
//!   Fourier initial condition, so every frame is analytic ground truth;
//! - **shallow_water** — rotating linear shallow-water equations about a
//!   state of rest, RK4 in time and centered differences in space;
//! - **navier_stokes** — 2-D incompressible vorticity dynamics, pseudo-
//!   spectral with 2/3 dealiasing and RK4.
//!
//! Each sample folds its frames into the leading (channel) dimension so the
//! result is a `[C, H, W]` field ready for the conv denoiser: advection and
//! vorticity store one channel per frame, shallow water stores `3*frames`
//! channels grouped variable-major (`u` frames, then `v`, then `h`).
//!
//! Per-sample physical parameters (transport speed, Coriolis rate,
//! viscosity) are drawn from configured ranges and echoed as JSON so
//! downstream metrics can evaluate residuals in physical units.

mod advection;
mod navier_stokes;
mod shallow_water;

pub use advection::{advection_frames, FourierMode};
pub use navier_stokes::{enstrophy, kinetic_energy, spectral_divergence_max};
pub use shallow_water::energy_per_frame as shallow_water_energy;

use rand::Rng;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::{ChannelStats, DatasetManifest};
use crate::masks::{sample_mask, MaskSpec};
use crate::real::Real;
use crate::tensor::Field;
use crate::training::IncompleteSample;

/// Closed interval a scalar parameter is drawn from, uniformly per sample.
/// A degenerate range (`lo == hi`) pins the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeCfg {
    pub lo: f64,
    pub hi: f64,
}

impl RangeCfg {
    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(CoreError::config(format!(
                "{name} range [{}, {}] is not a finite ordered interval",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..self.hi)
        }
    }
}

/// Fixed sinusoidal vorticity forcing `F(x, y) = amplitude * cos(mode * y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub amplitude: f64,
    pub mode: usize,
}

/// Which system to integrate, with its physical parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SystemParams {
    /// Exact transport at speed `beta` (domain lengths per unit time) along
    /// the last spatial axis.
    Advection { beta: RangeCfg },
    /// Linear rotating shallow water: Coriolis rate `f`, gravity `g`,
    /// reference depth `h_depth`.
    ShallowWater { f: RangeCfg, g: f64, h_depth: f64 },
    /// Vorticity dynamics with kinematic viscosity `nu` and optional forcing.
    NavierStokes {
        nu: RangeCfg,
        #[serde(default)]
        forcing: Option<Forcing>,
    },
}

impl SystemParams {
    pub fn system_name(&self) -> &'static str {
        match self {
            SystemParams::Advection { .. } => "advection",
            SystemParams::ShallowWater { .. } => "shallow_water",
            SystemParams::NavierStokes { .. } => "navier_stokes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub system: SystemParams,
    /// `[n]` for 1-D advection, `[h, w]` otherwise.
    pub grid: Vec<usize>,
    pub frames: usize,
    /// Frame spacing; also the solver step for the time-stepped systems.
    pub dt: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl PdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(CoreError::config("frames must be positive"));
        }
        if self.n_samples == 0 {
            return Err(CoreError::config("n_samples must be positive"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CoreError::config(format!("dt must be positive, got {}", self.dt)));
        }
        let (h, w) = self.spatial()?;
        match &self.system {
            SystemParams::Advection { beta } => {
                beta.validate("beta")?;
            }
            SystemParams::ShallowWater { f, g, h_depth } => {
                if self.grid.len() != 2 {
                    return Err(CoreError::config("shallow water needs a 2-d grid"));
                }
                f.validate("f")?;
                if !(*g > 0.0 && *h_depth > 0.0) {
                    return Err(CoreError::config("g and h_depth must be positive"));
                }
                // gravity-wave CFL on the unit square: dx = 1/w, dy = 1/h
                let cfl = self.dt * (g * h_depth).sqrt() * (w.max(h) as f64);
                if cfl >= 0.5 {
                    return Err(CoreError::config(format!(
                        "dt = {} violates the gravity-wave CFL bound ({cfl:.3} >= 0.5)",
                        self.dt
                    )));
                }
            }
            SystemParams::NavierStokes { nu, .. } => {
                if self.grid.len() != 2 {
                    return Err(CoreError::config("navier_stokes needs a 2-d grid"));
                }
                if !(h.is_power_of_two() && w.is_power_of_two()) {
                    return Err(CoreError::config(format!(
                        "spectral solver needs power-of-two grid dims, got {h}x{w}"
                    )));
                }
                nu.validate("nu")?;
                if nu.lo <= 0.0 {
                    return Err(CoreError::config("viscosity must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Spatial dims as `(h, w)`; 1-D grids are a single row.
    pub fn spatial(&self) -> Result<(usize, usize)> {
        match self.grid.as_slice() {
            [n] if *n >= 2 => Ok((1, *n)),
            [h, w] if *h >= 2 && *w >= 2 => Ok((*h, *w)),
            _ => Err(CoreError::config(format!(
                "grid must be [n] or [h, w] with dims >= 2, got {:?}",
                self.grid
            ))),
        }
    }

    /// Per-sample field shape `[channels, h, w]`.
    pub fn sample_shape(&self) -> Result<Vec<usize>> {
        let (h, w) = self.spatial()?;
        let channels = match self.system {
            SystemParams::ShallowWater { .. } => 3 * self.frames,
            _ => self.frames,
        };
        Ok(vec![channels, h, w])
    }
}

/// Complete (fully observed) trajectories plus everything a dataset manifest
/// needs to describe them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet<T> {
    pub fields: Vec<Field<T>>,
    /// Per-sample drawn physical parameters, JSON-encoded for the manifest.
    pub params: Vec<serde_json::Value>,
    pub system: String,
    pub grid: Vec<usize>,
    pub frames: usize,
    pub dt: f64,
    pub seed: u64,
}

/// Draws per-sample generator seeds up front so sample `i` is reproducible
/// independent of how the loop is scheduled.
fn sample_rngs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.random::<u64>())).collect()
}

pub fn generate<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    rng: &mut R,
) -> Result<GeneratedSet<T>> {
    config.validate()?;
    let mut fields = Vec::with_capacity(config.n_samples);
    let mut params = Vec::with_capacity(config.n_samples);
    for mut srng in sample_rngs(config.n_samples, rng) {
        let (field, p) = match &config.system {
            SystemParams::Advection { beta } => advection::gen_sample(config, beta, &mut srng)?,
            SystemParams::ShallowWater { f, g, h_depth } => {
                shallow_water::gen_sample(config, f, *g, *h_depth, &mut srng)?
            }
            SystemParams::NavierStokes { nu, forcing } => {
                navier_stokes::gen_sample(config, nu, forcing.as_ref(), &mut srng)?
            }
        };
        fields.push(field);
        params.push(p);
    }
    Ok(GeneratedSet {
        fields,
        params,
        system: config.system.system_name().into(),
        grid: config.grid.clone(),
        frames: config.frames,
        dt: config.dt,
        seed: config.seed,
    })
}

pub fn gen_advection<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    rng: &mut R,
) -> Result<GeneratedSet<T>> {
    match config.system {
        SystemParams::Advection { .. } => generate(config, rng),
        _ => Err(CoreError::contract("config does not describe an advection system")),
    }
}

pub fn gen_shallow_water<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    rng: &mut R,
) -> Result<GeneratedSet<T>> {
    match config.system {
        SystemParams::ShallowWater { .. } => generate(config, rng),
        _ => Err(CoreError::contract("config does not describe a shallow-water system")),
    }
}

pub fn gen_navier_stokes<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    rng: &mut R,
) -> Result<GeneratedSet<T>> {
    match config.system {
        SystemParams::NavierStokes { .. } => generate(config, rng),
        _ => Err(CoreError::contract("config does not describe a navier_stokes system")),
    }
}

// ---------------------------------------------------------------------------
// incomplete-dataset assembly

/// Complete trajectories degraded to incomplete observations, plus the
/// manifest describing how.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteDataset<T> {
    pub samples: Vec<IncompleteSample<T>>,
    pub manifest: DatasetManifest,
}

const MASK_RESAMPLE_LIMIT: usize = 100;

/// Masks every sample with an independent draw from `mask_spec`, zeroes the
/// unobserved entries, and computes per-channel normalization statistics
/// from the observed entries only.
///
/// All-zero mask draws are rejected and retried up to 100 times before the
/// whole build fails. A channel with no observed entries anywhere (or with
/// zero observed variance) gets `mean = 0, std = 1` so standardizing it is
/// the identity.
pub fn build_incomplete_dataset<T: Real, R: Rng + ?Sized>(
    set: &GeneratedSet<T>,
    mask_spec: &MaskSpec,
    rng: &mut R,
) -> Result<IncompleteDataset<T>> {
    mask_spec.validate()?;
    let first = set
        .fields
        .first()
        .ok_or_else(|| CoreError::config("cannot build a dataset from zero samples"))?;
    let shape = first.shape().to_vec();
    let channels = shape[0];
    let per_channel = first.numel() / channels;

    let mut samples = Vec::with_capacity(set.fields.len());
    // Welford per channel over observed entries across the whole dataset.
    let mut count = vec![0u64; channels];
    let mut mean = vec![0.0f64; channels];
    let mut m2 = vec![0.0f64; channels];

    for field in &set.fields {
        if field.shape() != shape.as_slice() {
            return Err(CoreError::shape(format!(
                "sample shape {:?} disagrees with {:?}",
                field.shape(),
                shape
            )));
        }
        let mut mask = sample_mask(mask_spec, &shape, rng)?;
        let mut tries = 1;
        while mask.count_ones() == 0 {
            if tries >= MASK_RESAMPLE_LIMIT {
                return Err(CoreError::Generation(format!(
                    "mask draw produced no observed entries {MASK_RESAMPLE_LIMIT} times in a row"
                )));
            }
            mask = sample_mask(mask_spec, &shape, rng)?;
            tries += 1;
        }
        for (i, (&bit, &v)) in mask.bits().iter().zip(field.data()).enumerate() {
            if bit == 1 {
                let c = i / per_channel;
                count[c] += 1;
                let x = v.wide();
                let d = x - mean[c];
                mean[c] += d / count[c] as f64;
                m2[c] += d * (x - mean[c]);
            }
        }
        samples.push(IncompleteSample { x_obs: mask.apply(field)?, mask });
    }

    let normalization = (0..channels)
        .map(|c| {
            if count[c] == 0 {
                return ChannelStats { mean: 0.0, std: 1.0 };
            }
            let var = m2[c] / count[c] as f64;
            let std = var.sqrt();
            ChannelStats { mean: mean[c], std: if std > 1e-12 { std } else { 1.0 } }
        })
        .collect();

    let manifest = DatasetManifest {
        system: set.system.clone(),
        shape,
        grid: set.grid.clone(),
        frames: set.frames,
        dt: set.dt,
        mask_spec: *mask_spec,
        seed: set.seed,
        normalization,
        params: set.params.clone(),
        files: Vec::new(),
    };
    Ok(IncompleteDataset { samples, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    fn advection_config(grid: Vec<usize>, beta: RangeCfg) -> PdeConfig {
        PdeConfig {
            system: SystemParams::Advection { beta },
            grid,
            frames: 4,
            dt: 0.25,
            n_samples: 3,
            seed: 0,
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_entry_rng() {
        let config = advection_config(vec![8, 8], RangeCfg { lo: -1.0, hi: 1.0 });
        let a: GeneratedSet<f64> =
            generate(&config, &mut ChaCha8Rng::seed_from_u64(130)).unwrap();
        let b: GeneratedSet<f64> =
            generate(&config, &mut ChaCha8Rng::seed_from_u64(130)).unwrap();
        assert_eq!(a, b);
        for f in &a.fields {
            assert_eq!(f.shape(), [4, 8, 8]);
        }
        assert_eq!(a.params.len(), 3);
    }

    #[test]
    fn dispatch_wrappers_check_the_system_kind() {
        let config = advection_config(vec![8], RangeCfg::fixed(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        assert!(gen_advection::<f64, _>(&config, &mut rng).is_ok());
        assert!(matches!(
            gen_shallow_water::<f64, _>(&config, &mut rng),
            Err(CoreError::Contract(_))
        ));
        assert!(matches!(
            gen_navier_stokes::<f64, _>(&config, &mut rng),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn full_rate_masks_reproduce_the_complete_fields() {
        let config = advection_config(vec![6, 6], RangeCfg::fixed(0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(132);
        let set: GeneratedSet<f64> = generate(&config, &mut rng).unwrap();
        let ds =
            build_incomplete_dataset(&set, &MaskSpec::PixelIid { rate: 1.0 }, &mut rng).unwrap();
        assert_eq!(ds.samples.len(), set.fields.len());
        for (s, f) in ds.samples.iter().zip(&set.fields) {
            assert_eq!(s.mask.count_ones(), s.mask.numel());
            assert_eq!(s.x_obs.data(), f.data());
        }
        assert_eq!(ds.manifest.system, "advection");
        assert_eq!(ds.manifest.shape, vec![4, 6, 6]);
        assert_eq!(ds.manifest.params.len(), 3);
    }

    #[test]
    fn observed_fraction_matches_the_mask_rate() {
        let mut config = advection_config(vec![16, 16], RangeCfg::fixed(0.3));
        config.n_samples = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(133);
        let set: GeneratedSet<f64> = generate(&config, &mut rng).unwrap();
        let rate = 0.6;
        let ds =
            build_incomplete_dataset(&set, &MaskSpec::PixelIid { rate }, &mut rng).unwrap();
        let total: usize = ds.samples.iter().map(|s| s.mask.numel()).sum();
        let ones: usize = ds.samples.iter().map(|s| s.mask.count_ones()).sum();
        let band = stats::three_sigma_binomial(rate, total as u64);
        assert!(
            (ones as f64 / total as f64 - rate).abs() <= band,
            "fraction {} vs rate {rate} (band {band})",
            ones as f64 / total as f64
        );
    }

    #[test]
    fn normalization_uses_observed_entries_only_and_zeroes_the_rest() {
        let mut config = advection_config(vec![8, 8], RangeCfg { lo: -0.5, hi: 0.5 });
        config.n_samples = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(134);
        let set: GeneratedSet<f64> = generate(&config, &mut rng).unwrap();
        let ds =
            build_incomplete_dataset(&set, &MaskSpec::PixelIid { rate: 0.5 }, &mut rng).unwrap();

        let channels = ds.manifest.shape[0];
        let per_channel: usize = ds.manifest.shape[1] * ds.manifest.shape[2];
        for c in 0..channels {
            // independent recount straight from the masks
            let mut vals = Vec::new();
            for (s, f) in ds.samples.iter().zip(&set.fields) {
                for i in c * per_channel..(c + 1) * per_channel {
                    if s.mask.bits()[i] == 1 {
                        vals.push(f.data()[i]);
                    } else {
                        assert_eq!(s.x_obs.data()[i], 0.0);
                    }
                }
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let got = ds.manifest.normalization[c];
            assert!((got.mean - mean).abs() < 1e-12);
            assert!((got.std - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn hopeless_mask_rates_fail_after_bounded_resampling() {
        let config = advection_config(vec![4, 4], RangeCfg::fixed(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(135);
        let set: GeneratedSet<f64> = generate(&config, &mut rng).unwrap();
        let err =
            build_incomplete_dataset(&set, &MaskSpec::PixelIid { rate: 1e-12 }, &mut rng);
        assert!(matches!(err, Err(CoreError::Generation(_))));
    }

    #[test]
    fn configs_are_validated_before_any_work() {
        let mut bad = advection_config(vec![8, 8], RangeCfg::fixed(1.0));
        bad.frames = 0;
        assert!(matches!(
            generate::<f64, _>(&bad, &mut ChaCha8Rng::seed_from_u64(136)),
            Err(CoreError::Config(_))
        ));

        let mut bad = advection_config(vec![8, 8], RangeCfg::fixed(1.0));
        bad.dt = -0.1;
        assert!(generate::<f64, _>(&bad, &mut ChaCha8Rng::seed_from_u64(136)).is_err());

        let bad = advection_config(vec![8, 8, 8], RangeCfg::fixed(1.0));
        assert!(generate::<f64, _>(&bad, &mut ChaCha8Rng::seed_from_u64(136)).is_err());

        let bad = advection_config(vec![8, 8], RangeCfg { lo: 1.0, hi: f64::NAN });
        assert!(generate::<f64, _>(&bad, &mut ChaCha8Rng::seed_from_u64(136)).is_err());
    }
}
