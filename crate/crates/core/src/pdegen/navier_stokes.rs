//! 2-D incompressible flow in vorticity form on the 2π-periodic square.
//!
//! ```text
//! dω/dt + u·∇ω = ν ∇²ω + F,   u = (dψ/dy, -dψ/dx),   ∇²ψ = -ω
//! ```
//!
//! Pseudo-spectral: derivatives and the Poisson solve are diagonal in
//! Fourier space, the advection product is formed on the grid, and its
//! transform is truncated with the 2/3 rule so the quadratic term cannot
//! alias. Time stepping is RK4 on the spectral coefficients. The initial
//! vorticity is a random field whose spectrum is peaked at a random
//! wavenumber, scaled to max |ω| = 3.
//!
//! The stored trajectory is one channel per frame of physical vorticity.
//! A step that sends max |ω| beyond 1000x its initial value (or to a
//! non-finite value) aborts generation rather than emit garbage.

use num_complex::Complex;
use rand::Rng;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::{fft2, freq_index, ifft2, ComplexField, Field};

use super::{Forcing, PdeConfig, RangeCfg};

const BLOWUP_FACTOR: f64 = 1e3;
const INITIAL_MAX_VORTICITY: f64 = 3.0;

/// Wavenumber tables for an `h x w` grid, plus the 2/3-rule survival mask.
struct Spectral {
    h: usize,
    w: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    keep: Vec<bool>,
}

impl Spectral {
    fn new(h: usize, w: usize) -> Self {
        let kx: Vec<f64> = (0..w).map(|i| freq_index(w, i) as f64).collect();
        let ky: Vec<f64> = (0..h).map(|j| freq_index(h, j) as f64).collect();
        let mut k2 = Vec::with_capacity(h * w);
        let mut keep = Vec::with_capacity(h * w);
        for j in 0..h {
            for i in 0..w {
                k2.push(kx[i] * kx[i] + ky[j] * ky[j]);
                keep.push(
                    kx[i].abs() <= w as f64 / 3.0 && ky[j].abs() <= h as f64 / 3.0,
                );
            }
        }
        Self { h, w, kx, ky, k2, keep }
    }

    fn bins(&self) -> usize {
        self.h * self.w
    }

    /// `i * k * coeff` for the given wavenumber component.
    #[inline]
    fn deriv(k: f64, c: Complex<f64>) -> Complex<f64> {
        Complex::new(-k * c.im, k * c.re)
    }

    /// Velocity spectrum from the vorticity spectrum via the streamfunction.
    fn velocity(&self, omega_hat: &ComplexField<f64>) -> (ComplexField<f64>, ComplexField<f64>) {
        let mut u = ComplexField::zeros(self.h, self.w);
        let mut v = ComplexField::zeros(self.h, self.w);
        for j in 0..self.h {
            for i in 0..self.w {
                let at = j * self.w + i;
                if self.k2[at] == 0.0 {
                    continue;
                }
                let psi = omega_hat.data()[at] / self.k2[at];
                u.data_mut()[at] = Self::deriv(self.ky[j], psi);
                v.data_mut()[at] = -Self::deriv(self.kx[i], psi);
            }
        }
        (u, v)
    }

    fn rhs(
        &self,
        omega_hat: &ComplexField<f64>,
        nu: f64,
        forcing_hat: Option<&ComplexField<f64>>,
    ) -> Result<ComplexField<f64>> {
        let (u_hat, v_hat) = self.velocity(omega_hat);
        let mut wx_hat = ComplexField::zeros(self.h, self.w);
        let mut wy_hat = ComplexField::zeros(self.h, self.w);
        for j in 0..self.h {
            for i in 0..self.w {
                let at = j * self.w + i;
                let c = omega_hat.data()[at];
                wx_hat.data_mut()[at] = Self::deriv(self.kx[i], c);
                wy_hat.data_mut()[at] = Self::deriv(self.ky[j], c);
            }
        }

        let u = ifft2(&u_hat)?;
        let v = ifft2(&v_hat)?;
        let wx = ifft2(&wx_hat)?;
        let wy = ifft2(&wy_hat)?;
        let advect: Vec<f64> = (0..self.bins())
            .map(|i| {
                -(u.data()[i].re * wx.data()[i].re + v.data()[i].re * wy.data()[i].re)
            })
            .collect();
        let advect_hat = fft2(&ComplexField::from_real(self.h, self.w, &advect)?)?;

        let mut out = ComplexField::zeros(self.h, self.w);
        for at in 0..self.bins() {
            let mut c = if self.keep[at] {
                advect_hat.data()[at]
            } else {
                Complex::new(0.0, 0.0)
            };
            c -= omega_hat.data()[at] * (nu * self.k2[at]);
            if let Some(f) = forcing_hat {
                c += f.data()[at];
            }
            out.data_mut()[at] = c;
        }
        Ok(out)
    }
}

fn axpy(dst: &mut ComplexField<f64>, scale: f64, src: &ComplexField<f64>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * scale;
    }
}

fn rk4_step(
    spectral: &Spectral,
    omega_hat: &ComplexField<f64>,
    dt: f64,
    nu: f64,
    forcing_hat: Option<&ComplexField<f64>>,
) -> Result<ComplexField<f64>> {
    let k1 = spectral.rhs(omega_hat, nu, forcing_hat)?;
    let mut s2 = omega_hat.clone();
    axpy(&mut s2, 0.5 * dt, &k1);
    let k2 = spectral.rhs(&s2, nu, forcing_hat)?;
    let mut s3 = omega_hat.clone();
    axpy(&mut s3, 0.5 * dt, &k2);
    let k3 = spectral.rhs(&s3, nu, forcing_hat)?;
    let mut s4 = omega_hat.clone();
    axpy(&mut s4, dt, &k3);
    let k4 = spectral.rhs(&s4, nu, forcing_hat)?;

    let mut out = omega_hat.clone();
    axpy(&mut out, dt / 6.0, &k1);
    axpy(&mut out, dt / 3.0, &k2);
    axpy(&mut out, dt / 3.0, &k3);
    axpy(&mut out, dt / 6.0, &k4);
    Ok(out)
}

/// Random band-limited vorticity with spectrum peaked at `k_peak`, scaled to
/// `INITIAL_MAX_VORTICITY`. Returns the spectral state.
fn initial_vorticity<R: Rng + ?Sized>(
    spectral: &Spectral,
    k_peak: f64,
    rng: &mut R,
) -> Result<ComplexField<f64>> {
    let (h, w) = (spectral.h, spectral.w);
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut omega_hat = fft2(&ComplexField::from_real(h, w, &noise)?)?;
    for at in 0..spectral.bins() {
        let k = spectral.k2[at].sqrt();
        let envelope = if spectral.k2[at] == 0.0 || !spectral.keep[at] {
            0.0
        } else {
            (-(k - k_peak) * (k - k_peak) / 2.0).exp()
        };
        omega_hat.data_mut()[at] *= envelope;
    }
    let phys = ifft2(&omega_hat)?;
    let max = phys.data().iter().map(|c| c.re.abs()).fold(0.0f64, f64::max);
    if max < 1e-12 {
        return Err(CoreError::Numerical("initial vorticity vanished".into()));
    }
    let scale = INITIAL_MAX_VORTICITY / max;
    for c in omega_hat.data_mut() {
        *c *= scale;
    }
    Ok(omega_hat)
}

pub(super) fn gen_sample<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    nu: &RangeCfg,
    forcing: Option<&Forcing>,
    rng: &mut R,
) -> Result<(Field<T>, serde_json::Value)> {
    let (h, w) = config.spatial()?;
    let spectral = Spectral::new(h, w);

    let peak_max = (h.min(w) / 3).max(1);
    if peak_max < 2 {
        return Err(CoreError::config(format!(
            "grid {h}x{w} is too small to host a band-limited spectrum"
        )));
    }
    let forcing_hat = match forcing {
        None => None,
        Some(f) => {
            if f.mode == 0 || f.mode as f64 > h as f64 / 3.0 {
                return Err(CoreError::config(format!(
                    "forcing mode {} is outside the dealiased band of a height-{h} grid",
                    f.mode
                )));
            }
            if !f.amplitude.is_finite() {
                return Err(CoreError::config("forcing amplitude must be finite"));
            }
            let vals: Vec<f64> = (0..h * w)
                .map(|at| {
                    let y = std::f64::consts::TAU * (at / w) as f64 / h as f64;
                    f.amplitude * (f.mode as f64 * y).cos()
                })
                .collect();
            Some(fft2(&ComplexField::from_real(h, w, &vals)?)?)
        }
    };

    let nu = nu.draw(rng);
    let k_peak = rng.random_range(2..=peak_max) as f64;
    let mut omega_hat = initial_vorticity(&spectral, k_peak, rng)?;

    let mut data = Vec::with_capacity(config.frames * h * w);
    let mut max0 = 0.0f64;
    for frame in 0..config.frames {
        if frame > 0 {
            omega_hat = rk4_step(&spectral, &omega_hat, config.dt, nu, forcing_hat.as_ref())?;
        }
        let phys = ifft2(&omega_hat)?;
        let max = phys.data().iter().map(|c| c.re.abs()).fold(0.0f64, f64::max);
        if frame == 0 {
            max0 = max;
        } else if !max.is_finite() || max > BLOWUP_FACTOR * max0 {
            return Err(CoreError::Generation(format!(
                "vorticity blew up at frame {frame}: max |w| = {max:.3e} vs initial {max0:.3e}"
            )));
        }
        data.extend(phys.data().iter().map(|c| T::of(c.re)));
    }
    let field = Field::new(vec![config.frames, h, w], data)?;
    Ok((field, json!({ "nu": nu, "k_peak": k_peak, "forcing": forcing })))
}

// ---------------------------------------------------------------------------
// physical diagnostics (used by generation tests and the numerics checks)

/// Kinetic energy `0.5 * mean(u^2 + v^2)` of one vorticity frame, via
/// Parseval over the streamfunction spectrum.
pub fn kinetic_energy(omega: &[f64], h: usize, w: usize) -> Result<f64> {
    let spec = Spectral::new(h, w);
    let omega_hat = fft2(&ComplexField::from_real(h, w, omega)?)?;
    let mut acc = 0.0;
    for at in 0..spec.bins() {
        if spec.k2[at] > 0.0 {
            acc += omega_hat.data()[at].norm_sqr() / spec.k2[at];
        }
    }
    let n = (h * w) as f64;
    Ok(0.5 * acc / (n * n))
}

/// Enstrophy `0.5 * mean(omega^2)` of one vorticity frame.
pub fn enstrophy(omega: &[f64]) -> f64 {
    0.5 * omega.iter().map(|v| v * v).sum::<f64>() / omega.len() as f64
}

/// Max spectral modulus of the divergence of the velocity reconstructed from
/// one vorticity frame. Zero in exact arithmetic by construction.
pub fn spectral_divergence_max(omega: &[f64], h: usize, w: usize) -> Result<f64> {
    let spec = Spectral::new(h, w);
    let omega_hat = fft2(&ComplexField::from_real(h, w, omega)?)?;
    let (u_hat, v_hat) = spec.velocity(&omega_hat);
    let mut max = 0.0f64;
    for j in 0..h {
        for i in 0..w {
            let at = j * w + i;
            let div = Spectral::deriv(spec.kx[i], u_hat.data()[at])
                + Spectral::deriv(spec.ky[j], v_hat.data()[at]);
            max = max.max(div.norm());
        }
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdegen::{generate, GeneratedSet, SystemParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(nu: f64, forcing: Option<Forcing>) -> PdeConfig {
        PdeConfig {
            system: SystemParams::NavierStokes { nu: RangeCfg::fixed(nu), forcing },
            grid: vec![16, 16],
            frames: 8,
            dt: 0.05,
            n_samples: 1,
            seed: 0,
        }
    }

    #[test]
    fn the_spectral_solver_requires_power_of_two_grids() {
        let mut cfg = config(0.02, None);
        cfg.grid = vec![12, 16];
        assert!(matches!(
            generate::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(153)),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn unforced_kinetic_energy_never_increases() {
        let cfg = config(0.02, None);
        let set: GeneratedSet<f64> =
            generate(&cfg, &mut ChaCha8Rng::seed_from_u64(154)).unwrap();
        let cells = 16 * 16;
        let data = set.fields[0].data();
        let mut prev = f64::INFINITY;
        for k in 0..cfg.frames {
            let ke = kinetic_energy(&data[k * cells..(k + 1) * cells], 16, 16).unwrap();
            assert!(ke <= prev * (1.0 + 1e-8), "frame {k}: KE {ke} > {prev}");
            prev = ke;
        }
    }

    #[test]
    fn strong_viscosity_decays_enstrophy_monotonically() {
        let cfg = config(0.5, None);
        let set: GeneratedSet<f64> =
            generate(&cfg, &mut ChaCha8Rng::seed_from_u64(155)).unwrap();
        let cells = 16 * 16;
        let data = set.fields[0].data();
        let mut prev = f64::INFINITY;
        for k in 0..cfg.frames {
            let z = enstrophy(&data[k * cells..(k + 1) * cells]);
            assert!(z < prev, "frame {k}: enstrophy {z} did not decay from {prev}");
            prev = z;
        }
    }

    #[test]
    fn reconstructed_velocity_is_divergence_free_in_spectrum() {
        let cfg = config(0.02, Some(Forcing { amplitude: 0.5, mode: 2 }));
        let set: GeneratedSet<f64> =
            generate(&cfg, &mut ChaCha8Rng::seed_from_u64(156)).unwrap();
        let cells = 16 * 16;
        let data = set.fields[0].data();
        for k in 0..cfg.frames {
            let div =
                spectral_divergence_max(&data[k * cells..(k + 1) * cells], 16, 16).unwrap();
            assert!(div < 1e-10, "frame {k}: divergence {div}");
        }
    }

    #[test]
    fn runaway_forcing_is_reported_as_blowup() {
        let cfg = config(1e-4, Some(Forcing { amplitude: 1e6, mode: 2 }));
        let err = generate::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(157));
        assert!(matches!(err, Err(CoreError::Generation(_))), "{err:?}");
    }

    #[test]
    fn out_of_band_forcing_modes_are_rejected() {
        let cfg = config(0.02, Some(Forcing { amplitude: 0.5, mode: 7 }));
        assert!(matches!(
            generate::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(158)),
            Err(CoreError::Config(_))
        ));
    }
}
