//! Exact periodic advection.
//!
//! The initial condition is a sum of at most five random Fourier modes and
//! the transport solution `u(t, x, y) = u0(x - beta*t, y)` is evaluated in
//! closed form per frame, so the stored trajectory is analytic ground truth
//! rather than a numerical approximation. Coordinates are normalized to the
//! unit square; `beta` is measured in domain lengths per unit time.

use rand::Rng;
use rand::RngExt;
use serde_json::json;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Field;

use super::{PdeConfig, RangeCfg};

const MAX_MODES: usize = 5;

/// One sinusoid `amp * cos(2*pi*(kx*x + ky*y) + phase)` over the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierMode {
    pub kx: i64,
    pub ky: i64,
    pub amp: f64,
    pub phase: f64,
}

/// Evaluates the transported mode sum on an `h x w` grid for `frames`
/// snapshots `dt` apart: frame `k` is `u0(x - beta*k*dt, y)` in closed form.
/// Useful directly when an experiment needs analytic transport of a known
/// initial condition.
pub fn advection_frames<T: Real>(
    modes: &[FourierMode],
    beta: f64,
    frames: usize,
    dt: f64,
    h: usize,
    w: usize,
) -> Result<Field<T>> {
    let tau = 2.0 * std::f64::consts::PI;
    let mut data = Vec::with_capacity(frames * h * w);
    for k in 0..frames {
        let t = k as f64 * dt;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for m in modes {
                    let arg = tau
                        * (m.kx as f64 * (x as f64 / w as f64 - beta * t)
                            + m.ky as f64 * y as f64 / h as f64)
                        + m.phase;
                    acc += m.amp * arg.cos();
                }
                data.push(T::of(acc));
            }
        }
    }
    Field::new(vec![frames, h, w], data)
}

fn draw_modes<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<FourierMode> {
    let n = rng.random_range(1..=MAX_MODES);
    let kx_max = (w / 4).clamp(1, 3) as i64;
    let ky_max = if h > 1 { (h / 4).clamp(1, 2) as i64 } else { 0 };
    (0..n)
        .map(|_| FourierMode {
            // kx > 0 loses no generality: negative kx folds into the phase
            kx: rng.random_range(1..=kx_max),
            ky: if ky_max > 0 { rng.random_range(-ky_max..=ky_max) } else { 0 },
            amp: rng.random_range(0.3..1.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

pub(super) fn gen_sample<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    beta: &RangeCfg,
    rng: &mut R,
) -> Result<(Field<T>, serde_json::Value)> {
    let (h, w) = config.spatial()?;
    let beta = beta.draw(rng);
    let modes = draw_modes(h, w, rng);
    let field = advection_frames(&modes, beta, config.frames, config.dt, h, w)?;
    Ok((field, json!({ "beta": beta })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `u0(x) = sin(2*pi*x)` as a single cosine mode.
    fn sine_mode() -> FourierMode {
        FourierMode { kx: 1, ky: 0, amp: 1.0, phase: -std::f64::consts::FRAC_PI_2 }
    }

    #[test]
    fn quarter_period_transport_of_a_sine_hits_minus_one_at_the_origin() {
        let field: Field<f64> = advection_frames(&[sine_mode()], 1.0, 2, 0.25, 1, 64).unwrap();
        // frame 0 is the initial sine
        assert!((field.data()[0] - 0.0).abs() < 1e-12);
        assert!((field.data()[16] - 1.0).abs() < 1e-12);
        // after t = 0.25 at x = 0: sin(2*pi*(0 - 0.25)) = -1
        assert!((field.data()[64] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_speed_means_every_frame_is_the_initial_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(140);
        let modes = draw_modes(8, 8, &mut rng);
        let field: Field<f64> = advection_frames(&modes, 0.0, 5, 0.3, 8, 8).unwrap();
        let frame0 = &field.data()[..64];
        for k in 1..5 {
            assert_eq!(&field.data()[k * 64..(k + 1) * 64], frame0);
        }
    }

    #[test]
    fn spatial_mean_is_conserved_across_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(141);
        for _ in 0..5 {
            let modes = draw_modes(12, 16, &mut rng);
            let beta = rng.random_range(-2.0..2.0);
            let field: Field<f64> = advection_frames(&modes, beta, 6, 0.17, 12, 16).unwrap();
            let cells = 12 * 16;
            let mean0: f64 =
                field.data()[..cells].iter().sum::<f64>() / cells as f64;
            for k in 1..6 {
                let mean: f64 = field.data()[k * cells..(k + 1) * cells].iter().sum::<f64>()
                    / cells as f64;
                assert!((mean - mean0).abs() < 1e-12, "frame {k}: {mean} vs {mean0}");
            }
        }
    }

    #[test]
    fn grid_multiple_shifts_reduce_to_index_rolls() {
        let mut rng = ChaCha8Rng::seed_from_u64(142);
        let (h, w) = (4, 16);
        let modes = draw_modes(h, w, &mut rng);
        // beta*dt*w = 0.5*0.25*16 = 2 cells per frame, exactly
        let (beta, dt) = (0.5, 0.25);
        let field: Field<f64> = advection_frames(&modes, beta, 3, dt, h, w).unwrap();
        let cells = h * w;
        for k in 1..3 {
            let shift = 2 * k;
            for y in 0..h {
                for x in 0..w {
                    let src = field.data()[y * w + (x + w - shift % w) % w];
                    let got = field.data()[k * cells + y * w + x];
                    assert!(
                        (got - src).abs() < 1e-10,
                        "frame {k} ({y},{x}): {got} vs rolled {src}"
                    );
                }
            }
        }
    }

    #[test]
    fn one_dimensional_grids_produce_single_row_frames() {
        let config = PdeConfig {
            system: super::super::SystemParams::Advection { beta: RangeCfg::fixed(1.0) },
            grid: vec![32],
            frames: 3,
            dt: 0.1,
            n_samples: 1,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(143);
        let (field, params) =
            gen_sample::<f64, _>(&config, &RangeCfg::fixed(1.0), &mut rng).unwrap();
        assert_eq!(field.shape(), [3, 1, 32]);
        assert_eq!(params["beta"], 1.0);
    }
}
