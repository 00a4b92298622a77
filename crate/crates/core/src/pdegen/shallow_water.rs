//! Linear rotating shallow water on the doubly periodic unit square.
//!
//! Linearized about a state of rest with reference depth `h_depth`:
//!
//! ```text
//! du/dt =  f v - g dh/dx
//! dv/dt = -f u - g dh/dy
//! dh/dt = -h_depth (du/dx + dv/dy)
//! ```
//!
//! Space is discretized with centered differences on a collocated grid,
//! time with classical RK4; the solver step equals the frame spacing. The
//! initial state is a small random height perturbation at rest, so the
//! dynamics are pure rotating gravity waves and total energy
//! `0.5 * sum(h_depth*(u^2+v^2) + g*h^2) * dx * dy` is conserved up to the
//! RK4 truncation error.

use rand::Rng;
use rand::RngExt;
use serde_json::json;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::Field;

use super::{PdeConfig, RangeCfg};

#[derive(Clone)]
pub(super) struct SwState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
}

impl SwState {
    fn zeros(cells: usize) -> Self {
        Self { u: vec![0.0; cells], v: vec![0.0; cells], h: vec![0.0; cells] }
    }

    /// `self += scale * other`, fused over all three variables.
    fn axpy(&mut self, scale: f64, other: &SwState) {
        for (a, b) in self.u.iter_mut().zip(&other.u) {
            *a += scale * b;
        }
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            *a += scale * b;
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += scale * b;
        }
    }
}

/// Centered periodic x-derivative; `dx = 1/w` on the unit square.
fn ddx(q: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let scale = 0.5 * w as f64;
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let xp = row + (x + 1) % w;
            let xm = row + (x + w - 1) % w;
            out[row + x] = (q[xp] - q[xm]) * scale;
        }
    }
}

fn ddy(q: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let scale = 0.5 * h as f64;
    for y in 0..h {
        let yp = ((y + 1) % h) * w;
        let ym = ((y + h - 1) % h) * w;
        let row = y * w;
        for x in 0..w {
            out[row + x] = (q[yp + x] - q[ym + x]) * scale;
        }
    }
}

struct SwSystem {
    f: f64,
    g: f64,
    h_depth: f64,
    gh: usize,
    gw: usize,
}

impl SwSystem {
    fn rhs(&self, s: &SwState, scratch: &mut [Vec<f64>; 2]) -> SwState {
        let cells = s.u.len();
        let mut out = SwState::zeros(cells);
        let [dqx, dqy] = scratch;

        ddx(&s.h, self.gh, self.gw, dqx);
        ddy(&s.h, self.gh, self.gw, dqy);
        for i in 0..cells {
            out.u[i] = self.f * s.v[i] - self.g * dqx[i];
            out.v[i] = -self.f * s.u[i] - self.g * dqy[i];
        }

        ddx(&s.u, self.gh, self.gw, dqx);
        ddy(&s.v, self.gh, self.gw, dqy);
        for i in 0..cells {
            out.h[i] = -self.h_depth * (dqx[i] + dqy[i]);
        }
        out
    }

    fn rk4_step(&self, s: &SwState, dt: f64, scratch: &mut [Vec<f64>; 2]) -> SwState {
        let k1 = self.rhs(s, scratch);
        let mut s2 = s.clone();
        s2.axpy(0.5 * dt, &k1);
        let k2 = self.rhs(&s2, scratch);
        let mut s3 = s.clone();
        s3.axpy(0.5 * dt, &k2);
        let k3 = self.rhs(&s3, scratch);
        let mut s4 = s.clone();
        s4.axpy(dt, &k3);
        let k4 = self.rhs(&s4, scratch);

        let mut out = s.clone();
        out.axpy(dt / 6.0, &k1);
        out.axpy(dt / 3.0, &k2);
        out.axpy(dt / 3.0, &k3);
        out.axpy(dt / 6.0, &k4);
        out
    }
}

/// Integrates `frames - 1` steps from `initial` and packs the trajectory as
/// `[3*frames, h, w]`, variable-major: all `u` frames, then `v`, then `h`.
pub(super) fn integrate<T: Real>(
    initial: SwState,
    f: f64,
    g: f64,
    h_depth: f64,
    frames: usize,
    dt: f64,
    gh: usize,
    gw: usize,
) -> Result<Field<T>> {
    let cells = gh * gw;
    let system = SwSystem { f, g, h_depth, gh, gw };
    let mut scratch = [vec![0.0; cells], vec![0.0; cells]];
    let mut states = Vec::with_capacity(frames);
    states.push(initial);
    for _ in 1..frames {
        let next = system.rk4_step(states.last().expect("nonempty"), dt, &mut scratch);
        states.push(next);
    }

    let mut data = Vec::with_capacity(3 * frames * cells);
    for var in 0..3 {
        for s in &states {
            let q = match var {
                0 => &s.u,
                1 => &s.v,
                _ => &s.h,
            };
            data.extend(q.iter().map(|&x| T::of(x)));
        }
    }
    Field::new(vec![3 * frames, gh, gw], data)
}

/// Total energy of each stored frame, `0.5*sum(h_depth*(u^2+v^2)+g*h^2)*dx*dy`.
pub fn energy_per_frame<T: Real>(
    field: &Field<T>,
    frames: usize,
    g: f64,
    h_depth: f64,
) -> Vec<f64> {
    let cells = field.numel() / (3 * frames);
    let cell_area = 1.0 / cells as f64;
    let data = field.data();
    (0..frames)
        .map(|k| {
            let mut e = 0.0;
            for i in 0..cells {
                let u = data[k * cells + i].wide();
                let v = data[(frames + k) * cells + i].wide();
                let h = data[(2 * frames + k) * cells + i].wide();
                e += h_depth * (u * u + v * v) + g * h * h;
            }
            0.5 * e * cell_area
        })
        .collect()
}

fn random_height<R: Rng + ?Sized>(gh: usize, gw: usize, rng: &mut R) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let n_modes = rng.random_range(1..=3);
    let modes: Vec<(i64, i64, f64, f64)> = (0..n_modes)
        .map(|_| {
            // never the constant mode: a uniform height offset carries no dynamics
            loop {
                let kx = rng.random_range(-2i64..=2);
                let ky = rng.random_range(-2i64..=2);
                if kx != 0 || ky != 0 {
                    return (kx, ky, rng.random_range(0.05..0.2), rng.random_range(0.0..tau));
                }
            }
        })
        .collect();
    let mut h = vec![0.0; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let mut acc = 0.0;
            for &(kx, ky, amp, phase) in &modes {
                acc += amp
                    * (tau * (kx as f64 * x as f64 / gw as f64 + ky as f64 * y as f64 / gh as f64)
                        + phase)
                        .cos();
            }
            h[y * gw + x] = acc;
        }
    }
    h
}

pub(super) fn gen_sample<T: Real, R: Rng + ?Sized>(
    config: &PdeConfig,
    f: &RangeCfg,
    g: f64,
    h_depth: f64,
    rng: &mut R,
) -> Result<(Field<T>, serde_json::Value)> {
    let (gh, gw) = config.spatial()?;
    let f = f.draw(rng);
    let initial = SwState {
        u: vec![0.0; gh * gw],
        v: vec![0.0; gh * gw],
        h: random_height(gh, gw, rng),
    };
    let field = integrate(initial, f, g, h_depth, config.frames, config.dt, gh, gw)?;
    Ok((field, json!({ "f": f, "g": g, "h_depth": h_depth, "dt": config.dt })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CoreError;
    use crate::pdegen::{generate, GeneratedSet, SystemParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(dt: f64, g: f64) -> PdeConfig {
        PdeConfig {
            system: SystemParams::ShallowWater {
                f: RangeCfg { lo: 0.5, hi: 2.0 },
                g,
                h_depth: 1.0,
            },
            grid: vec![16, 16],
            frames: 8,
            dt,
            n_samples: 2,
            seed: 0,
        }
    }

    #[test]
    fn unstable_steps_are_rejected_by_the_cfl_bound() {
        // dt*sqrt(9.8)*16 = 2.5 >= 0.5
        let err = generate::<f64, _>(&config(0.05, 9.8), &mut ChaCha8Rng::seed_from_u64(150));
        assert!(matches!(err, Err(CoreError::Config(_))));
    }

    #[test]
    fn energy_drifts_less_than_one_percent_at_a_stable_step() {
        let cfg = config(0.01, 1.0);
        let set: GeneratedSet<f64> =
            generate(&cfg, &mut ChaCha8Rng::seed_from_u64(151)).unwrap();
        for field in &set.fields {
            let energy = energy_per_frame(field, cfg.frames, 1.0, 1.0);
            assert!(energy[0] > 0.0);
            for (k, e) in energy.iter().enumerate() {
                let drift = (e - energy[0]).abs() / energy[0];
                assert!(drift < 0.01, "frame {k}: relative drift {drift}");
            }
        }
    }

    #[test]
    fn a_resting_constant_state_stays_exactly_at_rest() {
        let cells = 8 * 8;
        let initial =
            SwState { u: vec![0.0; cells], v: vec![0.0; cells], h: vec![0.25; cells] };
        let field: Field<f64> = integrate(initial, 0.7, 1.0, 1.0, 4, 0.01, 8, 8).unwrap();
        let frame0: Vec<f64> = field.data()[..cells].to_vec();
        assert!(frame0.iter().all(|&x| x == 0.0));
        for k in 0..4 {
            for i in 0..cells {
                assert_eq!(field.data()[k * cells + i], 0.0); // u
                assert_eq!(field.data()[(4 + k) * cells + i], 0.0); // v
                assert_eq!(field.data()[(8 + k) * cells + i], 0.25); // h
            }
        }
    }

    #[test]
    fn trajectories_are_variable_major_and_start_at_rest() {
        let cfg = config(0.01, 1.0);
        let set: GeneratedSet<f64> =
            generate(&cfg, &mut ChaCha8Rng::seed_from_u64(152)).unwrap();
        let field = &set.fields[0];
        assert_eq!(field.shape(), [24, 16, 16]);
        let cells = 256;
        // frame 0 of u and v (channels 0 and 8) is the resting initial state
        assert!(field.data()[..cells].iter().all(|&x| x == 0.0));
        assert!(field.data()[8 * cells..9 * cells].iter().all(|&x| x == 0.0));
        // the height field moves
        let h0 = &field.data()[16 * cells..17 * cells];
        let h1 = &field.data()[17 * cells..18 * cells];
        assert!(h0.iter().zip(h1).any(|(a, b)| (a - b).abs() > 1e-9));
        assert_eq!(set.params[0]["g"], 1.0);
    }
}
