//! Conditional denoiser: a residual conv net over `[C,H,W]` fields that sees
//! the context-masked input, the context mask itself (as extra channels), and
//! the diffusion time.
//!
//! Layout: `[masked field ‖ ctx mask]` → 1×1 lift conv → `n_blocks` residual
//! blocks → zero-initialized 1×1 head. Each block is conv → per-channel
//! affine modulation from a sinusoidal time embedding (through a small MLP
//! and per-block linear heads) → GELU → conv → residual add. The zero head
//! makes a fresh model predict exactly the zero field, so early training
//! targets the data mean rather than fighting random structure.

use rand::Rng;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::masks::Mask;
use crate::real::Real;
use crate::tensor::{conv2d_shape_hint, Field, NodeId, Padding, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Channels of the data field (frames fold into channels at this scale).
    pub field_channels: usize,
    pub hidden_channels: usize,
    pub n_blocks: usize,
    /// Side length of the square conv kernels; must be odd.
    pub kernel: usize,
    /// Width of the sinusoidal time embedding; even, at least 4.
    pub time_embed_dim: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.field_channels == 0 || self.hidden_channels == 0 || self.n_blocks == 0 {
            return Err(CoreError::config("denoiser channel/block counts must be positive"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(CoreError::config(format!(
                "denoiser kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.time_embed_dim < 4 || self.time_embed_dim % 2 != 0 {
            return Err(CoreError::config(format!(
                "time_embed_dim must be even and at least 4, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    config: DenoiserConfig,
    tensors: Vec<(String, Field<T>)>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Field<T>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [(String, Field<T>)] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Field<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, f)| f.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|(_, f)| f.all_finite())
    }

    /// Rebuilds params from named tensors (checkpoint load). Order and shapes
    /// must match what `init` would produce for the config.
    pub fn from_tensors(
        config: DenoiserConfig,
        tensors: Vec<(String, Field<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != tensors.len() {
            return Err(CoreError::Format(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((want_name, want_shape, _), (name, got)) in layout.iter().zip(&tensors) {
            if want_name != name || want_shape.as_slice() != got.shape() {
                return Err(CoreError::Format(format!(
                    "parameter {name} has shape {:?}, expected {want_name} {want_shape:?}",
                    got.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }
}

/// Name, shape, and fan-in (0 for zero-initialized tensors) of every
/// parameter, in construction order.
fn tensor_layout(c: &DenoiserConfig) -> Vec<(String, Vec<usize>, usize)> {
    let (ch, hid, e, k) = (c.field_channels, c.hidden_channels, c.time_embed_dim, c.kernel);
    let mut out = vec![
        ("lift.w".into(), vec![hid, 2 * ch, 1, 1], 2 * ch),
        ("lift.b".into(), vec![hid], 0),
        ("time.w1".into(), vec![e, e], e),
        ("time.b1".into(), vec![e], 0),
        ("time.w2".into(), vec![e, e], e),
        ("time.b2".into(), vec![e], 0),
    ];
    for i in 0..c.n_blocks {
        out.push((format!("block{i}.conv1.w"), vec![hid, hid, k, k], hid * k * k));
        out.push((format!("block{i}.conv1.b"), vec![hid], 0));
        out.push((format!("block{i}.scale.w"), vec![hid, e], 0));
        out.push((format!("block{i}.scale.b"), vec![hid], 0));
        out.push((format!("block{i}.shift.w"), vec![hid, e], 0));
        out.push((format!("block{i}.shift.b"), vec![hid], 0));
        out.push((format!("block{i}.conv2.w"), vec![hid, hid, k, k], hid * k * k));
        out.push((format!("block{i}.conv2.b"), vec![hid], 0));
    }
    out.push(("head.w".into(), vec![ch, hid, 1, 1], 0));
    out.push(("head.b".into(), vec![ch], 0));
    out
}

/// Closed-form parameter count for a config.
pub fn expected_param_count(c: &DenoiserConfig) -> usize {
    let (ch, hid, e, k) = (c.field_channels, c.hidden_channels, c.time_embed_dim, c.kernel);
    let lift = hid * 2 * ch + hid;
    let time = 2 * e * e + 2 * e;
    let per_block = 2 * (hid * hid * k * k + hid) + 2 * (hid * e + hid);
    let head = ch * hid + ch;
    lift + time + c.n_blocks * per_block + head
}

/// Fan-in-scaled normal weights, zero biases, zero modulation heads, zero
/// output head.
pub fn init<T: Real, R: Rng + ?Sized>(config: &DenoiserConfig, rng: &mut R) -> DenoiserParams<T> {
    config
        .validate()
        .expect("init requires a valid config; call validate() first");
    let tensors = tensor_layout(config)
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let field = if fan_in == 0 {
                Field::zeros(shape)
            } else {
                let std = (2.0 / fan_in as f64).sqrt();
                Field::from_fn(shape, |_| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::of(z * std)
                })
            };
            (name, field)
        })
        .collect::<Vec<_>>();

    debug_assert_eq!(
        tensors.iter().map(|(_, f)| f.numel()).sum::<usize>(),
        expected_param_count(config)
    );
    DenoiserParams { config: *config, tensors }
}

/// Sinusoidal features of the diffusion time: interleaved
/// `sin(ω_j t), cos(ω_j t)` with `ω_j = π·2000^(j/(E/2−1))`, spanning periods
/// from the whole unit interval down to ~1/2000 of it.
pub fn time_embedding<T: Real>(t: f64, dim: usize) -> Field<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for j in 0..half {
        let expo = j as f64 / (half - 1) as f64;
        let omega = std::f64::consts::PI * 2000f64.powf(expo);
        data.push(T::of((omega * t).sin()));
        data.push(T::of((omega * t).cos()));
    }
    Field::from_parts(vec![dim], data)
}

/// A recorded forward pass: the tape, the output node, and the leaf node of
/// every parameter tensor in `DenoiserParams` order.
pub struct ForwardGraph<T> {
    pub tape: Tape<T>,
    pub output: NodeId,
    pub param_ids: Vec<NodeId>,
}

impl<T: Real> ForwardGraph<T> {
    pub fn output_value(&self) -> &Field<T> {
        self.tape.value(self.output)
    }
}

/// Records the full differentiable forward pass. `masked_input` must already
/// be multiplied by the context mask — the net has no other view of the data.
pub fn forward_graph<T: Real>(
    params: &DenoiserParams<T>,
    t: f64,
    masked_input: &Field<T>,
    ctx_mask: &Mask,
) -> Result<ForwardGraph<T>> {
    let c = &params.config;
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::domain(format!("time {t} outside [0, 1]")));
    }
    let shape = masked_input.shape();
    if shape.len() != 3 || shape[0] != c.field_channels {
        return Err(CoreError::shape(format!(
            "denoiser input must be [{}, H, W], got {:?}",
            c.field_channels, shape
        )));
    }
    if ctx_mask.shape() != shape {
        return Err(CoreError::shape(format!(
            "ctx mask shape {:?} does not match input {:?}",
            ctx_mask.shape(),
            shape
        )));
    }
    conv2d_shape_hint(shape[1], shape[2], c.kernel)?;

    // stack [masked field ‖ mask] along channels; neither is a gradient target
    let (h, w) = (shape[1], shape[2]);
    let mut stacked = Vec::with_capacity(2 * c.field_channels * h * w);
    stacked.extend_from_slice(masked_input.data());
    stacked.extend(ctx_mask.bits().iter().map(|&b| T::of(b as f64)));
    let stacked = Field::from_parts(vec![2 * c.field_channels, h, w], stacked);

    let mut tape = Tape::new();
    let mut param_ids = Vec::with_capacity(params.tensors.len());
    for (_, tensor) in &params.tensors {
        param_ids.push(tape.leaf(tensor.clone()));
    }
    let id = |name: &str| -> NodeId {
        let pos = params
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .expect("parameter names are fixed at init");
        param_ids[pos]
    };

    let input = tape.leaf(stacked);
    let emb = tape.leaf(time_embedding(t, c.time_embed_dim));

    let mut x = tape.conv2d(input, id("lift.w"), c.padding)?;
    x = tape.add_channel_bias(x, id("lift.b"))?;

    let mut ht = tape.matvec(id("time.w1"), emb)?;
    ht = tape.add(ht, id("time.b1"))?;
    ht = tape.gelu(ht)?;
    ht = tape.matvec(id("time.w2"), ht)?;
    ht = tape.add(ht, id("time.b2"))?;

    for i in 0..c.n_blocks {
        let mut scale = tape.matvec(id(&format!("block{i}.scale.w")), ht)?;
        scale = tape.add(scale, id(&format!("block{i}.scale.b")))?;
        let mut shift = tape.matvec(id(&format!("block{i}.shift.w")), ht)?;
        shift = tape.add(shift, id(&format!("block{i}.shift.b")))?;

        let mut y = tape.conv2d(x, id(&format!("block{i}.conv1.w")), c.padding)?;
        y = tape.add_channel_bias(y, id(&format!("block{i}.conv1.b")))?;
        y = tape.channel_scale_shift(y, scale, shift)?;
        y = tape.gelu(y)?;
        y = tape.conv2d(y, id(&format!("block{i}.conv2.w")), c.padding)?;
        y = tape.add_channel_bias(y, id(&format!("block{i}.conv2.b")))?;
        x = tape.add(x, y)?;
    }

    let mut out = tape.conv2d(x, id("head.w"), c.padding)?;
    out = tape.add_channel_bias(out, id("head.b"))?;
    Ok(ForwardGraph { tape, output: out, param_ids })
}

/// Inference-only forward pass.
pub fn forward<T: Real>(
    params: &DenoiserParams<T>,
    t: f64,
    masked_input: &Field<T>,
    ctx_mask: &Mask,
) -> Result<Field<T>> {
    forward_graph(params, t, masked_input, ctx_mask)
        .map(|g| g.tape.value(g.output).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            field_channels: 1,
            hidden_channels: 3,
            n_blocks: 1,
            kernel: 3,
            time_embed_dim: 4,
            padding: Padding::Periodic,
        }
    }

    fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Field<f64> {
        Field::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Fills every tensor (zero-init heads included) with noise so outputs
    /// and gradients are non-degenerate.
    fn randomize(params: &mut DenoiserParams<f64>, rng: &mut ChaCha8Rng) {
        for (_, tensor) in params.tensors_mut() {
            for v in tensor.data_mut() {
                *v = rng.random::<f64>() * 0.6 - 0.3;
            }
        }
    }

    #[test]
    fn fresh_params_predict_the_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let cfg = small_config();
        let params: DenoiserParams<f64> = init(&cfg, &mut rng);
        let x = randn(vec![1, 5, 5], &mut rng);
        let mask = Mask::ones(vec![1, 5, 5]);
        let out = forward(&params, 0.3, &mask.apply(&x).unwrap(), &mask).unwrap();
        assert_eq!(out.shape(), &[1, 5, 5]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equal_seeds_give_bitwise_identical_params() {
        let cfg = small_config();
        let a: DenoiserParams<f64> = init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        let b: DenoiserParams<f64> = init(&cfg, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_matches_the_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for cfg in [
            small_config(),
            DenoiserConfig {
                field_channels: 3,
                hidden_channels: 8,
                n_blocks: 4,
                kernel: 5,
                time_embed_dim: 8,
                padding: Padding::Zero,
            },
        ] {
            let params: DenoiserParams<f64> = init(&cfg, &mut rng);
            assert_eq!(params.param_count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let cfg = small_config();
        let mut params: DenoiserParams<f64> = init(&cfg, &mut rng);
        randomize(&mut params, &mut rng);
        let x = randn(vec![1, 4, 4], &mut rng);
        let mask = Mask::ones(vec![1, 4, 4]);
        let masked = mask.apply(&x).unwrap();
        let a = forward(&params, 0.42, &masked, &mask).unwrap();
        let b = forward(&params, 0.42, &masked, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hidden_values_cannot_influence_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let cfg = small_config();
        let mut params: DenoiserParams<f64> = init(&cfg, &mut rng);
        randomize(&mut params, &mut rng);
        let mut mask = Mask::ones(vec![1, 4, 4]);
        mask.set(3, false);
        mask.set(9, false);
        let x = randn(vec![1, 4, 4], &mut rng);
        let mut x_tampered = x.clone();
        x_tampered.data_mut()[3] = 1e6;
        x_tampered.data_mut()[9] = -1e6;
        let a = forward(&params, 0.5, &mask.apply(&x).unwrap(), &mask).unwrap();
        let b = forward(&params, 0.5, &mask.apply(&x_tampered).unwrap(), &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_depends_on_time_and_on_the_mask_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let cfg = small_config();
        let mut params: DenoiserParams<f64> = init(&cfg, &mut rng);
        randomize(&mut params, &mut rng);
        let x = randn(vec![1, 4, 4], &mut rng);
        let full = Mask::ones(vec![1, 4, 4]);
        let masked = full.apply(&x).unwrap();

        let base = forward(&params, 0.0, &masked, &full).unwrap();
        let mut max_diff: f64 = 0.0;
        for i in 1..=10 {
            let out = forward(&params, i as f64 / 10.0, &masked, &full).unwrap();
            max_diff = max_diff.max(out.max_abs_diff(&base).unwrap());
        }
        assert!(max_diff > 0.0, "output ignores t");

        let empty = Mask::zeros(vec![1, 4, 4]);
        let zeroed = empty.apply(&x).unwrap();
        let with_full_mask = forward(&params, 0.5, &zeroed, &full).unwrap();
        let with_empty_mask = forward(&params, 0.5, &zeroed, &empty).unwrap();
        assert!(with_full_mask.max_abs_diff(&with_empty_mask).unwrap() > 0.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let cfg = small_config();
        let mut params: DenoiserParams<f64> = init(&cfg, &mut rng);
        randomize(&mut params, &mut rng);
        let x = randn(vec![1, 4, 4], &mut rng);
        let mask = Mask::ones(vec![1, 4, 4]);
        let masked = mask.apply(&x).unwrap();
        let t = 0.37;

        // functional: sum of squared outputs
        let loss_of = |p: &DenoiserParams<f64>| -> f64 {
            let out = forward(p, t, &masked, &mask).unwrap();
            out.data().iter().map(|v| v * v).sum()
        };

        let graph = forward_graph(&params, t, &masked, &mask).unwrap();
        let mut tape = graph.tape;
        let sq = tape.mul(graph.output, graph.output).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        let mut checked = 0usize;
        for ti in 0..params.tensors().len() {
            let numel = params.tensors()[ti].1.numel();
            // probe a few entries of each tensor rather than all of them
            for ei in [0, numel / 2, numel - 1] {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1.data_mut()[ei] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1.data_mut()[ei] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads.grad(graph.param_ids[ti]).data()[ei];
                let denom = fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "tensor {} entry {ei}: fd {fd} vs analytic {an}",
                    params.tensors()[ti].0
                );
                checked += 1;
            }
        }
        assert!(checked >= 40);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut bad = small_config();
        bad.kernel = 4;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.time_embed_dim = 5;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.time_embed_dim = 2;
        assert!(bad.validate().is_err());
        let mut bad = small_config();
        bad.hidden_channels = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_mismatches_are_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let cfg = small_config();
        let params: DenoiserParams<f64> = init(&cfg, &mut rng);
        // wrong channel count
        let x = randn(vec![2, 4, 4], &mut rng);
        assert!(matches!(
            forward(&params, 0.5, &x, &Mask::ones(vec![2, 4, 4])),
            Err(CoreError::Shape(_))
        ));
        // mask/field disagreement
        let x = randn(vec![1, 4, 4], &mut rng);
        assert!(matches!(
            forward(&params, 0.5, &x, &Mask::ones(vec![1, 5, 4])),
            Err(CoreError::Shape(_))
        ));
        // grid smaller than the kernel
        let x = randn(vec![1, 2, 2], &mut rng);
        assert!(matches!(
            forward(&params, 0.5, &x, &Mask::ones(vec![1, 2, 2])),
            Err(CoreError::Shape(_))
        ));
    }

    #[test]
    fn single_precision_forward_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cfg = small_config();
        let params: DenoiserParams<f32> = init(&cfg, &mut rng);
        let x: Field<f32> = Field::from_fn(vec![1, 4, 4], |i| i as f32 * 0.1);
        let mask = Mask::ones(vec![1, 4, 4]);
        let out = forward(&params, 0.25, &x, &mask).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
    }

    #[test]
    fn time_embedding_is_bounded_and_varies() {
        let e: Field<f64> = time_embedding(0.3, 8);
        assert_eq!(e.numel(), 8);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        let e2: Field<f64> = time_embedding(0.31, 8);
        assert!(e.max_abs_diff(&e2).unwrap() > 0.0);
        // t = 0 embeds as interleaved sin(0)=0, cos(0)=1
        let e0: Field<f64> = time_embedding(0.0, 4);
        assert_eq!(e0.data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
