//! Masked diffusion training on incomplete samples.
//!
//! Each step draws a diffusion time and a noise field, perturbs the observed
//! values, splits the observation mask into context and query subsets, and
//! grades the denoiser only on queried entries:
//! `‖M_qry ⊙ (x̂ − x_obs)‖²`. Per-dimension update counters and squared
//! output-gradient accumulators are recorded so the estimator's predicted
//! update frequency (`p_i`) and gradient scale (`4·p_i·C_i`) are checkable
//! against the running system rather than on paper.
//!
//! RNG draw order inside a step is fixed (time, then noise, then partition)
//! so equal seeds give bitwise-equal runs.

use rand::Rng;
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::denoiser::{self, DenoiserConfig, DenoiserParams};
use crate::error::{CoreError, Result};
use crate::masks::{sample_partition, Mask, PartitionSpec, PartitionStrategy};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::tensor::Field;

/// One training example: the observed values (zero where unobserved) and the
/// observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteSample<T> {
    pub x_obs: Field<T>,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub denoiser: DenoiserConfig,
    pub partition: PartitionSpec,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    /// Recorded for provenance; this implementation is sequential, so runs
    /// are reproducible either way.
    pub determinism: bool,
    /// Steps between checkpoint callbacks in [`fit_with_checkpoints`];
    /// `None` disables them.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig {
                field_channels: 1,
                hidden_channels: 16,
                n_blocks: 2,
                kernel: 3,
                time_embed_dim: 8,
                padding: Default::default(),
            },
            partition: PartitionSpec {
                strategy: PartitionStrategy::PixelLevel,
                ctx_ratio: 0.5,
                qry_ratio: 0.7,
            },
            batch_size: 4,
            steps: 1000,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 0,
            determinism: true,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.partition.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(CoreError::config("batch_size and steps must be positive"));
        }
        // zero is a legal null update (used by instrumentation); negative is not
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(CoreError::config(format!(
                "adam betas must be in [0, 1), got ({b1}, {b2})"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction; state tensors mirror the parameter layout.
pub struct Adam<T> {
    m: Vec<Field<T>>,
    v: Vec<Field<T>>,
    step: u64,
    betas: (f64, f64),
    lr: f64,
    eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &DenoiserParams<T>, lr: f64, betas: (f64, f64)) -> Self {
        let zeros: Vec<Field<T>> = params
            .tensors()
            .iter()
            .map(|(_, f)| Field::zeros(f.shape().to_vec()))
            .collect();
        Self { m: zeros.clone(), v: zeros, step: 0, betas, lr, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One update from per-tensor gradients (same order as the params).
    pub fn update(&mut self, params: &mut DenoiserParams<T>, grads: &[Field<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(CoreError::contract(format!(
                "expected {} gradient tensors, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (nb1, nb2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let lr = T::of(self.lr);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let eps = T::of(self.eps);
        for ((tensor, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &gi), (mi, vi)) in tensor
                .1
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = tb1 * *mi + nb1 * gi;
                *vi = tb2 * *vi + nb2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss and statistics

/// Squared error summed over queried entries: `‖M_qry ⊙ (x_hat − x_obs)‖²`.
pub fn masked_loss<T: Real>(x_hat: &Field<T>, x_obs: &Field<T>, m_qry: &Mask) -> Result<T> {
    if x_hat.shape() != x_obs.shape() || x_hat.shape() != m_qry.shape() {
        return Err(CoreError::shape(format!(
            "masked_loss shapes differ: {:?}, {:?}, {:?}",
            x_hat.shape(),
            x_obs.shape(),
            m_qry.shape()
        )));
    }
    let mut acc = T::zero();
    for ((&a, &b), &q) in x_hat.data().iter().zip(x_obs.data()).zip(m_qry.bits()) {
        if q == 1 {
            let d = a - b;
            acc += d * d;
        }
    }
    Ok(acc)
}

/// Per-dimension contribution of one sample: whether the dimension was
/// queried, and the squared loss-gradient w.r.t. the output there,
/// `(∂L/∂x̂_i)² = 4·(M_qry)_i·(x̂_i − x_obs_i)²`.
#[derive(Debug, Clone)]
pub struct StatsDelta {
    pub queried: Vec<u8>,
    pub sq_grad: Vec<f64>,
}

/// Accumulated training statistics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub samples_seen: u64,
    pub update_counts: Vec<u64>,
    pub sq_grad_accum: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TrainStats {
    pub fn absorb(&mut self, delta: &StatsDelta) {
        if self.update_counts.is_empty() {
            self.update_counts = vec![0; delta.queried.len()];
            self.sq_grad_accum = vec![0.0; delta.queried.len()];
        }
        self.samples_seen += 1;
        for (c, &q) in self.update_counts.iter_mut().zip(&delta.queried) {
            *c += q as u64;
        }
        for (a, &g) in self.sq_grad_accum.iter_mut().zip(&delta.sq_grad) {
            *a += g;
        }
    }

    /// Fraction of samples in which dimension `i` was queried.
    pub fn update_frequency(&self, i: usize) -> f64 {
        self.update_counts[i] as f64 / self.samples_seen as f64
    }

    /// Mean squared output-gradient for dimension `i`.
    pub fn mean_sq_grad(&self, i: usize) -> f64 {
        self.sq_grad_accum[i] / self.samples_seen as f64
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

pub fn metric_log_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,lr,wallclock_ms\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.wallclock_ms));
    }
    s
}

// ---------------------------------------------------------------------------
// the trainer

/// Owns parameters, optimizer state, and statistics across steps.
pub struct Trainer<T> {
    params: DenoiserParams<T>,
    opt: Adam<T>,
    config: TrainConfig,
    schedule: NoiseSchedule,
    stats: TrainStats,
    step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        params: DenoiserParams<T>,
        config: TrainConfig,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(&params, config.learning_rate, config.adam_betas);
        Ok(Self { params, opt, config, schedule, stats: TrainStats::default(), step: 0 })
    }

    pub fn params(&self) -> &DenoiserParams<T> {
        &self.params
    }

    pub fn into_params(self) -> DenoiserParams<T> {
        self.params
    }

    pub fn stats(&self) -> &TrainStats {
        &self.stats
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Forward + loss graph for one sample; returns the loss value, the
    /// per-parameter gradients, and the stats delta.
    fn sample_pass<R: Rng + ?Sized>(
        &self,
        sample: &IncompleteSample<T>,
        rng: &mut R,
    ) -> Result<(f64, Vec<Field<T>>, StatsDelta)> {
        if sample.mask.is_all_zero() {
            return Err(CoreError::EmptyMask(
                "training sample has no observed elements".into(),
            ));
        }
        let t: f64 = rng.random();
        let eps = Field::from_fn(sample.x_obs.shape().to_vec(), |_| {
            T::of(rng.sample::<f64, _>(StandardNormal))
        });
        let noisy = self.schedule.perturb(&sample.x_obs, t, &eps)?;
        let x_obs_t = sample.mask.apply(&noisy)?;
        let (ctx, qry) = sample_partition(&sample.mask, &self.config.partition, rng)?;
        let input = ctx.apply(&x_obs_t)?;

        let graph = denoiser::forward_graph(&self.params, t, &input, &ctx)?;
        let mut tape = graph.tape;
        let target = tape.leaf(sample.x_obs.clone());
        let qry_field = tape.leaf(qry.to_field());
        let diff = tape.sub(graph.output, target)?;
        let masked = tape.mul(diff, qry_field)?;
        let sq = tape.mul(masked, masked)?;
        let loss_node = tape.sum(sq)?;
        let loss = tape.value(loss_node).data()[0].wide();
        if !loss.is_finite() {
            return Err(CoreError::TrainingDivergence {
                step: self.step,
                message: format!("loss became {loss} at t = {t:.4}"),
            });
        }
        let grads = tape.backward(loss_node)?;
        let grad_fields: Vec<Field<T>> =
            graph.param_ids.iter().map(|&id| grads.grad(id).clone()).collect();

        let x_hat = tape.value(graph.output);
        let mut queried = Vec::with_capacity(qry.numel());
        let mut sq_grad = Vec::with_capacity(qry.numel());
        for ((&h, &o), &q) in x_hat.data().iter().zip(sample.x_obs.data()).zip(qry.bits()) {
            queried.push(q);
            let r = (h - o).wide();
            sq_grad.push(4.0 * q as f64 * r * r);
        }
        Ok((loss, grad_fields, StatsDelta { queried, sq_grad }))
    }

    /// One optimizer update from a single sample.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        sample: &IncompleteSample<T>,
        rng: &mut R,
    ) -> Result<(f64, StatsDelta)> {
        let (loss, grads, delta) = self.sample_pass(sample, rng)?;
        self.opt.update(&mut self.params, &grads)?;
        self.step += 1;
        self.stats.absorb(&delta);
        self.stats.losses.push(loss);
        Ok((loss, delta))
    }

    /// One optimizer update from the mean gradient over a minibatch; the
    /// recorded loss is the batch mean of per-sample losses.
    pub fn train_batch<R: Rng + ?Sized>(
        &mut self,
        batch: &[&IncompleteSample<T>],
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(CoreError::contract("train_batch needs at least one sample"));
        }
        let mut grad_sum: Option<Vec<Field<T>>> = None;
        let mut loss_sum = 0.0;
        let mut deltas = Vec::with_capacity(batch.len());
        for sample in batch {
            let (loss, grads, delta) = self.sample_pass(sample, rng)?;
            loss_sum += loss;
            deltas.push(delta);
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_scaled(g, T::one())?;
                    }
                }
            }
        }
        let scale = T::of(1.0 / batch.len() as f64);
        let mean_grads: Vec<Field<T>> = grad_sum
            .expect("batch is non-empty")
            .into_iter()
            .map(|g| g.mul_scalar(scale))
            .collect();
        self.opt.update(&mut self.params, &mean_grads)?;
        self.step += 1;
        for delta in &deltas {
            self.stats.absorb(delta);
        }
        let mean_loss = loss_sum / batch.len() as f64;
        self.stats.losses.push(mean_loss);
        Ok(mean_loss)
    }
}

/// Result of a full training run.
pub struct FitResult<T> {
    pub params: DenoiserParams<T>,
    pub stats: TrainStats,
    pub metric_log: Vec<MetricRow>,
}

/// Runs `config.steps` optimizer steps over shuffled minibatches.
pub fn fit<T: Real, R: Rng + ?Sized>(
    dataset: &[IncompleteSample<T>],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<FitResult<T>> {
    fit_with_checkpoints(dataset, config, schedule, rng, |_, _| Ok(()))
}

/// [`fit`] with a callback invoked every `config.checkpoint_every` steps and
/// once at the end, for persisting intermediate parameters.
pub fn fit_with_checkpoints<T: Real, R: Rng + ?Sized>(
    dataset: &[IncompleteSample<T>],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut on_checkpoint: impl FnMut(u64, &DenoiserParams<T>) -> Result<()>,
) -> Result<FitResult<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::config("training dataset is empty"));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.mask.is_all_zero() {
            return Err(CoreError::EmptyMask(format!("dataset sample {i} has an empty mask")));
        }
    }
    let params = denoiser::init::<T, R>(&config.denoiser, rng);
    let mut trainer = Trainer::new(params, *config, *schedule)?;
    let mut metric_log = Vec::with_capacity(config.steps as usize);
    let started = Instant::now();

    // epoch-shuffled index queue
    let mut order: Vec<usize> = Vec::new();
    let draw_batch = |rng: &mut R, order: &mut Vec<usize>| -> Vec<usize> {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                *order = (0..dataset.len()).collect();
                // Fisher-Yates via the shared stream keeps epochs reproducible
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
            }
            batch.push(order.pop().expect("order refilled above"));
        }
        batch
    };

    for step in 1..=config.steps {
        let idx = draw_batch(rng, &mut order);
        let batch: Vec<&IncompleteSample<T>> = idx.iter().map(|&i| &dataset[i]).collect();
        let loss = trainer.train_batch(&batch, rng)?;
        metric_log.push(MetricRow {
            step,
            loss,
            lr: config.learning_rate,
            wallclock_ms: started.elapsed().as_millis() as u64,
        });
        if let Some(every) = config.checkpoint_every {
            if every > 0 && step % every == 0 && step != config.steps {
                on_checkpoint(step, trainer.params())?;
            }
        }
    }
    on_checkpoint(config.steps, trainer.params())?;
    let stats = trainer.stats().clone();
    Ok(FitResult { params: trainer.into_params(), stats, metric_log })
}

/// Frozen-parameter query-gradient statistics: holds `(t, ε, ctx)` fixed,
/// resamples the query mask `n_resamples` times, and averages the recorded
/// squared output-gradient and query indicator per dimension. The residual
/// field (x̂ − x_obs) is computed once since nothing it depends on varies.
pub struct QueryGradStats {
    /// Mean recorded squared gradient per dimension.
    pub mean_sq_grad: Vec<f64>,
    /// Empirical query frequency per dimension.
    pub query_freq: Vec<f64>,
    /// Squared residual per dimension (the `C_i` the estimator predicts
    /// against, conditional on this context).
    pub residual_sq: Vec<f64>,
}

pub fn query_gradient_statistics<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParams<T>,
    sample: &IncompleteSample<T>,
    part_spec: &PartitionSpec,
    t: f64,
    eps: &Field<T>,
    ctx: &Mask,
    n_resamples: u64,
    rng: &mut R,
) -> Result<QueryGradStats> {
    if n_resamples == 0 {
        return Err(CoreError::contract("need at least one query resample"));
    }
    let schedule = NoiseSchedule::cosine_vp();
    let noisy = schedule.perturb(&sample.x_obs, t, eps)?;
    let x_obs_t = sample.mask.apply(&noisy)?;
    let input = ctx.apply(&x_obs_t)?;
    let x_hat = denoiser::forward(params, t, &input, ctx)?;

    let n = sample.x_obs.numel();
    let mut residual_sq = vec![0.0; n];
    for (i, (h, o)) in x_hat.data().iter().zip(sample.x_obs.data()).enumerate() {
        let r = (*h - *o).wide();
        residual_sq[i] = r * r;
    }
    let mut sq_acc = vec![0.0; n];
    let mut qry_acc = vec![0u64; n];
    for _ in 0..n_resamples {
        let (_, qry) = sample_partition(&sample.mask, part_spec, rng)?;
        for i in 0..n {
            if qry.get(i) {
                qry_acc[i] += 1;
                sq_acc[i] += 4.0 * residual_sq[i];
            }
        }
    }
    let inv = 1.0 / n_resamples as f64;
    Ok(QueryGradStats {
        mean_sq_grad: sq_acc.iter().map(|&x| x * inv).collect(),
        query_freq: qry_acc.iter().map(|&c| c as f64 * inv).collect(),
        residual_sq,
    })
}
