//! Observation masks, the structure-preserving context/query partitioner,
//! and Monte Carlo coverage diagnostics.
//!
//! A mask is a {0,1} field over the same index space as the data. Training
//! never sees the full field: a context mask (what conditioning reveals) and
//! a query mask (where the loss is graded) are both subsets of the observed
//! set. The partitioner draws them so that the context follows the same
//! structural family as the observation masks themselves — this is what keeps
//! every dimension's query probability positive, which the coverage
//! diagnostic estimates empirically.
//!
//! Block grids do not need to divide the spatial dims evenly: a grid of g
//! blocks over n cells uses the contiguous bounds `floor(i*n/g)`, so block
//! sizes differ by at most one cell (a 3x3 grid on 32x32 is legal).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Field;

// ---------------------------------------------------------------------------
// mask values

/// Binary observation mask over a field's index space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bits.len() != numel {
            return Err(CoreError::shape(format!(
                "mask shape {shape:?} implies {numel} bits, got {}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(CoreError::domain("mask bits must be 0 or 1"));
        }
        Ok(Self { shape, bits })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, bits: vec![0; numel] }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, bits: vec![1; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn numel(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on as u8;
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "mask shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a & b).collect();
        Ok(Mask { shape: self.shape.clone(), bits })
    }

    /// Elementwise product with a field: unobserved entries become zero.
    pub fn apply<T: Real>(&self, x: &Field<T>) -> Result<Field<T>> {
        if x.shape() != self.shape.as_slice() {
            return Err(CoreError::shape(format!(
                "mask shape {:?} does not match field shape {:?}",
                self.shape,
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&v, &b)| if b == 1 { v } else { T::zero() })
            .collect();
        Ok(Field::from_parts(self.shape.clone(), data))
    }

    /// Mask as a 0/1-valued field, e.g. for a conditioning input channel.
    pub fn to_field<T: Real>(&self) -> Field<T> {
        let data = self.bits.iter().map(|&b| T::of(b as f64)).collect();
        Field::from_parts(self.shape.clone(), data)
    }

    /// Splice two fields: `M ⊙ on + (1 − M) ⊙ off`, copying entries exactly.
    pub fn select<T: Real>(&self, on: &Field<T>, off: &Field<T>) -> Result<Field<T>> {
        if on.shape() != self.shape.as_slice() || off.shape() != self.shape.as_slice() {
            return Err(CoreError::shape(format!(
                "select shapes differ: mask {:?}, on {:?}, off {:?}",
                self.shape,
                on.shape(),
                off.shape()
            )));
        }
        let data = on
            .data()
            .iter()
            .zip(off.data())
            .zip(&self.bits)
            .map(|((&a, &b), &bit)| if bit == 1 { a } else { b })
            .collect();
        Ok(Field::from_parts(self.shape.clone(), data))
    }
}

// ---------------------------------------------------------------------------
// specifications

/// Distribution family of observation masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSpec {
    /// Every element observed independently with probability `rate`.
    PixelIid { rate: f64 },
    /// The last two (spatial) dims are tiled by a `grid_h` x `grid_w` grid of
    /// contiguous blocks spanning all leading dims; exactly `observed_blocks`
    /// blocks are observed, chosen uniformly without replacement.
    BlockGrid { grid_h: usize, grid_w: usize, observed_blocks: usize },
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskSpec::PixelIid { rate } => {
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(CoreError::config(format!(
                        "pixel_iid rate must be in (0, 1], got {rate}"
                    )));
                }
            }
            MaskSpec::BlockGrid { grid_h, grid_w, observed_blocks } => {
                if grid_h == 0 || grid_w == 0 {
                    return Err(CoreError::config("block grid dims must be positive"));
                }
                let total = grid_h * grid_w;
                if observed_blocks == 0 || observed_blocks > total {
                    return Err(CoreError::config(format!(
                        "observed_blocks must be in 1..={total}, got {observed_blocks}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How the partitioner selects context and query subsets of an observation
/// mask. Block-level selection keeps whole blocks of an explicit grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    PixelLevel,
    BlockLevel { grid_h: usize, grid_w: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub strategy: PartitionStrategy,
    pub ctx_ratio: f64,
    pub qry_ratio: f64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("ctx_ratio", self.ctx_ratio), ("qry_ratio", self.qry_ratio)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(CoreError::config(format!("{name} must be in (0, 1], got {r}")));
            }
        }
        if let PartitionStrategy::BlockLevel { grid_h, grid_w } = self.strategy {
            if grid_h == 0 || grid_w == 0 {
                return Err(CoreError::config("partition grid dims must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// block geometry

/// Half-open bounds of block `i` when `n` cells are split into `g` contiguous
/// blocks whose sizes differ by at most one.
#[inline]
fn block_bounds(n: usize, g: usize, i: usize) -> (usize, usize) {
    (i * n / g, (i + 1) * n / g)
}

struct BlockGeometry {
    lead: usize,
    h: usize,
    w: usize,
    grid_h: usize,
    grid_w: usize,
}

impl BlockGeometry {
    fn of(shape: &[usize], grid_h: usize, grid_w: usize) -> Result<Self> {
        if shape.len() < 2 {
            return Err(CoreError::config(format!(
                "block masks need at least 2 dims, shape is {shape:?}"
            )));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        if h < grid_h || w < grid_w {
            return Err(CoreError::config(format!(
                "spatial dims ({h},{w}) cannot host a {grid_h}x{grid_w} block grid"
            )));
        }
        let lead = shape[..shape.len() - 2].iter().product();
        Ok(Self { lead, h, w, grid_h, grid_w })
    }

    fn n_blocks(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Calls `f` with the linear index of every element of block `b`,
    /// spanning all leading (channel/frame) dims.
    fn for_each_element(&self, b: usize, mut f: impl FnMut(usize)) {
        let (by, bx) = (b / self.grid_w, b % self.grid_w);
        let (ya, yb) = block_bounds(self.h, self.grid_h, by);
        let (xa, xb) = block_bounds(self.w, self.grid_w, bx);
        for l in 0..self.lead {
            for y in ya..yb {
                let row = (l * self.h + y) * self.w;
                for x in xa..xb {
                    f(row + x);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// sampling

/// Draws an observation mask over `shape`.
pub fn sample_mask<R: rand::Rng + ?Sized>(
    spec: &MaskSpec,
    shape: &[usize],
    rng: &mut R,
) -> Result<Mask> {
    use rand::RngExt;
    spec.validate()?;
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return Err(CoreError::config(format!("mask shape {shape:?} is empty")));
    }
    match *spec {
        MaskSpec::PixelIid { rate } => {
            let bits = (0..numel).map(|_| (rng.random::<f64>() < rate) as u8).collect();
            Mask::new(shape.to_vec(), bits)
        }
        MaskSpec::BlockGrid { grid_h, grid_w, observed_blocks } => {
            let geom = BlockGeometry::of(shape, grid_h, grid_w)?;
            let chosen = rand::seq::index::sample(rng, geom.n_blocks(), observed_blocks);
            let mut mask = Mask::zeros(shape.to_vec());
            for b in chosen.iter() {
                geom.for_each_element(b, |i| mask.set(i, true));
            }
            Ok(mask)
        }
    }
}

/// Number of blocks to keep for a ratio over `n` candidates: nearest integer,
/// at least one so the selection is never empty.
#[inline]
fn keep_count(ratio: f64, n: usize) -> usize {
    (((ratio * n as f64).round() as usize).max(1)).min(n)
}

/// Splits an observation mask into a context mask and a query mask, both
/// subsets of `m`. Context bits are drawn before query bits, and the two are
/// independent (they may overlap).
pub fn sample_partition<R: rand::Rng + ?Sized>(
    m: &Mask,
    spec: &PartitionSpec,
    rng: &mut R,
) -> Result<(Mask, Mask)> {
    use rand::RngExt;
    spec.validate()?;
    if m.is_all_zero() {
        return Err(CoreError::EmptyMask(
            "cannot partition a mask with no observed elements".into(),
        ));
    }
    match spec.strategy {
        PartitionStrategy::PixelLevel => {
            let mut ctx = Mask::zeros(m.shape().to_vec());
            let mut qry = Mask::zeros(m.shape().to_vec());
            for i in 0..m.numel() {
                if m.get(i) {
                    ctx.set(i, rng.random::<f64>() < spec.ctx_ratio);
                    qry.set(i, rng.random::<f64>() < spec.qry_ratio);
                }
            }
            Ok((ctx, qry))
        }
        PartitionStrategy::BlockLevel { grid_h, grid_w } => {
            let geom = BlockGeometry::of(m.shape(), grid_h, grid_w)?;
            let mut candidates = Vec::new();
            for b in 0..geom.n_blocks() {
                let mut any = false;
                geom.for_each_element(b, |i| any |= m.get(i));
                if any {
                    candidates.push(b);
                }
            }
            let pick = |rng: &mut R, ratio: f64| -> Mask {
                let n_keep = keep_count(ratio, candidates.len());
                let sel = rand::seq::index::sample(rng, candidates.len(), n_keep);
                let mut out = Mask::zeros(m.shape().to_vec());
                for ci in sel.iter() {
                    geom.for_each_element(candidates[ci], |i| {
                        if m.get(i) {
                            out.set(i, true);
                        }
                    });
                }
                out
            };
            let ctx = pick(rng, spec.ctx_ratio);
            let qry = pick(rng, spec.qry_ratio);
            Ok((ctx, qry))
        }
    }
}

// ---------------------------------------------------------------------------
// coverage diagnostics

/// Minimum attempts before the rejection sampler may declare conditioning
/// infeasible, and the acceptance-rate floor below which it does.
const REJECTION_MIN_ATTEMPTS: u64 = 10_000;
const REJECTION_MIN_RATE: f64 = 1e-4;

/// Monte Carlo estimate of the per-dimension query probability given a fixed
/// context: draw observation masks conditioned on covering the context,
/// partition each, and average the query indicator.
///
/// The pixelwise mask law conditioned on covering `ctx` is still a product
/// (context dims forced on, the rest keep their Bernoulli), so it is sampled
/// directly; block masks fall back to rejection, which can fail when the
/// family rarely covers the context.
pub fn query_prob_estimate<R: rand::Rng + ?Sized>(
    mask_spec: &MaskSpec,
    part_spec: &PartitionSpec,
    ctx: &Mask,
    n_samples: u64,
    rng: &mut R,
) -> Result<Field<f64>> {
    use rand::RngExt;
    if n_samples < 1 {
        return Err(CoreError::contract("query_prob_estimate needs n_samples >= 1"));
    }
    let mut counts = vec![0u64; ctx.numel()];
    let mut accepted = 0u64;
    let mut attempts = 0u64;
    while accepted < n_samples {
        let m = if let MaskSpec::PixelIid { rate } = *mask_spec {
            let bits = ctx
                .bits()
                .iter()
                .map(|&b| {
                    let drawn = rng.random::<f64>() < rate;
                    (b == 1 || drawn) as u8
                })
                .collect();
            Mask::new(ctx.shape().to_vec(), bits)?
        } else {
            attempts += 1;
            let m = sample_mask(mask_spec, ctx.shape(), rng)?;
            if !ctx.subset_of(&m) {
                if attempts >= REJECTION_MIN_ATTEMPTS
                    && (accepted as f64) < REJECTION_MIN_RATE * attempts as f64
                {
                    return Err(CoreError::InfeasibleConditioning(format!(
                        "acceptance rate below {REJECTION_MIN_RATE:.0e} after {attempts} \
                         attempts ({accepted} accepted); the mask family rarely covers \
                         this context"
                    )));
                }
                continue;
            }
            m
        };
        accepted += 1;
        if m.is_all_zero() {
            continue; // only reachable with an empty context: a trial with no queryable dims
        }
        let (_, qry) = sample_partition(&m, part_spec, rng)?;
        for (c, &b) in counts.iter_mut().zip(qry.bits()) {
            *c += b as u64;
        }
    }
    let probs = counts.iter().map(|&c| c as f64 / n_samples as f64).collect();
    Ok(Field::from_parts(ctx.shape().to_vec(), probs))
}

/// Coverage summary over the dimensions a trained model must learn to
/// predict, i.e. everything outside the sampled context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Smallest estimated query probability over non-context dims.
    pub min_prob: f64,
    /// Largest estimated query probability over non-context dims.
    pub max_prob: f64,
    /// Linear indices of non-context dims whose estimate was exactly zero.
    pub zero_dims: Vec<usize>,
    /// Max/min ratio over the nonzero estimates; `None` when all are zero.
    pub uniformity: Option<f64>,
    /// Number of Monte Carlo trials behind the estimates.
    pub n_samples: u64,
}

/// Draws one observation mask and one context from it, then estimates the
/// query probability of every dimension under that context.
///
/// The report's statistics cover the non-context dims only: dims inside the
/// context are conditioned on rather than predicted, and their (always
/// positive) query probability would mask genuine coverage holes elsewhere.
pub fn coverage_diagnostic<R: rand::Rng + ?Sized>(
    mask_spec: &MaskSpec,
    part_spec: &PartitionSpec,
    shape: &[usize],
    n_samples: u64,
    rng: &mut R,
) -> Result<CoverageReport> {
    if n_samples < 1_000 {
        return Err(CoreError::contract("coverage_diagnostic needs n_samples >= 1000"));
    }
    let mut m0 = sample_mask(mask_spec, shape, rng)?;
    for _ in 0..100 {
        if !m0.is_all_zero() {
            break;
        }
        m0 = sample_mask(mask_spec, shape, rng)?;
    }
    if m0.is_all_zero() {
        // effectively unobservable spec: every dim is a coverage hole
        return Ok(CoverageReport {
            min_prob: 0.0,
            max_prob: 0.0,
            zero_dims: (0..m0.numel()).collect(),
            uniformity: None,
            n_samples,
        });
    }
    let (ctx, _) = sample_partition(&m0, part_spec, rng)?;
    let est = query_prob_estimate(mask_spec, part_spec, &ctx, n_samples, rng)?;

    let mut min_prob = f64::INFINITY;
    let mut max_prob = 0.0f64;
    let mut min_nonzero = f64::INFINITY;
    let mut zero_dims = Vec::new();
    for i in 0..est.numel() {
        if ctx.get(i) {
            continue;
        }
        let p = est.data()[i];
        min_prob = min_prob.min(p);
        max_prob = max_prob.max(p);
        if p == 0.0 {
            zero_dims.push(i);
        } else {
            min_nonzero = min_nonzero.min(p);
        }
    }
    if !min_prob.is_finite() {
        min_prob = 0.0; // context covered everything
    }
    let uniformity =
        if min_nonzero.is_finite() { Some(max_prob / min_nonzero) } else { None };
    Ok(CoverageReport { min_prob, max_prob, zero_dims, uniformity, n_samples })
}
