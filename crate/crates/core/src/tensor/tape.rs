//! Reverse-mode autodiff over a linear tape of field operations.
//!
//! Nodes are appended in evaluation order, so the node index sequence is
//! already a topological order: the backward sweep is a single reverse pass
//! that visits each node once and accumulates adjoints into its parents.
//! Values are computed eagerly at record time; inference reuses the same
//! forward path and simply never calls `backward`.

use super::conv::{self, Padding};
use super::Field;
use crate::error::{CoreError, Result};
use crate::real::Real;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Gelu(usize),
    Sum(usize),
    Conv2d { input: usize, kernel: usize, padding: Padding },
    ChannelScaleShift { x: usize, scale: usize, shift: usize },
    AddChannelBias { x: usize, bias: usize },
    MatVec { w: usize, x: usize },
}

struct Node<T> {
    value: Field<T>,
    op: Op,
}

/// Recording of a forward computation, ready for one reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints for every node of a tape; unreached nodes hold zeros.
pub struct Grads<T> {
    grads: Vec<Field<T>>,
}

impl<T: Real> Grads<T> {
    pub fn grad(&self, id: NodeId) -> &Field<T> {
        &self.grads[id.0]
    }
}

/// Tanh-based gaussian error linear unit.
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Field<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Field<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.0 >= self.nodes.len() {
            return Err(CoreError::contract(format!(
                "node {} does not belong to this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(id.0)
    }

    pub fn leaf(&mut self, value: Field<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.sub(&self.nodes[b].value)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[a].value.mul(&self.nodes[b].value)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let a = self.check(a)?;
        let value = self.nodes[a].value.add_scalar(c);
        Ok(self.push(value, Op::AddScalar(a)))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let a = self.check(a)?;
        let value = self.nodes[a].value.mul_scalar(c);
        Ok(self.push(value, Op::MulScalar(a, c.wide())))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let value = self.nodes[a].value.map(|v| T::of(gelu(v.wide())));
        Ok(self.push(value, Op::Gelu(a)))
    }

    /// Reduces a field to a scalar node holding the sum of its entries.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let a = self.check(a)?;
        let value = Field::scalar(self.nodes[a].value.sum());
        Ok(self.push(value, Op::Sum(a)))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let (input, kernel) = (self.check(input)?, self.check(kernel)?);
        let value = conv::conv2d(&self.nodes[input].value, &self.nodes[kernel].value, padding)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, padding }))
    }

    /// `y[c,h,w] = x[c,h,w] * (1 + scale[c]) + shift[c]` — the film-style
    /// conditioning used to feed time embeddings into the field stack.
    pub fn channel_scale_shift(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId> {
        let (x, scale, shift) = (self.check(x)?, self.check(scale)?, self.check(shift)?);
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[scale].value;
        let bv = &self.nodes[shift].value;
        let (c, hw) = per_channel_dims(xv, sv, "scale")?;
        per_channel_dims(xv, bv, "shift")?;
        let mut out = vec![T::zero(); xv.numel()];
        for ch in 0..c {
            let g = T::one() + sv.data()[ch];
            let b = bv.data()[ch];
            let src = &xv.data()[ch * hw..(ch + 1) * hw];
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                *o = v * g + b;
            }
        }
        let value = Field::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::ChannelScaleShift { x, scale, shift }))
    }

    /// `y[c,h,w] = x[c,h,w] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, bias) = (self.check(x)?, self.check(bias)?);
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[bias].value;
        let (c, hw) = per_channel_dims(xv, bv, "bias")?;
        let mut out = xv.data().to_vec();
        for ch in 0..c {
            let b = bv.data()[ch];
            for o in out[ch * hw..(ch + 1) * hw].iter_mut() {
                *o += b;
            }
        }
        let value = Field::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::AddChannelBias { x, bias }))
    }

    /// Dense map `y = W x` with `W: [m,n]`, `x: [n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (w, x) = (self.check(w)?, self.check(x)?);
        let wv = &self.nodes[w].value;
        let xv = &self.nodes[x].value;
        if wv.ndim() != 2 || xv.ndim() != 1 || wv.shape()[1] != xv.shape()[0] {
            return Err(CoreError::shape(format!(
                "matvec needs [m,n] x [n], got {:?} x {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let row = &wv.data()[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for (&a, &b) in row.iter().zip(xv.data()) {
                acc += a * b;
            }
            out[i] = acc;
        }
        let value = Field::from_parts(vec![m], out);
        Ok(self.push(value, Op::MatVec { w, x }))
    }

    /// Reverse sweep from a scalar node. Each node is visited exactly once,
    /// in reverse insertion order, which dominates every parent link.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<T>> {
        let root = self.check(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Field<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root] = Some(Field::scalar(T::one()));

        for i in (0..=root).rev() {
            let Some(dy) = adj[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = Some(dy);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, dy.clone());
                    accumulate(&mut adj, *b, dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, dy.mul_scalar(-T::one()));
                    accumulate(&mut adj, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.mul(&self.nodes[*b].value).expect("same shape");
                    let db = dy.mul(&self.nodes[*a].value).expect("same shape");
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddScalar(a) => accumulate(&mut adj, *a, dy),
                Op::MulScalar(a, c) => accumulate(&mut adj, *a, dy.mul_scalar(T::of(*c))),
                Op::Gelu(a) => {
                    let xv = &self.nodes[*a].value;
                    let da = Field::from_parts(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(dy.data())
                            .map(|(&x, &d)| d * T::of(gelu_deriv(x.wide())))
                            .collect(),
                    );
                    accumulate(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let g = dy.data()[0];
                    let shape = self.nodes[*a].value.shape().to_vec();
                    accumulate(&mut adj, *a, Field::full(shape, g));
                }
                Op::Conv2d { input, kernel, padding } => {
                    let d_in = conv::conv2d_backward_input(
                        &dy,
                        &self.nodes[*kernel].value,
                        *padding,
                        self.nodes[*input].value.shape(),
                    );
                    let d_ker = conv::conv2d_backward_kernel(
                        &dy,
                        &self.nodes[*input].value,
                        *padding,
                        self.nodes[*kernel].value.shape(),
                    );
                    accumulate(&mut adj, *input, d_in);
                    accumulate(&mut adj, *kernel, d_ker);
                }
                Op::ChannelScaleShift { x, scale, shift } => {
                    let xv = &self.nodes[*x].value;
                    let sv = &self.nodes[*scale].value;
                    let c = sv.numel();
                    let hw = xv.numel() / c;
                    let mut dx = vec![T::zero(); xv.numel()];
                    let mut ds = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        let g = T::one() + sv.data()[ch];
                        let dyr = &dy.data()[ch * hw..(ch + 1) * hw];
                        let xr = &xv.data()[ch * hw..(ch + 1) * hw];
                        let mut ds_acc = T::zero();
                        let mut db_acc = T::zero();
                        for ((o, &d), &xval) in
                            dx[ch * hw..(ch + 1) * hw].iter_mut().zip(dyr).zip(xr)
                        {
                            *o = d * g;
                            ds_acc += d * xval;
                            db_acc += d;
                        }
                        ds[ch] = ds_acc;
                        db[ch] = db_acc;
                    }
                    accumulate(&mut adj, *x, Field::from_parts(xv.shape().to_vec(), dx));
                    accumulate(&mut adj, *scale, Field::from_parts(sv.shape().to_vec(), ds));
                    accumulate(&mut adj, *shift, Field::from_parts(sv.shape().to_vec(), db));
                }
                Op::AddChannelBias { x, bias } => {
                    let c = self.nodes[*bias].value.numel();
                    let hw = dy.numel() / c;
                    let mut db = vec![T::zero(); c];
                    for ch in 0..c {
                        db[ch] = dy.data()[ch * hw..(ch + 1) * hw].iter().copied().sum();
                    }
                    accumulate(&mut adj, *bias, Field::from_parts(vec![c], db));
                    accumulate(&mut adj, *x, dy);
                }
                Op::MatVec { w, x } => {
                    let wv = &self.nodes[*w].value;
                    let xv = &self.nodes[*x].value;
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = vec![T::zero(); m * n];
                    let mut dx = vec![T::zero(); n];
                    for i in 0..m {
                        let d = dy.data()[i];
                        let row = &wv.data()[i * n..(i + 1) * n];
                        for j in 0..n {
                            dw[i * n + j] = d * xv.data()[j];
                            dx[j] += row[j] * d;
                        }
                    }
                    accumulate(&mut adj, *w, Field::from_parts(vec![m, n], dw));
                    accumulate(&mut adj, *x, Field::from_parts(vec![n], dx));
                }
            }
        }

        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Field::zeros(self.nodes[i].value.shape().to_vec())))
            .collect();
        Ok(Grads { grads })
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Real>(adj: &mut [Option<Field<T>>], idx: usize, delta: Field<T>) {
    match &mut adj[idx] {
        Some(existing) => existing.add_scaled(&delta, T::one()).expect("same shape"),
        slot @ None => *slot = Some(delta),
    }
}

/// Validates the `[C,H,W]` + `[C]` pairing of per-channel ops; returns `(C, H*W)`.
fn per_channel_dims<T: Real>(x: &Field<T>, per_c: &Field<T>, what: &str) -> Result<(usize, usize)> {
    if x.ndim() != 3 {
        return Err(CoreError::shape(format!(
            "per-channel {what} needs a [C,H,W] operand, got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[0];
    if per_c.ndim() != 1 || per_c.shape()[0] != c {
        return Err(CoreError::shape(format!(
            "per-channel {what} must be [{c}], got {:?}",
            per_c.shape()
        )));
    }
    Ok((c, x.shape()[1] * x.shape()[2]))
}
