//! Minimal reverse-mode autodiff over batched 5D tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients. Leaves are
//! either constants, free inputs (for gradient tests), or named network
//! parameters identified by [`ParamRef`] so optimizers can collect
//! per-parameter gradients after a backward pass.
//!
//! The op set is exactly what the degradation-adaptation network needs:
//! 3D (transposed) convolutions, leaky rectification, sigmoid gating,
//! global average pooling, in-plane sub-pixel shuffling, elementwise
//! arithmetic, reductions, and a frequency-domain truncation whose
//! backward pass is the adjoint of the linear truncation operator.

use ndarray::{s, Array5};

use crate::conv::{self, ConvSpec};
use crate::kspace;
use crate::tensor::{scalar, Scalar, Tensor};

/// Identity of a parameter: (store id, index within the store).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub store: u64,
    pub index: usize,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<ParamRef> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    MeanAll(Var),
    MeanPerItem(Var),
    Conv { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvT { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    PixelShuffleXy { x: Var, factor: usize },
    GlobalAvgPool(Var),
    ChannelGate { x: Var, gate: Var },
    KspaceTruncate { x: Var, scale: (usize, usize, usize) },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_cache: std::collections::HashMap<ParamRef, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_cache: std::collections::HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> (usize, usize, usize, usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Free differentiable input (used by gradient tests).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Named parameter leaf; `trainable` controls whether gradients flow.
    /// Binding the same parameter twice returns the existing leaf so its
    /// gradient accumulates across uses.
    pub fn param(&mut self, value: Tensor<T>, key: ParamRef, trainable: bool) -> Var {
        if let Some(&existing) = self.param_cache.get(&key) {
            assert_eq!(
                self.nodes[existing.0].requires_grad, trainable,
                "parameter bound with inconsistent trainability in one graph"
            );
            return existing;
        }
        let v = self.push(value, Op::Leaf { param: Some(key) }, trainable);
        self.param_cache.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dim(a), self.dim(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x + cv);
        let rg = self.needs(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cv);
        let rg = self.needs(a);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let sl = T::from_f64(slope);
        let v = self.nodes[a.0].value.mapv(|x| if x >= T::zero() { x } else { x * sl });
        let rg = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        let rg = self.needs(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        let rg = self.needs(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.needs(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Mean over every element, producing a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.nodes[a.0].value.len() as f64);
        let v = scalar(self.nodes[a.0].value.sum() / n);
        let rg = self.needs(a);
        self.push(v, Op::MeanAll(a), rg)
    }

    /// Mean over channel and spatial axes, keeping batch: (B,1,1,1,1).
    pub fn mean_per_item(&mut self, a: Var) -> Var {
        let (b, c, x, y, z) = self.dim(a);
        let n = T::from_f64((c * x * y * z) as f64);
        let mut v = Array5::zeros((b, 1, 1, 1, 1));
        for bi in 0..b {
            v[[bi, 0, 0, 0, 0]] = self.nodes[a.0].value.slice(s![bi, .., .., .., ..]).sum() / n;
        }
        let rg = self.needs(a);
        self.push(v, Op::MeanPerItem(a), rg)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let v = conv::conv3d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|bb| &self.nodes[bb.0].value),
            &spec,
        );
        let rg = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(v, Op::Conv { x, w, b, spec }, rg)
    }

    pub fn conv3d_transposed(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let v = conv::conv3d_transposed(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|bb| &self.nodes[bb.0].value),
            &spec,
        );
        let rg = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(v, Op::ConvT { x, w, b, spec }, rg)
    }

    /// (B, C*r*r, X, Y, Z) -> (B, C, rX, rY, Z).
    pub fn pixel_shuffle_xy(&mut self, x: Var, factor: usize) -> Var {
        let (b, c_in, nx, ny, nz) = self.dim(x);
        let r2 = factor * factor;
        assert_eq!(c_in % r2, 0, "pixel shuffle channel count not divisible by r^2");
        let c_out = c_in / r2;
        let src = &self.nodes[x.0].value;
        let mut v = Array5::zeros((b, c_out, nx * factor, ny * factor, nz));
        for bi in 0..b {
            for c in 0..c_out {
                for dx in 0..factor {
                    for dy in 0..factor {
                        let cs = c * r2 + dx * factor + dy;
                        for ix in 0..nx {
                            for iy in 0..ny {
                                for iz in 0..nz {
                                    v[[bi, c, ix * factor + dx, iy * factor + dy, iz]] =
                                        src[[bi, cs, ix, iy, iz]];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(x);
        self.push(v, Op::PixelShuffleXy { x, factor }, rg)
    }

    /// Spatial mean per channel: (B, C, X, Y, Z) -> (B, C, 1, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, nx, ny, nz) = self.dim(x);
        let n = T::from_f64((nx * ny * nz) as f64);
        let src = &self.nodes[x.0].value;
        let mut v = Array5::zeros((b, c, 1, 1, 1));
        for bi in 0..b {
            for ci in 0..c {
                v[[bi, ci, 0, 0, 0]] = src.slice(s![bi, ci, .., .., ..]).sum() / n;
            }
        }
        let rg = self.needs(x);
        self.push(v, Op::GlobalAvgPool(x), rg)
    }

    /// Multiply each channel of `x` by the per-channel gate (B, C, 1, 1, 1).
    pub fn channel_gate(&mut self, x: Var, gate: Var) -> Var {
        let (b, c, nx, ny, nz) = self.dim(x);
        assert_eq!(self.dim(gate), (b, c, 1, 1, 1), "gate shape mismatch");
        let xs = &self.nodes[x.0].value;
        let gs = &self.nodes[gate.0].value;
        let mut v = xs.clone();
        for bi in 0..b {
            for ci in 0..c {
                let g = gs[[bi, ci, 0, 0, 0]];
                v.slice_mut(s![bi, ci, .., .., ..]).mapv_inplace(|t| t * g);
            }
        }
        let _ = (nx, ny, nz);
        let rg = self.needs(x) || self.needs(gate);
        self.push(v, Op::ChannelGate { x, gate }, rg)
    }

    /// Frequency-domain truncation to the centered low-frequency block,
    /// applied per batch item and channel. Linear; backward is the adjoint.
    pub fn kspace_truncate(&mut self, x: Var, scale: (usize, usize, usize)) -> Var {
        let (b, c, nx, ny, nz) = self.dim(x);
        assert!(
            nx % scale.0 == 0 && ny % scale.1 == 0 && nz % scale.2 == 0,
            "kspace truncation requires divisible dims"
        );
        let (ox, oy, oz) = (nx / scale.0, ny / scale.1, nz / scale.2);
        let src = &self.nodes[x.0].value;
        let mut v = Array5::zeros((b, c, ox, oy, oz));
        for bi in 0..b {
            for ci in 0..c {
                let vol = ndarray::Array3::from_shape_fn((nx, ny, nz), |(i, j, k)| {
                    src[[bi, ci, i, j, k]].into_f64()
                });
                let small = kspace::truncate_array(&vol, scale).expect("divisible dims checked");
                for ((i, j, k), &val) in small.indexed_iter() {
                    v[[bi, ci, i, j, k]] = T::from_f64(val);
                }
            }
        }
        let rg = self.needs(x);
        self.push(v, Op::KspaceTruncate { x, scale }, rg)
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(scalar(T::one()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g / bv);
                }
                if self.needs(*b) {
                    let av = &self.nodes[a.0].value;
                    let mut d = g * av;
                    d.zip_mut_with(bv, |t, &bb| *t = -*t / (bb * bb));
                    Self::accumulate(grads, *b, d);
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if self.needs(*a) {
                    let cv = T::from_f64(*c);
                    Self::accumulate(grads, *a, g.mapv(|v| v * cv));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.needs(*a) {
                    let sl = T::from_f64(*slope);
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[a.0].value, |t, &x| {
                        if x < T::zero() {
                            *t = *t * sl;
                        }
                    });
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let one = T::one();
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[id].value, |t, &y| *t = *t * y * (one - y));
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Abs(a) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[a.0].value, |t, &x| {
                        if x < T::zero() {
                            *t = -*t;
                        } else if x == T::zero() {
                            *t = T::zero();
                        }
                    });
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Square(a) => {
                if self.needs(*a) {
                    let two = T::from_f64(2.0);
                    let mut d = g.clone();
                    d.zip_mut_with(&self.nodes[a.0].value, |t, &x| *t = *t * two * x);
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[a.0].value.dim();
                    let n = T::from_f64(self.nodes[a.0].value.len() as f64);
                    let gv = g[[0, 0, 0, 0, 0]] / n;
                    Self::accumulate(grads, *a, Array5::from_elem(shape, gv));
                }
            }
            Op::MeanPerItem(a) => {
                if self.needs(*a) {
                    let (b, c, x, y, z) = self.nodes[a.0].value.dim();
                    let n = T::from_f64((c * x * y * z) as f64);
                    let mut d = Array5::zeros((b, c, x, y, z));
                    for bi in 0..b {
                        let gv = g[[bi, 0, 0, 0, 0]] / n;
                        d.slice_mut(s![bi, .., .., .., ..]).fill(gv);
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::Conv { x, w, b, spec } => {
                let need_dx = self.needs(*x);
                let need_dw = self.needs(*w);
                let need_db = b.map(|bb| self.needs(bb)).unwrap_or(false);
                let (dx, dw, db) = conv::conv3d_backward_selective(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    spec,
                    need_dx,
                    need_dw,
                    need_db,
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(bb)) = (db, b) {
                    Self::accumulate(grads, *bb, db);
                }
            }
            Op::ConvT { x, w, b, spec } => {
                let need_dx = self.needs(*x);
                let need_dw = self.needs(*w);
                let need_db = b.map(|bb| self.needs(bb)).unwrap_or(false);
                let (dx, dw, db) = conv::conv3d_transposed_backward_selective(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    spec,
                    need_dx,
                    need_dw,
                    need_db,
                );
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(bb)) = (db, b) {
                    Self::accumulate(grads, *bb, db);
                }
            }
            Op::PixelShuffleXy { x, factor } => {
                if self.needs(*x) {
                    let (b, c_in, nx, ny, nz) = self.nodes[x.0].value.dim();
                    let r = *factor;
                    let r2 = r * r;
                    let c_out = c_in / r2;
                    let mut d = Array5::zeros((b, c_in, nx, ny, nz));
                    for bi in 0..b {
                        for c in 0..c_out {
                            for dx in 0..r {
                                for dy in 0..r {
                                    let cs = c * r2 + dx * r + dy;
                                    for ix in 0..nx {
                                        for iy in 0..ny {
                                            for iz in 0..nz {
                                                d[[bi, cs, ix, iy, iz]] =
                                                    g[[bi, c, ix * r + dx, iy * r + dy, iz]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.needs(*a) {
                    let (b, c, nx, ny, nz) = self.nodes[a.0].value.dim();
                    let n = T::from_f64((nx * ny * nz) as f64);
                    let mut d = Array5::zeros((b, c, nx, ny, nz));
                    for bi in 0..b {
                        for ci in 0..c {
                            d.slice_mut(s![bi, ci, .., .., ..]).fill(g[[bi, ci, 0, 0, 0]] / n);
                        }
                    }
                    Self::accumulate(grads, *a, d);
                }
            }
            Op::ChannelGate { x, gate } => {
                let (b, c, ..) = self.nodes[x.0].value.dim();
                if self.needs(*x) {
                    let gs = &self.nodes[gate.0].value;
                    let mut d = g.clone();
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = gs[[bi, ci, 0, 0, 0]];
                            d.slice_mut(s![bi, ci, .., .., ..]).mapv_inplace(|t| t * gv);
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
                if self.needs(*gate) {
                    let xs = &self.nodes[x.0].value;
                    let mut d = Array5::zeros((b, c, 1, 1, 1));
                    for bi in 0..b {
                        for ci in 0..c {
                            let prod = (&g.slice(s![bi, ci, .., .., ..])
                                * &xs.slice(s![bi, ci, .., .., ..]))
                                .sum();
                            d[[bi, ci, 0, 0, 0]] = prod;
                        }
                    }
                    Self::accumulate(grads, *gate, d);
                }
            }
            Op::KspaceTruncate { x, scale } => {
                if self.needs(*x) {
                    let (b, c, nx, ny, nz) = self.nodes[x.0].value.dim();
                    let (_, _, gx, gy, gz) = g.dim();
                    let mut d = Array5::zeros((b, c, nx, ny, nz));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gvol = ndarray::Array3::from_shape_fn((gx, gy, gz), |(i, j, k)| {
                                g[[bi, ci, i, j, k]].into_f64()
                            });
                            let big = kspace::truncate_adjoint(&gvol, (nx, ny, nz), *scale);
                            for ((i, j, k), &val) in big.indexed_iter() {
                                d[[bi, ci, i, j, k]] = T::from_f64(val);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, d);
                }
            }
        }
    }
}

/// Gradients collected by a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Gradients keyed by parameter, resolved against the tape's leaves.
impl<T: Scalar> Tape<T> {
    /// All parameter gradients produced by a backward pass, in tape order.
    pub fn param_grads<'a>(&self, grads: &'a Gradients<T>) -> Vec<(ParamRef, &'a Tensor<T>)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = &node.op {
                if let Some(g) = grads.grads[id].as_ref() {
                    out.push((*p, g));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of a scalar graph against the autodiff
    /// gradient, probing a handful of coordinates.
    fn check_grad<F>(build: F, shape: (usize, usize, usize, usize, usize), seed: u64, tol: f64)
    where
        F: Fn(&mut Tape<f64>, Var) -> Var,
    {
        let x0 = rand_tensor(shape, seed);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let root = build(&mut tape, x);
        let grads = tape.backward(root);
        let gx = grads.get(x).expect("input grad");
        let eps = 1e-6;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0xBEEF);
        for _ in 0..6 {
            let idx = [
                rng.gen_range(0..shape.0),
                rng.gen_range(0..shape.1),
                rng.gen_range(0..shape.2),
                rng.gen_range(0..shape.3),
                rng.gen_range(0..shape.4),
            ];
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[idx] += delta;
                let mut t = Tape::new();
                let xv = t.input(xp);
                let r = build(&mut t, xv);
                crate::tensor::scalar_value(t.value(r))
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = gx[idx];
            assert!(
                (fd - an).abs() <= tol * (1.0 + an.abs()),
                "grad mismatch at {idx:?}: fd {fd}, autodiff {an}"
            );
        }
    }

    #[test]
    fn elementwise_ops_gradients() {
        let shape = (2, 3, 4, 3, 2);
        check_grad(
            |t, x| {
                let s = t.sigmoid(x);
                let sq = t.square(s);
                t.mean_all(sq)
            },
            shape,
            1,
            1e-6,
        );
        check_grad(
            |t, x| {
                let l = t.leaky_relu(x, 0.2);
                let a = t.mul_scalar(l, 3.0);
                let b = t.add_scalar(a, -0.1);
                t.mean_all(b)
            },
            shape,
            2,
            1e-6,
        );
        check_grad(
            |t, x| {
                let c = t.constant(rand_tensor(shape, 99).mapv(|v| v + 2.5));
                let d = t.div(x, c);
                let m = t.mul(d, x);
                t.mean_all(m)
            },
            shape,
            3,
            1e-6,
        );
    }

    #[test]
    fn reduction_and_gate_gradients() {
        let shape = (2, 4, 3, 3, 2);
        check_grad(
            |t, x| {
                let p = t.global_avg_pool(x);
                let g = t.sigmoid(p);
                let gated = t.channel_gate(x, g);
                let per = t.mean_per_item(gated);
                let sq = t.square(per);
                t.mean_all(sq)
            },
            shape,
            4,
            1e-5,
        );
    }

    #[test]
    fn conv_graph_gradients() {
        let shape = (1, 2, 5, 4, 3);
        let w0 = rand_tensor((3, 2, 3, 3, 3), 50);
        let b0 = rand_tensor((1, 3, 1, 1, 1), 51);
        check_grad(
            move |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let c = t.conv3d(x, w, Some(b), ConvSpec::new((3, 3, 3), (1, 1, 1), (1, 1, 1)));
                let r = t.leaky_relu(c, 0.2);
                let sq = t.square(r);
                t.mean_all(sq)
            },
            shape,
            5,
            1e-5,
        );
    }

    #[test]
    fn pixel_shuffle_gradient_and_shape() {
        let shape = (1, 8, 3, 3, 2);
        check_grad(
            |t, x| {
                let p = t.pixel_shuffle_xy(x, 2);
                assert_eq!(t.dim(p), (1, 2, 6, 6, 2));
                let sq = t.square(p);
                t.mean_all(sq)
            },
            shape,
            6,
            1e-6,
        );
    }

    #[test]
    fn pixel_shuffle_constant_stays_constant() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Array5::from_elem((1, 4, 3, 3, 2), 0.7));
        let p = tape.pixel_shuffle_xy(x, 2);
        assert_eq!(tape.dim(p), (1, 1, 6, 6, 2));
        assert!(tape.value(p).iter().all(|&v| (v - 0.7f64).abs() < 1e-15));
    }

    #[test]
    fn kspace_truncate_gradient_matches_adjoint() {
        let shape = (1, 1, 8, 4, 4);
        check_grad(
            |t, x| {
                let k = t.kspace_truncate(x, (2, 2, 2));
                assert_eq!(t.dim(k), (1, 1, 4, 2, 2));
                let sq = t.square(k);
                t.mean_all(sq)
            },
            shape,
            7,
            1e-6,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(rand_tensor((1, 1, 4, 4, 2), 8));
        let c = tape.constant(rand_tensor((1, 1, 4, 4, 2), 9));
        let d = tape.sub(x, c);
        let a = tape.abs(d);
        let root = tape.mean_all(a);
        let grads = tape.backward(root);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
