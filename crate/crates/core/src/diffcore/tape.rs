use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};

use super::array::Array;
use crate::error::{Error, Result};
use crate::geometry::{
    kabsch_vjp, point_to_ray_distance_grad, weighted_kabsch_full, KabschSolution, Ray,
    RigidTransform,
};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowNorm(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    WeightedGather {
        input: Var,
        idx: Arc<[usize]>,
        weights: Arc<[f64]>,
        k: usize,
    },
    Select {
        mask: Arc<[bool]>,
        a: Var,
        b: Var,
    },
    Kabsch {
        src: Var,
        dst: Var,
        weights: Var,
        solution: Box<KabschSolution>,
    },
    ApplyTransform {
        transform: Var,
        points: Var,
    },
    RayDistance {
        points: Var,
        rays: Arc<[Ray]>,
        deadzone: f64,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input precedes its consumer.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Array {
        match &self.grads[v.0] {
            Some(g) => Array::with_shape(self.shapes[v.0].clone(), g.clone()),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array {
        match self.grads[v.0].take() {
            Some(g) => Array::with_shape(self.shapes[v.0].clone(), g),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

fn acc<'a>(slot: &'a mut Option<Vec<f64>>, len: usize) -> &'a mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// `c (m x n) += a (m x k) * b (k x n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: slice lengths cover every strided access; callers pass dimensions of the backing arrays.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(what, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Array::with_shape(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + offset);
        let rg = self.rg(a);
        self.push(value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            k as isize,
            1,
            vb.data(),
            n as isize,
            1,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::with_shape(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.len() != vx.cols() {
            return Err(shape_err("add_bias", vx.shape(), vb.shape()));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let value = Array::with_shape(vx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    v.shape(),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Array::with_shape(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows of `x` at `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::with_shape(vec![idx.len(), c], data),
            Op::GatherRows(x, idx),
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::DomainError("log of a non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::DomainError("sqrt of a negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements; 0 for an empty array.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.rg(a);
        self.push(Array::scalar(m), Op::Mean(a), rg)
    }

    /// `r x c -> r x 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let data = v
            .data()
            .chunks_exact(c.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let value = Array::with_shape(vec![v.rows(), 1], data);
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Euclidean norm of every row, `r x c -> r x 1`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let data = v
            .data()
            .chunks_exact(c.max(1))
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Array::with_shape(vec![v.rows(), 1], data);
        let rg = self.rg(a);
        self.push(value, Op::RowNorm(a), rg)
    }

    /// Max over consecutive groups of `group` rows: `(n*group) x c -> n x c`.
    ///
    /// Ties route the gradient to the lowest row index within the group.
    pub fn max_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = self.value(x);
        if group == 0 || v.rows() % group != 0 {
            return Err(Error::ShapeMismatch(format!(
                "max_pool group {group} over {} rows",
                v.rows()
            )));
        }
        let (n, c) = (v.rows() / group, v.cols());
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0u32; n * c];
        for g in 0..n {
            for r in 0..group {
                let row_idx = g * group + r;
                let row = v.row(row_idx);
                for j in 0..c {
                    if row[j] > out[g * c + j] || r == 0 {
                        out[g * c + j] = row[j];
                        argmax[g * c + j] = row_idx as u32;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::with_shape(vec![n, c], out),
            Op::MaxPool { input: x, argmax },
            rg,
        ))
    }

    /// Max over all rows, `r x c -> 1 x c`.
    pub fn max_pool_all(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.max_pool(x, rows)
    }

    /// `out_i = sum_k weights[i*k + m] * x[idx[i*k + m]]`.
    pub fn weighted_gather(
        &mut self,
        x: Var,
        idx: Arc<[usize]>,
        weights: Arc<[f64]>,
        k: usize,
    ) -> Result<Var> {
        let v = self.value(x);
        if k == 0 || idx.len() != weights.len() || idx.len() % k != 0 {
            return Err(Error::ShapeMismatch(
                "weighted_gather index/weight layout".into(),
            ));
        }
        if idx.iter().any(|&i| i >= v.rows()) {
            return Err(Error::ShapeMismatch(
                "weighted_gather index out of range".into(),
            ));
        }
        let (n, c) = (idx.len() / k, v.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let dst = &mut out[i * c..(i + 1) * c];
            for m in 0..k {
                let w = weights[i * k + m];
                for (o, s) in dst.iter_mut().zip(v.row(idx[i * k + m])) {
                    *o += w * s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::with_shape(vec![n, c], out),
            Op::WeightedGather {
                input: x,
                idx,
                weights,
                k,
            },
            rg,
        ))
    }

    /// Row `i` taken from `a` where `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, mask: Arc<[bool]>, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() || va.rows() != mask.len() {
            return Err(shape_err("select_rows", va.shape(), vb.shape()));
        }
        let c = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for (i, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m {
                &va.data()[i * c..(i + 1) * c]
            } else {
                &vb.data()[i * c..(i + 1) * c]
            });
        }
        let value = Array::with_shape(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Select { mask, a, b }, rg))
    }

    /// Weighted Kabsch on `N x 3` inputs; returns the row-major `[R | t]` as a 12-vector.
    pub fn kabsch(&mut self, src: Var, dst: Var, weights: Var) -> Result<Var> {
        let (vs, vd, vw) = (self.value(src), self.value(dst), self.value(weights));
        if vs.cols() != 3 || vs.shape() != vd.shape() || vw.len() != vs.rows() {
            return Err(shape_err("kabsch", vs.shape(), vd.shape()));
        }
        let solution = weighted_kabsch_full(&vs.to_points(), &vd.to_points(), vw.data())?;
        let value = Array::vector(solution.transform.to_array12().to_vec());
        let rg = self.rg(src) || self.rg(dst) || self.rg(weights);
        Ok(self.push(
            value,
            Op::Kabsch {
                src,
                dst,
                weights,
                solution: Box::new(solution),
            },
            rg,
        ))
    }

    /// Applies a 12-vector `[R | t]` to every row of an `N x 3` array.
    pub fn apply_transform(&mut self, transform: Var, points: Var) -> Result<Var> {
        let (vt, vp) = (self.value(transform), self.value(points));
        if vt.len() != 12 || vp.cols() != 3 {
            return Err(shape_err("apply_transform", vt.shape(), vp.shape()));
        }
        let t = RigidTransform::from_array12_unchecked(vt.data());
        let out: Vec<f64> = vp
            .data()
            .chunks_exact(3)
            .flat_map(|p| {
                let q = t.apply(&Vector3::new(p[0], p[1], p[2]));
                [q.x, q.y, q.z]
            })
            .collect();
        let value = Array::with_shape(vec![vp.rows(), 3], out);
        let rg = self.rg(transform) || self.rg(points);
        Ok(self.push(value, Op::ApplyTransform { transform, points }, rg))
    }

    /// Distance from each row point to its ray; distances below `deadzone`
    /// contribute zero value and zero gradient. Output `N x 1`.
    pub fn ray_distance(&mut self, points: Var, rays: Arc<[Ray]>, deadzone: f64) -> Result<Var> {
        let vp = self.value(points);
        if vp.cols() != 3 || vp.rows() != rays.len() {
            return Err(Error::ShapeMismatch(
                "ray_distance needs one ray per point".into(),
            ));
        }
        let data = vp
            .data()
            .chunks_exact(3)
            .zip(rays.iter())
            .map(|(p, ray)| {
                let (d, _) = point_to_ray_distance_grad(&Vector3::new(p[0], p[1], p[2]), ray);
                if d < deadzone {
                    0.0
                } else {
                    d
                }
            })
            .collect();
        let value = Array::with_shape(vec![vp.rows(), 1], data);
        let rg = self.rg(points);
        Ok(self.push(
            value,
            Op::RayDistance {
                points,
                rays,
                deadzone,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            // Interior gradients are released once propagated.
            let Some(g) = hi[0].take() else { continue };
            self.backprop_node(node, &g, lo)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], lo: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if rg(*a) {
                    let ga = acc(&mut lo[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let gb = acc(&mut lo[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let vb = val(*b).data();
                    let ga = acc(&mut lo[a.0], g.len());
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * z;
                    }
                }
                if rg(*b) {
                    let va = val(*a).data();
                    let gb = acc(&mut lo[b.0], g.len());
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * z;
                    }
                }
            }
            Op::Affine(a, s) => {
                let ga = acc(&mut lo[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if rg(*a) {
                    // dA = G B^T
                    let ga = acc(&mut lo[a.0], m * k);
                    gemm(m, n, k, g, n as isize, 1, vb.data(), 1, n as isize, ga);
                }
                if rg(*b) {
                    // dB = A^T G
                    let gb = acc(&mut lo[b.0], k * n);
                    gemm(k, m, n, va.data(), 1, k as isize, g, n as isize, 1, gb);
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    let gx = acc(&mut lo[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if rg(*b) {
                    let c = val(*b).len();
                    let gb = acc(&mut lo[b.0], c);
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let vp = val(*p);
                    let c = vp.cols();
                    if rg(*p) {
                        let gp = acc(&mut lo[p.0], vp.len());
                        for r in 0..vp.rows() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = val(*x);
                let c = vx.cols();
                let gx = acc(&mut lo[x.0], vx.len());
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(p, q)| *p += q);
                }
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                let ga = acc(&mut lo[a.0], g.len());
                for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                    if *z > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::Exp(a) | Op::Sqrt(a) => {
                let out = node.value.data();
                let ga = acc(&mut lo[a.0], g.len());
                let deriv: fn(f64) -> f64 = match node.op {
                    Op::Sigmoid(_) => |y| y * (1.0 - y),
                    Op::Tanh(_) => |y| 1.0 - y * y,
                    Op::Exp(_) => |y| y,
                    _ => |y| if y > 0.0 { 0.5 / y } else { 0.0 },
                };
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * deriv(*o);
                }
            }
            Op::Log(a) => {
                let va = val(*a).data();
                let ga = acc(&mut lo[a.0], g.len());
                for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                    *x += y / z;
                }
            }
            Op::Abs(a) => {
                let va = val(*a).data();
                let ga = acc(&mut lo[a.0], g.len());
                for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                    *x += y * if *z > 0.0 {
                        1.0
                    } else if *z < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            Op::Clamp(a, lo_v, hi_v) => {
                let va = val(*a).data();
                let ga = acc(&mut lo[a.0], g.len());
                for ((x, y), z) in ga.iter_mut().zip(g).zip(va) {
                    if z > lo_v && z < hi_v {
                        *x += y;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let len = val(*a).len();
                let scale = if matches!(node.op, Op::Mean(_)) && len > 0 {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                let ga = acc(&mut lo[a.0], len);
                ga.iter_mut().for_each(|x| *x += scale);
            }
            Op::RowSum(a) => {
                let va = val(*a);
                let c = va.cols();
                let ga = acc(&mut lo[a.0], va.len());
                for (r, row) in ga.chunks_exact_mut(c.max(1)).enumerate() {
                    row.iter_mut().for_each(|x| *x += g[r]);
                }
            }
            Op::RowNorm(a) => {
                let va = val(*a);
                let c = va.cols();
                let norms = node.value.data();
                let ga = acc(&mut lo[a.0], va.len());
                for r in 0..va.rows() {
                    if norms[r] > 0.0 {
                        let s = g[r] / norms[r];
                        for j in 0..c {
                            ga[r * c + j] += s * va.data()[r * c + j];
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax, .. } => {
                let vx = val(*input);
                let c = vx.cols();
                let gx = acc(&mut lo[input.0], vx.len());
                for (o, &src_row) in argmax.iter().enumerate() {
                    gx[src_row as usize * c + o % c] += g[o];
                }
            }
            Op::WeightedGather {
                input,
                idx,
                weights,
                k,
            } => {
                let vx = val(*input);
                let c = vx.cols();
                let gx = acc(&mut lo[input.0], vx.len());
                for i in 0..idx.len() / k {
                    let gi = &g[i * c..(i + 1) * c];
                    for m in 0..*k {
                        let (j, w) = (idx[i * k + m], weights[i * k + m]);
                        gx[j * c..(j + 1) * c]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(p, q)| *p += w * q);
                    }
                }
            }
            Op::Select { mask, a, b } => {
                let c = node.value.cols();
                for (target, want) in [(*a, true), (*b, false)] {
                    if !rg(target) {
                        continue;
                    }
                    let gt = acc(&mut lo[target.0], g.len());
                    for (i, &m) in mask.iter().enumerate() {
                        if m == want {
                            gt[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[i * c..(i + 1) * c])
                                .for_each(|(p, q)| *p += q);
                        }
                    }
                }
            }
            Op::Kabsch {
                src,
                dst,
                weights,
                solution,
            } => {
                let grad_r = Matrix3::new(g[0], g[1], g[2], g[4], g[5], g[6], g[8], g[9], g[10]);
                let grad_t = Vector3::new(g[3], g[7], g[11]);
                let (ps, pd) = (val(*src).to_points(), val(*dst).to_points());
                let grads = kabsch_vjp(&ps, &pd, solution, &grad_r, &grad_t)?;
                if rg(*src) {
                    let gs = acc(&mut lo[src.0], ps.len() * 3);
                    for (i, v) in grads.src.iter().enumerate() {
                        for k in 0..3 {
                            gs[i * 3 + k] += v[k];
                        }
                    }
                }
                if rg(*dst) {
                    let gd = acc(&mut lo[dst.0], pd.len() * 3);
                    for (i, v) in grads.dst.iter().enumerate() {
                        for k in 0..3 {
                            gd[i * 3 + k] += v[k];
                        }
                    }
                }
                if rg(*weights) {
                    let gw = acc(&mut lo[weights.0], grads.weights.len());
                    gw.iter_mut().zip(&grads.weights).for_each(|(p, q)| *p += q);
                }
            }
            Op::ApplyTransform { transform, points } => {
                let t = val(*transform).data();
                let vp = val(*points);
                if rg(*transform) {
                    let gt = acc(&mut lo[transform.0], 12);
                    for (p, gi) in vp.data().chunks_exact(3).zip(g.chunks_exact(3)) {
                        for r in 0..3 {
                            for c in 0..3 {
                                gt[r * 4 + c] += gi[r] * p[c];
                            }
                            gt[r * 4 + 3] += gi[r];
                        }
                    }
                }
                if rg(*points) {
                    let gp = acc(&mut lo[points.0], vp.len());
                    for (dst, gi) in gp.chunks_exact_mut(3).zip(g.chunks_exact(3)) {
                        for c in 0..3 {
                            dst[c] += (0..3).map(|r| t[r * 4 + c] * gi[r]).sum::<f64>();
                        }
                    }
                }
            }
            Op::RayDistance {
                points,
                rays,
                deadzone,
            } => {
                let vp = val(*points);
                let gp = acc(&mut lo[points.0], vp.len());
                for (i, (p, ray)) in vp.data().chunks_exact(3).zip(rays.iter()).enumerate() {
                    let (d, grad) =
                        point_to_ray_distance_grad(&Vector3::new(p[0], p[1], p[2]), ray);
                    if d >= *deadzone {
                        for k in 0..3 {
                            gp[i * 3 + k] += g[i] * grad[k];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
