//! Define-by-run reverse-mode differentiation over dense `f64` arrays.
//!
//! Every operation records a node on a [`Graph`] and evaluates eagerly.
//! Backward passes are themselves expressed with graph operations, so the
//! gradient of a gradient (needed by the critic's gradient penalty) is
//! obtained by differentiating the backward graph again.
//!
//! The primitive set is deliberately small: elementwise add/multiply/scale,
//! matmul, the dilated causal convolution together with its two transposes,
//! ReLU, reductions, square/sqrt/reciprocal, concat/slice/pad, broadcasting
//! along one axis, and constant-mask multiplication (dropout).

use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("invalid graph state: {0}")]
    State(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    Numeric(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::Dimension {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AutodiffError::Dimension {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv { x: Var, w: Var, dilation: usize },
    ConvInputGrad { g: Var, w: Var, dilation: usize },
    ConvWeightGrad { x: Var, g: Var, dilation: usize },
    Relu(Var),
    Mask(Var, Rc<Vec<f64>>),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    SumAll(Var),
    Expand(Var),
    SumAxis { a: Var, axis: usize },
    Broadcast { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Pad { a: Var, axis: usize, before: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of eagerly evaluated operations.
///
/// Node order is insertion order, which is also a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one output with respect to graph leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of `shape` when `var` did not influence the output.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Dimension { op, detail }
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(AutodiffError::State(format!("node {} does not exist", v.0)));
        }
        Ok(())
    }

    /// Differentiable leaf (an input or a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x * c).collect() };
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x + c).collect() };
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg)
    }

    /// Two-dimensional product `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape.len() != 2 || vb.shape.len() != 2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", va.shape, vb.shape)));
        }
        let (ar, ac) = (va.shape[0], va.shape[1]);
        let (br, bc) = (vb.shape[0], vb.shape[1]);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?} (ta={ta}, tb={tb})", va.shape, vb.shape)));
        }
        let at = |i: usize, p: usize| if ta { va.data[p * ac + i] } else { va.data[i * ac + p] };
        let bt = |p: usize, j: usize| if tb { vb.data[j * bc + p] } else { vb.data[p * bc + j] };
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k1 {
                let x = at(i, p);
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += x * bt(p, j);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Dilated causal convolution with implicit left zero-padding.
    ///
    /// `x` is `[batch, c_in, time]`, `w` is `[kernel, c_in, c_out]`; the output
    /// `[batch, c_out, time]` satisfies `y[b,c,t] = Σ_i Σ_j w[i,j,c]·x[b,j,t−d·i]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        if dilation == 0 {
            return Err(AutodiffError::Contract("dilation must be at least 1".into()));
        }
        let (vx, vw) = (self.value(x), self.value(w));
        let (b, cin, t) = conv_dims("conv1d", vx)?;
        let (k, wcin, cout) = kernel_dims("conv1d", vw)?;
        if wcin != cin {
            return Err(shape_err("conv1d", format!("input {:?} vs weight {:?}", vx.shape, vw.shape)));
        }
        let mut out = vec![0.0; b * cout * t];
        for bi in 0..b {
            for i in 0..k {
                let shift = dilation * i;
                if shift >= t {
                    break;
                }
                for j in 0..cin {
                    let xrow = &vx.data[(bi * cin + j) * t..(bi * cin + j + 1) * t];
                    for c in 0..cout {
                        let wv = vw.data[(i * cin + j) * cout + c];
                        if wv == 0.0 {
                            continue;
                        }
                        let yrow = &mut out[(bi * cout + c) * t..(bi * cout + c + 1) * t];
                        for (y, xv) in yrow[shift..].iter_mut().zip(&xrow[..t - shift]) {
                            *y += wv * xv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor { shape: vec![b, cout, t], data: out }, Op::Conv { x, w, dilation }, rg))
    }

    /// Adjoint of [`Graph::conv1d`] with respect to its input:
    /// `gx[b,j,s] = Σ_i Σ_c w[i,j,c]·g[b,c,s+d·i]`.
    pub fn conv1d_input_grad(&mut self, g: Var, w: Var, dilation: usize) -> Result<Var> {
        let (vg, vw) = (self.value(g), self.value(w));
        let (b, cout, t) = conv_dims("conv1d_input_grad", vg)?;
        let (k, cin, wcout) = kernel_dims("conv1d_input_grad", vw)?;
        if wcout != cout {
            return Err(shape_err("conv1d_input_grad", format!("{:?} vs {:?}", vg.shape, vw.shape)));
        }
        let mut out = vec![0.0; b * cin * t];
        for bi in 0..b {
            for i in 0..k {
                let shift = dilation * i;
                if shift >= t {
                    break;
                }
                for j in 0..cin {
                    for c in 0..cout {
                        let wv = vw.data[(i * cin + j) * cout + c];
                        if wv == 0.0 {
                            continue;
                        }
                        let grow = &vg.data[(bi * cout + c) * t..(bi * cout + c + 1) * t];
                        let orow = &mut out[(bi * cin + j) * t..(bi * cin + j + 1) * t];
                        for (o, gv) in orow[..t - shift].iter_mut().zip(&grow[shift..]) {
                            *o += wv * gv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[g, w]);
        Ok(self.push(
            Tensor { shape: vec![b, cin, t], data: out },
            Op::ConvInputGrad { g, w, dilation },
            rg,
        ))
    }

    /// Adjoint of [`Graph::conv1d`] with respect to its kernel:
    /// `gw[i,j,c] = Σ_b Σ_t g[b,c,t]·x[b,j,t−d·i]`.
    pub fn conv1d_weight_grad(&mut self, x: Var, g: Var, dilation: usize, kernel: usize) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        let (b, cin, t) = conv_dims("conv1d_weight_grad", vx)?;
        let (gb, cout, gt) = conv_dims("conv1d_weight_grad", vg)?;
        if gb != b || gt != t {
            return Err(shape_err("conv1d_weight_grad", format!("{:?} vs {:?}", vx.shape, vg.shape)));
        }
        let mut out = vec![0.0; kernel * cin * cout];
        for bi in 0..b {
            for i in 0..kernel {
                let shift = dilation * i;
                if shift >= t {
                    break;
                }
                for j in 0..cin {
                    let xrow = &vx.data[(bi * cin + j) * t..(bi * cin + j + 1) * t];
                    for c in 0..cout {
                        let grow = &vg.data[(bi * cout + c) * t..(bi * cout + c + 1) * t];
                        let s: f64 = grow[shift..].iter().zip(&xrow[..t - shift]).map(|(a, b)| a * b).sum();
                        out[(i * cin + j) * cout + c] += s;
                    }
                }
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(
            Tensor { shape: vec![kernel, cin, cout], data: out },
            Op::ConvWeightGrad { x, g, dilation },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x.max(0.0)).collect() };
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Elementwise product with a constant mask (dropout, ReLU adjoint).
    pub fn mask(&mut self, a: Var, mask: Rc<Vec<f64>>) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.data.len() {
            return Err(shape_err("mask", format!("{} values vs mask of {}", va.data.len(), mask.len())));
        }
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().zip(mask.iter()).map(|(x, m)| x * m).collect() };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x * x).collect() };
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data.iter().any(|&x| x < 0.0) {
            return Err(AutodiffError::Numeric("sqrt"));
        }
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|x| x.sqrt()).collect() };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    /// Elementwise `1/a`, with the convention `1/0 = 0`.
    ///
    /// The convention gives the zero subgradient for `sqrt` at the origin.
    pub fn recip(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| if x == 0.0 { 0.0 } else { 1.0 / x }).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Recip(a), rg)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Repeat a single-element tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if va.len() != 1 {
            return Err(shape_err("expand", format!("{:?} is not single-element", va.shape)));
        }
        let out = Tensor::full(shape, va.data[0]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Expand(a), rg))
    }

    /// Sum along `axis`, keeping it with size one.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", va.shape)));
        }
        let (outer, n, inner) = strides(&va.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &va.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape.clone();
        shape[axis] = 1;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis { a, axis }, rg))
    }

    /// Repeat a size-one `axis` to length `n`.
    pub fn broadcast(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.shape.len() || va.shape[axis] != 1 {
            return Err(shape_err("broadcast", format!("axis {axis} of {:?} must have size 1", va.shape)));
        }
        let (outer, _, inner) = strides(&va.shape, axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &va.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = va.shape.clone();
        shape[axis] = n;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Broadcast { a, axis }, rg))
    }

    /// Broadcast `a` to `shape` along every axis where `a` has size one.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let mut cur = a;
        let src = self.shape(a).to_vec();
        if src.len() != shape.len() {
            return Err(shape_err("broadcast_to", format!("{src:?} -> {shape:?}")));
        }
        for (axis, (&s, &d)) in src.iter().zip(shape).enumerate() {
            if s != d {
                cur = self.broadcast(cur, axis, d)?;
            }
        }
        Ok(cur)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AutodiffError::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(shape_err("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.shape.len() || start + len > va.shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, va.shape)));
        }
        let (outer, n, inner) = strides(&va.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&va.data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = va.shape.clone();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { a, axis, start }, rg))
    }

    /// Zero-pad `axis` so that `a` occupies `[before, before+len)` of `total`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, total: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.shape.len() || before + va.shape[axis] > total {
            return Err(shape_err("pad", format!("{before}+{:?} into {total}", va.shape)));
        }
        let (outer, n, inner) = strides(&va.shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            data[(o * total + before) * inner..(o * total + before + n) * inner]
                .copy_from_slice(&va.data[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = va.shape.clone();
        shape[axis] = total;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Pad { a, axis, before }, rg))
    }

    fn accumulate(&mut self, slot: &mut Option<Var>, g: Var) -> Result<()> {
        *slot = Some(match *slot {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Vector-Jacobian products of `output` (seeded with `seed`) with respect to `wrt`.
    ///
    /// The returned gradients are graph nodes, so they can be differentiated
    /// again. Leaves that do not influence `output` get a zero constant.
    pub fn grad(&mut self, output: Var, seed: Option<Tensor>, wrt: &[Var]) -> Result<Vec<Var>> {
        let adj = self.propagate(output, seed)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            self.check(w)?;
            match adj.get(w.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    out.push(self.constant(Tensor::zeros(&shape)));
                }
            }
        }
        Ok(out)
    }

    /// Gradient values of `output` with respect to every differentiable leaf.
    pub fn backward(&mut self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let adj = self.propagate(output, seed)?;
        let mut grads = vec![None; output.0 + 1];
        for (i, a) in adj.iter().enumerate() {
            if let (Some(g), Op::Leaf) = (a, &self.nodes[i].op) {
                if self.nodes[i].requires_grad {
                    grads[i] = Some(self.value(*g).clone());
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&mut self, output: Var, seed: Option<Tensor>) -> Result<Vec<Option<Var>>> {
        self.check(output)?;
        let out_shape = self.shape(output).to_vec();
        let seed = match seed {
            Some(s) if s.shape != out_shape && s.len() != 1 => {
                return Err(shape_err("backward", format!("seed {:?} vs output {out_shape:?}", s.shape)))
            }
            Some(s) if s.shape != out_shape => Tensor::full(&out_shape, s.data[0]),
            Some(s) => s,
            None => Tensor::full(&out_shape, 1.0),
        };
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        if !self.nodes[output.0].requires_grad {
            return Ok(adj);
        }
        adj[output.0] = Some(self.constant(seed));
        for id in (0..=output.0).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let contributions: Vec<(Var, Var)> = match op {
                Op::Leaf => vec![],
                Op::Add(a, b) => vec![(a, g), (b, g)],
                Op::Mul(a, b) => {
                    let mut v = Vec::new();
                    if self.requires_grad(a) {
                        v.push((a, self.mul(g, b)?));
                    }
                    if self.requires_grad(b) {
                        v.push((b, self.mul(g, a)?));
                    }
                    v
                }
                Op::Scale(a, c) => vec![(a, self.scale(g, c))],
                Op::Offset(a) => vec![(a, g)],
                Op::MatMul { a, b, ta, tb } => {
                    let mut v = Vec::new();
                    if self.requires_grad(a) {
                        let ga = if ta { self.matmul_t(b, g, tb, true)? } else { self.matmul_t(g, b, false, !tb)? };
                        v.push((a, ga));
                    }
                    if self.requires_grad(b) {
                        let gb = if tb { self.matmul_t(g, a, true, ta)? } else { self.matmul_t(a, g, !ta, false)? };
                        v.push((b, gb));
                    }
                    v
                }
                Op::Conv { x, w, dilation } => {
                    let mut v = Vec::new();
                    if self.requires_grad(x) {
                        v.push((x, self.conv1d_input_grad(g, w, dilation)?));
                    }
                    if self.requires_grad(w) {
                        let k = self.shape(w)[0];
                        v.push((w, self.conv1d_weight_grad(x, g, dilation, k)?));
                    }
                    v
                }
                Op::ConvInputGrad { g: up, w, dilation } => {
                    let mut v = Vec::new();
                    if self.requires_grad(up) {
                        v.push((up, self.conv1d(g, w, dilation)?));
                    }
                    if self.requires_grad(w) {
                        let k = self.shape(w)[0];
                        v.push((w, self.conv1d_weight_grad(g, up, dilation, k)?));
                    }
                    v
                }
                Op::ConvWeightGrad { x, g: up, dilation } => {
                    let mut v = Vec::new();
                    if self.requires_grad(x) {
                        v.push((x, self.conv1d_input_grad(up, g, dilation)?));
                    }
                    if self.requires_grad(up) {
                        v.push((up, self.conv1d(x, g, dilation)?));
                    }
                    v
                }
                Op::Relu(a) => {
                    let mask: Vec<f64> =
                        self.value(a).data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
                    vec![(a, self.mask(g, Rc::new(mask))?)]
                }
                Op::Mask(a, m) => vec![(a, self.mask(g, m)?)],
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    vec![(a, self.mul(g, two_a)?)]
                }
                Op::Sqrt(a) => {
                    let inv = self.recip(Var(id));
                    let half = self.scale(inv, 0.5);
                    vec![(a, self.mul(g, half)?)]
                }
                Op::Recip(a) => {
                    let y = Var(id);
                    let y2 = self.mul(y, y)?;
                    let gy2 = self.mul(g, y2)?;
                    vec![(a, self.scale(gy2, -1.0))]
                }
                Op::SumAll(a) => {
                    let shape = self.shape(a).to_vec();
                    vec![(a, self.expand(g, &shape)?)]
                }
                Op::Expand(a) => {
                    let s = self.sum(g);
                    let shape = self.shape(a).to_vec();
                    vec![(a, Var(self.reshape_scalar(s, &shape)))]
                }
                Op::SumAxis { a, axis } => {
                    let n = self.shape(a)[axis];
                    vec![(a, self.broadcast(g, axis, n)?)]
                }
                Op::Broadcast { a, axis } => vec![(a, self.sum_axis(g, axis)?)],
                Op::Concat { parts, axis } => {
                    let mut v = Vec::new();
                    let mut start = 0;
                    for p in parts {
                        let len = self.shape(p)[axis];
                        if self.requires_grad(p) {
                            v.push((p, self.slice(g, axis, start, len)?));
                        }
                        start += len;
                    }
                    v
                }
                Op::Slice { a, axis, start } => {
                    let total = self.shape(a)[axis];
                    vec![(a, self.pad(g, axis, start, total)?)]
                }
                Op::Pad { a, axis, before } => {
                    let len = self.shape(a)[axis];
                    vec![(a, self.slice(g, axis, before, len)?)]
                }
            };
            for (input, contrib) in contributions {
                if !self.requires_grad(input) {
                    continue;
                }
                let mut slot = adj[input.0];
                self.accumulate(&mut slot, contrib)?;
                adj[input.0] = slot;
            }
        }
        Ok(adj)
    }

    // The adjoint of `expand` is a full sum; it has to come back with the
    // original single-element shape so accumulation shapes line up.
    fn reshape_scalar(&mut self, s: Var, shape: &[usize]) -> usize {
        if self.shape(s) == shape {
            return s.0;
        }
        let node = &mut self.nodes[s.0];
        node.value.shape = shape.to_vec();
        s.0
    }
}

fn conv_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        &[b, c, n] => Ok((b, c, n)),
        s => Err(shape_err(op, format!("expected [batch, channels, time], got {s:?}"))),
    }
}

fn kernel_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape.as_slice() {
        &[k, cin, cout] => Ok((k, cin, cout)),
        s => Err(shape_err(op, format!("expected [kernel, c_in, c_out], got {s:?}"))),
    }
}

/// Evaluate a define-by-run function on fresh leaves built from `inputs`.
///
/// Returns the graph (holding every intermediate for a later backward pass),
/// the input leaves and the output nodes.
pub fn forward<F>(f: F, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let outputs = f(&mut g, &leaves)?;
    Ok((g, leaves, outputs))
}

/// `‖∇ₓ D(x)‖₂` as a differentiable node, where `critic` maps a leaf to a scalar.
///
/// The returned node participates in the graph, so differentiating it (or a
/// penalty built from it) with respect to critic parameters is valid.
pub fn input_gradient_norm(g: &mut Graph, critic_output: Var, x: Var) -> Result<Var> {
    if g.value(critic_output).len() != 1 {
        return Err(AutodiffError::Contract(format!(
            "critic output must be scalar, got shape {:?}",
            g.shape(critic_output)
        )));
    }
    let grads = g.grad(critic_output, None, &[x])?;
    let sq = g.square(grads[0]);
    let s = g.sum(sq);
    g.sqrt(s)
}

/// Worst relative discrepancy between backward gradients and central
/// finite differences of a scalar function, over every input element.
///
/// The discrepancy is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(AutodiffError::Contract("epsilon must be positive".into()));
    }
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        g.value(out).item()
    };
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &leaves)?;
    g.value(out).item()?;
    let grads = g.backward(out, None)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(*leaf, inputs[which].shape());
        for idx in 0..inputs[which].len() {
            let orig = inputs[which].data[idx];
            probe[which].data[idx] = orig + epsilon;
            let up = eval(&probe)?;
            probe[which].data[idx] = orig - epsilon;
            let down = eval(&probe)?;
            probe[which].data[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_forward() {
        let (g, _, out) = forward(|_, x| Ok(vec![x[0]]), &[Tensor::from_vec(vec![1.0, 2.0, 3.0])]).unwrap();
        assert_eq!(g.value(out[0]).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn affine_forward() {
        let (g, _, out) = forward(
            |g, x| {
                let s = g.scale(x[0], 2.0);
                Ok(vec![g.offset(s, 1.0)])
            },
            &[Tensor::from_vec(vec![0.0])],
        )
        .unwrap();
        assert_eq!(g.value(out[0]).data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_and_gradient() {
        let (mut g, leaves, out) = forward(
            |g, x| {
                let sq = g.square(x[0]);
                Ok(vec![g.sum(sq)])
            },
            &[Tensor::from_vec(vec![1.0, 2.0])],
        )
        .unwrap();
        assert_eq!(g.value(out[0]).item().unwrap(), 5.0);
        let grads = g.backward(out[0], None).unwrap();
        assert_eq!(grads.get(leaves[0]).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -3.0]));
        let c = g.constant(Tensor::scalar(7.0));
        let out = g.grad(c, None, &[x]).unwrap();
        assert_eq!(g.value(out[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_is_piecewise() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s, None).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_on_missing_node_is_state_error() {
        let mut g = Graph::new();
        let err = g.backward(Var(3), None).unwrap_err();
        assert!(matches!(err, AutodiffError::State(_)));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.square(x);
        let err = g.backward(y, Some(Tensor::from_vec(vec![1.0, 1.0, 1.0]))).unwrap_err();
        assert!(matches!(err, AutodiffError::Dimension { .. }));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::from_vec(vec![1.0]));
        assert!(matches!(g.add(a, b), Err(AutodiffError::Dimension { .. })));
    }

    #[test]
    fn input_gradient_norm_cases() {
        // D(x) = x on a scalar input
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.3));
        let d = g.scale(x, 1.0);
        let n = input_gradient_norm(&mut g, d, x).unwrap();
        assert_eq!(g.value(n).item().unwrap(), 1.0);

        // D(x) = sum(x), x in R^4 -> norm 2, penalty lambda*(2-1)^2
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.1, -0.2, 0.3, 0.4]));
        let d = g.sum(x);
        let n = input_gradient_norm(&mut g, d, x).unwrap();
        let norm = g.value(n).item().unwrap();
        assert_eq!(norm, 2.0);
        assert_eq!(10.0 * (norm - 1.0).powi(2), 10.0);

        // D(x) = 0
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let zero = g.scale(x, 0.0);
        let d = g.sum(zero);
        let n = input_gradient_norm(&mut g, d, x).unwrap();
        let norm = g.value(n).item().unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(10.0 * (norm - 1.0).powi(2), 10.0);
    }

    #[test]
    fn input_gradient_norm_rejects_vector_output() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(input_gradient_norm(&mut g, y, x), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn gradient_check_rejects_nonpositive_epsilon() {
        let r = gradient_check(|g, x| Ok(g.sum(x[0])), &[Tensor::from_vec(vec![1.0])], 0.0);
        assert!(matches!(r, Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn second_order_through_square() {
        // d/dx of (d/dx sum(x^3)) where x^3 = x * x^2 => 6x
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]));
        let x2 = g.square(x);
        let x3 = g.mul(x, x2).unwrap();
        let s = g.sum(x3);
        let dx = g.grad(s, None, &[x]).unwrap()[0];
        let sdx = g.sum(dx);
        let d2 = g.grad(sdx, None, &[x]).unwrap()[0];
        assert_eq!(g.value(d2).data(), &[9.0, -12.0]);
    }
}
