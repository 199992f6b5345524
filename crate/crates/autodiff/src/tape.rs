use std::sync::Arc;

use crate::error::{shape_err, AutodiffError, Result};
use crate::kernels::{self, Boundary, ConvGeom, Taps, NO_TAP};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Gather { plane: Var, taps: Vec<Taps<T>>, channels: usize },
    SumAxis { x: Var, outer: usize, n: usize, inner: usize, mean: bool },
    SumAll(Var),
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Broadcast(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Upsample2x { x: Var, lead: usize, h: usize, w: usize },
    IndexRows { table: Var, rows: Vec<usize> },
    TotalVariation { x: Var, lead: usize, h: usize, w: usize },
    MaskedMean { parts: Vec<Var>, weights: Vec<Arc<Vec<T>>>, channels: usize },
    CumsumExclusive { x: Var, n: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Conv { geom, .. } if geom.in_dims.len() == 3 => "conv3d",
            Op::Conv { .. } => "conv2d",
            Op::Gather { .. } => "bilinear-gather",
            Op::SumAxis { mean: true, .. } => "mean-pool-axis",
            Op::SumAxis { .. } => "sum-axis",
            Op::SumAll(..) => "sum-reduce",
            Op::Concat { .. } => "concat",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Upsample2x { .. } => "upsample2d",
            Op::IndexRows { .. } => "index-rows",
            Op::TotalVariation { .. } => "total-variation",
            Op::MaskedMean { .. } => "masked-mean",
            Op::CumsumExclusive { .. } => "cumsum-exclusive",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse.
///
/// Nodes are appended in execution order, which is a valid topological order
/// by construction. Leaves created with [`Tape::leaf`] receive gradients;
/// [`Tape::constant`] nodes are frozen.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the eager NaN/Inf check after every forward op.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if self.check_finite && !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
        });
        Ok(Var(id))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Stop-gradient: a constant sharing `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant_shared(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|p| scale * p + shift);
        let ng = self.ng(x);
        self.push(Op::Affine(x, scale), v, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -T::one(), T::zero())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("rank-2 operands required, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err("matmul", format!("inner extents differ: {sa:?}{} · {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            self.value(a).data(),
            (sa[0], sa[1]),
            ta,
            self.value(b).data(),
            (sb[0], sb[1]),
            tb,
            &mut out,
            T::zero(),
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Matmul { a, b, ta, tb }, Tensor::new(vec![m, n], out)?, ng)
    }

    /// Zero-padded convolution of `x` `[cin, h, w]` with `w` `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv(x, w, b, stride, pad, 2)
    }

    /// Zero-padded convolution of `x` `[cin, d, h, w]` with `w` `[cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv(x, w, b, stride, pad, 3)
    }

    fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, dims: usize) -> Result<Var> {
        let op: &'static str = if dims == 2 { "conv2d" } else { "conv3d" };
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != dims + 1 || ws.len() != dims + 2 {
            return shape_err(op, format!("input {xs:?}, weight {ws:?}"));
        }
        let k = ws[2];
        if ws[2..].iter().any(|&e| e != k) || ws[1] != xs[0] || stride == 0 {
            return shape_err(op, format!("input {xs:?}, weight {ws:?}, stride {stride}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err(op, format!("bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let mut out_dims = Vec::with_capacity(dims);
        for &e in &xs[1..] {
            if e + 2 * pad < k {
                return shape_err(op, format!("kernel {k} larger than padded input {xs:?}"));
            }
            out_dims.push((e + 2 * pad - k) / stride + 1);
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            kernel: k,
            stride,
            pad,
            in_dims: xs[1..].to_vec(),
            out_dims: out_dims.clone(),
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let npos = geom.out_positions();
        let mut out = vec![T::zero(); geom.cout * npos];
        kernels::gemm(
            self.value(w).data(),
            (geom.cout, geom.patch_len()),
            false,
            &cols,
            (geom.patch_len(), npos),
            false,
            &mut out,
            T::zero(),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, chunk) in out.chunks_mut(npos).enumerate() {
                for v in chunk {
                    *v += bias[co];
                }
            }
        }
        let mut shape = vec![geom.cout];
        shape.extend(out_dims);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Op::Conv { x, w, b, geom }, Tensor::new(shape, out)?, ng)
    }

    /// Bilinear lookup of `plane` `[c, h, w]` at continuous texel coordinates
    /// `(row, col)`; integer coordinates are texel centers. Returns `[n, c]`.
    ///
    /// Differentiable with respect to the plane only.
    pub fn gather2d(&mut self, plane: Var, coords: &[[T; 2]], boundary: Boundary) -> Result<Var> {
        let ps = self.shape(plane).to_vec();
        if ps.len() != 3 || ps[1] == 0 || ps[2] == 0 {
            return shape_err("bilinear-gather", format!("plane must be [c, h, w], got {ps:?}"));
        }
        let (c, h, w) = (ps[0], ps[1], ps[2]);
        let taps: Vec<Taps<T>> = coords
            .iter()
            .map(|&[r, col]| kernels::bilinear_taps(r, col, h, w, boundary))
            .collect();
        let src = self.value(plane).data();
        let hw = h * w;
        let mut out = vec![T::zero(); coords.len() * c];
        for (t, row) in taps.iter().zip(out.chunks_mut(c)) {
            for k in 0..4 {
                if t.idx[k] == NO_TAP {
                    continue;
                }
                let (i, wk) = (t.idx[k] as usize, t.w[k]);
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += wk * src[ch * hw + i];
                }
            }
        }
        let ng = self.ng(plane);
        self.push(
            Op::Gather { plane, taps, channels: c },
            Tensor::new(vec![coords.len(), c], out)?,
            ng,
        )
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return shape_err(op, format!("axis {axis} out of range for {s:?}"));
        }
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean-pool-axis" } else { "sum-axis" };
        let (outer, n, inner) = self.axis_split(name, x, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean && n > 0 {
            let inv = T::one() / T::from_usize(n);
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        let ng = self.ng(x);
        self.push(Op::SumAxis { x, outer, n, inner, mean }, Tensor::new(shape, out)?, ng)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(Op::SumAll(x), v, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::from_usize(n))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return shape_err("concat", format!("axis {axis} out of range for {s0:?}"));
        }
        let mut total = 0;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != s0[i]) {
                return shape_err("concat", format!("{s0:?} vs {s:?} along axis {axis}"));
            }
            spec.push((p, s[axis]));
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, n) in &spec {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat { parts: spec, outer, inner }, Tensor::new(shape, out)?, ng)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(op, v, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Repeats size-1 axes of `x` to reach `shape` (ranks must match).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x).to_vec();
        if from.len() != shape.len() || from.iter().zip(shape).any(|(&f, &t)| f != t && f != 1) {
            return shape_err("broadcast", format!("{from:?} -> {shape:?}"));
        }
        let st = kernels::broadcast_strides(&from, shape);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(shape.iter().product());
        kernels::walk(shape, &st, 0, 0, &mut |off| out.push(src[off]));
        let ng = self.ng(x);
        self.push(Op::Broadcast(x), Tensor::new(shape.to_vec(), out)?, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        self.push(Op::Reshape(x), v, ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of {} axes", s.len()));
        }
        let (shape, data) = kernels::permute(self.value(x).data(), &s, perm);
        let ng = self.ng(x);
        self.push(Op::Permute { x, perm: perm.to_vec() }, Tensor::new(shape, data)?, ng)
    }

    /// 2× bilinear upsampling of the last two axes (half-texel aligned).
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
            return shape_err("upsample2d", format!("need [.., h, w], got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead = s[..s.len() - 2].iter().product();
        let out = kernels::upsample2x_forward(self.value(x).data(), lead, h, w);
        let mut shape = s;
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let ng = self.ng(x);
        self.push(Op::Upsample2x { x, lead, h, w }, Tensor::new(shape, out)?, ng)
    }

    /// Selects rows of a rank-2 `table`.
    pub fn index_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("index-rows", format!("table must be rank 2, got {s:?}"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return shape_err("index-rows", format!("row {bad} out of {}", s[0]));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Op::IndexRows { table, rows: rows.to_vec() },
            Tensor::new(vec![rows.len(), d], out)?,
            ng,
        )
    }

    /// Sum of squared differences between vertically and horizontally
    /// adjacent entries over the last two axes.
    pub fn total_variation(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err("total-variation", format!("need [.., h, w], got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let lead = s[..s.len() - 2].iter().product();
        let d = self.value(x).data();
        let mut acc = T::zero();
        for l in 0..lead {
            let p = &d[l * h * w..(l + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = p[i * w + j];
                    if i > 0 {
                        let e = v - p[(i - 1) * w + j];
                        acc += e * e;
                    }
                    if j > 0 {
                        let e = v - p[i * w + j - 1];
                        acc += e * e;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::TotalVariation { x, lead, h, w }, Tensor::scalar(acc), ng)
    }

    /// Mask-weighted mean of equally shaped `[c, ...]` inputs; `masks[i]` has
    /// the input shape without its leading axis. Positions covered by no mask
    /// average to zero. The result does not depend on the order of `parts`.
    pub fn masked_mean(&mut self, parts: &[Var], masks: &[Tensor<T>]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("masked-mean", "no inputs");
        };
        if masks.len() != parts.len() {
            return shape_err("masked-mean", format!("{} inputs, {} masks", parts.len(), masks.len()));
        }
        let s = self.shape(first).to_vec();
        if s.is_empty() {
            return shape_err("masked-mean", "inputs must have a leading channel axis");
        }
        let positions: usize = s[1..].iter().product();
        for (&p, m) in parts.iter().zip(masks) {
            if self.shape(p) != s.as_slice() || m.shape() != &s[1..] {
                return shape_err("masked-mean", format!("input {:?} / mask {:?} vs {s:?}", self.shape(p), m.shape()));
            }
        }
        let c = s[0];
        let mut counts = vec![T::zero(); positions];
        // order-independent sum: sorted mask totals
        let mut scratch: Vec<T> = Vec::with_capacity(parts.len());
        for (pos, cnt) in counts.iter_mut().enumerate() {
            scratch.clear();
            scratch.extend(masks.iter().map(|m| m.data()[pos]));
            *cnt = sorted_sum(&mut scratch);
        }
        let weights: Vec<Arc<Vec<T>>> = masks
            .iter()
            .map(|m| {
                Arc::new(
                    m.data()
                        .iter()
                        .zip(&counts)
                        .map(|(&mk, &n)| if n > T::zero() { mk / n } else { T::zero() })
                        .collect(),
                )
            })
            .collect();
        let mut out = vec![T::zero(); c * positions];
        for ch in 0..c {
            for pos in 0..positions {
                scratch.clear();
                for (&p, wgt) in parts.iter().zip(&weights) {
                    let wv = wgt[pos];
                    if wv != T::zero() {
                        scratch.push(wv * self.value(p).data()[ch * positions + pos]);
                    }
                }
                out[ch * positions + pos] = sorted_sum(&mut scratch);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Op::MaskedMean { parts: parts.to_vec(), weights, channels: c },
            Tensor::new(s, out)?,
            ng,
        )
    }

    /// `y[.., i] = Σ_{j<i} x[.., j]` along the last axis.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some(&n) = s.last() else {
            return shape_err("cumsum-exclusive", "rank-0 input");
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        if n > 0 {
            for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
                let mut acc = T::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = acc;
                    acc += v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(Op::CumsumExclusive { x, n }, Tensor::new(s, out)?, ng)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                node: loss.0,
                shape: v.shape().to_vec(),
            });
        }
        self.backward_with(vec![(loss, Tensor::full(v.shape().to_vec(), T::one()))])
    }

    /// Reverse pass seeded with explicit output cotangents (for chaining
    /// tapes: the seeds are gradients computed on a downstream tape).
    pub fn backward_with(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(AutodiffError::SeedShape {
                    node: v.0,
                    got: g.shape().to_vec(),
                    expected: self.shape(v).to_vec(),
                });
            }
            top = top.max(v.0 + 1);
            accumulate(&mut grads, v, g);
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for id in (0..top).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            accumulate(grads, v, g);
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.send(grads, *b, g.map(|v| -v));
                }
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = zip_with(&g, self.value(*b), |p, q| p * q);
                    self.send(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = zip_with(&g, self.value(*a), |p, q| p * q);
                    self.send(grads, *b, gb);
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (va.shape(), vb.shape());
                let m = g.shape()[0];
                let n = g.shape()[1];
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    if !*ta {
                        kernels::gemm(g.data(), (m, n), false, vb.data(), (sb[0], sb[1]), !*tb, &mut ga, T::zero());
                    } else {
                        kernels::gemm(vb.data(), (sb[0], sb[1]), *tb, g.data(), (m, n), true, &mut ga, T::zero());
                    }
                    self.send(grads, *a, Tensor::new(sa.to_vec(), ga).expect("shape"));
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    if !*tb {
                        kernels::gemm(va.data(), (sa[0], sa[1]), !*ta, g.data(), (m, n), false, &mut gb, T::zero());
                    } else {
                        kernels::gemm(g.data(), (m, n), true, va.data(), (sa[0], sa[1]), *ta, &mut gb, T::zero());
                    }
                    self.send(grads, *b, Tensor::new(sb.to_vec(), gb).expect("shape"));
                }
            }
            Op::Conv { x, w, b, geom } => {
                let npos = geom.out_positions();
                let plen = geom.patch_len();
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb: Vec<T> = g.data().chunks(npos).map(|c| c.iter().copied().sum()).collect();
                        self.send(grads, *b, Tensor::new(vec![geom.cout], gb).expect("shape"));
                    }
                }
                if self.ng(*w) {
                    let cols = kernels::im2col(self.value(*x).data(), geom);
                    let mut gw = vec![T::zero(); geom.cout * plen];
                    kernels::gemm(g.data(), (geom.cout, npos), false, &cols, (plen, npos), true, &mut gw, T::zero());
                    let shape = self.shape(*w).to_vec();
                    self.send(grads, *w, Tensor::new(shape, gw).expect("shape"));
                }
                if self.ng(*x) {
                    let mut gcols = vec![T::zero(); plen * npos];
                    kernels::gemm(self.value(*w).data(), (geom.cout, plen), true, g.data(), (geom.cout, npos), false, &mut gcols, T::zero());
                    let gx = kernels::col2im(&gcols, geom);
                    let shape = self.shape(*x).to_vec();
                    self.send(grads, *x, Tensor::new(shape, gx).expect("shape"));
                }
            }
            Op::Gather { plane, taps, channels } => {
                let shape = self.shape(*plane).to_vec();
                let hw = shape[1] * shape[2];
                let mut gp = vec![T::zero(); channels * hw];
                for (t, row) in taps.iter().zip(g.data().chunks(*channels)) {
                    for k in 0..4 {
                        if t.idx[k] == NO_TAP {
                            continue;
                        }
                        let (i, wk) = (t.idx[k] as usize, t.w[k]);
                        for (ch, &gv) in row.iter().enumerate() {
                            gp[ch * hw + i] += wk * gv;
                        }
                    }
                }
                self.send(grads, *plane, Tensor::new(shape, gp).expect("shape"));
            }
            Op::SumAxis { x, outer, n, inner, mean } => {
                let scale = if *mean { T::one() / T::from_usize((*n).max(1)) } else { T::one() };
                let gd = g.data();
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..*outer {
                    let row = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..*n {
                        gx.extend(row.iter().map(|&v| v * scale));
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::full(shape, gv));
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let gd = g.data();
                let mut offset = 0;
                for &(p, n) in parts {
                    if self.ng(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        let shape = self.shape(p).to_vec();
                        self.send(grads, p, Tensor::new(shape, gp).expect("shape"));
                    }
                    offset += n;
                }
            }
            Op::Relu(x) => {
                let gx = zip_with(&g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.send(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = zip_with(&g, self.value(*x), |gv, xv| gv * sigmoid(xv));
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_with(&g, out, |gv, y| gv * y * (T::one() - y));
                self.send(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = zip_with(&g, out, |gv, y| gv * (T::one() - y * y));
                self.send(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = zip_with(&g, out, |gv, y| gv * y);
                self.send(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = zip_with(&g, self.value(*x), |gv, xv| gv / xv);
                self.send(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let gx = zip_with(&g, self.value(*x), |gv, xv| two * xv * gv);
                self.send(grads, *x, gx);
            }
            Op::Broadcast(x) => {
                let from = self.shape(*x).to_vec();
                let st = kernels::broadcast_strides(&from, g.shape());
                let mut gx = vec![T::zero(); from.iter().product()];
                let mut it = g.data().iter();
                kernels::walk(g.shape(), &st, 0, 0, &mut |off| {
                    gx[off] += *it.next().expect("gradient length");
                });
                self.send(grads, *x, Tensor::new(from, gx).expect("shape"));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, g.reshaped(shape).expect("shape"));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
                self.send(grads, *x, Tensor::new(shape, data).expect("shape"));
            }
            Op::Upsample2x { x, lead, h, w } => {
                let gx = kernels::upsample2x_backward(g.data(), *lead, *h, *w);
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
            Op::IndexRows { table, rows } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let mut gt = vec![T::zero(); shape[0] * d];
                for (&r, row) in rows.iter().zip(g.data().chunks(d)) {
                    for (dst, &v) in gt[r * d..(r + 1) * d].iter_mut().zip(row) {
                        *dst += v;
                    }
                }
                self.send(grads, *table, Tensor::new(shape, gt).expect("shape"));
            }
            Op::TotalVariation { x, lead, h, w } => {
                let gv = g.item();
                let two = T::from_f64(2.0) * gv;
                let d = self.value(*x).data();
                let mut gx = vec![T::zero(); d.len()];
                let (h, w) = (*h, *w);
                for l in 0..*lead {
                    let base = l * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let at = base + i * w + j;
                            if i > 0 {
                                let e = two * (d[at] - d[at - w]);
                                gx[at] += e;
                                gx[at - w] -= e;
                            }
                            if j > 0 {
                                let e = two * (d[at] - d[at - 1]);
                                gx[at] += e;
                                gx[at - 1] -= e;
                            }
                        }
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
            Op::MaskedMean { parts, weights, channels } => {
                let positions = g.len() / channels;
                for (&p, wgt) in parts.iter().zip(weights) {
                    if !self.ng(p) {
                        continue;
                    }
                    let mut gp = g.data().to_vec();
                    for ch in 0..*channels {
                        for (v, &wv) in gp[ch * positions..(ch + 1) * positions].iter_mut().zip(wgt.iter()) {
                            *v *= wv;
                        }
                    }
                    let shape = self.shape(p).to_vec();
                    self.send(grads, p, Tensor::new(shape, gp).expect("shape"));
                }
            }
            Op::CumsumExclusive { x, n } => {
                let mut gx = vec![T::zero(); g.len()];
                if *n > 0 {
                    for (row, dst) in g.data().chunks(*n).zip(gx.chunks_mut(*n)) {
                        let mut acc = T::zero();
                        for j in (0..*n).rev() {
                            dst[j] = acc;
                            acc += row[j];
                        }
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::new(shape, gx).expect("shape"));
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Sum that is invariant to the order of `values` (sorted by total order).
fn sorted_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values.iter().copied().sum()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
