use std::sync::Arc;

use super::kernels::{
    axis_split, broadcast_shapes, broadcast_source_index, col2im, gemm, im2col, permute_source_index, sigmoid,
    softplus, ConvDims,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Sentinel in scatter index tables marking an element that is dropped.
pub const DROPPED: u32 = u32::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Log(Var),
    Exp(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ScatterAdd(Var, Arc<Vec<u32>>),
    LiftSplat {
        feat: Var,
        depth: Var,
        cells: Arc<Vec<u32>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves that require them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unary_map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// A constant input; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Brings `a` and `b` to a common shape, inserting broadcast nodes.
    fn align(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let out = broadcast_shapes(&sa, &sb).ok_or_else(|| Error::shape(op, &sa, &sb))?;
        let a = if sa != out { self.broadcast_to(a, &out)? } else { a };
        let b = if sb != out { self.broadcast_to(b, &out)? } else { b };
        Ok((a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (a, b) = self.align(a, b, name)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = unary_map(self.value(x), |v| scale * v + shift);
        self.unary(x, value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x: (N, C, H, W)` with `w: (O, C, kh, kw)` plus an
    /// optional per-channel bias `b: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let dims = ConvDims::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [dims.out_c] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[dims.out_c]));
            }
        }
        let (rows, cols_n) = (dims.col_rows(), dims.col_cols());
        let in_plane = dims.c * dims.h * dims.w;
        let out_plane = dims.out_c * cols_n;
        let mut out = vec![0.0; dims.n * out_plane];
        let mut cols = vec![0.0; rows * cols_n];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for n in 0..dims.n {
            im2col(&xv[n * in_plane..(n + 1) * in_plane], &dims, &mut cols);
            gemm(
                dims.out_c,
                rows,
                cols_n,
                wv,
                false,
                &cols,
                false,
                &mut out[n * out_plane..(n + 1) * out_plane],
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for n in 0..dims.n {
                for (o, bias) in bv.iter().enumerate() {
                    let start = n * out_plane + o * cols_n;
                    for v in &mut out[start..start + cols_n] {
                        *v += bias;
                    }
                }
            }
        }
        let value = Tensor::new(&[dims.n, dims.out_c, dims.oh, dims.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, dims }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), |v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), softplus);
        self.unary(x, value, Op::Softplus(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), f64::ln);
        self.unary(x, value, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = unary_map(self.value(x), |v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = unary_map(self.value(x), |v| v.powf(p));
        self.unary(x, value, Op::Powf(x, p))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = unary_map(self.value(x), |v| v.clamp(lo, hi));
        self.unary(x, value, Op::Clamp(x, lo, hi))
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn softmax_value(x: &Tensor, axis: usize, log: bool) -> Tensor {
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for d in 0..n {
                    mx = mx.max(src[base + d * inner]);
                }
                let mut z = 0.0;
                for d in 0..n {
                    z += (src[base + d * inner] - mx).exp();
                }
                if log {
                    let lz = z.ln();
                    for d in 0..n {
                        out[base + d * inner] = src[base + d * inner] - mx - lz;
                    }
                } else {
                    for d in 0..n {
                        out[base + d * inner] = (src[base + d * inner] - mx).exp() / z;
                    }
                }
            }
        }
        Tensor::new(x.shape(), out).expect("same shape")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let value = Self::softmax_value(self.value(x), axis, false);
        Ok(self.unary(x, value, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let value = Self::softmax_value(self.value(x), axis, true);
        Ok(self.unary(x, value, Op::LogSoftmax(x, axis)))
    }

    fn reduce_axis(x: &Tensor, axis: usize, scale: f64) -> Tensor {
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..n {
                let row = &src[(o * n + d) * inner..(o * n + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if scale != 1.0 {
            for v in &mut out {
                *v *= scale;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Tensor::new(&shape, out).expect("reduced shape")
    }

    /// Sums over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum")?;
        let value = Self::reduce_axis(self.value(x), axis, 1.0);
        Ok(self.unary(x, value, Op::Sum(x, axis)))
    }

    /// Averages over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean")?;
        let n = self.shape(x)[axis].max(1) as f64;
        let value = Self::reduce_axis(self.value(x), axis, 1.0 / n);
        Ok(self.unary(x, value, Op::Mean(x, axis)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.unary(x, Tensor::scalar(s), Op::MeanAll(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(x, axis, "slice")?;
        let shape = self.shape(x).to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut s = shape;
        s[axis] = end - start;
        let value = Tensor::new(&s, out)?;
        Ok(self.unary(x, value, Op::Slice { x, axis, start }))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        match broadcast_shapes(&src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast", &src, shape)),
        }
        let idx = broadcast_source_index(&src, shape);
        let d = self.value(x).data();
        let out = idx.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::Broadcast(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let mut seen = vec![false; src.len()];
        if axes.len() != src.len()
            || axes
                .iter()
                .any(|&a| a >= src.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &src, axes));
        }
        let idx = permute_source_index(&src, axes);
        let d = self.value(x).data();
        let out = idx.iter().map(|&i| d[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.unary(x, value, Op::Permute(x, axes.to_vec())))
    }

    /// Sums the rows `x[n, ...]` into `out[indices[n], ...]`, where `out` has
    /// `target` rows. Rows whose index is [`DROPPED`] are discarded.
    pub fn scatter_add(&mut self, x: Var, indices: Arc<Vec<u32>>, target: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != indices.len() {
            return Err(Error::shape("scatter_add", &shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i != DROPPED && i as usize >= target) {
            return Err(Error::Contract(format!(
                "scatter_add index {bad} out of range for {target} rows"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![0.0; target * inner];
        for (n, &i) in indices.iter().enumerate() {
            if i == DROPPED {
                continue;
            }
            let dst = &mut out[i as usize * inner..(i as usize + 1) * inner];
            for (o, v) in dst.iter_mut().zip(&d[n * inner..(n + 1) * inner]) {
                *o += v;
            }
        }
        let mut s = shape;
        s[0] = target;
        let value = Tensor::new(&s, out)?;
        Ok(self.unary(x, value, Op::ScatterAdd(x, indices)))
    }

    /// Fused lift and splat. `feat: (K, C, Hf, Wf)` and `depth: (K, D, Hf, Wf)`
    /// form the frustum features `depth[k,d,h,w] * feat[k,:,h,w]`, which are
    /// summed into the BEV cell `cells[((k*D + d)*Hf + h)*Wf + w]`. Output is
    /// `(C, rows, cols)`.
    pub fn lift_splat(&mut self, feat: Var, depth: Var, cells: Arc<Vec<u32>>, rows: usize, cols: usize) -> Result<Var> {
        let (fs, ds) = (self.shape(feat).to_vec(), self.shape(depth).to_vec());
        if fs.len() != 4 || ds.len() != 4 || fs[0] != ds[0] || fs[2] != ds[2] || fs[3] != ds[3] {
            return Err(Error::shape("lift_splat", &fs, &ds));
        }
        let (k, c, hf, wf) = (fs[0], fs[1], fs[2], fs[3]);
        let nd = ds[1];
        if cells.len() != k * nd * hf * wf {
            return Err(Error::shape("lift_splat cells", &ds, &[cells.len()]));
        }
        let n_cells = rows * cols;
        if let Some(&bad) = cells.iter().find(|&&i| i != DROPPED && i as usize >= n_cells) {
            return Err(Error::Contract(format!("lift_splat cell {bad} out of range")));
        }
        let feat_t = channels_last(self.value(feat).data(), k, c, hf * wf);
        let dv = self.value(depth).data();
        let mut acc = vec![0.0; n_cells * c];
        let plane = hf * wf;
        for kk in 0..k {
            for d in 0..nd {
                for p in 0..plane {
                    let flat = (kk * nd + d) * plane + p;
                    let cell = cells[flat];
                    if cell == DROPPED {
                        continue;
                    }
                    let wgt = dv[flat];
                    let src = &feat_t[(kk * plane + p) * c..(kk * plane + p + 1) * c];
                    let dst = &mut acc[cell as usize * c..(cell as usize + 1) * c];
                    for (o, f) in dst.iter_mut().zip(src) {
                        *o += wgt * f;
                    }
                }
            }
        }
        let out = channels_first(&acc, n_cells, c);
        let value = Tensor::new(&[c, rows, cols], out)?;
        let rg = self.rg(feat) || self.rg(depth);
        Ok(self.push(value, Op::LiftSplat { feat, depth, cells }, rg))
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape(), data).expect("same shape")
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.accum(grads, *b, g.clone());
                }
                self.accum(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.accum(grads, *b, g.map(|v| -v));
                }
                self.accum(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, zip_map(&g, val(*b), &|gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accum(grads, *b, zip_map(&g, val(*a), &|gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, zip_map(&g, val(*b), &|gv, bv| gv / bv));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -y / b
                    let gy = zip_map(&g, y, &|gv, yv| gv * yv);
                    self.accum(grads, *b, zip_map(&gy, val(*b), &|t, bv| -t / bv));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accum(grads, *x, g.map(|v| v * s));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, false);
                    self.accum(grads, *a, Tensor::new(&[m, k], ga)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, false);
                    self.accum(grads, *b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Conv2d { x, w, b, dims } => self.conv_backward(*x, *w, *b, dims, &g, grads)?,
            Op::Relu(x) => {
                self.accum(
                    grads,
                    *x,
                    zip_map(&g, val(*x), &|gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Sigmoid(x) => {
                self.accum(grads, *x, zip_map(&g, y, &|gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Softplus(x) => {
                self.accum(grads, *x, zip_map(&g, val(*x), &|gv, xv| gv * sigmoid(xv)));
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for d in 0..n {
                            dot += gd[base + d * inner] * yd[base + d * inner];
                        }
                        for d in 0..n {
                            let j = base + d * inner;
                            out[j] = yd[j] * (gd[j] - dot);
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), out)?);
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut total = 0.0;
                        for d in 0..n {
                            total += gd[base + d * inner];
                        }
                        for d in 0..n {
                            let j = base + d * inner;
                            out[j] = gd[j] - yd[j].exp() * total;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape(), out)?);
            }
            Op::Log(x) => self.accum(grads, *x, zip_map(&g, val(*x), &|gv, xv| gv / xv)),
            Op::Exp(x) => self.accum(grads, *x, zip_map(&g, y, &|gv, yv| gv * yv)),
            Op::Square(x) => self.accum(grads, *x, zip_map(&g, val(*x), &|gv, xv| 2.0 * gv * xv)),
            Op::Powf(x, p) => {
                let p = *p;
                self.accum(grads, *x, zip_map(&g, val(*x), &|gv, xv| gv * p * xv.powf(p - 1.0)));
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accum(
                    grads,
                    *x,
                    zip_map(&g, val(*x), &|gv, xv| if xv >= lo && xv <= hi { gv } else { 0.0 }),
                );
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let xs = val(*x).shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                let gd = g.data();
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for d in 0..n {
                        let dst = &mut out[(o * n + d) * inner..(o * n + d + 1) * inner];
                        for (t, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *t = s * scale;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accum(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let n = val(*x).len().max(1) as f64;
                let gv = g.data()[0] / n;
                self.accum(grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let gd = g.data();
                let mut offset = 0;
                for &x in xs {
                    let xs_shape = val(x).shape();
                    let n = xs_shape[*axis];
                    if self.rg(x) {
                        let mut out = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            out.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        self.accum(grads, x, Tensor::new(xs_shape, out)?);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let m = y.shape()[*axis];
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    out[dst..dst + m * inner].copy_from_slice(&g.data()[o * m * inner..(o + 1) * m * inner]);
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Broadcast(x) => {
                let xs = val(*x).shape();
                let idx = broadcast_source_index(xs, y.shape());
                let mut out = vec![0.0; val(*x).len()];
                for (gv, &i) in g.data().iter().zip(&idx) {
                    out[i] += gv;
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Reshape(x) => {
                let xs = val(*x).shape().to_vec();
                self.accum(grads, *x, g.reshape(&xs)?);
            }
            Op::Permute(x, axes) => {
                let xs = val(*x).shape();
                let idx = permute_source_index(xs, axes);
                let mut out = vec![0.0; g.len()];
                for (gv, &i) in g.data().iter().zip(&idx) {
                    out[i] = *gv;
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::ScatterAdd(x, indices) => {
                let xs = val(*x).shape();
                let inner: usize = xs[1..].iter().product();
                let gd = g.data();
                let mut out = vec![0.0; val(*x).len()];
                for (n, &i) in indices.iter().enumerate() {
                    if i == DROPPED {
                        continue;
                    }
                    out[n * inner..(n + 1) * inner].copy_from_slice(&gd[i as usize * inner..(i as usize + 1) * inner]);
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::LiftSplat { feat, depth, cells } => {
                self.lift_splat_backward(*feat, *depth, cells, &g, grads)?;
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: &ConvDims,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (rows, cols_n) = (dims.col_rows(), dims.col_cols());
        let in_plane = dims.c * dims.h * dims.w;
        let out_plane = dims.out_c * cols_n;
        let gd = g.data();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gw = vec![0.0; wv.len()];
        let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut cols = vec![0.0; rows * cols_n];
        for n in 0..dims.n {
            let gy = &gd[n * out_plane..(n + 1) * out_plane];
            if need_w {
                im2col(&xv[n * in_plane..(n + 1) * in_plane], dims, &mut cols);
                gemm(dims.out_c, cols_n, rows, gy, false, &cols, true, &mut gw, true);
            }
            if need_x {
                gemm(rows, dims.out_c, cols_n, wv, true, gy, false, &mut cols, false);
                col2im(&cols, dims, &mut gx[n * in_plane..(n + 1) * in_plane]);
            }
        }
        if need_w {
            self.accum(grads, w, Tensor::new(self.shape(w), gw)?);
        }
        if need_x {
            self.accum(grads, x, Tensor::new(self.shape(x), gx)?);
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut gb = vec![0.0; dims.out_c];
                for n in 0..dims.n {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        let start = n * out_plane + o * cols_n;
                        *acc += gd[start..start + cols_n].iter().sum::<f64>();
                    }
                }
                self.accum(grads, b, Tensor::new(&[dims.out_c], gb)?);
            }
        }
        Ok(())
    }

    fn lift_splat_backward(
        &self,
        feat: Var,
        depth: Var,
        cells: &[u32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let fs = self.shape(feat).to_vec();
        let ds = self.shape(depth).to_vec();
        let (k, c, hf, wf) = (fs[0], fs[1], fs[2], fs[3]);
        let nd = ds[1];
        let plane = hf * wf;
        let n_cells = g.len() / c;
        let g_t = channels_last(g.data(), 1, c, n_cells);
        let feat_t = channels_last(self.value(feat).data(), k, c, plane);
        let dv = self.value(depth).data();
        let need_f = self.rg(feat);
        let need_d = self.rg(depth);
        let mut gfeat_t = if need_f { vec![0.0; feat_t.len()] } else { Vec::new() };
        let mut gdepth = if need_d { vec![0.0; dv.len()] } else { Vec::new() };
        for kk in 0..k {
            for d in 0..nd {
                for p in 0..plane {
                    let flat = (kk * nd + d) * plane + p;
                    let cell = cells[flat];
                    if cell == DROPPED {
                        continue;
                    }
                    let up = &g_t[cell as usize * c..(cell as usize + 1) * c];
                    let fo = (kk * plane + p) * c;
                    if need_d {
                        gdepth[flat] = up.iter().zip(&feat_t[fo..fo + c]).map(|(a, b)| a * b).sum();
                    }
                    if need_f {
                        let wgt = dv[flat];
                        for (t, u) in gfeat_t[fo..fo + c].iter_mut().zip(up) {
                            *t += wgt * u;
                        }
                    }
                }
            }
        }
        if need_f {
            let gf = channels_first_batched(&gfeat_t, k, plane, c);
            self.accum(grads, feat, Tensor::new(&fs, gf)?);
        }
        if need_d {
            self.accum(grads, depth, Tensor::new(&ds, gdepth)?);
        }
        Ok(())
    }
}

/// `(K, C, P)` -> `(K, P, C)`.
fn channels_last(src: &[f64], k: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for kk in 0..k {
        for ch in 0..c {
            let s = &src[(kk * c + ch) * p..(kk * c + ch + 1) * p];
            for (pi, v) in s.iter().enumerate() {
                out[(kk * p + pi) * c + ch] = *v;
            }
        }
    }
    out
}

/// `(P, C)` -> `(C, P)`.
fn channels_first(src: &[f64], p: usize, c: usize) -> Vec<f64> {
    channels_first_batched(src, 1, p, c)
}

/// `(K, P, C)` -> `(K, C, P)`.
fn channels_first_batched(src: &[f64], k: usize, p: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for kk in 0..k {
        for pi in 0..p {
            for ch in 0..c {
                out[(kk * c + ch) * p + pi] = src[(kk * p + pi) * c + ch];
            }
        }
    }
    out
}
