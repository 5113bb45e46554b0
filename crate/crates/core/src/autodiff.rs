//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends one node holding its output value plus whatever the
//! backward pass needs. Nodes only reference earlier nodes, so the tape is
//! topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep. Values on the tape are never mutated after they are pushed.

use crate::error::{MorError, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { base: Var, rows: Var, idx: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Operation recorder. One tape per forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    macs: u64,
    nonlinear_evals: u64,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
            nonlinear_evals: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by `matmul` so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Elements pushed through softmax, layernorm, GELU and sigmoid.
    pub fn nonlinear_evals(&self) -> u64 {
        self.nonlinear_evals
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`, if `v` is
    /// a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(MorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(MorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        Broadcast::new(self.shape(a), self.shape(b)).ok_or_else(|| MorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })
    }

    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("add", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bc.len());
        bc.for_each(|_, ia, ib| out.push(x[ia] + y[ib]));
        let value = Tensor::new(&bc.out, out)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    /// Elementwise product with trailing-dimension broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("mul", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bc.len());
        bc.for_each(|_, ia, ib| out.push(x[ia] * y[ib]));
        let value = Tensor::new(&bc.out, out)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(Op::AddScalar(a), value, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(x.shape(), data).expect("same shape");
        self.push(Op::Scale(a, c), value, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(Op::Transpose(a), value, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(a).data().to_vec()).map_err(|_| MorError::Shape {
            op: "reshape",
            lhs: self.shape(a).to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(Op::Reshape(a), value, &[a]))
    }

    /// Columns `start..start + len` of a matrix, copied.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start + len > n {
            return Err(MorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(&[m, len], out)?;
        Ok(self.push(Op::SliceCols { x: a, start }, value, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| MorError::Invalid("concat_cols: no inputs".into()))?;
        let (m, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != m {
                return Err(MorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| MorError::Invalid("concat_rows: no inputs".into()))?;
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(MorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            m += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Rows of `x` in `idx` order. Backward scatters into the source rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MorError::Index {
                op: "gather_rows",
                index: bad,
                len: m,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[idx.len(), n], out)?;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, value, &[x]))
    }

    /// Copy of `base` where row `idx[j]` becomes `base[idx[j]] + rows[j]`.
    /// Rows not named in `idx` are copied bit-for-bit.
    pub fn index_add_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("index_add_rows", base)?;
        let (r, c) = self.dims2("index_add_rows", rows)?;
        if c != n || r != idx.len() {
            return Err(MorError::Shape {
                op: "index_add_rows",
                lhs: self.shape(base).to_vec(),
                rhs: self.shape(rows).to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MorError::Index {
                op: "index_add_rows",
                index: bad,
                len: m,
            });
        }
        let mut out = self.value(base).data().to_vec();
        let add = self.value(rows).data();
        for (j, &i) in idx.iter().enumerate() {
            for (o, &a) in out[i * n..(i + 1) * n].iter_mut().zip(&add[j * n..(j + 1) * n]) {
                *o += a;
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            Op::IndexAddRows {
                base,
                rows,
                idx: idx.to_vec(),
            },
            value,
            &[base, rows],
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        if n == 0 {
            return Err(MorError::Invalid("softmax_rows: zero-width rows".into()));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - max).exp();
                total += *ov;
            }
            for ov in o.iter_mut() {
                *ov /= total;
            }
        }
        self.nonlinear_evals += (m * n) as u64;
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::SoftmaxRows(x), value, &[x]))
    }

    /// Per-row normalization to zero mean and unit (biased) variance,
    /// followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.dims2("layernorm", x)?;
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(MorError::Shape {
                    op: "layernorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if d == 0 {
            return Err(MorError::Invalid("layernorm: zero-width rows".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::from_f64(d as f64);
        let mut xhat = vec![T::zero(); m * d];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        self.nonlinear_evals += (m * d) as u64;
        let value = Tensor::new(&[m, d], out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
            &[x, gain, bias],
        ))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T, counted: bool) -> Var {
        let t = self.value(x);
        let data: Vec<T> = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        if counted {
            self.nonlinear_evals += value.len() as u64;
        }
        self.push(op, value, &[x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| v * normal_cdf(v), true)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid, true)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()), false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64(t.len().max(1) as f64);
        let s = t.data().iter().copied().sum::<T>() / n;
        self.push(Op::Mean(x), Tensor::scalar(s), &[x])
    }

    /// Softmax cross-entropy of `logits[B×C]` against `labels`, averaged
    /// over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(MorError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MorError::Label { label: bad, classes: c });
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * c..(i + 1) * c];
            let (argmax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // log Σ exp(x - max) = ln(1 + Σ_{j≠argmax} exp(x_j - max))
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != argmax)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let denom = T::one() + rest;
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / denom;
            }
            total += (max - row[label]) + rest.ln_1p();
        }
        let loss = total / T::from_f64(b as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Fails if any element of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(MorError::NonFinite(what.to_string()))
        }
    }

    /// Reverse sweep from a scalar `loss`. Fills the `grad` slot of every
    /// leaf that requires grad (zeros when the leaf did not influence `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(MorError::Invalid("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(MorError::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| matmul_bt_into(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, |ga| bc.for_each(|o, ia, _| ga[ia] += g[o]));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, |gb| bc.for_each(|o, _, ib| gb[ib] += g[o]));
                }
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, |ga| bc.for_each(|o, ia, ib| ga[ia] += g[o] * bv[ib]));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, |gb| bc.for_each(|o, ia, ib| gb[ib] += g[o] * av[ia]));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *c;
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = out_shape[1];
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        add_into(&mut gx[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out_shape[1];
                self.accumulate(grads, *x, |gx| {
                    for (j, &r) in idx.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[j * n..(j + 1) * n]);
                    }
                });
            }
            Op::IndexAddRows { base, rows, idx } => {
                let n = out_shape[1];
                self.accumulate(grads, *base, |gb| add_into(gb, g));
                self.accumulate(grads, *rows, |gr| {
                    for (j, &r) in idx.iter().enumerate() {
                        add_into(&mut gr[j * n..(j + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = (out_shape[0], out_shape[1]);
                let gv = self.value(*gain).data();
                let dn = T::from_f64(d as f64);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..m {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gv[j];
                        }
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        let scale = inv_std[i] / dn;
                        for j in 0..d {
                            gx[i * d + j] += scale * (dn * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for i in 0..m {
                        add_into(gb, &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        *o += gi * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &s), &gi) in gx.iter_mut().zip(y).zip(g) {
                        *o += gi * s * (T::one() - s);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len().max(1) as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn normal_cdf<T: Real>(v: T) -> T {
    T::from_f64(0.5 * (1.0 + libm::erf(v.as_f64() / std::f64::consts::SQRT_2)))
}

fn normal_pdf<T: Real>(v: T) -> T {
    let x = v.as_f64();
    T::from_f64((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

/// Index mapping for numpy-style broadcasting of two shapes aligned on their
/// trailing dimensions.
#[derive(Debug, Clone)]
struct Broadcast {
    out: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            });
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                st[d] = if s[d] == 1 { 0 } else { acc };
                acc *= s[d];
            }
            st
        };
        Some(Self {
            stride_a: strides(&pa),
            stride_b: strides(&pb),
            out,
        })
    }

    fn len(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total = self.len();
        if total == 0 {
            return;
        }
        let rank = self.out.len();
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                counter[d] += 1;
                ia += self.stride_a[d];
                ib += self.stride_b[d];
                if counter[d] < self.out[d] {
                    break;
                }
                ia -= self.stride_a[d] * self.out[d];
                ib -= self.stride_b[d] * self.out[d];
                counter[d] = 0;
            }
        }
    }
}
