//! Recording tape and the primitive set.
//!
//! Every primitive appends one node holding its output value; `backward`
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batch of multi-head attention problems.
///
/// Queries are stored as `[groups * q_len, d]`, keys and values as
/// `[groups * k_len, d]`, with `d = heads * head_dim`. Score matrices are
/// stored as `[groups * heads * q_len, k_len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

/// Which score entries are excluded before the softmax.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnMask {
    /// Key `j` is hidden from query `i` when `j > i`. Requires `q_len == k_len`.
    pub causal: bool,
    /// `[groups * k_len]`; `false` hides that key from every query in its group.
    pub key_valid: Option<Vec<bool>>,
}

/// Additive penalty applied to masked scores.
pub const MASK_PENALTY: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Scale { a: usize, factor: T },
    Sum { a: usize },
    Gelu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<T>, rstd: Vec<T> },
    HeadScores { q: usize, k: usize, layout: HeadLayout, scale: T },
    MaskedSoftmax { x: usize },
    HeadMix { p: usize, v: usize, layout: HeadLayout },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// A single-threaded recording of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err<T>(op: &'static str, shapes: &[&[usize]]) -> Result<T> {
    Err(TensorError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() })
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a = *a + b),
        None => *dst = Some(src),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let k = T::cast_from(0.044715);
    let half = T::cast_from(0.5);
    let one = T::one();
    let three = T::cast_from(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, &[s]),
        }
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", &[self.value(a).shape(), self.value(b).shape()]);
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            self.value(a).data(),
            View::row_major(0, m, k, k),
            self.value(b).data(),
            View::row_major(0, k, n, n),
            T::zero(),
            &mut out,
            View::row_major(0, m, n, n),
        );
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(op, &[self.value(a).shape(), self.value(b).shape()]);
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a: a.0, b: b.0 }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", a)?;
        if self.value(bias).shape() != [n] {
            return shape_err("add_row", &[self.value(a).shape(), self.value(bias).shape()]);
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
        let ng = self.ng(a.0) || self.ng(bias.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow { a: a.0, bias: bias.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|x| *x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a: a.0, factor }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { a: a.0 }, ng))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return shape_err("embedding", &[self.value(table).shape(), &[0]]);
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index { op: "embedding", index: id, bound: vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table.0);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            ng,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, d) = self.dims2("layer_norm", x)?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return shape_err(
                "layer_norm",
                &[self.value(x).shape(), self.value(gain).shape(), self.value(bias).shape()],
            );
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::cast_from(LN_EPS);
        let dn = T::cast_from(d as f64);
        let mut out = vec![T::zero(); m * d];
        let mut mean = Vec::with_capacity(m);
        let mut rstd = Vec::with_capacity(m);
        for (row, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mu) * r * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let ng = self.ng(x.0) || self.ng(gain.0) || self.ng(bias.0);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, mean, rstd },
            ng,
        ))
    }

    fn check_layout(&self, op: &'static str, q: Var, k: Var, layout: HeadLayout) -> Result<usize> {
        let (qr, d) = self.dims2(op, q)?;
        let (kr, d2) = self.dims2(op, k)?;
        if d != d2
            || layout.heads == 0
            || d % layout.heads != 0
            || qr != layout.groups * layout.q_len
            || kr != layout.groups * layout.k_len
        {
            return shape_err(op, &[self.value(q).shape(), self.value(k).shape()]);
        }
        Ok(d)
    }

    /// Per-group, per-head scaled dot products `Q_h K_h^T * scale`.
    pub fn head_scores(&mut self, q: Var, k: Var, layout: HeadLayout, scale: T) -> Result<Var> {
        let d = self.check_layout("head_scores", q, k, layout)?;
        let HeadLayout { groups, q_len, k_len, heads } = layout;
        let dh = d / heads;
        let mut out = vec![T::zero(); groups * heads * q_len * k_len];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        for g in 0..groups {
            for h in 0..heads {
                gemm(
                    scale,
                    qd,
                    View::row_major(g * q_len * d + h * dh, q_len, dh, d),
                    kd,
                    View::row_major(g * k_len * d + h * dh, k_len, dh, d).transposed(),
                    T::zero(),
                    &mut out,
                    View::row_major((g * heads + h) * q_len * k_len, q_len, k_len, k_len),
                );
            }
        }
        let ng = self.ng(q.0) || self.ng(k.0);
        Ok(self.push(
            Tensor::new(vec![groups * heads * q_len, k_len], out)?,
            Op::HeadScores { q: q.0, k: k.0, layout, scale },
            ng,
        ))
    }

    /// Row softmax over attention scores after adding [`MASK_PENALTY`] to
    /// masked entries.
    pub fn masked_softmax(&mut self, scores: Var, layout: HeadLayout, mask: &AttnMask) -> Result<Var> {
        let HeadLayout { groups, q_len, k_len, heads } = layout;
        let (r, c) = self.dims2("masked_softmax", scores)?;
        if r != groups * heads * q_len || c != k_len || (mask.causal && q_len != k_len) {
            return shape_err("masked_softmax", &[self.value(scores).shape()]);
        }
        if let Some(kv) = &mask.key_valid {
            if kv.len() != groups * k_len {
                return shape_err("masked_softmax", &[self.value(scores).shape(), &[kv.len()]]);
            }
        }
        let penalty = T::cast_from(MASK_PENALTY);
        let mut out = self.value(scores).data().to_vec();
        for (ri, row) in out.chunks_exact_mut(k_len).enumerate() {
            let i = ri % q_len;
            let g = ri / (q_len * heads);
            for (j, v) in row.iter_mut().enumerate() {
                let hidden = (mask.causal && j > i)
                    || mask.key_valid.as_ref().is_some_and(|kv| !kv[g * k_len + j]);
                if hidden {
                    *v = *v + penalty;
                }
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.ng(scores.0);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::MaskedSoftmax { x: scores.0 }, ng))
    }

    /// Per-group, per-head `P_h V_h`, heads concatenated back to `[groups * q_len, d]`.
    pub fn head_mix(&mut self, p: Var, v: Var, layout: HeadLayout) -> Result<Var> {
        let HeadLayout { groups, q_len, k_len, heads } = layout;
        let (pr, pc) = self.dims2("head_mix", p)?;
        let (vr, d) = self.dims2("head_mix", v)?;
        if pr != groups * heads * q_len || pc != k_len || vr != groups * k_len || d % heads != 0 {
            return shape_err("head_mix", &[self.value(p).shape(), self.value(v).shape()]);
        }
        let dh = d / heads;
        let mut out = vec![T::zero(); groups * q_len * d];
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        for g in 0..groups {
            for h in 0..heads {
                gemm(
                    T::one(),
                    pd,
                    View::row_major((g * heads + h) * q_len * k_len, q_len, k_len, k_len),
                    vd,
                    View::row_major(g * k_len * d + h * dh, k_len, dh, d),
                    T::zero(),
                    &mut out,
                    View::row_major(g * q_len * d + h * dh, q_len, dh, d),
                );
            }
        }
        let ng = self.ng(p.0) || self.ng(v.0);
        Ok(self.push(
            Tensor::new(vec![groups * q_len, d], out)?,
            Op::HeadMix { p: p.0, v: v.0, layout },
            ng,
        ))
    }

    /// Mean cross-entropy of `[n, classes]` logits over rows whose target is
    /// `Some`. Rows with `None` are ignored; if every row is ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return shape_err("cross_entropy", &[self.value(logits).shape(), &[targets.len()]]);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, (row, pr)) in ld.chunks_exact(c).zip(probs.chunks_exact_mut(c)).enumerate() {
            let Some(t) = targets[i] else { continue };
            if t >= c {
                return Err(TensorError::Index { op: "cross_entropy", index: t, bound: c });
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in pr.iter_mut().zip(row) {
                *p = (v - mx).exp();
                z = z + *p;
            }
            for p in pr.iter_mut() {
                *p = *p / z;
            }
            total += (mx + z.ln() - row[t]).as_f64();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits.0);
        Ok(self.push(
            Tensor::scalar(T::cast_from(loss)),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        gout,
                        View::row_major(0, m, n, n),
                        bv.data(),
                        View::row_major(0, k, n, n).transposed(),
                        T::zero(),
                        &mut da,
                        View::row_major(0, m, k, k),
                    );
                    add_into(&mut grads[*a], da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        av.data(),
                        View::row_major(0, m, k, k).transposed(),
                        gout,
                        View::row_major(0, m, n, n),
                        T::zero(),
                        &mut db,
                        View::row_major(0, k, n, n),
                    );
                    add_into(&mut grads[*b], db);
                }
            }
            Op::Add { a, b } => {
                for &x in [a, b] {
                    if self.ng(x) {
                        add_into(&mut grads[x], gout.to_vec());
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.ng(*a) {
                    add_into(&mut grads[*a], gout.iter().zip(bv).map(|(g, y)| *g * *y).collect());
                }
                if self.ng(*b) {
                    add_into(&mut grads[*b], gout.iter().zip(av).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::AddRow { a, bias } => {
                if self.ng(*a) {
                    add_into(&mut grads[*a], gout.to_vec());
                }
                if self.ng(*bias) {
                    let n = self.nodes[*bias].value.len();
                    let mut db = vec![T::zero(); n];
                    for row in gout.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d = *d + *g);
                    }
                    add_into(&mut grads[*bias], db);
                }
            }
            Op::Scale { a, factor } => {
                if self.ng(*a) {
                    add_into(&mut grads[*a], gout.iter().map(|g| *g * *factor).collect());
                }
            }
            Op::Sum { a } => {
                if self.ng(*a) {
                    add_into(&mut grads[*a], vec![gout[0]; self.nodes[*a].value.len()]);
                }
            }
            Op::Gelu { a } => {
                if self.ng(*a) {
                    let x = self.nodes[*a].value.data();
                    add_into(
                        &mut grads[*a],
                        gout.iter().zip(x).map(|(g, &x)| *g * gelu_parts(x).1).collect(),
                    );
                }
            }
            Op::Embedding { table, ids } => {
                if self.ng(*table) {
                    let tv = &self.nodes[*table].value;
                    let d = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&gout[r * d..(r + 1) * d]).for_each(|(a, g)| *a = *a + *g);
                    }
                    add_into(&mut grads[*table], dt);
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = self.nodes[*x].value.data();
                let g = self.nodes[*gain].value.data();
                let d = g.len();
                let dn = T::cast_from(d as f64);
                let mut dx = if self.ng(*x) { Some(vec![T::zero(); xv.len()]) } else { None };
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, go)) in xv.chunks_exact(d).zip(gout.chunks_exact(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * rs;
                        dxhat[j] = go[j] * g[j];
                        dg[j] = dg[j] + go[j] * xhat[j];
                        db[j] = db[j] + go[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(&mut grads[*x], dx);
                }
                if self.ng(*gain) {
                    add_into(&mut grads[*gain], dg);
                }
                if self.ng(*bias) {
                    add_into(&mut grads[*bias], db);
                }
            }
            Op::HeadScores { q, k, layout, scale } => {
                let HeadLayout { groups, q_len, k_len, heads } = *layout;
                let qv = self.nodes[*q].value.data();
                let kv = self.nodes[*k].value.data();
                let d = self.nodes[*q].value.shape()[1];
                let dh = d / heads;
                let mut dq = if self.ng(*q) { Some(vec![T::zero(); qv.len()]) } else { None };
                let mut dk = if self.ng(*k) { Some(vec![T::zero(); kv.len()]) } else { None };
                for g in 0..groups {
                    for h in 0..heads {
                        let sv = View::row_major((g * heads + h) * q_len * k_len, q_len, k_len, k_len);
                        let qgh = View::row_major(g * q_len * d + h * dh, q_len, dh, d);
                        let kgh = View::row_major(g * k_len * d + h * dh, k_len, dh, d);
                        if let Some(dq) = dq.as_mut() {
                            gemm(*scale, gout, sv, kv, kgh, T::one(), dq, qgh);
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(*scale, gout, sv.transposed(), qv, qgh, T::one(), dk, kgh);
                        }
                    }
                }
                if let Some(dq) = dq {
                    add_into(&mut grads[*q], dq);
                }
                if let Some(dk) = dk {
                    add_into(&mut grads[*k], dk);
                }
            }
            Op::MaskedSoftmax { x } => {
                if self.ng(*x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(c).zip(gout.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    add_into(&mut grads[*x], dx);
                }
            }
            Op::HeadMix { p, v, layout } => {
                let HeadLayout { groups, q_len, k_len, heads } = *layout;
                let pv = self.nodes[*p].value.data();
                let vv = self.nodes[*v].value.data();
                let d = self.nodes[*v].value.shape()[1];
                let dh = d / heads;
                let mut dp = if self.ng(*p) { Some(vec![T::zero(); pv.len()]) } else { None };
                let mut dv = if self.ng(*v) { Some(vec![T::zero(); vv.len()]) } else { None };
                for g in 0..groups {
                    for h in 0..heads {
                        let pgh = View::row_major((g * heads + h) * q_len * k_len, q_len, k_len, k_len);
                        let vgh = View::row_major(g * k_len * d + h * dh, k_len, dh, d);
                        let ogh = View::row_major(g * q_len * d + h * dh, q_len, dh, d);
                        if let Some(dp) = dp.as_mut() {
                            gemm(T::one(), gout, ogh, vv, vgh.transposed(), T::one(), dp, pgh);
                        }
                        if let Some(dv) = dv.as_mut() {
                            gemm(T::one(), pv, pgh.transposed(), gout, ogh, T::one(), dv, vgh);
                        }
                    }
                }
                if let Some(dp) = dp {
                    add_into(&mut grads[*p], dp);
                }
                if let Some(dv) = dv {
                    add_into(&mut grads[*v], dv);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.ng(*logits) && *count > 0 {
                    let c = self.nodes[*logits].value.shape()[1];
                    let w = gout[0] / T::cast_from(*count as f64);
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut dl[r * c..(r + 1) * c];
                        for j in 0..c {
                            row[j] = probs[r * c + j] * w;
                        }
                        row[*t] = row[*t] - w;
                    }
                    add_into(&mut grads[*logits], dl);
                }
            }
        }
    }
}
