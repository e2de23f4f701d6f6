use std::borrow::Cow;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Matvec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    OneMinus(Var),
    Neg(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Gather(Var, usize),
    MeanRows(Var),
    Pick(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
///
/// Values are computed eagerly as operations are appended. `backward` walks the
/// record in reverse and accumulates into per-leaf gradient buffers; calling it
/// again adds to those buffers until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), shape, op, rg)
    }

    /// Binds a tensor by reference; it participates in gradients iff the
    /// tensor has `requires_grad` set.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records an owned leaf (inputs, cached states).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(data))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(shape_err(op, other, &[])),
        }
    }

    fn len1(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.nodes[v.0].shape.as_slice() {
            &[n] => Ok(n),
            other => Err(shape_err(op, other, &[])),
        }
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bpj) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        Ok(self.derived(out, vec![m, n], Op::Matmul(a, b), &[a, b]))
    }

    /// `[m×k] · [k] → [m]`
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.dims2(w, "matvec")?;
        let k2 = self.len1(x, "matvec")?;
        if k != k2 {
            return Err(shape_err("matvec", self.shape(w), self.shape(x)));
        }
        let (wv, xv) = (self.value(w), self.value(x));
        let out: Vec<f64> = wv
            .chunks_exact(k)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        debug_assert_eq!(out.len(), m);
        Ok(self.derived(out, vec![m], Op::Matvec(w, x), &[w, x]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        Ok(self.derived(out, vec![c, r], Op::Transpose(a), &[a]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Mul(a, b), &[a, b]))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (_, c) = self.dims2(m, "add_row")?;
        let n = self.len1(v, "add_row")?;
        if n != c {
            return Err(shape_err("add_row", self.shape(m), self.shape(v)));
        }
        let vv = self.value(v);
        let mut out = self.value(m).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, x) in row.iter_mut().zip(vv) {
                *o += x;
            }
        }
        let shape = self.shape(m).to_vec();
        Ok(self.derived(out, shape, Op::AddRow(m, v), &[m, v]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(out, shape, op, &[a])
    }

    /// `1 − x`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Softmax over a vector, shifted by the maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.len1(a, "softmax")?;
        let out = softmax(self.value(a))?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.len1(a, "log_softmax")?;
        let out = log_softmax(self.value(a))?;
        let shape = self.shape(a).to_vec();
        Ok(self.derived(out, shape, Op::LogSoftmax(a), &[a]))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            self.len1(p, "concat")?;
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        Ok(self.derived(out, vec![n], Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(TensorError::Index {
            op: "stack",
            index: 0,
            len: 0,
        })?;
        let d = self.len1(first, "stack")?;
        let mut out = Vec::with_capacity(d * rows.len());
        for &r in rows {
            if self.len1(r, "stack")? != d {
                return Err(shape_err("stack", self.shape(first), self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        Ok(self.derived(out, vec![rows.len(), d], Op::Stack(rows.to_vec()), rows))
    }

    /// Row `row` of matrix `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let (r, c) = self.dims2(table, "gather")?;
        if row >= r {
            return Err(TensorError::Index {
                op: "gather",
                index: row,
                len: r,
            });
        }
        let out = self.value(table)[row * c..(row + 1) * c].to_vec();
        Ok(self.derived(out, vec![c], Op::Gather(table, row), &[table]))
    }

    /// Arithmetic mean of the rows of a matrix.
    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let (r, c) = self.dims2(m, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(m).chunks_exact(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.derived(out, vec![c], Op::MeanRows(m), &[m]))
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.value(a).len();
        if index >= len {
            return Err(TensorError::Index {
                op: "pick",
                index,
                len,
            });
        }
        let out = vec![self.value(a)[index]];
        Ok(self.derived(out, Vec::new(), Op::Pick(a, index), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.derived(vec![s], Vec::new(), Op::Sum(a), &[a])
    }

    /// Sums scalars (or equal-shape tensors) into one node.
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.leaf(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NotScalar(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, x) in slot.iter_mut().zip(&g) {
                        *s += x;
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &self.nodes[out].value;
        match *op {
            Op::Leaf => unreachable!(),
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(a, grads) {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.slot(b, grads) {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Matvec(w, x) => {
                let k = self.shape(w)[1];
                let (wv, xv) = (self.value(w), self.value(x));
                if let Some(gw) = self.slot(w, grads) {
                    for (row, &gi) in gw.chunks_exact_mut(k).zip(g) {
                        if gi != 0.0 {
                            for (r, &xj) in row.iter_mut().zip(xv) {
                                *r += gi * xj;
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(x, grads) {
                    for (row, &gi) in wv.chunks_exact(k).zip(g) {
                        if gi != 0.0 {
                            for (r, &wij) in gx.iter_mut().zip(row) {
                                *r += gi * wij;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                if let Some(ga) = self.slot(a, grads) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_into(a, grads, g.iter().copied());
                self.add_into(b, grads, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_into(a, grads, g.iter().copied());
                self.add_into(b, grads, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.add_into(a, grads, g.iter().zip(bv).map(|(g, b)| g * b));
                self.add_into(b, grads, g.iter().zip(av).map(|(g, a)| g * a));
            }
            Op::AddRow(m, v) => {
                self.add_into(m, grads, g.iter().copied());
                let c = self.shape(v)[0];
                if let Some(gv) = self.slot(v, grads) {
                    for row in g.chunks_exact(c) {
                        for (s, x) in gv.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                }
            }
            Op::OneMinus(a) | Op::Neg(a) => self.add_into(a, grads, g.iter().map(|x| -x)),
            Op::Scale(a, c) => self.add_into(a, grads, g.iter().map(|x| c * x)),
            Op::Sigmoid(a) => self.add_into(a, grads, g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y))),
            Op::Tanh(a) => self.add_into(a, grads, g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y))),
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
                self.add_into(a, grads, g.iter().zip(y.iter()).map(|(g, y)| y * (g - dot)));
            }
            Op::LogSoftmax(a) => {
                let total: f64 = g.iter().sum();
                self.add_into(a, grads, g.iter().zip(y.iter()).map(|(g, y)| g - y.exp() * total));
            }
            Op::Concat(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p)[0];
                    self.add_into(p, grads, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::Stack(ref rows) => {
                let d = self.shape(rows[0])[0];
                for (i, &r) in rows.iter().enumerate() {
                    self.add_into(r, grads, g[i * d..(i + 1) * d].iter().copied());
                }
            }
            Op::Gather(table, row) => {
                let c = self.shape(table)[1];
                if let Some(gt) = self.slot(table, grads) {
                    for (s, x) in gt[row * c..(row + 1) * c].iter_mut().zip(g) {
                        *s += x;
                    }
                }
            }
            Op::MeanRows(m) => {
                let (r, c) = (self.shape(m)[0], self.shape(m)[1]);
                let inv = 1.0 / r as f64;
                if let Some(gm) = self.slot(m, grads) {
                    for row in gm.chunks_exact_mut(c) {
                        for (s, x) in row.iter_mut().zip(g) {
                            *s += x * inv;
                        }
                    }
                }
            }
            Op::Pick(a, idx) => {
                if let Some(ga) = self.slot(a, grads) {
                    ga[idx] += g[0];
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.add_into(a, grads, std::iter::repeat(g0));
            }
        }
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn add_into(&self, v: Var, grads: &mut [Option<Vec<f64>>], delta: impl Iterator<Item = f64>) {
        if let Some(s) = self.slot(v, grads) {
            for (s, d) in s.iter_mut().zip(delta) {
                *s += d;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("softmax"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

pub(crate) fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("log_softmax"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|v| v - lse).collect())
}
