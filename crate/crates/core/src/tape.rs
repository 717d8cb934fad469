//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Graph::backward`]
//! consumes the graph, walks the records in reverse and returns the
//! accumulated [`Gradients`].
//!
//! ```
//! use care_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Probability clamp used inside the binary cross-entropy primitive.
pub const BCE_CLAMP: Real = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Concat(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Embedding { table: Var, indices: Vec<usize> },
    Conv2d { input: Var, kernel: Var },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GridRows(Var),
    GridCols(Var),
    Bce {
        probs: Var,
        targets: Vec<Real>,
        mask: Vec<Real>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::Conv2d { .. } => "conv2d",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::GridRows(..) => "grid_rows",
            Op::GridCols(..) => "grid_cols",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape for one forward pass.
///
/// Confined to a single thread; build one graph per sentence.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
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
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Snapshot a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).value().clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa.to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `[n]` bias to every trailing-axis row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || *sx.last().unwrap() != sb[0] {
            return Err(mismatch("add_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: Real) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.requires_grad(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in &parts[1..] {
            let sp = self.shape(p);
            if sp.len() != lead.len() + 1 || &sp[..lead.len()] != lead {
                return Err(mismatch("concat", self.shape(first), sp));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.requires_grad(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.requires_grad(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let n = t.last_dim();
        for row in t.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.requires_grad(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Gathers rows of a `[vocab, d]` table into `[indices.len(), d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(mismatch("embedding", st, &[indices.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: "embedding",
                msg: format!("index {bad} out of range for table of {rows} rows"),
            });
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument {
                op: "embedding",
                msg: "no indices".into(),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Stride-1 2D convolution of a `[h, w, c_in]` grid with a
    /// `[kh, kw, c_in, c_out]` kernel. Kernel sides must be odd; zero padding
    /// of `(k-1)/2` keeps the spatial size.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] || sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(mismatch("conv2d", si, sk));
        }
        let geo = ConvGeometry::new(si, sk);
        let (x, w) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; geo.h * geo.w * geo.cout];
        geo.for_each_tap(|out_base, in_base, w_base| {
            let orow = &mut out[out_base..out_base + geo.cout];
            for ci in 0..geo.cin {
                let xv = x[in_base + ci];
                let wrow = &w[w_base + ci * geo.cout..w_base + (ci + 1) * geo.cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        });
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        Ok(self.push(
            Tensor::new(vec![geo.h, geo.w, geo.cout], out)?,
            Op::Conv2d { input, kernel },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(mismatch("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (b, block) in src.chunks(r * c).enumerate() {
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = block[i * c + j];
                }
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<Real>() / t.len() as Real;
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape).map_err(|_| mismatch("reshape", self.shape(a), shape))?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `[n, d] -> [n, n, d]` with cell `(i, j)` holding row `i`.
    pub fn grid_rows(&mut self, a: Var) -> Result<Var> {
        self.grid(a, true)
    }

    /// `[n, d] -> [n, n, d]` with cell `(i, j)` holding row `j`.
    pub fn grid_cols(&mut self, a: Var) -> Result<Var> {
        self.grid(a, false)
    }

    fn grid(&mut self, a: Var, rows: bool) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch(if rows { "grid_rows" } else { "grid_cols" }, s, &[]));
        }
        let (n, d) = (s[0], s[1]);
        let t = self.value(a);
        let mut out = Vec::with_capacity(n * n * d);
        for i in 0..n {
            for j in 0..n {
                out.extend_from_slice(t.row(if rows { i } else { j }));
            }
        }
        let op = if rows { Op::GridRows(a) } else { Op::GridCols(a) };
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(vec![n, n, d], out)?, op, rg))
    }

    /// Masked binary cross-entropy summed over all elements:
    /// `-sum(mask * (y ln p + (1 - y) ln(1 - p)))`, with `p` clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce_sum(&mut self, probs: Var, targets: &Tensor, mask: &Tensor) -> Result<Var> {
        let sp = self.shape(probs);
        if sp != targets.shape() {
            return Err(mismatch("bce_sum", sp, targets.shape()));
        }
        if sp != mask.shape() {
            return Err(mismatch("bce_sum", sp, mask.shape()));
        }
        let mut loss = 0.0;
        for ((&p, &y), &m) in self.value(probs).data().iter().zip(targets.data()).zip(mask.data()) {
            if m != 0.0 {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                loss -= m * (y * libm::log(p) + (1.0 - y) * libm::log(1.0 - p));
            }
        }
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                targets: targets.data().to_vec(),
                mask: mask.data().to_vec(),
            },
            rg,
        ))
    }

    /// Runs reverse accumulation from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; n];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(node.op.name()));
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.into_iter().collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[Real], grads: &mut [Option<Vec<Real>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Real])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let brow = &bd[p * nn..(p + 1) * nn];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<Real>();
                        }
                    }
                });
                acc(b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (d, &gv) in db[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::AddBias(x, b) => {
                acc(x, &mut |dx| add_into(dx, g));
                acc(b, &mut |db| {
                    for row in g.chunks(db.len()) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            &Op::Scale(a, factor) => acc(a, &mut |da| {
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| nodes[p.0].value.last_dim()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc(p, &mut |dp| {
                        for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::Relu(a) => {
                let ad = val(a);
                acc(a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(ad) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(a, &mut |da| {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: Real = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, indices } => {
                let d = nodes[table.0].value.last_dim();
                acc(*table, &mut |dt| {
                    for (&i, grow) in indices.iter().zip(g.chunks(d)) {
                        add_into(&mut dt[i * d..(i + 1) * d], grow);
                    }
                });
            }
            &Op::Conv2d { input, kernel } => {
                let geo = ConvGeometry::new(nodes[input.0].value.shape(), nodes[kernel.0].value.shape());
                let (x, w) = (val(input), val(kernel));
                acc(input, &mut |dx| {
                    geo.for_each_tap(|out_base, in_base, w_base| {
                        let grow = &g[out_base..out_base + geo.cout];
                        for ci in 0..geo.cin {
                            let wrow = &w[w_base + ci * geo.cout..w_base + (ci + 1) * geo.cout];
                            dx[in_base + ci] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<Real>();
                        }
                    })
                });
                acc(kernel, &mut |dw| {
                    geo.for_each_tap(|out_base, in_base, w_base| {
                        let grow = &g[out_base..out_base + geo.cout];
                        for ci in 0..geo.cin {
                            let xv = x[in_base + ci];
                            let drow = &mut dw[w_base + ci * geo.cout..w_base + (ci + 1) * geo.cout];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                    })
                });
            }
            &Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(a, &mut |da| {
                    for (dblock, gblock) in da.chunks_mut(r * c).zip(g.chunks(r * c)) {
                        for i in 0..r {
                            for j in 0..c {
                                dblock[i * c + j] += gblock[j * r + i];
                            }
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => acc(a, &mut |da| {
                let s = g[0] / da.len() as Real;
                da.iter_mut().for_each(|d| *d += s);
            }),
            &Op::Reshape(a) => acc(a, &mut |da| add_into(da, g)),
            &Op::GridRows(a) | &Op::GridCols(a) => {
                let rows = matches!(node.op, Op::GridRows(_));
                let s = nodes[a.0].value.shape();
                let (n, d) = (s[0], s[1]);
                acc(a, &mut |da| {
                    for i in 0..n {
                        for j in 0..n {
                            let src = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            let r = if rows { i } else { j };
                            add_into(&mut da[r * d..(r + 1) * d], src);
                        }
                    }
                });
            }
            Op::Bce { probs, targets, mask } => {
                let pd = val(*probs);
                acc(*probs, &mut |dp| {
                    for (((d, &p), &y), &m) in dp.iter_mut().zip(pd).zip(targets).zip(mask) {
                        if m != 0.0 {
                            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            *d += g[0] * m * ((1.0 - y) / (1.0 - p) - y / p);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [Real], src: &[Real]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize]) -> Self {
        Self {
            h: input[0],
            w: input[1],
            cin: input[2],
            kh: kernel[0],
            kw: kernel[1],
            cout: kernel[3],
        }
    }

    /// Calls `f(out_offset, in_offset, kernel_offset)` for every in-bounds
    /// (output cell, kernel tap) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        for y in 0..self.h {
            for x in 0..self.w {
                let out_base = (y * self.w + x) * self.cout;
                for dy in 0..self.kh {
                    let Some(yy) = (y + dy).checked_sub(ph).filter(|&v| v < self.h) else { continue };
                    for dx in 0..self.kw {
                        let Some(xx) = (x + dx).checked_sub(pw).filter(|&v| v < self.w) else { continue };
                        let in_base = (yy * self.w + xx) * self.cin;
                        let w_base = (dy * self.kw + dx) * self.cin * self.cout;
                        f(out_base, in_base, w_base);
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<Real>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[Real]> {
        self.grads[v.0].as_deref()
    }

    /// Every parameter that was placed on the tape, with its gradient when
    /// the loss reaches it.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[Real]>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let m = g.constant(Tensor::from_fn(&[3, 3], |i| i as Real * 1.5 - 2.0));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out), g.value(m));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(z);
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_constant_grid_interior() {
        let c = 0.7;
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(&[5, 5, 1], c));
        let k = g.constant(Tensor::filled(&[3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, k).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[5, 5, 1]);
        for i in 1..4 {
            for j in 1..4 {
                assert!((out.at(&[i, j, 0]) - 9.0 * c).abs() < 1e-12);
            }
        }
        // corners only see four taps
        assert!((out.at(&[0, 0, 0]) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_sigmoid_gradient_is_quarter() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[4]));
        let s = g.sigmoid(x);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, -1.0]));
        let r = g.relu(a);
        assert!(!g.requires_grad(r));
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(a).is_none());
    }

    #[test]
    fn grid_layout() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let r = g.grid_rows(a).unwrap();
        let c = g.grid_cols(a).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::scalar(0.5));
        let l = g.bce_sum(p, &Tensor::scalar(1.0), &Tensor::scalar(1.0)).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);
    }
}
