use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, gemm};
use super::{dim_err, NumericsError, Real, Result, Tensor};

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        tb: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBroadcast {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    MulConst {
        a: usize,
        mask: Arc<Vec<T>>,
    },
    Gelu {
        a: usize,
    },
    Softmax {
        a: usize,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    MaskedSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Arc<Vec<u32>>,
    },
    Reshape {
        a: usize,
    },
    SplitHeads {
        a: usize,
        b: usize,
        s: usize,
        h: usize,
        dh: usize,
    },
    MergeHeads {
        a: usize,
        b: usize,
        s: usize,
        h: usize,
        dh: usize,
    },
    ConcatSeq {
        a: usize,
        b: usize,
        n: usize,
        la: usize,
        lb: usize,
        x: usize,
    },
    MeanSeq {
        a: usize,
        n: usize,
        l: usize,
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Arc<Vec<u32>>,
        pad: u32,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        a: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A reverse-mode tape.
///
/// A recording graph keeps every op's backward data; an inference graph
/// ([`Graph::inference`]) only computes values.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
    params: RefCell<HashMap<usize, usize>>,
}

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            params: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that never records backward data.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter identified by `key`. Repeated calls with the
    /// same key return the same node, so tied weights accumulate into one
    /// gradient.
    pub fn param(&self, key: usize, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let var = self.variable(value.clone());
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    pub fn value(&self, var: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn val(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagate from a scalar.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        if !self.record {
            return Err(NumericsError::Backward(
                "graph was built without recording".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(NumericsError::Backward(format!(
                "root must be a scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![T::one()]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.len();
    let data = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n, tb } => {
            if rg(a) {
                let ga = accumulate(grads, a, len(a));
                gemm(m, n, k, gout, false, data(b), !tb, ga, true);
            }
            if rg(b) {
                let gb = accumulate(grads, b, len(b));
                if tb {
                    gemm(n, m, k, gout, true, data(a), false, gb, true);
                } else {
                    gemm(k, m, n, data(a), true, gout, false, gb, true);
                }
            }
        }
        &Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            tb,
        } => {
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if rg(a) {
                let ga = accumulate(grads, a, len(a));
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gout[i * sc..],
                        false,
                        &data(b)[i * sb..],
                        !tb,
                        &mut ga[i * sa..],
                        true,
                    );
                }
            }
            if rg(b) {
                let gb = accumulate(grads, b, len(b));
                for i in 0..batch {
                    if tb {
                        gemm(
                            n,
                            m,
                            k,
                            &gout[i * sc..],
                            true,
                            &data(a)[i * sa..],
                            false,
                            &mut gb[i * sb..],
                            true,
                        );
                    } else {
                        gemm(
                            k,
                            m,
                            n,
                            &data(a)[i * sa..],
                            true,
                            &gout[i * sc..],
                            false,
                            &mut gb[i * sb..],
                            true,
                        );
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            for p in [a, b] {
                if rg(p) {
                    let g = accumulate(grads, p, len(p));
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
            }
        }
        &Op::AddBroadcast { a, b } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
            }
            if rg(b) {
                let nb = len(b);
                let g = accumulate(grads, b, nb);
                for chunk in gout.chunks(nb) {
                    g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                }
            }
        }
        &Op::Mul { a, b } => {
            if rg(a) {
                let other = data(b);
                let g = accumulate(grads, a, len(a));
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(other) {
                    *g += d * o;
                }
            }
            if rg(b) {
                let other = data(a);
                let g = accumulate(grads, b, len(b));
                for ((g, &d), &o) in g.iter_mut().zip(gout).zip(other) {
                    *g += d * o;
                }
            }
        }
        &Op::Scale { a, c } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d * c);
            }
        }
        Op::MulConst { a, mask } => {
            let a = *a;
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                for ((g, &d), &m) in g.iter_mut().zip(gout).zip(mask.iter()) {
                    *g += d * m;
                }
            }
        }
        &Op::Gelu { a } => {
            if rg(a) {
                let x = data(a);
                let g = accumulate(grads, a, len(a));
                for ((g, &d), &x) in g.iter_mut().zip(gout).zip(x) {
                    *g += d * kernels::gelu_grad(x);
                }
            }
        }
        &Op::Softmax {
            a,
            outer,
            axis,
            inner,
        } => {
            if rg(a) {
                let y = node.value.data();
                let g = accumulate(grads, a, len(a));
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis * inner + i;
                        let mut dot = T::zero();
                        for j in 0..axis {
                            dot += y[base + j * inner] * gout[base + j * inner];
                        }
                        for j in 0..axis {
                            let p = base + j * inner;
                            g[p] += y[p] * (gout[p] - dot);
                        }
                    }
                }
            }
        }
        &Op::MaskedSoftmax { a } => {
            if rg(a) {
                let y = node.value.data();
                let n = node.value.last_dim();
                let g = accumulate(grads, a, len(a));
                for ((yr, dr), gr) in y.chunks(n).zip(gout.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(dr).map(|(&y, &d)| y * d).sum();
                    for ((g, &y), &d) in gr.iter_mut().zip(yr).zip(dr) {
                        *g += y * (d - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = nodes[gamma].value.len();
            let gam = data(gamma);
            if rg(gamma) {
                let g = accumulate(grads, gamma, d);
                for (xr, dr) in xhat.chunks(d).zip(gout.chunks(d)) {
                    for ((g, &xh), &dy) in g.iter_mut().zip(xr).zip(dr) {
                        *g += dy * xh;
                    }
                }
            }
            if rg(beta) {
                let g = accumulate(grads, beta, d);
                for dr in gout.chunks(d) {
                    g.iter_mut().zip(dr).for_each(|(g, &dy)| *g += dy);
                }
            }
            if rg(x) {
                let g = accumulate(grads, x, len(x));
                let inv_d = T::one() / T::of(d as f64);
                for (row, ((xr, dr), gr)) in xhat
                    .chunks(d)
                    .zip(gout.chunks(d))
                    .zip(g.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = dr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    let r = rstd[row];
                    for j in 0..d {
                        let dxh = dr[j] * gam[j];
                        gr[j] += r * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let table = *table;
            if rg(table) {
                let d = nodes[table].value.last_dim();
                let g = accumulate(grads, table, len(table));
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (g, &dy) in dst.iter_mut().zip(&gout[row * d..(row + 1) * d]) {
                        *g += dy;
                    }
                }
            }
        }
        &Op::Reshape { a } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
            }
        }
        &Op::SplitHeads { a, b, s, h, dh } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                for bi in 0..b {
                    for hi in 0..h {
                        for si in 0..s {
                            let src = ((bi * h + hi) * s + si) * dh;
                            let dst = (bi * s + si) * h * dh + hi * dh;
                            for e in 0..dh {
                                g[dst + e] += gout[src + e];
                            }
                        }
                    }
                }
            }
        }
        &Op::MergeHeads { a, b, s, h, dh } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                for bi in 0..b {
                    for hi in 0..h {
                        for si in 0..s {
                            let dst = ((bi * h + hi) * s + si) * dh;
                            let src = (bi * s + si) * h * dh + hi * dh;
                            for e in 0..dh {
                                g[dst + e] += gout[src + e];
                            }
                        }
                    }
                }
            }
        }
        &Op::ConcatSeq { a, b, n, la, lb, x } => {
            let l = la + lb;
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                for i in 0..n {
                    let src = &gout[i * l * x..i * l * x + la * x];
                    g[i * la * x..(i + 1) * la * x]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, &d)| *g += d);
                }
            }
            if rg(b) {
                let g = accumulate(grads, b, len(b));
                for i in 0..n {
                    let src = &gout[i * l * x + la * x..(i + 1) * l * x];
                    g[i * lb * x..(i + 1) * lb * x]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(g, &d)| *g += d);
                }
            }
        }
        &Op::MeanSeq { a, n, l, x } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                let inv = T::one() / T::of(l as f64);
                for i in 0..n {
                    for r in 0..l {
                        for e in 0..x {
                            g[(i * l + r) * x + e] += gout[i * x + e] * inv;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            probs,
            count,
        } => {
            let logits = *logits;
            if rg(logits) {
                let v = nodes[logits].value.last_dim();
                let scale = gout[0] / T::of(*count as f64);
                let g = accumulate(grads, logits, len(logits));
                for (t, &target) in targets.iter().enumerate() {
                    if target == *pad {
                        continue;
                    }
                    let row = &mut g[t * v..(t + 1) * v];
                    for (j, gv) in row.iter_mut().enumerate() {
                        let mut d = probs[t * v + j];
                        if j == target as usize {
                            d -= T::one();
                        }
                        *gv += d * scale;
                    }
                }
            }
        }
        &Op::Sum { a } => {
            if rg(a) {
                let g = accumulate(grads, a, len(a));
                g.iter_mut().for_each(|g| *g += gout[0]);
            }
        }
    }
    Ok(())
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `var`, or `None` if no gradient
    /// reached it (constants never receive one).
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn param(&self, key: usize) -> Option<&[T]> {
        self.params
            .get(&key)
            .and_then(|&id| self.grads[id].as_deref())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.val(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn same_graph(&self, other: &Var<'g, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(dim_err(op, "operands live on different graphs"))
        }
    }

    fn emit(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var<'g, T>> {
        check_finite(op_name, &data)?;
        Ok(self
            .graph
            .push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    /// `self[.., k] @ rhs[k, n]`, leading axes of `self` flattened.
    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(rhs, false)
    }

    /// `self[.., k] @ rhs[n, k]ᵀ`.
    pub fn matmul_t(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(self, rhs: Var<'g, T>, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "matmul")?;
        let a = self.value();
        let b = rhs.value();
        if b.rank() != 2 {
            return Err(dim_err("matmul", format!("rhs must be 2-d, got {:?}", b.shape())));
        }
        let k = a.last_dim();
        let (bk, n) = if tb {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if k != bk {
            return Err(dim_err(
                "matmul",
                format!("{:?} x {:?}{}", a.shape(), b.shape(), if tb { "ᵀ" } else { "" }),
            ));
        }
        let m = a.len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), tb, &mut out, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
                tb,
            },
            rg,
        )
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]ᵀ`).
    pub fn bmm(self, rhs: Var<'g, T>, transpose_rhs: bool) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "bmm")?;
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(dim_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if transpose_rhs {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(dim_err("bmm", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                transpose_rhs,
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "bmm",
            vec![batch, m, n],
            out,
            Op::Bmm {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                tb: transpose_rhs,
            },
            rg,
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "add")?;
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(dim_err("add", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "add",
            a.shape().to_vec(),
            out,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
            rg,
        )
    }

    /// Adds `rhs` tiled over the leading axes; `rhs.shape` must be a suffix
    /// of `self.shape` (a bias `[n]`, or positions `[s, d]` over `[b, s, d]`).
    pub fn add_broadcast(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "add_broadcast")?;
        let a = self.value();
        let b = rhs.value();
        if b.rank() > a.rank() || !a.shape().ends_with(b.shape()) {
            return Err(dim_err(
                "add_broadcast",
                format!("{:?} + {:?}", a.shape(), b.shape()),
            ));
        }
        let nb = b.len();
        let mut out = a.data().to_vec();
        for chunk in out.chunks_mut(nb) {
            chunk.iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "add_broadcast",
            a.shape().to_vec(),
            out,
            Op::AddBroadcast {
                a: self.id,
                b: rhs.id,
            },
            rg,
        )
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "mul")?;
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(dim_err("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "mul",
            a.shape().to_vec(),
            out,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
            rg,
        )
    }

    pub fn scale(self, c: T) -> Result<Var<'g, T>> {
        let a = self.value();
        let out = a.data().iter().map(|&x| x * c).collect();
        self.emit(
            "scale",
            a.shape().to_vec(),
            out,
            Op::Scale { a: self.id, c },
            self.requires_grad(),
        )
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(self, mask: Arc<Vec<T>>) -> Result<Var<'g, T>> {
        let a = self.value();
        if mask.len() != a.len() {
            return Err(dim_err("mul_const", format!("{} vs {}", a.len(), mask.len())));
        }
        let out = a.data().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect();
        self.emit(
            "mul_const",
            a.shape().to_vec(),
            out,
            Op::MulConst { a: self.id, mask },
            self.requires_grad(),
        )
    }

    pub fn gelu(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let out = a.data().iter().map(|&x| kernels::gelu(x)).collect();
        self.emit(
            "gelu",
            a.shape().to_vec(),
            out,
            Op::Gelu { a: self.id },
            self.requires_grad(),
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(dim_err(
                "softmax",
                format!("axis {axis} for shape {:?}", a.shape()),
            ));
        }
        let shape = a.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let mut out = a.data().to_vec();
        kernels::softmax_axis(&mut out, outer, axis_len, inner);
        self.emit(
            "softmax",
            shape.to_vec(),
            out,
            Op::Softmax {
                a: self.id,
                outer,
                axis: axis_len,
                inner,
            },
            self.requires_grad(),
        )
    }

    /// Softmax over the last axis of `[B·H, M, N]` scores, where `keep` is a
    /// `[B, M, N]` mask shared by the `heads` consecutive entries of each
    /// batch element. Masked entries get exactly zero weight; a fully
    /// masked row is all zeros.
    pub fn masked_softmax(self, keep: &[bool], heads: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.rank() != 3 || heads == 0 || !a.shape()[0].is_multiple_of(heads) {
            return Err(dim_err("masked_softmax", format!("shape {:?}", a.shape())));
        }
        let (bh, m, n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        if keep.len() != (bh / heads) * m * n {
            return Err(dim_err(
                "masked_softmax",
                format!("mask of {} for scores {:?}", keep.len(), a.shape()),
            ));
        }
        let mut out = a.data().to_vec();
        for (i, block) in out.chunks_mut(m * n).enumerate() {
            let b = i / heads;
            let mask = &keep[b * m * n..(b + 1) * m * n];
            for (row, km) in block.chunks_mut(n).zip(mask.chunks(n)) {
                kernels::masked_softmax_row(row, km);
            }
        }
        self.emit(
            "masked_softmax",
            a.shape().to_vec(),
            out,
            Op::MaskedSoftmax { a: self.id },
            self.requires_grad(),
        )
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gamma` and `beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        self.same_graph(&gamma, "layer_norm")?;
        let x = self.value();
        let g = gamma.value();
        let b = beta.value();
        let d = x.last_dim();
        if g.shape() != [d] || b.shape() != [d] {
            return Err(dim_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), g.shape(), b.shape()),
            ));
        }
        let rows = x.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = if rg && self.graph.record {
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        self.emit("layer_norm", x.shape().to_vec(), out, op, rg)
    }

    /// Gathers rows of this `[V, D]` table; the result has shape
    /// `out_shape ++ [D]` where `out_shape` multiplies to `ids.len()`.
    pub fn embedding(self, ids: &[u32], out_shape: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        if table.rank() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err(
                "embedding",
                format!("table {:?}, {} ids as {out_shape:?}", table.shape(), ids.len()),
            ));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(NumericsError::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.requires_grad();
        let op = if rg && self.graph.record {
            Op::Embedding {
                table: self.id,
                ids: Arc::new(ids.to_vec()),
            }
        } else {
            Op::Leaf
        };
        self.emit("embedding", shape, out, op, rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let a = self.value();
        let r = a.reshape(shape)?;
        Ok(self.graph.push(
            r,
            Op::Reshape { a: self.id },
            self.requires_grad(),
        ))
    }

    /// `[B, S, H·dh] -> [B·H, S, dh]`.
    pub fn split_heads(self, heads: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.rank() != 3 || !a.shape()[2].is_multiple_of(heads) {
            return Err(dim_err("split_heads", format!("{:?} / {heads}", a.shape())));
        }
        let (b, s, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let dh = d / heads;
        let mut out = vec![T::zero(); a.len()];
        let x = a.data();
        for bi in 0..b {
            for hi in 0..heads {
                for si in 0..s {
                    let dst = ((bi * heads + hi) * s + si) * dh;
                    let src = (bi * s + si) * d + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        self.emit(
            "split_heads",
            vec![b * heads, s, dh],
            out,
            Op::SplitHeads {
                a: self.id,
                b,
                s,
                h: heads,
                dh,
            },
            self.requires_grad(),
        )
    }

    /// `[B·H, S, dh] -> [B, S, H·dh]`.
    pub fn merge_heads(self, heads: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.rank() != 3 || !a.shape()[0].is_multiple_of(heads) {
            return Err(dim_err("merge_heads", format!("{:?} / {heads}", a.shape())));
        }
        let (bh, s, dh) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let b = bh / heads;
        let d = heads * dh;
        let mut out = vec![T::zero(); a.len()];
        let x = a.data();
        for bi in 0..b {
            for hi in 0..heads {
                for si in 0..s {
                    let src = ((bi * heads + hi) * s + si) * dh;
                    let dst = (bi * s + si) * d + hi * dh;
                    out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
                }
            }
        }
        self.emit(
            "merge_heads",
            vec![b, s, d],
            out,
            Op::MergeHeads {
                a: self.id,
                b,
                s,
                h: heads,
                dh,
            },
            self.requires_grad(),
        )
    }

    /// Concatenates `[N, La, X]` and `[N, Lb, X]` along the middle axis.
    pub fn concat_seq(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&rhs, "concat_seq")?;
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2]
        {
            return Err(dim_err("concat_seq", format!("{:?} ++ {:?}", a.shape(), b.shape())));
        }
        let (n, la, x) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let lb = b.shape()[1];
        let mut out = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            out.extend_from_slice(&a.data()[i * la * x..(i + 1) * la * x]);
            out.extend_from_slice(&b.data()[i * lb * x..(i + 1) * lb * x]);
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        self.emit(
            "concat_seq",
            vec![n, la + lb, x],
            out,
            Op::ConcatSeq {
                a: self.id,
                b: rhs.id,
                n,
                la,
                lb,
                x,
            },
            rg,
        )
    }

    /// `[N, L, X] -> [N, 1, X]` by averaging over the middle axis.
    pub fn mean_seq(self) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.rank() != 3 {
            return Err(dim_err("mean_seq", format!("{:?}", a.shape())));
        }
        let (n, l, x) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let inv = T::one() / T::of(l as f64);
        let mut out = vec![T::zero(); n * x];
        for i in 0..n {
            for r in 0..l {
                for e in 0..x {
                    out[i * x + e] += a.data()[(i * l + r) * x + e];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.emit(
            "mean_seq",
            vec![n, 1, x],
            out,
            Op::MeanSeq { a: self.id, n, l, x },
            self.requires_grad(),
        )
    }

    /// Mean negative log-likelihood of `targets` under `self[.., V]` logits,
    /// skipping positions equal to `pad`. Returns the scalar loss and the
    /// number of supervised positions.
    pub fn cross_entropy(self, targets: &[u32], pad: u32) -> Result<(Var<'g, T>, usize)> {
        let logits = self.value();
        let v = logits.last_dim();
        let rows = logits.len() / v;
        if rows != targets.len() {
            return Err(dim_err(
                "cross_entropy",
                format!("{rows} logit rows vs {} targets", targets.len()),
            ));
        }
        let mut probs = vec![T::zero(); logits.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (t, &target) in targets.iter().enumerate() {
            if target == pad {
                continue;
            }
            if target as usize >= v {
                return Err(NumericsError::Index {
                    op: "cross_entropy",
                    index: target as usize,
                    size: v,
                });
            }
            let row = &logits.data()[t * v..(t + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[target as usize];
            for (p, &l) in probs[t * v..(t + 1) * v].iter_mut().zip(row) {
                *p = (l - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(NumericsError::NoTargets);
        }
        let loss = total / T::of(count as f64);
        let rg = self.requires_grad();
        let op = if rg && self.graph.record {
            Op::CrossEntropy {
                logits: self.id,
                targets: Arc::new(targets.to_vec()),
                pad,
                probs,
                count,
            }
        } else {
            Op::Leaf
        };
        let var = self.emit("cross_entropy", vec![1], vec![loss], op, rg)?;
        Ok((var, count))
    }

    pub fn sum(self) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.data().iter().copied().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum { a: self.id }, self.requires_grad())
    }

    /// The single value of a scalar var.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
