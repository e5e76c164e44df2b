//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends one node holding its output value and enough of
//! its inputs to run the chain rule later. Node indices are assigned in
//! execution order, so walking them backwards is a reverse topological
//! order and each node is visited once.

use std::collections::HashMap;

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{DegapError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    ScaleRows { x: Var, weights: Var },
    ScaleBy { x: Var, factor: Var },
    ScaleConst { x: Var, c: f64 },
    MulConst { x: Var, mask: Vec<f64> },
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    PoolRows { x: Var, groups: Vec<Vec<usize>> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records differentiable operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        dims2(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        dims2(self.shape(v)).1
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records an untracked constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Constant, false)
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same variable, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Param(id), t.requires_grad);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DegapError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(DegapError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(DegapError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, 0.0);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), tracked))
    }

    fn check_row_vec(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = dims2(self.shape(x));
        if self.value(row).len() != c {
            return Err(DegapError::Dimension {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok((r, c))
    }

    /// Adds a length-`c` vector to every row of `x: [r×c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.check_row_vec("add_row", x, row)?;
        let rv = self.value(row);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + rv[i % c]).collect();
        let tracked = self.tracked(x) || self.tracked(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row }, tracked))
    }

    /// Multiplies every row of `x: [r×c]` elementwise by a length-`c` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.check_row_vec("mul_row", x, row)?;
        let rv = self.value(row);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * rv[i % c]).collect();
        let tracked = self.tracked(x) || self.tracked(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow { x, row }, tracked))
    }

    /// Scales row `i` of `x: [r×c]` by `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if self.value(weights).len() != r {
            return Err(DegapError::Dimension {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(weights).to_vec(),
            });
        }
        let w = self.value(weights);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * w[i / c.max(1)]).collect();
        let tracked = self.tracked(x) || self.tracked(weights);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleRows { x, weights }, tracked))
    }

    /// Multiplies `x` by a one-element variable.
    pub fn scale_by(&mut self, x: Var, factor: Var) -> Result<Var> {
        if self.value(factor).len() != 1 {
            return Err(DegapError::Dimension {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(factor).to_vec(),
            });
        }
        let s = self.value(factor)[0];
        let out = self.value(x).iter().map(|v| v * s).collect();
        let tracked = self.tracked(x) || self.tracked(factor);
        Ok(self.push(self.shape(x).to_vec(), out, Op::ScaleBy { x, factor }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::ScaleConst { x, c }, tracked)
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(DegapError::Dimension {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let tracked = self.tracked(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, mask }, tracked))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), tracked)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        if c > 0 {
            out.chunks_mut(c).for_each(kernels::softmax_in_place);
        }
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), tracked)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = dims2(self.shape(x));
        let mut out = self.value(x).to_vec();
        if c > 0 {
            out.chunks_mut(c).for_each(kernels::log_softmax_in_place);
        }
        let tracked = self.tracked(x);
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmaxRows(x), tracked)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.check_row_vec("layer_norm", x, gamma)?;
        self.check_row_vec("layer_norm", x, beta)?;
        if c == 0 {
            return Err(DegapError::contract("layer_norm over zero columns"));
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let inv = kernels::normalize_row(row, &mut xhat[i * c..(i + 1) * c], eps);
            inv_std[i] = inv;
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, tracked))
    }

    /// Mean of row groups: output row `g` averages the rows of `x` listed in
    /// `groups[g]`.
    pub fn pool_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        for g in &groups {
            if g.is_empty() {
                return Err(DegapError::contract("pooling over an empty position set"));
            }
            if let Some(&p) = g.iter().find(|&&p| p >= r) {
                return Err(DegapError::contract(format!(
                    "pool position {p} out of range for {r} rows"
                )));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * c];
        for (gi, g) in groups.iter().enumerate() {
            let dst = &mut out[gi * c..(gi + 1) * c];
            for &p in g {
                add_into(dst, &xv[p * c..(p + 1) * c]);
            }
            let inv = 1.0 / g.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![groups.len(), c], out, Op::PoolRows { x, groups }, tracked))
    }

    /// Mean of the selected rows, as a length-`c` vector.
    pub fn mean_pool_rows(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let pooled = self.pool_rows(x, vec![positions.to_vec()])?;
        let c = self.cols(x);
        self.reshape(pooled, vec![c])
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(DegapError::contract(format!("token id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let tracked = self.tracked(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), c], out, op, tracked))
    }

    /// Stacks `a: [r1×c]` on top of `b: [r2×c]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = dims2(self.shape(a));
        let (rb, cb) = dims2(self.shape(b));
        if ca != cb {
            return Err(DegapError::Dimension {
                op: "concat_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![ra + rb, ca], out, Op::ConcatRows(a, b), tracked))
    }

    /// Places 2-D blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.rows(p));
        if let Some(&bad) = parts.iter().find(|&&p| self.rows(p) != r) {
            return Err(DegapError::Dimension {
                op: "concat_cols",
                lhs: self.shape(parts[0]).to_vec(),
                rhs: self.shape(bad).to_vec(),
            });
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.cols(p)).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Columns `start..start + width` of a 2-D variable.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(x));
        if start + width > c {
            return Err(DegapError::Dimension {
                op: "slice_cols",
                lhs: self.shape(x).to_vec(),
                rhs: vec![start, width],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![r, width], out, Op::SliceCols { x, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(DegapError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, out, Op::Reshape(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    /// Picks flat elements of `x`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(DegapError::contract(format!("gather index {bad} out of range {n}")));
        }
        let xv = self.value(x);
        let out = indices.iter().map(|&i| xv[i]).collect();
        let tracked = self.tracked(x);
        let op = Op::Gather {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(vec![indices.len()], out, op, tracked))
    }

    /// Back-propagates from a one-element `loss`, accumulating `∂loss/∂θ`
    /// into the `grad` field of every trainable parameter that was used.
    /// The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DegapError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.params.clear();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let mut send = |v: Var, g: Vec<f64>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.accumulate_grad(*id, &dy),
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = dims2(&nodes[a.0].shape);
                    let n = node.shape[1];
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if nodes[a.0].tracked {
                        // dA = dC · Bᵀ (or dC · B when B was used transposed)
                        let mut da = vec![0.0; m * k];
                        kernels::gemm(m, n, k, &dy, false, bv, !*trans_b, &mut da, 0.0);
                        send(*a, da);
                    }
                    if nodes[b.0].tracked {
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            // B is [n×k]: dB = dCᵀ · A
                            kernels::gemm_tn(n, m, k, &dy, av, &mut db);
                        } else {
                            // dB = Aᵀ · dC
                            kernels::gemm_tn(k, m, n, av, &dy, &mut db);
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone());
                    send(*b, dy);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    send(*a, dy.iter().zip(bv).map(|(g, y)| g * y).collect());
                    send(*b, dy.iter().zip(av).map(|(g, x)| g * x).collect());
                }
                Op::AddRow { x, row } => {
                    let c = nodes[row.0].value.len();
                    let mut dr = vec![0.0; c];
                    for (i, g) in dy.iter().enumerate() {
                        dr[i % c] += g;
                    }
                    send(*row, dr);
                    send(*x, dy);
                }
                Op::MulRow { x, row } => {
                    let rv = &nodes[row.0].value;
                    let xv = &nodes[x.0].value;
                    let c = rv.len();
                    let mut dr = vec![0.0; c];
                    let mut dx = vec![0.0; dy.len()];
                    for (i, g) in dy.iter().enumerate() {
                        dr[i % c] += g * xv[i];
                        dx[i] = g * rv[i % c];
                    }
                    send(*row, dr);
                    send(*x, dx);
                }
                Op::ScaleRows { x, weights } => {
                    let w = &nodes[weights.0].value;
                    let xv = &nodes[x.0].value;
                    let c = dims2(&node.shape).1.max(1);
                    let mut dw = vec![0.0; w.len()];
                    let mut dx = vec![0.0; dy.len()];
                    for (i, g) in dy.iter().enumerate() {
                        dw[i / c] += g * xv[i];
                        dx[i] = g * w[i / c];
                    }
                    send(*weights, dw);
                    send(*x, dx);
                }
                Op::ScaleBy { x, factor } => {
                    let s = nodes[factor.0].value[0];
                    let xv = &nodes[x.0].value;
                    let ds: f64 = dy.iter().zip(xv).map(|(g, v)| g * v).sum();
                    send(*factor, vec![ds]);
                    send(*x, dy.iter().map(|g| g * s).collect());
                }
                Op::ScaleConst { x, c } => send(*x, dy.iter().map(|g| g * c).collect()),
                Op::MulConst { x, mask } => send(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()),
                Op::Sigmoid(x) => {
                    let dx = dy.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    send(*x, dx);
                }
                Op::Gelu(x) => {
                    let xv = &nodes[x.0].value;
                    let dx = dy.iter().zip(xv).map(|(g, &v)| g * kernels::gelu_grad(v)).collect();
                    send(*x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let c = dims2(&node.shape).1;
                    let mut dx = vec![0.0; dy.len()];
                    if c > 0 {
                        for ((g, y), d) in dy.chunks(c).zip(node.value.chunks(c)).zip(dx.chunks_mut(c)) {
                            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[j] = y[j] * (g[j] - dot);
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let c = dims2(&node.shape).1;
                    let mut dx = vec![0.0; dy.len()];
                    if c > 0 {
                        for ((g, y), d) in dy.chunks(c).zip(node.value.chunks(c)).zip(dx.chunks_mut(c)) {
                            let total: f64 = g.iter().sum();
                            for j in 0..c {
                                d[j] = g[j] - y[j].exp() * total;
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = dims2(&node.shape);
                    let gv = &nodes[gamma.0].value;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = vec![0.0; r * c];
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let g = &dy[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dgamma[j] += g[j] * xh[j];
                            dbeta[j] += g[j];
                            dxhat[j] = g[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let scale = inv_std[i] / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = scale * (c as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                    send(*x, dx);
                }
                Op::PoolRows { x, groups } => {
                    let c = node.shape[1];
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for (gi, group) in groups.iter().enumerate() {
                        let inv = 1.0 / group.len() as f64;
                        let g = &dy[gi * c..(gi + 1) * c];
                        for &p in group {
                            dx[p * c..(p + 1) * c]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(d, v)| *d += v * inv);
                        }
                    }
                    send(*x, dx);
                }
                Op::Embedding { table, ids } => {
                    let c = node.shape[1];
                    let mut dt = vec![0.0; nodes[table.0].value.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * c..(id + 1) * c], &dy[i * c..(i + 1) * c]);
                    }
                    send(*table, dt);
                }
                Op::ConcatRows(a, b) => {
                    let split = nodes[a.0].value.len();
                    send(*b, dy[split..].to_vec());
                    send(*a, dy[..split].to_vec());
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = dims2(&node.shape);
                    let mut offset = 0;
                    for &p in parts {
                        let w = dims2(&nodes[p.0].shape).1;
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        send(p, dp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = dims2(&nodes[x.0].shape);
                    let w = node.shape[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, dy),
                Op::Sum(x) => {
                    let n = nodes[x.0].value.len();
                    send(*x, vec![dy[0]; n]);
                }
                Op::Gather { x, indices } => {
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for (g, &i) in dy.iter().zip(indices) {
                        dx[i] += g;
                    }
                    send(*x, dx);
                }
            }
        }
        Ok(())
    }

    /// Drops every recorded node without computing gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }
}
