//! Reverse-mode tape. Nodes are appended in evaluation order (so ids are
//! already topological), values are computed eagerly through the kernels, and
//! every op checks its output for non-finite values instead of letting NaNs
//! travel. `backward` walks the tape once and returns per-node gradients.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rope::RopeTable;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Matmul(NodeId, NodeId),
    MatmulABt(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    MulScalarNode(NodeId, NodeId),
    RecipScalar(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Gelu(NodeId),
    SoftmaxRows {
        x: NodeId,
        #[allow(dead_code)]
        mask: Option<Rc<Vec<bool>>>,
    },
    Rope {
        x: NodeId,
        table: Rc<RopeTable<S>>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        rows: Rc<Vec<usize>>,
    },
    GatherElems {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    RowNorms(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients keyed by node id, filled in by `Graph::backward`.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name.into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Tensor input that wants a gradient (a parameter).
    pub fn param(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Tensor input treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.ng(&[a, b]);
        self.push("add", v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.ng(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let g = self.ng(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let v = self.value(x).scale(cs);
        let g = self.ng(&[x]);
        self.push("scale", v, Op::Scale(x, cs), g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let g = self.ng(&[a, b]);
        self.push("matmul", v, Op::Matmul(a, b), g)
    }

    /// a · bᵀ with b given row-major (used for attention logits).
    pub fn matmul_abt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul_abt(self.value(a), self.value(b))?;
        let g = self.ng(&[a, b]);
        self.push("matmul_abt", v, Op::MatmulABt(a, b), g)
    }

    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::add_row_bias(self.value(x), self.value(b))?;
        let g = self.ng(&[x, b]);
        self.push("add_row_bias", v, Op::AddRowBias(x, b), g)
    }

    /// Broadcast per-column multiply: every row of x scaled elementwise by v.
    pub fn mul_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let vv = self.value(v);
        if vv.rank() != 1 || xv.cols() != vv.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_row_vec",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let n = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &m) in row.iter_mut().zip(vv.data()) {
                *o = *o * m;
            }
        }
        let val = Tensor::new(xv.shape().to_vec(), out)?;
        let g = self.ng(&[x, v]);
        self.push("mul_row_vec", val, Op::MulRowVec(x, v), g)
    }

    /// Multiply a tensor by a 1-element scalar node.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::BadShape {
                op: "mul_scalar_node",
                shape: self.value(s).shape().to_vec(),
                why: "scalar operand must have one element".into(),
            });
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).scale(sv);
        let g = self.ng(&[x, s]);
        self.push("mul_scalar_node", v, Op::MulScalarNode(x, s), g)
    }

    /// 1/s for a 1-element node; errors once |s| drops below `min_abs`.
    pub fn recip_scalar(&mut self, s: NodeId, min_abs: f64) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::BadShape {
                op: "recip_scalar",
                shape: self.value(s).shape().to_vec(),
                why: "scalar operand must have one element".into(),
            });
        }
        let sv = self.value(s).data()[0];
        if sv.as_f64().abs() < min_abs {
            return Err(Error::Numeric(format!(
                "recip_scalar: |{sv}| below guard {min_abs}"
            )));
        }
        let v = Tensor::scalar(S::one() / sv);
        let g = self.ng(&[s]);
        self.push("recip_scalar", v, Op::RecipScalar(s), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let v = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let g = self.ng(&[x, gamma, beta]);
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta }, g)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::gelu(self.value(x));
        let g = self.ng(&[x]);
        self.push("gelu", v, Op::Gelu(x), g)
    }

    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<Rc<Vec<bool>>>) -> Result<NodeId> {
        let v = kernels::softmax_rows(self.value(x), mask.as_deref().map(|m| m.as_slice()))?;
        let g = self.ng(&[x]);
        self.push("softmax_rows", v, Op::SoftmaxRows { x, mask }, g)
    }

    pub fn rope(&mut self, x: NodeId, table: Rc<RopeTable<S>>) -> Result<NodeId> {
        let v = table.apply(self.value(x))?;
        let g = self.ng(&[x]);
        self.push("rope", v, Op::Rope { x, table }, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.cols() {
            return Err(Error::BadShape {
                op: "slice_cols",
                shape: xv.shape().to_vec(),
                why: format!("cols {start}..{} out of range", start + len),
            });
        }
        let n = xv.cols();
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let v = Tensor::new(vec![xv.rows(), len], out)?;
        let g = self.ng(&[x]);
        self.push("slice_cols", v, Op::SliceCols { x, start, len }, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_cols",
                shape: vec![],
                why: "no parts".into(),
            });
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            total += pv.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let n = pv.cols();
                out.extend_from_slice(&pv.data()[r * n..(r + 1) * n]);
            }
        }
        let v = Tensor::new(vec![rows, total], out)?;
        let g = self.ng(parts);
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::BadShape {
                op: "concat_rows",
                shape: vec![],
                why: "no parts".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        let g = self.ng(parts);
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Row permutation/selection; duplicate source rows are allowed.
    pub fn gather_rows(&mut self, x: NodeId, rows: Rc<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(Error::BadShape {
                op: "gather_rows",
                shape: xv.shape().to_vec(),
                why: "row index out of range".into(),
            });
        }
        let n = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows.iter() {
            out.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        let v = Tensor::new(vec![rows.len(), n], out)?;
        let g = self.ng(&[x]);
        self.push("gather_rows", v, Op::GatherRows { x, rows }, g)
    }

    /// Element permutation into an arbitrary output shape.
    pub fn gather_elems(&mut self, x: NodeId, idx: Rc<Vec<usize>>, shape: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != idx.len() || idx.iter().any(|&i| i >= xv.len()) {
            return Err(Error::BadShape {
                op: "gather_elems",
                shape,
                why: "index list does not match output shape or source".into(),
            });
        }
        let data: Vec<S> = idx.iter().map(|&i| xv.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        let g = self.ng(&[x]);
        self.push("gather_elems", v, Op::GatherElems { x, idx }, g)
    }

    /// Euclidean norm of every row of an N×C matrix. The zero row takes the
    /// zero subgradient.
    pub fn row_norms(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::BadShape {
                op: "row_norms",
                shape: xv.shape().to_vec(),
                why: "expected rank 2".into(),
            });
        }
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mut ss = S::zero();
            for &v in row {
                ss += v * v;
            }
            out.push(ss.sqrt());
        }
        let v = Tensor::new(vec![xv.rows()], out)?;
        let g = self.ng(&[x]);
        self.push("row_norms", v, Op::RowNorms(x), g)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut acc = S::zero();
        for &v in xv.data() {
            acc += v;
        }
        let v = Tensor::scalar(acc / S::from_f64(xv.len() as f64));
        let g = self.ng(&[x]);
        self.push("mean_all", v, Op::MeanAll(x), g)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        let g = self.ng(&[x]);
        self.push("reshape", v, Op::Reshape(x), g)
    }

    /// Backpropagates from a scalar root. Gradients flow only into subtrees
    /// that contain a `param` leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        if self.value(root).len() != 1 {
            return Err(Error::BadShape {
                op: "backward",
                shape: self.value(root).shape().to_vec(),
                why: "root must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::one()));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gy = grads[id].clone().unwrap();
            self.backprop_one(id, &gy, &mut grads)?;
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_one(&self, id: usize, gy: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) -> Result<()> {
        let acc = |tgt: NodeId, delta: Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>| -> Result<()> {
            if !self.nodes[tgt.0].needs_grad {
                return Ok(());
            }
            match &mut grads[tgt.0] {
                Some(g) => *g = g.add(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone(), grads)?;
                acc(*b, gy.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone(), grads)?;
                acc(*b, gy.scale(S::zero() - S::one()), grads)?;
            }
            Op::Mul(a, b) => {
                acc(*a, gy.zip_map(self.value(*b), "mul", |g, v| g * v)?, grads)?;
                acc(*b, gy.zip_map(self.value(*a), "mul", |g, v| g * v)?, grads)?;
            }
            Op::Scale(x, c) => {
                acc(*x, gy.scale(*c), grads)?;
            }
            Op::Matmul(a, b) => {
                acc(*a, kernels::matmul_abt(gy, self.value(*b))?, grads)?;
                acc(*b, kernels::matmul_atb(self.value(*a), gy)?, grads)?;
            }
            Op::MatmulABt(a, b) => {
                acc(*a, kernels::matmul(gy, self.value(*b))?, grads)?;
                acc(*b, kernels::matmul_atb(gy, self.value(*a))?, grads)?;
            }
            Op::AddRowBias(x, b) => {
                acc(*x, gy.clone(), grads)?;
                let n = gy.cols();
                let mut gb = vec![S::zero(); n];
                for row in gy.data().chunks(n) {
                    for (o, &g) in gb.iter_mut().zip(row) {
                        *o += g;
                    }
                }
                acc(*b, Tensor::new(vec![n], gb)?, grads)?;
            }
            Op::MulRowVec(x, v) => {
                let vv = self.value(*v);
                let n = vv.len();
                let mut gx = gy.data().to_vec();
                for row in gx.chunks_mut(n) {
                    for (o, &m) in row.iter_mut().zip(vv.data()) {
                        *o = *o * m;
                    }
                }
                acc(*x, Tensor::new(gy.shape().to_vec(), gx)?, grads)?;
                let xv = self.value(*x);
                let mut gv = vec![S::zero(); n];
                for (grow, xrow) in gy.data().chunks(n).zip(xv.data().chunks(n)) {
                    for c in 0..n {
                        gv[c] += grow[c] * xrow[c];
                    }
                }
                acc(*v, Tensor::new(vec![n], gv)?, grads)?;
            }
            Op::MulScalarNode(x, s) => {
                let sv = self.value(*s).data()[0];
                acc(*x, gy.scale(sv), grads)?;
                let mut dot = S::zero();
                for (&g, &xv) in gy.data().iter().zip(self.value(*x).data()) {
                    dot += g * xv;
                }
                acc(*s, Tensor::scalar(dot), grads)?;
            }
            Op::RecipScalar(s) => {
                let sv = self.value(*s).data()[0];
                let d = S::zero() - gy.data()[0] / (sv * sv);
                acc(*s, Tensor::scalar(d), grads)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(self.value(*x), self.value(*gamma), gy);
                acc(*x, gx, grads)?;
                acc(*gamma, gg, grads)?;
                acc(*beta, gb, grads)?;
            }
            Op::Gelu(x) => {
                acc(*x, kernels::gelu_backward(self.value(*x), gy), grads)?;
            }
            Op::SoftmaxRows { x, .. } => {
                acc(*x, kernels::softmax_rows_backward(&self.nodes[id].value, gy), grads)?;
            }
            Op::Rope { x, table } => {
                acc(*x, table.apply_inverse(gy)?, grads)?;
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = vec![S::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let src = &gy.data()[r * len..(r + 1) * len];
                    gx[r * n + start..r * n + start + len].copy_from_slice(src);
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, grads)?;
            }
            Op::ConcatCols(parts) => {
                let rows = gy.rows();
                let total = gy.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&gy.data()[r * total + start..r * total + start + w]);
                        }
                        acc(p, Tensor::new(vec![rows, w], gp)?, grads)?;
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = gy.cols();
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        let gp = gy.data()[start * cols..(start + h) * cols].to_vec();
                        acc(p, Tensor::new(vec![h, cols], gp)?, grads)?;
                    }
                    start += h;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut gx = vec![S::zero(); xv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    let src = &gy.data()[k * n..(k + 1) * n];
                    for (o, &g) in gx[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *o += g;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, grads)?;
            }
            Op::GatherElems { x, idx } => {
                let xv = self.value(*x);
                let mut gx = vec![S::zero(); xv.len()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += gy.data()[k];
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, grads)?;
            }
            Op::RowNorms(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[id].value;
                let c = xv.cols();
                let mut gx = vec![S::zero(); xv.len()];
                for r in 0..xv.rows() {
                    let nrm = y.data()[r];
                    if nrm > S::zero() {
                        let g = gy.data()[r] / nrm;
                        for k in 0..c {
                            gx[r * c + k] = g * xv.data()[r * c + k];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?, grads)?;
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = gy.data()[0] / S::from_f64(xv.len() as f64);
                acc(*x, Tensor::full(xv.shape(), g), grads)?;
            }
            Op::Reshape(x) => {
                acc(*x, gy.reshaped(self.value(*x).shape())?, grads)?;
            }
        }
        Ok(())
    }
}
