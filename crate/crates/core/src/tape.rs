//! Reverse-mode differentiation over tensors.
//!
//! A [`Tape`] is a Wengert list: the forward pass appends one node per
//! primitive operation, and [`Tape::backward`] replays the list once in
//! reverse, accumulating d(loss)/d(node) for every node that contributed to
//! the loss. Nodes that did not contribute keep a gradient of exactly zero.
//!
//! The op set is deliberately small and tailored to the models in this
//! crate: recurrent cells, a linear-chain CRF in log space, and a pairwise
//! relation scorer. [`grad_check`] verifies any composite built from these
//! primitives against central finite differences.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op {
    Leaf,
    /// a[m x k] . b[k x n]
    MatMul(NodeId, NodeId),
    /// a[m x k] . b[n x k]^T
    MatMulNt(NodeId, NodeId),
    /// m[r x c] . v[c]
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise product with a constant (dropout masks, feature gates).
    MulConst(NodeId, Tensor),
    /// x scaled by a scalar node.
    ScaleBy(NodeId, NodeId),
    /// m[r x c] + v[c] broadcast over rows.
    AddRowVec(NodeId, NodeId),
    /// m[r x c] + v[r] broadcast over columns.
    AddColVec(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Row i of a matrix as a vector.
    Row(NodeId, usize),
    /// Contiguous sub-vector starting at `start`.
    Slice1d(NodeId, usize),
    /// Contiguous row block starting at row `start`.
    SliceRows(NodeId, usize),
    /// Stack equal-length vectors into a matrix.
    StackRows(Vec<NodeId>),
    /// [r x a] ++ [r x b] -> [r x (a+b)]
    ConcatCols(NodeId, NodeId),
    /// Gather rows of an embedding matrix; duplicate ids accumulate grads.
    SelectRows(NodeId, Vec<usize>),
    /// out[t][d] = sum_l s[l] * stack[t][l][d] with a constant stack.
    MixLayers(Tensor, NodeId),
    Softmax1d(NodeId),
    /// log-sum-exp of a vector -> scalar.
    Lse1d(NodeId),
    /// Per-row log-sum-exp: [r x c] -> [r].
    LseRows(NodeId),
    /// Per-column log-sum-exp: [r x c] -> [c].
    LseCols(NodeId),
    /// out[i*T + j] = a[i] + b[j] over rows of two [T x d] matrices.
    PairwiseSum(NodeId, NodeId),
    /// Row-blockwise elementwise max: [(g*n) x d] -> [g x d].
    /// `argmax[gi * d + dd]` records the winning row within each block.
    GroupRowMax {
        input: NodeId,
        block: usize,
        argmax: Vec<u32>,
    },
    Reshape(NodeId),
    /// Gather flat positions; duplicates accumulate grads.
    Pick(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// Weighted sum of same-shape nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    /// Value of a shape-[1] node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.len(), 1, "scalar_value on shape {:?}", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.rows(), "matmul inner dims");
        let out = kernels::matmul(ta, tb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols(), tb.cols(), "matmul_nt shared dims");
        let out = kernels::matmul_nt(ta, tb);
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (tm, tv) = (self.value(m), self.value(v));
        assert_eq!(tm.cols(), tv.len(), "matvec dims");
        let out = kernels::matvec(tm, tv.data());
        let rows = tm.rows();
        self.push(Tensor::from_raw(vec![rows], out), Op::MatVec(m, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |x, y| x + y, "add");
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |x, y| x - y, "sub");
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |x, y| x * y, "mul");
        self.push(out, Op::Mul(a, b))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{what} shape mismatch");
        Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape(), "mul_const shape mismatch");
        let out = Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar_value(s);
        let ta = self.value(a);
        let out = Tensor::from_raw(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x * sv).collect(),
        );
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = (tm.rows(), tm.cols());
        assert_eq!(c, tv.len(), "add_row_vec dims");
        let mut out = tm.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += tv.data()[j];
            }
        }
        self.push(Tensor::from_raw(vec![r, c], out), Op::AddRowVec(m, v))
    }

    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = (tm.rows(), tm.cols());
        assert_eq!(r, tv.len(), "add_col_vec dims");
        let mut out = tm.data().to_vec();
        for i in 0..r {
            let vi = tv.data()[i];
            for j in 0..c {
                out[i * c + j] += vi;
            }
        }
        self.push(Tensor::from_raw(vec![r, c], out), Op::AddColVec(m, v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let ta = self.value(a);
        let out = Tensor::from_raw(vec![ta.cols()], ta.row_slice(i).to_vec());
        self.push(out, Op::Row(a, i))
    }

    pub fn slice1d(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        assert!(start + len <= ta.len(), "slice1d out of range");
        let out = Tensor::from_raw(vec![len], ta.data()[start..start + len].to_vec());
        self.push(out, Op::Slice1d(a, start))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        let c = ta.cols();
        assert!(start + len <= ta.rows(), "slice_rows out of range");
        let out = Tensor::from_raw(
            vec![len, c],
            ta.data()[start * c..(start + len) * c].to_vec(),
        );
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn stack_rows(&mut self, rows: Vec<NodeId>) -> NodeId {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let c = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            let tr = self.value(r);
            assert_eq!(tr.len(), c, "stack_rows ragged input");
            data.extend_from_slice(tr.data());
        }
        let shape = vec![rows.len(), c];
        self.push(Tensor::from_raw(shape, data), Op::StackRows(rows))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(r, tb.rows(), "concat_cols row mismatch");
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(ta.row_slice(i));
            data.extend_from_slice(tb.row_slice(i));
        }
        self.push(Tensor::from_raw(vec![r, ca + cb], data), Op::ConcatCols(a, b))
    }

    pub fn select_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tt = self.value(table);
        let c = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in &ids {
            assert!(id < tt.rows(), "select_rows id out of range");
            data.extend_from_slice(tt.row_slice(id));
        }
        let shape = vec![ids.len(), c];
        self.push(Tensor::from_raw(shape, data), Op::SelectRows(table, ids))
    }

    /// Weighted average over the layer axis of a constant `[T x L x d]` stack.
    pub fn mix_layers(&mut self, stack: Tensor, weights: NodeId) -> NodeId {
        assert_eq!(stack.rank(), 3, "mix_layers needs a [T x L x d] stack");
        let (t, l, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
        let w = self.value(weights);
        assert_eq!(w.len(), l, "mix_layers weight count");
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            for li in 0..l {
                let wv = w.data()[li];
                for di in 0..d {
                    out[ti * d + di] += wv * stack.at3(ti, li, di);
                }
            }
        }
        self.push(Tensor::from_raw(vec![t, d], out), Op::MixLayers(stack, weights))
    }

    pub fn softmax1d(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        assert!(ta.rank() == 1 && !ta.is_empty(), "softmax1d needs a vector");
        let mut out = vec![0.0; ta.len()];
        kernels::softmax_into(ta.data(), &mut out);
        let shape = vec![ta.len()];
        self.push(Tensor::from_raw(shape, out), Op::Softmax1d(a))
    }

    pub fn logsumexp1d(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        assert!(ta.rank() == 1 && !ta.is_empty(), "logsumexp1d needs a vector");
        let v = kernels::logsumexp(ta.data());
        self.push(Tensor::scalar(v), Op::Lse1d(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let r = ta.rows();
        let out: Vec<f64> = (0..r).map(|i| kernels::logsumexp(ta.row_slice(i))).collect();
        self.push(Tensor::from_raw(vec![r], out), Op::LseRows(a))
    }

    pub fn logsumexp_cols(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        let mut col = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                col[i] = ta.at2(i, j);
            }
            out[j] = kernels::logsumexp(&col);
        }
        self.push(Tensor::from_raw(vec![c], out), Op::LseCols(a))
    }

    pub fn pairwise_sum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "pairwise_sum shape mismatch");
        let (t, d) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; t * t * d];
        for i in 0..t {
            let ra = ta.row_slice(i);
            for j in 0..t {
                let rb = tb.row_slice(j);
                let o = &mut out[(i * t + j) * d..(i * t + j + 1) * d];
                for k in 0..d {
                    o[k] = ra[k] + rb[k];
                }
            }
        }
        self.push(Tensor::from_raw(vec![t * t, d], out), Op::PairwiseSum(a, b))
    }

    /// Elementwise max over consecutive row blocks of size `block`.
    pub fn group_row_max(&mut self, a: NodeId, block: usize) -> NodeId {
        let ta = self.value(a);
        let (rows, d) = (ta.rows(), ta.cols());
        assert!(block > 0 && rows % block == 0, "group_row_max block size");
        let groups = rows / block;
        let mut out = vec![f64::NEG_INFINITY; groups * d];
        let mut argmax = vec![0u32; groups * d];
        for g in 0..groups {
            for r in 0..block {
                let row = ta.row_slice(g * block + r);
                for k in 0..d {
                    if row[k] > out[g * d + k] {
                        out[g * d + k] = row[k];
                        argmax[g * d + k] = r as u32;
                    }
                }
            }
        }
        self.push(
            Tensor::from_raw(vec![groups, d], out),
            Op::GroupRowMax {
                input: a,
                block,
                argmax,
            },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let ta = self.value(a);
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.len(),
            "reshape element count"
        );
        let out = Tensor::from_raw(shape, ta.data().to_vec());
        self.push(out, Op::Reshape(a))
    }

    pub fn pick(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = indices
            .iter()
            .map(|&i| {
                assert!(i < ta.len(), "pick index out of range");
                ta.data()[i]
            })
            .collect();
        let shape = vec![indices.len()];
        self.push(Tensor::from_raw(shape, out), Op::Pick(a, indices))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        assert!(!ta.is_empty(), "mean of empty tensor");
        let v = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a))
    }

    /// Weighted sum of scalar (or same-shape) nodes. A single part with
    /// weight 1.0 is returned unchanged so it stays bit-identical.
    pub fn weighted_sum(&mut self, parts: Vec<(NodeId, f64)>) -> NodeId {
        assert!(!parts.is_empty(), "weighted_sum of nothing");
        if parts.len() == 1 && parts[0].1 == 1.0 {
            return parts[0].0;
        }
        let shape = self.value(parts[0].0).shape().to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for &(id, w) in &parts {
            let t = self.value(id);
            assert_eq!(t.shape(), &shape[..], "weighted_sum shape mismatch");
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += w * v;
            }
        }
        self.push(Tensor::from_raw(shape, out), Op::WeightedSum(parts))
    }

    /// Accumulate gradients of a scalar loss with respect to every node.
    /// Each recorded operation is visited exactly once, in reverse order.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss node"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.idx()] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.idx()] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), delta.shape());
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_to(grads, *a, kernels::matmul_nt(g, tb));
                add_to(grads, *b, kernels::matmul_tn(ta, g));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_to(grads, *a, kernels::matmul(g, tb));
                add_to(grads, *b, kernels::matmul_tn(g, ta));
            }
            Op::MatVec(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let (r, c) = (tm.rows(), tm.cols());
                let mut gm = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.data()[i];
                    if gi != 0.0 {
                        for j in 0..c {
                            gm[i * c + j] = gi * tv.data()[j];
                        }
                    }
                }
                add_to(grads, *m, Tensor::from_raw(vec![r, c], gm));
                add_to(
                    grads,
                    *v,
                    Tensor::from_raw(vec![c], kernels::matvec_t(tm, g.data())),
                );
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_to(grads, *a, elementwise(g, tb, |x, y| x * y));
                add_to(grads, *b, elementwise(g, ta, |x, y| x * y));
            }
            Op::MulConst(a, c) => {
                add_to(grads, *a, elementwise(g, c, |x, y| x * y));
            }
            Op::ScaleBy(a, s) => {
                let (ta, sv) = (self.value(*a), self.scalar_value(*s));
                add_to(grads, *a, g.map(|x| x * sv));
                let dot: f64 = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                add_to(grads, *s, Tensor::scalar(dot));
            }
            Op::AddRowVec(m, v) => {
                let (r, c) = (g.rows(), g.cols());
                add_to(grads, *m, g.clone());
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g.at2(i, j);
                    }
                }
                add_to(grads, *v, Tensor::from_raw(vec![c], gv));
            }
            Op::AddColVec(m, v) => {
                let (r, c) = (g.rows(), g.cols());
                add_to(grads, *m, g.clone());
                let gv: Vec<f64> = (0..r).map(|i| g.row_slice(i).iter().sum()).collect();
                let _ = c;
                add_to(grads, *v, Tensor::from_raw(vec![r], gv));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                add_to(grads, *a, elementwise(g, ta, |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                add_to(grads, *a, elementwise(g, &node.value, |gx, y| gx * y * (1.0 - y)));
            }
            Op::Tanh(a) => {
                add_to(grads, *a, elementwise(g, &node.value, |gx, y| gx * (1.0 - y * y)));
            }
            Op::Row(a, i) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; r * c];
                ga[i * c..(i + 1) * c].copy_from_slice(g.data());
                add_to(grads, *a, Tensor::from_raw(vec![r, c], ga));
            }
            Op::Slice1d(a, start) => {
                let ta = self.value(*a);
                let mut ga = vec![0.0; ta.len()];
                ga[*start..start + g.len()].copy_from_slice(g.data());
                add_to(grads, *a, Tensor::from_raw(vec![ta.len()], ga));
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; r * c];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                add_to(grads, *a, Tensor::from_raw(vec![r, c], ga));
            }
            Op::StackRows(rows) => {
                for (i, &rid) in rows.iter().enumerate() {
                    add_to(
                        grads,
                        rid,
                        Tensor::from_raw(vec![g.cols()], g.row_slice(i).to_vec()),
                    );
                }
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let r = g.rows();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row_slice(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                add_to(grads, *a, Tensor::from_raw(vec![r, ca], ga));
                add_to(grads, *b, Tensor::from_raw(vec![r, cb], gb));
            }
            Op::SelectRows(table, ids) => {
                let tt = self.value(*table);
                let (r, c) = (tt.rows(), tt.cols());
                let mut gt = vec![0.0; r * c];
                for (i, &id) in ids.iter().enumerate() {
                    let grow = g.row_slice(i);
                    let slot = &mut gt[id * c..(id + 1) * c];
                    for (s, gv) in slot.iter_mut().zip(grow) {
                        *s += gv;
                    }
                }
                add_to(grads, *table, Tensor::from_raw(vec![r, c], gt));
            }
            Op::MixLayers(stack, weights) => {
                let (t, l, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
                let mut gw = vec![0.0; l];
                for ti in 0..t {
                    for li in 0..l {
                        let mut acc = 0.0;
                        for di in 0..d {
                            acc += g.at2(ti, di) * stack.at3(ti, li, di);
                        }
                        gw[li] += acc;
                    }
                }
                add_to(grads, *weights, Tensor::from_raw(vec![l], gw));
            }
            Op::Softmax1d(a) => {
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx).sum();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gx, yx)| yx * (gx - dot))
                    .collect();
                add_to(grads, *a, Tensor::from_raw(vec![y.len()], ga));
            }
            Op::Lse1d(a) => {
                let ta = self.value(*a);
                let y = node.value.data()[0];
                let g0 = g.data()[0];
                add_to(grads, *a, ta.map(|x| g0 * (x - y).exp()));
            }
            Op::LseRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yi = node.value.data()[i];
                    let gi = g.data()[i];
                    for j in 0..c {
                        ga[i * c + j] = gi * (ta.at2(i, j) - yi).exp();
                    }
                }
                add_to(grads, *a, Tensor::from_raw(vec![r, c], ga));
            }
            Op::LseCols(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut ga = vec![0.0; r * c];
                for j in 0..c {
                    let yj = node.value.data()[j];
                    let gj = g.data()[j];
                    for i in 0..r {
                        ga[i * c + j] = gj * (ta.at2(i, j) - yj).exp();
                    }
                }
                add_to(grads, *a, Tensor::from_raw(vec![r, c], ga));
            }
            Op::PairwiseSum(a, b) => {
                let t = self.value(*a).rows();
                let d = self.value(*a).cols();
                let mut ga = vec![0.0; t * d];
                let mut gb = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..t {
                        let grow = g.row_slice(i * t + j);
                        for k in 0..d {
                            ga[i * d + k] += grow[k];
                            gb[j * d + k] += grow[k];
                        }
                    }
                }
                add_to(grads, *a, Tensor::from_raw(vec![t, d], ga));
                add_to(grads, *b, Tensor::from_raw(vec![t, d], gb));
            }
            Op::GroupRowMax {
                input,
                block,
                argmax,
            } => {
                let ta = self.value(*input);
                let (rows, d) = (ta.rows(), ta.cols());
                let groups = rows / block;
                let mut ga = vec![0.0; rows * d];
                for gi in 0..groups {
                    for k in 0..d {
                        let winner = argmax[gi * d + k] as usize;
                        ga[(gi * block + winner) * d + k] += g.at2(gi, k);
                    }
                }
                add_to(grads, *input, Tensor::from_raw(vec![rows, d], ga));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                add_to(grads, *a, Tensor::from_raw(shape, g.data().to_vec()));
            }
            Op::Pick(a, indices) => {
                let ta = self.value(*a);
                let mut ga = vec![0.0; ta.len()];
                for (gi, &idx2) in g.data().iter().zip(indices) {
                    ga[idx2] += gi;
                }
                add_to(grads, *a, Tensor::from_raw(ta.shape().to_vec(), ga));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let g0 = g.data()[0];
                add_to(
                    grads,
                    *a,
                    Tensor::from_raw(ta.shape().to_vec(), vec![g0; ta.len()]),
                );
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let g0 = g.data()[0] / ta.len() as f64;
                add_to(
                    grads,
                    *a,
                    Tensor::from_raw(ta.shape().to_vec(), vec![g0; ta.len()]),
                );
            }
            Op::WeightedSum(parts) => {
                for &(id, w) in parts {
                    add_to(grads, id, g.map(|x| w * x));
                }
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.idx()).and_then(Option::as_ref)
    }

    /// Gradient of a node, densified to zeros when the node was unused.
    pub fn dense(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_coords(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub(crate) fn set_coord(&mut self, name: &str, i: usize, v: f64) {
        self.entries[name].data_mut()[i] = v;
    }
}

/// Tape node ids for a registered [`ParamSet`].
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Tape {
    /// Register every parameter as a leaf node.
    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let mut ids = IndexMap::new();
        for (name, t) in params.iter() {
            ids.insert(name.to_string(), self.leaf(t.clone()));
        }
        BoundParams { ids }
    }
}

/// Gradients per parameter name; unused parameters get exact zeros.
pub fn param_grads(
    grads: &Gradients,
    bound: &BoundParams,
    params: &ParamSet,
) -> IndexMap<String, Tensor> {
    let mut out = IndexMap::new();
    for (name, t) in params.iter() {
        out.insert(name.to_string(), grads.dense(bound.id(name), t.shape()));
    }
    out
}

/// Compare reverse-mode gradients against central finite differences.
///
/// Returns the maximum over all parameter coordinates of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(params: &ParamSet, eps: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &BoundParams) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let loss = build(&mut tape, &bound)?;
    let v0 = tape.scalar_value(loss);
    if !v0.is_finite() {
        return Err(Error::Evaluation("non-finite loss at probe point".into()));
    }
    let grads = tape.backward(loss);
    let ad = param_grads(&grads, &bound, params);

    let eval = |probe: &ParamSet, build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(probe);
        let loss = build(&mut tape, &bound)?;
        let v = tape.scalar_value(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation("non-finite loss at probe point".into()))
        }
    };

    let mut max_err = 0.0f64;
    let mut probe = params.clone();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let n = params.get(name).unwrap().len();
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            probe.set_coord(name, i, orig + eps);
            let fp = eval(&probe, &mut build)?;
            probe.set_coord(name, i, orig - eps);
            let fm = eval(&probe, &mut build)?;
            probe.set_coord(name, i, orig);
            let fd = (fp - fm) / (2.0 * eps);
            let a = ad[name].data()[i];
            let err = (a - fd).abs() / f64::max(1e-8, a.abs() + fd.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
