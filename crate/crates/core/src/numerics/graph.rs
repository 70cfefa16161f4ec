//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every parameter that took part in computing it.
//! Parameters are read from a borrowed [`ParamStore`]; a graph never mutates
//! parameter values.

use std::collections::{BTreeSet, HashMap};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities before taking logs in [`Graph::bce_mean`].
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed { param: ParamId, rows: Vec<usize> },
    GatherRows { src: Var, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    BroadcastRows(Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    SumSquares(Var),
    SoftmaxRows(Var),
    LogSumExpRows { src: Var, mask: Option<Vec<bool>> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LayerNormRows { src: Var, inv_std: Vec<f64> },
    L2NormalizeRows { src: Var, norms: Vec<f64> },
    BceMean { pred: Var, labels: Vec<f64> },
    SegmentAttention { q: Var, k: Var, v: Var, segs: Vec<Segment>, heads: usize, probs: Vec<f64> },
    SegmentMean { src: Var, segs: Vec<Segment> },
    SegmentPool { items: Var, queries: Var, segs: Vec<Segment>, groups: Vec<usize>, weights: Vec<f64> },
}

/// A contiguous block of rows: `(start, len)`.
pub type Segment = (usize, usize);

fn check_segments(op: &'static str, segs: &[Segment], rows: usize) -> Result<()> {
    for &(s, n) in segs {
        if s + n > rows {
            return Err(Error::Invalid(format!("{op}: segment ({s}, {n}) exceeds {rows} rows")));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape bound to a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    touched: BTreeSet<ParamId>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            touched: BTreeSet::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. It receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The parameter `id` as a node. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes.insert(id, v);
        self.touched.insert(id);
        v
    }

    /// Parameters read so far, directly or through an embedding lookup, in id order.
    pub fn touched_params(&self) -> Vec<ParamId> {
        self.touched.iter().copied().collect()
    }

    /// Rows `rows` of parameter `table`, stacked into a `rows.len() x cols` matrix.
    pub fn embedding_lookup(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.store.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::Domain {
                    op: "embedding_lookup",
                    msg: format!("row {r} out of range for table with {} rows", t.rows()),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(rows.len(), cols, data)?;
        self.touched.insert(table);
        Ok(self.push(
            value,
            Op::Embed {
                param: table,
                rows: rows.to_vec(),
            },
            true,
        ))
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let cols = t.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::Domain {
                    op: "gather_rows",
                    msg: format!("row {r} out of range for {} rows", t.rows()),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(rows.len(), cols, data)?;
        let ng = self.ng(src);
        Ok(self.push(
            value,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMulNT(a, b), ng))
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op_name: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(op_name, ta, tr));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tr.data()[i % c]))
            .collect();
        let value = Tensor::new(ta.rows(), c, data)?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, op, ng))
    }

    /// `a + row`, with the `1 x c` row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// `a * row` elementwise, with the `1 x c` row broadcast over rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `n x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / c])
            .collect();
        let value = Tensor::new(ta.rows(), c, data)?;
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(value, Op::MulCol(a, col), ng))
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                left: ta.shape(),
                right: [n, ta.cols()],
            });
        }
        let mut data = Vec::with_capacity(n * ta.cols());
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        let value = Tensor::new(n, ta.cols(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::BroadcastRows(a), ng))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + width > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: ta.shape(),
                right: [start, width],
            });
        }
        let mut data = Vec::with_capacity(ta.rows() * width);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + width]);
        }
        let value = Tensor::new(ta.rows(), width, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + count > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                left: ta.shape(),
                right: [start, count],
            });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..(start + count) * c].to_vec();
        let value = Tensor::new(count, c, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Column-wise mean over rows: `n x c -> 1 x c`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.rows();
        if n == 0 {
            return Err(Error::Empty("mean_pool over zero rows".into()));
        }
        let mut out = vec![0.0; ta.cols()];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let ng = self.ng(a);
        Ok(self.push(Tensor::row_vector(out), Op::MeanRows(a), ng))
    }

    /// Row sums: `n x c -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let ng = self.ng(a);
        self.push(Tensor::column(out), Op::SumCols(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// `sum of a_ij^2` as a `1 x 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - max).exp();
                z += e;
                out.push(e);
            }
            out[start..start + c].iter_mut().for_each(|e| *e /= z);
        }
        let value = Tensor::new(ta.rows(), c, out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Per-row `log(sum_j exp(a_ij))`, restricted to entries where `mask` is
    /// true when a mask is given. Output is `n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(Error::Shape {
                    op: "logsumexp_rows",
                    left: ta.shape(),
                    right: [m.len(), 1],
                });
            }
        }
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            let row = ta.row(r);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain {
                    op: "logsumexp_rows",
                    msg: format!("row {r} has no unmasked entries"),
                });
            }
            let z: f64 = (0..c).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + z.ln());
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::column(out),
            Op::LogSumExpRows {
                src: a,
                mask: mask.map(<[bool]>::to_vec),
            },
            ng,
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp, Op::Exp(a));
        if !self.value(v).is_finite() {
            return Err(Error::Domain {
                op: "exp",
                msg: "overflow".into(),
            });
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("argument {x} is not positive"),
            });
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = Vec::with_capacity(ta.len());
        let mut inv_std = Vec::with_capacity(ta.rows());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let value = Tensor::new(ta.rows(), c, out).expect("same shape");
        let ng = self.ng(a);
        self.push(value, Op::LayerNormRows { src: a, inv_std }, ng)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let mut norms = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.len());
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Domain {
                    op: "l2_norm",
                    msg: format!("row {r} has zero norm"),
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|x| x / n));
        }
        let value = Tensor::new(ta.rows(), ta.cols(), out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::L2NormalizeRows { src: a, norms }, ng))
    }

    /// Multi-head scaled dot-product attention restricted to each segment:
    /// a row only attends to rows of its own segment. Rows outside every
    /// segment produce zeros. `q`, `k`, `v` are `n x d` with `d % heads == 0`.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, segs: &[Segment], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(shape_err("segment_attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("segment_attention", tq, tv));
        }
        let [n, d] = tq.shape();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("{heads} heads do not divide width {d}")));
        }
        check_segments("segment_attention", segs, n)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        for &(s, len) in segs {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in s..s + len {
                    let qi = &tq.row(i)[cols.clone()];
                    let start = probs.len();
                    probs.extend((s..s + len).map(|j| scale * dot(qi, &tk.row(j)[cols.clone()])));
                    let p = &mut probs[start..];
                    softmax_in_place(p);
                    let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (jj, j) in (s..s + len).enumerate() {
                        let pj = p[jj];
                        o.iter_mut().zip(&tv.row(j)[cols.clone()]).for_each(|(a, b)| *a += pj * b);
                    }
                }
            }
        }
        let value = Tensor::new(n, d, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            value,
            Op::SegmentAttention {
                q,
                k,
                v,
                segs: segs.to_vec(),
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean of the rows of each segment: `n x c -> segs x c`. Empty segments
    /// give a zero row.
    pub fn segment_mean(&mut self, a: Var, segs: &[Segment]) -> Result<Var> {
        let ta = self.value(a);
        check_segments("segment_mean", segs, ta.rows())?;
        let c = ta.cols();
        let mut out = vec![0.0; segs.len() * c];
        for (k, &(s, len)) in segs.iter().enumerate() {
            let o = &mut out[k * c..(k + 1) * c];
            for r in s..s + len {
                o.iter_mut().zip(ta.row(r)).for_each(|(x, y)| *x += y / len as f64);
            }
        }
        let value = Tensor::new(segs.len(), c, out)?;
        let ng = self.ng(a);
        Ok(self.push(
            value,
            Op::SegmentMean {
                src: a,
                segs: segs.to_vec(),
            },
            ng,
        ))
    }

    /// Query-conditioned softmax pooling. Output row `j` is
    /// `sum_i a_i items_i` over the rows `i` of segment `groups[j]`, with
    /// `a = softmax_i(items_i . queries_j)`. An empty segment gives zeros.
    pub fn segment_attn_pool(&mut self, items: Var, segs: &[Segment], queries: Var, groups: &[usize]) -> Result<Var> {
        let (ti, tq) = (self.value(items), self.value(queries));
        if ti.cols() != tq.cols() {
            return Err(shape_err("segment_attn_pool", ti, tq));
        }
        if groups.len() != tq.rows() {
            return Err(Error::Shape {
                op: "segment_attn_pool",
                left: tq.shape(),
                right: [groups.len(), 1],
            });
        }
        check_segments("segment_attn_pool", segs, ti.rows())?;
        if let Some(g) = groups.iter().find(|&&g| g >= segs.len()) {
            return Err(Error::Invalid(format!("segment_attn_pool: group {g} of {}", segs.len())));
        }
        let c = ti.cols();
        let mut out = vec![0.0; groups.len() * c];
        let mut weights = Vec::new();
        for (j, &g) in groups.iter().enumerate() {
            let (s, len) = segs[g];
            if len == 0 {
                continue;
            }
            let qj = tq.row(j);
            let start = weights.len();
            weights.extend((s..s + len).map(|i| dot(ti.row(i), qj)));
            let w = &mut weights[start..];
            softmax_in_place(w);
            let o = &mut out[j * c..(j + 1) * c];
            for (ii, i) in (s..s + len).enumerate() {
                let wi = w[ii];
                o.iter_mut().zip(ti.row(i)).for_each(|(a, b)| *a += wi * b);
            }
        }
        let value = Tensor::new(groups.len(), c, out)?;
        let ng = self.ng(items) || self.ng(queries);
        Ok(self.push(
            value,
            Op::SegmentPool {
                items,
                queries,
                segs: segs.to_vec(),
                groups: groups.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` (`n x 1`) against
    /// `labels`, clamping probabilities to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.cols() != 1 || tp.rows() != labels.len() {
            return Err(Error::Shape {
                op: "bce_mean",
                left: tp.shape(),
                right: [labels.len(), 1],
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("bce_mean over no predictions".into()));
        }
        let loss = bce(tp.data(), labels);
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceMean {
                pred,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter it
    /// depends on.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(Error::Shape {
                op: "backward",
                left: lt.shape(),
                right: [1, 1],
            });
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lt.item())));
        }
        let mut out = ParamGrads::new(self.store.len());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut ParamGrads) {
        let y = &node.value;
        // Gradient buffer of an input node, allocated on first use. `None`
        // when the input does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let slot = out.slot(*id, y.shape());
                slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
            }
            Op::Embed { param, rows } => {
                let shape = self.store.value(*param).shape();
                let c = shape[1];
                let slot = out.slot(*param, shape);
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut slot[r * c..(r + 1) * c];
                    dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(s, v)| *s += v);
                }
            }
            Op::GatherRows { src, rows } => {
                let c = y.cols();
                if let Some(d) = acc!(*src) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut d[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(d) = acc!(*a) {
                    gemm_nt(g, tb.data(), d, m, n, k);
                }
                if let Some(d) = acc!(*b) {
                    gemm_tn(ta.data(), g, d, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(d) = acc!(*a) {
                    gemm_nn(g, tb.data(), d, m, n, k);
                }
                if let Some(d) = acc!(*b) {
                    gemm_tn(g, ta.data(), d, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if let Some(d) = acc!(*b) {
                    d.iter_mut().zip(g).for_each(|(s, v)| *s -= v);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(d) = acc!(*a) {
                    for ((s, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                        *s += gv * bv;
                    }
                }
                if let Some(d) = acc!(*b) {
                    for ((s, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                        *s += gv * av;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let c = y.cols();
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if let Some(d) = acc!(*row) {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = y.cols();
                let (ta, tr) = (self.value(*a), self.value(*row));
                if let Some(d) = acc!(*a) {
                    for (i, (s, gv)) in d.iter_mut().zip(g).enumerate() {
                        *s += gv * tr.data()[i % c];
                    }
                }
                if let Some(d) = acc!(*row) {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv * ta.data()[i];
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = y.cols();
                let (ta, tc) = (self.value(*a), self.value(*col));
                if let Some(d) = acc!(*a) {
                    for (i, (s, gv)) in d.iter_mut().zip(g).enumerate() {
                        *s += gv * tc.data()[i / c];
                    }
                }
                if let Some(d) = acc!(*col) {
                    for (i, gv) in g.iter().enumerate() {
                        d[i / c] += gv * ta.data()[i];
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let c = y.cols();
                if let Some(d) = acc!(*a) {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                }
            }
            Op::Affine(a, s) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().zip(g).for_each(|(dv, gv)| *dv += s * gv);
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = acc!(p) {
                        for r in 0..y.rows() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, v)| *s += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = acc!(p) {
                        d.iter_mut().zip(&g[offset..offset + n]).for_each(|(s, v)| *s += v);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let w = y.cols();
                let c = self.value(*a).cols();
                if let Some(d) = acc!(*a) {
                    for r in 0..y.rows() {
                        let dst = &mut d[r * c + start..r * c + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, v)| *s += v);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = y.cols();
                if let Some(d) = acc!(*a) {
                    let dst = &mut d[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows() as f64;
                let c = y.cols();
                if let Some(d) = acc!(*a) {
                    for (i, s) in d.iter_mut().enumerate() {
                        *s += g[i % c] / n;
                    }
                }
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                if let Some(d) = acc!(*a) {
                    for (i, s) in d.iter_mut().enumerate() {
                        *s += g[i / c];
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(d) = acc!(*a) {
                    d.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::SumSquares(a) => {
                let ta = self.value(*a);
                if let Some(d) = acc!(*a) {
                    for (s, x) in d.iter_mut().zip(ta.data()) {
                        *s += 2.0 * x * g[0];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                if let Some(d) = acc!(*a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSumExpRows { src, mask } => {
                let ta = self.value(*src);
                let c = ta.cols();
                if let Some(d) = acc!(*src) {
                    for r in 0..ta.rows() {
                        let lse = y.data()[r];
                        for j in 0..c {
                            let idx = r * c + j;
                            if mask.as_ref().map_or(true, |m| m[idx]) {
                                d[idx] += g[r] * (ta.data()[idx] - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(d) = acc!(*a) {
                    for ((s, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *s += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = acc!(*a) {
                    for ((s, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *s += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(d) = acc!(*a) {
                    for ((s, gv), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = acc!(*a) {
                    for ((s, gv), yv) in d.iter_mut().zip(g).zip(y.data()) {
                        *s += gv * yv;
                    }
                }
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                if let Some(d) = acc!(*a) {
                    for ((s, gv), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *s += gv / x;
                    }
                }
            }
            Op::LayerNormRows { src, inv_std } => {
                let c = y.cols();
                if let Some(d) = acc!(*src) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[r * c + j] += inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { src, norms } => {
                let c = y.cols();
                if let Some(d) = acc!(*src) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::SegmentAttention { q, k, v, segs, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let [n, d] = tq.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut off = 0;
                let mut dp = Vec::new();
                for &(s, len) in segs {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in s..s + len {
                            let p = &probs[off..off + len];
                            off += len;
                            let gi = &g[i * d + c0..i * d + c0 + dh];
                            dp.clear();
                            dp.extend((s..s + len).map(|j| dot(gi, &tv.row(j)[c0..c0 + dh])));
                            let pdp = dot(p, &dp);
                            for (jj, j) in (s..s + len).enumerate() {
                                let pj = p[jj];
                                dv[j * d + c0..j * d + c0 + dh]
                                    .iter_mut()
                                    .zip(gi)
                                    .for_each(|(a, b)| *a += pj * b);
                                let ds = pj * (dp[jj] - pdp) * scale;
                                if ds != 0.0 {
                                    for t in 0..dh {
                                        dq[i * d + c0 + t] += ds * tk.data()[j * d + c0 + t];
                                        dk[j * d + c0 + t] += ds * tq.data()[i * d + c0 + t];
                                    }
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(dst) = acc!(var) {
                        dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SegmentMean { src, segs } => {
                let c = y.cols();
                if let Some(d) = acc!(*src) {
                    for (k, &(s, len)) in segs.iter().enumerate() {
                        let gk = &g[k * c..(k + 1) * c];
                        for r in s..s + len {
                            d[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(gk)
                                .for_each(|(a, b)| *a += b / len as f64);
                        }
                    }
                }
            }
            Op::SegmentPool { items, queries, segs, groups, weights } => {
                let (ti, tq) = (self.value(*items), self.value(*queries));
                let c = ti.cols();
                let mut di = vec![0.0; ti.len()];
                let mut dq = vec![0.0; tq.len()];
                let mut off = 0;
                let mut gh = Vec::new();
                for (j, &grp) in groups.iter().enumerate() {
                    let (s, len) = segs[grp];
                    if len == 0 {
                        continue;
                    }
                    let w = &weights[off..off + len];
                    off += len;
                    let gj = &g[j * c..(j + 1) * c];
                    let qj = tq.row(j);
                    gh.clear();
                    gh.extend((s..s + len).map(|i| dot(gj, ti.row(i))));
                    let wgh = dot(w, &gh);
                    for (ii, i) in (s..s + len).enumerate() {
                        let ds = w[ii] * (gh[ii] - wgh);
                        let row = &mut di[i * c..(i + 1) * c];
                        for t in 0..c {
                            row[t] += w[ii] * gj[t] + ds * qj[t];
                            dq[j * c + t] += ds * ti.data()[i * c + t];
                        }
                    }
                }
                for (var, buf) in [(*items, di), (*queries, dq)] {
                    if let Some(dst) = acc!(var) {
                        dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::BceMean { pred, labels } => {
                let tp = self.value(*pred);
                let n = labels.len() as f64;
                if let Some(d) = acc!(*pred) {
                    for ((s, &p), &lab) in d.iter_mut().zip(tp.data()).zip(labels) {
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            *s += -g[0] * (lab / p - (1.0 - lab) / (1.0 - p)) / n;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with the probability clamp used by the graph op.
pub fn bce(pred: &[f64], labels: &[f64]) -> f64 {
    let n = labels.len() as f64;
    -pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}
