use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use super::tensor::matmul_raw;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-pass corruption, used to prove the gradient checker
/// can detect a broken derivative.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    LeakyReluBackwardSign,
}

/// Every differentiable operation the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Matmul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Neg,
    Exp,
    Log,
    Relu,
    LeakyRelu,
    Softmax,
    LogSoftmax,
    Concat,
    SumAll,
    SumAxis,
    LookupRows,
    SegmentWeightedSum,
    SegmentSoftmax,
    SelectColumn,
    ScaleRows,
    RowNorm,
    PickPerRow,
    Dropout,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Matmul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Neg,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::SumAll,
        OpKind::SumAxis,
        OpKind::LookupRows,
        OpKind::SegmentWeightedSum,
        OpKind::SegmentSoftmax,
        OpKind::SelectColumn,
        OpKind::ScaleRows,
        OpKind::RowNorm,
        OpKind::PickPerRow,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Neg => "neg",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::SumAll => "sum_all",
            OpKind::SumAxis => "sum_axis",
            OpKind::LookupRows => "lookup_rows",
            OpKind::SegmentWeightedSum => "segment_weighted_sum",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::SelectColumn => "select_column",
            OpKind::ScaleRows => "scale_rows",
            OpKind::RowNorm => "row_norm",
            OpKind::PickPerRow => "pick_per_row",
            OpKind::Dropout => "dropout",
        }
    }

    /// Ops with a kink somewhere get the looser gradient-check tolerance.
    pub fn is_smooth(self) -> bool {
        !matches!(
            self,
            OpKind::Relu | OpKind::LeakyRelu | OpKind::RowNorm | OpKind::Dropout
        )
    }
}

/// Edge list driving the segment ops: edge `e` reads row `src[e]` (or row
/// `e` when no source map is given) and writes to segment `dst[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentIndex {
    src: Option<Vec<usize>>,
    dst: Vec<usize>,
    n_segments: usize,
}

impl SegmentIndex {
    pub fn new(segments: Vec<usize>, n_segments: usize) -> Result<Self> {
        check_ids("segment index", &segments, n_segments)?;
        Ok(SegmentIndex {
            src: None,
            dst: segments,
            n_segments,
        })
    }

    pub fn gathered(src: Vec<usize>, dst: Vec<usize>, n_segments: usize) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::shape(
                "segment index",
                format!("{} sources vs {} segments", src.len(), dst.len()),
            ));
        }
        check_ids("segment index", &dst, n_segments)?;
        Ok(SegmentIndex {
            src: Some(src),
            dst,
            n_segments,
        })
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn segments(&self) -> &[usize] {
        &self.dst
    }

    #[inline]
    fn source_row(&self, e: usize) -> usize {
        match &self.src {
            Some(src) => src[e],
            None => e,
        }
    }

    fn max_source(&self) -> Option<usize> {
        match &self.src {
            Some(src) => src.iter().copied().max(),
            None => self.dst.len().checked_sub(1),
        }
    }
}

fn check_ids(op: &'static str, ids: &[usize], bound: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= bound) {
        Some(&index) => Err(Error::OutOfRange { op, index, bound }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    // last field: rhs is a single row broadcast over lhs rows
    Binary(BinKind, Var, Var, bool),
    ScalarMul(Var, T),
    AddScalar(Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LeakyRelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    LookupRows(Var, Rc<Vec<usize>>),
    SegmentWeightedSum(Var, Var, Rc<SegmentIndex>),
    SegmentSoftmax(Var, Rc<SegmentIndex>),
    SelectColumn(Var, usize),
    ScaleRows(Var, Var),
    RowNorm(Var),
    PickPerRow(Var, Rc<Vec<usize>>),
    Dropout(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order and backward visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} invalid for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            bound_order: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<Fault>) -> Self {
        Tape {
            fault,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    /// Records an input that gradients flow into.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("needs a matrix, got {s:?}")));
        }
        let out = transpose2(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            false
        } else if vb.rows() == 1 && vb.numel() == va.cols() && va.shape().len() >= 2 {
            true
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape()),
            ));
        };
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { vb.data()[i % cols] } else { vb.data()[i] };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b, broadcast), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::ScalarMul(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if let Some(bad) = v.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = v.map(T::ln);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let slope = T::lit(LEAKY_RELU_SLOPE);
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(a), axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(a), axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        let (outer, _, inner) = axis_extents("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Sums along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, len, inner) = axis_extents("sum_axis", v.shape(), axis)?;
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + v.data()[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAxis(a, axis), rg))
    }

    pub fn lookup_rows(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("lookup_rows", "table must be a matrix"));
        }
        check_ids("lookup_rows", &ids, t.rows())?;
        let out = t.gather_rows(&ids);
        let rg = self.rg(table);
        Ok(self.push(out, Op::LookupRows(table, ids), rg))
    }

    /// `out[s] = Σ_{e: dst[e]=s} weights[e] · values[src(e)]`; empty segments are zero.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        index: Rc<SegmentIndex>,
    ) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        if v.shape().len() != 2 {
            return Err(Error::shape("segment_weighted_sum", "values must be a matrix"));
        }
        if w.numel() != index.len() {
            return Err(Error::shape(
                "segment_weighted_sum",
                format!("{} weights for {} edges", w.numel(), index.len()),
            ));
        }
        if index.src.is_none() && index.len() != v.rows() {
            return Err(Error::shape(
                "segment_weighted_sum",
                format!("{} segment ids for {} rows", index.len(), v.rows()),
            ));
        }
        if let Some(m) = index.max_source() {
            if m >= v.rows() {
                return Err(Error::OutOfRange {
                    op: "segment_weighted_sum",
                    index: m,
                    bound: v.rows(),
                });
            }
        }
        let d = v.cols();
        let mut out = Tensor::zeros(&[index.n_segments, d]);
        for e in 0..index.len() {
            let we = w.data()[e];
            let src = v.row(index.source_row(e));
            let dst = out.row_mut(index.dst[e]);
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = *o + we * x;
            }
        }
        let rg = self.rg(values) || self.rg(weights);
        Ok(self.push(out, Op::SegmentWeightedSum(values, weights, index), rg))
    }

    /// Softmax of one score per edge, normalized within each destination segment.
    pub fn segment_softmax(&mut self, scores: Var, index: Rc<SegmentIndex>) -> Result<Var> {
        let x = self.value(scores);
        if x.numel() != index.len() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} scores for {} edges", x.numel(), index.len()),
            ));
        }
        let mut max = vec![T::neg_infinity(); index.n_segments];
        for (e, &s) in index.dst.iter().enumerate() {
            max[s] = max[s].max(x.data()[e]);
        }
        let mut data: Vec<T> = index
            .dst
            .iter()
            .enumerate()
            .map(|(e, &s)| (x.data()[e] - max[s]).exp())
            .collect();
        let mut denom = vec![T::zero(); index.n_segments];
        for (e, &s) in index.dst.iter().enumerate() {
            denom[s] = denom[s] + data[e];
        }
        for (e, &s) in index.dst.iter().enumerate() {
            data[e] = data[e] / denom[s];
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(scores);
        Ok(self.push(out, Op::SegmentSoftmax(scores, index), rg))
    }

    pub fn select_column(&mut self, a: Var, col: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || col >= v.cols() {
            return Err(Error::shape(
                "select_column",
                format!("column {col} of {:?}", v.shape()),
            ));
        }
        let data = (0..v.rows()).map(|i| v.at(i, col)).collect();
        let out = Tensor::new(vec![v.rows(), 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectColumn(a, col), rg))
    }

    /// Multiplies row `i` of `a` by `scale[i]`.
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (v, s) = (self.value(a), self.value(scale));
        if v.shape().len() != 2 || s.numel() != v.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} scaled by {:?}", v.shape(), s.shape()),
            ));
        }
        let d = v.cols();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * s.data()[i / d])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(scale);
        Ok(self.push(out, Op::ScaleRows(a, scale), rg))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::shape("row_norm", "needs a matrix"));
        }
        let data = (0..v.rows())
            .map(|i| v.row(i).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(vec![v.rows(), 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowNorm(a), rg))
    }

    /// `out[i] = a[i, cols[i]]` as an `n×1` column.
    pub fn pick_per_row(&mut self, a: Var, cols: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || cols.len() != v.rows() {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} picks from {:?}", cols.len(), v.shape()),
            ));
        }
        check_ids("pick_per_row", &cols, v.cols())?;
        let data = cols.iter().enumerate().map(|(i, &j)| v.at(i, j)).collect();
        let out = Tensor::new(vec![v.rows(), 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::PickPerRow(a, cols), rg))
    }

    /// Inverted dropout; the identity outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let v = self.value(a);
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            bound: self.bound_order,
            shapes: self.nodes.into_iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        let same = |t: &Tensor<T>, data: Vec<T>| Tensor::new(t.shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let da = matmul_raw(g.data(), vb.data(), m, n, k, false, true);
                    send(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let db = matmul_raw(va.data(), g.data(), k, m, n, true, false);
                    send(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(a) => send(*a, transpose2(g)),
            Op::Reshape(a) => send(*a, g.clone().reshaped(val(*a).shape())?),
            Op::Binary(kind, a, b, broadcast) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = va.cols();
                let rhs = |i: usize| if *broadcast { vb.data()[i % cols] } else { vb.data()[i] };
                if self.rg(*a) {
                    let da = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => same(g, (0..g.numel()).map(|i| g.data()[i] * rhs(i)).collect())?,
                    };
                    send(*a, da);
                }
                if self.rg(*b) {
                    let full: Vec<T> = match kind {
                        BinKind::Add => g.data().to_vec(),
                        BinKind::Sub => g.data().iter().map(|&x| -x).collect(),
                        BinKind::Mul => g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                    };
                    let db = if *broadcast {
                        let mut acc = vec![T::zero(); cols];
                        for (i, x) in full.into_iter().enumerate() {
                            acc[i % cols] = acc[i % cols] + x;
                        }
                        Tensor::new(vb.shape().to_vec(), acc)?
                    } else {
                        Tensor::new(vb.shape().to_vec(), full)?
                    };
                    send(*b, db);
                }
            }
            Op::ScalarMul(a, c) => send(*a, g.map(|x| x * *c)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Neg(a) => send(*a, g.map(|x| -x)),
            Op::Exp(a) => {
                let y = &node.value;
                send(*a, same(g, g.data().iter().zip(y.data()).map(|(&d, &y)| d * y).collect())?);
            }
            Op::Log(a) => {
                let x = val(*a);
                send(*a, same(g, g.data().iter().zip(x.data()).map(|(&d, &x)| d / x).collect())?);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                send(*a, same(g, data)?);
            }
            Op::LeakyRelu(a) => {
                let x = val(*a);
                let slope = T::lit(LEAKY_RELU_SLOPE);
                let sign = if self.fault == Some(Fault::LeakyReluBackwardSign) {
                    -T::one()
                } else {
                    T::one()
                };
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&d, &x)| sign * if x > T::zero() { d } else { d * slope })
                    .collect();
                send(*a, same(g, data)?);
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let y = &node.value;
                let (outer, len, inner) = axis_extents("softmax", y.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let gsum: T = (0..len).map(|l| g.data()[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] = g.data()[at(l)] - y.data()[at(l)].exp() * gsum;
                            }
                        } else {
                            let dot: T = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                            }
                        }
                    }
                }
                send(*a, same(y, dx)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_extents("concat", g.shape(), *axis)?;
                let total = g.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let vp = val(p);
                    let len = vp.shape()[*axis];
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(vp.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        send(p, Tensor::new(vp.shape().to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::SumAll(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumAxis(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = axis_extents("sum_axis", x.shape(), *axis)?;
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                send(*a, same(x, dx)?);
            }
            Op::LookupRows(table, ids) => {
                let t = val(*table);
                let mut dt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + x;
                    }
                }
                send(*table, dt);
            }
            Op::SegmentWeightedSum(values, weights, index) => {
                let (v, w) = (val(*values), val(*weights));
                if self.rg(*values) {
                    let mut dv = Tensor::zeros(v.shape());
                    for e in 0..index.len() {
                        let we = w.data()[e];
                        let gs = g.row(index.dst[e]);
                        for (o, &x) in dv.row_mut(index.source_row(e)).iter_mut().zip(gs) {
                            *o = *o + we * x;
                        }
                    }
                    send(*values, dv);
                }
                if self.rg(*weights) {
                    let dw = (0..index.len())
                        .map(|e| {
                            g.row(index.dst[e])
                                .iter()
                                .zip(v.row(index.source_row(e)))
                                .map(|(&a, &b)| a * b)
                                .sum()
                        })
                        .collect();
                    send(*weights, same(w, dw)?);
                }
            }
            Op::SegmentSoftmax(scores, index) => {
                let y = &node.value;
                let mut dot = vec![T::zero(); index.n_segments];
                for (e, &s) in index.dst.iter().enumerate() {
                    dot[s] = dot[s] + g.data()[e] * y.data()[e];
                }
                let dx = index
                    .dst
                    .iter()
                    .enumerate()
                    .map(|(e, &s)| y.data()[e] * (g.data()[e] - dot[s]))
                    .collect();
                send(*scores, same(y, dx)?);
            }
            Op::SelectColumn(a, col) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.shape());
                let c = x.cols();
                for i in 0..x.rows() {
                    dx.data_mut()[i * c + col] = g.data()[i];
                }
                send(*a, dx);
            }
            Op::ScaleRows(a, scale) => {
                let (x, s) = (val(*a), val(*scale));
                let d = x.cols();
                if self.rg(*a) {
                    let dx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * s.data()[i / d])
                        .collect();
                    send(*a, same(x, dx)?);
                }
                if self.rg(*scale) {
                    let ds = (0..x.rows())
                        .map(|i| g.row(i).iter().zip(x.row(i)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    send(*scale, same(s, ds)?);
                }
            }
            Op::RowNorm(a) => {
                let x = val(*a);
                let norms = &node.value;
                let d = x.cols();
                let dx = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &xv)| {
                        let n = norms.data()[i / d];
                        if n > T::zero() {
                            g.data()[i / d] * xv / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                send(*a, same(x, dx)?);
            }
            Op::PickPerRow(a, cols) => {
                let x = val(*a);
                let mut dx = Tensor::zeros(x.shape());
                let c = x.cols();
                for (i, &j) in cols.iter().enumerate() {
                    dx.data_mut()[i * c + j] = g.data()[i];
                }
                send(*a, dx);
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                send(*a, same(g, data)?);
            }
        }
        Ok(())
    }
}

fn transpose2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data).expect("transpose preserves size")
}

fn softmax_along<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_extents("softmax", x.shape(), axis)?;
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len)
                .map(|l| x.data()[at(l)])
                .fold(T::neg_infinity(), T::max);
            let sum: T = (0..len).map(|l| (x.data()[at(l)] - max).exp()).sum();
            for l in 0..len {
                let shifted = x.data()[at(l)] - max;
                out[at(l)] = if log {
                    shifted - sum.ln()
                } else {
                    shifted.exp() / sum
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: Vec<(ParamId, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Adds every bound parameter's gradient into the store. Parameters that
    /// were bound but not reached receive an explicit zero gradient.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.bound {
            match self.get(v) {
                Some(g) => store.accumulate_grad(id, g),
                None => store.accumulate_grad(id, &Tensor::zeros(&self.shapes[v.0])),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
        assert!(tape.matmul(b, b).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z, 1).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax(x, 1).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479764, 0.6652409557748218];
        for (v, e) in tape.value(s).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
        let one = tape.constant(t(&[1, 1], &[-7.5]));
        let s = tape.softmax(one, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);
        assert!(tape.softmax(one, 2).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1000.0, 1000.0]).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[-1.0, 0.0, 2.0]));
        let l = tape.leaky_relu(x);
        assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
        let x = tape.constant(t(&[1, 1], &[-3.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn leaky_relu_derivative_at_zero_is_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1], &[0.0]));
        let y = tape.leaky_relu(x);
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.2]);
    }

    #[test]
    fn concat_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let both = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(both), &[2, 8]);
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn segment_sum_cases() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let w = tape.constant(t(&[1], &[1.0]));
        let idx = Rc::new(SegmentIndex::new(vec![0], 1).unwrap());
        let out = tape.segment_weighted_sum(v, w, idx).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let v = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let w = tape.constant(t(&[2], &[0.5, 0.5]));
        let idx = Rc::new(SegmentIndex::new(vec![1, 1], 3).unwrap());
        let out = tape.segment_weighted_sum(v, w, idx).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.5, 0.5, 0.0, 0.0]);

        assert!(SegmentIndex::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn lookup_all_rows_and_duplicate_grad() {
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(table.clone());
        let all = tape.lookup_rows(x, Rc::new(vec![0, 1, 2])).unwrap();
        assert_eq!(tape.value(all), &table);
        assert!(tape.lookup_rows(x, Rc::new(vec![3])).is_err());

        let dup = tape.lookup_rows(x, Rc::new(vec![1, 1])).unwrap();
        let loss = tape.sum_all(dup);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_passthrough_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[100_000], 1.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.2, false, &mut rng).unwrap(), x);
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let survivors = tape.value(d).data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn backward_simple_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_use_doubles_gradient() {
        let f = |tape: &mut Tape<f64>, x: Var| {
            let e = tape.exp(x);
            let s = tape.softmax(e, 1).unwrap();
            let l = tape.log(s).unwrap();
            tape.sum_all(l)
        };
        let x0 = t(&[1, 3], &[0.3, -0.7, 1.1]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let once = f(&mut tape, x);
        let g1 = tape.backward(once).unwrap().get(x).unwrap().clone();

        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let a = f(&mut tape, x);
        let b = f(&mut tape, x);
        let twice = tape.add(a, b).unwrap();
        let g2 = tape.backward(twice).unwrap().get(x).unwrap().clone();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn row_broadcast_add() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2], &[10.0, 20.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let col = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        assert!(tape.add(x, col).is_err());
    }

    #[test]
    fn unreached_bound_param_gets_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let used = store.register("used", t(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.register("unused", t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        assert_eq!(tape.param(&store, used), u);
        tape.param(&store, unused);
        let s = tape.sum_all(u);
        tape.backward(s).unwrap().accumulate_into(&mut store);
        assert_eq!(store.grad(used).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(store.grad(unused).unwrap().data(), &[0.0; 3]);
    }
}
