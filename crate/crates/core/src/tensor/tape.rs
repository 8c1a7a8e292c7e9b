//! Reverse-mode automatic differentiation over a linear record of ops.
//!
//! Every op appends one node holding its output value and the handles of its
//! inputs. Because inputs always precede outputs, walking the record from
//! the end visits each node exactly once in a valid reverse topological
//! order.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    AddRow,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    GatherRows,
    Sum,
    MulConst,
    DifferenceFusion,
    SimilarityFusion,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softplus,
        OpKind::AddRow,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::Sum,
        OpKind::MulConst,
        OpKind::DifferenceFusion,
        OpKind::SimilarityFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::AddRow => "add_row",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::MulConst => "mul_const",
            OpKind::DifferenceFusion => "difference_fusion",
            OpKind::SimilarityFusion => "similarity_fusion",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown op {s:?}")))
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    AddRow(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    MulConst(Var, Vec<T>),
    DifferenceFusion(Var, Var, Var),
    SimilarityFusion(Var, Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Softplus(..) => OpKind::Softplus,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Sum(..) => OpKind::Sum,
            Op::MulConst(..) => OpKind::MulConst,
            Op::DifferenceFusion(..) => OpKind::DifferenceFusion,
            Op::SimilarityFusion(..) => OpKind::SimilarityFusion,
        }
    }
}

struct Node<'a, T: Real> {
    shape: Shape,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of executed ops. Leaves may borrow parameter storage for `'a`
/// so that large weight matrices are never copied onto the tape.
pub struct Tape<'a, T: Real = f64> {
    nodes: Vec<Node<'a, T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `dims` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(op: &'static str, shape: &Shape, axis: usize) -> Result<(usize, usize, usize)> {
    let dims = shape.dims();
    if axis >= dims.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for {shape}"),
        ));
    }
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    Ok((outer, dims[axis], inner))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Flips the sign of every gradient contribution made by ops of `kind`.
    /// Exists so the gradient checker can prove it notices a broken backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(
        &mut self,
        shape: Shape,
        value: Cow<'a, [T]>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.numel(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: op.kind().name(),
            });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor by reference. Gradients flow to it when the tensor
    /// itself requires them.
    pub fn leaf(&mut self, tensor: &'a Tensor<T>) -> Result<Var> {
        self.push(
            tensor.shape().clone(),
            Cow::Borrowed(tensor.data()),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Registers an owned tensor as a leaf.
    pub fn input(&mut self, tensor: Tensor<T>) -> Result<Var> {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().clone();
        self.push(shape, Cow::Owned(tensor.into_data()), Op::Leaf, rg)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::from_vec(dims, data)?;
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(n.shape.dims().to_vec(), n.value.to_vec()).expect("node shape is valid")
    }

    /// Accumulated gradient of a leaf after one or more [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves a leaf gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.leaf_grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a).as_matrix("matmul")?;
        let (k2, n) = self.shape(b).as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Shape::matrix(m, n)?, Cow::Owned(out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x).as_matrix("transpose")?;
        let v = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Shape::matrix(c, r)?, Cow::Owned(out), Op::Transpose(x), rg)
    }

    /// `x[n×m] + b` where `b` holds `m` values, added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.shape(x).as_matrix("add_row")?;
        if self.shape(b).numel() != m {
            return Err(Error::dim(
                "add_row",
                format!("bias {} does not match row width {m}", self.shape(b)),
            ));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..n {
            for (o, &bb) in out[r * m..(r + 1) * m].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(Shape::matrix(n, m)?, Cow::Owned(out), Op::AddRow(x, b), rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.is_scalar() {
            Ok(sa.clone())
        } else if sa.is_scalar() {
            Ok(sb.clone())
        } else {
            Err(Error::dim(op, format!("{sa} vs {sb}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.kind().name();
        let shape = self.binary_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = shape.numel();
        let out: Vec<T> = (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * factor).collect();
        let (shape, rg) = (self.shape(x).clone(), self.rg(x));
        self.push(shape, Cow::Owned(out), Op::Scale(x, factor), rg)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, rg) = (self.shape(x).clone(), self.rg(x));
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// Multiplies by a fixed array of the same shape (no gradient to the array).
    pub fn mul_const(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.shape(x).numel() {
            return Err(Error::dim(
                "mul_const",
                format!("{} factors for {}", factors.len(), self.shape(x)),
            ));
        }
        let out: Vec<T> = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let (shape, rg) = (self.shape(x).clone(), self.rg(x));
        self.push(shape, Cow::Owned(out), Op::MulConst(x, factors), rg)
    }

    /// Inverted dropout: zero each element with probability `rate` and scale
    /// survivors by `1/(1-rate)`. A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!(
                "dropout rate {rate} must be below 1"
            )));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.shape(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, mask)
    }

    // ---- three-way fusions ----------------------------------------------

    fn ternary_check(&self, op: &'static str, a: Var, b: Var, c: Var) -> Result<Shape> {
        let s = self.shape(a);
        if s != self.shape(b) || s != self.shape(c) {
            return Err(Error::dim(
                op,
                format!("{} / {} / {}", s, self.shape(b), self.shape(c)),
            ));
        }
        Ok(s.clone())
    }

    /// `(c - p) ⊙ (c - q)`
    pub fn difference_fusion(&mut self, c: Var, p: Var, q: Var) -> Result<Var> {
        let shape = self.ternary_check("difference_fusion", c, p, q)?;
        let (vc, vp, vq) = (self.value(c), self.value(p), self.value(q));
        let out: Vec<T> = (0..vc.len())
            .map(|i| (vc[i] - vp[i]) * (vc[i] - vq[i]))
            .collect();
        let rg = self.rg(c) || self.rg(p) || self.rg(q);
        self.push(shape, Cow::Owned(out), Op::DifferenceFusion(c, p, q), rg)
    }

    /// `c ⊙ p ⊙ q`
    pub fn similarity_fusion(&mut self, c: Var, p: Var, q: Var) -> Result<Var> {
        let shape = self.ternary_check("similarity_fusion", c, p, q)?;
        let (vc, vp, vq) = (self.value(c), self.value(p), self.value(q));
        let out: Vec<T> = (0..vc.len()).map(|i| vc[i] * vp[i] * vq[i]).collect();
        let rg = self.rg(c) || self.rg(p) || self.rg(q);
        self.push(shape, Cow::Owned(out), Op::SimilarityFusion(c, p, q), rg)
    }

    // ---- normalisation --------------------------------------------------

    /// Normalised exponentials along `axis`, computed after subtracting the
    /// maximum of each slice.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        let (outer, d, inner) = split_axis("softmax", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * d + j) * inner + i;
                let mx = (0..d).map(|j| v[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..d {
                    let e = (v[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..d {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(shape, Cow::Owned(out), Op::Softmax { x, axis }, rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        let (outer, d, inner) = split_axis("log_softmax", &shape, axis)?;
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * d + j) * inner + i;
                let mx = (0..d).map(|j| v[idx(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..d).map(|j| (v[idx(j)] - mx).exp()).sum();
                let lse = mx + z.ln();
                for j in 0..d {
                    out[idx(j)] = v[idx(j)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        self.push(shape, Cow::Owned(out), Op::LogSoftmax { x, axis }, rg)
    }

    // ---- structure ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no parts"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).clone();
        if axis >= base.rank() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base}"),
            ));
        }
        let mut dims = base.dims().to_vec();
        dims[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.rank() == base.rank()
                && s.dims()
                    .iter()
                    .zip(base.dims())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s} vs {base} along axis {axis}"),
                ));
            }
            dims[axis] += s.dims()[axis];
        }
        let shape = Shape::new(dims)?;
        let (outer, _, inner) = split_axis("concat", &shape, axis)?;
        let mut out = Vec::with_capacity(shape.numel());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p).dims()[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            shape,
            Cow::Owned(out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        let (outer, d, inner) = split_axis("slice", &shape, axis)?;
        if len == 0 || start + len > d {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} outside axis of length {d}", start + len),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut dims = shape.dims().to_vec();
        dims[axis] = len;
        let rg = self.rg(x);
        self.push(
            Shape::new(dims)?,
            Cow::Owned(out),
            Op::Slice { x, axis, start },
            rg,
        )
    }

    /// Row `i` of a matrix as a `1×m` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    /// Picks rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(table).as_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no indices"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} outside table of {rows} rows"),
            ));
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        self.push(
            Shape::matrix(ids.len(), cols)?,
            Cow::Owned(out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Shape::scalar(), Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d(loss)/d(node) back to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, Vec::new())
    }

    /// Like [`Tape::backward`], but the gradients of the given leaves start
    /// from the supplied buffers instead of zeros. Lets callers accumulate
    /// over many tapes without reallocating parameter-sized buffers.
    pub fn backward_seeded(&mut self, loss: Var, seeds: Vec<(Var, Vec<T>)>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        for (v, buf) in seeds {
            let node = &self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) || buf.len() != node.value.len() {
                return Err(Error::Internal(format!(
                    "seed for node {} is not a leaf buffer of {} values",
                    v.0,
                    node.value.len()
                )));
            }
            if node.requires_grad {
                self.store_leaf_grad(v.0, buf);
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        // seeded leaves continue accumulating in place
        for (i, slot) in self.leaf_grads.iter_mut().enumerate().take(loss.0 + 1) {
            if let Some(buf) = slot.take() {
                grads[i] = Some(buf);
            }
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.store_leaf_grad(i, g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn store_leaf_grad(&mut self, i: usize, g: Vec<T>) {
        match &mut self.leaf_grads[i] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let out = &node.value;

        // Hands the gradient buffer of an input to `f`, allocating it on
        // first use. Inputs that need no gradient are skipped.
        let with = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut Vec<T>)| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let n = nodes[v.0].value.len();
            f(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]));
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].shape.as_matrix("matmul").unwrap();
                let n = nodes[b.0].shape.dims()[1];
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                with(grads, *a, &mut |ga| gemm_nt(g, vb, ga, m, n, k));
                with(grads, *b, &mut |gb| gemm_tn(va, g, gb, k, m, n));
            }
            Op::Transpose(x) => {
                let (r, c) = nodes[x.0].shape.as_matrix("transpose").unwrap();
                with(grads, *x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                with(grads, *a, &mut |ga| accumulate(ga, g, T::one()));
                with(grads, *b, &mut |gb| accumulate(gb, g, sign));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let pick = |v: &[T], k: usize| if v.len() == 1 { v[0] } else { v[k] };
                with(grads, *a, &mut |ga| {
                    if ga.len() == 1 {
                        ga[0] += (0..g.len()).map(|k| g[k] * pick(vb, k)).sum();
                    } else {
                        for k in 0..g.len() {
                            ga[k] += g[k] * pick(vb, k);
                        }
                    }
                });
                with(grads, *b, &mut |gb| {
                    if gb.len() == 1 {
                        gb[0] += (0..g.len()).map(|k| g[k] * pick(va, k)).sum();
                    } else {
                        for k in 0..g.len() {
                            gb[k] += g[k] * pick(va, k);
                        }
                    }
                });
            }
            Op::Scale(x, f) => with(grads, *x, &mut |gx| accumulate(gx, g, *f)),
            Op::Relu(x) => with(grads, *x, &mut |gx| {
                for k in 0..g.len() {
                    if out[k] > T::zero() {
                        gx[k] += g[k];
                    }
                }
            }),
            Op::Sigmoid(x) => with(grads, *x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * out[k] * (T::one() - out[k]);
                }
            }),
            Op::Tanh(x) => with(grads, *x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Softplus(x) => {
                let vx = &nodes[x.0].value;
                with(grads, *x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * sigmoid(vx[k]);
                    }
                })
            }
            Op::MulConst(x, factors) => with(grads, *x, &mut |gx| {
                for k in 0..g.len() {
                    gx[k] += g[k] * factors[k];
                }
            }),
            Op::AddRow(x, b) => {
                let m = nodes[b.0].value.len();
                with(grads, *x, &mut |gx| accumulate(gx, g, T::one()));
                with(grads, *b, &mut |gb| {
                    for row in g.chunks(m) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::DifferenceFusion(c, p, q) => {
                let (vc, vp, vq) = (&nodes[c.0].value, &nodes[p.0].value, &nodes[q.0].value);
                with(grads, *c, &mut |gc| {
                    for k in 0..g.len() {
                        gc[k] += g[k] * ((vc[k] - vq[k]) + (vc[k] - vp[k]));
                    }
                });
                with(grads, *p, &mut |gp| {
                    for k in 0..g.len() {
                        gp[k] -= g[k] * (vc[k] - vq[k]);
                    }
                });
                with(grads, *q, &mut |gq| {
                    for k in 0..g.len() {
                        gq[k] -= g[k] * (vc[k] - vp[k]);
                    }
                });
            }
            Op::SimilarityFusion(c, p, q) => {
                let (vc, vp, vq) = (&nodes[c.0].value, &nodes[p.0].value, &nodes[q.0].value);
                with(grads, *c, &mut |gc| {
                    for k in 0..g.len() {
                        gc[k] += g[k] * vp[k] * vq[k];
                    }
                });
                with(grads, *p, &mut |gp| {
                    for k in 0..g.len() {
                        gp[k] += g[k] * vc[k] * vq[k];
                    }
                });
                with(grads, *q, &mut |gq| {
                    for k in 0..g.len() {
                        gq[k] += g[k] * vc[k] * vp[k];
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, d, inner) = split_axis("softmax", &node.shape, *axis).unwrap();
                with(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + ii;
                            let dot: T = (0..d).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..d {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, d, inner) = split_axis("log_softmax", &node.shape, *axis).unwrap();
                with(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * d + j) * inner + ii;
                            let total: T = (0..d).map(|j| g[idx(j)]).sum();
                            for j in 0..d {
                                gx[idx(j)] += g[idx(j)] - out[idx(j)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis("concat", &node.shape, *axis).unwrap();
                let width: usize = node.shape.dims()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].shape.dims()[*axis] * inner;
                    with(grads, p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * width + offset..o * width + offset + chunk];
                            for (acc, &v) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, d, inner) = split_axis("slice", &nodes[x.0].shape, *axis).unwrap();
                let len = node.shape.dims()[*axis];
                with(grads, *x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * d + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (acc, &v) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let cols = nodes[table.0].shape.dims()[1];
                with(grads, *table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                with(grads, *x, &mut |gx| gx.iter_mut().for_each(|a| *a += s));
            }
        }
    }
}

/// `acc += factor · g`, summing `g` when `acc` is a broadcast scalar.
fn accumulate<T: Real>(acc: &mut [T], g: &[T], factor: T) {
    if acc.len() == 1 && g.len() != 1 {
        acc[0] += factor * g.iter().copied().sum::<T>();
    } else {
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += factor * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let sel = tape.input(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let col = tape.input(t(&[2, 1], &[5.0, 7.0])).unwrap();
        let r = tape.matmul(sel, col).unwrap();
        assert_eq!(tape.value(r), &[5.0]);
        assert_eq!(tape.shape(r).dims(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let ones = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let z = tape.sub(x, x).unwrap();
        assert_eq!(tape.value(z), &[0.0, 0.0, 0.0]);
        let same = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let bad = tape.constant(vec![2], vec![1.0; 2]).unwrap();
        assert!(tape.add(x, bad).is_err());
        let two = tape.constant(vec![1], vec![2.0]).unwrap();
        let doubled = tape.mul(x, two).unwrap();
        assert_eq!(tape.value(doubled), &[-2.0, 0.0, 4.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 + 1e-12 && v[1] >= 0.0);
    }

    #[test]
    fn softmax_along_rows_and_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0])
            .unwrap();
        let rows = tape.softmax(x, 1).unwrap();
        for r in tape.value(rows).chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let cols = tape.softmax(x, 0).unwrap();
        let v = tape.value(cols).to_vec();
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape
            .constant(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0])
            .unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c).dims(), &[2, 5]);
        assert_eq!(
            tape.value(c),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let a2 = tape.slice(c, 1, 0, 2).unwrap();
        let b2 = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
        let only = tape.concat(&[a], 1).unwrap();
        assert_eq!(only, a);
        let wrong = tape.constant(vec![3, 1], vec![0.0; 3]).unwrap();
        assert!(tape.concat(&[a, wrong], 1).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let x = t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let s = tape.sum(xv).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);
        // a second call accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[4.0, -8.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(xv).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x).unwrap();
        assert!(matches!(tape.backward(xv), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1], vec![f64::MAX]).unwrap();
        assert!(matches!(
            tape.add(x, x),
            Err(Error::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn dropout_scales_survivors() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1000], vec![1.0; 1000]).unwrap();
        let d = tape.dropout(x, 0.5, &mut rng).unwrap();
        let v = tape.value(d);
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((400..600).contains(&kept));
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    }
}
