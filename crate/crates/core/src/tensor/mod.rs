//! Define-by-run reverse-mode differentiation over dense row-major matrices.
//!
//! Every node holds a `[rows, cols]` array computed eagerly when the node is
//! created, so building the graph *is* the forward pass. Nodes are appended in
//! creation order, which is a valid topological order for [`Graph::backward`].
//! Parameters are referenced from a [`ParamStore`] without copying.

mod gradcheck;
pub mod kernels;
mod params;

pub use gradcheck::{gradcheck, GradcheckError};
pub use params::{Gradients, Param, ParamId, ParamStore, TrainableMask};

use crate::error::{Error, Result};
use kernels::{gemm_ab, gemm_abt, gemm_atb, log_softmax_rows, sigmoid};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    /// x[m,k] · w[n,k]ᵀ + b[1,n]
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Reshape(Var),
    Im2col { a: Var, t: usize, f: usize, c: usize },
    MaxPool { a: Var, argmax: Vec<usize> },
    Conv1d { a: Var, kernel: Var },
    Sum(Var),
    Gather { a: Var, idx: Vec<usize> },
    Embedding { table: Var, idx: Vec<usize> },
    Dropout { a: Var, mask: Vec<f64> },
    Ctc { a: Var, grad: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Im2col { .. } => "im2col",
            Op::MaxPool { .. } => "max_pool",
            Op::Conv1d { .. } => "conv1d",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Ctc { .. } => "ctc",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

/// A tape of nodes bound to one parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: Option<&'p TrainableMask>,
    track: bool,
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Backward {
    pub params: Gradients,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// d(loss)/d(var), if the node required a gradient and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<'p> Graph<'p> {
    /// A graph that records gradients for every parameter.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            trainable: None,
            track: true,
            nodes: Vec::new(),
        }
    }

    /// Gradients are only tracked for parameters the mask marks trainable;
    /// frozen sub-networks are skipped entirely during backward.
    pub fn with_mask(params: &'p ParamStore, mask: &'p TrainableMask) -> Self {
        Graph {
            params,
            trainable: Some(mask),
            track: true,
            nodes: Vec::new(),
        }
    }

    /// Forward-only graph.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            params,
            trainable: None,
            track: false,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => self.params.data(id),
            _ => &n.value,
        }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- leaves ----------------------------------------------------------

    /// Constant input of shape rows×cols.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(self.mismatch("input", format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(self.push(Op::Input, rows, cols, data, false))
    }

    /// Input leaf whose gradient is reported by [`Backward::grad`].
    pub fn input_with_grad(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        let v = self.input(rows, cols, data)?;
        self.nodes[v.0].requires_grad = self.track;
        Ok(v)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(Op::Input, rows, cols, vec![0.0; rows * cols], false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.get(id);
        let (rows, cols) = p.matrix_dims();
        let rg = self.trainable.is_none_or(|m| m.is_trainable(id));
        self.push(Op::Param(id), rows, cols, Vec::new(), rg)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.shape(x);
        let (n, k2) = self.shape(w);
        if k != k2 {
            return Err(self.mismatch("affine", format!("x {m}x{k} vs w {n}x{k2}")));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, n) {
                return Err(self.mismatch("affine", format!("bias {:?} vs out {n}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        gemm_abt(self.value(x), self.value(w), m, k, n, &mut out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Op::Affine { x, w, b }, m, n, out, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_ab(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), m, n, out, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, usize, usize)> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok((out, r, c))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), r, c, out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), r, c, out, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, r, c) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), r, c, out, rg))
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(self.mismatch("add_row", format!("{r}x{c} + {:?}", self.shape(row))));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|ar| ar.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), r, c, out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), r, c, out, rg)
    }

    // ---- nonlinearities ----------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(op, r, c, out, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        log_softmax_rows(self.value(a), c, &mut out);
        out.iter_mut().for_each(|v| *v = v.exp());
        let rg = self.rg(&[a]);
        self.push(Op::Softmax(a), r, c, out, rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        log_softmax_rows(self.value(a), c, &mut out);
        let rg = self.rg(&[a]);
        self.push(Op::LogSoftmax(a), r, c, out, rg)
    }

    // ---- structure ---------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|p| self.shape(*p).0).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(self.mismatch("concat_cols", "row counts differ or no parts".into()));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|p| self.shape(*p).1).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|p| self.shape(*p).1 != cols) {
            return Err(self.mismatch("concat_rows", "column counts differ or no parts".into()));
        }
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), rows, cols, out, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(self.mismatch("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in av.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceCols { a, start }, r, len, out, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(self.mismatch("slice_rows", format!("[{start}, {}) of {r}", start + len)));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows { a, start }, len, c, out, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(self.mismatch("reshape", format!("{r}x{c} -> {rows}x{cols}")));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), rows, cols, out, rg))
    }

    /// 3×3 same-padded patch extraction for a channels-last map of
    /// `t × f × c` values. Output is `[t·f, 9·c]`; column index is
    /// `(dt·3 + df)·c + channel`.
    pub fn im2col3x3(&mut self, a: Var, t: usize, f: usize, c: usize) -> Result<Var> {
        let (r, cc) = self.shape(a);
        if r * cc != t * f * c {
            return Err(self.mismatch("im2col", format!("{r}x{cc} is not {t}x{f}x{c}")));
        }
        let av = self.value(a);
        let cols = 9 * c;
        let mut out = vec![0.0; t * f * cols];
        for ti in 0..t {
            for fi in 0..f {
                let orow = &mut out[(ti * f + fi) * cols..(ti * f + fi + 1) * cols];
                for dt in 0..3 {
                    let st = ti as isize + dt as isize - 1;
                    if st < 0 || st >= t as isize {
                        continue;
                    }
                    for df in 0..3 {
                        let sf = fi as isize + df as isize - 1;
                        if sf < 0 || sf >= f as isize {
                            continue;
                        }
                        let src = (st as usize * f + sf as usize) * c;
                        let dst = (dt * 3 + df) * c;
                        orow[dst..dst + c].copy_from_slice(&av[src..src + c]);
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Im2col { a, t, f, c }, t * f, cols, out, rg))
    }

    /// 2×2 stride-2 max-pool with ceiling on odd extents. Output is
    /// `[ceil(t/2)·ceil(f/2), c]`.
    pub fn max_pool2x2(&mut self, a: Var, t: usize, f: usize, c: usize) -> Result<Var> {
        let (r, cc) = self.shape(a);
        if r * cc != t * f * c || t == 0 || f == 0 {
            return Err(self.mismatch("max_pool", format!("{r}x{cc} is not {t}x{f}x{c}")));
        }
        let (t2, f2) = (t.div_ceil(2), f.div_ceil(2));
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; t2 * f2 * c];
        let mut argmax = vec![0usize; t2 * f2 * c];
        for ti in 0..t {
            for fi in 0..f {
                let base = ((ti / 2) * f2 + fi / 2) * c;
                let src = (ti * f + fi) * c;
                for ch in 0..c {
                    if av[src + ch] > out[base + ch] {
                        out[base + ch] = av[src + ch];
                        argmax[base + ch] = src + ch;
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaxPool { a, argmax }, t2 * f2, c, out, rg))
    }

    /// Same-padded 1-D convolution of a `[1, t]` row with a `[channels, width]`
    /// kernel (odd width). Output is `[t, channels]`.
    pub fn conv1d(&mut self, a: Var, kernel: Var) -> Result<Var> {
        let (r, t) = self.shape(a);
        let (ch, width) = self.shape(kernel);
        if r != 1 || width % 2 == 0 {
            return Err(self.mismatch("conv1d", format!("input {r}x{t}, kernel {ch}x{width}")));
        }
        let half = width / 2;
        let av = self.value(a);
        let kv = self.value(kernel);
        let mut out = vec![0.0; t * ch];
        for ti in 0..t {
            for c in 0..ch {
                let mut s = 0.0;
                for k in 0..width {
                    let src = ti as isize + k as isize - half as isize;
                    if src >= 0 && (src as usize) < t {
                        s += kv[c * width + k] * av[src as usize];
                    }
                }
                out[ti * ch + c] = s;
            }
        }
        let rg = self.rg(&[a, kernel]);
        Ok(self.push(Op::Conv1d { a, kernel }, t, ch, out, rg))
    }

    // ---- reductions & indexing ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), 1, 1, vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Picks `a[i, idx[i]]` for each row, giving `[rows, 1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(self.mismatch("gather", format!("{r}x{c} with indices {idx:?}")));
        }
        let av = self.value(a);
        let out = idx.iter().enumerate().map(|(row, &i)| av[row * c + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gather { a, idx: idx.to_vec() }, r, 1, out, rg))
    }

    /// Rows of `table` selected by `idx`, giving `[idx.len(), cols]`.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::TokenOutOfRange { index: bad, size: r });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Op::Embedding { table, idx: idx.to_vec() }, idx.len(), c, out, rg))
    }

    /// Multiplies by a precomputed keep-mask (entries 0 or 1/(1−p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(self.mismatch("dropout", format!("mask of {} for {r}x{c}", mask.len())));
        }
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Dropout { a, mask }, r, c, out, rg))
    }

    /// Custom scalar op whose gradient w.r.t. `a` is precomputed by the caller.
    pub(crate) fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if grad.len() != r * c {
            return Err(self.mismatch("ctc", format!("gradient of {} for {r}x{c}", grad.len())));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Ctc { a, grad }, 1, 1, vec![value], rg))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut pgrads = Gradients::new(self.params.len());
        if !self.nodes[loss.0].requires_grad {
            return Ok(Backward {
                params: pgrads,
                nodes: grads,
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let slot = pgrads.slot(*id, g.len());
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::Affine { x, w, b } => {
                    let (m, k) = self.shape(*x);
                    let n = node.cols;
                    if self.requires_grad(*x) {
                        gemm_ab(&g, self.value(*w), m, n, k, self.acc(&mut grads, *x));
                    }
                    if self.requires_grad(*w) {
                        gemm_atb(&g, self.value(*x), m, n, k, self.acc(&mut grads, *w));
                    }
                    if let Some(b) = b {
                        if self.requires_grad(*b) {
                            let gb = self.acc(&mut grads, *b);
                            for row in g.chunks(n) {
                                gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    if self.requires_grad(*a) {
                        gemm_abt(&g, self.value(*b), m, n, k, self.acc(&mut grads, *a));
                    }
                    if self.requires_grad(*b) {
                        gemm_atb(self.value(*a), &g, m, k, n, self.acc(&mut grads, *b));
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            add_into(self.acc(&mut grads, v), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        add_into(self.acc(&mut grads, *a), &g);
                    }
                    if self.requires_grad(*b) {
                        let gb = self.acc(&mut grads, *b);
                        gb.iter_mut().zip(&g).for_each(|(s, v)| *s -= v);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        let bv = self.value(*b);
                        let ga = self.acc(&mut grads, *a);
                        for ((s, gi), bi) in ga.iter_mut().zip(&g).zip(bv) {
                            *s += gi * bi;
                        }
                    }
                    if self.requires_grad(*b) {
                        let av = self.value(*a);
                        let gb = self.acc(&mut grads, *b);
                        for ((s, gi), ai) in gb.iter_mut().zip(&g).zip(av) {
                            *s += gi * ai;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*a) {
                        add_into(self.acc(&mut grads, *a), &g);
                    }
                    if self.requires_grad(*row) {
                        let gr = self.acc(&mut grads, *row);
                        for chunk in g.chunks(node.cols) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let ga = self.acc(&mut grads, *a);
                    ga.iter_mut().zip(&g).for_each(|(s, v)| *s += v * f);
                }
                Op::Tanh(a) => {
                    let ga = self.acc(&mut grads, *a);
                    for ((s, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *s += gi * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = self.acc(&mut grads, *a);
                    for ((s, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        *s += gi * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let ga = self.acc(&mut grads, *a);
                    for ((s, gi), y) in ga.iter_mut().zip(&g).zip(out) {
                        if *y > 0.0 {
                            *s += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let c = node.cols;
                    let ga = self.acc(&mut grads, *a);
                    for ((gr, yr), sr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dotp: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((s, gi), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += y * (gi - dotp);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let c = node.cols;
                    let ga = self.acc(&mut grads, *a);
                    for ((gr, yr), sr) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((s, gi), y) in sr.iter_mut().zip(gr).zip(yr) {
                            *s += gi - y.exp() * total;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p).1;
                        if self.requires_grad(*p) {
                            let gp = self.acc(&mut grads, *p);
                            for (r, row) in gp.chunks_mut(pc).enumerate() {
                                add_into(row, &g[r * node.cols + off..r * node.cols + off + pc]);
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.requires_grad(*p) {
                            add_into(self.acc(&mut grads, *p), &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::SliceCols { a, start } => {
                    let ac = self.shape(*a).1;
                    let ga = self.acc(&mut grads, *a);
                    for (row, gr) in ga.chunks_mut(ac).zip(g.chunks(node.cols)) {
                        add_into(&mut row[*start..*start + node.cols], gr);
                    }
                }
                Op::SliceRows { a, start } => {
                    let c = node.cols;
                    let ga = self.acc(&mut grads, *a);
                    add_into(&mut ga[start * c..(start + node.rows) * c], &g);
                }
                Op::Reshape(a) => add_into(self.acc(&mut grads, *a), &g),
                Op::Im2col { a, t, f, c } => {
                    let (t, f, c) = (*t, *f, *c);
                    let cols = 9 * c;
                    let ga = self.acc(&mut grads, *a);
                    for ti in 0..t {
                        for fi in 0..f {
                            let grow = &g[(ti * f + fi) * cols..(ti * f + fi + 1) * cols];
                            for dt in 0..3 {
                                let st = ti as isize + dt as isize - 1;
                                if st < 0 || st >= t as isize {
                                    continue;
                                }
                                for df in 0..3 {
                                    let sf = fi as isize + df as isize - 1;
                                    if sf < 0 || sf >= f as isize {
                                        continue;
                                    }
                                    let dst = (st as usize * f + sf as usize) * c;
                                    let src = (dt * 3 + df) * c;
                                    add_into(&mut ga[dst..dst + c], &grow[src..src + c]);
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { a, argmax } => {
                    let ga = self.acc(&mut grads, *a);
                    for (gi, &src) in g.iter().zip(argmax) {
                        ga[src] += gi;
                    }
                }
                Op::Conv1d { a, kernel } => {
                    let t = node.rows;
                    let ch = node.cols;
                    let width = self.shape(*kernel).1;
                    let half = width / 2;
                    if self.requires_grad(*a) {
                        let kv = self.value(*kernel);
                        let ga = self.acc(&mut grads, *a);
                        for ti in 0..t {
                            for c in 0..ch {
                                let go = g[ti * ch + c];
                                for k in 0..width {
                                    let src = ti as isize + k as isize - half as isize;
                                    if src >= 0 && (src as usize) < t {
                                        ga[src as usize] += go * kv[c * width + k];
                                    }
                                }
                            }
                        }
                    }
                    if self.requires_grad(*kernel) {
                        let av = self.value(*a);
                        let gk = self.acc(&mut grads, *kernel);
                        for ti in 0..t {
                            for c in 0..ch {
                                let go = g[ti * ch + c];
                                for k in 0..width {
                                    let src = ti as isize + k as isize - half as isize;
                                    if src >= 0 && (src as usize) < t {
                                        gk[c * width + k] += go * av[src as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let ga = self.acc(&mut grads, *a);
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
                Op::Gather { a, idx } => {
                    let c = self.shape(*a).1;
                    let ga = self.acc(&mut grads, *a);
                    for (row, &i) in idx.iter().enumerate() {
                        ga[row * c + i] += g[row];
                    }
                }
                Op::Embedding { table, idx } => {
                    let c = node.cols;
                    let gt = self.acc(&mut grads, *table);
                    for (row, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * c..(i + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                }
                Op::Dropout { a, mask } => {
                    let ga = self.acc(&mut grads, *a);
                    for ((s, gi), m) in ga.iter_mut().zip(&g).zip(mask) {
                        *s += gi * m;
                    }
                }
                Op::Ctc { a, grad } => {
                    let ga = self.acc(&mut grads, *a);
                    for (s, d) in ga.iter_mut().zip(grad) {
                        *s += g[0] * d;
                    }
                }
            }
            if node.requires_grad && !matches!(node.op, Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        Ok(Backward {
            params: pgrads,
            nodes: grads,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = &self.nodes[v.0];
        grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols])
    }

    /// Op kind of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests;
