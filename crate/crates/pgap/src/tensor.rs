//! Dense f64 tensors with reverse-mode differentiation on a per-pass tape.
//!
//! The engine implements exactly the operations the descriptor model needs:
//! row-wise affine maps, ReLU, column means, normalized Gram matrices, L2
//! normalization, log-softmax, Euclidean distances, and a handful of scalar
//! combinators for the losses. A `Tape` records one forward pass; `backward`
//! replays it in reverse and accumulates gradients into a `ParamSet`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate descriptor: vector norm {norm:.3e} below threshold")]
    DegenerateDescriptor { norm: f64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

const NORM_EPS: f64 = 1e-12;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || n != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build an n×m matrix from nested rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n = rows.len();
        if n == 0 {
            return Err(TensorError::EmptyInput("matrix rows"));
        }
        let m = rows[0].len();
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(TensorError::ShapeMismatch {
                    context: "matrix rows",
                    lhs: vec![m],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when interpreted as a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Trainable tensor with an accumulated gradient of the same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub id: usize,
}

/// Ordered collection of parameters; ids are stable indices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor) -> usize {
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter { value, grad, id });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    MeanRows { x: Var },
    Gram { x: Var },
    L2Normalize { x: Var },
    LogSoftmax { x: Var },
    Concat { parts: Vec<Var> },
    Distance { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Affine { x: Var, mul: f64 },
    NllPick { x: Var, class: usize },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Wengert tape: records one forward pass, replays it in reverse.
///
/// A tape is confined to a single thread and rebuilt per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(Var, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient flows past it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Record a parameter leaf; its gradient is written back on `backward`.
    pub fn param(&mut self, params: &ParamSet, id: usize) -> Var {
        let v = self.push(params.get(id).value.clone(), Op::Param);
        self.param_leaves.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at a node by the most recent `backward`.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// out[i,j] = sum_k x[i,k] w[k,j] + b[j]
    ///
    /// A 1-D `x` of length a is treated as a single row and yields a 1-D
    /// output of length b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let row_vec = xs.len() == 1;
        let (n, a) = if row_vec { (1, xs[0]) } else { (xs[0], xs[1]) };
        if xs.len() > 2 || ws.len() != 2 || a != ws[0] {
            return Err(TensorError::ShapeMismatch {
                context: "linear: x columns vs w rows",
                lhs: xs,
                rhs: ws,
            });
        }
        if bs != [ws[1]] {
            return Err(TensorError::ShapeMismatch {
                context: "linear: bias vs w columns",
                lhs: bs,
                rhs: ws,
            });
        }
        let m = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            row.copy_from_slice(bv);
            for k in 0..a {
                let xik = xv[i * a + k];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wv[k * m..(k + 1) * m];
                for j in 0..m {
                    row[j] += xik * wrow[j];
                }
            }
        }
        let shape = if row_vec { vec![m] } else { vec![n, m] };
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(out, Op::Relu { x })
    }

    /// Column means of an n×c matrix (global average pooling).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                context: "mean_rows expects a matrix",
                lhs: v.shape.clone(),
                rhs: vec![],
            });
        }
        let (n, c) = (v.shape[0], v.shape[1]);
        if n == 0 {
            return Err(TensorError::EmptyInput("mean_rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..n {
            for k in 0..c {
                out[k] += v.data[i * c + k];
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x }))
    }

    /// Normalized Gram matrix (1/n) FᵀF of an n×c matrix.
    ///
    /// Mirrored entries are bit-equal by construction.
    pub fn gram(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                context: "gram expects a matrix",
                lhs: v.shape.clone(),
                rhs: vec![],
            });
        }
        let (n, c) = (v.shape[0], v.shape[1]);
        if n == 0 {
            return Err(TensorError::EmptyInput("gram"));
        }
        let inv = 1.0 / n as f64;
        let mut out = vec![0.0; c * c];
        for a in 0..c {
            for b in a..c {
                let mut s = 0.0;
                for j in 0..n {
                    s += v.data[j * c + a] * v.data[j * c + b];
                }
                s *= inv;
                out[a * c + b] = s;
                out[b * c + a] = s;
            }
        }
        Ok(self.push(Tensor::new(vec![c, c], out)?, Op::Gram { x }))
    }

    /// v / ‖v‖₂ for a vector with norm above 1e-12.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let norm = v.data.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            return Err(TensorError::DegenerateDescriptor { norm });
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a / norm).collect(),
        };
        Ok(self.push(out, Op::L2Normalize { x }))
    }

    /// Numerically stable log-softmax of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if !v.is_finite() {
            return Err(TensorError::NonFinite("log_softmax input"));
        }
        let max = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data.iter().map(|&a| (a - max).exp()).sum::<f64>().ln();
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a - lse).collect(),
        };
        Ok(self.push(out, Op::LogSoftmax { x }))
    }

    /// Concatenate the flattened data of the parts into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::vector(data),
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Euclidean distance ‖a − b‖₂ between two same-shape tensors.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                context: "distance",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let d = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Distance { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                context: "add",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(TensorError::ShapeMismatch {
                context: "sub",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let out = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect(),
        };
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// mul·x + add, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| mul * a + add).collect(),
        };
        self.push(out, Op::Affine { x, mul })
    }

    /// Negative log-likelihood pick: −log_probs[class].
    pub fn nll_pick(&mut self, log_probs: Var, class: usize) -> Result<Var, TensorError> {
        let v = self.value(log_probs);
        if class >= v.len() {
            return Err(TensorError::IndexOutOfRange {
                index: class,
                len: v.len(),
            });
        }
        let out = Tensor::scalar(-v.data[class]);
        Ok(self.push(out, Op::NllPick { x: log_probs, class }))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Reverse traversal from a scalar loss. Parameter gradients are added
    /// into `params`; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape.clone(),
            });
        }
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Input | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let (n, a) = {
                        let s = self.nodes[x.0].value.shape();
                        if s.len() == 1 {
                            (1, s[0])
                        } else {
                            (s[0], s[1])
                        }
                    };
                    let m = self.nodes[w.0].value.shape()[1];
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    {
                        // dX = Ḡ Wᵀ
                        let wv = self.nodes[w.0].value.data.clone();
                        let gx = &mut self.nodes[x.0].grad;
                        for r in 0..n {
                            for k in 0..a {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[r * m + j] * wv[k * m + j];
                                }
                                gx[r * a + k] += s;
                            }
                        }
                    }
                    {
                        // dW = Xᵀ Ḡ
                        let xv = self.nodes[x.0].value.data.clone();
                        let gw = &mut self.nodes[w.0].grad;
                        for r in 0..n {
                            for k in 0..a {
                                let xrk = xv[r * a + k];
                                if xrk == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    gw[k * m + j] += xrk * g[r * m + j];
                                }
                            }
                        }
                    }
                    {
                        // db = column sums of Ḡ
                        let gb = &mut self.nodes[b.0].grad;
                        for r in 0..n {
                            for j in 0..m {
                                gb[j] += g[r * m + j];
                            }
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::Relu { x } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    {
                        let xv = &self.nodes[x.0].value;
                        let gv: Vec<f64> = xv
                            .data
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                            .collect();
                        let gx = &mut self.nodes[x.0].grad;
                        gx.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
                    }
                    self.nodes[i].grad = g;
                }
                Op::MeanRows { x } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let (n, c) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let inv = 1.0 / n as f64;
                    let gx = &mut self.nodes[x.0].grad;
                    for r in 0..n {
                        for k in 0..c {
                            gx[r * c + k] += g[k] * inv;
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::Gram { x } => {
                    // dF = F (Ḡ + Ḡᵀ) / n
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let (n, c) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let inv = 1.0 / n as f64;
                    let mut sym = vec![0.0; c * c];
                    for a in 0..c {
                        for b in 0..c {
                            sym[a * c + b] = (g[a * c + b] + g[b * c + a]) * inv;
                        }
                    }
                    let xv = self.nodes[x.0].value.data.clone();
                    let gx = &mut self.nodes[x.0].grad;
                    for j in 0..n {
                        for a in 0..c {
                            let mut s = 0.0;
                            for b in 0..c {
                                s += xv[j * c + b] * sym[b * c + a];
                            }
                            gx[j * c + a] += s;
                        }
                    }
                    self.nodes[i].grad = g;
                }
                Op::L2Normalize { x } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let out = self.nodes[i].value.data.clone();
                    let norm = self.nodes[x.0]
                        .value
                        .data
                        .iter()
                        .map(|a| a * a)
                        .sum::<f64>()
                        .sqrt();
                    let dot: f64 = g.iter().zip(&out).map(|(a, b)| a * b).sum();
                    let gx = &mut self.nodes[x.0].grad;
                    for k in 0..out.len() {
                        gx[k] += (g[k] - out[k] * dot) / norm;
                    }
                    self.nodes[i].grad = g;
                }
                Op::LogSoftmax { x } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let out = self.nodes[i].value.data.clone();
                    let gsum: f64 = g.iter().sum();
                    let gx = &mut self.nodes[x.0].grad;
                    for k in 0..out.len() {
                        gx[k] += g[k] - out[k].exp() * gsum;
                    }
                    self.nodes[i].grad = g;
                }
                Op::Concat { parts } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let gp = &mut self.nodes[p.0].grad;
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, b)| *a += b);
                        off += len;
                    }
                    self.nodes[i].grad = g;
                }
                Op::Distance { a, b } => {
                    let g = self.nodes[i].grad[0];
                    let d = self.nodes[i].value.item();
                    if d > NORM_EPS {
                        let diff: Vec<f64> = self.nodes[a.0]
                            .value
                            .data
                            .iter()
                            .zip(&self.nodes[b.0].value.data)
                            .map(|(x, y)| x - y)
                            .collect();
                        let ga = &mut self.nodes[a.0].grad;
                        for (gk, dk) in ga.iter_mut().zip(&diff) {
                            *gk += g * dk / d;
                        }
                        let gb = &mut self.nodes[b.0].grad;
                        for (gk, dk) in gb.iter_mut().zip(&diff) {
                            *gk -= g * dk / d;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    self.nodes[a.0]
                        .grad
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                    self.nodes[b.0]
                        .grad
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                    self.nodes[i].grad = g;
                }
                Op::Sub { a, b } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    self.nodes[a.0]
                        .grad
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                    self.nodes[b.0]
                        .grad
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x -= y);
                    self.nodes[i].grad = g;
                }
                Op::Affine { x, mul } => {
                    let g = std::mem::take(&mut self.nodes[i].grad);
                    self.nodes[x.0]
                        .grad
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += mul * b);
                    self.nodes[i].grad = g;
                }
                Op::NllPick { x, class } => {
                    let g = self.nodes[i].grad[0];
                    self.nodes[x.0].grad[class] -= g;
                }
                Op::Sum { x } => {
                    let g = self.nodes[i].grad[0];
                    self.nodes[x.0].grad.iter_mut().for_each(|a| *a += g);
                }
            }
        }

        for &(v, id) in &self.param_leaves {
            let node_grad = &self.nodes[v.0].grad;
            let pg = params.get_mut(id).grad.data_mut();
            pg.iter_mut().zip(node_grad).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(values: Tensor) -> (ParamSet, usize) {
        let mut ps = ParamSet::new();
        let id = ps.add(values);
        (ps, id)
    }

    #[test]
    fn linear_identity_weights() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = ps.add(Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let wv = tape.param(&ps, w);
        let bv = tape.param(&ps, b);
        let out = tape.linear(x, wv, bv).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_computed() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let b = ps.add(Tensor::vector(vec![1.0, 1.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 1.0]]).unwrap());
        let wv = tape.param(&ps, w);
        let bv = tape.param(&ps, b);
        let out = tape.linear(x, wv, bv).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let mut ps = ParamSet::new();
        let w = ps.add(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap());
        let b = ps.add(Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
        let wv = tape.param(&ps, w);
        let bv = tape.param(&ps, b);
        let err = tape.linear(x, wv, bv).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let out = tape.relu(x);
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 2.0]);

        let y = tape.input(Tensor::vector(vec![0.5, 3.0]));
        let oy = tape.relu(y);
        assert_eq!(tape.value(oy).data(), &[0.5, 3.0]);
    }

    #[test]
    fn mean_rows_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap());
        let out = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);

        let single = tape.input(Tensor::matrix(&[vec![5.0, 7.0]]).unwrap());
        let os = tape.mean_rows(single).unwrap();
        assert_eq!(tape.value(os).data(), &[5.0, 7.0]);
    }

    #[test]
    fn mean_rows_matches_independent_column_means() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut expected = vec![0.0; 4];
        for r in &rows {
            for (e, v) in expected.iter_mut().zip(r) {
                *e += v;
            }
        }
        expected.iter_mut().for_each(|e| *e /= 10.0);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&rows).unwrap());
        let out = tape.mean_rows(x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let out = tape.gram(x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.0, 0.0, 0.5]);

        let y = tape.input(Tensor::matrix(&[vec![2.0]]).unwrap());
        let oy = tape.gram(y).unwrap();
        assert_eq!(tape.value(oy).data(), &[4.0]);
    }

    #[test]
    fn gram_is_bitwise_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&rows).unwrap());
        let g = tape.gram(x).unwrap();
        let gv = tape.value(g);
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(gv.at2(a, b).to_bits(), gv.at2(b, a).to_bits());
            }
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let out = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.6, 0.8]);

        let unit = tape.input(Tensor::vector(vec![1.0, 0.0]));
        let ou = tape.l2_normalize(unit).unwrap();
        assert_eq!(tape.value(ou).data(), &[1.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0, 1e-15]));
        assert!(matches!(
            tape.l2_normalize(x),
            Err(TensorError::DegenerateDescriptor { .. })
        ));
    }

    #[test]
    fn log_softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0, 0.0]));
        let out = tape.log_softmax(x).unwrap();
        let ln2 = 2.0f64.ln();
        for v in tape.value(out).data() {
            assert!((v + ln2).abs() < 1e-12);
        }

        let big = tape.input(Tensor::vector(vec![1000.0, 0.0]));
        let ob = tape.log_softmax(big).unwrap();
        let d = tape.value(ob).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[0].abs() < 1e-9);
        assert!((d[1] + 1000.0).abs() < 1e-9);

        let probs: f64 = d.iter().map(|v| v.exp()).sum();
        assert!((probs - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_of_linear_gives_input_outer_product() {
        // loss = sum(x W), dW[k,j] = sum_i x[i,k]
        let (mut ps, w) = single_param(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = ps.add(Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let wv = tape.param(&ps, w);
        let bv = tape.param(&ps, b);
        let out = tape.linear(x, wv, bv).unwrap();
        let loss = tape.sum(out);
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[4.0, 4.0, 6.0, 6.0]);
        assert_eq!(ps.get(b).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_doubles_gradient() {
        let (mut ps, w) = single_param(Tensor::vector(vec![2.0, 5.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let loss = tape.sum(wv);
        tape.backward(loss, &mut ps).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.get(w).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut ps, w) = single_param(Tensor::vector(vec![2.0, 5.0]));
        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        assert!(matches!(
            tape.backward(wv, &mut ps),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn determinism_bit_identical() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::matrix(&rows).unwrap());
            let g = tape.gram(x).unwrap();
            let m = tape.mean_rows(x).unwrap();
            let cat = tape.concat(&[g, m]).unwrap();
            let norm = tape.l2_normalize(cat).unwrap();
            tape.value(norm).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
