//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes; building an expression
//! records the op and its operands, `backward` walks the arena in reverse.
//! Only the operations this pipeline needs exist: dense matmul, elementwise
//! arithmetic, ReLU/tanh, row mean-pooling, L2 normalization, dot products,
//! and vertical concatenation. Parameters enter via [`Tape::leaf`]; data
//! enters via [`Tape::constant`] and receives no gradient.

use crate::linalg::Mat;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Abs(usize),
    MeanRows(usize),
    Sum(usize),
    Dot(usize, usize),
    Normalize(usize),
    ConcatRows(usize, usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Trainable parameter node.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Data node; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x / y);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::Div(a.0, b.0), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.scale(s);
        let ng = self.needs(a.0);
        self.push(v, Op::Scale(a.0, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + s);
        let ng = self.needs(a.0);
        self.push(v, Op::AddScalar(a.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(v, Op::Relu(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        let ng = self.needs(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::abs);
        let ng = self.needs(a.0);
        self.push(v, Op::Abs(a.0), ng)
    }

    /// Mean over rows: `(r, c) -> (1, c)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mean_rows();
        let ng = self.needs(a.0);
        self.push(v, Op::MeanRows(a.0), ng)
    }

    /// Sum of all entries to a `(1, 1)` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(a.0);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a.0), ng)
    }

    /// Dot product of two equal-size tensors, flattened.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.len(), vb.len(), "dot length mismatch");
        let d = crate::linalg::dot(va.data(), vb.data());
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(Mat::from_vec(1, 1, vec![d]), Op::Dot(a.0, b.0), ng)
    }

    /// L2-normalize the flattened tensor. A zero input maps to the fixed
    /// basis vector e1 and propagates no gradient.
    pub fn normalize(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = crate::linalg::norm(x.data());
        let v = if n < 1e-300 {
            log::warn!("normalizing a zero vector; falling back to e1");
            let mut e = Mat::zeros(x.rows(), x.cols());
            e.data_mut()[0] = 1.0;
            e
        } else {
            x.scale(1.0 / n)
        };
        let ng = self.needs(a.0);
        self.push(v, Op::Normalize(a.0), ng)
    }

    /// Stack two matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.cols(), vb.cols(), "concat_rows column mismatch");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let v = Mat::from_vec(va.rows() + vb.rows(), va.cols(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(v, Op::ConcatRows(a.0, b.0), ng)
    }

    /// Cosine similarity as `dot(normalize(a), normalize(b))`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let na = self.normalize(a);
        let nb = self.normalize(b);
        self.dot(na, nb)
    }

    /// Mean of a list of scalar nodes; `None` if the list is empty.
    pub fn mean_scalars(&mut self, vars: &[Var]) -> Option<Var> {
        let (&first, rest) = vars.split_first()?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v);
        }
        Some(self.scale(acc, 1.0 / vars.len() as f64))
    }

    /// Reverse-mode sweep from a scalar node. Returns one gradient slot per
    /// node; nodes that do not influence `loss` (or need no gradient) stay
    /// `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                // Two-operand arms compute each side's gradient only if that
                // operand participates in differentiation; in inference-like
                // programs (frozen weights as constants) this skips the
                // expensive weight-gradient products entirely.
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(&mut grads, b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let ga = g.zip_map(&self.nodes[b].value, |gi, bi| gi * bi);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = g.zip_map(&self.nodes[a].value, |gi, ai| gi * ai);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b].value;
                    let va = &self.nodes[a].value;
                    if self.needs(a) {
                        let ga = g.zip_map(vb, |gi, bi| gi / bi);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = g.clone();
                        for ((gi, &ai), &bi) in
                            gb.data_mut().iter_mut().zip(va.data()).zip(vb.data())
                        {
                            *gi = -*gi * ai / (bi * bi);
                        }
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let ga = g.matmul_transpose(&self.nodes[b].value);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = self.nodes[a].value.transpose_matmul(&g);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, a, g.scale(s)),
                Op::AddScalar(a) => self.accumulate(&mut grads, a, g),
                Op::Relu(a) => {
                    let ga =
                        g.zip_map(&self.nodes[a].value, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&self.nodes[i].value, |gi, y| gi * (1.0 - y * y));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(&self.nodes[a].value, |gi, x| gi * sign(x));
                    self.accumulate(&mut grads, a, ga);
                }
                Op::MeanRows(a) => {
                    let rows = self.nodes[a].value.rows();
                    let inv = 1.0 / rows as f64;
                    let cols = g.cols();
                    let ga = Mat::from_fn(rows, cols, |_, c| g.get(0, c) * inv);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let src = &self.nodes[a].value;
                    let ga = Mat::from_fn(src.rows(), src.cols(), |_, _| s);
                    self.accumulate(&mut grads, a, ga);
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    if self.needs(a) {
                        let ga = self.nodes[b].value.scale(s);
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = self.nodes[a].value.scale(s);
                        self.accumulate(&mut grads, b, gb);
                    }
                }
                Op::Normalize(a) => {
                    let x = &self.nodes[a].value;
                    let n = crate::linalg::norm(x.data());
                    if n < 1e-300 {
                        // Fallback branch is constant.
                        continue;
                    }
                    let z = &self.nodes[i].value;
                    let zg = crate::linalg::dot(z.data(), g.data());
                    let mut ga = g.clone();
                    for (gi, &zi) in ga.data_mut().iter_mut().zip(z.data()) {
                        *gi = (*gi - zi * zg) / n;
                    }
                    self.accumulate(&mut grads, a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a].value.rows();
                    let cols = g.cols();
                    if self.needs(a) {
                        let ga = Mat::from_fn(ra, cols, |r, c| g.get(r, c));
                        self.accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let rb = self.nodes[b].value.rows();
                        let gb = Mat::from_fn(rb, cols, |r, c| g.get(r + ra, c));
                        self.accumulate(&mut grads, b, gb);
                    }
                }
            }
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], target: usize, g: Mat) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient for a specific node after [`Tape::backward`].
    pub fn grad_of<'a>(grads: &'a [Option<Mat>], v: Var) -> Option<&'a Mat> {
        grads[v.0].as_ref()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Central-difference numeric gradient of `f` with respect to `params[which]`.
/// This is the independent oracle used by the gradient-correctness tests.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&[Mat]) -> f64,
    params: &[Mat],
    which: usize,
    h: f64,
) -> Mat {
    let mut work: Vec<Mat> = params.to_vec();
    let (rows, cols) = params[which].shape();
    let mut grad = Mat::zeros(rows, cols);
    for i in 0..params[which].len() {
        let orig = params[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let up = f(&work);
        work[which].data_mut()[i] = orig - h;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max relative error between an analytic and a numeric gradient, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
