//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass. Values are computed
//! eagerly when an operation is pushed; [`Tape::backward`] walks the record in
//! reverse and returns the gradient of a scalar output with respect to every
//! node that influences it.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index map used by [`Tape::gather`]: output entry `i` copies input entry
/// `src[i]`, or is zero when `src[i]` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherMap {
    rows: usize,
    cols: usize,
    src: Vec<u32>,
}

const GATHER_ZERO: u32 = u32::MAX;

impl GatherMap {
    pub fn new(rows: usize, cols: usize, src: impl IntoIterator<Item = Option<usize>>) -> Self {
        let src: Vec<u32> = src.into_iter().map(|s| s.map_or(GATHER_ZERO, |i| i as u32)).collect();
        assert_eq!(src.len(), rows * cols, "gather map length does not match shape");
        Self { rows, cols, src }
    }

    /// Row lookup: output row `i` is input row `ids[i]` of a `_×width` matrix.
    pub fn rows_of(ids: &[usize], width: usize) -> Self {
        let src = ids.iter().flat_map(|&r| (0..width).map(move |c| Some(r * width + c)));
        Self::new(ids.len(), width, src)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm(Var),
    Gather(Var, Rc<GatherMap>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxXent(Var, Rc<Vec<usize>>),
}

struct Node {
    value: Matrix,
    op: Op,
    /// Whether any tracked leaf feeds this node.
    tracked: bool,
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::MulScalar(a, b) => {
                f(*a);
                f(*b);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::ConcatCols(parts) => parts.iter().copied().for_each(f),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Silu(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SoftmaxXent(a, _) => f(*a),
        }
    }
}

/// Gradients returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let mut tracked = false;
        op.for_each_input(|v| tracked |= self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row` with the `1×c` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row shape mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += y;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with the `1×c` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row shape mismatch");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, y) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x *= y;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Matrix::matmul_t(self.value(a), ta, self.value(b), tb);
        self.push(value, Op::MatMul { a, b, ta, tb })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::Offset(a))
    }

    /// `a · s` where `s` is a 1×1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x))));
        self.push(value, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::log);
        self.push(value, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise softmax restricted to columns where `keep[c]` is true.
    /// Excluded columns get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(keep.len(), av.cols(), "mask length mismatch");
        let value = softmax_rows_masked(av, keep);
        self.push(value, Op::Softmax(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows() {
            let (mean, inv) = row_moments(av.row(r));
            for x in value.row_mut(r) {
                *x = (*x - mean) * inv;
            }
        }
        self.push(value, Op::LayerNorm(a))
    }

    pub fn gather(&mut self, a: Var, map: Rc<GatherMap>) -> Var {
        let av = self.value(a);
        let src = av.data();
        let data = map.src.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] }).collect();
        let value = Matrix::from_vec(map.rows, map.cols, data);
        self.push(value, Op::Gather(a, map))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let value = self.value(a).slice_cols(start, width);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::scalar(av.sum() / av.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Column means as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = vec![0.0; av.cols()];
        for r in 0..av.rows() {
            for (o, x) in out.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows() as f64;
        let value = Matrix::row_vector(out.into_iter().map(|v| v / n).collect());
        self.push(value, Op::MeanRows(a))
    }

    /// Mean softmax cross-entropy of each logit row against `targets[row]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let p = softmax_rows(lv);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -libm::log(p.get(r, t).max(1e-300)))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(Matrix::scalar(loss), Op::SoftmaxXent(logits, Rc::new(targets.to_vec())))
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..=output.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].tracked;
        let accumulate = |grads: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if needs(v) {
                accumulate(grads, v, g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (x, y) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                        *x *= y;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                // C = op(A)·op(B)
                if needs(*a) {
                    let ga = match (*ta, *tb) {
                        (false, false) => Matrix::matmul_t(g, false, bv, true),
                        (false, true) => Matrix::matmul_t(g, false, bv, false),
                        (true, false) => Matrix::matmul_t(bv, false, g, true),
                        (true, true) => Matrix::matmul_t(bv, true, g, true),
                    };
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let gb = match (*ta, *tb) {
                        (false, false) => Matrix::matmul_t(av, true, g, false),
                        (false, true) => Matrix::matmul_t(g, true, av, false),
                        (true, false) => Matrix::matmul_t(av, false, g, false),
                        (true, true) => Matrix::matmul_t(g, true, av, true),
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|x| x * k)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                accumulate(grads, *a, g.map(|x| x * k));
                let gs = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                accumulate(grads, *s, Matrix::scalar(gs));
            }
            Op::Silu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gx, x| {
                    let s = sigmoid(x);
                    gx * (s + x * s * (1.0 - s))
                }),
            ),
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip_map(&node.value, |gx, y| gx * y * (1.0 - y))),
            Op::Gelu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gx, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = libm::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    gx * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }),
            ),
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |gx, y| gx * y)),
            Op::Ln(a) => accumulate(grads, *a, g.zip_map(val(*a), |gx, x| gx / x)),
            Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |gx, x| 2.0 * gx * x)),
            Op::Clamp(a, lo, hi) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |gx, x| if x < *lo || x > *hi { 0.0 } else { gx }),
            ),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gy), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a) => {
                let xv = val(*a);
                let y = &node.value;
                let n = xv.cols() as f64;
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let (_, inv) = row_moments(xv.row(r));
                    let gs: f64 = g.row(r).iter().sum();
                    let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gx), yy) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = inv / n * (n * gx - gs - yy * gy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Gather(a, map) => {
                if !needs(*a) {
                    return;
                }
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                let d = ga.data_mut();
                for (gx, &s) in g.data().iter().zip(&map.src) {
                    if s != GATHER_ZERO {
                        d[s as usize] += gx;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    accumulate(grads, p, g.slice_cols(off, w));
                    off += w;
                }
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    for (o, gx) in ga.row_mut(row).iter_mut().zip(g.data()) {
                        *o = gx / r as f64;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxXent(a, targets) => {
                let mut p = softmax_rows(val(*a));
                let k = g.item() / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    let v = p.get(r, t);
                    p.set(r, t, v - 1.0);
                }
                accumulate(grads, *a, p.map(|x| x * k));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Matrix::row_vector(out)
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + LN_EPS))
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let keep = vec![true; m.cols()];
    softmax_rows_masked(m, &keep)
}

pub(crate) fn softmax_rows_masked(m: &Matrix, keep: &[bool]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .fold(f64::NEG_INFINITY, |a, (x, _)| a.max(*x));
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut total = 0.0;
        for ((o, x), k) in o.iter_mut().zip(row).zip(keep) {
            if *k {
                *o = libm::exp(x - max);
                total += *o;
            }
        }
        for o in o.iter_mut() {
            *o /= total;
        }
    }
    out
}
