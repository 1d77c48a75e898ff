//! Reverse-mode differentiation over batched matrices.
//!
//! Nodes hold an `n x c` value (one row per example). Ops are recorded in
//! evaluation order; `backward` walks the tape once in reverse, summing
//! cotangents into every ancestor of the root.

use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Vjp<'a> = Box<dyn Fn(&Matrix) -> Matrix + 'a>;

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Tanh(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    LogSoftmax(Var),
    NllMean(Var, Vec<usize>),
    PickSum(Var, Vec<usize>),
    SqErrorMean(Var, Matrix),
    Custom(Var, Vjp<'a>),
}

struct Node<'a> {
    value: Matrix,
    op: Op<'a>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Grads(Vec<Option<Matrix>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` is not an
    /// ancestor of the root.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.nrows(), like.ncols()))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + 1 b` where `b` is a `1 x c` row broadcast over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        let bias = self.value(b);
        for j in 0..v.ncols() {
            let bj = bias[(0, j)];
            v.column_mut(j).add_scalar_mut(bj);
        }
        self.push(v, Op::AddBias(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    /// Multiplies row `i` of `a` by the constant `c[i]`.
    pub fn scale_rows(&mut self, a: Var, c: Vec<f64>) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(c.len(), v.nrows(), "scale_rows: one factor per row");
        for (i, &ci) in c.iter().enumerate() {
            v.row_mut(i).scale_mut(ci);
        }
        self.push(v, Op::ScaleRows(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Column-wise concatenation of blocks with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), rows, "concat: row counts differ");
            v.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.nrows() {
            let m = x.row(i).max();
            let lse = m + x.row(i).iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            v.row_mut(i).add_scalar_mut(-lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll_mean(&mut self, log_probs: Var, labels: &[usize]) -> Var {
        let lp = self.value(log_probs);
        assert_eq!(lp.nrows(), labels.len());
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| lp[(i, y)]).sum();
        let v = Matrix::from_element(1, 1, -s / labels.len() as f64);
        self.push(v, Op::NllMean(log_probs, labels.to_vec()))
    }

    /// `sum_i a[i, labels[i]]`; rows stay independent, so the gradient of the
    /// sum is the stack of per-row gradients.
    pub fn pick_sum(&mut self, a: Var, labels: &[usize]) -> Var {
        let m = self.value(a);
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| m[(i, y)]).sum();
        self.push(Matrix::from_element(1, 1, s), Op::PickSum(a, labels.to_vec()))
    }

    /// Mean over rows of the squared L2 distance to `target`.
    pub fn sq_error_mean(&mut self, a: Var, target: Matrix) -> Var {
        let d = self.value(a) - &target;
        let v = Matrix::from_element(1, 1, d.norm_squared() / d.nrows() as f64);
        self.push(v, Op::SqErrorMean(a, target))
    }

    /// Records an externally computed function of `input` with its
    /// vector-Jacobian product.
    pub fn custom(
        &mut self,
        input: Var,
        value: Matrix,
        vjp: impl Fn(&Matrix) -> Matrix + 'a,
    ) -> Var {
        self.push(value, Op::Custom(input, Box::new(vjp)))
    }

    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        self.backward_seeded(root, Matrix::from_element(1, 1, 1.0))
    }

    pub fn backward_seeded(&self, root: Var, seed: Matrix) -> Grads {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = &g * self.value(*b).transpose();
                    let db = self.value(*a).transpose() * &g;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(a, b) => {
                    let db = Matrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::ScaleRows(a, c) => {
                    let mut d = g.clone();
                    for (r, &cr) in c.iter().enumerate() {
                        d.row_mut(r).scale_mut(cr);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.columns(off, w).into_owned());
                        off += w;
                    }
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for r in 0..d.nrows() {
                        let gs = g.row(r).sum();
                        for c in 0..d.ncols() {
                            d[(r, c)] -= node.value[(r, c)].exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NllMean(a, labels) => {
                    let shape = self.value(*a).shape();
                    let mut d = Matrix::zeros(shape.0, shape.1);
                    let s = -g[(0, 0)] / labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        d[(r, y)] = s;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::PickSum(a, labels) => {
                    let shape = self.value(*a).shape();
                    let mut d = Matrix::zeros(shape.0, shape.1);
                    for (r, &y) in labels.iter().enumerate() {
                        d[(r, y)] = g[(0, 0)];
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SqErrorMean(a, target) => {
                    let n = target.nrows() as f64;
                    let d = (self.value(*a) - target) * (2.0 * g[(0, 0)] / n);
                    accumulate(&mut grads, *a, d);
                }
                Op::Custom(a, vjp) => accumulate(&mut grads, *a, vjp(&g)),
            }
            grads[i] = Some(g);
        }
        Grads(grads)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += d,
        slot @ None => *slot = Some(d),
    }
}
