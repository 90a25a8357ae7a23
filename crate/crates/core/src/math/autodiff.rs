//! Reverse-mode automatic differentiation over matrix-valued expressions.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! walks the record once in reverse order and accumulates gradients for
//! every node. Scalars are 1x1 matrices. Elementwise binary ops broadcast
//! a scalar, a single row, or a single column against a full matrix.

use std::cell::RefCell;

use super::matrix::{softmax_rows, Mask, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct Value {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Value {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

type BackFn = Box<dyn Fn(&Matrix) -> Vec<Matrix>>;

struct Node {
    value: Matrix,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

// How a broadcast operand relates to the output shape.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Full,
    Scalar,
    Row,
    Col,
}

fn bcast_kind(out: (usize, usize), operand: (usize, usize)) -> Option<Bcast> {
    if operand == out {
        Some(Bcast::Full)
    } else if operand == (1, 1) {
        Some(Bcast::Scalar)
    } else if operand.0 == 1 && operand.1 == out.1 {
        Some(Bcast::Row)
    } else if operand.1 == 1 && operand.0 == out.0 {
        Some(Bcast::Col)
    } else {
        None
    }
}

#[inline]
fn bcast_at(m: &Matrix, kind: Bcast, i: usize, j: usize) -> f64 {
    match kind {
        Bcast::Full => m.at(i, j),
        Bcast::Scalar => m.at(0, 0),
        Bcast::Row => m.at(0, j),
        Bcast::Col => m.at(i, 0),
    }
}

/// Sum a full-shape gradient down to the operand's (possibly broadcast) shape.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..grad.rows() {
        for j in 0..grad.cols() {
            let ti = if shape.0 == 1 { 0 } else { i };
            let tj = if shape.1 == 1 { 0 } else { j };
            out.set(ti, tj, out.at(ti, tj) + grad.at(i, j));
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, value: Matrix, parents: Vec<usize>, back: Option<BackFn>) -> Value {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        let (rows, cols) = value.shape();
        nodes.push(Node { value, parents, back });
        Value { idx, rows, cols }
    }

    /// A node with no gradient of interest (data, masks, targets).
    pub fn constant(&self, m: Matrix) -> Value {
        self.push(m, vec![], None)
    }

    /// A parameter leaf; indistinguishable from a constant mechanically, but
    /// callers keep the handle to read its gradient after `backward`.
    pub fn leaf(&self, m: Matrix) -> Value {
        self.push(m, vec![], None)
    }

    pub fn value(&self, v: Value) -> Matrix {
        self.nodes.borrow()[v.idx].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ------------------------------------------------------------------
    // elementwise binary ops with broadcasting
    // ------------------------------------------------------------------

    fn binary(
        &self,
        a: Value,
        b: Value,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Value {
        let (av, bv) = {
            let nodes = self.nodes.borrow();
            (nodes[a.idx].value.clone(), nodes[b.idx].value.clone())
        };
        let out_shape = (a.rows.max(b.rows), a.cols.max(b.cols));
        let ka = bcast_kind(out_shape, av.shape());
        let kb = bcast_kind(out_shape, bv.shape());
        let (ka, kb) = match (ka, kb) {
            (Some(x), Some(y)) => (x, y),
            _ => panic!(
                "{op}: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            ),
        };
        let out = Matrix::from_fn(out_shape.0, out_shape.1, |i, j| {
            fwd(bcast_at(&av, ka, i, j), bcast_at(&bv, kb, i, j))
        });
        let (a_shape, b_shape) = (av.shape(), bv.shape());
        self.push(
            out,
            vec![a.idx, b.idx],
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                let mut gb = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let (da, db) = back(
                            bcast_at(&av, ka, i, j),
                            bcast_at(&bv, kb, i, j),
                            g.at(i, j),
                        );
                        ga.set(i, j, da);
                        gb.set(i, j, db);
                    }
                }
                vec![reduce_to(&ga, a_shape), reduce_to(&gb, b_shape)]
            })),
        )
    }

    pub fn add(&self, a: Value, b: Value) -> Value {
        self.binary(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Value, b: Value) -> Value {
        self.binary(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Value, b: Value) -> Value {
        self.binary(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&self, a: Value, b: Value) -> Value {
        self.binary(
            a,
            b,
            "div",
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    // ------------------------------------------------------------------
    // elementwise unary ops
    // ------------------------------------------------------------------

    fn unary(
        &self,
        a: Value,
        fwd: impl Fn(f64) -> f64,
        back: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Value {
        let av = self.value(a);
        let out = av.map(&fwd);
        let ov = out.clone();
        self.push(
            out,
            vec![a.idx],
            Some(Box::new(move |g| {
                vec![Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    back(av.at(i, j), ov.at(i, j), g.at(i, j))
                })]
            })),
        )
    }

    pub fn exp(&self, a: Value) -> Value {
        self.unary(a, f64::exp, |_, out, g| g * out)
    }

    pub fn ln(&self, a: Value) -> Value {
        self.unary(a, f64::ln, |x, _, g| g / x)
    }

    pub fn relu(&self, a: Value) -> Value {
        self.unary(a, |x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn sqrt(&self, a: Value) -> Value {
        self.unary(a, f64::sqrt, |_, out, g| g / (2.0 * out))
    }

    pub fn square(&self, a: Value) -> Value {
        self.unary(a, |x| x * x, |x, _, g| 2.0 * x * g)
    }

    pub fn scale(&self, a: Value, k: f64) -> Value {
        self.unary(a, move |x| x * k, move |_, _, g| g * k)
    }

    pub fn add_const(&self, a: Value, k: f64) -> Value {
        self.unary(a, move |x| x + k, |_, _, g| g)
    }

    pub fn neg(&self, a: Value) -> Value {
        self.scale(a, -1.0)
    }

    // ------------------------------------------------------------------
    // structural / linear-algebra ops
    // ------------------------------------------------------------------

    pub fn matmul(&self, a: Value, b: Value) -> Value {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv).expect("matmul shape mismatch on tape");
        self.push(
            out,
            vec![a.idx, b.idx],
            Some(Box::new(move |g| {
                let ga = g.matmul(&bv.transpose()).unwrap();
                let gb = av.transpose().matmul(g).unwrap();
                vec![ga, gb]
            })),
        )
    }

    pub fn transpose(&self, a: Value) -> Value {
        let out = self.value(a).transpose();
        self.push(
            out,
            vec![a.idx],
            Some(Box::new(|g| vec![g.transpose()])),
        )
    }

    pub fn gather_rows(&self, a: Value, idx: Vec<usize>) -> Value {
        let av = self.value(a);
        let out = av.select_rows(&idx);
        let shape = av.shape();
        self.push(
            out,
            vec![a.idx],
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(shape.0, shape.1);
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..shape.1 {
                        ga.set(i, j, ga.at(i, j) + g.at(k, j));
                    }
                }
                vec![ga]
            })),
        )
    }

    pub fn slice_cols(&self, a: Value, start: usize, len: usize) -> Value {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(av.rows(), len, |i, j| av.at(i, start + j));
        let shape = av.shape();
        self.push(
            out,
            vec![a.idx],
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(shape.0, shape.1);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.at(i, j));
                    }
                }
                vec![ga]
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let values: Vec<Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Matrix> = values.iter().collect();
        let out = Matrix::hstack(&refs).expect("concat_cols row mismatch");
        let widths: Vec<usize> = values.iter().map(|m| m.cols()).collect();
        self.push(
            out,
            parts.iter().map(|p| p.idx).collect(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &w in &widths {
                    grads.push(Matrix::from_fn(g.rows(), w, |i, j| g.at(i, off + j)));
                    off += w;
                }
                grads
            })),
        )
    }

    pub fn sum_all(&self, a: Value) -> Value {
        let av = self.value(a);
        let s: f64 = av.data().iter().sum();
        let shape = av.shape();
        self.push(
            Matrix::scalar(s),
            vec![a.idx],
            Some(Box::new(move |g| {
                vec![Matrix::filled(shape.0, shape.1, g.at(0, 0))]
            })),
        )
    }

    pub fn mean_all(&self, a: Value) -> Value {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row means: r x c -> r x 1.
    pub fn mean_rows(&self, a: Value) -> Value {
        let av = self.value(a);
        let c = av.cols() as f64;
        let out = Matrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum::<f64>() / c);
        let cols = av.cols();
        self.push(
            out,
            vec![a.idx],
            Some(Box::new(move |g| {
                vec![Matrix::from_fn(g.rows(), cols, |i, _| g.at(i, 0) / c)]
            })),
        )
    }

    /// Masked row softmax; masked entries are exactly zero in the output and
    /// receive zero gradient.
    pub fn softmax_rows(&self, a: Value, mask: Option<&Mask>) -> Result<Value> {
        let av = self.value(a);
        let out = softmax_rows(&av, mask)?;
        let ov = out.clone();
        Ok(self.push(
            out,
            vec![a.idx],
            Some(Box::new(move |g| {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = (0..g.cols()).map(|j| g.at(i, j) * ov.at(i, j)).sum();
                    for j in 0..g.cols() {
                        ga.set(i, j, ov.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                vec![ga]
            })),
        ))
    }

    /// D[s, i] = sum_k (q[s,k] - b[i,k])^2, differentiable in both inputs.
    pub fn pairwise_sqdist(&self, q: Value, b: Value) -> Value {
        let (qv, bv) = (self.value(q), self.value(b));
        let out = qv.pairwise_sqdist(&bv).expect("pairwise_sqdist dim mismatch");
        self.push(
            out,
            vec![q.idx, b.idx],
            Some(Box::new(move |g| {
                let mut gq = Matrix::zeros(qv.rows(), qv.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for s in 0..qv.rows() {
                    for i in 0..bv.rows() {
                        let w = 2.0 * g.at(s, i);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..qv.cols() {
                            let d = qv.at(s, k) - bv.at(i, k);
                            gq.set(s, k, gq.at(s, k) + w * d);
                            gb.set(i, k, gb.at(i, k) - w * d);
                        }
                    }
                }
                vec![gq, gb]
            })),
        )
    }

    /// D[s, i] = sum_k w[k] * (q[s,k] - b[i,k])^2 with `w` a 1 x d row,
    /// differentiable in all three inputs.
    pub fn pairwise_sqdist_weighted(&self, q: Value, b: Value, w: Value) -> Value {
        let (qv, bv, wv) = (self.value(q), self.value(b), self.value(w));
        assert_eq!(wv.rows(), 1, "weight must be a row vector");
        assert_eq!(wv.cols(), qv.cols(), "weight width must match feature dim");
        assert_eq!(qv.cols(), bv.cols(), "feature dims must match");
        let out = Matrix::from_fn(qv.rows(), bv.rows(), |s, i| {
            (0..qv.cols())
                .map(|k| {
                    let d = qv.at(s, k) - bv.at(i, k);
                    wv.at(0, k) * d * d
                })
                .sum()
        });
        self.push(
            out,
            vec![q.idx, b.idx, w.idx],
            Some(Box::new(move |g| {
                let mut gq = Matrix::zeros(qv.rows(), qv.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                let mut gw = Matrix::zeros(1, wv.cols());
                for s in 0..qv.rows() {
                    for i in 0..bv.rows() {
                        let go = g.at(s, i);
                        if go == 0.0 {
                            continue;
                        }
                        for k in 0..qv.cols() {
                            let d = qv.at(s, k) - bv.at(i, k);
                            gq.set(s, k, gq.at(s, k) + 2.0 * go * wv.at(0, k) * d);
                            gb.set(i, k, gb.at(i, k) - 2.0 * go * wv.at(0, k) * d);
                            gw.set(0, k, gw.at(0, k) + go * d * d);
                        }
                    }
                }
                vec![gq, gb, gw]
            })),
        )
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Run reverse accumulation from a finite scalar loss. Every node is
    /// visited at most once, in reverse insertion order, which is a reverse
    /// topological order because ops only reference earlier nodes.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.idx].value;
        assert!(lv.is_scalar(), "backward requires a scalar loss");
        if !lv.at(0, 0).is_finite() {
            return Err(Error::NonFinite {
                context: "loss".to_string(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(back) = &nodes[idx].back {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), nodes[idx].parents.len());
                for (&p, c) in nodes[idx].parents.iter().zip(contribs) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Value) -> Option<&Matrix> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of the loss w.r.t. `v`, zero-filled if `v` did not
    /// participate in the loss.
    pub fn wrt(&self, v: Value) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(v.rows, v.cols))
    }
}

// ============================================================================
// Finite-difference checking
// ============================================================================

/// Central finite-difference gradient of `f` w.r.t. every entry of every
/// input, for verifying taped gradients.
pub fn fd_grad(f: &mut dyn FnMut(&[Matrix]) -> f64, inputs: &[Matrix], h: f64) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let shape = inputs[which].shape();
        let mut g = Matrix::zeros(shape.0, shape.1);
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let base = inputs[which].at(i, j);
                let mut plus: Vec<Matrix> = inputs.to_vec();
                plus[which].set(i, j, base + h);
                let mut minus: Vec<Matrix> = inputs.to_vec();
                minus[which].set(i, j, base - h);
                g.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative error between two same-shape matrices, with
/// a magnitude floor so that near-zero entries compare absolutely.
pub fn max_rel_err(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
