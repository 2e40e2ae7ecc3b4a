//! Minimal reverse-mode autodiff over `ndarray`.
//!
//! A [`Tape`] records one forward computation as an arena of nodes; every op
//! pushes a node whose backward closure scatters gradient contributions to
//! its parents. Edges always point to lower indices, so a single reverse
//! sweep in [`Tape::backward`] visits nodes in a valid topological order.
//!
//! The tape is rebuilt every training step and is deliberately not `Send`:
//! one step runs on one thread, independent runs use independent tapes.

mod conv;
mod scalar;

pub use scalar::Scalar;

use std::cell::RefCell;

use ndarray::{ArcArray, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

type Value<F> = ArcArray<F, IxDyn>;
type Sink<'a, F> = &'a mut dyn FnMut(usize, ArrayD<F>);
type BackFn<F> = Box<dyn Fn(&ArrayD<F>, Sink<'_, F>)>;

struct Node<F: Scalar> {
    value: Value<F>,
    back: Option<BackFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var<'_, F> {
        self.push_shared(value.into_shared(), back)
    }

    fn push_shared(&self, value: Value<F>, back: Option<BackFn<F>>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// A differentiable input (parameter or data the caller wants grads for).
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, None)
    }

    /// Constant input; gradients still accumulate but are simply unused.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push(value, None)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.push(ArrayD::from_elem(IxDyn(&[]), value), None)
    }

    /// Reverse sweep from `root`, seeding with ones of the root's shape.
    pub fn backward(&self, root: Var<'_, F>) -> Grads<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.idx] = Some(ArrayD::ones(nodes[root.idx].value.shape()));
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].back {
                let mut sink = |j: usize, contrib: ArrayD<F>| {
                    debug_assert!(j < i, "backward edge must point to an earlier node");
                    match &mut grads[j] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                };
                back(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Grads { inner: grads }
    }
}

/// Gradients of one backward sweep, indexed by tape position.
pub struct Grads<F: Scalar> {
    inner: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.inner.get(var.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<ArrayD<F>> {
        self.inner.get_mut(var.idx).and_then(|g| g.take())
    }
}

/// Handle to one tape node. Copyable; all ops allocate new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    idx: usize,
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Value<F> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.tape.nodes.borrow()[self.idx].value.ndim()
    }

    /// Value of a 0-d node.
    pub fn scalar_value(&self) -> F {
        let v = self.value();
        assert_eq!(v.ndim(), 0, "scalar_value on non-scalar");
        v[[]]
    }

    fn same_tape(&self, other: &Self) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    // ---- elementwise binary ----

    pub fn add(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &a + &b;
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.clone());
            })),
        )
    }

    pub fn sub(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &a - &b;
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.mapv(|v| -v));
            })),
        )
    }

    pub fn mul(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &a * &b;
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g * &b);
                sink(ib, g * &a);
            })),
        )
    }

    pub fn div(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "div: shape mismatch");
        let out = &a / &b;
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g / &b);
                let gb = ndarray::Zip::from(g).and(&a).and(&b).map_collect(|&g, &a, &b| -g * a / (b * b));
                sink(ib, gb);
            })),
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max_e(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "max_e: shape mismatch");
        let out = ndarray::Zip::from(&a).and(&b).map_collect(|&a, &b| if a >= b { a } else { b });
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&a).and(&b).map_collect(|&g, &a, &b| if a >= b { g } else { F::zero() });
                let gb = ndarray::Zip::from(g).and(&a).and(&b).map_collect(|&g, &a, &b| if a >= b { F::zero() } else { g });
                sink(ia, ga);
                sink(ib, gb);
            })),
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min_e(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "min_e: shape mismatch");
        let out = ndarray::Zip::from(&a).and(&b).map_collect(|&a, &b| if a <= b { a } else { b });
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&a).and(&b).map_collect(|&g, &a, &b| if a <= b { g } else { F::zero() });
                let gb = ndarray::Zip::from(g).and(&a).and(&b).map_collect(|&g, &a, &b| if a <= b { F::zero() } else { g });
                sink(ia, ga);
                sink(ib, gb);
            })),
        )
    }

    // ---- elementwise unary ----

    pub fn neg(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        self.tape.push(
            a.mapv(|v| -v),
            Some(Box::new(move |g, sink| sink(ia, g.mapv(|v| -v)))),
        )
    }

    pub fn scale(self, c: F) -> Self {
        let a = self.value();
        let ia = self.idx;
        self.tape.push(
            a.mapv(|v| v * c),
            Some(Box::new(move |g, sink| sink(ia, g.mapv(|v| v * c)))),
        )
    }

    pub fn add_const(self, c: F) -> Self {
        let a = self.value();
        let ia = self.idx;
        self.tape.push(a.mapv(|v| v + c), Some(Box::new(move |g, sink| sink(ia, g.clone()))))
    }

    pub fn relu(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        let out = a.mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&a).map_collect(|&g, &a| if a > F::zero() { g } else { F::zero() });
                sink(ia, ga);
            })),
        )
    }

    pub fn abs(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        self.tape.push(
            a.mapv(|v| v.abs()),
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&a).map_collect(|&g, &a| {
                    if a > F::zero() {
                        g
                    } else if a < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                });
                sink(ia, ga);
            })),
        )
    }

    pub fn sqrt(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        let out = a.mapv(|v| v.sqrt()).into_shared();
        let y = out.clone();
        let half = F::from_f64(0.5);
        self.tape.push_shared(
            out,
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&y).map_collect(|&g, &y| g * half / y);
                sink(ia, ga);
            })),
        )
    }

    pub fn sigmoid(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        let out = a
            .mapv(|v| {
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            })
            .into_shared();
        let y = out.clone();
        self.tape.push_shared(
            out,
            Some(Box::new(move |g, sink| {
                let ga = ndarray::Zip::from(g).and(&y).map_collect(|&g, &y| g * y * (F::one() - y));
                sink(ia, ga);
            })),
        )
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(self) -> Self {
        let a = self.value();
        let ia = self.idx;
        let shape = a.shape().to_vec();
        let total = a.sum();
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Some(Box::new(move |g, sink| {
                let g0 = g[[]];
                sink(ia, ArrayD::from_elem(IxDyn(&shape), g0));
            })),
        )
    }

    pub fn mean_all(self) -> Self {
        let a = self.value();
        let n = F::from_usize(a.len()).unwrap();
        self.sum_all().scale(F::one() / n)
    }

    /// Mean over the spatial axes of a `(c, h, w)` map, yielding `(c,)`.
    pub fn mean_hw(self) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 3, "mean_hw expects (c, h, w)");
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let inv = F::one() / F::from_usize(h * w).unwrap();
        let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Array1::<F>::zeros(c);
        for ci in 0..c {
            out[ci] = a3.index_axis(Axis(0), ci).sum() * inv;
        }
        let ia = self.idx;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut ga = ndarray::Array3::<F>::zeros((c, h, w));
                for ci in 0..c {
                    ga.index_axis_mut(Axis(0), ci).fill(g1[ci] * inv);
                }
                sink(ia, ga.into_dyn());
            })),
        )
    }

    /// Broadcast-add a `(f,)` row vector over the last axis.
    pub fn add_rowvec(self, bias: Self) -> Self {
        self.same_tape(&bias);
        let a = self.value();
        let b = bias.value();
        assert_eq!(b.ndim(), 1, "add_rowvec: bias must be 1-d");
        let f = b.shape()[0];
        assert_eq!(a.shape().last(), Some(&f), "add_rowvec: last axis mismatch");
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        let out = &a + &b1;
        let (ia, ib) = (self.idx, bias.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g.clone());
                let lead: usize = g.len() / f;
                let g2 = g.view().into_shape_with_order((lead, f)).unwrap();
                sink(ib, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Multiply by a 0-d tape scalar (for learned aggregation weights).
    pub fn mul_scalar_var(self, s: Self) -> Self {
        self.same_tape(&s);
        let a = self.value();
        let sv = s.value();
        assert_eq!(sv.ndim(), 0, "mul_scalar_var: rhs must be 0-d");
        let sc = sv[[]];
        let out = a.mapv(|v| v * sc);
        let (ia, is) = (self.idx, s.idx);
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(ia, g.mapv(|v| v * sc));
                let dot = ndarray::Zip::from(g).and(&a).fold(F::zero(), |acc, &g, &a| acc + g * a);
                sink(is, ArrayD::from_elem(IxDyn(&[]), dot));
            })),
        )
    }

    // ---- shape ops ----

    pub fn reshape(self, shape: &[usize]) -> Self {
        let a = self.value();
        let old: Vec<usize> = a.shape().to_vec();
        assert_eq!(a.len(), shape.iter().product::<usize>(), "reshape: length mismatch");
        let out = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let ia = self.idx;
        self.tape.push(
            out,
            Some(Box::new(move |g, sink| {
                let gr = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap();
                sink(ia, gr);
            })),
        )
    }

    pub fn transpose2(self) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "transpose2 expects 2-d");
        let out = a.view().into_dimensionality::<Ix2>().unwrap().t().as_standard_layout().into_owned();
        let ia = self.idx;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                sink(ia, g2.t().as_standard_layout().into_owned().into_dyn());
            })),
        )
    }

    /// `(n, f)` to `(heads, n, f/heads)`.
    pub fn split_heads(self, heads: usize) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "split_heads expects 2-d");
        let (n, f) = (a.shape()[0], a.shape()[1]);
        assert_eq!(f % heads, 0, "head count must divide width");
        let dh = f / heads;
        let a3 = a
            .view()
            .into_shape_with_order((n, heads, dh))
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        let ia = self.idx;
        self.tape.push(
            a3.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let gr = g3
                    .permuted_axes([1, 0, 2])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((n, heads * dh))
                    .unwrap();
                sink(ia, gr.into_dyn());
            })),
        )
    }

    /// `(heads, n, dh)` back to `(n, heads*dh)`.
    pub fn merge_heads(self) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 3, "merge_heads expects 3-d");
        let (heads, n, dh) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let out = a
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, heads * dh))
            .unwrap();
        let ia = self.idx;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_shape_with_order((n, heads, dh)).unwrap();
                let gr = g2.permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
                sink(ia, gr.into_dyn());
            })),
        )
    }

    /// Select rows of a `(k, f)` matrix; duplicate indices scatter-add on backward.
    pub fn gather_rows(self, indices: &[usize]) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "gather_rows expects 2-d");
        let (k, f) = (a.shape()[0], a.shape()[1]);
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<F>::zeros((indices.len(), f));
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < k, "gather_rows: index out of range");
            out.row_mut(r).assign(&a2.row(i));
        }
        let idxs: Vec<usize> = indices.to_vec();
        let ia = self.idx;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut ga = Array2::<F>::zeros((k, f));
                for (r, &i) in idxs.iter().enumerate() {
                    let mut row = ga.row_mut(i);
                    row += &g2.row(r);
                }
                sink(ia, ga.into_dyn());
            })),
        )
    }

    /// Column `j` of a `(n, c)` matrix as a `(n,)` vector.
    pub fn col(self, j: usize) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "col expects 2-d");
        let (n, c) = (a.shape()[0], a.shape()[1]);
        assert!(j < c);
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let out = a2.column(j).to_owned();
        let ia = self.idx;
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut ga = Array2::<F>::zeros((n, c));
                ga.column_mut(j).assign(&g1);
                sink(ia, ga.into_dyn());
            })),
        )
    }

    /// Element `i` of a `(l,)` vector as a 0-d scalar.
    pub fn at(self, i: usize) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 1, "at expects 1-d");
        let n = a.shape()[0];
        assert!(i < n);
        let v = a[[i]];
        let ia = self.idx;
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), v),
            Some(Box::new(move |g, sink| {
                let mut ga = Array1::<F>::zeros(n);
                ga[i] = g[[]];
                sink(ia, ga.into_dyn());
            })),
        )
    }

    // ---- matmul ----

    pub fn matmul(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul: inner dim mismatch");
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let out = a2.dot(&b2);
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                sink(ia, g2.dot(&b2.t()).into_dyn());
                sink(ib, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// Batched matmul: `(B, n, k) x (B, k, m) -> (B, n, m)`.
    pub fn bmm(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        assert_eq!(a.shape()[0], b.shape()[0], "bmm: batch mismatch");
        assert_eq!(a.shape()[2], b.shape()[1], "bmm: inner dim mismatch");
        let (bs, n, m) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<F>::zeros((bs, n, m));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<F>::zeros(a3.raw_dim());
                let mut gb = ndarray::Array3::<F>::zeros(b3.raw_dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i).assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                sink(ia, ga.into_dyn());
                sink(ib, gb.into_dyn());
            })),
        )
    }

    /// Batched matmul with transposed rhs: `(B, n, k) x (B, m, k) -> (B, n, m)`.
    pub fn bmm_bt(self, rhs: Self) -> Self {
        self.same_tape(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        assert_eq!(a.shape()[0], b.shape()[0], "bmm_bt: batch mismatch");
        assert_eq!(a.shape()[2], b.shape()[2], "bmm_bt: inner dim mismatch");
        let (bs, n, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
        let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = ndarray::Array3::<F>::zeros((bs, n, m));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i).t()));
        }
        let (ia, ib) = (self.idx, rhs.idx);
        self.tape.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
                let mut ga = ndarray::Array3::<F>::zeros(a3.raw_dim());
                let mut gb = ndarray::Array3::<F>::zeros(b3.raw_dim());
                for i in 0..g3.shape()[0] {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&b3.index_axis(Axis(0), i)));
                    gb.index_axis_mut(Axis(0), i).assign(&gi.t().dot(&a3.index_axis(Axis(0), i)));
                }
                sink(ia, ga.into_dyn());
                sink(ib, gb.into_dyn());
            })),
        )
    }

    // ---- structured ops ----

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Self {
        let a = self.value();
        let f = *a.shape().last().expect("softmax on 0-d");
        let lead = a.len() / f;
        let a2 = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((lead, f))
            .unwrap();
        let mut out = Array2::<F>::zeros((lead, f));
        for (mut orow, arow) in out.outer_iter_mut().zip(a2.outer_iter()) {
            let mx = arow.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &v) in orow.iter_mut().zip(arow.iter()) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            let inv = F::one() / sum;
            orow.mapv_inplace(|v| v * inv);
        }
        let shape = a.shape().to_vec();
        let y = out.into_shape_with_order(IxDyn(&shape)).unwrap().into_shared();
        let yc = y.clone();
        let ia = self.idx;
        self.tape.push_shared(
            y,
            Some(Box::new(move |g, sink| {
                let f = *yc.shape().last().unwrap();
                let lead = yc.len() / f;
                let y2 = yc.view().into_shape_with_order((lead, f)).unwrap();
                let g2 = g.view().into_shape_with_order((lead, f)).unwrap();
                let mut ga = Array2::<F>::zeros((lead, f));
                for i in 0..lead {
                    let yr = y2.row(i);
                    let gr = g2.row(i);
                    let dot = yr.iter().zip(gr.iter()).fold(F::zero(), |acc, (&y, &g)| acc + y * g);
                    for j in 0..f {
                        ga[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                sink(ia, ga.into_shape_with_order(IxDyn(yc.shape())).unwrap());
            })),
        )
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: F) -> Self {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let a = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let f = *a.shape().last().expect("layer_norm on 0-d");
        assert_eq!(gv.shape(), &[f]);
        assert_eq!(bv.shape(), &[f]);
        let lead = a.len() / f;
        let a2 = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((lead, f))
            .unwrap();
        let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
        let inv_f = F::one() / F::from_usize(f).unwrap();
        let mut xhat = Array2::<F>::zeros((lead, f));
        let mut sigma = Array1::<F>::zeros(lead);
        let mut out = Array2::<F>::zeros((lead, f));
        for i in 0..lead {
            let row = a2.row(i);
            let mu = row.sum() * inv_f;
            let var = row.iter().fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) * inv_f;
            let s = (var + eps).sqrt();
            sigma[i] = s;
            for j in 0..f {
                let xh = (row[j] - mu) / s;
                xhat[[i, j]] = xh;
                out[[i, j]] = g1[j] * xh + b1[j];
            }
        }
        let shape = a.shape().to_vec();
        let xhat = xhat.into_shared();
        let (ia, ig, ib) = (self.idx, gamma.idx, beta.idx);
        self.tape.push(
            out.into_shape_with_order(IxDyn(&shape)).unwrap(),
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_shape_with_order((lead, f)).unwrap();
                let mut ga = Array2::<F>::zeros((lead, f));
                let mut ggamma = Array1::<F>::zeros(f);
                let mut gbeta = Array1::<F>::zeros(f);
                for i in 0..lead {
                    let gr = g2.row(i);
                    let xr = xhat.view().into_dimensionality::<Ix2>().unwrap();
                    let xr = xr.row(i);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..f {
                        let h = gr[j] * gv[[j]];
                        m1 += h;
                        m2 += h * xr[j];
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    m1 *= inv_f;
                    m2 *= inv_f;
                    let inv_s = F::one() / sigma[i];
                    for j in 0..f {
                        let h = gr[j] * gv[[j]];
                        ga[[i, j]] = (h - m1 - xr[j] * m2) * inv_s;
                    }
                }
                sink(ia, ga.into_shape_with_order(IxDyn(&shape)).unwrap());
                sink(ig, ggamma.into_dyn());
                sink(ib, gbeta.into_dyn());
            })),
        )
    }

    /// Class-weighted cross-entropy from logits `(k, c)` against integer
    /// targets, averaged by the total target weight (the DETR convention
    /// for down-weighting the no-object class).
    pub fn cross_entropy_classes(self, targets: &[usize], class_weights: &[F]) -> Self {
        let a = self.value();
        assert_eq!(a.ndim(), 2, "cross_entropy_classes expects (k, c)");
        let (k, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(targets.len(), k);
        assert_eq!(class_weights.len(), c);
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let mut probs = Array2::<F>::zeros((k, c));
        let mut loss = F::zero();
        let mut wsum = F::zero();
        for i in 0..k {
            let row = a2.row(i);
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[[i, j]] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..c {
                probs[[i, j]] *= inv;
            }
            let t = targets[i];
            assert!(t < c, "target class out of range");
            let w = class_weights[t];
            let lse = sum.ln() + mx;
            loss += w * (lse - row[t]);
            wsum += w;
        }
        assert!(wsum > F::zero());
        loss /= wsum;
        let targets: Vec<usize> = targets.to_vec();
        let weights: Vec<F> = class_weights.to_vec();
        let probs = probs.into_shared();
        let ia = self.idx;
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Some(Box::new(move |g, sink| {
                let g0 = g[[]];
                let mut ga = Array2::<F>::zeros((k, c));
                for i in 0..k {
                    let w = weights[targets[i]] / wsum;
                    for j in 0..c {
                        let p = probs[[i, j]];
                        let ind = if j == targets[i] { F::one() } else { F::zero() };
                        ga[[i, j]] = g0 * w * (p - ind);
                    }
                }
                sink(ia, ga.into_dyn());
            })),
        )
    }
}

/// Stack 0-d scalars into a `(l,)` vector.
pub fn stack_scalars<'t, F: Scalar>(tape: &'t Tape<F>, items: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!items.is_empty(), "stack_scalars: empty input");
    let mut out = Array1::<F>::zeros(items.len());
    for (i, v) in items.iter().enumerate() {
        out[i] = v.scalar_value();
    }
    let idxs: Vec<usize> = items.iter().map(|v| v.idx).collect();
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
            for (i, &idx) in idxs.iter().enumerate() {
                sink(idx, ArrayD::from_elem(IxDyn(&[]), g1[i]));
            }
        })),
    )
}

/// Stack `(f,)` vectors into a `(l, f)` matrix.
pub fn stack_rows<'t, F: Scalar>(tape: &'t Tape<F>, items: &[Var<'t, F>]) -> Var<'t, F> {
    assert!(!items.is_empty(), "stack_rows: empty input");
    let f = items[0].shape()[0];
    let mut out = Array2::<F>::zeros((items.len(), f));
    for (i, v) in items.iter().enumerate() {
        let val = v.value();
        assert_eq!(val.shape(), &[f], "stack_rows: ragged input");
        out.row_mut(i).assign(&val.view().into_dimensionality::<Ix1>().unwrap());
    }
    let idxs: Vec<usize> = items.iter().map(|v| v.idx).collect();
    tape.push(
        out.into_dyn(),
        Some(Box::new(move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            for (i, &idx) in idxs.iter().enumerate() {
                sink(idx, g2.row(i).to_owned().into_dyn());
            }
        })),
    )
}

/// Weighted sum of same-shaped vars with 0-d scalar weights.
pub fn weighted_sum<'t, F: Scalar>(items: &[Var<'t, F>], weights: &[Var<'t, F>]) -> Var<'t, F> {
    assert_eq!(items.len(), weights.len());
    assert!(!items.is_empty());
    let mut acc = items[0].mul_scalar_var(weights[0]);
    for i in 1..items.len() {
        acc = acc.add(items[i].mul_scalar_var(weights[i]));
    }
    acc
}

#[cfg(test)]
mod tests;
