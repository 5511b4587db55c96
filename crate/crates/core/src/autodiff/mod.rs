//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that requires one. Graphs are cheap and
//! short-lived: the trainer builds a fresh one per update.

mod nn;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{matmul_into, Float, MatRef, Tensor};

pub use nn::{GatherTap, GatherPlan};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A graph that never records backward closures. Use for inference.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), self.grad_enabled)
    }

    /// Leaf that receives a gradient, sharing an existing buffer.
    pub fn input_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, self.grad_enabled)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Records the result of an operation. `backward` receives the output
    /// gradient and a mask of which parents need a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                requires_grad,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None }
        };
        nodes.push(node);
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let loss_value = &nodes[loss.id].value;
        assert_eq!(loss_value.len(), 1, "backward() needs a scalar loss");
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are released once propagated; only leaves keep theirs.
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[parent].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[parent].value.shape());
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Gradient for `var`, or zeros of its shape when it received none.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    fn unary(
        self,
        f: impl Fn(T) -> T,
        // derivative expressed through input x and output y
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Rc::new(y.clone());
        self.graph.record(y, &[self], move |grad, _| {
            let data = grad
                .data()
                .iter()
                .zip(x.data())
                .zip(y_saved.data())
                .map(|((&g, &xv), &yv)| g * df(xv, yv))
                .collect();
            vec![Some(Tensor::from_vec(grad.shape(), data))]
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let y = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.graph.record(y, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let y = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.graph.record(y, &[self, other], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let y = zip_map(&a, &b, |x, y| x * y);
        self.graph.record(y, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &b, |gv, bv| gv * bv)),
                needs[1].then(|| zip_map(g, &a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let y = self.value().map(|v| v * c);
        self.graph.record(y, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'g, T> {
        let y = self.value().map(|v| v + c);
        self.graph.record(y, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.unary(
            move |v| if v > T::zero() { v } else { v * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(
            |v| {
                // Split by sign so large |v| never overflows exp.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let s: T = x.data().iter().copied().sum();
        self.graph.record(Tensor::scalar(s), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = Tensor::from_vec(shape, x.data().to_vec());
        self.graph.record(y, &[self], move |g, _| {
            vec![Some(Tensor::from_vec(&old, g.data().to_vec()))]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_impl(other, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_t(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g, T>, rhs_t: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (a.dim(0), a.dim(1));
        let (n, kb) = if rhs_t { (b.dim(0), b.dim(1)) } else { (b.dim(1), b.dim(0)) };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let bview = |data| {
            if rhs_t {
                MatRef::transposed(data, k, n)
            } else {
                MatRef::new(data, k, n)
            }
        };
        let mut out = vec![T::zero(); m * n];
        matmul_into(MatRef::new(a.data(), m, k), bview(b.data()), T::zero(), &mut out);
        self.graph.record(Tensor::from_vec(&[m, n], out), &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                // dA = dY B^T ; B^T is k x ... in the stored layout
                let mut da = vec![T::zero(); m * k];
                let bt = if rhs_t {
                    MatRef::new(b.data(), n, k)
                } else {
                    MatRef::transposed(b.data(), n, k)
                };
                matmul_into(MatRef::new(g.data(), m, n), bt, T::zero(), &mut da);
                Tensor::from_vec(&[m, k], da)
            });
            let gb = needs[1].then(|| {
                if rhs_t {
                    // dB (n x k) = dY^T A
                    let mut db = vec![T::zero(); n * k];
                    matmul_into(
                        MatRef::transposed(g.data(), n, m),
                        MatRef::new(a.data(), m, k),
                        T::zero(),
                        &mut db,
                    );
                    Tensor::from_vec(&[n, k], db)
                } else {
                    // dB (k x n) = A^T dY
                    let mut db = vec![T::zero(); k * n];
                    matmul_into(
                        MatRef::transposed(a.data(), k, m),
                        MatRef::new(g.data(), m, n),
                        T::zero(),
                        &mut db,
                    );
                    Tensor::from_vec(&[k, n], db)
                }
            });
            vec![ga, gb]
        })
    }

    /// `[n, m] + [m]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        assert_eq!(x.shape().len(), 2, "add_row_bias expects a 2-D input");
        let (n, m) = (x.dim(0), x.dim(1));
        assert_eq!(b.shape(), &[m], "bias length mismatch");
        let mut y = x.data().to_vec();
        for row in y.chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        self.graph.record(Tensor::from_vec(&[n, m], y), &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); m];
                for row in g.data().chunks(m) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&[m], acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// Concatenate along the leading axis.
    pub fn concat(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            assert_eq!(&v.shape()[1..], tail.as_slice(), "concat trailing shape mismatch");
            lead += v.dim(0);
            sizes.push((v.shape().to_vec(), v.len()));
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        graph.record(Tensor::from_vec(&shape, data), parts, move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|((shape, len), &need)| {
                    let part = need.then(|| {
                        Tensor::from_vec(shape, g.data()[offset..offset + len].to_vec())
                    });
                    offset += len;
                    part
                })
                .collect()
        })
    }
}
