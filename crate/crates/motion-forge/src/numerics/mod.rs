//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Graphs are built dynamically per forward pass and discarded afterwards.
//! A node owns its value; the gradient slot fills during `backward`. Nodes
//! are `Rc`-linked, so one graph is confined to one thread; disjoint graphs
//! may evaluate concurrently on different threads.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod ops;
mod sample;

pub use ops::concat;
pub use sample::{axis_coord, gaussian_heatmaps, to_pixel};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on the current thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(
                "from_vec",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Learnable leaf: participates in gradient accumulation.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(Tensor::leaf(t.node.data.clone(), t.node.shape.clone(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(vec![0.0; n], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::leaf(vec![value], vec![1], false)
    }

    /// Interior node. Falls back to a constant leaf when recording is off or
    /// no parent needs gradients, letting the upstream graph free eagerly.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64]) + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let record = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if !record {
            return Tensor::leaf(data, shape, false);
        }
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad: true,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Some(Box::new(backward)),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Moves the accumulated gradient out, leaving the slot empty.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Accumulates into the gradient slot; no-op for non-grad tensors.
    pub(crate) fn grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(buf);
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        self.grad_mut(|buf| {
            for (b, &v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        });
    }

    fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.node.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Nodes reachable through grad-requiring ancestry, children first.
    fn collect_graph(&self) -> Vec<Tensor> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            for p in &t.node.parents {
                if p.node.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        // Parents are created before children, so descending id order
        // guarantees every node is processed before its parents.
        nodes.sort_by(|a, b| b.node.id.cmp(&a.node.id));
        nodes
    }

    /// Reverse-mode sweep seeding d(self)/d(self) = 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape().to_vec() });
        }
        let nodes = self.collect_graph();
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in &nodes {
            let g = t.node.grad.borrow().clone();
            if let (Some(g), Some(bw)) = (g, &t.node.backward) {
                bw(&g);
            }
        }
        Ok(())
    }

    /// Clears gradients of every node reachable from `self`.
    pub fn clear_graph_grads(&self) {
        for t in self.collect_graph() {
            t.zero_grad();
        }
    }
}

// Elementwise arithmetic, activations, and global reductions.
impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("add", other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            pa.accum_grad(g);
            pb.accum_grad(g);
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("sub", other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            pa.accum_grad(g);
            pb.grad_mut(|buf| {
                for (x, &v) in buf.iter_mut().zip(g) {
                    *x -= v;
                }
            });
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("mul", other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            pa.grad_mut(|buf| {
                for ((x, &v), &b) in buf.iter_mut().zip(g).zip(pb.data()) {
                    *x += v * b;
                }
            });
            pb.grad_mut(|buf| {
                for ((x, &v), &a) in buf.iter_mut().zip(g).zip(pa.data()) {
                    *x += v * a;
                }
            });
        }))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("div", other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a / b).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move |g| {
            pa.grad_mut(|buf| {
                for ((x, &v), &b) in buf.iter_mut().zip(g).zip(pb.data()) {
                    *x += v / b;
                }
            });
            pb.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    let b = pb.data()[i];
                    *x -= v * pa.data()[i] / (b * b);
                }
            });
        }))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&a| a + s).collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| pa.accum_grad(g))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&a| a * s).collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (x, &v) in buf.iter_mut().zip(g) {
                    *x += v * s;
                }
            });
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a.abs()).collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    let a = pa.data()[i];
                    *x += v * if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 };
                }
            });
        })
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a * a).collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    *x += v * 2.0 * pa.data()[i];
                }
            });
        })
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&a| a.max(0.0)).collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    if pa.data()[i] > 0.0 {
                        *x += v;
                    }
                }
            });
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let y = data.clone();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    *x += v * y[i] * (1.0 - y[i]);
                }
            });
        })
    }

    /// GELU, tanh form: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³))).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let data = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + K * x * x * x)).tanh()))
            .collect();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (out, &v)) in buf.iter_mut().zip(g).enumerate() {
                    let x = pa.data()[i];
                    let u = C * (x + K * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * K * x * x);
                    *out += v * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            });
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&a| a.exp()).collect();
        let y = data.clone();
        let pa = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move |g| {
            pa.grad_mut(|buf| {
                for (i, (x, &v)) in buf.iter_mut().zip(g).enumerate() {
                    *x += v * y[i];
                }
            });
        })
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(vec![1], vec![s], &[self], move |g| {
            pa.grad_mut(|buf| {
                for x in buf.iter_mut() {
                    *x += g[0];
                }
            });
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        let pa = self.clone();
        Tensor::from_op(vec![1], vec![s / n], &[self], move |g| {
            let gv = g[0] / n;
            pa.grad_mut(|buf| {
                for x in buf.iter_mut() {
                    *x += gv;
                }
            });
        })
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let pa = self.clone();
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), &[self], move |g| {
            pa.accum_grad(g);
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn elementwise_square_gradient_is_two_x() {
        let x = t(&[1.0, -2.0, 3.0], &[3]);
        x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = t(&[1.0, 2.0], &[2]);
        assert!(matches!(x.add(&x).unwrap().backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = t(&[3.0], &[1]);
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = t(&[1.0, 2.0], &[2]);
        let y = no_grad(|| x.mul(&x).unwrap().sum_all());
        assert!(!y.requires_grad());
        assert!(y.backward().is_ok() || y.numel() == 1);
        assert!(x.grad().is_none());
    }

    #[test]
    fn repeated_backward_after_clear_is_bit_identical() {
        let x = t(&[0.3, -1.4, 2.2, 0.9], &[4]);
        let w = t(&[1.5, -0.2, 0.7, 0.0], &[4]);
        let loss = x.mul(&w).unwrap().gelu().sigmoid().sum_all();
        loss.backward().unwrap();
        let g1 = x.grad().unwrap();
        loss.clear_graph_grads();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        let g2 = x.grad().unwrap();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }
}
