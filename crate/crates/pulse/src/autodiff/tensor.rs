//! Dense f64 tensors with reverse-mode gradient tracking.
//!
//! Every op builds a node holding clones of its parents and a backward
//! closure. `backward` on a scalar loss assembles the reachable subgraph
//! into a [`ComputationTape`] (topological order) and replays adjoints in
//! reverse. Graphs are single-threaded; a graph lives exactly as long as
//! the tensors referencing it.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{PulseError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: receives the output gradient and accumulates into the
/// parents it captured.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) requires_grad: bool,
    /// True if this node or any ancestor requires a gradient.
    pub(crate) needs_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward: Option<BackwardFn>,
}

/// A dense row-major f64 tensor, cheaply clonable (shared handle).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(PulseError::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                needs_grad: false,
                parents: Vec::new(),
                backward: None,
            }),
        })
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        // Sole owner at this point, safe to rebuild with the flag set.
        let inner = Rc::try_unwrap(t.inner).ok().expect("fresh tensor");
        Ok(Tensor {
            inner: Rc::new(Inner {
                requires_grad: true,
                needs_grad: true,
                ..inner
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).unwrap()
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                needs_grad,
                parents,
                backward: if needs_grad { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the value buffer.
    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// Copy of the gradient buffer, if one was populated by a backward pass.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the gradient buffer (used by global-norm clipping).
    pub fn set_grad(&self, g: &[f64]) {
        assert_eq!(g.len(), self.len(), "set_grad length mismatch");
        *self.inner.grad.borrow_mut() = Some(g.to_vec());
    }

    /// Overwrite the value buffer in place (leaves only; used by the
    /// optimizer and by finite-difference probing).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backward pass from a scalar loss. Populates `grad` on every
    /// reachable tensor that requires or transports gradients. Repeated
    /// calls without `zero_grad` accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(PulseError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = ComputationTape::build(self);
        tape.replay_adjoints(self);
        Ok(())
    }
}

/// Topologically ordered record of the operations reachable from a root:
/// each node appears after all nodes producing its inputs.
pub struct ComputationTape {
    order: Vec<Tensor>,
}

impl ComputationTape {
    pub fn build(root: &Tensor) -> ComputationTape {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order DFS.
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut stack = vec![Frame::Enter(root.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.inner.id) {
                        continue;
                    }
                    if !t.inner.needs_grad {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in &t.inner.parents {
                        stack.push(Frame::Enter(p.clone()));
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        ComputationTape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Seed the root adjoint with 1 and run all backward closures in
    /// reverse topological order.
    pub fn replay_adjoints(&self, root: &Tensor) {
        if !root.inner.needs_grad {
            return;
        }
        root.accumulate_grad(&[1.0]);
        for t in self.order.iter().rev() {
            if let Some(bw) = &t.inner.backward {
                let g = t.inner.grad.borrow();
                if let Some(g) = g.as_ref() {
                    bw(g);
                }
            }
        }
        // Drop transport buffers on non-leaf nodes; only leaves keep grads.
        for t in &self.order {
            if !t.inner.requires_grad {
                *t.inner.grad.borrow_mut() = None;
            }
        }
    }
}
