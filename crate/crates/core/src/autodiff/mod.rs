//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every operation appends a node holding its forward value and a closure
//! that maps the output gradient to gradients for each parent. Calling
//! [`Tape::backward`] walks the nodes in reverse. Nodes whose parents are all
//! constants are recorded without a closure, so constants never accumulate
//! gradients.

mod ops;
mod pose;

pub use pose::{axis_angle_to_matrix, axis_angle_to_matrix_jacobian};

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward closure: receives the output gradient and, per parent, whether
/// that parent needs a gradient. Returns one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.insert(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.insert(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Copies the value of `v` into a new constant, blocking gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.insert(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Records a custom operation. `backward` is dropped when no parent
    /// requires a gradient.
    pub fn custom(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.insert(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    fn insert(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.len(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape().to_vec(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // leaves have no backward closure, so their gradients are still in place
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// Finite-difference oracle used by the gradient tests.
pub mod gradcheck {
    use super::*;

    /// Central finite-difference check of `f` at `x`. Returns the worst
    /// relative error `|a - n| / max(|a|, |n|, floor)` over all coordinates.
    pub fn check(x: &Tensor, f: impl Fn(&Tape, Var) -> Var, step: f64, floor: f64) -> f64 {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&tape, xv);
        let analytic = tape.backward(out).get_or_zeros(xv, x.shape());
        let eval = |t: &Tensor| {
            let tape = Tape::new();
            let v = tape.constant(t.clone());
            let o = f(&tape, v);
            tape.value(o).item()
        };
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }

    /// Analytic and central finite-difference gradients of `f` at `x`.
    pub fn gradients(x: &Tensor, f: impl Fn(&Tape, Var) -> Var, step: f64) -> (Vec<f64>, Vec<f64>) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&tape, xv);
        let analytic = tape.backward(out).get_or_zeros(xv, x.shape()).data().to_vec();
        let eval = |t: Tensor| {
            let tape = Tape::new();
            let o = f(&tape, tape.constant(t));
            tape.value(o).item()
        };
        let numeric = (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += step;
                let mut minus = x.clone();
                minus.data_mut()[i] -= step;
                (eval(plus) - eval(minus)) / (2.0 * step)
            })
            .collect();
        (analytic, numeric)
    }

    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole gradient; 0 when both vanish.
    pub fn check_norm(x: &Tensor, f: impl Fn(&Tape, Var) -> Var, step: f64) -> f64 {
        let (a, n) = gradients(x, f, step);
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.iter().zip(&n).map(|(a, n)| a - n));
        let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}
