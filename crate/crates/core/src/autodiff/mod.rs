//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every operation appends a node holding the backward rule for that single
//! step; [`backward`] replays the tape once in reverse creation order, so each
//! node is visited at most once regardless of fan-out. Tapes are cheap and are
//! rebuilt for every training step; parameters live outside the tape and enter
//! each step as fresh leaves.
//!
//! All values are f64. Tensors are immutable after creation and at most 2-D
//! (scalars are shape `[1]`).

pub mod gradcheck;
mod ops;

pub use ops::{concat_cols, concat_rows};

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Backward rule: maps the output gradient to (input node, contribution) pairs.
type Vjp = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    /// None marks a leaf; gradients accumulate here and survive [`backward`].
    vjp: Option<Vjp>,
}

/// A recording of one forward computation.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, vjp: Option<Vjp>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { vjp });
        nodes.len() - 1
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// A differentiable input. Gradients accumulate on leaves during backward.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape.to_vec(),
                right: vec![values.len()],
            });
        }
        let id = self.push(None);
        Ok(Tensor {
            tape: self.clone(),
            id,
            shape: shape.to_vec(),
            values: Rc::new(values),
        })
    }

    pub fn vector(&self, values: Vec<f64>) -> Tensor {
        let shape = vec![values.len()];
        self.leaf(values, &shape).expect("vector leaf cannot fail")
    }

    pub fn matrix(&self, values: Vec<f64>, rows: usize, cols: usize) -> Result<Tensor> {
        self.leaf(values, &[rows, cols])
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.leaf(vec![v], &[1]).expect("scalar leaf cannot fail")
    }

    /// Register an operation with a caller-supplied backward rule. The rule
    /// receives the output gradient and returns one optional gradient per
    /// input, in order (None = no gradient flows to that input).
    pub fn custom_op<F>(
        &self,
        inputs: &[&Tensor],
        values: Vec<f64>,
        shape: Vec<usize>,
        vjp: F,
    ) -> Result<Tensor>
    where
        F: Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        for t in inputs {
            if !self.same_tape(&t.tape) {
                return Err(Error::ForeignTensor);
            }
        }
        let n: usize = shape.iter().product();
        if n != values.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "custom_op",
                left: shape,
                right: vec![values.len()],
            });
        }
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let id = self.push(Some(Box::new(move |g: &[f64]| {
            vjp(g)
                .into_iter()
                .zip(&ids)
                .filter_map(|(contrib, &src)| contrib.map(|c| (src, c)))
                .collect()
        })));
        Ok(Tensor {
            tape: self.clone(),
            id,
            shape,
            values: Rc::new(values),
        })
    }
}

/// Immutable handle to one tape node's values.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("values", &self.values)
            .finish()
    }
}

impl Tensor {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Rows of a 2-D tensor (a 1-D tensor is a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a 2-D tensor (the length of a 1-D tensor).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(Error::NonScalarLoss(self.shape.clone()))
        }
    }

    fn check_same_tape(&self, other: &Tensor, _op: &'static str) -> Result<()> {
        if self.tape.same_tape(&other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTensor)
        }
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }
}

/// Per-leaf gradients produced by [`backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    /// How many times each node's backward rule ran (at most once by design).
    visits: Vec<u32>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t` (zeros if unreachable).
    /// Only leaves retain gradients; interior nodes are freed as the sweep
    /// passes them.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        match self.grads.get(t.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        }
    }

    /// Like [`Gradients::wrt`] but moves the buffer out.
    pub fn take(&mut self, t: &Tensor) -> Vec<f64> {
        match self.grads.get_mut(t.id).and_then(Option::take) {
            Some(g) => g,
            None => vec![0.0; t.len()],
        }
    }

    /// True when `t` received any gradient at all.
    pub fn reached(&self, t: &Tensor) -> bool {
        self.grads.get(t.id).map(Option::is_some).unwrap_or(false)
    }

    /// How many times each node's backward rule ran (at most once each).
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

/// Reverse sweep from a scalar loss. Returns the gradient map for all leaf
/// tensors reachable from `loss`; unreachable leaves read back as zeros.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape.clone()));
    }
    let nodes = loss.tape.nodes.borrow();
    let n = nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    grads.resize_with(n, || None);
    let mut visits = vec![0u32; n];
    grads[loss.id] = Some(vec![1.0]);
    for id in (0..=loss.id).rev() {
        if grads[id].is_none() {
            continue;
        }
        if let Some(vjp) = nodes[id].vjp.as_ref() {
            // Interior node: consume its gradient and push contributions to
            // inputs, which always precede it on the tape.
            let g = grads[id].take().expect("checked above");
            visits[id] += 1;
            for (src, contrib) in vjp(&g) {
                debug_assert!(src < id, "tape order violated");
                match grads[src].as_mut() {
                    Some(acc) => crate::linalg::axpy(1.0, &contrib, acc),
                    None => grads[src] = Some(contrib),
                }
            }
        }
    }
    Ok(Gradients { grads, visits })
}

/// Draw from a Gumbel-softmax relaxation of a categorical given by `logits`
/// (1-D). With `hard`, the forward value is exactly one-hot at the perturbed
/// argmax while the gradient follows the soft sample (straight-through).
pub fn gumbel_softmax(
    logits: &Tensor,
    temperature: f64,
    hard: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "gumbel_softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.shape.len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax",
            left: logits.shape.clone(),
            right: vec![logits.len()],
        });
    }
    let tape = logits.tape.clone();
    let noise: Vec<f64> = (0..logits.len())
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            -(-u.ln()).ln()
        })
        .collect();
    let noise = tape.vector(noise);
    let soft = logits
        .add(&noise)?
        .scale(1.0 / temperature)
        .softmax_rows()?;
    if !hard {
        return Ok(soft);
    }
    // Ties resolve to the lowest index.
    let argmax = soft
        .values()
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("non-empty logits");
    let mut one_hot = vec![0.0; soft.len()];
    one_hot[argmax] = 1.0;
    let hard_const = tape.vector(one_hot);
    // hard + sg(·) pattern: forward = one-hot, backward = soft path.
    soft.add(&hard_const.sub(&soft)?.stop_gradient())
}
