//! Reverse-mode differentiation over parameter trees.
//!
//! [`value_and_grad`] marks the float tensor leaves of the parameter tree as
//! tracked, pushes a fresh [`Tape`] onto a thread-local stack and calls the
//! user function. Every tensor operation whose inputs include a tracked tensor
//! is appended to that tape together with its input values and output. The
//! backward sweep then walks the tape in reverse, applying one rule per
//! primitive.
//!
//! Backward rules are written with the same quantizing tensor operations as
//! the forward pass, so a cotangent is rounded through the dtype of the
//! forward value it belongs to. Half-precision gradients therefore underflow
//! and overflow the way they would on real hardware.

mod rules;

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Op, Tensor};
use crate::tree::{Leaf, Tree};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static ACTIVE: RefCell<Vec<Tape>> = const { RefCell::new(Vec::new()) };
}

/// Link from a tensor to the tape node that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Trace {
    tape: u64,
    node: usize,
}

/// One input of a recorded primitive.
#[derive(Debug, Clone)]
pub struct TapeInput {
    /// Value seen by the forward pass.
    pub value: Tensor,
    /// Producing node, if the input was tracked.
    pub node: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    /// `None` for a differentiable input leaf.
    pub op: Option<Op>,
    pub inputs: Vec<TapeInput>,
    pub output: Tensor,
}

/// Ordered record of primitive applications.
///
/// Nodes only reference earlier nodes, so the vector is already in
/// topological order.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u64,
    nodes: Vec<TapeNode>,
}

impl Tape {
    fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node_of(&self, t: &Tensor) -> Option<usize> {
        match t.trace {
            Some(tr) if tr.tape == self.id => Some(tr.node),
            _ => None,
        }
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<TapeInput>, output: &Tensor) -> Trace {
        self.nodes.push(TapeNode {
            op,
            inputs,
            output: output.detached(),
        });
        Trace {
            tape: self.id,
            node: self.nodes.len() - 1,
        }
    }

    /// Bytes of every recorded forward intermediate, each counted at its
    /// nominal dtype. Input leaves and dtype conversions are left out: a
    /// conversion is fused into its consumer rather than stored.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.op, Some(op) if !matches!(op, Op::Cast(_))))
            .map(|n| n.output.bytes())
            .sum()
    }

    /// Re-runs every primitive on its recorded inputs and checks that the
    /// outputs come out bit-identical.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &i.value).collect();
                let again = kernels::forward(op, &inputs)?;
                if !again.bitwise_eq(&node.output) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Checks that every input reference points at an earlier node.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs.iter().all(|inp| inp.node.is_none_or(|j| j < i)))
    }
}

/// Evaluates `op` and, when a tape on this thread is tracking any of the
/// inputs, records it.
pub(crate) fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let mut out = kernels::forward(&op, inputs)?;
    ACTIVE.with(|stack| {
        let mut stack = stack.borrow_mut();
        if let Some(tape) = stack.last_mut() {
            let tracked = inputs.iter().any(|t| tape.node_of(t).is_some());
            if tracked && out.dtype().is_float() {
                let recorded = inputs
                    .iter()
                    .map(|t| TapeInput {
                        value: t.detached(),
                        node: tape.node_of(t),
                    })
                    .collect();
                out.trace = Some(tape.push(Some(op), recorded, &out));
            }
        }
    });
    Ok(out)
}

/// Pops the tape it pushed, also on early return or unwind.
struct ActiveTape {
    id: u64,
    done: bool,
}

impl ActiveTape {
    fn push() -> Self {
        let tape = Tape::new();
        let id = tape.id;
        ACTIVE.with(|s| s.borrow_mut().push(tape));
        Self { id, done: false }
    }

    fn with<R>(&self, f: impl FnOnce(&mut Tape) -> R) -> R {
        ACTIVE.with(|s| {
            let mut s = s.borrow_mut();
            let tape = s.last_mut().expect("active tape");
            debug_assert_eq!(tape.id, self.id);
            f(tape)
        })
    }

    fn finish(mut self) -> Tape {
        self.done = true;
        ACTIVE.with(|s| s.borrow_mut().pop()).expect("active tape")
    }
}

impl Drop for ActiveTape {
    fn drop(&mut self) {
        if !self.done {
            ACTIVE.with(|s| {
                let mut s = s.borrow_mut();
                if s.last().is_some_and(|t| t.id == self.id) {
                    s.pop();
                }
            });
        }
    }
}

/// What a differentiated function returns: a scalar loss, optionally with an
/// auxiliary tree.
pub trait LossOutput {
    fn into_parts(self) -> (Tensor, Option<Tree>);
}

impl LossOutput for Tensor {
    fn into_parts(self) -> (Tensor, Option<Tree>) {
        (self, None)
    }
}

impl LossOutput for (Tensor, Tree) {
    fn into_parts(self) -> (Tensor, Option<Tree>) {
        (self.0, Some(self.1))
    }
}

/// Result of [`value_and_grad`].
#[derive(Debug, Clone)]
pub struct ValueAndGrad {
    pub value: Tensor,
    /// Same structure as the parameters. Float tensor leaves hold gradients
    /// in the parameter's dtype; every other leaf is [`Leaf::Empty`].
    pub grads: Tree,
    pub aux: Option<Tree>,
    /// See [`Tape::activation_bytes`].
    pub activation_bytes: usize,
}

/// Result of [`trace`]: the forward outputs plus the tape that produced them.
#[derive(Debug, Clone)]
pub struct Traced {
    pub value: Tensor,
    pub aux: Option<Tree>,
    pub tape: Tape,
    /// Tape node of each float tensor leaf of the parameters, in traversal order.
    leaf_nodes: Vec<usize>,
}

fn strip_traces(t: &Tree) -> Tree {
    t.map_leaves(|l| match l {
        Leaf::Tensor(t) => Leaf::Tensor(t.detached()),
        other => other.clone(),
    })
}

/// Runs `f` with the float tensor leaves of `params` tracked.
pub fn trace<F, L>(f: F, params: &Tree, args: &Tree) -> Result<Traced>
where
    F: FnOnce(&Tree, &Tree) -> Result<L>,
    L: LossOutput,
{
    let active = ActiveTape::push();
    let mut leaf_nodes = Vec::new();
    let tracked = params.map_leaves(|leaf| match leaf {
        Leaf::Tensor(t) if t.dtype().is_float() => {
            let mut t = t.detached();
            let tr = active.with(|tape| tape.push(None, Vec::new(), &t));
            leaf_nodes.push(tr.node);
            t.trace = Some(tr);
            Leaf::Tensor(t)
        }
        other => other.clone(),
    });
    let untracked_args = strip_traces(args);
    let (value, aux) = f(&tracked, &untracked_args)?.into_parts();
    let root = active.with(|tape| tape.node_of(&value));
    let mut tape = active.finish();
    // keep the root reachable by marking it on the returned value
    let value = match root {
        Some(node) => {
            let mut v = value.detached();
            v.trace = Some(Trace {
                tape: tape.id,
                node,
            });
            v
        }
        None => value.detached(),
    };
    tape.nodes.shrink_to_fit();
    Ok(Traced {
        value,
        aux: aux.as_ref().map(strip_traces),
        tape,
        leaf_nodes,
    })
}

impl Traced {
    /// Backpropagates from the traced value and assembles the gradient tree.
    pub fn gradients(&self, params: &Tree) -> Result<Tree> {
        let value = &self.value;
        if value.rank() != 0 {
            return Err(Error::NonScalarOutput {
                shape: value.shape().to_vec(),
            });
        }
        if !value.dtype().is_float() {
            return Err(Error::NotFloat {
                op: "value_and_grad",
                dtype: value.dtype(),
            });
        }
        let cotangents = match self.tape.node_of(value) {
            Some(root) => backward(&self.tape, root, Tensor::scalar(1.0, value.dtype()))?,
            None => vec![None; self.tape.len()],
        };
        let mut next = self.leaf_nodes.iter();
        params.try_map_leaves(|_, leaf| {
            Ok(match leaf {
                Leaf::Tensor(t) if t.dtype().is_float() => {
                    let node = *next.next().expect("one tape leaf per float parameter");
                    match &cotangents[node] {
                        Some(g) => Leaf::Tensor(g.detached()),
                        None => Leaf::Tensor(Tensor::zeros(t.shape().to_vec(), t.dtype())),
                    }
                }
                _ => Leaf::Empty,
            })
        })
    }
}

fn backward(tape: &Tape, root: usize, seed: Tensor) -> Result<Vec<Option<Tensor>>> {
    let mut cts: Vec<Option<Tensor>> = vec![None; tape.len()];
    cts[root] = Some(seed);
    for i in (0..=root).rev() {
        let node = &tape.nodes[i];
        let Some(op) = &node.op else { continue };
        let Some(ct) = cts[i].take() else { continue };
        let contributions = rules::vjp(op, node, &ct)?;
        for (input, contribution) in node.inputs.iter().zip(contributions) {
            let (Some(j), Some(c)) = (input.node, contribution) else {
                continue;
            };
            let c = c.cast(tape.nodes[j].output.dtype())?;
            cts[j] = Some(match cts[j].take() {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
        }
    }
    Ok(cts)
}

/// Value and gradient of `f` with respect to the float tensor leaves of
/// `params`. `args` is passed through undifferentiated.
///
/// The seed cotangent is 1 in the loss dtype; integer, scalar and opaque
/// parameter leaves get [`Leaf::Empty`] in the gradient tree.
pub fn value_and_grad<F, L>(f: F, params: &Tree, args: &Tree) -> Result<ValueAndGrad>
where
    F: FnOnce(&Tree, &Tree) -> Result<L>,
    L: LossOutput,
{
    let traced = trace(f, params, args)?;
    let grads = traced.gradients(params)?;
    Ok(ValueAndGrad {
        value: traced.value.detached(),
        grads,
        aux: traced.aux,
        activation_bytes: traced.tape.activation_bytes(),
    })
}
