//! The thread-local recording tape behind [`Tensor`](super::Tensor).
//!
//! Every op whose inputs track gradients appends one node holding the ids of
//! its inputs and a closure mapping the output gradient to input gradients.
//! Nodes are appended in evaluation order, so the list is topologically
//! sorted by construction and a single reverse sweep visits each node once.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub(crate) type GradCell = Rc<RefCell<Vec<f64>>>;

/// Maps the output gradient to one optional gradient per op input. The mask
/// says which inputs actually need a gradient; unneeded entries may be `None`.
pub(crate) type BackwardFn = Box<dyn FnOnce(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

pub(crate) enum Link {
    Constant,
    Leaf(GradCell),
    Node(usize),
}

struct Node {
    inputs: Vec<Link>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    epoch: u64,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn current_epoch() -> u64 {
    TAPE.with(|t| t.borrow().epoch)
}

pub(crate) fn push(inputs: Vec<Link>, backward: BackwardFn) -> (usize, u64) {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            inputs,
            backward: Some(backward),
        });
        (id, tape.epoch)
    })
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().nodes.len())
}

/// Discards everything recorded so far. Tensors produced before the reset
/// behave as constants afterwards.
pub fn reset_tape() {
    TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        tape.nodes.clear();
        tape.epoch += 1;
    });
}

/// Runs `f` with recording disabled; every tensor produced inside is a
/// constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn accumulate(dst: &mut Vec<f64>, src: Vec<f64>) {
    if dst.is_empty() {
        *dst = src;
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Reverse sweep from node `root`, seeding it with `seed`. Consumes the tape.
pub(crate) fn run_backward(root: usize, seed: Vec<f64>) {
    let nodes = TAPE.with(|t| {
        let mut tape = t.borrow_mut();
        tape.epoch += 1;
        std::mem::take(&mut tape.nodes)
    });
    let mut nodes = nodes;
    nodes.truncate(root + 1);
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
    grads[root] = seed;

    for id in (0..nodes.len()).rev() {
        let grad_out = std::mem::take(&mut grads[id]);
        if grad_out.is_empty() {
            continue;
        }
        let node = &mut nodes[id];
        let Some(backward) = node.backward.take() else {
            continue;
        };
        let needs: Vec<bool> = node
            .inputs
            .iter()
            .map(|l| !matches!(l, Link::Constant))
            .collect();
        let input_grads = backward(&grad_out, &needs);
        for (link, g) in node.inputs.iter().zip(input_grads) {
            let Some(g) = g else { continue };
            match link {
                Link::Constant => {}
                Link::Leaf(cell) => {
                    let mut cell = cell.borrow_mut();
                    for (d, s) in cell.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                Link::Node(parent) => {
                    debug_assert!(*parent < id, "tape is not topologically ordered");
                    accumulate(&mut grads[*parent], g);
                }
            }
        }
    }
}
