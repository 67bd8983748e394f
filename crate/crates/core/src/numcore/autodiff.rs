use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adjoint function: given d(loss)/d(output), return one gradient
/// contribution per recorded input (None for inputs that get none).
pub(crate) type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// How a tensor was produced. Consumed (cleared) by `backward`.
pub(crate) struct OpRecord {
    pub(crate) name: &'static str,
    pub(crate) inputs: Vec<Tensor>,
    pub(crate) back: BackFn,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording ops; results never require gradients. Used for
/// inference and for the numeric side of gradient checks.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Record an op result: the output requires grad (and carries the record)
/// when recording is enabled and any input requires grad.
pub(crate) fn record(
    name: &'static str,
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: Vec<usize>,
    back: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
) -> Result<Tensor> {
    let dtype = inputs[0].dtype();
    let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let rec = track.then(|| OpRecord {
        name,
        inputs: inputs.iter().map(|&t| t.clone()).collect(),
        back: Box::new(back),
    });
    Tensor::from_op(name, data, shape, dtype, track, rec)
}

/// Reverse-mode pass from a scalar loss. Populates `grad` on every
/// grad-requiring tensor reachable from the loss (leaves and intermediates
/// alike) and clears the op records it consumed. Tensors the loss never
/// touched keep `grad = None`, which readers treat as zero.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Invalid(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }

    // Post-order DFS over input edges gives a reverse topological order.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.inner.id) {
            continue;
        }
        let children: Vec<Tensor> = node
            .inner
            .op
            .lock()
            .unwrap()
            .as_ref()
            .map(|rec| rec.inputs.clone())
            .unwrap_or_default();
        stack.push((node, true));
        for child in children {
            if !seen.contains(&child.inner.id) {
                stack.push((child, false));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.inner.id, vec![1.0]);

    for node in order.iter().rev() {
        let Some(gout) = grads.get(&node.inner.id).cloned() else {
            continue;
        };
        let rec = node.inner.op.lock().unwrap().take();
        let Some(rec) = rec else { continue };
        let contributions = (rec.back)(&gout);
        debug_assert_eq!(contributions.len(), rec.inputs.len());
        for (input, contrib) in rec.inputs.iter().zip(contributions) {
            let Some(c) = contrib else { continue };
            if !input.requires_grad() {
                continue;
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: rec.name });
            }
            debug_assert_eq!(c.len(), input.numel());
            let dtype = input.dtype();
            match grads.get_mut(&input.inner.id) {
                Some(acc) => {
                    for (a, ci) in acc.iter_mut().zip(&c) {
                        *a = dtype.round(*a + ci);
                    }
                }
                None => {
                    grads.insert(input.inner.id, dtype.round_vec(c));
                }
            }
        }
    }

    for node in &order {
        if !node.requires_grad() {
            continue;
        }
        let Some(g) = grads.remove(&node.inner.id) else {
            continue;
        };
        let mut slot = node.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                let dtype = node.dtype();
                for (a, gi) in existing.iter_mut().zip(&g) {
                    *a = dtype.round(*a + gi);
                }
            }
            None => *slot = Some(g),
        }
    }

    Ok(())
}
