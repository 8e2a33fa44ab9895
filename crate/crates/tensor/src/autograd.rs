use std::cell::Cell;
use std::collections::{HashMap, HashSet};

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording autodiff history.
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

/// Gradients of leaf tensors, keyed by tensor identity.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Tensor> {
        self.map.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(g) = &t.0.grad_fn {
            for input in &g.inputs {
                if input.is_tracked() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode sweep from a scalar `root`. Returns the gradient of every
/// tracked leaf reachable from it.
pub fn backward(root: &Tensor) -> Gradients {
    assert_eq!(root.numel(), 1, "backward() needs a scalar root, got {:?}", root.shape());
    let seed = Tensor::ones(root.shape(), root.dtype());
    backward_from(root, seed)
}

/// Reverse-mode sweep seeded with an explicit output cotangent.
pub fn backward_from(root: &Tensor, seed: Tensor) -> Gradients {
    assert_eq!(seed.shape(), root.shape());
    let mut out = Gradients::default();
    if !root.is_tracked() {
        return out;
    }
    let order = topo_order(root);
    no_grad(|| {
        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(root.id(), seed);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.grad_fn {
                None => {
                    out.map.insert(t.id(), g);
                }
                Some(gf) => {
                    let grads = (gf.backward)(&g);
                    debug_assert_eq!(grads.len(), gf.inputs.len(), "{}", gf.op);
                    for (input, grad) in gf.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.is_tracked() {
                            continue;
                        }
                        assert_eq!(
                            grad.shape(),
                            input.shape(),
                            "{}: gradient shape mismatch",
                            gf.op
                        );
                        let acc = match pending.remove(&input.id()) {
                            Some(prev) => prev.add(&grad),
                            None => grad,
                        };
                        pending.insert(input.id(), acc);
                    }
                }
            }
        }
    });
    out
}
