//! Minimal f64 layer stack with hand-written backward passes.
//!
//! Everything runs on (N, C, H, W) `Array4<f64>` batches, sequentially
//! and deterministically: fixed iteration order, no threading, no
//! fused/approximate kernels. That keeps training runs bit-reproducible
//! and makes the finite-difference gradient checks meaningful.

pub mod adam;
pub mod conv;
pub mod init;
pub mod layers;

use ndarray::{Array4, ArrayViewMutD};

pub type Batch = Array4<f64>;

/// One named tensor slot exposed by a layer: either a trainable
/// parameter with its gradient, or a non-trained buffer (running stats).
pub enum Slot<'a> {
    Param {
        value: ArrayViewMutD<'a, f64>,
        grad: ArrayViewMutD<'a, f64>,
    },
    Buffer {
        value: ArrayViewMutD<'a, f64>,
    },
}

pub trait Layer: Send + Sync {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch;
    fn backward(&mut self, grad_out: &Batch) -> Batch;
    /// Visits every slot under `prefix`-qualified names, in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot));
}

pub fn zero_grads(net: &mut dyn Layer) {
    net.visit("", &mut |_, slot| {
        if let Slot::Param { mut grad, .. } = slot {
            grad.fill(0.0);
        }
    });
}

pub fn param_count(net: &mut dyn Layer) -> usize {
    let mut n = 0;
    net.visit("", &mut |_, slot| {
        if let Slot::Param { value, .. } = slot {
            n += value.len();
        }
    });
    n
}

pub fn collect_params(net: &mut dyn Layer) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit("", &mut |_, slot| {
        if let Slot::Param { value, .. } = slot {
            out.extend(value.iter().copied());
        }
    });
    out
}

pub fn set_params(net: &mut dyn Layer, flat: &[f64]) {
    let mut i = 0;
    net.visit("", &mut |_, slot| {
        if let Slot::Param { mut value, .. } = slot {
            for v in value.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
    });
    assert_eq!(i, flat.len(), "flat parameter vector length mismatch");
}

pub fn collect_grads(net: &mut dyn Layer) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit("", &mut |_, slot| {
        if let Slot::Param { grad, .. } = slot {
            out.extend(grad.iter().copied());
        }
    });
    out
}

/// Central finite-difference check of `loss` against the analytic
/// gradient already stored in the net. Returns the worst relative error
/// over coordinates with non-negligible magnitude.
pub fn finite_diff_rel_err(
    net: &mut dyn Layer,
    analytic: &[f64],
    mut loss: impl FnMut(&mut dyn Layer) -> f64,
    h: f64,
) -> f64 {
    let base = collect_params(net);
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        set_params(net, &p);
        let lp = loss(net);
        p[i] = base[i] - h;
        set_params(net, &p);
        let lm = loss(net);
        let num = (lp - lm) / (2.0 * h);
        let denom = num.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max((num - analytic[i]).abs() / denom);
    }
    set_params(net, &base);
    worst
}

/// Plain sequential container.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Self { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&format!("{prefix}{i}."), f);
        }
    }
}
