//! Adam over a layer's visited parameter slots.

use serde::{Deserialize, Serialize};

use super::{Layer, Slot};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One update; gradients must already be populated. Parameter order
    /// follows the layer's visit order, which is fixed per architecture.
    pub fn step(&mut self, net: &mut dyn Layer, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        net.visit("", &mut |_, slot| {
            if let Slot::Param { mut value, grad } = slot {
                for (p, &g) in value.iter_mut().zip(grad.iter()) {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.eps);
                    i += 1;
                }
            }
        });
        assert_eq!(i, self.m.len(), "adam state does not match parameter count");
    }
}
