//! Activations, batch normalization and bilinear upsampling.

use ndarray::{Array1, Array4};

use super::{Batch, Layer, Slot};

pub struct LeakyRelu {
    pub slope: f64,
    cache: Option<Batch>, // input
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, cache: None }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Batch, _train: bool) -> Batch {
        self.cache = Some(x.clone());
        x.mapv(|v| if v > 0.0 { v } else { self.slope * v })
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let x = self.cache.as_ref().expect("backward before forward");
        let mut g = grad_out.clone();
        g.zip_mut_with(x, |gv, &xv| {
            if xv <= 0.0 {
                *gv *= self.slope;
            }
        });
        g
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot)) {}
}

pub struct Sigmoid {
    cache: Option<Batch>, // output
}

impl Sigmoid {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl Default for Sigmoid {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sigmoid {
    fn forward(&mut self, x: &Batch, _train: bool) -> Batch {
        let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let y = self.cache.as_ref().expect("backward before forward");
        let mut g = grad_out.clone();
        g.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
        g
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot)) {}
}

/// Per-channel batch normalization over (N, H, W).
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Batch,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut out = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let (mu, var) = if train {
                let mut sum = 0.0;
                for ni in 0..n {
                    for r in 0..h {
                        for cc in 0..w {
                            sum += x[[ni, ci, r, cc]];
                        }
                    }
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for ni in 0..n {
                    for r in 0..h {
                        for cc in 0..w {
                            let d = x[[ni, ci, r, cc]] - mu;
                            sq += d * d;
                        }
                    }
                }
                let var = sq / m;
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mu;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
                (mu, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let g = self.gamma[ci];
            let b = self.beta[ci];
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let xh = (x[[ni, ci, r, cc]] - mu) * istd;
                        xhat[[ni, ci, r, cc]] = xh;
                        out[[ni, ci, r, cc]] = g * xh + b;
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train,
        });
        out
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let cache = self.cache.as_ref().expect("backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let mut gin = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let istd = cache.inv_std[ci];
            let g = self.gamma[ci];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let dy = grad_out[[ni, ci, r, cc]];
                        sum_dy += dy;
                        sum_dy_xhat += dy * cache.xhat[[ni, ci, r, cc]];
                    }
                }
            }
            self.gbeta[ci] += sum_dy;
            self.ggamma[ci] += sum_dy_xhat;
            for ni in 0..n {
                for r in 0..h {
                    for cc in 0..w {
                        let dy = grad_out[[ni, ci, r, cc]];
                        let xh = cache.xhat[[ni, ci, r, cc]];
                        gin[[ni, ci, r, cc]] = if cache.train {
                            g * istd / m * (m * dy - sum_dy - xh * sum_dy_xhat)
                        } else {
                            g * istd * dy
                        };
                    }
                }
            }
        }
        gin
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        f(
            &format!("{prefix}{}.gamma", self.name),
            Slot::Param {
                value: self.gamma.view_mut().into_dyn(),
                grad: self.ggamma.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}{}.beta", self.name),
            Slot::Param {
                value: self.beta.view_mut().into_dyn(),
                grad: self.gbeta.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}{}.running_mean", self.name),
            Slot::Buffer {
                value: self.running_mean.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}{}.running_var", self.name),
            Slot::Buffer {
                value: self.running_var.view_mut().into_dyn(),
            },
        );
    }
}

fn upsample_table(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    // align_corners = false mapping: s = (o + 0.5) / 2 - 0.5
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) / 2.0 - 0.5;
            let s0 = s.floor();
            let w1 = s - s0;
            let i0 = (s0 as isize).clamp(0, in_len as isize - 1) as usize;
            let i1 = (s0 as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Bilinear x2 upsampling; backward is the exact adjoint.
pub struct Upsample2 {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl Upsample2 {
    pub fn new() -> Self {
        Self { in_dim: None }
    }
}

impl Default for Upsample2 {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Upsample2 {
    fn forward(&mut self, x: &Batch, _train: bool) -> Batch {
        let (n, c, h, w) = x.dim();
        self.in_dim = Some((n, c, h, w));
        let rows = upsample_table(2 * h, h);
        let cols = upsample_table(2 * w, w);
        let mut out = Array4::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for (or, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
                    for (oc, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                        out[[ni, ci, or, oc]] = wr0 * wc0 * x[[ni, ci, r0, c0]]
                            + wr0 * wc1 * x[[ni, ci, r0, c1]]
                            + wr1 * wc0 * x[[ni, ci, r1, c0]]
                            + wr1 * wc1 * x[[ni, ci, r1, c1]];
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let (n, c, h, w) = self.in_dim.expect("backward before forward");
        let rows = upsample_table(2 * h, h);
        let cols = upsample_table(2 * w, w);
        let mut gin = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for (or, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
                    for (oc, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                        let g = grad_out[[ni, ci, or, oc]];
                        gin[[ni, ci, r0, c0]] += wr0 * wc0 * g;
                        gin[[ni, ci, r0, c1]] += wr0 * wc1 * g;
                        gin[[ni, ci, r1, c0]] += wr1 * wc0 * g;
                        gin[[ni, ci, r1, c1]] += wr1 * wc1 * g;
                    }
                }
            }
        }
        gin
    }

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_range_and_grad() {
        let mut s = Sigmoid::new();
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, r, c)| (r as f64 - c as f64) * 3.0);
        let y = s.forward(&x, true);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let g = s.backward(&Array4::ones((1, 1, 2, 2)));
        // d sigmoid(0)/dx = 0.25
        assert!((g[[0, 0, 0, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn upsample_doubles_and_preserves_constants() {
        let mut up = Upsample2::new();
        let x = Array4::from_elem((1, 2, 3, 4), 0.7);
        let y = up.forward(&x, true);
        assert_eq!(y.dim(), (1, 2, 6, 8));
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <Up(x), g> == <x, Up^T(g)> for random x, g.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array4::from_shape_simple_fn((2, 3, 4, 5), || randn(&mut rng));
        let mut up = Upsample2::new();
        let y = up.forward(&x, true);
        let g = Array4::from_shape_simple_fn(y.dim(), || randn(&mut rng));
        let gin = up.backward(&g);
        let lhs: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(gin.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn batchnorm_normalizes_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = Array4::from_shape_simple_fn((4, 3, 6, 6), || 2.0 + 3.0 * randn(&mut rng));
        let y = bn.forward(&x, true);
        for ci in 0..3 {
            let vals: Vec<f64> = y
                .index_axis(ndarray::Axis(1), ci)
                .iter()
                .copied()
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        use crate::nn::{collect_grads, finite_diff_rel_err, zero_grads, Layer};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma
            .iter_mut()
            .for_each(|g| *g = 1.0 + 0.3 * randn(&mut rng));
        let x = Array4::from_shape_simple_fn((2, 2, 3, 3), || randn(&mut rng));
        let target = Array4::from_shape_simple_fn((2, 2, 3, 3), || randn(&mut rng));
        let loss = |net: &mut dyn Layer, x: &Batch| -> f64 {
            let y = net.forward(x, true);
            y.iter()
                .zip(target.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        zero_grads(&mut bn);
        let y = bn.forward(&x, true);
        let gout = ndarray::Zip::from(&y).and(&target).map_collect(|a, b| 2.0 * (a - b));
        bn.backward(&gout);
        let analytic = collect_grads(&mut bn);
        let err = finite_diff_rel_err(&mut bn, &analytic, |n| loss(n, &x), 1e-6);
        assert!(err < 1e-5, "relative error {err}");
    }
}
