//! 2-D convolution via im2col and a single matrix multiply per sample.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::init::{he_std, randn};
use super::{Batch, Layer, Slot};

pub struct Conv2d {
    pub name: String,
    pub w: Array4<f64>, // (out_c, in_c, kh, kw)
    pub b: Array1<f64>,
    pub gw: Array4<f64>,
    pub gb: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Cache>,
}

struct Cache {
    cols: Vec<Array2<f64>>, // one (in_c*kh*kw, oh*ow) per sample
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = he_std(in_c * kernel * kernel);
        let w = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), || std * randn(rng));
        Self {
            name: name.to_string(),
            gw: Array4::zeros(w.dim()),
            w,
            b: Array1::zeros(out_c),
            gb: Array1::zeros(out_c),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        assert!(
            h + 2 * self.pad >= k && w + 2 * self.pad >= k,
            "conv {}: input {h}x{w} smaller than kernel {k}",
            self.name
        );
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Batch, n: usize, oh: usize, ow: usize) -> Array2<f64> {
        let (_, in_c, h, w) = x.dim();
        let k = self.w.dim().2;
        let mut cols = Array2::zeros((in_c * k * k, oh * ow));
        for ci in 0..in_c {
            for kr in 0..k {
                for kc in 0..k {
                    let row = (ci * k + kr) * k + kc;
                    for or in 0..oh {
                        let sr = (or * self.stride + kr) as isize - self.pad as isize;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        for oc in 0..ow {
                            let sc = (oc * self.stride + kc) as isize - self.pad as isize;
                            if sc < 0 || sc >= w as isize {
                                continue;
                            }
                            cols[[row, or * ow + oc]] = x[[n, ci, sr as usize, sc as usize]];
                        }
                    }
                }
            }
        }
        cols
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Batch, _train: bool) -> Batch {
        let (n, in_c, h, w) = x.dim();
        let (out_c, w_in_c, k, _) = self.w.dim();
        assert_eq!(in_c, w_in_c, "conv {}: input channel mismatch", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();

        let mut out = Array4::zeros((n, out_c, oh, ow));
        let mut cols_cache = Vec::with_capacity(n);
        for ni in 0..n {
            let cols = self.im2col(x, ni, oh, ow);
            let y = w_mat.dot(&cols); // (out_c, oh*ow)
            let mut out_n = out.index_axis_mut(Axis(0), ni);
            for co in 0..out_c {
                let bias = self.b[co];
                for or in 0..oh {
                    for oc in 0..ow {
                        out_n[[co, or, oc]] = y[[co, or * ow + oc]] + bias;
                    }
                }
            }
            cols_cache.push(cols);
        }
        self.cache = Some(Cache {
            cols: cols_cache,
            in_dim: (n, in_c, h, w),
            out_hw: (oh, ow),
        });
        out
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (n, in_c, h, w) = cache.in_dim;
        let (oh, ow) = cache.out_hw;
        let (out_c, _, k, _) = self.w.dim();
        let w_mat = self
            .w
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();

        let mut gin = Array4::zeros((n, in_c, h, w));
        let mut gw_mat = Array2::<f64>::zeros((out_c, in_c * k * k));
        for ni in 0..n {
            let mut gout_mat = Array2::zeros((out_c, oh * ow));
            for co in 0..out_c {
                for or in 0..oh {
                    for oc in 0..ow {
                        let g = grad_out[[ni, co, or, oc]];
                        gout_mat[[co, or * ow + oc]] = g;
                        self.gb[co] += g;
                    }
                }
            }
            gw_mat = gw_mat + gout_mat.dot(&cache.cols[ni].t());
            let gcols = w_mat.t().dot(&gout_mat); // (in_c*k*k, oh*ow)

            // col2im
            for ci in 0..in_c {
                for kr in 0..k {
                    for kc in 0..k {
                        let row = (ci * k + kr) * k + kc;
                        for or in 0..oh {
                            let sr = (or * self.stride + kr) as isize - self.pad as isize;
                            if sr < 0 || sr >= h as isize {
                                continue;
                            }
                            for oc in 0..ow {
                                let sc = (oc * self.stride + kc) as isize - self.pad as isize;
                                if sc < 0 || sc >= w as isize {
                                    continue;
                                }
                                gin[[ni, ci, sr as usize, sc as usize]] +=
                                    gcols[[row, or * ow + oc]];
                            }
                        }
                    }
                }
            }
        }
        let gw4 = gw_mat
            .into_shape_with_order(self.w.dim())
            .unwrap();
        self.gw += &gw4;
        gin
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        f(
            &format!("{prefix}{}.w", self.name),
            Slot::Param {
                value: self.w.view_mut().into_dyn(),
                grad: self.gw.view_mut().into_dyn(),
            },
        );
        f(
            &format!("{prefix}{}.b", self.name),
            Slot::Param {
                value: self.b.view_mut().into_dyn(),
                grad: self.gb.view_mut().into_dyn(),
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, &mut rng);
        conv.w.fill(0.0);
        conv.w[[0, 0, 1, 1]] = 1.0;
        conv.b.fill(0.0);
        let x = Array4::from_shape_fn((1, 1, 5, 5), |(_, _, r, c)| (r * 5 + c) as f64);
        let y = conv.forward(&x, true);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_stride2_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 3, 8, 4, 2, 1, &mut rng);
        let x = Array4::zeros((2, 3, 16, 16));
        let y = conv.forward(&x, true);
        assert_eq!(y.dim(), (2, 8, 8, 8));
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        use crate::nn::{collect_grads, finite_diff_rel_err, zero_grads};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv2d::new("c", 2, 3, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_simple_fn((2, 2, 5, 5), || randn(&mut rng));
        // Scalar loss: sum of squares of the output.
        let loss = |net: &mut dyn Layer, x: &Batch| -> f64 {
            let y = net.forward(x, true);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        zero_grads(&mut conv);
        let y = conv.forward(&x, true);
        let gout = y.mapv(|v| 2.0 * v);
        conv.backward(&gout);
        let analytic = collect_grads(&mut conv);
        let err = finite_diff_rel_err(&mut conv, &analytic, |n| loss(n, &x), 1e-6);
        assert!(err < 1e-6, "relative error {err}");
    }
}
