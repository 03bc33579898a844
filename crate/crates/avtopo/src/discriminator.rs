//! Conditioned patch-level discriminator with an ordinal two-bit head,
//! plus the ranking adversarial losses.
//!
//! The three connectivity ranks are encoded as monotone bit pairs:
//! shuffled (0,0) < generated (1,0) < ground truth (1,1). Bit one asks
//! "better than shuffled?", bit two "better than generated?". The loss
//! uses full two-sided cross entropy per bit; with the one-sided form the
//! all-zeros class would contribute nothing and the ranking could not be
//! learned.

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::layers::{BatchNorm2d, LeakyRelu, Sigmoid};
use crate::nn::{Batch, Layer, Sequential, Slot};

pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Shuffled,
    Generated,
    GroundTruth,
}

/// Monotone two-bit ordinal code; (0,1) is not a valid code word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrdinalTarget {
    pub bits: (u8, u8),
}

impl OrdinalTarget {
    pub fn new(bits: (u8, u8)) -> Result<Self> {
        match bits {
            (0, 0) | (1, 0) | (1, 1) => Ok(Self { bits }),
            _ => Err(Error::Parameter(format!(
                "non-monotone ordinal code {bits:?}"
            ))),
        }
    }

    /// Decodes thresholded bits back to the rank.
    pub fn decode(scores: (f64, f64)) -> Rank {
        let b1 = scores.0 >= 0.5;
        let b2 = scores.1 >= 0.5;
        match (b1, b2) {
            (true, true) => Rank::GroundTruth,
            (true, false) => Rank::Generated,
            _ => Rank::Shuffled,
        }
    }
}

pub fn ordinal_target(rank: Rank) -> OrdinalTarget {
    let bits = match rank {
        Rank::Shuffled => (0, 0),
        Rank::Generated => (1, 0),
        Rank::GroundTruth => (1, 1),
    };
    OrdinalTarget { bits }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// 2 for the ordinal ranking head, 1 for a plain real/fake head.
    pub head_bits: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            head_bits: 2,
            seed: 0,
        }
    }
}

/// Six conv layers, kernel 4: stride 2 for the first three, stride 1
/// after, LeakyReLU(0.2), sigmoid score map.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    net: Sequential,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        if cfg.base_width < 2 {
            return Err(Error::Parameter("discriminator base_width below 2".into()));
        }
        if cfg.head_bits != 1 && cfg.head_bits != 2 {
            return Err(Error::Parameter("head_bits must be 1 or 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.base_width;
        let widths = [6, w, 2 * w, 4 * w, 4 * w, 4 * w];
        let strides = [2, 2, 2, 1, 1];
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        for i in 0..5 {
            layers.push(Box::new(Conv2d::new(
                &format!("c{}", i + 1),
                widths[i],
                widths[i + 1],
                4,
                strides[i],
                1,
                &mut rng,
            )));
            if i > 0 {
                layers.push(Box::new(BatchNorm2d::new(&format!("bn{}", i + 1), widths[i + 1])));
            }
            layers.push(Box::new(LeakyRelu::new(0.2)));
        }
        layers.push(Box::new(Conv2d::new(
            "c6",
            widths[5],
            cfg.head_bits,
            4,
            1,
            1,
            &mut rng,
        )));
        layers.push(Box::new(Sigmoid::new()));
        Ok(Self {
            cfg,
            net: Sequential::new(layers),
        })
    }

    /// Concatenates image and mask into the 6-channel conditioned input.
    pub fn concat_input(x: &Batch, m: &Batch) -> Result<Batch> {
        let (nx, cx, hx, wx) = x.dim();
        let (nm, cm, hm, wm) = m.dim();
        if (nx, hx, wx) != (nm, hm, wm) || cx != 3 || cm != 3 {
            return Err(Error::Shape(format!(
                "cannot condition: image {:?} vs mask {:?}",
                x.dim(),
                m.dim()
            )));
        }
        Ok(ndarray::concatenate(Axis(1), &[x.view(), m.view()]).expect("concat"))
    }
}

impl Layer for Discriminator {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        assert_eq!(x.dim().1, 6, "discriminator expects 6 input channels");
        self.net.forward(x, train)
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        self.net.backward(grad_out)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        self.net.visit(prefix, f);
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Mean two-sided cross entropy of one score map against a broadcast
/// bit-pair target. Returns (loss, d loss / d scores).
fn bce_map(scores: &Batch, target: &OrdinalTarget) -> (f64, Batch) {
    let count = scores.len() as f64;
    let bits = [target.bits.0 as f64, target.bits.1 as f64];
    let mut loss = 0.0;
    let mut grad = Array4::zeros(scores.dim());
    for ((idx, &s), g) in scores.indexed_iter().zip(grad.iter_mut()) {
        let t = bits[idx.1.min(1)];
        let sc = clamp_score(s);
        loss += -(t * sc.ln() + (1.0 - t) * (1.0 - sc).ln());
        *g = (sc - t) / (sc * (1.0 - sc)) / count;
    }
    (loss / count, grad)
}

/// Discriminator ranking loss over the three conditioned score maps
/// (shuffled, generated, ground truth), mean over maps. The generated
/// map is treated as a constant with respect to the generator.
pub fn disc_loss(
    outputs: [&Batch; 3],
    targets: [OrdinalTarget; 3],
) -> Result<(f64, Vec<Batch>)> {
    if outputs[0].dim() != outputs[1].dim() || outputs[1].dim() != outputs[2].dim() {
        return Err(Error::Shape("ranking score maps differ in shape".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(3);
    for (out, tgt) in outputs.iter().zip(targets.iter()) {
        let (l, mut g) = bce_map(out, tgt);
        total += l / 3.0;
        g.mapv_inplace(|v| v / 3.0);
        grads.push(g);
    }
    Ok((total, grads))
}

/// Generator-side adversarial loss: mean −log score against the
/// all-ones (ground-truth) code, gradients flowing to the generator.
pub fn gen_adv_loss(output: &Batch) -> (f64, Batch) {
    let count = output.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(output.dim());
    for (&s, g) in output.iter().zip(grad.iter_mut()) {
        let sc = clamp_score(s);
        loss += -sc.ln();
        *g = -1.0 / sc / count;
    }
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{collect_grads, finite_diff_rel_err, zero_grads};
    use ndarray::Array4;

    #[test]
    fn ordinal_targets_match_rank_encoding() {
        assert_eq!(ordinal_target(Rank::Shuffled).bits, (0, 0));
        assert_eq!(ordinal_target(Rank::Generated).bits, (1, 0));
        assert_eq!(ordinal_target(Rank::GroundTruth).bits, (1, 1));
        assert!(OrdinalTarget::new((0, 1)).is_err());
    }

    #[test]
    fn decoding_thresholded_bits_recovers_rank() {
        assert_eq!(OrdinalTarget::decode((0.1, 0.2)), Rank::Shuffled);
        assert_eq!(OrdinalTarget::decode((0.9, 0.2)), Rank::Generated);
        assert_eq!(OrdinalTarget::decode((0.9, 0.8)), Rank::GroundTruth);
    }

    #[test]
    fn disc_output_shape_follows_six_layer_geometry() {
        let mut d = Discriminator::new(DiscriminatorConfig {
            base_width: 4,
            head_bits: 2,
            seed: 0,
        })
        .unwrap();
        // Three stride-2 layers: 64 -> 8, three stride-1 k4p1 layers
        // shave one pixel each.
        let x = Array4::from_elem((1, 6, 64, 64), 0.3);
        let y = d.forward(&x, false);
        assert_eq!(y.dim(), (1, 2, 5, 5));
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn disc_forward_is_deterministic() {
        let cfg = DiscriminatorConfig {
            base_width: 4,
            head_bits: 2,
            seed: 5,
        };
        let x = Array4::from_shape_fn((1, 6, 32, 32), |(_, c, r, cc)| {
            ((c * 7 + r * 3 + cc) % 11) as f64 / 11.0
        });
        let y1 = Discriminator::new(cfg.clone()).unwrap().forward(&x, false);
        let y2 = Discriminator::new(cfg).unwrap().forward(&x, false);
        assert_eq!(y1, y2);
    }

    #[test]
    fn disc_loss_hand_values() {
        // All scores 0.5 -> ln 2 regardless of targets.
        let half = Array4::from_elem((1, 2, 3, 3), 0.5);
        let targets = [
            ordinal_target(Rank::Shuffled),
            ordinal_target(Rank::Generated),
            ordinal_target(Rank::GroundTruth),
        ];
        let (l, _) = disc_loss([&half, &half, &half], targets).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // Perfect scores -> ~0.
        let mk = |bits: (u8, u8)| {
            let mut m = Array4::zeros((1, 2, 1, 1));
            m[[0, 0, 0, 0]] = if bits.0 == 1 { 1.0 - 1e-9 } else { 1e-9 };
            m[[0, 1, 0, 0]] = if bits.1 == 1 { 1.0 - 1e-9 } else { 1e-9 };
            m
        };
        let (s, g, t) = (mk((0, 0)), mk((1, 0)), mk((1, 1)));
        let (l, _) = disc_loss([&s, &g, &t], targets).unwrap();
        assert!(l < 1e-6);

        // Single-pixel map, target (1,0), score (0.9, 0.1):
        // -(ln 0.9 + ln 0.9)/2 for that term alone.
        let mut m = Array4::zeros((1, 2, 1, 1));
        m[[0, 0, 0, 0]] = 0.9;
        m[[0, 1, 0, 0]] = 0.1;
        let (single, _) = bce_map(&m, &ordinal_target(Rank::Generated));
        assert!((single - (-(0.9f64.ln() + 0.9f64.ln()) / 2.0)).abs() < 1e-12);
        assert!((single - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn disc_loss_minimized_exactly_at_targets() {
        // Moving any score toward its target bit lowers the loss.
        let base = Array4::from_elem((1, 2, 2, 2), 0.5);
        let targets = [
            ordinal_target(Rank::Shuffled),
            ordinal_target(Rank::Generated),
            ordinal_target(Rank::GroundTruth),
        ];
        let (l0, grads) = disc_loss([&base, &base, &base], targets).unwrap();
        let stepped: Vec<Batch> = grads
            .iter()
            .map(|g| {
                let mut s = base.clone();
                s.zip_mut_with(g, |sv, &gv| *sv = (*sv - 10.0 * gv).clamp(0.01, 0.99));
                s
            })
            .collect();
        let (l1, _) = disc_loss([&stepped[0], &stepped[1], &stepped[2]], targets).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn gen_adv_loss_hand_values() {
        let half = Array4::from_elem((1, 2, 2, 2), 0.5);
        let (l, _) = gen_adv_loss(&half);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let q = Array4::from_elem((1, 2, 2, 2), 0.25);
        let (l, _) = gen_adv_loss(&q);
        assert!((l - 0.25f64.ln().abs()).abs() < 1e-12);
        let hi = Array4::from_elem((1, 2, 2, 2), 1.0 - 1e-9);
        let (l, _) = gen_adv_loss(&hi);
        assert!(l < 1e-6);
    }

    #[test]
    fn disc_gradient_matches_finite_differences() {
        let mut d = Discriminator::new(DiscriminatorConfig {
            base_width: 2,
            head_bits: 2,
            seed: 7,
        })
        .unwrap();
        let n = crate::nn::param_count(&mut d);
        assert!(n <= 4200, "toy discriminator has {n} params");
        let x = Array4::from_shape_fn((1, 6, 32, 32), |(_, c, r, cc)| {
            ((c * 5 + r * 2 + cc * 3) % 13) as f64 / 13.0
        });
        let targets = [
            ordinal_target(Rank::Shuffled),
            ordinal_target(Rank::Generated),
            ordinal_target(Rank::GroundTruth),
        ];
        let loss = |net: &mut dyn Layer| -> f64 {
            let y = net.forward(&x, true);
            let (l, _) = disc_loss([&y, &y, &y], targets).unwrap();
            l
        };
        zero_grads(&mut d);
        let y = d.forward(&x, true);
        let (_, grads) = disc_loss([&y, &y, &y], targets).unwrap();
        let total = grads.iter().fold(Array4::zeros(y.dim()), |acc, g| acc + g);
        d.backward(&total);
        let analytic = collect_grads(&mut d);
        let err = finite_diff_rel_err(&mut d, &analytic, loss, 1e-6);
        assert!(err < 1e-3, "disc grad check failed: {err}");
    }
}
