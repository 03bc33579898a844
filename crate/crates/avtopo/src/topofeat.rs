//! Frozen multi-scale feature extractor and the topology-preserving
//! triplet loss.
//!
//! The extractor is a VGG-style stack of eight 3x3 conv+ReLU blocks with
//! taps after blocks 2, 4, 6 and 8. By default it is randomly initialized
//! from a fixed seed and frozen; random frozen conv features keep the
//! distance-ranking structure of the loss while staying hermetic. A
//! pretrained weight file in the shared checkpoint container can be
//! plugged in instead.

use std::path::PathBuf;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::layers::LeakyRelu;
use crate::nn::{Batch, Layer, Slot};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub num_levels: usize,
    pub extractor_seed: u64,
    pub extractor_width: usize,
    pub pretrained: Option<PathBuf>,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            num_levels: 4,
            extractor_seed: 0,
            extractor_width: 8,
            pretrained: None,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Parameter("triplet margin must be positive".into()));
        }
        if self.num_levels == 0 {
            return Err(Error::Parameter("need at least one feature level".into()));
        }
        Ok(())
    }
}

/// Ordered multi-scale activations; level i has shape (N, C_i, H_i, W_i).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Batch>,
}

struct Block {
    conv: Conv2d,
    act: LeakyRelu,
}

/// Eight conv blocks, stride 2 entering blocks 3, 5 and 7; channel
/// doubling at each downsampling. Parameters are exposed as buffers so
/// no optimizer can ever update them.
pub struct FeatureExtractor {
    blocks: Vec<Block>,
    /// 0-based block indices after which a pyramid level is tapped.
    taps: Vec<usize>,
}

impl FeatureExtractor {
    pub fn new(cfg: &TripletConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.extractor_seed);
        let w = cfg.extractor_width;
        // (in, out, stride) per block
        let plan = [
            (3, w, 1),
            (w, w, 1),
            (w, 2 * w, 2),
            (2 * w, 2 * w, 1),
            (2 * w, 4 * w, 2),
            (4 * w, 4 * w, 1),
            (4 * w, 8 * w, 2),
            (8 * w, 8 * w, 1),
        ];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(ic, oc, s))| Block {
                conv: Conv2d::new(&format!("b{}", i + 1), ic, oc, 3, s, 1, &mut rng),
                act: LeakyRelu::relu(),
            })
            .collect();
        let mut fe = Self {
            blocks,
            taps: vec![1, 3, 5, 7],
        };
        if let Some(path) = cfg.pretrained.clone() {
            crate::checkpoint::load_weights_into(&path, &mut TrainableView(&mut fe), "topo.")?;
        }
        Ok(fe)
    }

    /// Post-ReLU activations after blocks 2, 4, 6 and 8. Also leaves the
    /// layer caches primed for `backward_taps` on this same input.
    pub fn extract_features(&mut self, x: &Batch) -> FeaturePyramid {
        assert_eq!(x.dim().1, 3, "extractor expects a 3-channel mask image");
        let mut levels = Vec::with_capacity(self.taps.len());
        let mut h = x.clone();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            h = b.conv.forward(&h, false);
            h = b.act.forward(&h, false);
            if self.taps.contains(&i) {
                levels.push(h.clone());
            }
        }
        FeaturePyramid { levels }
    }

    /// Backpropagates gradients injected at the tap points down to the
    /// extractor input. Must follow an `extract_features` call on the
    /// input the gradients refer to.
    pub fn backward_taps(&mut self, tap_grads: &[Batch]) -> Batch {
        assert_eq!(tap_grads.len(), self.taps.len());
        let mut g: Option<Batch> = None;
        let mut tap_iter = self.taps.len();
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if self.taps.contains(&i) {
                tap_iter -= 1;
                g = Some(match g {
                    Some(acc) => acc + &tap_grads[tap_iter],
                    None => tap_grads[tap_iter].clone(),
                });
            }
            let gv = g.expect("deepest tap must be the last block");
            let gv = b.act.backward(&gv);
            g = Some(b.conv.backward(&gv));
        }
        g.expect("extractor has blocks")
    }

    /// Expected pyramid shapes for an (h, w) input.
    pub fn level_shapes(&self, width: usize, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        vec![
            (width, h, w),
            (2 * width, h / 2, w / 2),
            (4 * width, h / 4, w / 4),
            (8 * width, h / 8, w / 8),
        ]
    }

    fn visit_raw(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        for b in &mut self.blocks {
            b.conv.visit(prefix, f);
        }
    }
}

impl Layer for FeatureExtractor {
    fn forward(&mut self, x: &Batch, _train: bool) -> Batch {
        // Forward to the deepest block; used only where a plain Layer is
        // required. Pyramid extraction goes through `extract_features`.
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.conv.forward(&h, false);
            h = b.act.forward(&h, false);
        }
        h
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let mut g = grad_out.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.act.backward(&g);
            g = b.conv.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        // Frozen: parameters surface as buffers.
        self.visit_raw(prefix, &mut |name, slot| {
            if let Slot::Param { value, .. } = slot {
                f(name, Slot::Buffer { value });
            }
        });
    }
}

/// Adapter that exposes the frozen weights as trainable slots, used only
/// when loading a pretrained weight file into them.
struct TrainableView<'a>(&'a mut FeatureExtractor);

impl Layer for TrainableView<'_> {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        self.0.forward(x, train)
    }
    fn backward(&mut self, g: &Batch) -> Batch {
        self.0.backward(g)
    }
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        self.0.visit_raw(prefix, f);
    }
}

/// Mean squared distance of Eq-style normalization: ||a - b||^2 / (C*H*W),
/// computed per sample and averaged over the batch.
pub fn level_distance(a: &Batch, b: &Batch) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature level shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (n, c, h, w) = a.dim();
    let norm = (c * h * w) as f64;
    let mut total = 0.0;
    for ni in 0..n {
        let av = a.index_axis(Axis(0), ni);
        let bv = b.index_axis(Axis(0), ni);
        let d: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        total += d / norm;
    }
    Ok(total / n as f64)
}

fn per_sample_distance(a: &Batch, b: &Batch, ni: usize) -> f64 {
    let (_, c, h, w) = a.dim();
    let av = a.index_axis(Axis(0), ni);
    let bv = b.index_axis(Axis(0), ni);
    let d: f64 = av.iter().zip(bv.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    d / (c * h * w) as f64
}

/// Hinge triplet over pyramids: (1/N) sum_i max(d1_i - d2_i + margin, 0),
/// per sample, averaged over the batch. The subgradient at the hinge
/// kink is taken as 0.
pub fn triplet_from_pyramids(
    anchor: &FeaturePyramid,
    positive: &FeaturePyramid,
    negative: &FeaturePyramid,
    margin: f64,
) -> Result<f64> {
    let n_levels = anchor.levels.len();
    let batch = anchor.levels[0].dim().0;
    let mut total = 0.0;
    for ni in 0..batch {
        for i in 0..n_levels {
            let d1 = per_sample_distance(&anchor.levels[i], &positive.levels[i], ni);
            let d2 = per_sample_distance(&anchor.levels[i], &negative.levels[i], ni);
            total += (d1 - d2 + margin).max(0.0) / n_levels as f64;
        }
    }
    Ok(total / batch as f64)
}

/// Full triplet loss through the extractor: anchor = ground truth,
/// positive = generated, negative = shuffled. Returns the loss and its
/// gradient with respect to the positive input; the anchor and negative
/// branches carry no gradient.
pub fn triplet_loss(
    extractor: &mut FeatureExtractor,
    anchor: &Batch,
    positive: &Batch,
    negative: &Batch,
    cfg: &TripletConfig,
) -> Result<(f64, Batch)> {
    cfg.validate()?;
    if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
        return Err(Error::Shape("triplet inputs differ in shape".into()));
    }
    let f_anchor = extractor.extract_features(anchor);
    let f_negative = extractor.extract_features(negative);
    // Positive last: layer caches must hold the positive pass for backward.
    let f_positive = extractor.extract_features(positive);

    let batch = anchor.dim().0;
    let n_levels = f_anchor.levels.len() as f64;
    let mut loss = 0.0;
    let mut tap_grads: Vec<Batch> = f_positive
        .levels
        .iter()
        .map(|l| Batch::zeros(l.dim()))
        .collect();
    for ni in 0..batch {
        for i in 0..f_anchor.levels.len() {
            let d1 = per_sample_distance(&f_anchor.levels[i], &f_positive.levels[i], ni);
            let d2 = per_sample_distance(&f_anchor.levels[i], &f_negative.levels[i], ni);
            let h = d1 - d2 + cfg.margin;
            if h > 0.0 {
                loss += h / n_levels;
                let (_, c, hh, ww) = f_positive.levels[i].dim();
                let scale = 2.0 / (c * hh * ww) as f64 / n_levels / batch as f64;
                let fa = f_anchor.levels[i].index_axis(Axis(0), ni);
                let fp = f_positive.levels[i].index_axis(Axis(0), ni);
                let mut gt = tap_grads[i].index_axis_mut(Axis(0), ni);
                for ((g, &p), &a) in gt.iter_mut().zip(fp.iter()).zip(fa.iter()) {
                    *g = scale * (p - a);
                }
            }
        }
    }
    let grad = extractor.backward_taps(&tap_grads);
    Ok((loss / batch as f64, grad))
}
