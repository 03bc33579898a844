//! Full-image inference: overlapping patch grid, per-pixel averaging of
//! patch predictions, and the probability-to-label decision rule.

use ndarray::{s, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::mask::{reflect_pad_to, AvMask, MaskKind};
use crate::nn::Layer;

/// Patch origins along one dimension: the regular stride lattice plus a
/// final flush-right origin when the lattice does not cover the end.
pub fn make_grid(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch <= len {
        origins.push(o);
        o += stride;
    }
    if origins.last().copied() != Some(len - patch) {
        origins.push(len - patch);
    }
    origins
}

/// Averages overlapping patch predictions into one probability mask.
/// `patches` pairs each (row, col) origin with a (3, patch, patch)
/// prediction; every pixel of the (h, w) canvas must be covered.
pub fn stitch(
    patches: &[((usize, usize), Array3<f64>)],
    h: usize,
    w: usize,
) -> Result<AvMask> {
    let mut sum = Array3::<f64>::zeros((3, h, w));
    let mut count = Array2::<f64>::zeros((h, w));
    for ((r, c), p) in patches {
        let (pc, ph, pw) = p.dim();
        if pc != 3 {
            return Err(Error::Shape(format!("patch has {pc} channels, expected 3")));
        }
        if r + ph > h || c + pw > w {
            return Err(Error::Shape(format!(
                "patch at ({r}, {c}) of {ph}x{pw} exceeds the {h}x{w} canvas"
            )));
        }
        sum.slice_mut(s![.., *r..*r + ph, *c..*c + pw])
            .zip_mut_with(p, |a, &b| *a += b);
        count
            .slice_mut(s![*r..*r + ph, *c..*c + pw])
            .mapv_inplace(|v| v + 1.0);
    }
    if count.iter().any(|&v| v == 0.0) {
        return Err(Error::Shape("patch grid leaves pixels uncovered".into()));
    }
    for ch in 0..3 {
        let mut plane = sum.index_axis_mut(Axis(0), ch);
        plane.zip_mut_with(&count, |a, &n| *a /= n);
    }
    let mut mask = AvMask::zeros(h, w, MaskKind::Probability);
    mask.artery.assign(&sum.index_axis(Axis(0), 0));
    mask.vein.assign(&sum.index_axis(Axis(0), 1));
    mask.vessel.assign(&sum.index_axis(Axis(0), 2));
    Ok(mask)
}

/// Probability map to hard labels: the vessel channel gates at 0.5, and
/// gated pixels become artery when its probability is at least the vein
/// probability, vein otherwise.
pub fn binarize(prob: &AvMask) -> AvMask {
    let (h, w) = prob.shape();
    let mut out = AvMask::zeros(h, w, MaskKind::Binary);
    for r in 0..h {
        for c in 0..w {
            if prob.vessel[[r, c]] >= 0.5 {
                out.vessel[[r, c]] = 1.0;
                if prob.artery[[r, c]] >= prob.vein[[r, c]] {
                    out.artery[[r, c]] = 1.0;
                } else {
                    out.vein[[r, c]] = 1.0;
                }
            }
        }
    }
    out
}

/// Runs the generator over a full image with an overlapping patch grid
/// and returns the stitched probability mask at the original size.
/// Images smaller than the patch in either dimension are reflect-padded
/// for the forward pass and cropped afterwards.
pub fn predict_image(
    gen: &mut Generator,
    image: &Array3<f64>,
    patch: usize,
    stride: usize,
) -> Result<AvMask> {
    let (ch, h, w) = image.dim();
    if ch != 3 {
        return Err(Error::Shape(format!("image has {ch} channels, expected 3")));
    }
    if stride == 0 {
        return Err(Error::Parameter("stride must be positive".into()));
    }
    let ph = h.max(patch);
    let pw = w.max(patch);
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        reflect_pad_to(image, ph, pw)
    };

    let mut patches = Vec::new();
    for &r in &make_grid(ph, patch, stride) {
        for &c in &make_grid(pw, patch, stride) {
            let crop = padded.slice(s![.., r..r + patch, c..c + patch]);
            let mut x = Array4::zeros((1, 3, patch, patch));
            x.index_axis_mut(Axis(0), 0).assign(&crop);
            gen.check_input(&x)?;
            let y = gen.forward(&x, false);
            patches.push(((r, c), y.index_axis(Axis(0), 0).to_owned()));
        }
    }
    let full = stitch(&patches, ph, pw)?;
    if (ph, pw) == (h, w) {
        Ok(full)
    } else {
        Ok(full.crop(0, 0, h, w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_hand_values() {
        assert_eq!(make_grid(256, 256, 50), vec![0]);
        assert_eq!(make_grid(100, 256, 50), vec![0]);
        let g = make_grid(584, 256, 50);
        let mut expect: Vec<usize> = (0..=300).step_by(50).collect();
        expect.push(328);
        assert_eq!(g, expect);
        assert_eq!(make_grid(306, 256, 50), vec![0, 50]);
        // exact lattice fit adds no extra origin
        assert_eq!(make_grid(356, 256, 50), vec![0, 50, 100]);
    }

    #[test]
    fn grid_covers_every_pixel() {
        for len in [256, 257, 300, 306, 511, 584, 565] {
            let g = make_grid(len, 256, 50);
            let mut covered = vec![false; len];
            for &o in &g {
                for i in o..o + 256 {
                    covered[i] = true;
                }
            }
            assert!(covered.iter().all(|&b| b), "len {len} uncovered");
        }
    }

    #[test]
    fn stitch_averages_overlaps() {
        let a = Array3::from_elem((3, 4, 4), 0.2);
        let b = Array3::from_elem((3, 4, 4), 0.8);
        // 4x6 canvas, overlap in columns 2..4
        let m = stitch(&[((0, 0), a), ((0, 2), b)], 4, 6).unwrap();
        assert!((m.vessel[[0, 0]] - 0.2).abs() < 1e-12);
        assert!((m.vessel[[0, 3]] - 0.5).abs() < 1e-12);
        assert!((m.vessel[[0, 5]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn stitch_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut patches = Vec::new();
        for &r in &[0usize, 2, 4] {
            for &c in &[0usize, 3] {
                let p = Array3::from_shape_simple_fn((3, 4, 4), || rng.random_range(0.0..1.0));
                patches.push(((r, c), p));
            }
        }
        let fwd = stitch(&patches, 8, 7).unwrap();
        patches.reverse();
        let rev = stitch(&patches, 8, 7).unwrap();
        assert_eq!(fwd.artery, rev.artery);
        assert_eq!(fwd.vein, rev.vein);
        assert_eq!(fwd.vessel, rev.vessel);
    }

    #[test]
    fn stitch_rejects_gaps() {
        let a = Array3::from_elem((3, 4, 4), 0.5);
        assert!(stitch(&[((0, 0), a)], 4, 9).is_err());
    }

    #[test]
    fn binarize_decision_rule() {
        let mut prob = AvMask::zeros(1, 4, MaskKind::Probability);
        // below the vessel gate
        prob.vessel[[0, 0]] = 0.49;
        prob.artery[[0, 0]] = 0.9;
        // artery wins
        prob.vessel[[0, 1]] = 0.9;
        prob.artery[[0, 1]] = 0.6;
        prob.vein[[0, 1]] = 0.4;
        // vein wins
        prob.vessel[[0, 2]] = 0.9;
        prob.artery[[0, 2]] = 0.3;
        prob.vein[[0, 2]] = 0.7;
        // exact tie goes to artery
        prob.vessel[[0, 3]] = 0.5;
        prob.artery[[0, 3]] = 0.5;
        prob.vein[[0, 3]] = 0.5;
        let hard = binarize(&prob);
        assert_eq!(hard.vessel[[0, 0]], 0.0);
        assert_eq!(hard.artery[[0, 1]], 1.0);
        assert_eq!(hard.vein[[0, 1]], 0.0);
        assert_eq!(hard.vein[[0, 2]], 1.0);
        assert_eq!(hard.artery[[0, 3]], 1.0);
        hard.validate().unwrap();
    }

    #[test]
    fn stitching_exact_patches_reproduces_the_source() {
        // Patches cut straight from a ground-truth map must stitch back
        // to it: averaging identical overlapping values is the identity.
        let sample = crate::dataset::synth_sample(7, (584, 565)).unwrap();
        let ch = sample.mask.to_channels();
        let mut patches = Vec::new();
        for &r in &make_grid(584, 256, 50) {
            for &c in &make_grid(565, 256, 50) {
                patches.push(((r, c), ch.slice(s![.., r..r + 256, c..c + 256]).to_owned()));
            }
        }
        let m = stitch(&patches, 584, 565).unwrap();
        for (a, b) in m.vessel.iter().zip(sample.mask.vessel.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in m.artery.iter().zip(sample.mask.artery.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_is_deterministic_and_sized() {
        let mut gen = Generator::new(GeneratorConfig {
            encoder_stages: 2,
            base_width: 4,
            seed: 3,
            pretrained: None,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_shape_simple_fn((3, 70, 90), || rng.random_range(0.0..1.0));
        let a = predict_image(&mut gen, &img, 64, 30).unwrap();
        let b = predict_image(&mut gen, &img, 64, 30).unwrap();
        assert_eq!(a.shape(), (70, 90));
        assert_eq!(a.vessel, b.vessel);
        assert!(a.vessel.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn predict_pads_small_images() {
        let mut gen = Generator::new(GeneratorConfig {
            encoder_stages: 2,
            base_width: 4,
            seed: 3,
            pretrained: None,
        })
        .unwrap();
        let img = Array3::from_elem((3, 40, 52), 0.4);
        let m = predict_image(&mut gen, &img, 64, 30).unwrap();
        assert_eq!(m.shape(), (40, 52));
    }
}
