//! Three-channel artery/vein/vessel masks and the color PNG convention.
//!
//! The color coding follows the common AV-DRIVE annotation style:
//! red = artery, blue = vein, green = artery/vein crossing, white =
//! vessel of uncertain type, black = background. Crossings decode to
//! artery = vein = 1; uncertain pixels decode to vessel = 1 with both
//! class channels 0, which is also how they are excluded from the
//! A/V metrics later on.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Probability,
}

/// Artery/vein/vessel map over a single image. Values live in [0, 1];
/// for `MaskKind::Binary` they are exactly 0 or 1.
#[derive(Debug, Clone)]
pub struct AvMask {
    pub artery: Array2<f64>,
    pub vein: Array2<f64>,
    pub vessel: Array2<f64>,
    pub kind: MaskKind,
}

impl AvMask {
    pub fn zeros(h: usize, w: usize, kind: MaskKind) -> Self {
        Self {
            artery: Array2::zeros((h, w)),
            vein: Array2::zeros((h, w)),
            vessel: Array2::zeros((h, w)),
            kind,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.artery.dim();
        (s.0, s.1)
    }

    /// Checks the channel invariants: shapes agree, values in range,
    /// binary masks are 0/1 and artery∨vein implies vessel.
    pub fn validate(&self) -> Result<()> {
        if self.artery.dim() != self.vein.dim() || self.artery.dim() != self.vessel.dim() {
            return Err(Error::Shape(format!(
                "mask channels disagree: artery {:?}, vein {:?}, vessel {:?}",
                self.artery.dim(),
                self.vein.dim(),
                self.vessel.dim()
            )));
        }
        for ch in [&self.artery, &self.vein, &self.vessel] {
            for &v in ch.iter() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Parameter(format!("mask value {v} outside [0,1]")));
                }
                if self.kind == MaskKind::Binary && v != 0.0 && v != 1.0 {
                    return Err(Error::Parameter(format!("non-binary value {v} in binary mask")));
                }
            }
        }
        if self.kind == MaskKind::Binary {
            for ((a, v), s) in self
                .artery
                .iter()
                .zip(self.vein.iter())
                .zip(self.vessel.iter())
            {
                if (*a == 1.0 || *v == 1.0) && *s != 1.0 {
                    return Err(Error::Parameter(
                        "artery/vein pixel without vessel label".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn vessel_pixel_count(&self) -> usize {
        self.vessel.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> AvMask {
        let sl = ndarray::s![row..row + h, col..col + w];
        AvMask {
            artery: self.artery.slice(sl).to_owned(),
            vein: self.vein.slice(sl).to_owned(),
            vessel: self.vessel.slice(sl).to_owned(),
            kind: self.kind,
        }
    }

    /// Stacks the channels as (artery, vein, vessel) into a (3, H, W) array.
    pub fn to_channels(&self) -> Array3<f64> {
        let (h, w) = self.shape();
        let mut out = Array3::zeros((3, h, w));
        out.index_axis_mut(Axis(0), 0).assign(&self.artery);
        out.index_axis_mut(Axis(0), 1).assign(&self.vein);
        out.index_axis_mut(Axis(0), 2).assign(&self.vessel);
        out
    }

    pub fn from_channels(ch: &Array3<f64>, kind: MaskKind) -> Result<Self> {
        if ch.dim().0 != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", ch.dim().0)));
        }
        Ok(AvMask {
            artery: ch.index_axis(Axis(0), 0).to_owned(),
            vein: ch.index_axis(Axis(0), 1).to_owned(),
            vessel: ch.index_axis(Axis(0), 2).to_owned(),
            kind,
        })
    }

    /// Encodes a binary mask to RGB bytes with the red/blue/green/white
    /// color convention.
    pub fn to_color_rgb(&self) -> Result<Vec<u8>> {
        if self.kind != MaskKind::Binary {
            return Err(Error::Parameter("color encoding needs a binary mask".into()));
        }
        let (h, w) = self.shape();
        let mut buf = vec![0u8; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                let a = self.artery[[r, c]] == 1.0;
                let v = self.vein[[r, c]] == 1.0;
                let s = self.vessel[[r, c]] == 1.0;
                let px = match (a, v, s) {
                    (true, true, _) => [0, 255, 0],
                    (true, false, _) => [255, 0, 0],
                    (false, true, _) => [0, 0, 255],
                    (false, false, true) => [255, 255, 255],
                    _ => [0, 0, 0],
                };
                buf[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&px);
            }
        }
        Ok(buf)
    }

    /// Decodes RGB bytes back into a binary mask. Any channel value
    /// ≥ 128 counts as "on", tolerating anti-aliased annotations.
    pub fn from_color_rgb(buf: &[u8], h: usize, w: usize) -> Result<Self> {
        if buf.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer length {} does not match {h}x{w}",
                buf.len()
            )));
        }
        let mut m = AvMask::zeros(h, w, MaskKind::Binary);
        for r in 0..h {
            for c in 0..w {
                let i = (r * w + c) * 3;
                let red = buf[i] >= 128;
                let green = buf[i + 1] >= 128;
                let blue = buf[i + 2] >= 128;
                let white = red && green && blue;
                let (a, v, s) = if white {
                    (false, false, true)
                } else {
                    (red || green, blue || green, red || green || blue)
                };
                if a {
                    m.artery[[r, c]] = 1.0;
                }
                if v {
                    m.vein[[r, c]] = 1.0;
                }
                if s {
                    m.vessel[[r, c]] = 1.0;
                }
            }
        }
        Ok(m)
    }
}

/// RGB fundus image paired with its mask and field-of-view.
#[derive(Debug, Clone)]
pub struct FundusSample {
    pub id: String,
    /// (3, H, W), values in [0, 1].
    pub image: Array3<f64>,
    pub mask: AvMask,
    /// (H, W), 1 = inside the field of view.
    pub fov: Array2<u8>,
}

impl FundusSample {
    pub fn shape(&self) -> (usize, usize) {
        let d = self.image.dim();
        (d.1, d.2)
    }
}

/// Square training crop, image and mask pixel-aligned.
#[derive(Debug, Clone)]
pub struct SamplePatch {
    pub image: Array3<f64>,
    pub mask: AvMask,
    pub origin: (usize, usize),
}

/// Symmetric (edge-repeating) reflective index: maps any i in
/// [-len, 2*len) into [0, len).
pub fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let j = if i < 0 {
        -1 - i
    } else if i >= len {
        2 * len - 1 - i
    } else {
        i
    };
    debug_assert!((0..len).contains(&j));
    j as usize
}

/// Reflect-pads a (C, H, W) array to at least (C, th, tw), padding at
/// the bottom/right edges only.
pub fn reflect_pad_to(x: &Array3<f64>, th: usize, tw: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (nh, nw) = (h.max(th), w.max(tw));
    let mut out = Array3::zeros((c, nh, nw));
    for ch in 0..c {
        for r in 0..nh {
            let sr = reflect_index(r as isize, h);
            for cc in 0..nw {
                let sc = reflect_index(cc as isize, w);
                out[[ch, r, cc]] = x[[ch, sr, sc]];
            }
        }
    }
    out
}

pub fn reflect_pad2_to(x: &ArrayView2<f64>, th: usize, tw: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let (nh, nw) = (h.max(th), w.max(tw));
    let mut out = Array2::zeros((nh, nw));
    for r in 0..nh {
        let sr = reflect_index(r as isize, h);
        for c in 0..nw {
            let sc = reflect_index(c as isize, w);
            out[[r, c]] = x[[sr, sc]];
        }
    }
    out
}

pub fn pad_mask_to(m: &AvMask, th: usize, tw: usize) -> AvMask {
    AvMask {
        artery: reflect_pad2_to(&m.artery.view(), th, tw),
        vein: reflect_pad2_to(&m.vein.view(), th, tw),
        vessel: reflect_pad2_to(&m.vessel.view(), th, tw),
        kind: m.kind,
    }
}

/// Stacks mask channel tensors of several masks into a (N, 3, H, W) batch.
pub fn masks_to_batch(masks: &[&AvMask]) -> Array4<f64> {
    let (h, w) = masks[0].shape();
    let mut out = Array4::zeros((masks.len(), 3, h, w));
    for (n, m) in masks.iter().enumerate() {
        out.index_axis_mut(Axis(0), n).assign(&m.to_channels());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_binary_mask(seed: u64, h: usize, w: usize) -> AvMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = AvMask::zeros(h, w, MaskKind::Binary);
        for r in 0..h {
            for c in 0..w {
                match rng.random_range(0..6) {
                    0 => {
                        m.artery[[r, c]] = 1.0;
                        m.vessel[[r, c]] = 1.0;
                    }
                    1 => {
                        m.vein[[r, c]] = 1.0;
                        m.vessel[[r, c]] = 1.0;
                    }
                    2 => {
                        m.artery[[r, c]] = 1.0;
                        m.vein[[r, c]] = 1.0;
                        m.vessel[[r, c]] = 1.0;
                    }
                    3 => {
                        m.vessel[[r, c]] = 1.0;
                    }
                    _ => {}
                }
            }
        }
        m
    }

    #[test]
    fn color_round_trip_is_exact() {
        for seed in 0..5 {
            let m = random_binary_mask(seed, 17, 23);
            let rgb = m.to_color_rgb().unwrap();
            let back = AvMask::from_color_rgb(&rgb, 17, 23).unwrap();
            assert_eq!(m.artery, back.artery);
            assert_eq!(m.vein, back.vein);
            assert_eq!(m.vessel, back.vessel);
        }
    }

    #[test]
    fn validate_rejects_vessel_violation() {
        let mut m = AvMask::zeros(4, 4, MaskKind::Binary);
        m.artery[[1, 1]] = 1.0; // no vessel
        assert!(m.validate().is_err());
        m.vessel[[1, 1]] = 1.0;
        assert!(m.validate().is_ok());
    }

    #[test]
    fn reflect_pad_is_symmetric_at_edge() {
        let x = Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64);
        let p = reflect_pad2_to(&x.view(), 5, 4);
        assert_eq!(p[[3, 0]], x[[2, 0]]);
        assert_eq!(p[[4, 0]], x[[1, 0]]);
        assert_eq!(p[[0, 2]], x[[0, 1]]);
        assert_eq!(p[[0, 3]], x[[0, 0]]);
    }

    #[test]
    fn crop_is_pixel_aligned() {
        let m = random_binary_mask(9, 20, 20);
        let c = m.crop(3, 5, 8, 8);
        for r in 0..8 {
            for cc in 0..8 {
                assert_eq!(c.artery[[r, cc]], m.artery[[3 + r, 5 + cc]]);
                assert_eq!(c.vessel[[r, cc]], m.vessel[[3 + r, 5 + cc]]);
            }
        }
    }
}
