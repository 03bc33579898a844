//! Data ingestion and synthesis: AV-DRIVE-layout loading, seeded
//! synthetic vessel trees, and random patch extraction.
//!
//! Directory layout: `<root>/<split>/images/*.png|tif` paired with
//! `<root>/<split>/av/*.png` by shared numeric filename prefix. The av
//! PNG uses the color convention from [`crate::mask`].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{pad_mask_to, reflect_pad_to, AvMask, FundusSample, MaskKind, SamplePatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn numeric_prefix(stem: &str) -> Option<String> {
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        None
    } else {
        Some(digits)
    }
}

/// Loads one split of an AV-DRIVE-layout dataset.
pub fn load_avdrive(root: &Path, split: Split) -> Result<Vec<FundusSample>> {
    let img_dir = root.join(split.dir_name()).join("images");
    let av_dir = root.join(split.dir_name()).join("av");

    let mut av_by_prefix = std::collections::BTreeMap::new();
    let av_entries = fs::read_dir(&av_dir).map_err(|e| io_err(&av_dir, e))?;
    for entry in av_entries {
        let p = entry.map_err(|e| io_err(&av_dir, e))?.path();
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(prefix) = numeric_prefix(stem) {
            av_by_prefix.insert(prefix, p);
        }
    }

    let mut img_paths: Vec<PathBuf> = Vec::new();
    let entries = fs::read_dir(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    for entry in entries {
        let p = entry.map_err(|e| io_err(&img_dir, e))?.path();
        match p.extension().and_then(|e| e.to_str()) {
            Some("png") | Some("tif") | Some("tiff") => img_paths.push(p),
            _ => {}
        }
    }
    img_paths.sort();
    if img_paths.is_empty() {
        return Err(Error::Load(format!("no images found under {}", img_dir.display())));
    }

    let mut samples = Vec::new();
    for img_path in img_paths {
        let stem = img_path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let prefix = numeric_prefix(stem)
            .ok_or_else(|| Error::Load(format!("no numeric prefix in {}", img_path.display())))?;
        let av_path = av_by_prefix.get(&prefix).ok_or_else(|| {
            Error::Load(format!("no av mask pairs with image {}", img_path.display()))
        })?;

        let img = image::open(&img_path)
            .map_err(|e| Error::Load(format!("cannot decode {}: {e}", img_path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut image_arr = Array3::zeros((3, h, w));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                image_arr[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }

        let av = image::open(av_path)
            .map_err(|e| Error::Load(format!("cannot decode {}: {e}", av_path.display())))?
            .to_rgb8();
        if (av.width() as usize, av.height() as usize) != (w, h) {
            return Err(Error::Load(format!(
                "size mismatch: {} is {}x{} but {} is {}x{}",
                img_path.display(),
                w,
                h,
                av_path.display(),
                av.width(),
                av.height()
            )));
        }
        let mask = AvMask::from_color_rgb(av.as_raw(), h, w)?;

        samples.push(FundusSample {
            id: prefix,
            image: image_arr,
            mask,
            fov: Array2::ones((h, w)),
        });
    }
    Ok(samples)
}

/// Writes samples back out in the AV-DRIVE layout (PNG for both image
/// and mask). Masks must be binary.
pub fn export_avdrive(samples: &[FundusSample], root: &Path, split: Split) -> Result<()> {
    let img_dir = root.join(split.dir_name()).join("images");
    let av_dir = root.join(split.dir_name()).join("av");
    fs::create_dir_all(&img_dir).map_err(|e| io_err(&img_dir, e))?;
    fs::create_dir_all(&av_dir).map_err(|e| io_err(&av_dir, e))?;
    for s in samples {
        let (h, w) = s.shape();
        let mut buf = vec![0u8; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    buf[(r * w + c) * 3 + ch] =
                        (s.image[[ch, r, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let img_path = img_dir.join(format!("{}.png", s.id));
        image::save_buffer(
            &img_path,
            &buf,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", img_path.display())))?;

        let av_path = av_dir.join(format!("{}.png", s.id));
        image::save_buffer(
            &av_path,
            &s.mask.to_color_rgb()?,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", av_path.display())))?;
    }
    Ok(())
}

/// Decodes an RGB image file into a (3, H, W) array scaled to [0, 1].
pub fn load_rgb_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut arr = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            arr[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(arr)
}

/// Decodes a color-coded artery/vein mask image.
pub fn load_color_mask(path: &Path) -> Result<AvMask> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    AvMask::from_color_rgb(img.as_raw(), img.height() as usize, img.width() as usize)
}

/// Writes a binary mask as a color-coded PNG.
pub fn save_color_mask(path: &Path, mask: &AvMask) -> Result<()> {
    let (h, w) = mask.shape();
    image::save_buffer(
        path,
        &mask.to_color_rgb()?,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Load(format!("cannot write {}: {e}", path.display())))
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller, one draw per call.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn stamp(mask: &mut Array2<f64>, h: usize, w: usize, r: f64, c: f64, width: u32) {
    let rad = width as f64 / 2.0;
    let r0 = (r - rad).floor() as isize;
    let r1 = (r + rad).ceil() as isize;
    let c0 = (c - rad).floor() as isize;
    let c1 = (c + rad).ceil() as isize;
    for rr in r0..=r1 {
        for cc in c0..=c1 {
            if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                continue;
            }
            let dr = rr as f64 + 0.5 - r;
            let dc = cc as f64 + 0.5 - c;
            if dr * dr + dc * dc <= rad * rad + 0.25 {
                mask[[rr as usize, cc as usize]] = 1.0;
            }
        }
    }
}

fn draw_tree(mask: &mut Array2<f64>, rng: &mut ChaCha8Rng, h: usize, w: usize) {
    // Trunk starts on a random border heading inward; branches fork off
    // with decreasing width.
    let trunk_len = h.max(w);
    let (mut r, mut c, mut angle) = match rng.random_range(0..4u32) {
        0 => (0.0, rng.random_range(0.0..w as f64), std::f64::consts::FRAC_PI_2),
        1 => (h as f64 - 1.0, rng.random_range(0.0..w as f64), -std::f64::consts::FRAC_PI_2),
        2 => (rng.random_range(0.0..h as f64), 0.0, 0.0),
        _ => (rng.random_range(0.0..h as f64), w as f64 - 1.0, std::f64::consts::PI),
    };
    angle += normal(rng, 0.3);

    let mut stack: Vec<(f64, f64, f64, u32, usize)> = vec![(r, c, angle, 3, trunk_len)];
    while let Some((sr, sc, sa, width, len)) = stack.pop() {
        r = sr;
        c = sc;
        angle = sa;
        for _ in 0..len {
            stamp(mask, h, w, r, c, width);
            r += angle.sin();
            c += angle.cos();
            angle += normal(rng, 0.18);
            // Bounce off the frame so trunks keep their full length.
            if r < 0.0 || r > h as f64 - 1.0 {
                r = r.clamp(0.0, h as f64 - 1.0);
                angle = -angle;
            }
            if c < 0.0 || c > w as f64 - 1.0 {
                c = c.clamp(0.0, w as f64 - 1.0);
                angle = std::f64::consts::PI - angle;
            }
            if width > 1 && rng.random_range(0.0..1.0) < 0.02 {
                let side = if rng.random_range(0..2u32) == 0 { 1.0 } else { -1.0 };
                stack.push((r, c, angle + side * rng.random_range(0.5..1.0), width - 1, len / 3));
            }
        }
    }
}

fn blur3(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = [0.25, 0.5, 0.25];
    let mut tmp = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let cc = (c as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
                acc += kv * x[[r, cc]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let rr = (r as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Generates a deterministic synthetic fundus-like sample: one branching
/// random-walk tree per vessel class, rendered with class-specific color
/// cues, blurred and lightly noised.
pub fn synth_sample(seed: u64, size: (usize, usize)) -> Result<FundusSample> {
    let (h, w) = size;
    if h < 64 || w < 64 {
        return Err(Error::Parameter(format!("synthetic size {h}x{w} below 64x64 minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut artery = Array2::zeros((h, w));
    let mut vein = Array2::zeros((h, w));
    draw_tree(&mut artery, &mut rng, h, w);
    draw_tree(&mut vein, &mut rng, h, w);
    // Top up sparse draws so the vessel fraction stays in its band.
    let frame = (h * w) as f64;
    let union = |a: &Array2<f64>, v: &Array2<f64>| {
        a.iter()
            .zip(v.iter())
            .filter(|(x, y)| **x == 1.0 || **y == 1.0)
            .count() as f64
    };
    let mut extra = 0;
    while union(&artery, &vein) / frame < 0.03 && extra < 6 {
        if extra % 2 == 0 {
            draw_tree(&mut artery, &mut rng, h, w);
        } else {
            draw_tree(&mut vein, &mut rng, h, w);
        }
        extra += 1;
    }
    let mut vessel = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if artery[[r, c]] == 1.0 || vein[[r, c]] == 1.0 {
                vessel[[r, c]] = 1.0;
            }
        }
    }
    let mask = AvMask {
        artery,
        vein,
        vessel,
        kind: MaskKind::Binary,
    };

    let artery_color = [0.80, 0.30, 0.22];
    let vein_color = [0.22, 0.30, 0.80];
    let bg = 0.15;
    let mut image = Array3::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let a = mask.artery[[r, c]];
            let v = mask.vein[[r, c]];
            for ch in 0..3 {
                let fg = if a == 1.0 && v == 1.0 {
                    0.5 * (artery_color[ch] + vein_color[ch])
                } else if a == 1.0 {
                    artery_color[ch]
                } else if v == 1.0 {
                    vein_color[ch]
                } else {
                    bg
                };
                image[[ch, r, c]] = fg;
            }
        }
    }
    for ch in 0..3 {
        let blurred = blur3(&image.index_axis(ndarray::Axis(0), ch).to_owned());
        image.index_axis_mut(ndarray::Axis(0), ch).assign(&blurred);
    }
    for v in image.iter_mut() {
        *v = (*v + normal(&mut rng, 0.02)).clamp(0.0, 1.0);
    }

    Ok(FundusSample {
        id: format!("{seed:04}"),
        image,
        mask,
        fov: Array2::ones((h, w)),
    })
}

/// Extracts a uniformly random `patch`-sized crop, reflect-padding first
/// when the frame is smaller than the patch.
pub fn sample_patch(sample: &FundusSample, patch: usize, rng: &mut ChaCha8Rng) -> SamplePatch {
    let image = reflect_pad_to(&sample.image, patch, patch);
    let mask = pad_mask_to(&sample.mask, patch, patch);
    let (_, h, w) = image.dim();
    let row = rng.random_range(0..=h - patch);
    let col = rng.random_range(0..=w - patch);
    SamplePatch {
        image: image
            .slice(ndarray::s![.., row..row + patch, col..col + patch])
            .to_owned(),
        mask: mask.crop(row, col, patch, patch),
        origin: (row, col),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let a = synth_sample(0, (128, 128)).unwrap();
        let b = synth_sample(0, (128, 128)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask.artery, b.mask.artery);
        let c = synth_sample(1, (128, 128)).unwrap();
        assert_ne!(a.mask.vessel, c.mask.vessel);
    }

    #[test]
    fn synth_satisfies_mask_invariants() {
        for seed in 0..10 {
            let s = synth_sample(seed, (96, 96)).unwrap();
            s.mask.validate().unwrap();
        }
    }

    #[test]
    fn synth_vessel_fraction_band() {
        // Generator constants are tuned to land in [0.02, 0.20].
        for seed in 0..100 {
            let s = synth_sample(seed, (128, 128)).unwrap();
            let frac = s.mask.vessel_pixel_count() as f64 / (128.0 * 128.0);
            assert!(
                (0.02..=0.20).contains(&frac),
                "seed {seed}: vessel fraction {frac:.4} out of band"
            );
        }
    }

    #[test]
    fn synth_rejects_small_sizes() {
        assert!(synth_sample(0, (32, 128)).is_err());
    }

    #[test]
    fn patch_origin_range_and_determinism() {
        use rand::SeedableRng;
        let s = synth_sample(3, (300, 280)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = sample_patch(&s, 256, &mut rng);
            assert!(p.origin.0 <= 300 - 256);
            assert!(p.origin.1 <= 280 - 256);
            assert_eq!(p.image.dim(), (3, 256, 256));
        }
        let p1 = sample_patch(&s, 256, &mut ChaCha8Rng::seed_from_u64(5));
        let p2 = sample_patch(&s, 256, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p1.origin, p2.origin);
        assert_eq!(p1.image, p2.image);
    }

    #[test]
    fn patch_crops_are_aligned() {
        use rand::SeedableRng;
        let s = synth_sample(5, (300, 300)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_patch(&s, 128, &mut rng);
        let (r0, c0) = p.origin;
        for r in (0..128).step_by(17) {
            for c in (0..128).step_by(13) {
                assert_eq!(p.mask.vessel[[r, c]], s.mask.vessel[[r0 + r, c0 + c]]);
                assert_eq!(p.image[[0, r, c]], s.image[[0, r0 + r, c0 + c]]);
            }
        }
    }

    #[test]
    fn single_placement_patch() {
        let s = synth_sample(8, (128, 128)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_patch(&s, 128, &mut rng);
        assert_eq!(p.origin, (0, 0));
    }

    #[test]
    fn export_load_round_trip() {
        let dir = TempDir::new().unwrap();
        let samples: Vec<_> = (0..3)
            .map(|i| synth_sample(i, (96, 96)).unwrap())
            .collect();
        export_avdrive(&samples, dir.path(), Split::Train).unwrap();
        let loaded = load_avdrive(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.mask.artery, b.mask.artery);
            assert_eq!(a.mask.vein, b.mask.vein);
            assert_eq!(a.mask.vessel, b.mask.vessel);
            // image round-trips through u8 quantization
            let max_err = a
                .image
                .iter()
                .zip(b.image.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn load_errors_on_missing_dir() {
        let dir = TempDir::new().unwrap();
        assert!(load_avdrive(dir.path(), Split::Train).is_err());
    }
}
