//! Topology perturbation: manufactures the low-connectivity mask used as
//! the lowest ordinal rank and as the triplet negative.
//!
//! Operations are applied inside square windows until the fraction of
//! ground-truth vessel pixels whose (artery, vein, vessel) triple changed
//! lands inside the configured budget band. An op that overshoots the
//! band is reverted and retried with a half-sized window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{AvMask, MaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub budget_low: f64,
    pub budget_high: f64,
    /// Window side range in pixels at the 256px reference scale; actual
    /// sides are scaled by min(H, W)/256.
    pub window_side_range: (usize, usize),
    pub shift_range: i64,
    pub max_ops: usize,
    pub seed: u64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self {
            budget_low: 0.05,
            budget_high: 0.25,
            window_side_range: (32, 96),
            shift_range: 24,
            max_ops: 100,
            seed: 0,
        }
    }
}

impl ShuffleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.budget_low && self.budget_low < self.budget_high && self.budget_high < 1.0)
        {
            return Err(Error::Parameter(format!(
                "budget band [{}, {}] invalid",
                self.budget_low, self.budget_high
            )));
        }
        if self.window_side_range.0 == 0 || self.window_side_range.0 > self.window_side_range.1 {
            return Err(Error::Parameter("window side range invalid".into()));
        }
        if self.max_ops == 0 {
            return Err(Error::Parameter("max_ops must be >= 1".into()));
        }
        Ok(())
    }
}

/// Square region: rows [row, row+side), cols [col, col+side), clipped to
/// the mask frame by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Remove,
    Shift,
    Swap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppliedOp {
    pub kind: OpKind,
    pub window: Window,
    /// (row, col) offset; only meaningful for `Shift`.
    pub offset: (i64, i64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub ops_applied: Vec<AppliedOp>,
    pub final_fraction: f64,
}

/// Zeroes all three channels inside the window.
pub fn op_remove(mask: &AvMask, window: Window) -> AvMask {
    let mut out = mask.clone();
    for r in window.row..window.row + window.height {
        for c in window.col..window.col + window.width {
            out.artery[[r, c]] = 0.0;
            out.vein[[r, c]] = 0.0;
            out.vessel[[r, c]] = 0.0;
        }
    }
    out
}

/// Translates the window content by `offset`, clearing the source region
/// and overwriting whatever lies at the (clipped) destination.
pub fn op_shift(mask: &AvMask, window: Window, offset: (i64, i64)) -> AvMask {
    let (h, w) = mask.shape();
    let content: Vec<(usize, usize, f64, f64, f64)> = (window.row..window.row + window.height)
        .flat_map(|r| (window.col..window.col + window.width).map(move |c| (r, c)))
        .map(|(r, c)| {
            (
                r,
                c,
                mask.artery[[r, c]],
                mask.vein[[r, c]],
                mask.vessel[[r, c]],
            )
        })
        .collect();
    let mut out = op_remove(mask, window);
    for (r, c, a, v, s) in content {
        let nr = r as i64 + offset.0;
        let nc = c as i64 + offset.1;
        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
            continue;
        }
        out.artery[[nr as usize, nc as usize]] = a;
        out.vein[[nr as usize, nc as usize]] = v;
        out.vessel[[nr as usize, nc as usize]] = s;
    }
    out
}

/// Exchanges the artery and vein channels inside the window; the vessel
/// channel is untouched.
pub fn op_swap(mask: &AvMask, window: Window) -> AvMask {
    let mut out = mask.clone();
    for r in window.row..window.row + window.height {
        for c in window.col..window.col + window.width {
            let a = out.artery[[r, c]];
            out.artery[[r, c]] = out.vein[[r, c]];
            out.vein[[r, c]] = a;
        }
    }
    out
}

pub fn apply_op(mask: &AvMask, op: &AppliedOp) -> AvMask {
    match op.kind {
        OpKind::Remove => op_remove(mask, op.window),
        OpKind::Shift => op_shift(mask, op.window, op.offset),
        OpKind::Swap => op_swap(mask, op.window),
    }
}

/// Replays a report's ops on the original mask; used as the audit oracle.
pub fn replay(original: &AvMask, report: &ShuffleReport) -> AvMask {
    let mut m = original.clone();
    for op in &report.ops_applied {
        m = apply_op(&m, op);
    }
    m
}

/// Fraction of the original vessel pixels whose (artery, vein, vessel)
/// triple differs in the perturbed mask.
pub fn shuffle_fraction(original: &AvMask, perturbed: &AvMask) -> Result<f64> {
    if original.shape() != perturbed.shape() {
        return Err(Error::Shape(format!(
            "fraction over masks of different shapes {:?} vs {:?}",
            original.shape(),
            perturbed.shape()
        )));
    }
    let (h, w) = original.shape();
    let mut vessel = 0usize;
    let mut changed = 0usize;
    for r in 0..h {
        for c in 0..w {
            if original.vessel[[r, c]] != 1.0 {
                continue;
            }
            vessel += 1;
            if original.artery[[r, c]] != perturbed.artery[[r, c]]
                || original.vein[[r, c]] != perturbed.vein[[r, c]]
                || original.vessel[[r, c]] != perturbed.vessel[[r, c]]
            {
                changed += 1;
            }
        }
    }
    if vessel == 0 {
        return Err(Error::SparseMask { got: 0, need: 1 });
    }
    Ok(changed as f64 / vessel as f64)
}

fn sample_window_with_vessel(
    mask: &AvMask,
    rng: &mut ChaCha8Rng,
    side_lo: usize,
    side_hi: usize,
) -> Option<(Window, usize)> {
    let (h, w) = mask.shape();
    for _ in 0..50 {
        let side = rng.random_range(side_lo..=side_hi);
        let wh = side.min(h);
        let ww = side.min(w);
        let row = rng.random_range(0..=h - wh);
        let col = rng.random_range(0..=w - ww);
        let win = Window {
            row,
            col,
            height: wh,
            width: ww,
        };
        let mut count = 0;
        for r in row..row + wh {
            for c in col..col + ww {
                if mask.vessel[[r, c]] == 1.0 {
                    count += 1;
                }
            }
        }
        if count > 0 {
            return Some((win, side));
        }
    }
    None
}

fn shrink(win: Window) -> Window {
    Window {
        row: win.row + win.height / 4,
        col: win.col + win.width / 4,
        height: (win.height / 2).max(2),
        width: (win.width / 2).max(2),
    }
}

/// Degrades a binary mask until the changed-pixel fraction lands inside
/// the budget band. Deterministic in `cfg.seed`.
pub fn shuffle_mask(mask: &AvMask, cfg: &ShuffleConfig) -> Result<(AvMask, ShuffleReport)> {
    cfg.validate()?;
    if mask.kind != MaskKind::Binary {
        return Err(Error::Parameter("shuffle requires a binary mask".into()));
    }
    let vessel_px = mask.vessel_pixel_count();
    if vessel_px < 50 {
        return Err(Error::SparseMask {
            got: vessel_px,
            need: 50,
        });
    }

    let (h, w) = mask.shape();
    let scale = (h.min(w) as f64 / 256.0).max(1.0 / 16.0);
    let side_lo = ((cfg.window_side_range.0 as f64 * scale).round() as usize).max(4);
    let side_hi = ((cfg.window_side_range.1 as f64 * scale).round() as usize).max(side_lo);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = mask.clone();
    let mut ops = Vec::new();
    let mut fraction = 0.0;

    for _ in 0..cfg.max_ops {
        let kind = match rng.random_range(0..3u32) {
            0 => OpKind::Remove,
            1 => OpKind::Shift,
            _ => OpKind::Swap,
        };
        let Some((mut window, _)) = sample_window_with_vessel(&current, &mut rng, side_lo, side_hi)
        else {
            continue;
        };
        let offset = (
            rng.random_range(-cfg.shift_range..=cfg.shift_range),
            rng.random_range(-cfg.shift_range..=cfg.shift_range),
        );

        // Overshoot is reverted and retried on a half-sized window.
        loop {
            let op = AppliedOp {
                kind,
                window,
                offset,
            };
            let candidate = apply_op(&current, &op);
            let f = shuffle_fraction(mask, &candidate)?;
            if f <= cfg.budget_high {
                current = candidate;
                fraction = f;
                ops.push(op);
                break;
            }
            if window.height <= 2 || window.width <= 2 {
                break;
            }
            window = shrink(window);
        }

        if fraction >= cfg.budget_low {
            let report = ShuffleReport {
                ops_applied: ops,
                final_fraction: fraction,
            };
            return Ok((current, report));
        }
    }

    Err(Error::ShuffleBudget {
        max_ops: cfg.max_ops,
        fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_sample;

    fn toy_mask() -> AvMask {
        // 8x8 with an artery run on row 2 and a vein run on row 5.
        let mut m = AvMask::zeros(8, 8, MaskKind::Binary);
        for c in 1..7 {
            m.artery[[2, c]] = 1.0;
            m.vessel[[2, c]] = 1.0;
            m.vein[[5, c]] = 1.0;
            m.vessel[[5, c]] = 1.0;
        }
        m
    }

    #[test]
    fn remove_clears_window_pixels() {
        let m = toy_mask();
        let win = Window {
            row: 1,
            col: 2,
            height: 3,
            width: 4,
        };
        let out = op_remove(&m, win);
        // 4 artery pixels inside the window cleared, vein row untouched.
        assert_eq!(out.vessel_pixel_count(), m.vessel_pixel_count() - 4);
        for c in 2..6 {
            assert_eq!(out.artery[[2, c]], 0.0);
            assert_eq!(out.vessel[[2, c]], 0.0);
        }
        assert_eq!(out.vein, m.vein);
    }

    #[test]
    fn remove_on_vessel_free_window_is_identity() {
        let m = toy_mask();
        let win = Window {
            row: 6,
            col: 0,
            height: 2,
            width: 8,
        };
        let out = op_remove(&m, win);
        assert_eq!(out.artery, m.artery);
        assert_eq!(out.vessel, m.vessel);
    }

    #[test]
    fn full_frame_remove_empties_mask() {
        let m = toy_mask();
        let out = op_remove(
            &m,
            Window {
                row: 0,
                col: 0,
                height: 8,
                width: 8,
            },
        );
        assert_eq!(out.vessel_pixel_count(), 0);
    }

    #[test]
    fn shift_zero_offset_is_identity() {
        let m = toy_mask();
        let win = Window {
            row: 1,
            col: 1,
            height: 4,
            width: 4,
        };
        let out = op_shift(&m, win, (0, 0));
        assert_eq!(out.artery, m.artery);
        assert_eq!(out.vein, m.vein);
        assert_eq!(out.vessel, m.vessel);
    }

    #[test]
    fn shift_fully_off_frame_equals_remove() {
        let m = toy_mask();
        let win = Window {
            row: 1,
            col: 1,
            height: 3,
            width: 3,
        };
        let shifted = op_shift(&m, win, (20, 20));
        let removed = op_remove(&m, win);
        assert_eq!(shifted.artery, removed.artery);
        assert_eq!(shifted.vessel, removed.vessel);
    }

    #[test]
    fn shift_translates_segment() {
        let m = toy_mask();
        let win = Window {
            row: 2,
            col: 1,
            height: 1,
            width: 6,
        };
        let out = op_shift(&m, win, (2, 0));
        for c in 1..7 {
            assert_eq!(out.artery[[2, c]], 0.0);
            assert_eq!(out.artery[[4, c]], 1.0);
            assert_eq!(out.vessel[[4, c]], 1.0);
        }
    }

    #[test]
    fn swap_exchanges_classes_and_is_involution() {
        let m = toy_mask();
        let win = Window {
            row: 0,
            col: 0,
            height: 8,
            width: 8,
        };
        let out = op_swap(&m, win);
        assert_eq!(out.artery, m.vein);
        assert_eq!(out.vein, m.artery);
        assert_eq!(out.vessel, m.vessel);
        let back = op_swap(&out, win);
        assert_eq!(back.artery, m.artery);
        assert_eq!(back.vein, m.vein);
    }

    #[test]
    fn swap_on_background_window_is_identity() {
        let m = toy_mask();
        let win = Window {
            row: 6,
            col: 0,
            height: 2,
            width: 8,
        };
        let out = op_swap(&m, win);
        assert_eq!(out.artery, m.artery);
        assert_eq!(out.vein, m.vein);
    }

    #[test]
    fn fraction_hand_cases() {
        let m = toy_mask();
        assert_eq!(shuffle_fraction(&m, &m).unwrap(), 0.0);
        let empty = AvMask::zeros(8, 8, MaskKind::Binary);
        assert_eq!(shuffle_fraction(&m, &empty).unwrap(), 1.0);
        // 12 vessel pixels; relabel 3 artery pixels to vein -> 0.25.
        let mut p = m.clone();
        for c in 1..4 {
            p.artery[[2, c]] = 0.0;
            p.vein[[2, c]] = 1.0;
        }
        assert!((shuffle_fraction(&m, &p).unwrap() - 0.25).abs() < 1e-12);
        assert!(shuffle_fraction(&empty, &m).is_err());
    }

    #[test]
    fn shuffle_budget_and_determinism() {
        let sample = synth_sample(3, (128, 128)).unwrap();
        let cfg = ShuffleConfig {
            seed: 3,
            ..Default::default()
        };
        let (out1, rep1) = shuffle_mask(&sample.mask, &cfg).unwrap();
        let (out2, rep2) = shuffle_mask(&sample.mask, &cfg).unwrap();
        assert_eq!(out1.artery, out2.artery);
        assert_eq!(rep1.final_fraction, rep2.final_fraction);
        assert!(!rep1.ops_applied.is_empty());

        // Independent oracle check of the reported fraction.
        let f = shuffle_fraction(&sample.mask, &out1).unwrap();
        assert!((f - rep1.final_fraction).abs() < 1e-12);
        assert!((0.05..=0.25).contains(&f));
        out1.validate().unwrap();
    }

    #[test]
    fn shuffle_report_replays_bit_exactly() {
        let sample = synth_sample(11, (96, 96)).unwrap();
        let cfg = ShuffleConfig {
            seed: 42,
            ..Default::default()
        };
        let (out, rep) = shuffle_mask(&sample.mask, &cfg).unwrap();
        let replayed = replay(&sample.mask, &rep);
        assert_eq!(out.artery, replayed.artery);
        assert_eq!(out.vein, replayed.vein);
        assert_eq!(out.vessel, replayed.vessel);
    }

    #[test]
    fn shuffle_rejects_sparse_mask() {
        let m = toy_mask(); // 12 vessel pixels < 50
        assert!(matches!(
            shuffle_mask(&m, &ShuffleConfig::default()),
            Err(Error::SparseMask { .. })
        ));
    }
}
