//! Artery/vein classification metrics and vessel-connectivity summaries.
//!
//! Metrics are computed over the set of ground-truth vessel pixels with
//! an unambiguous class label: crossings (both artery and vein) and
//! uncertain pixels (vessel without either label) are excluded. Arteries
//! play the positive class, so sensitivity is the artery recall and
//! specificity the vein recall.

use std::collections::VecDeque;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::AvMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Evaluate on every labelled ground-truth vessel pixel; a background
    /// prediction there counts as a misclassification.
    GtPixels,
    /// Evaluate only where the prediction also marks a vessel.
    SegmentedPixels,
}

impl FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gt" | "gt-pixels" => Ok(MetricMode::GtPixels),
            "seg" | "segmented" => Ok(MetricMode::SegmentedPixels),
            other => Err(Error::Parameter(format!("unknown metric mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AvMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub n_artery: usize,
    pub n_vein: usize,
}

fn on(m: &Array2<f64>, r: usize, c: usize) -> bool {
    m[[r, c]] >= 0.5
}

pub fn av_metrics(pred: &AvMask, gt: &AvMask, mode: MetricMode) -> Result<AvMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (h, w) = gt.shape();
    let (mut n_a, mut n_v, mut tp_a, mut tn_v) = (0usize, 0usize, 0usize, 0usize);
    for r in 0..h {
        for c in 0..w {
            if !on(&gt.vessel, r, c) {
                continue;
            }
            let ga = on(&gt.artery, r, c);
            let gv = on(&gt.vein, r, c);
            // crossings and uncertain pixels carry no single class label
            if ga == gv {
                continue;
            }
            if mode == MetricMode::SegmentedPixels && !on(&pred.vessel, r, c) {
                continue;
            }
            let pa = on(&pred.vessel, r, c) && on(&pred.artery, r, c);
            let pv = on(&pred.vessel, r, c) && on(&pred.vein, r, c);
            if ga {
                n_a += 1;
                if pa && !pv {
                    tp_a += 1;
                }
            } else {
                n_v += 1;
                if pv && !pa {
                    tn_v += 1;
                }
            }
        }
    }
    if n_a == 0 {
        return Err(Error::EmptyClass("artery".into()));
    }
    if n_v == 0 {
        return Err(Error::EmptyClass("vein".into()));
    }
    Ok(AvMetrics {
        sensitivity: tp_a as f64 / n_a as f64,
        specificity: tn_v as f64 / n_v as f64,
        accuracy: (tp_a + tn_v) as f64 / (n_a + n_v) as f64,
        n_artery: n_a,
        n_vein: n_v,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassConnectivity {
    pub pixels: usize,
    /// 8-connected components of at least `min_size` pixels.
    pub components: usize,
    /// Largest component size over class pixel count; 0 for empty classes.
    pub largest_component_ratio: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConnectivityReport {
    pub artery: ClassConnectivity,
    pub vein: ClassConnectivity,
    pub vessel: ClassConnectivity,
}

fn class_connectivity(m: &Array2<f64>, min_size: usize) -> ClassConnectivity {
    let (h, w) = m.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut pixels = 0usize;
    let mut components = 0usize;
    let mut largest = 0usize;
    for r in 0..h {
        for c in 0..w {
            if !on(m, r, c) {
                continue;
            }
            pixels += 1;
            if seen[[r, c]] {
                continue;
            }
            // flood-fill one component
            let mut size = 0usize;
            let mut queue = VecDeque::from([(r, c)]);
            seen[[r, c]] = true;
            while let Some((qr, qc)) = queue.pop_front() {
                size += 1;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (qr as i64 + dr, qc as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[[nr, nc]] && on(m, nr, nc) {
                            seen[[nr, nc]] = true;
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            if size >= min_size {
                components += 1;
            }
            largest = largest.max(size);
        }
    }
    ClassConnectivity {
        pixels,
        components,
        largest_component_ratio: if pixels == 0 {
            0.0
        } else {
            largest as f64 / pixels as f64
        },
    }
}

pub fn connectivity_report(m: &AvMask, min_size: usize) -> ConnectivityReport {
    ConnectivityReport {
        artery: class_connectivity(&m.artery, min_size),
        vein: class_connectivity(&m.vein, min_size),
        vessel: class_connectivity(&m.vessel, min_size),
    }
}

/// Renders labelled metric rows as a CSV document and an aligned text
/// table. Errors on an empty row set.
pub fn emit_tables(rows: &[(String, AvMetrics)]) -> Result<(String, String)> {
    if rows.is_empty() {
        return Err(Error::Parameter("no metric rows to report".into()));
    }
    let mut csv = String::from("label,sensitivity,specificity,accuracy,n_artery,n_vein\n");
    for (label, m) in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            label, m.sensitivity, m.specificity, m.accuracy, m.n_artery, m.n_vein
        ));
    }
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .max()
        .unwrap()
        .max("label".len());
    let mut text = format!(
        "{:<label_w$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}\n",
        "label", "sen", "spec", "acc", "n_art", "n_vein"
    );
    for (label, m) in rows {
        text.push_str(&format!(
            "{:<label_w$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8}  {:>8}\n",
            label, m.sensitivity, m.specificity, m.accuracy, m.n_artery, m.n_vein
        ));
    }
    Ok((csv, text))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, AvMetrics)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parameter("empty metrics CSV".into()))?;
    if header != "label,sensitivity,specificity,accuracy,n_artery,n_vein" {
        return Err(Error::Parameter(format!("unexpected CSV header '{header}'")));
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Parameter(format!("malformed CSV row '{line}'")));
        }
        let field = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Parameter(format!("bad number '{}' in '{line}'", parts[i])))
        };
        rows.push((
            parts[0].to_string(),
            AvMetrics {
                sensitivity: field(1)?,
                specificity: field(2)?,
                accuracy: field(3)?,
                n_artery: field(4)? as usize,
                n_vein: field(5)? as usize,
            },
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskKind;

    /// gt: [artery, artery, vein, vein, crossing, uncertain]
    /// pred: [artery, vein, vein, background, artery, artery]
    fn hand_masks() -> (AvMask, AvMask) {
        let mut gt = AvMask::zeros(1, 6, MaskKind::Binary);
        for c in 0..6 {
            gt.vessel[[0, c]] = 1.0;
        }
        gt.artery[[0, 0]] = 1.0;
        gt.artery[[0, 1]] = 1.0;
        gt.vein[[0, 2]] = 1.0;
        gt.vein[[0, 3]] = 1.0;
        gt.artery[[0, 4]] = 1.0;
        gt.vein[[0, 4]] = 1.0;

        let mut pred = AvMask::zeros(1, 6, MaskKind::Binary);
        for c in [0, 1, 2, 4, 5] {
            pred.vessel[[0, c]] = 1.0;
        }
        pred.artery[[0, 0]] = 1.0;
        pred.vein[[0, 1]] = 1.0;
        pred.vein[[0, 2]] = 1.0;
        pred.artery[[0, 4]] = 1.0;
        pred.artery[[0, 5]] = 1.0;
        (pred, gt)
    }

    #[test]
    fn metrics_hand_values_gt_mode() {
        let (pred, gt) = hand_masks();
        let m = av_metrics(&pred, &gt, MetricMode::GtPixels).unwrap();
        // P = pixels 0..4: two arteries, two veins
        assert_eq!(m.n_artery, 2);
        assert_eq!(m.n_vein, 2);
        assert!((m.sensitivity - 0.5).abs() < 1e-12);
        assert!((m.specificity - 0.5).abs() < 1e-12);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn metrics_hand_values_segmented_mode() {
        let (pred, gt) = hand_masks();
        let m = av_metrics(&pred, &gt, MetricMode::SegmentedPixels).unwrap();
        // pixel 3 drops out: the prediction has no vessel there
        assert_eq!(m.n_artery, 2);
        assert_eq!(m.n_vein, 1);
        assert!((m.sensitivity - 0.5).abs() < 1e-12);
        assert!((m.specificity - 1.0).abs() < 1e-12);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let sample = crate::dataset::synth_sample(3, (64, 64)).unwrap();
        let m = av_metrics(&sample.mask, &sample.mask, MetricMode::GtPixels).unwrap();
        assert_eq!(m.sensitivity, 1.0);
        assert_eq!(m.specificity, 1.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn channel_swap_symmetry() {
        let (pred, gt) = hand_masks();
        let base = av_metrics(&pred, &gt, MetricMode::GtPixels).unwrap();
        let swap = |m: &AvMask| -> AvMask {
            let mut s = m.clone();
            std::mem::swap(&mut s.artery, &mut s.vein);
            s
        };
        let swapped = av_metrics(&swap(&pred), &swap(&gt), MetricMode::GtPixels).unwrap();
        assert!((swapped.sensitivity - base.specificity).abs() < 1e-12);
        assert!((swapped.specificity - base.sensitivity).abs() < 1e-12);
        assert!((swapped.accuracy - base.accuracy).abs() < 1e-12);
    }

    #[test]
    fn empty_class_is_an_error() {
        let (pred, mut gt) = hand_masks();
        gt.vein.fill(0.0); // no vein pixels at all
        assert!(matches!(
            av_metrics(&pred, &gt, MetricMode::GtPixels),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn connectivity_counts_components() {
        let mut m = AvMask::zeros(8, 8, MaskKind::Binary);
        // one 3-pixel diagonal component (8-connected) and one isolated pixel
        for i in 0..3 {
            m.vessel[[i, i]] = 1.0;
        }
        m.vessel[[6, 6]] = 1.0;
        let rep = connectivity_report(&m, 1);
        assert_eq!(rep.vessel.components, 2);
        assert_eq!(rep.vessel.pixels, 4);
        assert!((rep.vessel.largest_component_ratio - 0.75).abs() < 1e-12);
        // a size threshold drops the isolated pixel
        let rep = connectivity_report(&m, 2);
        assert_eq!(rep.vessel.components, 1);
        assert_eq!(rep.artery.components, 0);
        assert_eq!(rep.artery.largest_component_ratio, 0.0);
    }

    #[test]
    fn shuffling_does_not_reduce_fragmentation() {
        use crate::shuffle::{shuffle_mask, ShuffleConfig};
        let sample = crate::dataset::synth_sample(21, (128, 128)).unwrap();
        let cfg = ShuffleConfig {
            seed: 4,
            ..Default::default()
        };
        let (shuffled, _) = shuffle_mask(&sample.mask, &cfg).unwrap();
        let before = connectivity_report(&sample.mask, 10);
        let after = connectivity_report(&shuffled, 10);
        // removing and displacing windows can only split or delete
        // structure, never merge distant trees
        assert!(after.vessel.largest_component_ratio <= before.vessel.largest_component_ratio + 0.05);
    }

    #[test]
    fn tables_round_trip() {
        let (pred, gt) = hand_masks();
        let m = av_metrics(&pred, &gt, MetricMode::GtPixels).unwrap();
        let rows = vec![("01".to_string(), m), ("mean".to_string(), m)];
        let (csv, text) = emit_tables(&rows).unwrap();
        assert!(text.contains("label"));
        let parsed = parse_metrics_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].0, "01");
        assert_eq!(parsed[0].1.sensitivity, m.sensitivity);
        assert_eq!(parsed[1].1.n_artery, m.n_artery);
        assert!(emit_tables(&[]).is_err());
    }
}
