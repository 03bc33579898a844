//! Command-line frontend: synthetic data generation, mask shuffling,
//! training, full-image prediction, and evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avtopo::config::{load_config, render_config};
use avtopo::dataset::{
    export_avdrive, load_avdrive, load_color_mask, load_rgb_image, save_color_mask, synth_sample,
    Split,
};
use avtopo::error::{Error, Result};
use avtopo::evaluate::{av_metrics, emit_tables, AvMetrics, MetricMode};
use avtopo::infer::{binarize, predict_image};
use avtopo::mask::FundusSample;
use avtopo::shuffle::shuffle_mask;
use avtopo::train::{Ablation, TrainState};

#[derive(Parser)]
#[command(name = "avtopo", version, about = "Topology-aware artery/vein segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset in the on-disk training layout.
    Synth {
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Dataset split directory to write.
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 128)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Perturb a color-coded mask and report the applied budget.
    Shuffle {
        /// Input mask PNG.
        #[arg(long)]
        mask: PathBuf,
        /// Output perturbed mask PNG.
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a run-configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured ablation (baseline, gd, tr-d, tl, tr-d+tl).
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Run directory for checkpoints, loss history and frozen config.
        #[arg(long)]
        out: PathBuf,
        /// Dataset root in the on-disk layout; omitted means synthetic data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Synthetic sample count when no dataset is given.
        #[arg(long, default_value_t = 16)]
        synth_n: usize,
        /// Synthetic sample side length.
        #[arg(long, default_value_t = 128)]
        synth_size: usize,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict a full image with an overlapping patch grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory for probability, label and overlay images.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        patch: usize,
        #[arg(long, default_value_t = 50)]
        stride: usize,
    },
    /// Compare predicted masks against ground truth.
    Evaluate {
        /// Directory of predicted mask PNGs.
        #[arg(long)]
        pred_dir: PathBuf,
        /// Directory of ground-truth mask PNGs with matching names.
        #[arg(long)]
        gt_dir: PathBuf,
        /// Pixel set: "gt" (all labelled gt vessels) or "seg" (intersection).
        #[arg(long, default_value = "gt")]
        mode: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" | "training" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Parameter(format!("unknown split '{other}'"))),
    }
}

fn cmd_synth(
    n: usize,
    seed: u64,
    out: &PathBuf,
    split: &str,
    height: usize,
    width: usize,
) -> Result<()> {
    let split = parse_split(split)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(synth_sample(seed + i as u64, (height, width))?);
    }
    export_avdrive(&samples, out, split)?;
    println!(
        "wrote {n} synthetic samples ({height}x{width}) under {}",
        out.join(split.dir_name()).display()
    );
    Ok(())
}

fn cmd_shuffle(mask: &PathBuf, out: &PathBuf, report: Option<&PathBuf>, seed: u64) -> Result<()> {
    let m = load_color_mask(mask)?;
    let mut cfg = avtopo::shuffle::ShuffleConfig::default();
    cfg.seed = seed;
    let (shuffled, rep) = shuffle_mask(&m, &cfg)?;
    save_color_mask(out, &shuffled)?;
    let json = serde_json::to_string_pretty(&rep)
        .map_err(|e| Error::Parameter(format!("cannot encode report: {e}")))?;
    if let Some(path) = report {
        std::fs::write(path, &json).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    println!("{json}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &PathBuf,
    ablation: Option<Ablation>,
    out: &PathBuf,
    data: Option<&PathBuf>,
    synth_n: usize,
    synth_size: usize,
    resume: Option<&PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(a) = ablation {
        cfg.ablation = a;
        cfg.validate()?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;

    let samples: Vec<FundusSample> = match data {
        Some(root) => load_avdrive(root, Split::Train)?,
        None => (0..synth_n)
            .map(|i| synth_sample(cfg.seed.wrapping_add(1000 + i as u64), (synth_size, synth_size)))
            .collect::<Result<_>>()?,
    };

    let mut state = match resume {
        Some(path) => TrainState::load(path)?,
        None => TrainState::new(&cfg)?,
    };
    let frozen = out.join("config.frozen");
    std::fs::write(&frozen, render_config(&state.cfg)).map_err(|e| Error::Io {
        path: frozen,
        source: e,
    })?;

    let remaining = state.cfg.max_iters.saturating_sub(state.iteration);
    println!(
        "training ablation {} from iteration {} to {} on {} samples",
        state.cfg.ablation,
        state.iteration,
        state.cfg.max_iters,
        samples.len()
    );
    state.run(&samples, remaining, Some(out))?;
    state.save(&out.join("final.ckpt"))?;
    avtopo::train::write_history_csv(&out.join("loss_history.csv"), &state.history)?;
    if let Some(last) = state.history.last() {
        println!(
            "finished at iteration {}: bce {:.4}, adv_d {:.4}, triplet {:.4}",
            state.iteration, last.l_bce, last.l_adv_d, last.l_triplet
        );
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: &PathBuf,
    image: &PathBuf,
    out: &PathBuf,
    patch: usize,
    stride: usize,
) -> Result<()> {
    let mut state = TrainState::load(checkpoint)?;
    let img = load_rgb_image(image)?;
    let prob = predict_image(&mut state.gen, &img, patch, stride)?;
    let hard = binarize(&prob);
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("prediction")
        .to_string();

    // 16-bit probability image: channels (artery, vein, vessel)
    let (h, w) = prob.shape();
    let mut buf16 = vec![0u16; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) * 3;
            buf16[i] = (prob.artery[[r, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf16[i + 1] = (prob.vein[[r, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf16[i + 2] = (prob.vessel[[r, c]].clamp(0.0, 1.0) * 65535.0).round() as u16;
        }
    }
    let prob_path = out.join(format!("{stem}_prob.png"));
    let bytes: Vec<u8> = buf16.iter().flat_map(|v| v.to_be_bytes()).collect();
    image::save_buffer(
        &prob_path,
        &bytes,
        w as u32,
        h as u32,
        image::ColorType::Rgb16,
    )
    .map_err(|e| Error::Load(format!("cannot write {}: {e}", prob_path.display())))?;

    let label_path = out.join(format!("{stem}_av.png"));
    save_color_mask(&label_path, &hard)?;

    // overlay: dimmed source with the hard labels painted on top
    let mask_rgb = hard.to_color_rgb()?;
    let mut overlay = vec![0u8; h * w * 3];
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) * 3;
            if hard.vessel[[r, c]] >= 0.5 {
                overlay[i..i + 3].copy_from_slice(&mask_rgb[i..i + 3]);
            } else {
                for ch in 0..3 {
                    overlay[i + ch] =
                        (img[[ch, r, c]].clamp(0.0, 1.0) * 255.0 * 0.5).round() as u8;
                }
            }
        }
    }
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    image::save_buffer(
        &overlay_path,
        &overlay,
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Load(format!("cannot write {}: {e}", overlay_path.display())))?;

    println!(
        "wrote {}, {} and {}",
        prob_path.display(),
        label_path.display(),
        overlay_path.display()
    );
    Ok(())
}

fn cmd_evaluate(pred_dir: &PathBuf, gt_dir: &PathBuf, mode: &str, out: &PathBuf) -> Result<()> {
    let mode: MetricMode = mode.parse()?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::Io {
            path: pred_dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Load(format!(
            "no PNG predictions under {}",
            pred_dir.display()
        )));
    }

    let mut rows: Vec<(String, AvMetrics)> = Vec::new();
    for pred_path in &entries {
        let name = pred_path.file_name().unwrap().to_str().unwrap().to_string();
        let gt_path = gt_dir.join(&name);
        let pred = load_color_mask(pred_path)?;
        let gt = load_color_mask(&gt_path)?;
        let m = av_metrics(&pred, &gt, mode)?;
        rows.push((name.trim_end_matches(".png").to_string(), m));
    }
    let k = rows.len() as f64;
    let mean = AvMetrics {
        sensitivity: rows.iter().map(|(_, m)| m.sensitivity).sum::<f64>() / k,
        specificity: rows.iter().map(|(_, m)| m.specificity).sum::<f64>() / k,
        accuracy: rows.iter().map(|(_, m)| m.accuracy).sum::<f64>() / k,
        n_artery: rows.iter().map(|(_, m)| m.n_artery).sum(),
        n_vein: rows.iter().map(|(_, m)| m.n_vein).sum(),
    };
    rows.push(("mean".to_string(), mean));

    let (csv, text) = emit_tables(&rows)?;
    std::fs::write(out, csv).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth {
            n,
            seed,
            out,
            split,
            height,
            width,
        } => cmd_synth(*n, *seed, out, split, *height, *width),
        Cmd::Shuffle {
            mask,
            out,
            report,
            seed,
        } => cmd_shuffle(mask, out, report.as_ref(), *seed),
        Cmd::Train {
            config,
            ablation,
            out,
            data,
            synth_n,
            synth_size,
            resume,
        } => cmd_train(
            config,
            *ablation,
            out,
            data.as_ref(),
            *synth_n,
            *synth_size,
            resume.as_ref(),
        ),
        Cmd::Predict {
            checkpoint,
            image,
            out,
            patch,
            stride,
        } => cmd_predict(checkpoint, image, out, *patch, *stride),
        Cmd::Evaluate {
            pred_dir,
            gt_dir,
            mode,
            out,
        } => cmd_evaluate(pred_dir, gt_dir, mode, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
