//! Alternating adversarial optimization: weighted segmentation BCE plus
//! the ranking adversarial loss and the triplet loss, one discriminator
//! update then one generator update per iteration, Adam for both, the
//! learning rate halving on a fixed schedule.
//!
//! All randomness is derived functionally from (seed, iteration, index),
//! so a checkpoint restart reproduces an uninterrupted run bit-exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::sample_patch;
use crate::discriminator::{
    disc_loss, gen_adv_loss, ordinal_target, Discriminator, DiscriminatorConfig, Rank, SCORE_EPS,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::mask::{masks_to_batch, AvMask, FundusSample};
use crate::nn::adam::Adam;
use crate::nn::{param_count, zero_grads, Batch, Layer};
use crate::seeding::{split_seed, split_seed2};
use crate::shuffle::{shuffle_mask, ShuffleConfig};
use crate::topofeat::{triplet_loss, FeatureExtractor, TripletConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Baseline,
    Gd,
    TrD,
    Tl,
    TrDTl,
}

impl Ablation {
    pub fn uses_discriminator(self) -> bool {
        matches!(self, Ablation::Gd | Ablation::TrD | Ablation::TrDTl)
    }

    pub fn uses_triplet(self) -> bool {
        matches!(self, Ablation::Tl | Ablation::TrDTl)
    }

    pub fn needs_shuffle(self) -> bool {
        matches!(self, Ablation::TrD | Ablation::Tl | Ablation::TrDTl)
    }

    /// Ordinal two-bit head, or single real/fake bit for the general
    /// discriminator ablation.
    pub fn head_bits(self) -> usize {
        if self == Ablation::Gd {
            1
        } else {
            2
        }
    }

    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::Gd,
        Ablation::TrD,
        Ablation::Tl,
        Ablation::TrDTl,
    ];
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Ablation::Baseline => "baseline",
            Ablation::Gd => "gd",
            Ablation::TrD => "tr-d",
            Ablation::Tl => "tl",
            Ablation::TrDTl => "tr-d+tl",
        };
        f.write_str(s)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_start_matches('+') {
            "baseline" => Ok(Ablation::Baseline),
            "gd" => Ok(Ablation::Gd),
            "tr-d" | "trd" => Ok(Ablation::TrD),
            "tl" => Ok(Ablation::Tl),
            "tr-d+tl" | "trd+tl" | "full" => Ok(Ablation::TrDTl),
            other => Err(Error::Parameter(format!("unknown ablation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Per-channel BCE weights (vessel, artery, vein).
    pub mu: (f64, f64, f64),
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iters: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    pub patch: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub ckpt_every: usize,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub triplet: TripletConfig,
    pub shuffle: ShuffleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: (0.4, 0.3, 0.3),
            lambda1: 0.2,
            lambda2: 0.1,
            max_iters: 30_000,
            batch: 4,
            lr0: 2e-4,
            lr_half_every: 7_000,
            patch: 256,
            ablation: Ablation::TrDTl,
            seed: 0,
            ckpt_every: 1_000,
            gen: GeneratorConfig::default(),
            disc: DiscriminatorConfig::default(),
            triplet: TripletConfig::default(),
            shuffle: ShuffleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu.0 <= 0.0 || self.mu.1 <= 0.0 || self.mu.2 <= 0.0 {
            return Err(Error::Parameter("mu components must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Parameter("lambda weights must be nonnegative".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Parameter("lr0 must be positive".into()));
        }
        if self.batch == 0 || self.max_iters == 0 || self.lr_half_every == 0 {
            return Err(Error::Parameter("batch, max_iters, lr_half_every must be positive".into()));
        }
        if self.ablation.uses_discriminator() && self.patch < 32 {
            return Err(Error::Parameter(
                "discriminator needs a patch size of at least 32".into(),
            ));
        }
        Ok(())
    }

    /// Fans the global seed out into the per-component seeds.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.gen.seed = split_seed(self.seed, "generator");
        cfg.disc.seed = split_seed(self.seed, "discriminator");
        cfg.disc.head_bits = self.ablation.head_bits();
        cfg.triplet.extractor_seed = split_seed(self.seed, "extractor");
        cfg
    }
}

/// Piecewise-constant schedule: halves every `lr_half_every` iterations.
pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> f64 {
    cfg.lr0 * 0.5f64.powi((iteration / cfg.lr_half_every) as i32)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// Channel-weighted binary cross entropy of a probability mask batch
/// against a binary target batch, channels ordered (artery, vein,
/// vessel), weights given as (vessel, artery, vein). Returns the loss
/// and its gradient with respect to the predictions.
pub fn bce_seg_loss(pred: &Batch, target: &Batch, mu: (f64, f64, f64)) -> Result<(f64, Batch)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "bce: prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (n, c, h, w) = pred.dim();
    debug_assert_eq!(c, 3);
    // channel order (artery, vein, vessel) -> weights (mu_a, mu_v, mu_s)
    let weights = [mu.1, mu.2, mu.0];
    let per_channel = (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array4::zeros(pred.dim());
    for ((idx, &p), g) in pred.indexed_iter().zip(grad.iter_mut()) {
        let t = target[idx];
        let pc = clamp_prob(p);
        let wgt = weights[idx.1];
        loss += wgt * -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln()) / per_channel;
        *g = wgt * (pc - t) / (pc * (1.0 - pc)) / per_channel;
    }
    Ok((loss, grad))
}

/// Composite generator objective with ablation-dependent terms.
pub fn generator_loss(
    l_bce: f64,
    l_adv: f64,
    l_triplet: f64,
    lambda1: f64,
    lambda2: f64,
    ablation: Ablation,
) -> f64 {
    let mut total = l_bce;
    if ablation.uses_discriminator() {
        total += lambda1 * l_adv;
    }
    if ablation.uses_triplet() {
        total += lambda2 * l_triplet;
    }
    total
}

/// Plain real/fake discriminator loss for the general-discriminator
/// ablation: two-sided cross entropy, real -> 1, fake -> 0, mean of the
/// two term means. Returns (loss, grad_real, grad_fake).
pub fn general_discriminator_loss(real: &Batch, fake: &Batch) -> (f64, Batch, Batch) {
    let mut loss = 0.0;
    let count_r = real.len() as f64;
    let mut grad_real = Array4::zeros(real.dim());
    for (&s, g) in real.iter().zip(grad_real.iter_mut()) {
        let sc = clamp_prob(s);
        loss += -sc.ln() / count_r / 2.0;
        *g = (sc - 1.0) / (sc * (1.0 - sc)) / count_r / 2.0;
    }
    let count_f = fake.len() as f64;
    let mut grad_fake = Array4::zeros(fake.dim());
    for (&s, g) in fake.iter().zip(grad_fake.iter_mut()) {
        let sc = clamp_prob(s);
        loss += -(1.0 - sc).ln() / count_f / 2.0;
        *g = sc / (sc * (1.0 - sc)) / count_f / 2.0;
    }
    (loss, grad_real, grad_fake)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub l_bce: f64,
    pub l_adv_d: f64,
    pub l_adv_g: f64,
    pub l_triplet: f64,
    pub lr: f64,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub iteration: usize,
    pub gen: Generator,
    pub disc: Option<Discriminator>,
    pub extractor: Option<FeatureExtractor>,
    pub adam_g: Adam,
    pub adam_d: Option<Adam>,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let mut gen = Generator::new(cfg.gen.clone())?;
        let adam_g = Adam::new(param_count(&mut gen));
        let (disc, adam_d) = if cfg.ablation.uses_discriminator() {
            let mut d = Discriminator::new(cfg.disc.clone())?;
            let a = Adam::new(param_count(&mut d));
            (Some(d), Some(a))
        } else {
            (None, None)
        };
        let extractor = if cfg.ablation.uses_triplet() {
            Some(FeatureExtractor::new(&cfg.triplet)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            iteration: 0,
            gen,
            disc,
            extractor,
            adam_g,
            adam_d,
            history: Vec::new(),
        })
    }

    /// Fresh shuffled negatives for one batch, seeded from (global seed,
    /// iteration, sample index); a handful of reseeds absorbs
    /// budget-unreachable draws.
    fn shuffle_batch(&self, masks: &[AvMask]) -> Result<Vec<AvMask>> {
        let mut out = Vec::with_capacity(masks.len());
        for (i, m) in masks.iter().enumerate() {
            let mut last_err = None;
            let mut shuffled = None;
            for attempt in 0..5u64 {
                let mut scfg = self.cfg.shuffle.clone();
                scfg.seed =
                    split_seed2(self.cfg.seed, "shuffle", self.iteration as u64, i as u64 * 8 + attempt);
                match shuffle_mask(m, &scfg) {
                    Ok((s, _)) => {
                        shuffled = Some(s);
                        break;
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            match shuffled {
                Some(s) => out.push(s),
                None => return Err(last_err.unwrap()),
            }
        }
        Ok(out)
    }

    /// One alternating optimization step on a prepared batch.
    pub fn train_step(&mut self, x: &Batch, masks: &[AvMask]) -> Result<HistoryRow> {
        let cfg = self.cfg.clone();
        let lr = lr_at(&cfg, self.iteration);
        let l_target = masks_to_batch(&masks.iter().collect::<Vec<_>>());

        let shuffled = if cfg.ablation.needs_shuffle() {
            self.shuffle_batch(masks)?
        } else {
            Vec::new()
        };
        let ls_target = if shuffled.is_empty() {
            None
        } else {
            Some(masks_to_batch(&shuffled.iter().collect::<Vec<_>>()))
        };

        // Discriminator update; the generated mask is detached.
        let mut l_adv_d = 0.0;
        if cfg.ablation.uses_discriminator() {
            let gx = self.gen.forward(x, true);
            let disc = self.disc.as_mut().expect("discriminator present");
            let adam_d = self.adam_d.as_mut().expect("adam present");
            zero_grads(disc);
            if cfg.ablation == Ablation::Gd {
                let real_in = Discriminator::concat_input(x, &l_target)?;
                let fake_in = Discriminator::concat_input(x, &gx)?;
                let joint =
                    ndarray::concatenate(Axis(0), &[real_in.view(), fake_in.view()]).unwrap();
                let out = disc.forward(&joint, true);
                let n = x.dim().0;
                let real_out = out.slice(ndarray::s![..n, .., .., ..]).to_owned();
                let fake_out = out.slice(ndarray::s![n.., .., .., ..]).to_owned();
                let (l, gr, gf) = general_discriminator_loss(&real_out, &fake_out);
                l_adv_d = l;
                let gout = ndarray::concatenate(Axis(0), &[gr.view(), gf.view()]).unwrap();
                disc.backward(&gout);
            } else {
                let ls = ls_target.as_ref().expect("ordinal ranking needs shuffled masks");
                let in_s = Discriminator::concat_input(x, ls)?;
                let in_g = Discriminator::concat_input(x, &gx)?;
                let in_t = Discriminator::concat_input(x, &l_target)?;
                let joint =
                    ndarray::concatenate(Axis(0), &[in_s.view(), in_g.view(), in_t.view()])
                        .unwrap();
                let out = disc.forward(&joint, true);
                let n = x.dim().0;
                let o_s = out.slice(ndarray::s![..n, .., .., ..]).to_owned();
                let o_g = out.slice(ndarray::s![n..2 * n, .., .., ..]).to_owned();
                let o_t = out.slice(ndarray::s![2 * n.., .., .., ..]).to_owned();
                let targets = [
                    ordinal_target(Rank::Shuffled),
                    ordinal_target(Rank::Generated),
                    ordinal_target(Rank::GroundTruth),
                ];
                let (l, grads) = disc_loss([&o_s, &o_g, &o_t], targets)?;
                l_adv_d = l;
                let gout = ndarray::concatenate(
                    Axis(0),
                    &[grads[0].view(), grads[1].view(), grads[2].view()],
                )
                .unwrap();
                disc.backward(&gout);
            }
            adam_d.step(disc, lr);
        }

        // Generator update on a fresh forward pass.
        zero_grads(&mut self.gen);
        let gx = self.gen.forward(x, true);
        let (l_bce, mut grad) = bce_seg_loss(&gx, &l_target, cfg.mu)?;

        let mut l_adv_g = 0.0;
        if cfg.ablation.uses_discriminator() {
            let disc = self.disc.as_mut().expect("discriminator present");
            let din = Discriminator::concat_input(x, &gx)?;
            let dout = disc.forward(&din, true);
            let (l, gout) = gen_adv_loss(&dout);
            l_adv_g = l;
            zero_grads(disc);
            let gin = disc.backward(&gout);
            // Gradient reaches the generator through the mask half of the
            // conditioned input; the discriminator's own parameter
            // gradients from this pass are discarded.
            let gmask = gin.slice(ndarray::s![.., 3.., .., ..]).to_owned();
            zero_grads(disc);
            grad.scaled_add(cfg.lambda1, &gmask);
        }

        let mut l_triplet = 0.0;
        if cfg.ablation.uses_triplet() {
            let extractor = self.extractor.as_mut().expect("extractor present");
            let ls = ls_target.as_ref().expect("triplet needs shuffled negatives");
            let (l, gpos) = triplet_loss(extractor, &l_target, &gx, ls, &cfg.triplet)?;
            l_triplet = l;
            grad.scaled_add(cfg.lambda2, &gpos);
        }

        for (name, v) in [
            ("segmentation loss", l_bce),
            ("discriminator loss", l_adv_d),
            ("adversarial generator loss", l_adv_g),
            ("triplet loss", l_triplet),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    iter: self.iteration,
                    what: name.into(),
                });
            }
        }

        self.gen.backward(&grad);
        self.adam_g.step(&mut self.gen, lr);

        let row = HistoryRow {
            iteration: self.iteration,
            l_bce,
            l_adv_d,
            l_adv_g,
            l_triplet,
            lr,
        };
        self.history.push(row);
        self.iteration += 1;
        Ok(row)
    }

    /// Assembles the seeded batch for an iteration: sample choice and
    /// patch origin both derive from (seed, iteration).
    pub fn make_batch(&self, data: &[FundusSample]) -> (Batch, Vec<AvMask>) {
        let cfg = &self.cfg;
        let mut rng =
            ChaCha8Rng::seed_from_u64(split_seed2(cfg.seed, "data", self.iteration as u64, 0));
        let mut images = Vec::with_capacity(cfg.batch);
        let mut masks = Vec::with_capacity(cfg.batch);
        // Shuffling needs a minimum vessel population in the crop, so
        // near-empty patches are redrawn.
        let min_vessels = if cfg.ablation.needs_shuffle() { 50 } else { 0 };
        for _ in 0..cfg.batch {
            let mut p = None;
            for _ in 0..20 {
                let idx = rng.random_range(0..data.len());
                let cand = sample_patch(&data[idx], cfg.patch, &mut rng);
                let enough = cand.mask.vessel_pixel_count() >= min_vessels;
                p = Some(cand);
                if enough {
                    break;
                }
            }
            let p = p.unwrap();
            images.push(p.image);
            masks.push(p.mask);
        }
        let mut x = Array4::zeros((cfg.batch, 3, cfg.patch, cfg.patch));
        for (n, img) in images.iter().enumerate() {
            x.index_axis_mut(Axis(0), n).assign(img);
        }
        (x, masks)
    }

    /// Runs up to `iters` further iterations, checkpointing under
    /// `out_dir` when given. On divergence a diagnostic snapshot is
    /// written before the error propagates.
    pub fn run(
        &mut self,
        data: &[FundusSample],
        iters: usize,
        out_dir: Option<&Path>,
    ) -> Result<()> {
        let end = (self.iteration + iters).min(self.cfg.max_iters);
        while self.iteration < end {
            let (x, masks) = self.make_batch(data);
            match self.train_step(&x, &masks) {
                Ok(_) => {}
                Err(e) => {
                    if let Some(dir) = out_dir {
                        let _ = self.save(&dir.join("diverged.ckpt"));
                    }
                    return Err(e);
                }
            }
            if let Some(dir) = out_dir {
                if self.iteration % self.cfg.ckpt_every == 0 || self.iteration == end {
                    self.save(&dir.join(format!("iter{:06}.ckpt", self.iteration)))?;
                    write_history_csv(&dir.join("loss_history.csv"), &self.history)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut tensors = checkpoint::collect_named(&mut self.gen, "gen.");
        if let Some(d) = self.disc.as_mut() {
            tensors.extend(checkpoint::collect_named(d, "disc."));
        }
        if let Some(e) = self.extractor.as_mut() {
            tensors.extend(checkpoint::collect_named(e, "topo."));
        }
        tensors.push(("adam_g.m".into(), vec![self.adam_g.m.len()], self.adam_g.m.clone()));
        tensors.push(("adam_g.v".into(), vec![self.adam_g.v.len()], self.adam_g.v.clone()));
        if let Some(a) = &self.adam_d {
            tensors.push(("adam_d.m".into(), vec![a.m.len()], a.m.clone()));
            tensors.push(("adam_d.v".into(), vec![a.v.len()], a.v.clone()));
        }
        let meta = serde_json::json!({
            "config": self.cfg,
            "iteration": self.iteration,
            "adam_g_t": self.adam_g.t,
            "adam_d_t": self.adam_d.as_ref().map(|a| a.t),
            "history": self.history,
        });
        checkpoint::save_named(path, meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load_named(path)?;
        let cfg: TrainConfig = serde_json::from_value(loaded.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad config in checkpoint: {e}")))?;
        let mut state = TrainState::new(&cfg)?;
        // TrainState::new re-resolves seeds; keep the stored config as-is.
        state.cfg = cfg;
        let map: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> = loaded
            .tensors
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        checkpoint::assign_named(&mut state.gen, "gen.", &map)?;
        if let Some(d) = state.disc.as_mut() {
            checkpoint::assign_named(d, "disc.", &map)?;
        }
        if let Some(e) = state.extractor.as_mut() {
            checkpoint::assign_named(e, "topo.", &map)?;
        }
        let grab = |name: &str| -> Result<Vec<f64>> {
            map.get(name)
                .map(|(_, d)| d.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        state.adam_g.m = grab("adam_g.m")?;
        state.adam_g.v = grab("adam_g.v")?;
        state.adam_g.t = loaded.meta["adam_g_t"].as_u64().unwrap_or(0);
        if let Some(a) = state.adam_d.as_mut() {
            a.m = grab("adam_d.m")?;
            a.v = grab("adam_d.v")?;
            a.t = loaded.meta["adam_d_t"].as_u64().unwrap_or(0);
        }
        state.iteration = loaded.meta["iteration"].as_u64().unwrap_or(0) as usize;
        state.history = serde_json::from_value(loaded.meta["history"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad history in checkpoint: {e}")))?;
        Ok(state)
    }
}

pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut out = String::from("iteration,l_bce,l_adv_d,l_adv_g,l_triplet,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.l_bce, r.l_adv_d, r.l_adv_g, r.l_triplet, r.lr
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
