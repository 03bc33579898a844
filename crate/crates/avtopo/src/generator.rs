//! Segmentation generator: residual-block encoder with a U-Net decoder
//! (bilinear upsampling + convolution), three independent sigmoid output
//! channels so crossings can activate artery and vein simultaneously.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::layers::{BatchNorm2d, LeakyRelu, Sigmoid, Upsample2};
use crate::nn::{Batch, Layer, Slot};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub encoder_stages: usize,
    pub base_width: usize,
    pub seed: u64,
    /// Optional encoder/decoder weight file in the shared checkpoint
    /// container; absence is a hard error, never a silent fallback.
    pub pretrained: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_stages: 5,
            base_width: 16,
            seed: 0,
            pretrained: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::Parameter(format!(
                "base_width {} below minimum 4",
                self.base_width
            )));
        }
        if self.encoder_stages < 2 {
            return Err(Error::Parameter("need at least 2 encoder stages".into()));
        }
        Ok(())
    }

    fn stage_width(&self, i: usize) -> usize {
        self.base_width * (1 << i.min(3))
    }
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    act_out: LeakyRelu,
}

impl ResBlock {
    fn new(name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), ch),
            act1: LeakyRelu::relu(),
            conv2: Conv2d::new(&format!("{name}.conv2"), ch, ch, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), ch),
            act_out: LeakyRelu::relu(),
        }
    }
}

impl Layer for ResBlock {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let h = self.conv1.forward(x, train);
        let h = self.bn1.forward(&h, train);
        let h = self.act1.forward(&h, train);
        let h = self.conv2.forward(&h, train);
        let h = self.bn2.forward(&h, train);
        self.act_out.forward(&(h + x), train)
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let gs = self.act_out.backward(grad_out);
        let g = self.bn2.backward(&gs);
        let g = self.conv2.backward(&g);
        let g = self.act1.backward(&g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g) + &gs
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        self.conv1.visit(prefix, f);
        self.bn1.visit(prefix, f);
        self.conv2.visit(prefix, f);
        self.bn2.visit(prefix, f);
    }
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: LeakyRelu,
}

impl ConvBnRelu {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_c, out_c, 3, stride, 1, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_c),
            act: LeakyRelu::relu(),
        }
    }
}

impl Layer for ConvBnRelu {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let h = self.conv.forward(x, train);
        let h = self.bn.forward(&h, train);
        self.act.forward(&h, train)
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let g = self.act.backward(grad_out);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        self.conv.visit(prefix, f);
        self.bn.visit(prefix, f);
    }
}

struct DecStage {
    up: Upsample2,
    fuse: ConvBnRelu,
    up_channels: usize,
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    stem: ConvBnRelu,
    stem_block: ResBlock,
    downs: Vec<ConvBnRelu>,
    blocks: Vec<ResBlock>,
    decs: Vec<DecStage>, // ordered deepest-first as applied in forward
    head: Conv2d,
    out_act: Sigmoid,
}

fn concat_channels(a: &Batch, b: &Batch) -> Batch {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = cfg.encoder_stages;
        let stem = ConvBnRelu::new("stem", 3, cfg.stage_width(0), 1, &mut rng);
        let stem_block = ResBlock::new("enc0", cfg.stage_width(0), &mut rng);
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        for i in 1..s {
            downs.push(ConvBnRelu::new(
                &format!("down{i}"),
                cfg.stage_width(i - 1),
                cfg.stage_width(i),
                2,
                &mut rng,
            ));
            blocks.push(ResBlock::new(&format!("enc{i}"), cfg.stage_width(i), &mut rng));
        }
        let mut decs = Vec::new();
        for i in (0..s - 1).rev() {
            let in_c = cfg.stage_width(i + 1) + cfg.stage_width(i);
            decs.push(DecStage {
                up: Upsample2::new(),
                fuse: ConvBnRelu::new(&format!("dec{i}"), in_c, cfg.stage_width(i), 1, &mut rng),
                up_channels: cfg.stage_width(i + 1),
            });
        }
        let head = Conv2d::new("head", cfg.stage_width(0), 3, 1, 1, 0, &mut rng);
        let mut gen = Self {
            cfg,
            stem,
            stem_block,
            downs,
            blocks,
            decs,
            head,
            out_act: Sigmoid::new(),
        };
        if let Some(path) = gen.cfg.pretrained.clone() {
            crate::checkpoint::load_weights_into(&path, &mut gen, "gen.")?;
        }
        Ok(gen)
    }

    /// Input spatial size must be divisible by 2^(stages-1).
    pub fn check_input(&self, x: &Batch) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::Shape(format!("generator expects 3 channels, got {c}")));
        }
        let div = 1 << (self.cfg.encoder_stages - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} not divisible by {div}"
            )));
        }
        Ok(())
    }
}

impl Layer for Generator {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut skips = Vec::with_capacity(self.cfg.encoder_stages);
        let h = self.stem.forward(x, train);
        let mut h = self.stem_block.forward(&h, train);
        skips.push(h.clone());
        for (down, block) in self.downs.iter_mut().zip(self.blocks.iter_mut()) {
            let d = down.forward(&h, train);
            h = block.forward(&d, train);
            skips.push(h.clone());
        }
        for (k, dec) in self.decs.iter_mut().enumerate() {
            let skip = &skips[self.cfg.encoder_stages - 2 - k];
            let up = dec.up.forward(&h, train);
            h = dec.fuse.forward(&concat_channels(&up, skip), train);
        }
        let h = self.head.forward(&h, train);
        self.out_act.forward(&h, train)
    }

    fn backward(&mut self, grad_out: &Batch) -> Batch {
        let s = self.cfg.encoder_stages;
        let g = self.out_act.backward(grad_out);
        let mut g = self.head.backward(&g);

        let mut skip_grads: Vec<Option<Batch>> = vec![None; s];
        for (k, dec) in self.decs.iter_mut().enumerate().rev() {
            let g_cat = dec.fuse.backward(&g);
            let g_up = g_cat
                .slice(ndarray::s![.., ..dec.up_channels, .., ..])
                .to_owned();
            let g_skip = g_cat
                .slice(ndarray::s![.., dec.up_channels.., .., ..])
                .to_owned();
            let idx = s - 2 - k;
            skip_grads[idx] = Some(match skip_grads[idx].take() {
                Some(acc) => acc + &g_skip,
                None => g_skip,
            });
            g = dec.up.backward(&g_up);
        }

        // g is now the gradient at the deepest encoder output.
        for i in (1..s).rev() {
            if let Some(sg) = skip_grads[i].take() {
                g = g + &sg;
            }
            let gb = self.blocks[i - 1].backward(&g);
            g = self.downs[i - 1].backward(&gb);
        }
        if let Some(sg) = skip_grads[0].take() {
            g = g + &sg;
        }
        let g = self.stem_block.backward(&g);
        self.stem.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot)) {
        self.stem.visit(prefix, f);
        self.stem_block.visit(prefix, f);
        for (down, block) in self.downs.iter_mut().zip(self.blocks.iter_mut()) {
            down.visit(prefix, f);
            block.visit(prefix, f);
        }
        for dec in &mut self.decs {
            dec.fuse.visit(prefix, f);
        }
        self.head.visit(prefix, f);
    }
}
