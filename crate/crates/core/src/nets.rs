//! Generator (five-scale U-Net built from residual or plain blocks) and
//! PatchGAN discriminator.
//!
//! The same generator serves grain synthesis (`clean + level map → grainy`),
//! non-blind removal (`grainy + level map → clean`) and blind removal
//! (`grainy → clean`); only the input channel count changes.

use serde::{Deserialize, Serialize};

use crate::dataset::LevelMap;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, join, Act, ActKind, BatchNorm2d, Conv2d, Param, Params, Tensor};

pub const SCALES: usize = 5;
const INIT_STD: f32 = 0.02;
const SKIP_EPS: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// BN → ReLU → conv → BN → ReLU → conv, plus a shortcut (1×1 conv when
    /// the channel count changes).
    #[default]
    Residual,
    /// conv → BN → ReLU → conv → BN → ReLU, no shortcut.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub scales: usize,
    pub base_width: usize,
    pub conditioned: bool,
    #[serde(default)]
    pub block: BlockKind,
    #[serde(default = "one")]
    pub blocks_per_scale: usize,
    /// Adds the input image (in logit space) to the output before the final
    /// sigmoid, so the network predicts a residual.
    #[serde(default)]
    pub global_skip: bool,
    /// Inference normalizes every image with its own feature statistics,
    /// as in training with batch size 1, rather than running averages.
    #[serde(default)]
    pub inference_batch_stats: bool,
}

fn one() -> usize {
    1
}

impl GeneratorConfig {
    /// Image channels `channels`, optionally conditioned on a level map.
    pub fn new(channels: usize, conditioned: bool, base_width: usize) -> Self {
        Self {
            in_channels: channels + conditioned as usize,
            out_channels: channels,
            scales: SCALES,
            base_width,
            conditioned,
            block: BlockKind::Residual,
            blocks_per_scale: 1,
            global_skip: false,
            inference_batch_stats: false,
        }
    }

    pub fn synthesis(channels: usize, base_width: usize) -> Self {
        Self::new(channels, true, base_width)
    }

    pub fn removal(channels: usize, blind: bool, base_width: usize) -> Self {
        Self::new(channels, !blind, base_width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales != SCALES {
            return Err(Error::Param(format!("generator must have {SCALES} scales")));
        }
        if self.base_width < 8 {
            return Err(Error::Param("base_width must be >= 8".into()));
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return Err(Error::Param("out_channels must be 1 or 3".into()));
        }
        if self.in_channels != self.out_channels + self.conditioned as usize {
            return Err(Error::Param(format!(
                "in_channels {} inconsistent with {} image channels (conditioned: {})",
                self.in_channels, self.out_channels, self.conditioned
            )));
        }
        if self.blocks_per_scale == 0 {
            return Err(Error::Param("blocks_per_scale must be >= 1".into()));
        }
        Ok(())
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    kind: BlockKind,
    bn1: BatchNorm2d,
    act1: Act,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    act2: Act,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Block {
    pub fn new(kind: BlockKind, in_c: usize, out_c: usize) -> Self {
        let (bn1_c, shortcut) = match kind {
            BlockKind::Residual => (
                in_c,
                (in_c != out_c).then(|| Conv2d::new(in_c, out_c, 1, 1, 0)),
            ),
            BlockKind::Plain => (out_c, None),
        };
        Self {
            kind,
            bn1: BatchNorm2d::new(bn1_c),
            act1: Act::new(ActKind::Relu),
            conv1: Conv2d::new(in_c, out_c, 3, 1, 1),
            bn2: BatchNorm2d::new(out_c),
            act2: Act::new(ActKind::Relu),
            conv2: Conv2d::new(out_c, out_c, 3, 1, 1),
            shortcut,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self.kind {
            BlockKind::Residual => {
                let h = self.conv1.apply(&self.act1.apply(&self.bn1.apply(x)));
                let h = self.conv2.apply(&self.act2.apply(&self.bn2.apply(&h)));
                match &self.shortcut {
                    Some(sc) => h.add(&sc.apply(x)),
                    None => h.add(x),
                }
            }
            BlockKind::Plain => {
                let h = self.act1.apply(&self.bn1.apply(&self.conv1.apply(x)));
                self.act2.apply(&self.bn2.apply(&self.conv2.apply(&h)))
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        match self.kind {
            BlockKind::Residual => {
                let h = self.bn1.forward(x);
                let h = self.act1.forward(&h);
                let h = self.conv1.forward(&h);
                let h = self.bn2.forward(&h);
                let h = self.act2.forward(&h);
                let h = self.conv2.forward(&h);
                match &mut self.shortcut {
                    Some(sc) => h.add(&sc.forward(x)),
                    None => h.add(x),
                }
            }
            BlockKind::Plain => {
                let h = self.conv1.forward(x);
                let h = self.bn1.forward(&h);
                let h = self.act1.forward(&h);
                let h = self.conv2.forward(&h);
                let h = self.bn2.forward(&h);
                self.act2.forward(&h)
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        match self.kind {
            BlockKind::Residual => {
                let m = self.conv2.backward(g);
                let m = self.act2.backward(&m);
                let m = self.bn2.backward(&m);
                let m = self.conv1.backward(&m);
                let m = self.act1.backward(&m);
                let m = self.bn1.backward(&m);
                match &mut self.shortcut {
                    Some(sc) => m.add(&sc.backward(g)),
                    None => m.add(g),
                }
            }
            BlockKind::Plain => {
                let m = self.act2.backward(g);
                let m = self.bn2.backward(&m);
                let m = self.conv2.backward(&m);
                let m = self.act1.backward(&m);
                let m = self.bn1.backward(&m);
                self.conv1.backward(&m)
            }
        }
    }
}

impl Params for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// A sequence of blocks at one scale.
#[derive(Clone, Debug)]
struct Stage(Vec<Block>);

impl Stage {
    fn new(kind: BlockKind, in_c: usize, out_c: usize, count: usize) -> Self {
        Stage(
            (0..count)
                .map(|i| Block::new(kind, if i == 0 { in_c } else { out_c }, out_c))
                .collect(),
        )
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.0.iter().fold(x.clone(), |h, b| b.apply(&h))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.0.iter_mut().fold(x.clone(), |h, b| b.forward(&h))
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.0
            .iter_mut()
            .rev()
            .fold(g.clone(), |h, b| b.backward(&h))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.0.iter().enumerate() {
            b.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.0.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Generator parameters (synthesis `Φ`, non-blind removal `θ1`, blind
/// removal `θ2`) together with their architecture.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    head: Conv2d,
    encoders: Vec<Stage>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    decoders: Vec<Stage>,
    tail_act: Act,
    tail: Conv2d,
    out_act: Act,
}

fn logit_of_image_channels(x: &Tensor, channels: usize) -> Tensor {
    let (img, _) = x.split_channels(channels);
    img.map(|v| {
        let v = v.clamp(SKIP_EPS, 1.0 - SKIP_EPS);
        (v / (1.0 - v)).ln()
    })
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let w = |s| config.width(s);
        let kind = config.block;
        let n = config.blocks_per_scale;
        let mut gen = Self {
            head: Conv2d::new(config.in_channels, w(0), 3, 1, 1),
            encoders: (0..config.scales)
                .map(|s| Stage::new(kind, w(s), w(s), n))
                .collect(),
            downs: (0..config.scales - 1)
                .map(|s| Conv2d::new(w(s), w(s + 1), 3, 2, 1))
                .collect(),
            ups: (0..config.scales - 1)
                .map(|s| Conv2d::new(w(s + 1), w(s), 3, 1, 1))
                .collect(),
            decoders: (0..config.scales - 1)
                .map(|s| Stage::new(kind, 2 * w(s), w(s), n))
                .collect(),
            tail_act: Act::new(ActKind::Relu),
            tail: Conv2d::new(w(0), config.out_channels, 3, 1, 1),
            out_act: Act::new(ActKind::Sigmoid),
            config,
        };
        let batch_stats = gen.config.inference_batch_stats;
        for stage in gen.encoders.iter_mut().chain(gen.decoders.iter_mut()) {
            for b in &mut stage.0 {
                b.bn1.inference_batch_stats = batch_stats;
                b.bn2.inference_batch_stats = batch_stats;
            }
        }
        Ok(gen)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.config.in_channels {
            return Err(Error::Contract(format!(
                "generator expects {} input channels, got {}",
                self.config.in_channels,
                x.c()
            )));
        }
        let m = self.config.size_multiple();
        if !x.h().is_multiple_of(m) || !x.w().is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "spatial size {}x{} not divisible by {m}",
                x.h(),
                x.w()
            )));
        }
        Ok(())
    }

    /// Inference-mode evaluation. With `zero_bottleneck`, the deepest
    /// feature map is replaced by zeros before decoding.
    pub fn apply_with(&self, x: &Tensor, zero_bottleneck: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.config.scales - 1;
        let mut skips = Vec::with_capacity(last);
        let mut h = self.head.apply(x);
        for s in 0..last {
            h = self.encoders[s].apply(&h);
            skips.push(h.clone());
            h = self.downs[s].apply(&h);
        }
        h = self.encoders[last].apply(&h);
        if zero_bottleneck {
            h = h.map(|_| 0.0);
        }
        for s in (0..last).rev() {
            let up = self.ups[s].apply(&nn::upsample2(&h));
            h = self.decoders[s].apply(&Tensor::concat_channels(&up, &skips[s])?);
        }
        let mut t = self.tail.apply(&self.tail_act.apply(&h));
        if self.config.global_skip {
            t = t.add(&logit_of_image_channels(x, self.config.out_channels));
        }
        Ok(self.out_act.apply(&t))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_with(x, false)
    }

    /// Training-mode forward pass (batch statistics, cached activations).
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.config.scales - 1;
        let mut skips = Vec::with_capacity(last);
        let mut h = self.head.forward(x);
        for s in 0..last {
            h = self.encoders[s].forward(&h);
            skips.push(h.clone());
            h = self.downs[s].forward(&h);
        }
        h = self.encoders[last].forward(&h);
        for s in (0..last).rev() {
            let up = self.ups[s].forward(&nn::upsample2(&h));
            h = self.decoders[s].forward(&Tensor::concat_channels(&up, &skips[s])?);
        }
        let h = self.tail_act.forward(&h);
        let mut t = self.tail.forward(&h);
        if self.config.global_skip {
            t = t.add(&logit_of_image_channels(x, self.config.out_channels));
        }
        Ok(self.out_act.forward(&t))
    }

    /// Backpropagates `d loss / d output` through the last `forward`,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, g: &Tensor) {
        let last = self.config.scales - 1;
        let g = self.out_act.backward(g);
        let g = self.tail.backward(&g);
        let mut g = self.tail_act.backward(&g);
        let mut skip_grads = vec![None; last];
        for s in 0..last {
            let gc = self.decoders[s].backward(&g);
            let w = self.ups[s].out_c;
            let (gup, gskip) = gc.split_channels(w);
            skip_grads[s] = Some(gskip);
            g = nn::upsample2_backward(&self.ups[s].backward(&gup));
        }
        g = self.encoders[last].backward(&g);
        for s in (0..last).rev() {
            g = self.downs[s].backward(&g);
            g = g.add(skip_grads[s].as_ref().expect("skip gradient"));
            g = self.encoders[s].backward(&g);
        }
        self.head.backward(&g);
    }
}

impl Params for Generator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.head.visit(&join(prefix, "head"), f);
        for (s, st) in self.encoders.iter().enumerate() {
            st.visit(&join(prefix, &format!("enc{s}")), f);
        }
        for (s, c) in self.downs.iter().enumerate() {
            c.visit(&join(prefix, &format!("down{s}")), f);
        }
        for (s, c) in self.ups.iter().enumerate() {
            c.visit(&join(prefix, &format!("up{s}")), f);
        }
        for (s, st) in self.decoders.iter().enumerate() {
            st.visit(&join(prefix, &format!("dec{s}")), f);
        }
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        for (s, st) in self.encoders.iter_mut().enumerate() {
            st.visit_mut(&join(prefix, &format!("enc{s}")), f);
        }
        for (s, c) in self.downs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("down{s}")), f);
        }
        for (s, c) in self.ups.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("up{s}")), f);
        }
        for (s, st) in self.decoders.iter_mut().enumerate() {
            st.visit_mut(&join(prefix, &format!("dec{s}")), f);
        }
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}

/// Builds a generator with convolution weights drawn from `N(0, 0.02)`.
pub fn init_generator(config: GeneratorConfig, seed: u64) -> Result<Generator> {
    let mut g = Generator::new(config)?;
    nn::init_normal(&mut g, seed, INIT_STD);
    Ok(g)
}

/// Packs images (and optional level maps) into an NCHW batch.
pub fn batch_tensor(images: &[&Image], levels: Option<&[f32]>) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w, c) = first.dims();
    let extra = levels.is_some() as usize;
    let mut data = Vec::with_capacity(images.len() * (c + extra) * h * w);
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (h, w, c) {
            return Err(Error::Shape("batch images differ in shape".into()));
        }
        for plane in img.planes() {
            data.extend(plane);
        }
        if let Some(lv) = levels {
            data.extend(std::iter::repeat_n(lv[i], h * w));
        }
    }
    Tensor::from_vec([images.len(), c + extra, h, w], data)
}

/// Splits an NCHW batch back into images.
pub fn tensor_images(t: &Tensor) -> Result<Vec<Image>> {
    let [n, c, h, w] = t.shape();
    (0..n)
        .map(|i| {
            let s = t.sample(i);
            let planes: Vec<Vec<f32>> = s.chunks(h * w).map(|p| p.to_vec()).collect();
            debug_assert_eq!(planes.len(), c);
            Image::from_planes(h, w, &planes)
        })
        .collect()
}

/// Runs the generator on one image in inference mode. A level map is
/// required exactly when the generator is conditioned.
pub fn generator_forward(gen: &Generator, img: &Image, level: Option<&LevelMap>) -> Result<Image> {
    match (gen.config.conditioned, level) {
        (true, None) => {
            return Err(Error::Contract(
                "conditioned generator needs a level map".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::Contract(
                "unconditioned generator takes no level map".into(),
            ))
        }
        _ => {}
    }
    if img.channels() != gen.config.out_channels {
        return Err(Error::Contract(format!(
            "generator expects {}-channel images, got {}",
            gen.config.out_channels,
            img.channels()
        )));
    }
    if let Some(l) = level {
        if (l.height(), l.width()) != (img.height(), img.width()) {
            return Err(Error::Shape("level map size differs from image".into()));
        }
    }
    let lv = level.map(|l| vec![l.level()]);
    let x = batch_tensor(&[img], lv.as_deref())?;
    let y = gen.apply(&x)?;
    Ok(tensor_images(&y)?.remove(0))
}

// --- discriminator ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// `2·C + 1`: clean image, candidate image, level map.
    pub in_channels: usize,
    pub base_width: usize,
}

impl DiscriminatorConfig {
    pub fn new(image_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels: 2 * image_channels + 1,
            base_width,
        }
    }

    /// `(kernel, stride, padding)` of each convolution, head included.
    pub fn layers(&self) -> [(usize, usize, usize); 5] {
        [(4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1)]
    }

    pub fn image_channels(&self) -> usize {
        (self.in_channels - 1) / 2
    }

    /// Side of the score map for a square `size` input.
    pub fn output_size(&self, size: usize) -> usize {
        self.layers()
            .iter()
            .fold(size, |s, &(k, st, p)| (s + 2 * p - k) / st + 1)
    }
}

/// Receptive field, in input pixels, of one score of the stack.
pub fn receptive_field(layers: &[(usize, usize, usize)]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1, |rf, &(k, s, _)| (rf - 1) * s + k)
}

/// Real-valued (pre-sigmoid) patch scores, shape `[N, 1, n, n]`.
pub type PatchScoreMap = Tensor;

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    act: Act,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    blocks: Vec<DiscBlock>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Self {
        let layers = config.layers();
        let mut blocks = Vec::with_capacity(4);
        let mut in_c = config.in_channels;
        for (i, &(k, s, p)) in layers[..4].iter().enumerate() {
            let out_c = config.base_width << i;
            blocks.push(DiscBlock {
                conv: Conv2d::new(in_c, out_c, k, s, p),
                bn: (i > 0).then(|| BatchNorm2d::new(out_c)),
                act: Act::new(ActKind::LeakyRelu(0.2)),
            });
            in_c = out_c;
        }
        let (k, s, p) = layers[4];
        Self {
            head: Conv2d::new(in_c, 1, k, s, p),
            blocks,
            config,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.config.in_channels {
            return Err(Error::Contract(format!(
                "discriminator expects {} channels, got {}",
                self.config.in_channels,
                x.c()
            )));
        }
        if self.config.output_size(x.h().min(x.w())) == 0 || x.h().min(x.w()) < 24 {
            return Err(Error::Shape("discriminator input smaller than 24px".into()));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<PatchScoreMap> {
        self.check(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.conv.apply(&h);
            if let Some(bn) = &b.bn {
                h = bn.apply(&h);
            }
            h = b.act.apply(&h);
        }
        Ok(self.head.apply(&h))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<PatchScoreMap> {
        self.check(x)?;
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.conv.forward(&h);
            if let Some(bn) = &mut b.bn {
                h = bn.forward(&h);
            }
            h = b.act.forward(&h);
        }
        Ok(self.head.forward(&h))
    }

    /// Returns the gradient with respect to the discriminator input.
    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut g = self.head.backward(g);
        for b in self.blocks.iter_mut().rev() {
            g = b.act.backward(&g);
            if let Some(bn) = &mut b.bn {
                g = bn.backward(&g);
            }
            g = b.conv.backward(&g);
        }
        g
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.config.layers())
    }
}

impl Params for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("block{i}.conv")), f);
            if let Some(bn) = &b.bn {
                bn.visit(&join(prefix, &format!("block{i}.bn")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv
                .visit_mut(&join(prefix, &format!("block{i}.conv")), f);
            if let Some(bn) = &mut b.bn {
                bn.visit_mut(&join(prefix, &format!("block{i}.bn")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn init_discriminator(config: DiscriminatorConfig, seed: u64) -> Discriminator {
    let mut d = Discriminator::new(config);
    nn::init_normal(&mut d, seed, INIT_STD);
    d
}

/// Discriminator input: clean image, candidate image, level map.
pub fn discriminator_input(clean: &Tensor, candidate: &Tensor, levels: &[f32]) -> Result<Tensor> {
    let [n, _, h, w] = clean.shape();
    if candidate.shape() != clean.shape() {
        return Err(Error::Contract(format!(
            "clean {:?} and candidate {:?} differ",
            clean.shape(),
            candidate.shape()
        )));
    }
    if levels.len() != n {
        return Err(Error::Contract(
            "one level per batch sample required".into(),
        ));
    }
    let mut lv = Vec::with_capacity(n * h * w);
    for &l in levels {
        lv.extend(std::iter::repeat_n(l, h * w));
    }
    let lv = Tensor::from_vec([n, 1, h, w], lv)?;
    Tensor::concat_channels(&Tensor::concat_channels(clean, candidate)?, &lv)
}

/// Scores `candidate` (ground truth or generated) against `clean` under `level`.
pub fn discriminator_forward(
    disc: &Discriminator,
    clean: &Image,
    candidate: &Image,
    level: &LevelMap,
) -> Result<PatchScoreMap> {
    if !clean.same_shape(candidate)
        || (level.height(), level.width()) != (clean.height(), clean.width())
    {
        return Err(Error::Contract(
            "discriminator inputs differ in shape".into(),
        ));
    }
    let c = batch_tensor(&[clean], None)?;
    let y = batch_tensor(&[candidate], None)?;
    disc.apply(&discriminator_input(&c, &y, &[level.level()])?)
}
