//! Training loops for grain synthesis (conditional GAN) and grain removal
//! (supervised, blind or non-blind), model application and ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, make_level_map, DatasetManifest, PairedSample, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{self, RemovalLossConfig, SynthesisLossConfig};
use crate::metrics::{self, MetricReport, MetricRow, NssConfig};
use crate::nets::{
    self, BlockKind, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::nn::{Adam, AdamConfig, Params, Tensor};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Synthesis,
    Removal,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Synthesis => "synthesis",
            Task::Removal => "removal",
        })
    }
}

/// Removal training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalObjective {
    /// MS-SSIM / Gaussian-weighted L1 mix.
    #[default]
    Mix,
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    /// Removal only: no level map input.
    pub blind: bool,
    pub image_channels: usize,
    pub base_width: usize,
    pub block: BlockKind,
    pub blocks_per_scale: usize,
    pub global_skip: bool,
    /// Per-image normalization statistics at inference (batch-size-1 style).
    pub inference_batch_stats: bool,
    /// Synthesis only: train against a PatchGAN discriminator.
    pub use_discriminator: bool,
    pub disc_base_width: usize,
    pub removal_objective: RemovalObjective,
    pub lr_generator: f32,
    pub lr_discriminator: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub synthesis_loss: SynthesisLossConfig,
    pub removal_loss: RemovalLossConfig,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Grain levels to train on; empty means every level in the dataset.
    pub levels: Vec<f64>,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_task(Task::Synthesis, false)
    }
}

impl TrainConfig {
    pub fn for_task(task: Task, blind: bool) -> Self {
        let synthesis = task == Task::Synthesis;
        Self {
            task,
            blind: blind && !synthesis,
            image_channels: 3,
            base_width: 64,
            block: BlockKind::Residual,
            blocks_per_scale: 1,
            global_skip: synthesis,
            inference_batch_stats: synthesis,
            use_discriminator: synthesis,
            disc_base_width: 64,
            removal_objective: RemovalObjective::Mix,
            lr_generator: 3e-4,
            lr_discriminator: 1e-4,
            batch_size: if synthesis { 1 } else { 16 },
            epochs: 200,
            seed: 0,
            synthesis_loss: SynthesisLossConfig::default(),
            removal_loss: RemovalLossConfig::default(),
            adam_beta1: if synthesis { 0.5 } else { 0.9 },
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            levels: Vec::new(),
            checkpoint_every: 0,
        }
    }

    /// Parses JSON on top of the defaults of the task (and blind flag) it
    /// names.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let task: Task = match value.get("task") {
            Some(t) => serde_json::from_value(t.clone())?,
            None => Task::default(),
        };
        let blind = value
            .get("blind")
            .and_then(|b| b.as_bool())
            .unwrap_or(false);
        let mut base = serde_json::to_value(Self::for_task(task, blind))?;
        merge_json(&mut base, value);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return Err(Error::Param("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        if self.blind && self.task == Task::Synthesis {
            return Err(Error::Param("blind applies to removal only".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Param("Adam betas must lie in [0, 1)".into()));
        }
        self.synthesis_loss.validate()?;
        self.removal_loss.validate()?;
        self.generator_config().validate()
    }

    pub fn conditioned(&self) -> bool {
        match self.task {
            Task::Synthesis => true,
            Task::Removal => !self.blind,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = GeneratorConfig::new(self.image_channels, self.conditioned(), self.base_width);
        g.block = self.block;
        g.blocks_per_scale = self.blocks_per_scale;
        g.global_skip = self.global_skip;
        g.inference_batch_stats = self.inference_batch_stats;
        g
    }

    pub fn discriminator_config(&self) -> Option<DiscriminatorConfig> {
        (self.task == Task::Synthesis && self.use_discriminator)
            .then(|| DiscriminatorConfig::new(self.image_channels, self.disc_base_width))
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// The reduced configuration of an ablation study.
    ///
    /// Synthesis: 1 = plain U-Net trained with L1 only, 2 = adds the
    /// PatchGAN discriminator, 3 = residual blocks as well.
    /// Removal: 1 = plain U-Net with L1, 2 = residual blocks, 3 = MS-SSIM mix
    /// loss as well.
    pub fn ablation(&self, id: u8) -> Result<Self> {
        let mut c = self.clone();
        match (self.task, id) {
            (Task::Synthesis, 1) => {
                c.block = BlockKind::Plain;
                c.use_discriminator = false;
            }
            (Task::Synthesis, 2) => {
                c.block = BlockKind::Plain;
                c.use_discriminator = true;
            }
            (Task::Synthesis, 3) => {
                c.block = BlockKind::Residual;
                c.use_discriminator = true;
            }
            (Task::Removal, 1) => {
                c.block = BlockKind::Plain;
                c.removal_objective = RemovalObjective::L1;
            }
            (Task::Removal, 2) => {
                c.block = BlockKind::Residual;
                c.removal_objective = RemovalObjective::L1;
            }
            (Task::Removal, 3) => {
                c.block = BlockKind::Residual;
                c.removal_objective = RemovalObjective::Mix;
            }
            _ => {
                return Err(Error::Param(format!(
                    "unknown ablation config {id} (expected 1, 2 or 3)"
                )))
            }
        }
        Ok(c)
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// In-memory training and validation samples.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
}

impl TrainData {
    /// Loads the train and validation splits, keeping only `levels` when
    /// non-empty.
    pub fn from_manifest(manifest: &DatasetManifest, levels: &[f64]) -> Result<Self> {
        let m = if levels.is_empty() {
            manifest.clone()
        } else {
            manifest.with_levels(levels)
        };
        let data = Self {
            train: m.load_split(Split::Train)?,
            val: m.load_split(Split::Val)?,
        };
        if data.train.is_empty() {
            return Err(Error::Dataset(
                "no training samples for the requested levels".into(),
            ));
        }
        Ok(data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub epoch: usize,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub l1: f64,
    /// Value of the generator objective being minimized.
    pub objective: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub steps: u64,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub l1: f64,
    pub objective: f64,
    /// Held-out PSNR of the model output against its target.
    pub val_psnr: Option<f64>,
    /// Held-out PSNR of the untouched input against the same target.
    pub val_psnr_input: Option<f64>,
    pub val_ms_ssim: Option<f64>,
    pub val_objective: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,d_loss,g_loss,l1,objective,psnr,ms_ssim\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                opt(r.d_loss),
                opt(r.g_loss),
                r.l1,
                r.objective,
                r.psnr,
                r.ms_ssim
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(
            "epoch,steps,d_loss,g_loss,l1,objective,val_psnr,val_psnr_input,val_ms_ssim,val_objective\n",
        );
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.steps,
                opt(r.d_loss),
                opt(r.g_loss),
                r.l1,
                r.objective,
                opt(r.val_psnr),
                opt(r.val_psnr_input),
                opt(r.val_ms_ssim),
                opt(r.val_objective)
            );
        }
        s
    }

    /// Writes `train_steps.csv` and `train_epochs.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("train_steps.csv", self.steps_csv()),
            ("train_epochs.csv", self.epochs_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where periodic, final and diagnostic checkpoints go.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// A batch in tensor form.
struct Batch {
    clean: Tensor,
    grainy: Tensor,
    levels: Vec<f32>,
}

impl Batch {
    fn new(samples: &[&PairedSample]) -> Result<Self> {
        let clean: Vec<&Image> = samples.iter().map(|s| &s.clean).collect();
        let grainy: Vec<&Image> = samples.iter().map(|s| &s.grainy).collect();
        Ok(Self {
            clean: nets::batch_tensor(&clean, None)?,
            grainy: nets::batch_tensor(&grainy, None)?,
            levels: samples.iter().map(|s| s.level()).collect(),
        })
    }

    fn with_levels(&self, t: &Tensor) -> Result<Tensor> {
        let [n, _, h, w] = t.shape();
        let mut lv = Vec::with_capacity(n * h * w);
        for &l in &self.levels {
            lv.extend(std::iter::repeat_n(l, h * w));
        }
        Tensor::concat_channels(t, &Tensor::from_vec([n, 1, h, w], lv)?)
    }
}

fn batch_psnr(target: &[crate::filter::Plane], out: &[crate::filter::Plane]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (a, b) in target.iter().zip(out) {
        se += a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        n += a.data.len();
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    gen: Generator,
    disc: Option<Discriminator>,
    g_opt: Adam,
    d_opt: Option<Adam>,
    epoch: usize,
    step: u64,
    out_dir: Option<PathBuf>,
}

struct StepLosses {
    d_loss: Option<f64>,
    g_loss: Option<f64>,
    l1: f64,
    objective: f64,
    psnr: f64,
    ms_ssim: f64,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainData, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        if let Some(s) = data.train.first() {
            if s.clean.channels() != cfg.image_channels {
                return Err(Error::Contract(format!(
                    "dataset has {}-channel images, config expects {}",
                    s.clean.channels(),
                    cfg.image_channels
                )));
            }
        }
        let (gen, disc, g_opt, d_opt, epoch, step) = match opts.resume {
            Some(ck) => {
                if ck.generator.config != cfg.generator_config()
                    || ck.discriminator.as_ref().map(|d| d.config.clone())
                        != cfg.discriminator_config()
                {
                    return Err(Error::Checkpoint(
                        "architecture mismatch between checkpoint and config".into(),
                    ));
                }
                (
                    ck.generator,
                    ck.discriminator,
                    ck.g_opt,
                    ck.d_opt,
                    ck.epoch,
                    ck.step,
                )
            }
            None => {
                let gen = nets::init_generator(cfg.generator_config(), rng::key(cfg.seed, &[1]))?;
                let disc = cfg
                    .discriminator_config()
                    .map(|d| nets::init_discriminator(d, rng::key(cfg.seed, &[2])));
                let d_opt = disc
                    .as_ref()
                    .map(|_| Adam::new(cfg.adam(cfg.lr_discriminator)));
                (
                    gen,
                    disc,
                    Adam::new(cfg.adam(cfg.lr_generator)),
                    d_opt,
                    0,
                    0,
                )
            }
        };
        Ok(Self {
            cfg,
            data,
            gen,
            disc,
            g_opt,
            d_opt,
            epoch,
            step,
            out_dir: opts.out_dir,
        })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            generator: self.gen.clone(),
            discriminator: self.disc.clone(),
            g_opt: self.g_opt.clone(),
            d_opt: self.d_opt.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    fn save(&self, name: &str) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            Some(dir) => {
                let p = dir.join(name);
                self.checkpoint().save(&p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }

    fn numeric_failure(&self, what: &str) -> Error {
        let dump = match self.save("diagnostic.safetensors") {
            Ok(Some(p)) => format!("; state dumped to {}", p.display()),
            Ok(None) => String::new(),
            Err(e) => format!("; diagnostic dump failed: {e}"),
        };
        Error::Numeric(format!(
            "{what} at epoch {} step {}{dump}",
            self.epoch + 1,
            self.step + 1
        ))
    }

    fn generator_input(&self, b: &Batch) -> Result<Tensor> {
        let base = match self.cfg.task {
            Task::Synthesis => &b.clean,
            Task::Removal => &b.grainy,
        };
        if self.cfg.conditioned() {
            b.with_levels(base)
        } else {
            Ok(base.clone())
        }
    }

    fn target<'b>(&self, b: &'b Batch) -> &'b Tensor {
        match self.cfg.task {
            Task::Synthesis => &b.grainy,
            Task::Removal => &b.clean,
        }
    }

    fn train_step(&mut self, b: &Batch) -> Result<StepLosses> {
        let input = self.generator_input(b)?;
        let out = self.gen.forward(&input)?;
        let target_planes = losses::tensor_planes(self.target(b));
        let out_planes = losses::tensor_planes(&out);
        let (l1, l1_grad) = losses::l1_loss_grad(&target_planes, &out_planes)?;
        let shape = out.shape();
        let (d_loss, g_loss, objective, grad) = match self.cfg.task {
            Task::Synthesis => match (&mut self.disc, &mut self.d_opt) {
                (Some(disc), Some(d_opt)) => {
                    let real_in = nets::discriminator_input(&b.clean, &b.grainy, &b.levels)?;
                    let fake_in = nets::discriminator_input(&b.clean, &out, &b.levels)?;
                    disc.zero_grad();
                    let r = disc.forward(&real_in)?;
                    let (lr, gr) = losses::bce_with_logits(&r, true);
                    disc.backward(&gr.scale(0.5));
                    let f = disc.forward(&fake_in)?;
                    let (lf, gf) = losses::bce_with_logits(&f, false);
                    disc.backward(&gf.scale(0.5));
                    d_opt.step(disc);
                    disc.zero_grad();

                    let f = disc.forward(&fake_in)?;
                    let (g_loss, gg) = losses::bce_with_logits(&f, true);
                    let gin = disc.backward(&gg);
                    disc.zero_grad();
                    let c = self.cfg.image_channels;
                    let (_, rest) = gin.split_channels(c);
                    let (adv_grad, _) = rest.split_channels(c);
                    let lambda = self.cfg.synthesis_loss.lambda_l1;
                    let l1_t = losses::planes_tensor(shape, &l1_grad)?;
                    let grad = adv_grad.add(&l1_t.scale(lambda as f32));
                    let objective =
                        losses::synthesis_objective(g_loss, l1, &self.cfg.synthesis_loss);
                    (Some(0.5 * (lr + lf)), Some(g_loss), objective, grad)
                }
                _ => (None, None, l1, losses::planes_tensor(shape, &l1_grad)?),
            },
            Task::Removal => {
                let (value, grad) = match self.cfg.removal_objective {
                    RemovalObjective::Mix => losses::removal_mix_loss_grad(
                        &target_planes,
                        &out_planes,
                        &self.cfg.removal_loss,
                    )?,
                    RemovalObjective::L1 => (l1, l1_grad),
                };
                (
                    None,
                    Some(value),
                    value,
                    losses::planes_tensor(shape, &grad)?,
                )
            }
        };
        if !objective.is_finite() || !grad.is_finite() {
            return Err(self.numeric_failure("non-finite loss"));
        }
        self.gen.backward(&grad);
        self.g_opt.step(&mut self.gen);
        self.gen.zero_grad();
        if !self.gen.all_finite() || !self.disc.as_ref().is_none_or(|d| d.all_finite()) {
            return Err(self.numeric_failure("non-finite parameters"));
        }
        let ms_ssim = losses::ms_ssim(&target_planes, &out_planes, &self.cfg.removal_loss)?;
        Ok(StepLosses {
            d_loss,
            g_loss,
            l1,
            objective,
            psnr: batch_psnr(&target_planes, &out_planes),
            ms_ssim,
        })
    }

    /// Held-out PSNR (output and raw input vs target), MS-SSIM and objective.
    fn validate(&self) -> Result<Option<(f64, f64, f64, f64)>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        let (mut psnr, mut psnr_in, mut ms, mut obj) = (0.0, 0.0, 0.0, 0.0);
        let refs: Vec<&PairedSample> = self.data.val.iter().collect();
        for chunk in refs.chunks(16) {
            let b = Batch::new(chunk)?;
            let out = self.gen.apply(&self.generator_input(&b)?)?;
            let target = losses::tensor_planes(self.target(&b));
            let out_p = losses::tensor_planes(&out);
            let input_p = losses::tensor_planes(match self.cfg.task {
                Task::Synthesis => &b.clean,
                Task::Removal => &b.grainy,
            });
            let per = target.len() / chunk.len();
            for i in 0..chunk.len() {
                let r = i * per..(i + 1) * per;
                psnr += batch_psnr(&target[r.clone()], &out_p[r.clone()]);
                psnr_in += batch_psnr(&target[r.clone()], &input_p[r.clone()]);
                ms += losses::ms_ssim(
                    &target[r.clone()],
                    &out_p[r.clone()],
                    &self.cfg.removal_loss,
                )?;
                obj += match (self.cfg.task, self.cfg.removal_objective) {
                    (Task::Removal, RemovalObjective::Mix) => losses::removal_mix_loss(
                        &target[r.clone()],
                        &out_p[r],
                        &self.cfg.removal_loss,
                    )?,
                    _ => losses::l1_loss(&target[r.clone()], &out_p[r])?,
                };
            }
        }
        let n = self.data.val.len() as f64;
        Ok(Some((psnr / n, psnr_in / n, ms / n, obj / n)))
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let mut log = TrainLog::default();
        let n = self.data.train.len();
        let bs = self.cfg.batch_size.min(n).max(1);
        while self.epoch < self.cfg.epochs {
            let order = dataset::shuffled_indices(n, self.cfg.seed, self.epoch);
            // drop a ragged tail so batch statistics always see `bs` samples
            let usable = n - n % bs;
            let mut sums = (0.0, 0.0, 0.0, 0.0, 0u64);
            let (mut has_d, mut has_g) = (false, false);
            for chunk in order[..usable].chunks(bs) {
                let samples: Vec<&PairedSample> =
                    chunk.iter().map(|&i| &self.data.train[i]).collect();
                let batch = Batch::new(&samples)?;
                let s = self.train_step(&batch)?;
                self.step += 1;
                sums.0 += s.d_loss.unwrap_or(0.0);
                sums.1 += s.g_loss.unwrap_or(0.0);
                sums.2 += s.l1;
                sums.3 += s.objective;
                sums.4 += 1;
                has_d |= s.d_loss.is_some();
                has_g |= s.g_loss.is_some();
                log.steps.push(StepRow {
                    step: self.step,
                    epoch: self.epoch + 1,
                    d_loss: s.d_loss,
                    g_loss: s.g_loss,
                    l1: s.l1,
                    objective: s.objective,
                    psnr: s.psnr,
                    ms_ssim: s.ms_ssim,
                });
            }
            self.epoch += 1;
            let k = sums.4.max(1) as f64;
            let val = self.validate()?;
            let row = EpochRow {
                epoch: self.epoch,
                steps: sums.4,
                d_loss: has_d.then(|| sums.0 / k),
                g_loss: has_g.then(|| sums.1 / k),
                l1: sums.2 / k,
                objective: sums.3 / k,
                val_psnr: val.map(|v| v.0),
                val_psnr_input: val.map(|v| v.1),
                val_ms_ssim: val.map(|v| v.2),
                val_objective: val.map(|v| v.3),
            };
            log::info!(
                "epoch {}/{}: objective {:.5} l1 {:.5}{}",
                self.epoch,
                self.cfg.epochs,
                row.objective,
                row.l1,
                row.val_psnr
                    .map(|p| format!(
                        " val psnr {p:.2} dB (input {:.2})",
                        row.val_psnr_input.unwrap_or(0.0)
                    ))
                    .unwrap_or_default()
            );
            log.epochs.push(row);
            if self.cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(self.cfg.checkpoint_every)
            {
                self.save(&format!("epoch_{:04}.safetensors", self.epoch))?;
            }
        }
        self.save("final.safetensors")?;
        if let Some(dir) = &self.out_dir {
            log.write(dir)?;
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            log,
        })
    }
}

/// Trains (or resumes) the model described by `cfg` on in-memory data.
pub fn train(cfg: &TrainConfig, data: &TrainData, opts: RunOptions) -> Result<TrainOutcome> {
    Trainer::new(cfg, data, opts)?.run()
}

pub fn train_synthesis(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    if cfg.task != Task::Synthesis {
        return Err(Error::Param(
            "train_synthesis needs task = synthesis".into(),
        ));
    }
    train(cfg, &TrainData::from_manifest(manifest, &cfg.levels)?, opts)
}

pub fn train_removal(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    if cfg.task != Task::Removal {
        return Err(Error::Param("train_removal needs task = removal".into()));
    }
    train(cfg, &TrainData::from_manifest(manifest, &cfg.levels)?, opts)
}

/// Reflection-pads the bottom and right edges.
fn pad_reflect(img: &Image, h: usize, w: usize) -> Image {
    let (ih, iw, c) = img.dims();
    Image::from_fn(h, w, c, |y, x, ch| {
        let ry = crate::filter::reflect(y as isize, ih);
        let rx = crate::filter::reflect(x as isize, iw);
        img.get(ry, rx, ch)
    })
}

/// Runs a trained generator on an image of any size: pads to a multiple of
/// 16 by reflection, applies the model in inference mode, crops back.
pub fn apply_generator(gen: &Generator, img: &Image, level: Option<f64>) -> Result<Image> {
    match (gen.config.conditioned, level) {
        (true, None) => {
            return Err(Error::Contract(
                "this model is conditioned on a grain level; pass one".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(Error::Contract(
                "this model is blind; it takes no grain level".into(),
            ))
        }
        _ => {}
    }
    let m = gen.config.size_multiple();
    let (h, w, _) = img.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = if (ph, pw) == (h, w) {
        img.clone()
    } else {
        pad_reflect(img, ph, pw)
    };
    let map = level.map(|l| make_level_map(l, ph, pw)).transpose()?;
    let out = nets::generator_forward(gen, &padded, map.as_ref())?;
    if (ph, pw) == (h, w) {
        Ok(out)
    } else {
        out.crop(0, 0, h, w)
    }
}

pub fn apply_model(ckpt: &Checkpoint, img: &Image, level: Option<f64>) -> Result<Image> {
    apply_generator(&ckpt.generator, img, level)
}

/// Trains ablation configuration `id` and evaluates it on the validation
/// split. Removal outputs are scored against the clean images, synthesis
/// outputs against the ground-truth grainy images.
pub fn run_ablation(
    base: &TrainConfig,
    id: u8,
    data: &TrainData,
) -> Result<(MetricReport, TrainOutcome)> {
    let cfg = base.ablation(id)?;
    let outcome = train(&cfg, data, RunOptions::default())?;
    let report = evaluate_model(
        &outcome.checkpoint.generator,
        cfg.task,
        &data.val,
        &format!("{} config {id}", cfg.task),
        &cfg.removal_loss,
        &NssConfig::default(),
    )?;
    Ok((report, outcome))
}

/// Applies `gen` to every sample and scores the outputs.
pub fn evaluate_model(
    gen: &Generator,
    task: Task,
    samples: &[PairedSample],
    dataset: &str,
    loss_cfg: &RemovalLossConfig,
    nss: &NssConfig,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let level = gen.config.conditioned.then_some(s.level() as f64);
        let (input, target) = match task {
            Task::Synthesis => (&s.clean, &s.grainy),
            Task::Removal => (&s.grainy, &s.clean),
        };
        let out = apply_generator(gen, input, level)?;
        let m = metrics::evaluate_pair(target, &out, loss_cfg, nss)?;
        rows.push(MetricRow::new(
            dataset,
            Some(s.level() as f64),
            &format!("{i}"),
            m,
        ));
    }
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_grain, GrainParams};
    use crate::synth;

    fn toy_data(n: usize, size: usize, level: f64, seed: u64) -> TrainData {
        let make = |k: usize, s: u64| -> Vec<PairedSample> {
            synth::natural_images(k, size, size, 1, s)
                .into_iter()
                .enumerate()
                .map(|(i, clean)| {
                    let p = GrainParams {
                        mc_samples: 64,
                        ..GrainParams::default()
                            .with_level(level)
                            .with_seed(s + i as u64)
                    };
                    let grainy = render_grain(&clean, &p).unwrap();
                    PairedSample::new(clean, grainy, level).unwrap()
                })
                .collect()
        };
        TrainData {
            train: make(n, seed),
            val: make(2, seed + 1000),
        }
    }

    fn small(task: Task, blind: bool) -> TrainConfig {
        TrainConfig {
            image_channels: 1,
            base_width: 8,
            disc_base_width: 8,
            batch_size: 2,
            epochs: 2,
            ..TrainConfig::for_task(task, blind)
        }
    }

    #[test]
    fn defaults_follow_task() {
        let s = TrainConfig::for_task(Task::Synthesis, false);
        assert_eq!(
            (
                s.batch_size,
                s.adam_beta1,
                s.lr_generator,
                s.lr_discriminator
            ),
            (1, 0.5, 3e-4, 1e-4)
        );
        let r = TrainConfig::for_task(Task::Removal, true);
        assert_eq!((r.batch_size, r.adam_beta1, r.blind), (16, 0.9, true));
        assert!(s.global_skip && s.inference_batch_stats);
        assert!(!r.global_skip && !r.inference_batch_stats);
        assert_eq!(r.removal_loss.gamma, 0.84);
        assert_eq!(s.synthesis_loss.lambda_l1, 0.1);
        let j = TrainConfig::from_json(
            r#"{"task": "removal", "epochs": 3, "removal_loss": {"gamma": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(
            (
                j.batch_size,
                j.epochs,
                j.removal_loss.gamma,
                j.removal_loss.gaussian_size
            ),
            (16, 3, 0.5, 11)
        );
        assert!(TrainConfig::from_json(r#"{"task": "synthesis", "blind": true}"#).is_err());
        assert!(matches!(s.ablation(4), Err(Error::Param(_))));
    }

    #[test]
    fn overfits_eight_fixed_pairs() {
        let data = toy_data(8, 32, 0.05, 21);
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 200,
            removal_objective: RemovalObjective::L1,
            ..small(Task::Removal, true)
        };
        let log = train(&cfg, &data, RunOptions::default()).unwrap().log;
        assert_eq!(log.steps.len(), 200);
        let (first, last) = (log.steps[0].l1, log.steps[199].l1);
        assert!(last < first, "L1 went from {first} to {last}");
    }

    #[test]
    fn determinism_and_resume() {
        let data = toy_data(4, 32, 0.05, 1);
        let cfg = small(Task::Synthesis, false);
        let a = train(&cfg, &data, RunOptions::default()).unwrap();
        let b = train(&cfg, &data, RunOptions::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.log.steps.iter().all(|s| s.d_loss.is_some()));

        let one = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        let first = train(&one, &data, RunOptions::default()).unwrap();
        let bytes = first.checkpoint.to_bytes().unwrap();
        assert_eq!(bytes, first.checkpoint.to_bytes().unwrap());
        let restored = Checkpoint::from_bytes(&bytes).unwrap();
        let resumed = train(
            &cfg,
            &data,
            RunOptions {
                resume: Some(restored),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.log.epochs[0], a.log.epochs[1]);
        assert_eq!(resumed.log.steps[..], a.log.steps[a.log.steps.len() / 2..]);
    }

    #[test]
    fn checkpoint_rejects_other_architectures() {
        let data = toy_data(2, 32, 0.05, 2);
        let cfg = TrainConfig {
            epochs: 1,
            ..small(Task::Removal, true)
        };
        let out = train(&cfg, &data, RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.safetensors");
        out.checkpoint.save(&p).unwrap();
        let ck = Checkpoint::load(&p).unwrap();
        assert_eq!(ck.epoch, 1);
        let mut other = cfg.generator_config();
        other.base_width = 16;
        assert!(matches!(
            Checkpoint::load_expecting(&p, &other),
            Err(Error::Checkpoint(_))
        ));
        let wider = TrainConfig {
            base_width: 16,
            ..cfg
        };
        let res = train(
            &wider,
            &data,
            RunOptions {
                resume: Some(ck),
                ..Default::default()
            },
        );
        assert!(matches!(res, Err(Error::Checkpoint(_))));
    }

    #[test]
    fn apply_pads_and_checks_level() {
        let gen = nets::init_generator(small(Task::Removal, false).generator_config(), 3).unwrap();
        let img = synth::natural_image(21, 37, 1, 4);
        let out = apply_generator(&gen, &img, Some(0.05)).unwrap();
        assert_eq!(out.dims(), (21, 37, 1));
        assert!(matches!(
            apply_generator(&gen, &img, None),
            Err(Error::Contract(_))
        ));
        let blind = nets::init_generator(small(Task::Removal, true).generator_config(), 3).unwrap();
        assert!(matches!(
            apply_generator(&blind, &img, Some(0.05)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nan_aborts_with_diagnostic_dump() {
        let data = toy_data(2, 32, 0.05, 3);
        let cfg = TrainConfig {
            lr_generator: f32::MAX,
            epochs: 3,
            ..small(Task::Removal, true)
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(
            &cfg,
            &data,
            RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                resume: None,
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(dir.path().join("diagnostic.safetensors").is_file());
    }
}
