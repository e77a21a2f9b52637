//! Command-line interface: render, build-dataset, train, apply, eval,
//! ablation and gen-corpus. The binary in `grainkit-cli` is a thin wrapper
//! around [`run`].

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, BuildOptions, DatasetManifest, Split};
use crate::error::Error;
use crate::image::{load_image, save_image, BitDepth, Image};
use crate::losses::RemovalLossConfig;
use crate::metrics::{self, MetricReport, MetricRow, NssConfig};
use crate::nets::BlockKind;
use crate::render::{render_grain, GrainColor, GrainParams};
use crate::training::{self, RemovalObjective, RunOptions, Task, TrainConfig, TrainData};
use crate::{par, synth};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "grainkit",
    version,
    about = "Film grain rendering, synthesis, removal and evaluation"
)]
pub struct Cli {
    /// Worker threads (1 gives bit-reproducible single-thread runs; 0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render film grain onto one image or every image of a folder.
    Render(RenderCmd),
    /// Cut source images into patches and render paired grainy versions.
    BuildDataset(BuildCmd),
    /// Train a synthesis or removal model on a dataset manifest.
    Train(TrainCmd),
    /// Apply a trained model to one image or a folder.
    Apply(ApplyCmd),
    /// Compute PSNR / SSIM / MS-SSIM / JSD-NSS tables.
    Eval(EvalCmd),
    /// Train and evaluate the reduced configurations of the ablation study.
    Ablation(AblationCmd),
    /// Write procedural test images (a stand-in corpus).
    GenCorpus(CorpusCmd),
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

/// Reads a JSON config file (if any) over `T::default()`.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(Error::from)
                .with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| data_err(path, e))
}

fn data_err(path: &Path, e: std::io::Error) -> anyhow::Error {
    anyhow::Error::new(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

macro_rules! overlay {
    ($dst:expr, $($field:ident),+ $(,)?) => {
        $(if let Some(v) = $field { $dst.$field = v; })+
    };
}

#[derive(Args, Clone, Default)]
struct GrainFlags {
    /// Mean grain radius in pixels (the grain level).
    #[arg(long)]
    mu_r: Option<f64>,
    /// Grain radius standard deviation in pixels (0 = constant radius).
    #[arg(long)]
    sigma_r: Option<f64>,
    /// Std of the Gaussian Monte Carlo jitter, pixels.
    #[arg(long)]
    kernel_std: Option<f64>,
    /// Monte Carlo samples per pixel.
    #[arg(long)]
    mc_samples: Option<u32>,
    /// Gray levels are clamped to this before computing the grain intensity.
    #[arg(long)]
    u_max: Option<f64>,
    /// monochrome or per_channel.
    #[arg(long, value_parser = parse_enum::<GrainColor>)]
    color: Option<GrainColor>,
}

impl GrainFlags {
    fn apply(self, p: &mut GrainParams) {
        let GrainFlags {
            mu_r,
            sigma_r,
            kernel_std,
            mc_samples,
            u_max,
            color,
        } = self;
        overlay!(p, mu_r, sigma_r, kernel_std, mc_samples, u_max, color);
    }
}

#[derive(Args)]
struct RenderCmd {
    /// Input image or folder.
    input: PathBuf,
    /// Output file (single image) or folder.
    output: PathBuf,
    /// JSON file with grain parameters; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    grain: GrainFlags,
    /// Output bit depth (8 or 16).
    #[arg(long, default_value_t = 8)]
    bit_depth: u8,
}

fn bit_depth(bits: u8) -> anyhow::Result<BitDepth> {
    match bits {
        8 => Ok(BitDepth::Eight),
        16 => Ok(BitDepth::Sixteen),
        b => Err(Error::Param(format!("bit depth must be 8 or 16, got {b}")).into()),
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "pgm" | "ppm" | "pnm"
            )
        })
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    v.sort();
    Ok(v)
}

/// Pairs each input with its output path. A folder input maps to a folder
/// output with the same file names.
fn io_pairs(input: &Path, output: &Path) -> anyhow::Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        fs::create_dir_all(output).map_err(|e| data_err(output, e))?;
        Ok(list_images(input)?
            .into_iter()
            .map(|p| {
                let out = output.join(p.file_name().expect("file name"));
                (p, out)
            })
            .collect())
    } else {
        if let Some(d) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(|e| data_err(d, e))?;
        }
        Ok(vec![(input.to_path_buf(), output.to_path_buf())])
    }
}

fn cmd_render(c: RenderCmd) -> anyhow::Result<()> {
    let mut params: GrainParams = load_config(c.config.as_deref())?;
    c.grain.apply(&mut params);
    if let Some(s) = c.seed {
        params.seed = s;
    }
    params.validate()?;
    let depth = bit_depth(c.bit_depth)?;
    println!("{}", serde_json::to_string(&params).map_err(Error::from)?);
    let pairs = io_pairs(&c.input, &c.output)?;
    for (i, (src, dst)) in pairs.iter().enumerate() {
        let img = load_image(src)?;
        // every file of a folder gets its own grain realization
        let p = if pairs.len() > 1 {
            params.with_seed(crate::render::level_seed(params.seed, i))
        } else {
            params
        };
        save_image(&render_grain(&img, &p)?, dst, depth)?;
        log::info!("{} -> {}", src.display(), dst.display());
    }
    Ok(())
}

#[derive(Args)]
struct BuildCmd {
    /// Folder of clean source images.
    src: PathBuf,
    /// Output dataset folder.
    out: PathBuf,
    /// JSON file with build options; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grain levels (mean radii), comma separated.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Square patch side in pixels.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Fraction of source images held out for validation.
    #[arg(long)]
    val: Option<f64>,
    /// Fraction of source images held out for testing.
    #[arg(long)]
    test: Option<f64>,
    #[command(flatten)]
    grain: GrainFlags,
}

fn cmd_build(c: BuildCmd) -> anyhow::Result<()> {
    let mut opts: BuildOptions = load_config(c.config.as_deref())?;
    let BuildCmd {
        levels,
        patch_size,
        seed,
        ..
    } = c;
    overlay!(opts, levels, patch_size, seed);
    if let Some(v) = c.val {
        opts.split.val = v;
    }
    if let Some(t) = c.test {
        opts.split.test = t;
    }
    c.grain.apply(&mut opts.grain_params);
    let m = dataset::build_dataset(&c.src, &c.out, &opts)?;
    println!(
        "{} pairs ({} train, {} val, {} test) -> {}",
        m.len(),
        m.indices(Split::Train).len(),
        m.indices(Split::Val).len(),
        m.indices(Split::Test).len(),
        m.root().join("manifest.json").display()
    );
    Ok(())
}

/// Flags for every training configuration field.
#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// synthesis or removal.
    #[arg(long, value_parser = parse_enum::<Task>)]
    task: Option<Task>,
    /// Removal without the level map input.
    #[arg(long)]
    blind: Option<bool>,
    #[arg(long)]
    image_channels: Option<usize>,
    /// Generator width at full resolution.
    #[arg(long)]
    base_width: Option<usize>,
    /// residual or plain.
    #[arg(long, value_parser = parse_enum::<BlockKind>)]
    block: Option<BlockKind>,
    #[arg(long)]
    blocks_per_scale: Option<usize>,
    /// Add the input image to the generator output.
    #[arg(long)]
    global_skip: Option<bool>,
    /// Normalize each image with its own statistics at inference.
    #[arg(long)]
    inference_batch_stats: Option<bool>,
    /// Synthesis: train against a PatchGAN discriminator.
    #[arg(long)]
    use_discriminator: Option<bool>,
    #[arg(long)]
    disc_base_width: Option<usize>,
    /// mix or l1.
    #[arg(long, value_parser = parse_enum::<RemovalObjective>)]
    removal_objective: Option<RemovalObjective>,
    #[arg(long)]
    lr_generator: Option<f32>,
    #[arg(long)]
    lr_discriminator: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    adam_beta1: Option<f32>,
    #[arg(long)]
    adam_beta2: Option<f32>,
    #[arg(long)]
    adam_eps: Option<f32>,
    /// Train only on these levels (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Checkpoint every N epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Synthesis: weight of the L1 term next to the adversarial loss.
    #[arg(long)]
    lambda_l1: Option<f64>,
    /// Removal mix: weight of MS-SSIM against Gaussian-weighted L1.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    gaussian_size: Option<usize>,
    #[arg(long)]
    gaussian_std: Option<f64>,
    #[arg(long)]
    ms_ssim_scales: Option<usize>,
    /// Use the classical per-scale MS-SSIM exponents.
    #[arg(long)]
    classical_weights: Option<bool>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    dynamic_range: Option<f64>,
}

impl TrainFlags {
    /// Resolves the configuration: task defaults, then JSON, then flags.
    fn resolve(self, config: Option<&Path>) -> anyhow::Result<TrainConfig> {
        let mut json = match config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
                serde_json::from_str::<serde_json::Value>(&text).map_err(Error::from)?
            }
            None => serde_json::json!({}),
        };
        if let Some(t) = self.task {
            json["task"] = serde_json::to_value(t).map_err(Error::from)?;
        }
        if let Some(b) = self.blind {
            json["blind"] = b.into();
        }
        let mut cfg = TrainConfig::from_json(&json.to_string())?;
        let TrainFlags {
            image_channels,
            base_width,
            block,
            blocks_per_scale,
            global_skip,
            inference_batch_stats,
            use_discriminator,
            disc_base_width,
            removal_objective,
            lr_generator,
            lr_discriminator,
            batch_size,
            epochs,
            seed,
            adam_beta1,
            adam_beta2,
            adam_eps,
            levels,
            checkpoint_every,
            lambda_l1,
            gamma,
            gaussian_size,
            gaussian_std,
            ms_ssim_scales,
            classical_weights,
            k1,
            k2,
            dynamic_range,
            ..
        } = self;
        overlay!(
            cfg,
            image_channels,
            base_width,
            block,
            blocks_per_scale,
            global_skip,
            inference_batch_stats,
            use_discriminator,
            disc_base_width,
            removal_objective,
            lr_generator,
            lr_discriminator,
            batch_size,
            epochs,
            seed,
            adam_beta1,
            adam_beta2,
            adam_eps,
            levels,
            checkpoint_every,
        );
        overlay!(cfg.synthesis_loss, lambda_l1);
        overlay!(
            cfg.removal_loss,
            gamma,
            gaussian_size,
            gaussian_std,
            ms_ssim_scales,
            classical_weights,
            k1,
            k2,
            dynamic_range,
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset manifest (file or dataset folder).
    manifest: PathBuf,
    /// Output folder for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn cmd_train(c: TrainCmd) -> anyhow::Result<()> {
    let mut cfg = c.flags.resolve(c.config.as_deref())?;
    let manifest = DatasetManifest::load(&c.manifest)?;
    if let Some(first) = manifest.entries.first() {
        // follow the dataset's channel count unless set explicitly
        let img = load_image(manifest.path(&first.clean_path))?;
        if c.config.is_none() && cfg.image_channels != img.channels() {
            log::info!("using {} image channels from the dataset", img.channels());
            cfg.image_channels = img.channels();
        }
    }
    fs::create_dir_all(&c.out).map_err(|e| data_err(&c.out, e))?;
    write_json(&c.out.join("config.json"), &cfg)?;
    let resume = c.resume.as_ref().map(Checkpoint::load).transpose()?;
    let opts = RunOptions {
        out_dir: Some(c.out.clone()),
        resume,
    };
    let outcome = match cfg.task {
        Task::Synthesis => training::train_synthesis(&cfg, &manifest, opts)?,
        Task::Removal => training::train_removal(&cfg, &manifest, opts)?,
    };
    if let Some(last) = outcome.log.epochs.last() {
        println!(
            "trained {} epochs ({} steps); final objective {:.6}",
            outcome.checkpoint.epoch, outcome.checkpoint.step, last.objective
        );
    }
    println!("checkpoint: {}", c.out.join("final.safetensors").display());
    Ok(())
}

#[derive(Args)]
struct ApplyCmd {
    /// Trained checkpoint.
    checkpoint: PathBuf,
    /// Input image or folder.
    input: PathBuf,
    /// Output file or folder.
    output: PathBuf,
    /// Grain level for conditioned models (synthesis, non-blind removal).
    #[arg(long)]
    level: Option<f64>,
    /// Accepted for uniformity; inference is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    bit_depth: u8,
}

fn cmd_apply(c: ApplyCmd) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&c.checkpoint)?;
    let depth = bit_depth(c.bit_depth)?;
    for (src, dst) in io_pairs(&c.input, &c.output)? {
        let img = load_image(&src)?;
        let out = training::apply_model(&ck, &img, c.level)?;
        save_image(&out, &dst, depth)?;
        log::info!("{} -> {}", src.display(), dst.display());
    }
    Ok(())
}

#[derive(Args, Clone, Default)]
struct NssFlags {
    #[arg(long)]
    mscn_window: Option<usize>,
    #[arg(long)]
    mscn_std: Option<f64>,
    #[arg(long)]
    mscn_c: Option<f64>,
    #[arg(long)]
    hist_bins: Option<usize>,
    /// Histogram support as LO,HI.
    #[arg(long, value_parser = parse_range)]
    hist_range: Option<(f64, f64)>,
    #[arg(long)]
    smoothing_eps: Option<f64>,
    #[arg(long)]
    anti_diagonal: Option<bool>,
    #[arg(long)]
    include_mscn: Option<bool>,
}

impl NssFlags {
    fn resolve(self, config: Option<&Path>) -> anyhow::Result<NssConfig> {
        let mut cfg: NssConfig = load_config(config)?;
        let NssFlags {
            mscn_window,
            mscn_std,
            mscn_c,
            hist_bins,
            hist_range,
            smoothing_eps,
            anti_diagonal,
            include_mscn,
        } = self;
        overlay!(
            cfg,
            mscn_window,
            mscn_std,
            mscn_c,
            hist_bins,
            hist_range,
            smoothing_eps,
            anti_diagonal,
            include_mscn
        );
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalCmd {
    /// Reference image folder (or file).
    #[arg(long, conflicts_with = "manifest")]
    reference: Option<PathBuf>,
    /// Candidate folder (or file); files are matched by name.
    #[arg(long, requires = "reference")]
    candidate: Option<PathBuf>,
    /// Evaluate a dataset split instead: grainy inputs (or model outputs
    /// with --checkpoint) against the targets.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model to apply to the split before scoring.
    #[arg(long, requires = "manifest")]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, value_parser = parse_enum::<Split>, default_value = "val")]
    split: Split,
    /// Dataset label in the report.
    #[arg(long, default_value = "dataset")]
    dataset: String,
    /// Level label for folder comparisons.
    #[arg(long)]
    level: Option<f64>,
    /// JSON NSS config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    nss: NssFlags,
    /// Write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write NSS histogram plots (one PNG per pair) into this folder.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

fn plot_pair(
    dir: &Path,
    name: &str,
    reference: &Image,
    candidate: &Image,
    nss: &NssConfig,
) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    let (_, hr) = metrics::nss_histograms(reference, nss);
    let (_, hc) = metrics::nss_histograms(candidate, nss);
    let plot = metrics::plot_histograms(&[hr, hc], 240, 402);
    save_image(&plot, dir.join(format!("{name}_nss.png")), BitDepth::Eight)?;
    Ok(())
}

fn cmd_eval(c: EvalCmd) -> anyhow::Result<()> {
    let nss = c.nss.clone().resolve(c.config.as_deref())?;
    let loss_cfg = RemovalLossConfig::default();
    let mut rows = Vec::new();
    if let Some(mpath) = &c.manifest {
        let manifest = DatasetManifest::load(mpath)?;
        let samples = manifest.load_split(c.split)?;
        if samples.is_empty() {
            return Err(Error::Dataset(format!("split {:?} is empty", c.split)).into());
        }
        let ck = c.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
        let names: Vec<String> = manifest
            .indices(c.split)
            .iter()
            .map(|&i| {
                let e = &manifest.entries[i];
                Path::new(&e.grainy_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect();
        for (s, name) in samples.iter().zip(&names) {
            let level = s.level() as f64;
            let (reference, candidate) = match &ck {
                None => (&s.clean, s.grainy.clone()),
                Some(ck) => {
                    let cond = ck.generator.config.conditioned.then_some(level);
                    match ck.config.task {
                        Task::Removal => (&s.clean, training::apply_model(ck, &s.grainy, cond)?),
                        Task::Synthesis => (&s.grainy, training::apply_model(ck, &s.clean, cond)?),
                    }
                }
            };
            let m = metrics::evaluate_pair(reference, &candidate, &loss_cfg, &nss)?;
            rows.push(MetricRow::new(&c.dataset, Some(level), name, m));
            if let Some(dir) = &c.plots {
                plot_pair(dir, name, reference, &candidate, &nss)?;
            }
        }
    } else {
        let (Some(rp), Some(cp)) = (&c.reference, &c.candidate) else {
            return Err(
                Error::Param("pass --reference and --candidate, or --manifest".into()).into(),
            );
        };
        let refs = if rp.is_dir() {
            list_images(rp)?
        } else {
            vec![rp.clone()]
        };
        if refs.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", rp.display())).into());
        }
        for r in refs {
            let cand = if cp.is_dir() {
                cp.join(r.file_name().expect("file name"))
            } else {
                cp.clone()
            };
            let (a, b) = (load_image(&r)?, load_image(&cand)?);
            let name = r
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let m = metrics::evaluate_pair(&a, &b, &loss_cfg, &nss)?;
            rows.push(MetricRow::new(&c.dataset, c.level, &name, m));
            if let Some(dir) = &c.plots {
                plot_pair(dir, &name, &a, &b, &nss)?;
            }
        }
    }
    emit_report(
        &MetricReport::from_rows(rows),
        c.csv.as_deref(),
        c.json.as_deref(),
    )
}

fn emit_report(
    report: &MetricReport,
    csv: Option<&Path>,
    json: Option<&Path>,
) -> anyhow::Result<()> {
    print!("{}", report.table());
    if let Some(p) = csv {
        fs::write(p, report.to_csv()).map_err(|e| data_err(p, e))?;
    }
    if let Some(p) = json {
        fs::write(p, report.to_json()?).map_err(|e| data_err(p, e))?;
    }
    Ok(())
}

#[derive(Args)]
struct AblationCmd {
    /// Dataset manifest (file or dataset folder).
    manifest: PathBuf,
    /// Configuration ids to run (1, 2, 3; comma separated).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    ids: Vec<u8>,
    /// JSON training config for the shared settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

fn cmd_ablation(c: AblationCmd) -> anyhow::Result<()> {
    let base = c.flags.resolve(c.config.as_deref())?;
    let manifest = DatasetManifest::load(&c.manifest)?;
    let data = TrainData::from_manifest(&manifest, &base.levels)?;
    if data.val.is_empty() {
        return Err(Error::Dataset("ablation needs a non-empty validation split".into()).into());
    }
    let mut rows = Vec::new();
    for id in c.ids {
        let (report, _) = training::run_ablation(&base, id, &data)?;
        rows.extend(report.rows);
    }
    emit_report(
        &MetricReport::from_rows(rows),
        c.csv.as_deref(),
        c.json.as_deref(),
    )
}

#[derive(Args)]
struct CorpusCmd {
    /// Output folder.
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// 1 (gray) or 3 (RGB).
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_corpus(c: CorpusCmd) -> anyhow::Result<()> {
    let paths = synth::write_corpus(&c.out, c.count, c.size, c.channels, c.seed)?;
    println!("wrote {} images to {}", paths.len(), c.out.display());
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        Some(Error::Param(_) | Error::Contract(_) | Error::Scale { .. }) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code; messages go to stdout / stderr.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    let result = par::with_threads(threads, || match cli.command {
        Command::Render(c) => cmd_render(c),
        Command::BuildDataset(c) => cmd_build(c),
        Command::Train(c) => cmd_train(c),
        Command::Apply(c) => cmd_apply(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Ablation(c) => cmd_ablation(c),
        Command::GenCorpus(c) => cmd_corpus(c),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Long help text of a subcommand (or of the top level for `None`).
pub fn help(subcommand: Option<&str>) -> String {
    use clap::CommandFactory;
    let mut cmd = Cli::command();
    match subcommand {
        Some(name) => cmd
            .find_subcommand_mut(name)
            .map(|c| c.render_long_help().to_string())
            .unwrap_or_default(),
        None => cmd.render_long_help().to_string(),
    }
}
