//! Paired clean/grainy datasets with grain-level conditioning maps.
//!
//! A dataset directory holds `clean/`, `grainy/` and `manifest.json`. The
//! manifest stores paths relative to its own directory, the renderer
//! parameters, and the seed of every grainy rendering, so any file can be
//! regenerated bit-exactly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, BitDepth, Image};
use crate::par;
use crate::render::{self, GrainParams};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Constant conditioning channel holding the grain level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelMap {
    height: usize,
    width: usize,
    level: f32,
}

impl LevelMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn level(&self) -> f32 {
        self.level
    }

    /// Materialized `H×W×1` map.
    pub fn to_image(&self) -> Image {
        Image::filled(self.height, self.width, 1, self.level)
    }
}

pub fn make_level_map(level: f64, h: usize, w: usize) -> Result<LevelMap> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Param(format!("level {level} outside (0, 1)")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Param("level map needs h, w >= 1".into()));
    }
    Ok(LevelMap {
        height: h,
        width: w,
        level: level as f32,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: String,
    pub grainy_path: String,
    pub level: f64,
    pub seed: u64,
    /// Source image file name the patch was cut from.
    pub source: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub patch_size: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
    pub grain_params: GrainParams,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            val: 0.1,
            test: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub levels: Vec<f64>,
    pub patch_size: usize,
    pub grain_params: GrainParams,
    pub seed: u64,
    pub split: SplitFractions,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            levels: render::GRAIN_LEVELS.to_vec(),
            patch_size: 256,
            grain_params: GrainParams::default(),
            seed: 0,
            split: SplitFractions::default(),
        }
    }
}

/// One training example `(x, y, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: Image,
    pub grainy: Image,
    pub level_map: LevelMap,
}

impl PairedSample {
    pub fn new(clean: Image, grainy: Image, level: f64) -> Result<Self> {
        if !clean.same_shape(&grainy) {
            return Err(Error::Corruption(format!(
                "clean {:?} and grainy {:?} shapes differ",
                clean.dims(),
                grainy.dims()
            )));
        }
        let level_map = make_level_map(level, clean.height(), clean.width())?;
        Ok(Self {
            clean,
            grainy,
            level_map,
        })
    }

    pub fn level(&self) -> f32 {
        self.level_map.level
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Assigns each source to a split; the assignment depends only on the sorted
/// source names and `seed`.
pub fn assign_splits(sources: &[String], fractions: SplitFractions, seed: u64) -> Vec<Split> {
    let n = sources.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng::key(seed, &[0x5b1d])));
    let n_test = ((n as f64) * fractions.test).round() as usize;
    let mut n_val = ((n as f64) * fractions.val).round() as usize;
    if n_test + n_val >= n {
        n_val = n.saturating_sub(n_test + 1);
    }
    let mut splits = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    splits
}

fn level_tag(level: f64) -> String {
    format!("mu{:.3}", level)
}

/// Cuts every source image into patches, renders one grainy version per
/// level, writes all files and `manifest.json` under `out_dir`.
pub fn build_dataset(
    src_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    opts: &BuildOptions,
) -> Result<DatasetManifest> {
    let (src_dir, out_dir) = (src_dir.as_ref(), out_dir.as_ref());
    opts.grain_params.validate()?;
    if opts.levels.is_empty() {
        return Err(Error::Param("at least one grain level is required".into()));
    }
    for &l in &opts.levels {
        opts.grain_params.with_level(l).validate()?;
    }
    let files = list_images(src_dir)?;
    let mut sources = Vec::new();
    for f in &files {
        match image::load_image(f) {
            Ok(img) => sources.push((f.file_name().unwrap().to_string_lossy().into_owned(), img)),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images in {}",
            src_dir.display()
        )));
    }
    let names: Vec<String> = sources.iter().map(|(n, _)| n.clone()).collect();
    let splits = assign_splits(&names, opts.split, opts.seed);

    struct Job {
        source: usize,
        index: usize,
        patch: Image,
    }
    let mut jobs = Vec::new();
    for (s, (_, img)) in sources.iter().enumerate() {
        for (index, patch) in image::extract_patches(img, opts.patch_size, opts.patch_size)?
            .into_iter()
            .enumerate()
        {
            jobs.push(Job {
                source: s,
                index,
                patch,
            });
        }
    }
    if jobs.is_empty() {
        return Err(Error::Dataset(format!(
            "no source image is at least {0}x{0}",
            opts.patch_size
        )));
    }

    for sub in ["clean", "grainy"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let results = par::map_range(jobs.len(), |j| -> Result<Vec<ManifestEntry>> {
        let job = &jobs[j];
        let (name, _) = &sources[job.source];
        let stem = Path::new(name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name.clone());
        let clean_rel = format!("clean/{stem}_{:04}.png", job.index);
        image::save_image(&job.patch, out_dir.join(&clean_rel), BitDepth::Eight)?;
        let patch_seed = rng::key(opts.seed, &[j as u64]);
        let grainy =
            render::render_level_set(&job.patch, &opts.levels, patch_seed, &opts.grain_params)?;
        let mut entries = Vec::with_capacity(opts.levels.len());
        for (i, (img, &level)) in grainy.iter().zip(&opts.levels).enumerate() {
            let grainy_rel = format!("grainy/{stem}_{:04}_{}.png", job.index, level_tag(level));
            image::save_image(img, out_dir.join(&grainy_rel), BitDepth::Eight)?;
            entries.push(ManifestEntry {
                clean_path: clean_rel.clone(),
                grainy_path: grainy_rel,
                level,
                seed: render::level_seed(patch_seed, i),
                source: name.clone(),
                split: splits[job.source],
            });
        }
        Ok(entries)
    });
    let mut entries = Vec::with_capacity(jobs.len() * opts.levels.len());
    for r in results {
        entries.extend(r?);
    }

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        patch_size: opts.patch_size,
        levels: opts.levels.clone(),
        seed: opts.seed,
        grain_params: opts.grain_params,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a manifest (given its file or its directory) and checks that
    /// every referenced file exists and every `(clean, level)` pair is unique.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            for rel in [&e.clean_path, &e.grainy_path] {
                if !self.path(rel).is_file() {
                    return Err(Error::Dataset(format!("missing file {rel}")));
                }
            }
            if !seen.insert((e.clean_path.clone(), e.level.to_bits())) {
                return Err(Error::Dataset(format!(
                    "duplicate entry for {} at level {}",
                    e.clean_path, e.level
                )));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].split == split)
            .collect()
    }

    /// Same manifest restricted to the entries at the given levels.
    pub fn with_levels(&self, levels: &[f64]) -> DatasetManifest {
        let mut m = self.clone();
        m.entries
            .retain(|e| levels.iter().any(|l| (l - e.level).abs() < 1e-12));
        m.levels
            .retain(|l| levels.iter().any(|k| (k - l).abs() < 1e-12));
        m
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PairedSample>> {
        let idx = self.indices(split);
        par::map_slice(&idx, |&i| load_pair(self, i))
            .into_iter()
            .collect()
    }
}

pub fn load_pair(manifest: &DatasetManifest, index: usize) -> Result<PairedSample> {
    let e = manifest.entries.get(index).ok_or(Error::Bounds {
        index,
        len: manifest.entries.len(),
    })?;
    let clean = image::load_image(manifest.path(&e.clean_path))?;
    let grainy = image::load_image(manifest.path(&e.grainy_path))?;
    PairedSample::new(clean, grainy, e.level)
}

/// Seed-deterministic permutation of `0..n` for one epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng::key(
        seed,
        &[0x5f1e, epoch as u64],
    )));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn level_maps() {
        let m = make_level_map(0.05, 4, 4).unwrap();
        assert!(m.to_image().data().iter().all(|&v| v == 0.05f32));
        let m = make_level_map(0.010, 256, 256).unwrap();
        assert_eq!(m.level(), 0.010f32);
        assert_eq!((m.height(), m.width()), (256, 256));
        assert!(matches!(make_level_map(1.5, 4, 4), Err(Error::Param(_))));
        assert!(make_level_map(0.0, 4, 4).is_err());
    }

    #[test]
    fn pair_shape_mismatch_is_corruption() {
        let a = Image::filled(4, 4, 1, 0.1);
        let b = Image::filled(4, 5, 1, 0.1);
        assert!(matches!(
            PairedSample::new(a, b, 0.05),
            Err(Error::Corruption(_))
        ));
    }

    proptest! {
        #[test]
        fn splits_partition_sources(n in 1usize..40, val in 0.0f64..0.5, test in 0.0f64..0.4, seed: u64) {
            let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let f = SplitFractions { val, test };
            let a = assign_splits(&names, f, seed);
            prop_assert_eq!(&a, &assign_splits(&names, f, seed));
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.contains(&Split::Train));
        }

        #[test]
        fn shuffles_are_permutations(n in 0usize..200, seed: u64, epoch in 0usize..5) {
            let mut p = shuffled_indices(n, seed, epoch);
            prop_assert_eq!(&p, &shuffled_indices(n, seed, epoch));
            p.sort();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
