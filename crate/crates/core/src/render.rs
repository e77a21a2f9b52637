//! Stochastic film grain renderer.
//!
//! Grains are disks whose centers follow an inhomogeneous Poisson process.
//! The intensity at a point depends on the gray level `u` of the input pixel
//! underneath it:
//!
//! ```text
//! λ(u) = -ln(1 - min(u, u_max)) / (π (μ_r² + σ_r²))
//! ```
//!
//! which makes the probability of a point being covered by at least one disk
//! equal to `u`. An output pixel is the fraction of `mc_samples` points,
//! jittered around the pixel center by a Gaussian of std `kernel_std`, that
//! fall inside some disk. The same jitter offsets are used for every pixel.
//!
//! The plane is tiled into square cells of side `δ = 1 / ceil(1 / r_max)`.
//! The grains of a cell are regenerated on demand from a generator keyed by
//! `(seed, cell)`, so any pixel can be rendered independently of the others.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::rng;

/// Mean grain radii used to build multi-level datasets, in pixels.
pub const GRAIN_LEVELS: [f64; 5] = [0.010, 0.025, 0.050, 0.075, 0.100];

const OFFSET_STREAM: u64 = 0x6f66_6673;
const MAX_POISSON: u32 = 10_000;
/// Upper quantile at which log-normal radii are truncated.
const RADIUS_QUANTILE_Z: f64 = 3.090_232_306_167_813; // Φ⁻¹(0.999)

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrainColor {
    /// Same disk geometry for every channel.
    #[default]
    Monochrome,
    /// Independent geometry per channel.
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrainParams {
    /// Mean grain radius in pixels.
    pub mu_r: f64,
    /// Standard deviation of the grain radius in pixels.
    pub sigma_r: f64,
    /// Std of the Gaussian jitter of Monte Carlo sample points, in pixels.
    pub kernel_std: f64,
    pub mc_samples: u32,
    pub seed: u64,
    /// Gray levels are clamped to this value before computing the intensity.
    pub u_max: f64,
    #[serde(default)]
    pub color: GrainColor,
}

impl Default for GrainParams {
    fn default() -> Self {
        Self {
            mu_r: 0.05,
            sigma_r: 0.0,
            kernel_std: 0.8,
            mc_samples: 800,
            seed: 0,
            u_max: 0.9999,
            color: GrainColor::Monochrome,
        }
    }
}

impl GrainParams {
    pub fn with_level(mut self, mu_r: f64) -> Self {
        self.mu_r = mu_r;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_r.is_finite() && self.mu_r > 0.0) {
            return Err(Error::Param(format!("mu_r must be > 0, got {}", self.mu_r)));
        }
        if !(self.sigma_r.is_finite() && self.sigma_r >= 0.0) {
            return Err(Error::Param(format!(
                "sigma_r must be >= 0, got {}",
                self.sigma_r
            )));
        }
        if !(self.kernel_std.is_finite() && self.kernel_std > 0.0) {
            return Err(Error::Param(format!(
                "kernel_std must be > 0, got {}",
                self.kernel_std
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::Param("mc_samples must be >= 1".into()));
        }
        if !(self.u_max > 0.0 && self.u_max < 1.0) {
            return Err(Error::Param(format!(
                "u_max must lie in (0, 1), got {}",
                self.u_max
            )));
        }
        Ok(())
    }

    /// `E[r²]` of the radius distribution.
    pub fn mean_sq_radius(&self) -> f64 {
        self.mu_r * self.mu_r + self.sigma_r * self.sigma_r
    }

    /// Poisson intensity (grain centers per square pixel) for gray level `u`.
    pub fn intensity(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, self.u_max);
        -(1.0 - u).ln() / (std::f64::consts::PI * self.mean_sq_radius())
    }
}

/// Probability that a point is covered by a Boolean model of intensity
/// `lambda` with disks of mean squared radius `mean_sq_radius`.
pub fn coverage_probability(lambda: f64, mean_sq_radius: f64) -> f64 {
    1.0 - (-lambda * std::f64::consts::PI * mean_sq_radius).exp()
}

#[derive(Clone, Copy, Debug)]
enum Radius {
    Constant(f64),
    LogNormal {
        log_mean: f64,
        log_std: f64,
        max: f64,
    },
}

impl Radius {
    fn from_params(p: &GrainParams) -> Self {
        if p.sigma_r == 0.0 {
            return Radius::Constant(p.mu_r);
        }
        let s2 = (1.0 + (p.sigma_r / p.mu_r).powi(2)).ln();
        let log_std = s2.sqrt();
        let log_mean = p.mu_r.ln() - 0.5 * s2;
        Radius::LogNormal {
            log_mean,
            log_std,
            max: (log_mean + RADIUS_QUANTILE_Z * log_std).exp(),
        }
    }

    fn max(&self) -> f64 {
        match *self {
            Radius::Constant(r) => r,
            Radius::LogNormal { max, .. } => max,
        }
    }

    #[inline]
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Radius::Constant(r) => r,
            Radius::LogNormal {
                log_mean,
                log_std,
                max,
            } => {
                let z: f64 = rng.sample(StandardNormal);
                (log_mean + log_std * z).exp().min(max)
            }
        }
    }
}

/// Per-pixel Poisson parameters for one cell: mean count and `exp(-mean)`.
#[derive(Clone, Copy)]
struct CellRate {
    mean: f64,
    p0: f64,
}

#[inline]
fn poisson_inverse(u: f64, rate: CellRate) -> u32 {
    let mut k = 0;
    let mut p = rate.p0;
    let mut cdf = p;
    while u > cdf && k < MAX_POISSON {
        k += 1;
        p *= rate.mean / k as f64;
        cdf += p;
        if p == 0.0 {
            break;
        }
    }
    k
}

struct PlaneRenderer<'a> {
    h: usize,
    w: usize,
    rates: Vec<CellRate>,
    offsets: &'a [(f64, f64)],
    radius: Radius,
    cells_per_px: i64,
    cell: f64,
    geometry_seed: u64,
}

impl PlaneRenderer<'_> {
    #[inline]
    fn covered(&self, sx: f64, sy: f64) -> bool {
        let rmax = self.radius.max();
        let inv = self.cells_per_px as f64;
        let cx0 = ((sx - rmax) * inv).floor() as i64;
        let cx1 = ((sx + rmax) * inv).floor() as i64;
        let cy0 = ((sy - rmax) * inv).floor() as i64;
        let cy1 = ((sy + rmax) * inv).floor() as i64;
        for cy in cy0..=cy1 {
            let py = cy.div_euclid(self.cells_per_px).clamp(0, self.h as i64 - 1) as usize;
            for cx in cx0..=cx1 {
                let px = cx.div_euclid(self.cells_per_px).clamp(0, self.w as i64 - 1) as usize;
                let rate = self.rates[py * self.w + px];
                if rate.mean <= 0.0 {
                    continue;
                }
                let mut g = rng::stream(self.geometry_seed, &[cx as u64, cy as u64]);
                let n = poisson_inverse(g.gen::<f64>(), rate);
                for _ in 0..n {
                    let gx = (cx as f64 + g.gen::<f64>()) * self.cell;
                    let gy = (cy as f64 + g.gen::<f64>()) * self.cell;
                    let r = self.radius.sample(&mut g);
                    let (dx, dy) = (sx - gx, sy - gy);
                    if dx * dx + dy * dy <= r * r {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn render_row(&self, y: usize, out: &mut [f32]) {
        let k = self.offsets.len() as f64;
        for (x, o) in out.iter_mut().enumerate() {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let hits = self
                .offsets
                .iter()
                .filter(|(ox, oy)| self.covered(cx + ox, cy + oy))
                .count();
            *o = (hits as f64 / k) as f32;
        }
    }
}

fn sample_offsets(params: &GrainParams) -> Vec<(f64, f64)> {
    let mut g = rng::stream(params.seed, &[OFFSET_STREAM]);
    (0..params.mc_samples)
        .map(|_| {
            let ox: f64 = g.sample(StandardNormal);
            let oy: f64 = g.sample(StandardNormal);
            (ox * params.kernel_std, oy * params.kernel_std)
        })
        .collect()
}

/// Renders film grain over every channel of `img`. Deterministic in
/// `(img, params)`; output samples lie in `[0, 1]`.
pub fn render_grain(img: &Image, params: &GrainParams) -> Result<Image> {
    params.validate()?;
    let (h, w, c) = img.dims();
    let radius = Radius::from_params(params);
    let cells_per_px = (1.0 / radius.max()).ceil().max(1.0) as i64;
    let cell = 1.0 / cells_per_px as f64;
    let cell_area = cell * cell;
    let offsets = sample_offsets(params);

    let mut planes = Vec::with_capacity(c);
    for ch in 0..c {
        let rates = img
            .plane(ch)
            .iter()
            .map(|&u| {
                let mean = params.intensity(u as f64) * cell_area;
                CellRate {
                    mean,
                    p0: (-mean).exp(),
                }
            })
            .collect();
        let geometry_seed = match params.color {
            GrainColor::Monochrome => rng::key(params.seed, &[]),
            GrainColor::PerChannel => rng::key(params.seed, &[ch as u64 + 1]),
        };
        let renderer = PlaneRenderer {
            h,
            w,
            rates,
            offsets: &offsets,
            radius,
            cells_per_px,
            cell,
            geometry_seed,
        };
        let mut plane = vec![0.0f32; h * w];
        par::for_each_chunk_mut(&mut plane, w, |y, row| renderer.render_row(y, row));
        planes.push(plane);
    }
    Image::from_planes(h, w, &planes)
}

/// Seed used for level `index` of a level set.
pub fn level_seed(base_seed: u64, index: usize) -> u64 {
    rng::key(base_seed, &[index as u64])
}

/// Renders one grainy version of `img` per mean radius in `levels`, each with
/// its own seed derived from `base_seed`. Other parameters come from
/// `template`.
pub fn render_level_set(
    img: &Image,
    levels: &[f64],
    base_seed: u64,
    template: &GrainParams,
) -> Result<Vec<Image>> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &mu)| {
            let p = template.with_level(mu).with_seed(level_seed(base_seed, i));
            render_grain(img, &p)
        })
        .collect()
}
