//! Evaluation metrics: PSNR, SSIM, MS-SSIM and the JSD-NSS grain fidelity
//! measure, plus report tables.
//!
//! JSD-NSS compares the distributions of products of diagonally adjacent
//! MSCN (mean-subtracted, contrast-normalized) coefficients of two images.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{blur, gaussian_kernel, Plane};
use crate::image::Image;
use crate::losses::{self, ssim_maps, RemovalLossConfig};
use crate::par;

fn check_images(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) || a.data().is_empty() {
        return Err(Error::Contract(format!(
            "images differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `10·log10(peak²/MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &Image, xhat: &Image, peak: f64) -> Result<f64> {
    check_images(x, xhat)?;
    let mse = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Single-scale SSIM with the loss window (11 taps, std 1.5), averaged over
/// pixels and channels.
pub fn ssim(x: &Image, xhat: &Image) -> Result<f64> {
    check_images(x, xhat)?;
    let cfg = RemovalLossConfig::default();
    let taps = cfg.taps();
    let (a, b) = (losses::image_planes(x), losses::image_planes(xhat));
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(p, q)| {
            let (l, cs) = ssim_maps(p, q, &taps, cfg.c1(), cfg.c2());
            l.zip(&cs, |u, v| u * v).mean()
        })
        .sum();
    Ok(total / a.len() as f64)
}

pub fn ms_ssim(x: &Image, xhat: &Image, cfg: &RemovalLossConfig) -> Result<f64> {
    check_images(x, xhat)?;
    losses::ms_ssim(&losses::image_planes(x), &losses::image_planes(xhat), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NssConfig {
    pub mscn_window: usize,
    pub mscn_std: f64,
    pub mscn_c: f64,
    pub hist_bins: usize,
    pub hist_range: (f64, f64),
    pub smoothing_eps: f64,
    /// Also use products along the anti-diagonal.
    pub anti_diagonal: bool,
    /// Average in the JSD of the raw MSCN distributions.
    pub include_mscn: bool,
}

impl Default for NssConfig {
    fn default() -> Self {
        Self {
            mscn_window: 7,
            mscn_std: 7.0 / 6.0,
            mscn_c: 1.0 / 255.0,
            hist_bins: 201,
            hist_range: (-2.0, 2.0),
            smoothing_eps: 1e-12,
            anti_diagonal: false,
            include_mscn: false,
        }
    }
}

impl NssConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.hist_range;
        if self.hist_bins < 2 {
            return Err(Error::Param("hist_bins must be >= 2".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Param(format!("bad histogram range ({lo}, {hi})")));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(Error::Param("smoothing_eps must be > 0".into()));
        }
        if self.mscn_window == 0 || self.mscn_window.is_multiple_of(2) || !(self.mscn_std > 0.0) {
            return Err(Error::Param("mscn window must be odd with std > 0".into()));
        }
        if !(self.mscn_c > 0.0) {
            return Err(Error::Param("mscn_c must be > 0".into()));
        }
        Ok(())
    }
}

/// `(I − μ)/(σ + C)` with Gaussian-weighted local mean and deviation.
pub fn mscn(plane: &Plane, cfg: &NssConfig) -> Plane {
    let taps = gaussian_kernel(cfg.mscn_window, cfg.mscn_std);
    let mu = blur(plane, &taps);
    let sq = blur(&plane.map(|v| v * v), &taps);
    let mut out = Plane::zeros(plane.h, plane.w);
    for i in 0..out.data.len() {
        let var = (sq.data[i] - mu.data[i] * mu.data[i]).max(0.0);
        out.data[i] = (plane.data[i] - mu.data[i]) / (var.sqrt() + cfg.mscn_c);
    }
    out
}

/// MSCN map of the image luminance.
pub fn mscn_image(img: &Image, cfg: &NssConfig) -> Plane {
    mscn(&Plane::new(img.height(), img.width(), img.luma()), cfg)
}

/// `c(i,j)·c(i+1,j+1)` over all valid positions, row-major; with `anti`,
/// followed by `c(i,j+1)·c(i+1,j)`.
pub fn diagonal_products(coef: &Plane, anti: bool) -> Vec<f64> {
    if coef.h < 2 || coef.w < 2 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity((coef.h - 1) * (coef.w - 1) * (1 + anti as usize));
    for i in 0..coef.h - 1 {
        for j in 0..coef.w - 1 {
            out.push(coef.at(i, j) * coef.at(i + 1, j + 1));
        }
    }
    if anti {
        for i in 0..coef.h - 1 {
            for j in 0..coef.w - 1 {
                out.push(coef.at(i, j + 1) * coef.at(i + 1, j));
            }
        }
    }
    out
}

/// Fixed-range histogram with clipping, eps smoothing and unit mass.
pub fn histogram(values: &[f64], cfg: &NssConfig) -> Vec<f64> {
    let (lo, hi) = cfg.hist_range;
    let bins = cfg.hist_bins;
    let mut h = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v.clamp(lo, hi) - lo) / width).floor() as usize;
        h[b.min(bins - 1)] += 1.0;
    }
    h.iter_mut().for_each(|v| *v += cfg.smoothing_eps);
    let total: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Jensen-Shannon divergence (natural log) of two distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Contract(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for d in [p, q] {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(
                "distribution must be non-negative with unit mass".into(),
            ));
        }
    }
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, std::f64::consts::LN_2))
}

/// Histograms used by JSD-NSS: products, then raw MSCN when enabled.
pub fn nss_histograms(img: &Image, cfg: &NssConfig) -> (Vec<f64>, Vec<f64>) {
    let c = mscn_image(img, cfg);
    (
        histogram(&diagonal_products(&c, cfg.anti_diagonal), cfg),
        histogram(&c.data, cfg),
    )
}

pub fn jsd_nss(a: &Image, b: &Image, cfg: &NssConfig) -> Result<f64> {
    check_images(a, b)?;
    cfg.validate()?;
    let (pa, ma) = nss_histograms(a, cfg);
    let (pb, mb) = nss_histograms(b, cfg);
    let d = jsd(&pa, &pb)?;
    if cfg.include_mscn {
        Ok(0.5 * (d + jsd(&ma, &mb)?))
    } else {
        Ok(d)
    }
}

/// Metric values of one reference/candidate pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub jsd_nss: f64,
}

pub fn evaluate_pair(
    reference: &Image,
    candidate: &Image,
    loss_cfg: &RemovalLossConfig,
    nss: &NssConfig,
) -> Result<PairMetrics> {
    Ok(PairMetrics {
        psnr_db: psnr(reference, candidate, 1.0)?,
        ssim: ssim(reference, candidate)?,
        ms_ssim: ms_ssim(reference, candidate, loss_cfg)?,
        jsd_nss: jsd_nss(reference, candidate, nss)?,
    })
}

/// Evaluates all pairs, in parallel when enabled; output order follows input.
pub fn evaluate_batch(
    pairs: &[(&Image, &Image)],
    loss_cfg: &RemovalLossConfig,
    nss: &NssConfig,
) -> Result<Vec<PairMetrics>> {
    par::map_slice(pairs, |(r, c)| evaluate_pair(r, c, loss_cfg, nss))
        .into_iter()
        .collect()
}

/// Serializes non-finite floats as strings (`"inf"`, `"-inf"`, `"nan"`).
mod float_or_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_float(*v))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub level: Option<f64>,
    pub image: String,
    #[serde(with = "float_or_string")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub jsd_nss: f64,
}

impl MetricRow {
    pub fn new(dataset: &str, level: Option<f64>, image: &str, m: PairMetrics) -> Self {
        Self {
            dataset: dataset.to_string(),
            level,
            image: image.to_string(),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            ms_ssim: m.ms_ssim,
            jsd_nss: m.jsd_nss,
        }
    }
}

/// Per-image rows plus one mean row per `(dataset, level)` group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub aggregates: Vec<MetricRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut groups: Vec<(String, Option<f64>, Vec<&MetricRow>)> = Vec::new();
        for r in &rows {
            match groups
                .iter_mut()
                .find(|(d, l, _)| *d == r.dataset && *l == r.level)
            {
                Some(g) => g.2.push(r),
                None => groups.push((r.dataset.clone(), r.level, vec![r])),
            }
        }
        let aggregates = groups
            .into_iter()
            .map(|(dataset, level, members)| {
                let n = members.len() as f64;
                let mean = |f: fn(&MetricRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
                MetricRow {
                    dataset,
                    level,
                    image: "mean".into(),
                    psnr_db: mean(|r| r.psnr_db),
                    ssim: mean(|r| r.ssim),
                    ms_ssim: mean(|r| r.ms_ssim),
                    jsd_nss: mean(|r| r.jsd_nss),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,level,image,psnr_db,ssim,ms_ssim,jsd_nss\n");
        for r in self.rows.iter().chain(&self.aggregates) {
            let level = r.level.map(|l| format!("{l}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                csv_field(&r.dataset),
                level,
                csv_field(&r.image),
                format_float(r.psnr_db),
                format_float(r.ssim),
                format_float(r.ms_ssim),
                format_float(r.jsd_nss)
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Dataset × level tables: PSNR (dB) / SSIM, then JSD-NSS.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>18} {:>12}",
            "dataset", "level", "PSNR (dB) / SSIM", "JSD-NSS"
        );
        for r in &self.aggregates {
            let level = r
                .level
                .map(|l| format!("{l:.3}"))
                .unwrap_or_else(|| "-".into());
            let psnr = if r.psnr_db.is_finite() {
                format!("{:.2}", r.psnr_db)
            } else {
                format_float(r.psnr_db)
            };
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>18} {:>12.6}",
                r.dataset,
                level,
                format!("{psnr} / {:.3}", r.ssim),
                r.jsd_nss
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Line plot of histograms (one color per curve) on a white RGB canvas.
pub fn plot_histograms(hists: &[Vec<f64>], height: usize, width: usize) -> Image {
    const COLORS: [[f32; 3]; 6] = [
        [0.85, 0.1, 0.1],
        [0.1, 0.35, 0.85],
        [0.1, 0.6, 0.2],
        [0.8, 0.5, 0.0],
        [0.5, 0.1, 0.6],
        [0.2, 0.2, 0.2],
    ];
    let mut img = Image::filled(height, width, 3, 1.0);
    let peak = hists
        .iter()
        .flat_map(|h| h.iter().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for (k, h) in hists.iter().enumerate() {
        if h.len() < 2 {
            continue;
        }
        let color = COLORS[k % COLORS.len()];
        let to_y = |v: f64| ((1.0 - v / peak) * (height - 1) as f64).round() as usize;
        for x in 0..width {
            let t = x as f64 / (width - 1).max(1) as f64 * (h.len() - 1) as f64;
            let (i, f) = (t.floor() as usize, t.fract());
            let v = if i + 1 < h.len() {
                h[i] * (1.0 - f) + h[i + 1] * f
            } else {
                h[i]
            };
            let y = to_y(v);
            for (c, &col) in color.iter().enumerate() {
                img.set(y, x, c, col);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::{render_grain, GrainParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.gen::<f32>())
    }

    #[test]
    fn psnr_cases() {
        let z = Image::filled(8, 8, 1, 0.0);
        assert_eq!(psnr(&z, &z, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&z, &Image::filled(8, 8, 1, 1.0), 1.0).unwrap().abs() < 1e-9);
        // values chosen so the squared error is exactly 0.01 in f64
        let a = Image::filled(4, 4, 1, 0.25);
        let b = Image::filled(4, 4, 1, 0.35);
        let d = 0.35f32 as f64 - 0.25f32 as f64;
        let expected = 10.0 * (1.0 / (d * d)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!(matches!(
            psnr(&a, &Image::filled(4, 5, 1, 0.0), 1.0),
            Err(Error::Contract(_))
        ));
    }

    /// Per-pixel SSIM from explicitly reflected 11×11 windows.
    fn ssim_oracle(x: &Image, y: &Image) -> f64 {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let g: Vec<f64> = (-5..=5)
            .map(|i: isize| (-((i * i) as f64) / 4.5).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let refl = |mut i: isize, n: isize| loop {
            if i < 0 {
                i = -i
            } else if i >= n {
                i = 2 * (n - 1) - i
            } else {
                break i as usize;
            }
        };
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for c in 0..x.channels() {
            for py in 0..h {
                for px in 0..w {
                    let mut m = [0.0f64; 5];
                    for dy in -5..=5isize {
                        for dx in -5..=5isize {
                            let wt = g[(dy + 5) as usize] * g[(dx + 5) as usize] / (s * s);
                            let (yy, xx) = (refl(py + dy, h), refl(px + dx, w));
                            let a = x.get(yy, xx, c) as f64;
                            let b = y.get(yy, xx, c) as f64;
                            m[0] += wt * a;
                            m[1] += wt * b;
                            m[2] += wt * a * a;
                            m[3] += wt * b * b;
                            m[4] += wt * a * b;
                        }
                    }
                    let (vx, vy, cov) =
                        (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                    total += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2)
                        / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
                }
            }
        }
        total / (h * w) as f64 / x.channels() as f64
    }

    #[test]
    fn ssim_against_oracle() {
        let a = Image::filled(12, 12, 1, 0.2);
        let b = Image::filled(12, 12, 1, 0.7);
        let v = ssim(&a, &b).unwrap();
        assert!(v < 1.0);
        assert!((v - ssim_oracle(&a, &b)).abs() < 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        for seed in 0..10 {
            let x = random_image(seed, 13, 17, 1 + 2 * (seed as usize % 2));
            let y = random_image(seed + 100, 13, 17, x.channels());
            let v = ssim(&x, &y).unwrap();
            assert!((v - ssim_oracle(&x, &y)).abs() < 1e-6);
            assert!((v - ssim(&y, &x).unwrap()).abs() < 1e-12);
            let p = psnr(&x, &y, 1.0).unwrap();
            let mse: f64 = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                / x.data().len() as f64;
            assert!((p - (-10.0 * mse.log10())).abs() < 1e-6);
        }
    }

    #[test]
    fn mscn_cases() {
        let cfg = NssConfig::default();
        let flat = mscn(&Plane::new(9, 9, vec![0.4; 81]), &cfg);
        assert!(flat.data.iter().all(|&v| v == 0.0));

        let board = Plane::new(
            10,
            10,
            (0..100).map(|i| ((i / 10 + i % 10) % 2) as f64).collect(),
        );
        let coef = mscn(&board, &cfg);
        let refl = |mut i: isize, n: isize| loop {
            if i < 0 {
                i = -i
            } else if i >= n {
                i = 2 * (n - 1) - i
            } else {
                break i as usize;
            }
        };
        let g: Vec<f64> = (-3..=3)
            .map(|i: isize| (-((i * i) as f64) / (2.0 * (7.0f64 / 6.0).powi(2))).exp())
            .collect();
        let s: f64 = g.iter().sum();
        for y in 0..10isize {
            for x in 0..10isize {
                let (mut mu, mut sq) = (0.0, 0.0);
                for dy in -3..=3isize {
                    for dx in -3..=3isize {
                        let wt = g[(dy + 3) as usize] * g[(dx + 3) as usize] / (s * s);
                        let v = board.at(refl(y + dy, 10), refl(x + dx, 10));
                        mu += wt * v;
                        sq += wt * v * v;
                    }
                }
                let v = board.at(y as usize, x as usize);
                let expect = (v - mu) / ((sq - mu * mu).max(0.0).sqrt() + 1.0 / 255.0);
                let got = coef.at(y as usize, x as usize);
                assert!((got - expect).abs() < 1e-9);
                assert_eq!(got > 0.0, v > 0.5);
            }
        }
        // a constant offset leaves coefficients unchanged
        let shifted = mscn(&board.map(|v| v * 0.5 + 0.2), &cfg);
        let base = mscn(&board.map(|v| v * 0.5), &cfg);
        for (a, b) in shifted.data.iter().zip(&base.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_product_cases() {
        assert!(diagonal_products(&Plane::zeros(4, 4), false)
            .iter()
            .all(|&v| v == 0.0));
        let m = Plane::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(diagonal_products(&m, false), vec![4.0]);
        assert_eq!(diagonal_products(&m, true), vec![4.0, 6.0]);
        assert!(diagonal_products(&Plane::zeros(1, 5), false).is_empty());
        let alt = Plane::new(
            5,
            6,
            (0..30)
                .map(|i| if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
        );
        let p = diagonal_products(&alt, false);
        let mut k = 0;
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(p[k], alt.at(i, j) * alt.at(i + 1, j + 1));
                assert_eq!(p[k], 1.0);
                k += 1;
            }
        }
    }

    #[test]
    fn jsd_cases() {
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(
            jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            std::f64::consts::LN_2
        );
        let expect = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        assert!((jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.2158).abs() < 1e-4);
        assert!(matches!(jsd(&[1.0], &[0.5, 0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn histogram_is_normalized_and_clipped() {
        let cfg = NssConfig::default();
        let h = histogram(&[-5.0, 0.0, 5.0, 1.99], &cfg);
        assert_eq!(h.len(), 201);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h[0] > 0.2 && h[200] > 0.4);
    }

    #[test]
    fn jsd_nss_separates_levels() {
        let clean = Image::from_fn(64, 64, 1, |y, x, _| 0.3 + 0.4 * ((x + y) as f32 / 128.0));
        let p = |mu, seed| GrainParams::default().with_level(mu).with_seed(seed);
        let low_a = render_grain(&clean, &p(0.010, 1)).unwrap();
        let low_b = render_grain(&clean, &p(0.010, 2)).unwrap();
        let high = render_grain(&clean, &p(0.200, 3)).unwrap();
        let cfg = NssConfig::default();
        assert_eq!(jsd_nss(&clean, &clean, &cfg).unwrap(), 0.0);
        let same = jsd_nss(&low_a, &low_b, &cfg).unwrap();
        assert!(jsd_nss(&clean, &low_a, &cfg).unwrap() > same);
        assert!(jsd_nss(&low_a, &high, &cfg).unwrap() > same);
    }

    #[test]
    fn report_serialization() {
        let m = PairMetrics {
            psnr_db: f64::INFINITY,
            ssim: 1.0,
            ms_ssim: 1.0,
            jsd_nss: 0.0,
        };
        let rows = vec![
            MetricRow::new("toy", Some(0.05), "a.png", m),
            MetricRow::new(
                "toy",
                Some(0.05),
                "b.png",
                PairMetrics { psnr_db: 30.0, ..m },
            ),
        ];
        let report = MetricReport::from_rows(rows);
        assert_eq!(report.aggregates.len(), 1);
        assert_eq!(report.aggregates[0].psnr_db, f64::INFINITY);
        let json = report.to_json().unwrap();
        assert!(json.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.contains("toy,0.05,a.png,inf,1,1,0"));
        assert!(report.table().contains("inf / 1.000"));
    }

    #[test]
    fn plot_has_requested_size() {
        let cfg = NssConfig::default();
        let h = histogram(&[0.0, 0.1, -0.1], &cfg);
        let img = plot_histograms(&[h.clone(), h], 60, 100);
        assert_eq!(img.dims(), (60, 100, 3));
        assert!(img.data().iter().any(|&v| v < 1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn jsd_nss_properties(sa: u64, sb: u64) {
            let a = random_image(sa, 16, 16, 3);
            let b = random_image(sb, 16, 16, 3);
            let cfg = NssConfig::default();
            let ab = jsd_nss(&a, &b, &cfg).unwrap();
            prop_assert_eq!(jsd_nss(&a, &a, &cfg).unwrap(), 0.0);
            prop_assert!((ab - jsd_nss(&b, &a, &cfg).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
        }

        #[test]
        fn jsd_bounds(p in proptest::collection::vec(0.0f64..1.0, 2..20), seed: u64) {
            let total: f64 = p.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = p.iter().map(|v| (v + 1e-9 / p.len() as f64) / total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = (0..p.len()).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = q.iter().sum();
            let q: Vec<f64> = q.iter().map(|v| v / s).collect();
            let d = jsd(&p, &q).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&d));
            prop_assert!((d - jsd(&q, &p).unwrap()).abs() < 1e-12);
        }
    }
}
