//! Training objectives with analytic gradients.
//!
//! Image losses work on `f64` planes (one per sample and channel) and return
//! the gradient with respect to the second argument, the prediction.
//! Adversarial terms work on discriminator logit maps.

use std::collections::HashSet;
use std::sync::{Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{avg_pool2, avg_pool2_adjoint, blur, blur_adjoint, gaussian_kernel, Plane};
use crate::image::Image;
use crate::nn::{sigmoid, Tensor};
use crate::par;

/// Per-scale weights of the original multi-scale SSIM formulation.
pub const CLASSICAL_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Coarsest MS-SSIM scale must be at least this many pixels on its short side.
pub const MIN_COARSE_SIZE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisLossConfig {
    pub lambda_l1: f64,
}

impl Default for SynthesisLossConfig {
    fn default() -> Self {
        Self { lambda_l1: 0.1 }
    }
}

impl SynthesisLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Param(format!(
                "lambda_l1 {} must be >= 0",
                self.lambda_l1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemovalLossConfig {
    pub gamma: f64,
    pub gaussian_size: usize,
    pub gaussian_std: f64,
    pub ms_ssim_scales: usize,
    /// Use the classical per-scale exponents instead of all ones.
    pub classical_weights: bool,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for RemovalLossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.84,
            gaussian_size: 11,
            gaussian_std: 1.5,
            ms_ssim_scales: 5,
            classical_weights: false,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl RemovalLossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.gaussian_size == 0 || self.gaussian_size.is_multiple_of(2) {
            return bad(format!("gaussian_size {} must be odd", self.gaussian_size));
        }
        if !(self.gaussian_std > 0.0) {
            return bad("gaussian_std must be > 0".into());
        }
        if self.ms_ssim_scales == 0 {
            return bad("ms_ssim_scales must be >= 1".into());
        }
        if self.classical_weights && self.ms_ssim_scales > CLASSICAL_WEIGHTS.len() {
            return bad(format!(
                "classical weights exist for at most {} scales",
                CLASSICAL_WEIGHTS.len()
            ));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return bad("k1, k2 and dynamic_range must be > 0".into());
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn taps(&self) -> Vec<f64> {
        gaussian_kernel(self.gaussian_size, self.gaussian_std)
    }

    /// Number of scales actually used for an `h×w` input: the configured
    /// count, lowered until the coarsest scale keeps [`MIN_COARSE_SIZE`]
    /// pixels.
    pub fn effective_scales(&self, h: usize, w: usize) -> Result<usize> {
        let size = h.min(w);
        if size < MIN_COARSE_SIZE {
            return Err(Error::Scale {
                size,
                scales: self.ms_ssim_scales,
            });
        }
        let mut m = self.ms_ssim_scales;
        while m > 1 && (size >> (m - 1)) < MIN_COARSE_SIZE {
            m -= 1;
        }
        if m < self.ms_ssim_scales {
            warn_once(self.ms_ssim_scales, m, size);
        }
        Ok(m)
    }

    fn exponents(&self, m: usize) -> Vec<f64> {
        if !self.classical_weights {
            return vec![1.0; m];
        }
        let w = &CLASSICAL_WEIGHTS[..m];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

fn warn_once(requested: usize, used: usize, size: usize) {
    static SEEN: OnceLock<Mutex<HashSet<(usize, usize)>>> = OnceLock::new();
    let seen = SEEN.get_or_init(Default::default);
    if seen
        .lock()
        .map(|mut s| s.insert((requested, size)))
        .unwrap_or(false)
    {
        log::warn!("MS-SSIM: {size}px input too small for {requested} scales, using {used}");
    }
}

/// Splits an NCHW tensor into `N·C` planes.
pub fn tensor_planes(t: &Tensor) -> Vec<Plane> {
    let [_, _, h, w] = t.shape();
    t.data()
        .chunks(h * w)
        .map(|c| Plane::from_f32(h, w, c))
        .collect()
}

/// Inverse of [`tensor_planes`].
pub fn planes_tensor(shape: [usize; 4], planes: &[Plane]) -> Result<Tensor> {
    let data = planes
        .iter()
        .flat_map(|p| p.data.iter().map(|&v| v as f32))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn image_planes(img: &Image) -> Vec<Plane> {
    img.planes()
        .iter()
        .map(|p| Plane::from_f32(img.height(), img.width(), p))
        .collect()
}

fn check_pair(a: &[Plane], b: &[Plane]) -> Result<()> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Contract(format!(
            "loss inputs have {} and {} planes",
            a.len(),
            b.len()
        )));
    }
    for (p, q) in a.iter().zip(b) {
        if (p.h, p.w) != (q.h, q.w) || p.data.is_empty() {
            return Err(Error::Contract(format!(
                "loss inputs differ in shape: {}x{} vs {}x{}",
                p.h, p.w, q.h, q.w
            )));
        }
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn l1_loss(a: &[Plane], b: &[Plane]) -> Result<f64> {
    l1_loss_grad(a, b).map(|(v, _)| v)
}

/// Mean absolute difference and its gradient with respect to `b`.
pub fn l1_loss_grad(a: &[Plane], b: &[Plane]) -> Result<(f64, Vec<Plane>)> {
    check_pair(a, b)?;
    let n: usize = a.iter().map(|p| p.data.len()).sum();
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(a.len());
    for (p, q) in a.iter().zip(b) {
        total += p
            .data
            .iter()
            .zip(&q.data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
        grads.push(q.zip(p, |y, x| sign(y - x) * inv));
    }
    Ok((total * inv, grads))
}

/// Discriminator and generator terms for one batch of logit maps.
#[derive(Clone, Debug)]
pub struct AdversarialTerms {
    pub d_loss: f64,
    pub g_loss: f64,
    /// `∂d_loss/∂real`.
    pub d_real_grad: Tensor,
    /// `∂d_loss/∂fake`.
    pub d_fake_grad: Tensor,
    /// `∂g_loss/∂fake`.
    pub g_fake_grad: Tensor,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of sigmoid(`logits`) against a constant
/// target, with its gradient.
pub fn bce_with_logits(logits: &Tensor, target_real: bool) -> (f64, Tensor) {
    let n = logits.data().len().max(1) as f64;
    let sum: f64 = logits
        .data()
        .iter()
        .map(|&z| softplus(if target_real { -(z as f64) } else { z as f64 }))
        .sum();
    let inv = (1.0 / n) as f32;
    let grad = if target_real {
        logits.map(|z| -sigmoid(-z) * inv)
    } else {
        logits.map(|z| sigmoid(z) * inv)
    };
    (sum / n, grad)
}

/// `d_loss = ½(BCE(real, 1) + BCE(fake, 0))`, `g_loss = BCE(fake, 1)`, each
/// averaged over the score map.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> Result<(f64, f64)> {
    adversarial_terms(real, fake).map(|t| (t.d_loss, t.g_loss))
}

pub fn adversarial_terms(real: &Tensor, fake: &Tensor) -> Result<AdversarialTerms> {
    if real.shape() != fake.shape() || real.data().is_empty() {
        return Err(Error::Contract(format!(
            "score maps differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (dr, gr) = bce_with_logits(real, true);
    let (df, gf) = bce_with_logits(fake, false);
    let (g, gg) = bce_with_logits(fake, true);
    Ok(AdversarialTerms {
        d_loss: 0.5 * (dr + df),
        g_loss: g,
        d_real_grad: gr.scale(0.5),
        d_fake_grad: gf.scale(0.5),
        g_fake_grad: gg,
    })
}

pub fn synthesis_objective(g_loss: f64, l1: f64, cfg: &SynthesisLossConfig) -> f64 {
    g_loss + cfg.lambda_l1 * l1
}

/// Local statistics of one scale.
struct ScaleStats {
    mu_x: Plane,
    mu_y: Plane,
    /// Luminance numerator and denominator.
    l_num: Plane,
    l_den: Plane,
    /// Contrast-structure numerator and denominator.
    cs_num: Plane,
    cs_den: Plane,
}

impl ScaleStats {
    fn new(x: &Plane, y: &Plane, taps: &[f64], c1: f64, c2: f64) -> Self {
        let mu_x = blur(x, taps);
        let mu_y = blur(y, taps);
        let xx = blur(&x.map(|v| v * v), taps);
        let yy = blur(&y.map(|v| v * v), taps);
        let xy = blur(&x.zip(y, |a, b| a * b), taps);
        let n = x.data.len();
        let mut s = ScaleStats {
            l_num: Plane::zeros(x.h, x.w),
            l_den: Plane::zeros(x.h, x.w),
            cs_num: Plane::zeros(x.h, x.w),
            cs_den: Plane::zeros(x.h, x.w),
            mu_x,
            mu_y,
        };
        for i in 0..n {
            let (mx, my) = (s.mu_x.data[i], s.mu_y.data[i]);
            s.l_num.data[i] = 2.0 * mx * my + c1;
            s.l_den.data[i] = mx * mx + my * my + c1;
            s.cs_num.data[i] = 2.0 * (xy.data[i] - mx * my) + c2;
            s.cs_den.data[i] = (xx.data[i] - mx * mx) + (yy.data[i] - my * my) + c2;
        }
        s
    }

    fn l_map(&self) -> Plane {
        self.l_num.zip(&self.l_den, |a, b| a / b)
    }

    fn cs_map(&self) -> Plane {
        self.cs_num.zip(&self.cs_den, |a, b| a / b)
    }

    /// Gradient with respect to `y` of `Σ g·cs`.
    fn cs_grad(&self, x: &Plane, y: &Plane, g: f64, taps: &[f64]) -> Plane {
        let a = self.cs_den.map(|b| g / b);
        let b = self
            .cs_num
            .zip(&self.cs_den, |num, den| -g * num / (den * den));
        let ga = blur_adjoint(&a, taps);
        let gam = blur_adjoint(&a.zip(&self.mu_x, |u, v| u * v), taps);
        let gb = blur_adjoint(&b, taps);
        let gbm = blur_adjoint(&b.zip(&self.mu_y, |u, v| u * v), taps);
        let mut out = Plane::zeros(x.h, x.w);
        for i in 0..out.data.len() {
            out.data[i] =
                2.0 * (x.data[i] * ga.data[i] - gam.data[i] + y.data[i] * gb.data[i] - gbm.data[i]);
        }
        out
    }

    /// Gradient with respect to `y` of `Σ g·l`.
    fn l_grad(&self, g: f64, taps: &[f64]) -> Plane {
        let mut dmu = Plane::zeros(self.mu_x.h, self.mu_x.w);
        for i in 0..dmu.data.len() {
            let (mx, my) = (self.mu_x.data[i], self.mu_y.data[i]);
            let (num, den) = (self.l_num.data[i], self.l_den.data[i]);
            dmu.data[i] = g * (2.0 * mx / den - 2.0 * num * my / (den * den));
        }
        blur_adjoint(&dmu, taps)
    }
}

/// Luminance and contrast-structure maps of single-scale SSIM.
pub(crate) fn ssim_maps(x: &Plane, y: &Plane, taps: &[f64], c1: f64, c2: f64) -> (Plane, Plane) {
    let s = ScaleStats::new(x, y, taps, c1, c2);
    (s.l_map(), s.cs_map())
}

/// MS-SSIM of one plane pair with `m` scales, optionally with the gradient
/// with respect to `y`.
fn ms_ssim_plane(
    x: &Plane,
    y: &Plane,
    cfg: &RemovalLossConfig,
    m: usize,
    want_grad: bool,
) -> (f64, Option<Plane>) {
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    for j in 1..m {
        xs.push(avg_pool2(&xs[j - 1]));
        ys.push(avg_pool2(&ys[j - 1]));
    }
    let stats: Vec<ScaleStats> = (0..m)
        .map(|j| ScaleStats::new(&xs[j], &ys[j], &taps, c1, c2))
        .collect();
    // factors: cs_0 .. cs_{m-1}, then l at the coarsest scale
    let mut factors: Vec<f64> = stats.iter().map(|s| s.cs_map().mean()).collect();
    factors.push(stats[m - 1].l_map().mean());
    let mut exps = cfg.exponents(m);
    exps.push(exps[m - 1]);
    let clamp = cfg.classical_weights;
    let term = |f: f64, e: f64| {
        if clamp {
            f.max(0.0).powf(e)
        } else {
            f
        }
    };
    let value: f64 = factors
        .iter()
        .zip(&exps)
        .map(|(&f, &e)| term(f, e))
        .product();
    if !want_grad {
        return (value, None);
    }
    let dfactor: Vec<f64> = (0..=m)
        .map(|i| {
            let others: f64 = (0..=m)
                .filter(|&k| k != i)
                .map(|k| term(factors[k], exps[k]))
                .product();
            let local = if !clamp {
                1.0
            } else if factors[i] > 0.0 {
                exps[i] * factors[i].powf(exps[i] - 1.0)
            } else {
                0.0
            };
            others * local
        })
        .collect();
    let mut grad: Option<Plane> = None;
    for j in (0..m).rev() {
        let n = xs[j].data.len() as f64;
        let mut g = stats[j].cs_grad(&xs[j], &ys[j], dfactor[j] / n, &taps);
        if j == m - 1 {
            let gl = stats[j].l_grad(dfactor[m] / n, &taps);
            g = g.zip(&gl, |a, b| a + b);
        }
        if let Some(coarse) = grad {
            let up = avg_pool2_adjoint(&coarse, xs[j].h, xs[j].w);
            g = g.zip(&up, |a, b| a + b);
        }
        grad = Some(g);
    }
    (value, grad)
}

fn ms_ssim_impl(
    x: &[Plane],
    y: &[Plane],
    cfg: &RemovalLossConfig,
    want_grad: bool,
) -> Result<(f64, Vec<Plane>)> {
    check_pair(x, y)?;
    cfg.validate()?;
    let p = x.len() as f64;
    let scales = x
        .iter()
        .map(|a| cfg.effective_scales(a.h, a.w))
        .collect::<Result<Vec<_>>>()?;
    let per_plane = par::map_range(x.len(), |i| {
        ms_ssim_plane(&x[i], &y[i], cfg, scales[i], want_grad)
    });
    let value = per_plane.iter().map(|(v, _)| v).sum::<f64>() / p;
    let grads = per_plane
        .into_iter()
        .filter_map(|(_, g)| g.map(|g| g.map(|v| v / p)))
        .collect();
    Ok((value, grads))
}

/// Multi-scale SSIM averaged over planes. Symmetric; 1 at identity.
pub fn ms_ssim(x: &[Plane], xhat: &[Plane], cfg: &RemovalLossConfig) -> Result<f64> {
    ms_ssim_impl(x, xhat, cfg, false).map(|(v, _)| v)
}

pub fn ms_ssim_loss(x: &[Plane], xhat: &[Plane], cfg: &RemovalLossConfig) -> Result<f64> {
    ms_ssim(x, xhat, cfg).map(|v| 1.0 - v)
}

pub fn ms_ssim_loss_grad(
    x: &[Plane],
    xhat: &[Plane],
    cfg: &RemovalLossConfig,
) -> Result<(f64, Vec<Plane>)> {
    let (v, g) = ms_ssim_impl(x, xhat, cfg, true)?;
    Ok((1.0 - v, g.into_iter().map(|p| p.map(|v| -v)).collect()))
}

pub fn gaussian_weighted_l1(x: &[Plane], xhat: &[Plane], cfg: &RemovalLossConfig) -> Result<f64> {
    gaussian_weighted_l1_grad(x, xhat, cfg).map(|(v, _)| v)
}

/// Per-pixel absolute error blurred by the loss window, averaged per plane
/// and then over planes.
pub fn gaussian_weighted_l1_grad(
    x: &[Plane],
    xhat: &[Plane],
    cfg: &RemovalLossConfig,
) -> Result<(f64, Vec<Plane>)> {
    check_pair(x, xhat)?;
    cfg.validate()?;
    let taps = cfg.taps();
    let p = x.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(x.len());
    for (a, b) in x.iter().zip(xhat) {
        let n = a.data.len() as f64;
        let diff = a.zip(b, |u, v| (u - v).abs());
        total += blur(&diff, &taps).mean();
        let back = blur_adjoint(
            &Plane::new(a.h, a.w, vec![1.0 / (n * p); a.data.len()]),
            &taps,
        );
        grads.push(b.zip(a, |v, u| sign(v - u)).zip(&back, |s, w| s * w));
    }
    Ok((total / p, grads))
}

pub fn removal_mix_loss(x: &[Plane], xhat: &[Plane], cfg: &RemovalLossConfig) -> Result<f64> {
    removal_mix_loss_grad(x, xhat, cfg).map(|(v, _)| v)
}

/// `γ·(1 − MS-SSIM) + (1 − γ)·GL1`.
pub fn removal_mix_loss_grad(
    x: &[Plane],
    xhat: &[Plane],
    cfg: &RemovalLossConfig,
) -> Result<(f64, Vec<Plane>)> {
    let g = cfg.gamma;
    let (ms, ms_grad) = ms_ssim_loss_grad(x, xhat, cfg)?;
    let (gl1, gl1_grad) = gaussian_weighted_l1_grad(x, xhat, cfg)?;
    let grads = ms_grad
        .iter()
        .zip(&gl1_grad)
        .map(|(a, b)| a.zip(b, |u, v| g * u + (1.0 - g) * v))
        .collect();
    Ok((g * ms + (1.0 - g) * gl1, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_planes(seed: u64, count: usize, h: usize, w: usize) -> Vec<Plane> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Plane::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()))
            .collect()
    }

    fn constant(h: usize, w: usize, v: f64) -> Vec<Plane> {
        vec![Plane::new(h, w, vec![v; h * w])]
    }

    /// Direct 2-D evaluation of single-scale MS-SSIM (`l̄ · cs̄`) with an
    /// explicit reflected 11×11 window, independent of the separable path.
    fn oracle_ms_ssim_m1(x: &Plane, y: &Plane) -> f64 {
        let (h, w) = (x.h as isize, x.w as isize);
        let r = 5isize;
        let g: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let refl = |i: isize, n: isize| -> usize {
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i;
                } else if i >= n {
                    i = 2 * (n - 1) - i;
                } else {
                    return i as usize;
                }
            }
        };
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (mut lsum, mut cssum) = (0.0, 0.0);
        for py in 0..h {
            for px in 0..w {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = g[(dy + r) as usize] * g[(dx + r) as usize] / (s * s);
                        let (yy_, xx_) = (refl(py + dy, h), refl(px + dx, w));
                        let a = x.at(yy_, xx_);
                        let b = y.at(yy_, xx_);
                        mx += wgt * a;
                        my += wgt * b;
                        xx += wgt * a * a;
                        yy += wgt * b * b;
                        xy += wgt * a * b;
                    }
                }
                lsum += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                cssum += (2.0 * (xy - mx * my) + c2) / (xx - mx * mx + yy - my * my + c2);
            }
        }
        let n = (h * w) as f64;
        (lsum / n) * (cssum / n)
    }

    fn fd_check(
        f: impl Fn(&[Plane]) -> f64,
        analytic: &[Plane],
        y: &[Plane],
        coords: &[(usize, usize)],
    ) {
        let h = 1e-4;
        for &(p, i) in coords {
            let mut up = y.to_vec();
            up[p].data[i] += h;
            let mut dn = y.to_vec();
            dn[p].data[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            let an = analytic[p].data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-3, "plane {p} index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn l1_examples() {
        let z = constant(4, 4, 0.0);
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &constant(4, 4, 1.0)).unwrap(), 1.0);
        let half = vec![Plane::new(4, 4, (0..16).map(|i| (i % 2) as f64).collect())];
        assert_eq!(l1_loss(&z, &half).unwrap(), 0.5);
        assert!(matches!(
            l1_loss(&z, &constant(4, 5, 0.0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adversarial_examples() {
        let zero = Tensor::zeros(1, 1, 2, 2);
        let (d, g) = adversarial_losses(&zero, &zero).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        let real = Tensor::filled([1, 1, 2, 2], 50.0);
        let fake = Tensor::filled([1, 1, 2, 2], -50.0);
        let (d, _) = adversarial_losses(&real, &fake).unwrap();
        assert!(d < 1e-20);
        let (_, g) = adversarial_losses(&real, &real).unwrap();
        assert!(g < 1e-20);
        assert!(adversarial_losses(&zero, &Tensor::zeros(1, 1, 2, 3)).is_err());
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let r = Tensor::from_vec([1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let f = Tensor::from_vec([1, 1, 2, 2], vec![-0.7, 0.4, 1.5, -2.5]).unwrap();
        let t = adversarial_terms(&r, &f).unwrap();
        let h = 1e-3f32;
        for i in 0..4 {
            let bump = |t: &Tensor, d: f32| {
                let mut t = t.clone();
                t.data_mut()[i] += d;
                t
            };
            let fd_r = (adversarial_losses(&bump(&r, h), &f).unwrap().0
                - adversarial_losses(&bump(&r, -h), &f).unwrap().0)
                / (2.0 * h as f64);
            let fd_f = (adversarial_losses(&r, &bump(&f, h)).unwrap().0
                - adversarial_losses(&r, &bump(&f, -h)).unwrap().0)
                / (2.0 * h as f64);
            let fd_g = (adversarial_losses(&r, &bump(&f, h)).unwrap().1
                - adversarial_losses(&r, &bump(&f, -h)).unwrap().1)
                / (2.0 * h as f64);
            assert!((fd_r - t.d_real_grad.data()[i] as f64).abs() < 1e-4);
            assert!((fd_f - t.d_fake_grad.data()[i] as f64).abs() < 1e-4);
            assert!((fd_g - t.g_fake_grad.data()[i] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn synthesis_objective_arithmetic() {
        let cfg = SynthesisLossConfig::default();
        assert!((synthesis_objective(0.7, 0.1, &cfg) - 0.71).abs() < 1e-15);
        assert_eq!(
            synthesis_objective(0.7, 0.3, &SynthesisLossConfig { lambda_l1: 0.0 }),
            0.7
        );
        assert_eq!(synthesis_objective(0.7, 0.0, &cfg), 0.7);
    }

    #[test]
    fn ms_ssim_identity_and_oracle() {
        let cfg = RemovalLossConfig::default();
        let x = random_planes(1, 2, 32, 32);
        assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let (v, g) = ms_ssim_loss_grad(&x, &x, &cfg).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.iter().all(|p| p.data.iter().all(|v| v.abs() < 1e-12)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = constant(20, 20, 0.5);
        let y = vec![Plane::new(
            20,
            20,
            (0..400).map(|_| 0.5 + rng.gen_range(-0.1..0.1)).collect(),
        )];
        let one = RemovalLossConfig {
            ms_ssim_scales: 1,
            ..cfg
        };
        let v = ms_ssim(&x, &y, &one).unwrap();
        assert!(v < 1.0);
        assert!((v - oracle_ms_ssim_m1(&x[0], &y[0])).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_scale_handling() {
        let cfg = RemovalLossConfig::default();
        assert_eq!(cfg.effective_scales(256, 256).unwrap(), 5);
        assert_eq!(cfg.effective_scales(96, 200).unwrap(), 5);
        assert_eq!(cfg.effective_scales(64, 64).unwrap(), 4);
        assert_eq!(
            RemovalLossConfig {
                ms_ssim_scales: 3,
                ..cfg
            }
            .effective_scales(24, 24)
            .unwrap(),
            3
        );
        assert!(matches!(
            cfg.effective_scales(5, 64),
            Err(Error::Scale { .. })
        ));
    }

    #[test]
    fn classical_weights_identity() {
        let cfg = RemovalLossConfig {
            classical_weights: true,
            ..Default::default()
        };
        let x = random_planes(3, 1, 96, 96);
        assert!((ms_ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let y = random_planes(4, 1, 96, 96);
        let v = ms_ssim(&x, &y, &cfg).unwrap();
        assert!((0.0..1.0).contains(&v));
    }

    #[test]
    fn gaussian_l1_examples() {
        let cfg = RemovalLossConfig::default();
        let x = constant(16, 16, 0.3);
        assert_eq!(gaussian_weighted_l1(&x, &x, &cfg).unwrap(), 0.0);
        let v = gaussian_weighted_l1(&x, &constant(16, 16, 0.5), &cfg).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        // impulse far from the border keeps its mass
        let mut y = constant(32, 32, 0.3);
        y[0].data[16 * 32 + 16] += 0.5;
        let v = gaussian_weighted_l1(&x_32(), &y, &cfg).unwrap();
        assert!((v * 1024.0 - 0.5).abs() < 1e-12);
    }

    fn x_32() -> Vec<Plane> {
        constant(32, 32, 0.3)
    }

    #[test]
    fn mix_loss_endpoints() {
        let x = random_planes(5, 1, 24, 24);
        let y = random_planes(6, 1, 24, 24);
        let base = RemovalLossConfig {
            ms_ssim_scales: 3,
            ..Default::default()
        };
        assert_eq!(removal_mix_loss(&x, &x, &base).unwrap(), 0.0);
        let g0 = RemovalLossConfig { gamma: 0.0, ..base };
        assert_eq!(
            removal_mix_loss(&x, &y, &g0).unwrap(),
            gaussian_weighted_l1(&x, &y, &base).unwrap()
        );
        let g1 = RemovalLossConfig { gamma: 1.0, ..base };
        assert_eq!(
            removal_mix_loss(&x, &y, &g1).unwrap(),
            ms_ssim_loss(&x, &y, &base).unwrap()
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_planes(11, 2, 24, 24);
        let y = random_planes(12, 2, 24, 24);
        let coords: Vec<(usize, usize)> = (0..12)
            .map(|k| (k % 2, (k * 97 + 13) % 576))
            .filter(|&(p, i)| (x[p].data[i] - y[p].data[i]).abs() > 1e-3)
            .collect();
        let (_, g) = l1_loss_grad(&x, &y).unwrap();
        fd_check(|y| l1_loss(&x, y).unwrap(), &g, &y, &coords);
        for m in [1, 3] {
            let cfg = RemovalLossConfig {
                ms_ssim_scales: m,
                ..Default::default()
            };
            let (_, g) = gaussian_weighted_l1_grad(&x, &y, &cfg).unwrap();
            fd_check(
                |y| gaussian_weighted_l1(&x, y, &cfg).unwrap(),
                &g,
                &y,
                &coords,
            );
            let (_, g) = ms_ssim_loss_grad(&x, &y, &cfg).unwrap();
            fd_check(|y| ms_ssim_loss(&x, y, &cfg).unwrap(), &g, &y, &coords);
            let (_, g) = removal_mix_loss_grad(&x, &y, &cfg).unwrap();
            fd_check(|y| removal_mix_loss(&x, y, &cfg).unwrap(), &g, &y, &coords);
            let classical = RemovalLossConfig {
                classical_weights: true,
                ..cfg
            };
            let (_, g) = ms_ssim_loss_grad(&x, &y, &classical).unwrap();
            fd_check(
                |y| ms_ssim_loss(&x, y, &classical).unwrap(),
                &g,
                &y,
                &coords,
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_properties(seed_a: u64, seed_b: u64, gamma in 0.0f64..=1.0) {
            let a = random_planes(seed_a, 1, 24, 24);
            let b = random_planes(seed_b, 1, 24, 24);
            let cfg = RemovalLossConfig { gamma, ms_ssim_scales: 3, ..Default::default() };
            let ms_ab = ms_ssim(&a, &b, &cfg).unwrap();
            prop_assert!((ms_ab - ms_ssim(&b, &a, &cfg).unwrap()).abs() <= 1e-9);
            let l1 = l1_loss(&a, &b).unwrap();
            prop_assert!((l1 - l1_loss(&b, &a).unwrap()).abs() <= 1e-15);
            let ms = ms_ssim_loss(&a, &b, &cfg).unwrap();
            let gl = gaussian_weighted_l1(&a, &b, &cfg).unwrap();
            let mix = removal_mix_loss(&a, &b, &cfg).unwrap();
            prop_assert!(l1 >= 0.0 && ms >= 0.0 && gl >= 0.0 && mix >= 0.0);
            prop_assert!(mix >= ms.min(gl) - 1e-12 && mix <= ms.max(gl) + 1e-12);
            prop_assert_eq!(removal_mix_loss(&a, &a, &cfg).unwrap(), 0.0);
        }
    }
}
