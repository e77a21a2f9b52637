//! Procedural test images: smooth gradients, flat shapes with soft edges and
//! band-limited texture. Stand-ins for natural photographs in tests, demos
//! and the CLI corpus generator.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{save_image, BitDepth, Image};
use crate::rng;

/// Value noise on a `cells×cells` lattice with smoothstep interpolation.
fn value_noise(rng: &mut ChaCha8Rng, cells: usize, h: usize, w: usize) -> Vec<f32> {
    let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f32 / h as f32 * cells as f32;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / w as f32 * cells as f32;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

enum Shape {
    Ellipse {
        cy: f32,
        cx: f32,
        ry: f32,
        rx: f32,
    },
    Rect {
        top: f32,
        left: f32,
        bottom: f32,
        right: f32,
    },
}

impl Shape {
    /// Signed inside-ness in pixels (positive inside).
    fn depth(&self, y: f32, x: f32) -> f32 {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let d = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
                (1.0 - d) * ry.min(rx)
            }
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => (y - top).min(bottom - y).min(x - left).min(right - x),
        }
    }
}

/// One procedural image with values in `[0.05, 0.95]`.
pub fn natural_image(height: usize, width: usize, channels: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(rng::key(seed, &[0x1a6e]));
    let (hf, wf) = (height as f32, width as f32);
    let base: Vec<[f32; 3]> = (0..2).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let angle = rng.gen::<f32>() * 2.0 * PI;
    let (ca, sa) = (angle.cos(), angle.sin());

    let n_shapes = rng.gen_range(3..8);
    let shapes: Vec<(Shape, [f32; 3], f32)> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Ellipse {
                    cy: rng.gen::<f32>() * hf,
                    cx: rng.gen::<f32>() * wf,
                    ry: (0.08 + 0.3 * rng.gen::<f32>()) * hf,
                    rx: (0.08 + 0.3 * rng.gen::<f32>()) * wf,
                }
            } else {
                let (t, l) = (rng.gen::<f32>() * hf, rng.gen::<f32>() * wf);
                Shape::Rect {
                    top: t,
                    left: l,
                    bottom: t + (0.1 + 0.4 * rng.gen::<f32>()) * hf,
                    right: l + (0.1 + 0.4 * rng.gen::<f32>()) * wf,
                }
            };
            let color = [rng.gen(), rng.gen(), rng.gen()];
            let softness = 0.5 + 2.0 * rng.gen::<f32>();
            (shape, color, softness)
        })
        .collect();

    let coarse = value_noise(&mut rng, 4, height, width);
    let fine = value_noise(&mut rng, (width / 6).max(2), height, width);
    let texture_amp = 0.02 + 0.08 * rng.gen::<f32>();
    let stripes = rng.gen_bool(0.4).then(|| {
        let freq = 0.15 + 0.5 * rng.gen::<f32>();
        let dir = rng.gen::<f32>() * PI;
        (freq, dir.cos(), dir.sin())
    });

    let mut data = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f32, x as f32);
            let t = (((xf / wf - 0.5) * ca + (yf / hf - 0.5) * sa) + 0.75) / 1.5;
            let i = y * width + x;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = base[0][c] * (1.0 - t) + base[1][c] * t;
            }
            for (shape, color, soft) in &shapes {
                let a = (shape.depth(yf, xf) / soft).clamp(-4.0, 4.0);
                let alpha = 1.0 / (1.0 + (-2.0 * a).exp());
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
                }
            }
            let mut tex = texture_amp * (fine[i] - 0.5) + 0.15 * (coarse[i] - 0.5);
            if let Some((f, dc, ds)) = stripes {
                tex += 0.04 * (f * (xf * dc + yf * ds)).sin();
            }
            match channels {
                1 => {
                    let l = 0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2];
                    data.push((l + tex).clamp(0.05, 0.95));
                }
                _ => data.extend(px.iter().map(|v| (v + tex).clamp(0.05, 0.95))),
            }
        }
    }
    Image::from_raw(height, width, channels, data).expect("consistent buffer")
}

/// `count` images from consecutive seeds.
pub fn natural_images(
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Vec<Image> {
    (0..count)
        .map(|i| natural_image(height, width, channels, rng::key(seed, &[i as u64])))
        .collect()
}

/// Writes `count` procedural PNGs named `img_0000.png`, ... into `dir`.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<std::path::PathBuf>> {
    if channels != 1 && channels != 3 {
        return Err(Error::Param(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if size == 0 {
        return Err(Error::Param("size must be > 0".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for (i, img) in natural_images(count, size, size, channels, seed)
        .iter()
        .enumerate()
    {
        let p = dir.join(format!("img_{i:04}.png"));
        save_image(img, &p, BitDepth::Eight)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = natural_image(32, 40, 3, 7);
        assert_eq!(a, natural_image(32, 40, 3, 7));
        assert_ne!(a, natural_image(32, 40, 3, 8));
        assert_eq!(a.dims(), (32, 40, 3));
        assert!(a.data().iter().all(|v| (0.05..=0.95).contains(v)));
        assert!(a.variance() > 1e-3);
        let g = natural_image(32, 40, 1, 7);
        assert_eq!(g.channels(), 1);
    }

    #[test]
    fn corpus_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 3, 24, 1, 0).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.is_file()));
        assert!(write_corpus(dir.path(), 1, 24, 2, 0).is_err());
    }
}
