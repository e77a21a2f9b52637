//! Windowed operations on single `f64` planes: separable Gaussian filtering
//! with reflection padding, its adjoint, and 2×2 average pooling.
//!
//! Every linear operator here has a matching `*_adjoint` so that losses built
//! on top can backpropagate exactly.

/// Row-major `f64` plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "plane buffer mismatch");
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(h, w, vec![0.0; h * w])
    }

    pub fn from_f32(h: usize, w: usize, data: &[f32]) -> Self {
        Self::new(h, w, data.iter().map(|&v| v as f64).collect())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane::new(self.h, self.w, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        Plane::new(
            self.h,
            self.w,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Normalized 1-D Gaussian taps of odd `size`.
pub fn gaussian_kernel(size: usize, std: f64) -> Vec<f64> {
    assert!(size % 2 == 1 && size > 0, "kernel size must be odd");
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * std * std)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index without edge repetition (`-1 → 1`, `n → n-2`), folded as
/// many times as needed.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn filter_rows(src: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let mut out = Plane::zeros(src.h, src.w);
    for y in 0..src.h {
        let row = &src.data[y * src.w..(y + 1) * src.w];
        for x in 0..src.w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * row[reflect(x as isize + k as isize - r, src.w)];
            }
            out.data[y * src.w + x] = acc;
        }
    }
    out
}

fn filter_cols(src: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let mut out = Plane::zeros(src.h, src.w);
    for y in 0..src.h {
        for (k, &t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, src.h);
            let s = &src.data[sy * src.w..(sy + 1) * src.w];
            let o = &mut out.data[y * src.w..(y + 1) * src.w];
            for (ov, &sv) in o.iter_mut().zip(s) {
                *ov += t * sv;
            }
        }
    }
    out
}

fn filter_rows_adjoint(g: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let mut out = Plane::zeros(g.h, g.w);
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.data[y * g.w + x];
            for (k, &t) in taps.iter().enumerate() {
                out.data[y * g.w + reflect(x as isize + k as isize - r, g.w)] += t * gv;
            }
        }
    }
    out
}

fn filter_cols_adjoint(g: &Plane, taps: &[f64]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let mut out = Plane::zeros(g.h, g.w);
    for y in 0..g.h {
        for (k, &t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, g.h);
            for x in 0..g.w {
                out.data[sy * g.w + x] += t * g.data[y * g.w + x];
            }
        }
    }
    out
}

/// Separable filtering with reflection padding (same-size output).
pub fn blur(src: &Plane, taps: &[f64]) -> Plane {
    filter_cols(&filter_rows(src, taps), taps)
}

/// Adjoint of [`blur`]: `<blur(a), b> == <a, blur_adjoint(b)>`.
pub fn blur_adjoint(g: &Plane, taps: &[f64]) -> Plane {
    filter_rows_adjoint(&filter_cols_adjoint(g, taps), taps)
}

/// 2×2 mean pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(src: &Plane) -> Plane {
    let (h, w) = (src.h / 2, src.w / 2);
    let mut out = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = 0.25
                * (src.at(2 * y, 2 * x)
                    + src.at(2 * y, 2 * x + 1)
                    + src.at(2 * y + 1, 2 * x)
                    + src.at(2 * y + 1, 2 * x + 1));
        }
    }
    out
}

/// Adjoint of [`avg_pool2`] back onto an `h`×`w` plane.
pub fn avg_pool2_adjoint(g: &Plane, h: usize, w: usize) -> Plane {
    let mut out = Plane::zeros(h, w);
    for y in 0..g.h {
        for x in 0..g.w {
            let v = 0.25 * g.at(y, x);
            out.data[2 * y * w + 2 * x] += v;
            out.data[2 * y * w + 2 * x + 1] += v;
            out.data[(2 * y + 1) * w + 2 * x] += v;
            out.data[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Plane::new(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect())
    }

    fn dot(a: &Plane, b: &Plane) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(11, 1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(8, 5), 0);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let p = Plane::new(7, 9, vec![0.3; 63]);
        let b = blur(&p, &gaussian_kernel(11, 1.5));
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-14));
    }

    #[test]
    fn adjoints_match() {
        let taps = gaussian_kernel(11, 1.5);
        for (h, w) in [(12, 17), (6, 6), (3, 4)] {
            let a = random_plane(h, w, 1);
            let b = random_plane(h, w, 2);
            let lhs = dot(&blur(&a, &taps), &b);
            let rhs = dot(&a, &blur_adjoint(&b, &taps));
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
        let a = random_plane(9, 11, 3);
        let b = random_plane(4, 5, 4);
        let lhs = dot(&avg_pool2(&a), &b);
        let rhs = dot(&a, &avg_pool2_adjoint(&b, 9, 11));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
