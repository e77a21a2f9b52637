//! Image container, raster IO and patch extraction.
//!
//! Samples are stored as `f32` in row-major, channel-interleaved (HWC) order.
//! Channel order is always RGB for three-channel images.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rec.709 luma weights.
pub const LUMA_709: [f64; 3] = [0.2126, 0.7152, 0.0722];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn check_shape(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("empty image {height}x{width}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Format(format!(
            "unsupported channel count {channels}"
        )));
    }
    if len != height * width * channels {
        return Err(Error::Shape(format!(
            "buffer of {len} samples does not match {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

impl Image {
    /// Builds an image, requiring every sample to lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image without the range check. Out-of-range samples are
    /// clamped (with a warning) when saved.
    pub fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self::from_raw(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
        .expect("valid shape")
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_raw(height, width, channels, data).expect("valid shape")
    }

    /// Assembles an image from per-channel planes (CHW).
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f32>]) -> Result<Self> {
        let channels = planes.len();
        let hw = height * width;
        if planes.iter().any(|p| p.len() != hw) {
            return Err(Error::Shape("plane length mismatch".into()));
        }
        let mut data = vec![0.0; hw * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::from_raw(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a contiguous row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f32>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Grayscale plane in `f64`; color images use Rec.709 weights.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| {
                LUMA_709[0] * p[0] as f64 + LUMA_709[1] * p[1] as f64 + LUMA_709[2] * p[2] as f64
            })
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::from_raw(height, width, c, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance over all samples.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn clamped(&self) -> Image {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image::from_raw(self.height, self.width, self.channels, data).expect("same shape")
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Samples rounded to the 8-bit grid, as a file round-trip would leave them.
    pub fn quantized(&self, depth: BitDepth) -> Image {
        let max = depth.max_value();
        let data = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * max).round() / max)
            .collect();
        Image::from_raw(self.height, self.width, self.channels, data).expect("same shape")
    }
}

impl BitDepth {
    pub fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Loads a PNG or PNM raster, scaling integer samples to `[0, 1]`.
///
/// Alpha channels are dropped; two-channel (gray + alpha) files become
/// grayscale.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    from_dynamic(decoded)
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Image::new(
            h,
            w,
            1,
            b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            Image::new(
                h,
                w,
                1,
                b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            )
        }
        DynamicImage::ImageRgb8(b) => Image::new(
            h,
            w,
            3,
            b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        ),
        DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            Image::new(
                h,
                w,
                3,
                b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            )
        }
        DynamicImage::ImageLuma16(b) => Image::new(
            h,
            w,
            1,
            b.into_raw()
                .into_iter()
                .map(|v| v as f32 / 65535.0)
                .collect(),
        ),
        DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma16();
            Image::new(
                h,
                w,
                1,
                b.into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 65535.0)
                    .collect(),
            )
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let b = img.to_rgb16();
            Image::new(
                h,
                w,
                3,
                b.into_raw()
                    .into_iter()
                    .map(|v| v as f32 / 65535.0)
                    .collect(),
            )
        }
        other => Err(Error::Format(format!(
            "unsupported pixel layout {:?}",
            other.color()
        ))),
    }
}

/// Writes a lossless raster (format from the extension: png, pgm, ppm, pnm).
/// Samples are clamped to `[0, 1]` and rounded to the nearest integer level.
pub fn save_image(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let clipped = img
        .data
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if clipped > 0 {
        warn!(
            "{}: clamping {clipped} out-of-range samples to [0, 1]",
            path.display()
        );
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let max = depth.max_value();
    let quant = |v: f32| {
        let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        (v * max).round()
    };
    let dynamic = match (depth, img.channels) {
        (BitDepth::Eight, 1) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quant(v) as u8).collect(),
            )
            .expect("buffer size"),
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quant(v) as u8).collect(),
            )
            .expect("buffer size"),
        ),
        (BitDepth::Sixteen, 1) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quant(v) as u16).collect(),
            )
            .expect("buffer size"),
        ),
        (BitDepth::Sixteen, _) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(
                w,
                h,
                img.data.iter().map(|&v| quant(v) as u16).collect(),
            )
            .expect("buffer size"),
        ),
    };
    dynamic.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Cuts `size`×`size` patches on a `stride` grid, row-major from the top-left
/// corner. Partial patches at the right and bottom borders are discarded.
pub fn extract_patches(img: &Image, size: usize, stride: usize) -> Result<Vec<Image>> {
    if size == 0 || stride == 0 {
        return Err(Error::Param("patch size and stride must be >= 1".into()));
    }
    if img.height < size || img.width < size {
        return Ok(Vec::new());
    }
    let rows = (img.height - size) / stride + 1;
    let cols = (img.width - size) / stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(img.crop(r * stride, c * stride, size, size)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Image::new(2, 2, 2, vec![0.0; 8]),
            Err(Error::Format(_))
        ));
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::from_raw(1, 1, 1, vec![1.5]).is_ok());
    }

    #[test]
    fn patch_counts() {
        let img = Image::filled(512, 512, 1, 0.0);
        assert_eq!(extract_patches(&img, 256, 256).unwrap().len(), 4);
        let img = Image::filled(481, 324, 3, 0.0);
        assert_eq!(extract_patches(&img, 256, 256).unwrap().len(), 1);
        let img = Image::filled(300, 600, 1, 0.0);
        assert_eq!(extract_patches(&img, 256, 256).unwrap().len(), 2);
        let img = Image::filled(100, 600, 1, 0.0);
        assert!(extract_patches(&img, 256, 256).unwrap().is_empty());
        assert!(extract_patches(&img, 0, 1).is_err());
    }

    #[test]
    fn patches_are_exact_subarrays() {
        let img = Image::from_fn(9, 7, 3, |y, x, c| ((y * 31 + x * 7 + c) % 17) as f32 / 16.0);
        let patches = extract_patches(&img, 3, 2).unwrap();
        assert_eq!(patches.len(), 4 * 3);
        for (i, p) in patches.iter().enumerate() {
            let (r, c) = (i / 3, i % 3);
            for y in 0..3 {
                for x in 0..3 {
                    for ch in 0..3 {
                        assert_eq!(p.get(y, x, ch), img.get(r * 2 + y, c * 2 + x, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn quantization_rule() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&Image::filled(2, 2, 1, 0.5), &path, BitDepth::Eight).unwrap();
        let raw = image::open(&path).unwrap().to_luma8().into_raw();
        assert!(raw.iter().all(|&v| v == 128));

        let img = Image::from_raw(1, 3, 1, vec![1.0, -0.1, 1.3]).unwrap();
        save_image(&img, &path, BitDepth::Eight).unwrap();
        let raw = image::open(&path).unwrap().to_luma8().into_raw();
        assert_eq!(raw, vec![255, 0, 255]);
    }

    #[test]
    fn load_scales_extremes() {
        let dir = tempfile::tempdir().unwrap();
        for (v, expect) in [(255u8, 1.0f32), (0u8, 0.0f32)] {
            let path = dir.path().join(format!("c{v}.png"));
            image::GrayImage::from_pixel(4, 3, Luma([v]))
                .save(&path)
                .unwrap();
            let img = load_image(&path).unwrap();
            assert_eq!(img.dims(), (3, 4, 1));
            assert!(img.data().iter().all(|&s| s == expect));
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/x.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn sixteen_bit_and_pnm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 6, 3, |y, x, c| {
            ((y * 13 + x * 5 + c * 3) % 11) as f32 / 10.0
        });
        let p16 = dir.path().join("a.png");
        save_image(&img, &p16, BitDepth::Sixteen).unwrap();
        assert_eq!(load_image(&p16).unwrap(), img.quantized(BitDepth::Sixteen));
        let ppm = dir.path().join("a.ppm");
        save_image(&img, &ppm, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&ppm).unwrap(), img.quantized(BitDepth::Eight));
    }

    #[test]
    fn luma_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.luma()[0] - 0.2126).abs() < 1e-12);
    }
}
