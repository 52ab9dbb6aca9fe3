//! Image preprocessing and augmentation.
//!
//! Rasters are row-major, interleaved RGB. [`ImageU8`] holds raw 8-bit
//! pixels; [`ImageF`] holds values in `[0, 1]` after [`normalize`].
//!
//! Training images go through [`augment_train`]:
//!
//! ```text
//! resize -> white_patch_retinex -> normalize -> center_crop
//!        -> random_flip -> random_crop -> random_brightness
//! ```
//!
//! and evaluation images through the deterministic [`augment_eval`].

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("crop {crop_w}x{crop_h} does not fit in {width}x{height} image")]
    CropTooLarge {
        crop_w: usize,
        crop_h: usize,
        width: usize,
        height: usize,
    },
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BadPixelBuffer { expected: usize, got: usize },
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Pixel channel storage type.
pub trait Channel: Copy + Send + Sync + PartialEq + std::fmt::Debug + 'static {
    fn in_range(self) -> bool;
}

impl Channel for u8 {
    fn in_range(self) -> bool {
        true
    }
}

impl Channel for f64 {
    fn in_range(self) -> bool {
        (0.0..=1.0).contains(&self)
    }
}

/// Row-major RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    pixels: Vec<T>,
}

pub type ImageU8 = Image<u8>;
pub type ImageF = Image<f64>;

impl<T: Channel> Image<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(ImagingError::BadPixelBuffer {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Image { width, height, pixels })
    }

    /// Builds an image from `f(x, y, channel)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> T) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidDimensions { width, height });
        }
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(x, y, c));
                }
            }
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Result<Self> {
        Self::from_fn(width, height, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

impl ImageF {
    /// Like [`Image::new`] but also enforces the `[0, 1]` value range.
    pub fn checked(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = pixels.iter().find(|v| !v.in_range()) {
            return Err(ImagingError::OutOfRange(bad));
        }
        Self::new(width, height, pixels)
    }

    /// Rescales to 8 bits: `round(v * 255)`.
    pub fn to_u8(&self) -> ImageU8 {
        Image {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    /// Planar channel-major copy (`C x H x W`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    /// Planar copy with each channel shifted to zero mean and scaled to unit
    /// standard deviation. Constant channels are only centered.
    pub fn standardized_chw(&self) -> Vec<f64> {
        let mut out = self.to_chw();
        let plane = self.width * self.height;
        for channel in out.chunks_exact_mut(plane) {
            let mean = channel.iter().sum::<f64>() / plane as f64;
            let var = channel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let std = var.sqrt();
            let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
            for v in channel.iter_mut() {
                *v = (*v - mean) * scale;
            }
        }
        out
    }
}

/// Bilinear resize with half-pixel centers; edges clamp.
pub fn resize(img: &ImageU8, out_w: usize, out_h: usize) -> Result<ImageU8> {
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::InvalidDimensions {
            width: out_w,
            height: out_h,
        });
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, img.width)).collect();
    let ys: Vec<_> = (0..out_h).map(|y| taps(y, sy, img.height)).collect();
    Image::from_fn(out_w, out_h, |x, y, c| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let p = |xx, yy| img.get(xx, yy, c) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
    })
}

/// White-patch retinex: scale each channel so its maximum becomes 255.
///
/// Channels whose maximum is zero are left untouched.
pub fn white_patch_retinex(img: &ImageU8) -> ImageU8 {
    let mut max = [0u8; 3];
    for px in img.pixels.chunks_exact(3) {
        for c in 0..3 {
            max[c] = max[c].max(px[c]);
        }
    }
    // exact integer round-half-up of v * 255 / m
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        for c in 0..3 {
            let m = max[c] as u32;
            if m > 0 {
                px[c] = ((2 * px[c] as u32 * 255 + m) / (2 * m)) as u8;
            }
        }
    }
    out
}

/// Maps 8-bit values onto `[0, 1]` by dividing by 255.
pub fn normalize(img: &ImageU8) -> ImageF {
    Image {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

/// Copies the `w x h` window whose top-left corner is `(x, y)`.
pub fn crop<T: Channel>(img: &Image<T>, x: usize, y: usize, w: usize, h: usize) -> Result<Image<T>> {
    if w == 0 || h == 0 || x + w > img.width || y + h > img.height {
        return Err(ImagingError::CropTooLarge {
            crop_w: w,
            crop_h: h,
            width: img.width,
            height: img.height,
        });
    }
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in y..y + h {
        let start = (row * img.width + x) * 3;
        pixels.extend_from_slice(&img.pixels[start..start + w * 3]);
    }
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

fn check_fits<T>(img: &Image<T>, cw: usize, ch: usize) -> Result<()> {
    if cw == 0 || ch == 0 || cw > img.width || ch > img.height {
        return Err(ImagingError::CropTooLarge {
            crop_w: cw,
            crop_h: ch,
            width: img.width,
            height: img.height,
        });
    }
    Ok(())
}

/// Top-left offset of a centered `cw x ch` window (floors odd margins).
pub fn center_offsets(width: usize, height: usize, cw: usize, ch: usize) -> (usize, usize) {
    ((width - cw) / 2, (height - ch) / 2)
}

pub fn center_crop<T: Channel>(img: &Image<T>, cw: usize, ch: usize) -> Result<Image<T>> {
    check_fits(img, cw, ch)?;
    let (x, y) = center_offsets(img.width, img.height, cw, ch);
    crop(img, x, y, cw, ch)
}

/// Crop at offsets drawn uniformly from `[0, w - cw] x [0, h - ch]`.
pub fn random_crop<T: Channel>(img: &Image<T>, cw: usize, ch: usize, rng: &mut Rng) -> Result<Image<T>> {
    check_fits(img, cw, ch)?;
    let x = rng.random_range(0..=img.width - cw);
    let y = rng.random_range(0..=img.height - ch);
    crop(img, x, y, cw, ch)
}

/// Mirror left/right.
pub fn flip_horizontal<T: Channel>(img: &Image<T>) -> Image<T> {
    let mut out = img.clone();
    for row in out.pixels.chunks_exact_mut(img.width * 3) {
        let w = img.width;
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
    out
}

/// Mirror top/bottom.
pub fn flip_vertical<T: Channel>(img: &Image<T>) -> Image<T> {
    let stride = img.width * 3;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks_exact(stride).rev() {
        pixels.extend_from_slice(row);
    }
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Independently mirrors each axis with probability `flip_prob`.
///
/// Both coins are always drawn so the generator advances identically
/// regardless of the outcome.
pub fn random_flip<T: Channel>(img: &Image<T>, flip_prob: f64, rng: &mut Rng) -> Image<T> {
    let p = flip_prob.clamp(0.0, 1.0);
    let horizontal = rng.random_bool(p);
    let vertical = rng.random_bool(p);
    let mut out = if horizontal { flip_horizontal(img) } else { img.clone() };
    if vertical {
        out = flip_vertical(&out);
    }
    out
}

/// Adds `delta` to every value and clamps to `[0, 1]`.
pub fn adjust_brightness(img: &ImageF, delta: f64) -> ImageF {
    Image {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&v| (v + delta).clamp(0.0, 1.0)).collect(),
    }
}

/// One delta drawn uniformly from `[-delta_max, delta_max]`, applied to the
/// whole image.
pub fn random_brightness(img: &ImageF, delta_max: f64, rng: &mut Rng) -> ImageF {
    let u: f64 = rng.random();
    let delta = (2.0 * u - 1.0) * delta_max;
    adjust_brightness(img, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub resize_w: usize,
    pub resize_h: usize,
    pub center_crop: usize,
    pub random_crop: usize,
    pub brightness_delta: f64,
    pub flip_prob: f64,
    pub apply_color_constancy: bool,
    /// Per-channel standardization of network inputs (off by default).
    pub standardize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_w: 600,
            resize_h: 450,
            center_crop: 320,
            random_crop: 224,
            brightness_delta: 0.1,
            flip_prob: 0.5,
            apply_color_constancy: true,
            standardize: false,
        }
    }
}

impl AugmentConfig {
    /// A config that keeps `size x size` inputs at their native size
    /// (resize and both crops are the identity).
    pub fn native(size: usize) -> Self {
        AugmentConfig {
            resize_w: size,
            resize_h: size,
            center_crop: size,
            random_crop: size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ImagingError::InvalidConfig(msg));
        if self.resize_w == 0 || self.resize_h == 0 || self.random_crop == 0 {
            return bad("sizes must be positive".into());
        }
        if self.random_crop > self.center_crop {
            return bad(format!(
                "random_crop {} exceeds center_crop {}",
                self.random_crop, self.center_crop
            ));
        }
        if self.center_crop > self.resize_w.min(self.resize_h) {
            return bad(format!(
                "center_crop {} exceeds resized image {}x{}",
                self.center_crop, self.resize_w, self.resize_h
            ));
        }
        if !(0.0..1.0).contains(&self.brightness_delta) {
            return bad(format!("brightness_delta {} not in [0, 1)", self.brightness_delta));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} not in [0, 1]", self.flip_prob));
        }
        Ok(())
    }

    /// Network input side length produced by both augmentation paths.
    pub fn output_size(&self) -> usize {
        self.random_crop
    }

    /// Converts a preprocessed image to the planar network input.
    pub fn to_input(&self, img: &ImageF) -> Vec<f64> {
        if self.standardize {
            img.standardized_chw()
        } else {
            img.to_chw()
        }
    }
}

fn base_chain(img: &ImageU8, cfg: &AugmentConfig) -> Result<ImageF> {
    let resized = resize(img, cfg.resize_w, cfg.resize_h)?;
    let balanced = if cfg.apply_color_constancy {
        white_patch_retinex(&resized)
    } else {
        resized
    };
    Ok(normalize(&balanced))
}

/// Seeded training augmentation; output is `random_crop x random_crop`.
pub fn augment_train(img: &ImageU8, cfg: &AugmentConfig, rng: &mut Rng) -> Result<ImageF> {
    cfg.validate()?;
    let base = base_chain(img, cfg)?;
    let centered = center_crop(&base, cfg.center_crop, cfg.center_crop)?;
    let flipped = random_flip(&centered, cfg.flip_prob, rng);
    let cropped = random_crop(&flipped, cfg.random_crop, cfg.random_crop, rng)?;
    Ok(random_brightness(&cropped, cfg.brightness_delta, rng))
}

/// Deterministic evaluation preprocessing: the train chain without
/// randomness, center-cropped straight to the network input size.
pub fn augment_eval(img: &ImageU8, cfg: &AugmentConfig) -> Result<ImageF> {
    cfg.validate()?;
    let base = base_chain(img, cfg)?;
    center_crop(&base, cfg.random_crop, cfg.random_crop)
}

/// Reads a PNG or JPEG file as 8-bit RGB.
pub fn load_image(path: &Path) -> Result<ImageU8> {
    let rgb = image::open(path)
        .map_err(|source| ImagingError::Read {
            path: path.display().to_string(),
            source,
        })?
        .into_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(w as usize, h as usize, rgb.into_raw())
}

/// Decodes an in-memory PNG or JPEG.
pub fn decode_image(bytes: &[u8]) -> Result<ImageU8> {
    let rgb = image::load_from_memory(bytes)
        .map_err(|source| ImagingError::Read {
            path: "<memory>".into(),
            source,
        })?
        .into_rgb8();
    let (w, h) = rgb.dimensions();
    Image::new(w as usize, h as usize, rgb.into_raw())
}

pub fn save_png(img: &ImageU8, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.pixels,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| ImagingError::Write {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gradient(w: usize, h: usize) -> ImageU8 {
        Image::from_fn(w, h, |x, y, c| ((x * 37 + y * 11 + c * 80) % 256) as u8).unwrap()
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(matches!(
            ImageU8::new(2, 2, vec![0; 11]),
            Err(ImagingError::BadPixelBuffer { expected: 12, got: 11 })
        ));
        assert!(ImageU8::new(0, 2, vec![]).is_err());
        assert!(matches!(
            ImageF::checked(1, 1, vec![0.0, 1.5, 0.0]),
            Err(ImagingError::OutOfRange(_))
        ));
    }

    #[test]
    fn resize_identity_and_half_pixel() {
        let img = gradient(7, 5);
        assert_eq!(resize(&img, 7, 5).unwrap(), img);

        // top row 0, bottom row 255: the single output center samples the
        // midpoint of all four inputs
        let img = Image::from_fn(2, 2, |_, y, _| if y == 0 { 0 } else { 255 }).unwrap();
        let out = resize(&img, 1, 1).unwrap();
        assert_eq!(out.pixels(), &[128, 128, 128]);

        let big = resize(&gradient(13, 9), 600, 450).unwrap();
        assert_eq!((big.width(), big.height()), (600, 450));
    }

    #[test]
    fn resize_upsample_interpolates() {
        // 2x1 [0, 200] -> 4x1: centers map to -0.25, 0.25, 0.75, 1.25
        let img = Image::from_fn(2, 1, |x, _, _| if x == 0 { 0 } else { 200 }).unwrap();
        let out = resize(&img, 4, 1).unwrap();
        let row: Vec<u8> = out.pixels().chunks(3).map(|p| p[0]).collect();
        assert_eq!(row, vec![0, 50, 150, 200]);
    }

    #[test]
    fn retinex_examples() {
        let full = Image::from_fn(3, 2, |x, _, _| if x == 0 { 255 } else { 17 }).unwrap();
        assert_eq!(white_patch_retinex(&full), full);

        let constant = ImageU8::filled(4, 4, 128).unwrap();
        assert!(white_patch_retinex(&constant).pixels().iter().all(|&v| v == 255));

        let zero = ImageU8::filled(4, 4, 0).unwrap();
        assert_eq!(white_patch_retinex(&zero), zero);

        // only the red channel is populated: it is stretched, the others stay 0
        let red = Image::from_fn(2, 1, |x, _, c| if c == 0 { 50 + 50 * x as u8 } else { 0 }).unwrap();
        let out = white_patch_retinex(&red);
        assert_eq!(out.pixels(), &[128, 0, 0, 255, 0, 0]);
    }

    #[test]
    fn normalize_values() {
        let img = Image::from_fn(3, 1, |x, _, _| [0u8, 255, 128][x]).unwrap();
        let f = normalize(&img);
        assert_eq!(f.get(0, 0, 0), 0.0);
        assert_eq!(f.get(1, 0, 1), 1.0);
        assert!((f.get(2, 0, 2) - 0.501961).abs() < 1e-6);
        assert_eq!(f.to_u8(), img);
    }

    #[test]
    fn center_crop_offsets_and_windows() {
        assert_eq!(center_offsets(600, 450, 320, 320), (140, 65));
        let img = gradient(4, 4);
        assert_eq!(center_crop(&img, 4, 4).unwrap(), img);
        let c = center_crop(&img, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for ch in 0..3 {
                    assert_eq!(c.get(x, y, ch), img.get(x + 1, y + 1, ch));
                }
            }
        }
        assert!(matches!(
            center_crop(&img, 5, 2),
            Err(ImagingError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn random_crop_full_size_is_identity() {
        let img = gradient(5, 3);
        for seed in 0..10 {
            let mut r = rng::seeded(seed);
            assert_eq!(random_crop(&img, 5, 3, &mut r).unwrap(), img);
        }
        assert!(random_crop(&img, 6, 3, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn flips() {
        let img = Image::from_fn(2, 1, |x, _, c| (x * 10 + c) as u8).unwrap();
        let h = flip_horizontal(&img);
        assert_eq!(h.pixels(), &[10, 11, 12, 0, 1, 2]);

        let img = gradient(5, 4);
        let mut r = rng::seeded(3);
        assert_eq!(random_flip(&img, 0.0, &mut r), img);
        let once = random_flip(&img, 1.0, &mut r);
        assert_ne!(once, img);
        assert_eq!(random_flip(&once, 1.0, &mut r), img);
        assert_eq!(
            flip_horizontal(&flip_vertical(&img)),
            flip_vertical(&flip_horizontal(&img))
        );
    }

    #[test]
    fn brightness() {
        let half = ImageF::filled(3, 3, 0.5).unwrap();
        assert_eq!(random_brightness(&half, 0.0, &mut rng::seeded(1)), half);
        let bright = adjust_brightness(&half, 0.6);
        assert!(bright.pixels().iter().all(|&v| v == 1.0));
        let dark = adjust_brightness(&half, -0.6);
        assert!(dark.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn augment_default_sizes() {
        let img = gradient(40, 30);
        let cfg = AugmentConfig::default();
        let out = augment_train(&img, &cfg, &mut rng::seeded(9)).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));
        let ev = augment_eval(&img, &cfg).unwrap();
        assert_eq!((ev.width(), ev.height()), (224, 224));
        assert_eq!(ev, augment_eval(&img, &cfg).unwrap());
    }

    #[test]
    fn augment_without_randomness_ignores_seed() {
        let img = gradient(40, 30);
        let cfg = AugmentConfig {
            resize_w: 32,
            resize_h: 24,
            center_crop: 20,
            random_crop: 20,
            brightness_delta: 0.0,
            flip_prob: 0.0,
            ..Default::default()
        };
        let a = augment_train(&img, &cfg, &mut rng::seeded(1)).unwrap();
        let b = augment_train(&img, &cfg, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_without_color_constancy() {
        let img = ImageU8::filled(700, 500, 255).unwrap();
        let cfg = AugmentConfig {
            apply_color_constancy: false,
            ..Default::default()
        };
        let out = augment_eval(&img, &cfg).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig {
            random_crop: 400,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig {
            center_crop: 500,
            random_crop: 224,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn standardized_channels_are_centered() {
        let img = normalize(&gradient(6, 6));
        let v = img.standardized_chw();
        for plane in v.chunks(36) {
            let mean: f64 = plane.iter().sum::<f64>() / 36.0;
            let var: f64 = plane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = gradient(9, 7);
        save_png(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }
}
