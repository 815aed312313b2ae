//! Sky image loading, colour features and ignore-mask handling.
//!
//! Two per-pixel features drive the whole pipeline:
//!
//! * the normalized blue/red ratio `(B - R) / (B + R)`, high for clear sky;
//! * the normalized saturation/value ratio `(1 - l) / (1 + l)` with
//!   `l = S / V` in the hexcone HSV model, high for cloud.

use std::fs;
use std::path::{Path, PathBuf};

use image::ImageFormat;

use crate::error::{Error, Result};

/// RGB raster of a sky image with an optional ignore mask.
///
/// Ignored pixels (sun occluder, horizon obstructions) never contribute to
/// features, regions, training samples or metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
    ignore: Option<Vec<bool>>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyInput(format!("{width}x{height} image")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Contract(format!(
                "{} pixels supplied for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            ignore: None,
        })
    }

    /// Build an image where every pixel has the same colour.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width as usize * height as usize])
    }

    pub fn with_ignore(mut self, ignore: Vec<bool>) -> Result<Self> {
        if ignore.len() != self.pixels.len() {
            return Err(Error::Contract(format!(
                "ignore mask has {} entries, image has {}",
                ignore.len(),
                self.pixels.len()
            )));
        }
        self.ignore = Some(ignore);
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn ignore_mask(&self) -> Option<&[bool]> {
        self.ignore.as_deref()
    }

    #[inline]
    pub fn is_ignored(&self, idx: usize) -> bool {
        self.ignore.as_ref().is_some_and(|m| m[idx])
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn active_count(&self) -> usize {
        match &self.ignore {
            Some(m) => m.iter().filter(|&&i| !i).count(),
            None => self.pixels.len(),
        }
    }

    /// Encode as an 8-bit RGB PNG. The ignore mask is not written.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let buf = image::RgbImage::from_raw(self.width, self.height, raw)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn sniff_format(path: &Path, bytes: &[u8]) -> Result<ImageFormat> {
    if bytes.starts_with(PNG_MAGIC) {
        Ok(ImageFormat::Png)
    } else if bytes.starts_with(b"P6") {
        Ok(ImageFormat::Pnm)
    } else {
        Err(Error::UnsupportedFormat(path.to_path_buf()))
    }
}

pub(crate) fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = sniff_format(path, &bytes)?;
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub(crate) fn decode_gray(path: &Path) -> Result<image::GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| {
        Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    Ok(img.to_luma8())
}

/// Sidecar ignore-mask location: `sky.png` -> `sky.mask.png`.
pub fn sidecar_mask_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("mask.png")
}

/// Load a PNG or binary PPM, picking up `<stem>.mask.png` when it exists.
pub fn load_image(path: &Path) -> Result<PixelImage> {
    let sidecar = sidecar_mask_path(path);
    let mask = sidecar.is_file().then_some(sidecar);
    load_image_with_mask(path, mask.as_deref())
}

/// Load an image with an explicit ignore mask (0 = process, 255 = ignore).
pub fn load_image_with_mask(path: &Path, mask: Option<&Path>) -> Result<PixelImage> {
    let rgb = decode_rgb(path)?;
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    let img = PixelImage::new(w, h, pixels)?;
    match mask {
        None => Ok(img),
        Some(mask_path) => {
            let gray = decode_gray(mask_path)?;
            if gray.dimensions() != (w, h) {
                return Err(Error::dims((w, h), gray.dimensions()));
            }
            let ignore = gray.pixels().map(|p| p.0[0] >= 128).collect();
            img.with_ignore(ignore)
        }
    }
}

/// Normalized blue/red ratio. A pixel with `b + r = 0` maps to 0.
#[inline]
pub fn nbr(r: u8, b: u8) -> f64 {
    let (r, b) = (r as f64, b as f64);
    let sum = b + r;
    if sum == 0.0 {
        0.0
    } else {
        (b - r) / sum
    }
}

/// Normalized saturation/value ratio, `(1 - S/V) / (1 + S/V)`.
///
/// Hexcone HSV: `V = max / 255`, `S = (max - min) / max`. Pixels with
/// `V <= 1/255` map to 0.
#[inline]
pub fn nsv(r: u8, g: u8, b: u8) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max <= 1 {
        return 0.0;
    }
    let v = max as f64 / 255.0;
    let s = (max - min) as f64 / max as f64;
    let lambda = s / v;
    (1.0 - lambda) / (1.0 + lambda)
}

/// Per-pixel NBR and NSV fields. Ignored pixels hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: u32,
    pub height: u32,
    pub nbr: Vec<f64>,
    pub nsv: Vec<f64>,
}

impl FeatureImage {
    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        !self.nbr[idx].is_nan()
    }

    pub fn len(&self) -> usize {
        self.nbr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nbr.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Non-ignored values of one feature, in raster order.
    pub fn valid_values(&self, feature: crate::baselines::Feature) -> impl Iterator<Item = f64> + '_ {
        let field = match feature {
            crate::baselines::Feature::Nbr => &self.nbr,
            crate::baselines::Feature::Nsv => &self.nsv,
        };
        field.iter().copied().filter(|v| !v.is_nan())
    }
}

pub fn compute_features(img: &PixelImage) -> FeatureImage {
    let mut nbr_field = Vec::with_capacity(img.len());
    let mut nsv_field = Vec::with_capacity(img.len());
    for (idx, &[r, g, b]) in img.pixels().iter().enumerate() {
        if img.is_ignored(idx) {
            nbr_field.push(f64::NAN);
            nsv_field.push(f64::NAN);
        } else {
            nbr_field.push(nbr(r, b));
            nsv_field.push(nsv(r, g, b));
        }
    }
    FeatureImage {
        width: img.width(),
        height: img.height(),
        nbr: nbr_field,
        nsv: nsv_field,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nbr_examples() {
        assert_eq!(nbr(100, 100), 0.0);
        assert_eq!(nbr(0, 255), 1.0);
        assert!((nbr(64, 96) - 0.2).abs() < 1e-15);
        assert_eq!(nbr(0, 0), 0.0);
    }

    #[test]
    fn nsv_examples() {
        assert_eq!(nsv(200, 200, 200), 1.0);
        assert!(nsv(0, 0, 255).abs() < 1e-15);
        // max = 255 so V = 1 and S = 1/3 gives lambda = 1/3.
        assert!((nsv(170, 200, 255) - 0.5).abs() < 1e-12);
        assert_eq!(nsv(1, 0, 0), 0.0);
        assert_eq!(nsv(0, 0, 0), 0.0);
    }

    #[test]
    fn constant_blue_features() {
        let img = PixelImage::filled(4, 3, [0, 0, 255]).unwrap();
        let f = compute_features(&img);
        assert!(f.nbr.iter().all(|&v| v == 1.0));
        assert!(f.nsv.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn mirror_symmetric_image_has_mirror_symmetric_features() {
        let (w, h) = (6u32, 4u32);
        let mut px = vec![[0u8; 3]; 24];
        for y in 0..h {
            for x in 0..w / 2 {
                let c = [(x * 40) as u8, (y * 50) as u8, 200 - (x * y) as u8];
                px[(y * w + x) as usize] = c;
                px[(y * w + (w - 1 - x)) as usize] = c;
            }
        }
        let f = compute_features(&PixelImage::new(w, h, px).unwrap());
        for y in 0..h as usize {
            for x in 0..w as usize {
                let a = y * w as usize + x;
                let b = y * w as usize + (w as usize - 1 - x);
                assert_eq!(f.nbr[a], f.nbr[b]);
                assert_eq!(f.nsv[a], f.nsv[b]);
            }
        }
    }

    #[test]
    fn ignored_pixels_carry_nan() {
        let img = PixelImage::filled(2, 1, [10, 20, 30])
            .unwrap()
            .with_ignore(vec![true, false])
            .unwrap();
        let f = compute_features(&img);
        assert!(!f.is_valid(0));
        assert!(f.is_valid(1));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(PixelImage::new(0, 3, vec![]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            PixelImage::new(2, 2, vec![[0; 3]; 3]),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn nbr_is_antisymmetric(r in 0u8..=255, b in 0u8..=255) {
            prop_assert_eq!(nbr(r, b), -nbr(b, r));
        }

        #[test]
        fn features_stay_in_range(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let k = nbr(r, b);
            let v = nsv(r, g, b);
            prop_assert!((-1.0..=1.0).contains(&k));
            prop_assert!(v > -1.0 && v <= 1.0);
        }

        // S is scale invariant but V is not, so scaling moves NSV exactly
        // as the closed form in (S, V) predicts.
        #[test]
        fn nsv_depends_only_on_ratios_and_value(
            r in 2u8..=127, g in 2u8..=127, b in 2u8..=127,
        ) {
            let a = nsv(r, g, b);
            let twice = nsv(r * 2, g * 2, b * 2);
            let max = r.max(g).max(b) as f64;
            let min = r.min(g).min(b) as f64;
            let s = (max - min) / max;
            let expect = |v: f64| (1.0 - s / v) / (1.0 + s / v);
            prop_assert!((a - expect(max / 255.0)).abs() < 1e-9);
            prop_assert!((twice - expect(2.0 * max / 255.0)).abs() < 1e-9);
        }

        #[test]
        fn row_permutation_commutes_with_features(
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (5usize, 4usize);
            let px: Vec<[u8; 3]> = (0..w * h).map(|_| rng.gen()).collect();
            let perm = [2usize, 0, 3, 1];
            let permuted: Vec<[u8; 3]> = perm
                .iter()
                .flat_map(|&row| px[row * w..(row + 1) * w].to_vec())
                .collect();
            let f = compute_features(&PixelImage::new(w as u32, h as u32, px).unwrap());
            let g = compute_features(&PixelImage::new(w as u32, h as u32, permuted).unwrap());
            for (new_row, &old_row) in perm.iter().enumerate() {
                for x in 0..w {
                    prop_assert_eq!(g.nbr[new_row * w + x], f.nbr[old_row * w + x]);
                    prop_assert_eq!(g.nsv[new_row * w + x], f.nsv[old_row * w + x]);
                }
            }
        }
    }
}
