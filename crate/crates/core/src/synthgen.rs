//! Seeded synthetic sky images with exact cloud masks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::manifest::{manifest_line, Split};
use crate::mask::{Mask, MaskValue};

pub const MIN_DIMENSION: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub n_clouds: u32,
    /// 0 = bright white clouds, 1 = dark gray.
    pub cloud_darkness: f64,
    pub sky_top: [u8; 3],
    pub sky_bottom: [u8; 3],
    /// Half-range of the additive uniform noise, in 8-bit units.
    pub noise_amplitude: f64,
    /// Each cloud's peak opacity is drawn from `[1 - translucency, 1]`.
    pub translucency: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            n_clouds: 3,
            cloud_darkness: 0.2,
            sky_top: [60, 90, 200],
            sky_bottom: [120, 150, 230],
            noise_amplitude: 2.0,
            translucency: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_DIMENSION || self.height < MIN_DIMENSION {
            return Err(Error::InvalidParams(format!(
                "synthetic image must be at least {MIN_DIMENSION}x{MIN_DIMENSION}"
            )));
        }
        if !(0.0..=1.0).contains(&self.cloud_darkness) {
            return Err(Error::InvalidParams("cloud_darkness must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.translucency) {
            return Err(Error::InvalidParams("translucency must lie in [0, 1)".into()));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::InvalidParams("noise_amplitude must be non-negative".into()));
        }
        Ok(())
    }
}

// Brightest cloud gray and the fraction removed at full darkness.
const CLOUD_WHITE: f64 = 238.0;
const DARKEN_RANGE: f64 = 0.55;
// Slight blue cast keeps cloud saturation low but non-zero.
const CLOUD_BLUE_CAST: f64 = 6.0;
// Cloud opacity at the blob edge and the field span over which it reaches 1.
const EDGE_OPACITY: f64 = 0.55;
const OPACITY_RAMP: f64 = 0.3;

#[derive(Debug, Clone, Copy)]
struct Bump {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amp: f64,
}

fn blob_field(bumps: &[Bump], w: u32, h: u32) -> Vec<f64> {
    let mut field = vec![0.0; (w * h) as usize];
    for b in bumps {
        // Contributions beyond 6 sigma are below 1e-8 of the amplitude.
        let reach = (18.0 / b.inv_two_var).sqrt();
        let x0 = (b.cx - reach).floor().max(0.0) as u32;
        let x1 = ((b.cx + reach).ceil().max(0.0) as u32).min(w - 1);
        let y0 = (b.cy - reach).floor().max(0.0) as u32;
        let y1 = ((b.cy + reach).ceil().max(0.0) as u32).min(h - 1);
        if b.cx + reach < 0.0 || b.cy + reach < 0.0 || x0 >= w || y0 >= h {
            continue;
        }
        for y in y0..=y1 {
            let dy = y as f64 - b.cy;
            for x in x0..=x1 {
                let dx = x as f64 - b.cx;
                field[(y * w + x) as usize] += b.amp * (-(dx * dx + dy * dy) * b.inv_two_var).exp();
            }
        }
    }
    field
}

fn random_blob(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<Bump> {
    let short = w.min(h) as f64;
    let scale = rng.gen_range(0.06..0.14) * short;
    let cx = rng.gen_range(0.0..w as f64);
    let cy = rng.gen_range(0.0..h as f64);
    let k = rng.gen_range(3..=6);
    (0..k)
        .map(|_| {
            let sigma = rng.gen_range(0.5..1.2) * scale;
            Bump {
                cx: cx + rng.gen_range(-1.5..1.5) * scale,
                cy: cy + rng.gen_range(-1.0..1.0) * scale,
                inv_two_var: 1.0 / (2.0 * sigma * sigma),
                amp: rng.gen_range(0.6..1.0),
            }
        })
        .collect()
}

/// Render one sky image and its truth mask.
///
/// Each blob is the half-maximum level set of a sum of 3 to 6 Gaussians;
/// the truth mask is the union of blobs. Cloud opacity ramps up from the
/// blob edge so boundary pixels mix with the sky behind them.
pub fn generate(spec: &SynthSpec) -> Result<(PixelImage, Mask)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = (w * h) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Per-pixel cloud opacity; 0 outside every blob.
    let mut opacity = vec![0.0f64; n];
    // Normalized thickness inside the blob, used for shading.
    let mut thickness = vec![0.0f64; n];
    for _ in 0..spec.n_clouds {
        let bumps = random_blob(&mut rng, w, h);
        let peak_opacity = 1.0 - rng.gen_range(0.0..=spec.translucency);
        let field = blob_field(&bumps, w, h);
        let peak = field.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            continue;
        }
        for (i, &f) in field.iter().enumerate() {
            let rel = f / peak;
            if rel >= 0.5 {
                let ramp = ((rel - 0.5) / OPACITY_RAMP).min(1.0);
                let a = peak_opacity * (EDGE_OPACITY + (1.0 - EDGE_OPACITY) * ramp);
                opacity[i] = opacity[i].max(a);
                thickness[i] = thickness[i].max((rel - 0.5) * 2.0);
            }
        }
    }

    let gray = CLOUD_WHITE * (1.0 - DARKEN_RANGE * spec.cloud_darkness);
    let lerp = |a: u8, b: u8, t: f64| a as f64 + (b as f64 - a as f64) * t;
    let mut pixels = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let sky = [0, 1, 2].map(|c| lerp(spec.sky_top[c], spec.sky_bottom[c], t));
        for x in 0..w {
            let i = (y * w + x) as usize;
            let a = opacity[i];
            // Thicker cloud interiors are a little darker, as seen from below.
            let shade = gray * (1.0 - 0.08 * thickness[i]);
            let cloud = [shade, shade, (shade + CLOUD_BLUE_CAST).min(255.0)];
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = a * cloud[c] + (1.0 - a) * sky[c];
                let noise = if spec.noise_amplitude > 0.0 {
                    rng.gen_range(-spec.noise_amplitude..=spec.noise_amplitude)
                } else {
                    0.0
                };
                px[c] = (v + noise).round().clamp(0.0, 255.0) as u8;
            }
            pixels.push(px);
            truth.push(if a > 0.0 { MaskValue::Cloud } else { MaskValue::Sky });
        }
    }
    Ok((PixelImage::new(w, h, pixels)?, Mask::new(w, h, truth)?))
}

/// One image of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub index: usize,
    /// Dark, grayish top sky whose NBR overlaps the clouds'.
    pub gradient_sky: bool,
    pub spec: SynthSpec,
}

impl CorpusItem {
    pub fn stem(&self) -> String {
        let prefix = if self.gradient_sky { "grad" } else { "sky" };
        format!("{prefix}_{:03}", self.index)
    }
}

/// Every third image has a gradient sky.
pub const GRADIENT_EVERY: usize = 3;
/// Hazy gradient sky: dark gray at the top, pale gray-blue at the bottom.
pub const GRADIENT_TOP: [u8; 3] = [35, 38, 42];
pub const GRADIENT_BOTTOM: [u8; 3] = [80, 90, 110];
pub const CORPUS_TRANSLUCENCY: f64 = 0.45;

/// Varied specs for a corpus of `count` images at `width`x`height`.
pub fn corpus_items(count: usize, seed: u64, width: u32, height: u32) -> Vec<CorpusItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|index| {
            let gradient_sky = index % GRADIENT_EVERY == GRADIENT_EVERY - 1;
            let jitter = |rng: &mut ChaCha8Rng, base: [u8; 3], d: i32| {
                base.map(|v| (v as i32 + rng.gen_range(-d..=d)).clamp(0, 255) as u8)
            };
            let (sky_top, sky_bottom) = if gradient_sky {
                (jitter(&mut rng, GRADIENT_TOP, 3), jitter(&mut rng, GRADIENT_BOTTOM, 6))
            } else {
                (jitter(&mut rng, [60, 90, 200], 10), jitter(&mut rng, [120, 150, 230], 10))
            };
            let spec = SynthSpec {
                width,
                height,
                n_clouds: rng.gen_range(1..=5),
                cloud_darkness: rng.gen_range(0.0..0.4),
                sky_top,
                sky_bottom,
                noise_amplitude: 2.0,
                translucency: CORPUS_TRANSLUCENCY,
                seed: rng.gen(),
            };
            CorpusItem {
                index,
                gradient_sky,
                spec,
            }
        })
        .collect()
}

/// Split assignment by position: the first `assoc` images, then `beta`,
/// then the rest as test images.
pub fn split_for(index: usize, assoc: usize, beta: usize) -> Split {
    if index < assoc {
        Split::Assoc
    } else if index < assoc + beta {
        Split::Beta
    } else {
        Split::Test
    }
}

/// Write `<stem>.png`, `<stem>.truth.png`, `manifest.txt` and
/// `corpus.json` into `dir`. Returns the manifest path.
pub fn write_corpus(dir: &Path, items: &[CorpusItem], assoc: usize, beta: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    items.par_iter().try_for_each(|item| -> Result<()> {
        let (img, truth) = generate(&item.spec)?;
        img.save_png(&dir.join(format!("{}.png", item.stem())))?;
        truth.save_png(&dir.join(format!("{}.truth.png", item.stem())))
    })?;
    let mut manifest = String::new();
    for item in items {
        let stem = item.stem();
        manifest.push_str(&manifest_line(
            &format!("{stem}.png"),
            &format!("{stem}.truth.png"),
            split_for(item.index, assoc, beta),
        ));
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let json_path = dir.join("corpus.json");
    let json = serde_json::to_string_pretty(items)?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(path)
}
