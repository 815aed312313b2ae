//! Iterated conditional modes over a site graph, an exhaustive MAP oracle
//! for small graphs, and projection of site labels back onto pixels.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::crfmodel::{
    association, association_term, config_score, enumerate_scores, interaction_as, CrfParams,
    LabelConfig, LabelMeans,
};
use crate::error::{Error, Result};
use crate::imaging::PixelImage;
use crate::mask::{Label, Mask, MaskValue};
use crate::regions::{RegionMap, SiteGraph};

pub const DEFAULT_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcmOptions {
    pub max_sweeps: usize,
    /// Also count the interaction terms of every neighbour whose reference
    /// means depend on the updated site.
    pub exact_local: bool,
    /// Keep a per-update score trace in the outcome.
    pub record_updates: bool,
}

impl Default for IcmOptions {
    fn default() -> Self {
        Self {
            max_sweeps: DEFAULT_MAX_SWEEPS,
            exact_local: false,
            record_updates: false,
        }
    }
}

/// Local score of one site before and after its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteUpdate {
    pub sweep: usize,
    pub site: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmOutcome {
    pub labels: LabelConfig,
    pub sweeps: usize,
    pub converged: bool,
    pub updates: Vec<SiteUpdate>,
}

/// Labelling from the association alone: cloud iff `psi >= 0.5`.
pub fn logistic_labels(g: &SiteGraph, params: &CrfParams) -> LabelConfig {
    LabelConfig(
        g.sites()
            .iter()
            .map(|s| Label::from_bit(association(s.nbr, params) >= 0.5))
            .collect(),
    )
}

/// Score that ICM maximizes when it revisits site `i`.
///
/// `y` supplies the neighbour labels and is restored before returning;
/// `fallback` holds the image-wide reference means frozen for the sweep.
pub fn local_score(
    i: usize,
    label: Label,
    y: &mut LabelConfig,
    g: &SiteGraph,
    params: &CrfParams,
    fallback: &LabelMeans,
    exact_local: bool,
) -> f64 {
    let mut score = association_term(label, g.site(i).nbr, params);
    if params.beta == 0.0 {
        return score;
    }
    let mut inter = interaction_as(i, label, y, g, fallback);
    if exact_local {
        let saved = y.get(i);
        y.set(i, label);
        for &j in g.neighbors(i) {
            inter += interaction_as(j, y.get(j), y, g, fallback);
        }
        y.set(i, saved);
    }
    score += params.beta * inter;
    score
}

pub fn icm(
    g: &SiteGraph,
    params: &CrfParams,
    init: Option<&LabelConfig>,
) -> Result<(LabelConfig, usize)> {
    let out = icm_with(g, params, init, &IcmOptions::default())?;
    Ok((out.labels, out.sweeps))
}

/// Iterated conditional modes.
///
/// Sites are visited in ascending id order and updated in place. The
/// fallback reference means come from the configuration at the start of
/// each sweep. Ties go to cloud. Stops after a sweep that changes nothing or
/// after `max_sweeps` sweeps.
pub fn icm_with(
    g: &SiteGraph,
    params: &CrfParams,
    init: Option<&LabelConfig>,
    opts: &IcmOptions,
) -> Result<IcmOutcome> {
    let mut y = match init {
        Some(y0) => {
            y0.check_for(g)?;
            y0.clone()
        }
        None => logistic_labels(g, params),
    };
    let mut updates = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let fallback = LabelMeans::of(&y, g);
        let mut changed = false;
        for i in 0..g.len() {
            let sky = local_score(i, Label::Sky, &mut y, g, params, &fallback, opts.exact_local);
            let cloud = local_score(i, Label::Cloud, &mut y, g, params, &fallback, opts.exact_local);
            let (best, after) = if cloud >= sky {
                (Label::Cloud, cloud)
            } else {
                (Label::Sky, sky)
            };
            if opts.record_updates {
                let before = if y.get(i) == Label::Cloud { cloud } else { sky };
                updates.push(SiteUpdate {
                    sweep: sweeps,
                    site: i,
                    before,
                    after,
                });
            }
            if best != y.get(i) {
                y.set(i, best);
                changed = true;
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(IcmOutcome {
        labels: y,
        sweeps,
        converged,
        updates,
    })
}

/// True when no single-site flip raises that site's local score, with the
/// fallback means taken from `y` itself.
pub fn is_flip_optimal(g: &SiteGraph, params: &CrfParams, y: &LabelConfig, exact_local: bool) -> bool {
    let fallback = LabelMeans::of(y, g);
    let mut y = y.clone();
    (0..g.len()).all(|i| {
        let current = y.get(i);
        let keep = local_score(i, current, &mut y, g, params, &fallback, exact_local);
        let flip = local_score(i, current.flipped(), &mut y, g, params, &fallback, exact_local);
        flip <= keep
    })
}

/// Exact MAP labelling by enumeration. Ties go to the lexicographically
/// smallest labelling.
pub fn brute_force_map(g: &SiteGraph, params: &CrfParams) -> Result<LabelConfig> {
    let scores = enumerate_scores(g, params)?;
    let mut best = 0usize;
    for (m, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = m;
        }
    }
    Ok(LabelConfig::from_index(best as u64, g.len()))
}

/// Rank of `y` among all labellings by score: the fraction of labellings
/// scoring strictly higher.
pub fn score_rank_fraction(g: &SiteGraph, params: &CrfParams, y: &LabelConfig) -> Result<f64> {
    let scores = enumerate_scores(g, params)?;
    let s = config_score(y, g, params);
    let above = scores.iter().filter(|&&t| t > s).count();
    Ok(above as f64 / scores.len() as f64)
}

/// Paint every pixel of region `i` with `y_i`; ignored pixels stay ignore.
pub fn labels_to_mask(y: &LabelConfig, rm: &RegionMap) -> Result<Mask> {
    if y.len() != rm.region_count() {
        return Err(Error::Contract(format!(
            "{} labels for {} regions",
            y.len(),
            rm.region_count()
        )));
    }
    let values = rm
        .region_id
        .iter()
        .map(|id| match id {
            Some(r) => MaskValue::from(y.get(*r as usize)),
            None => MaskValue::Ignore,
        })
        .collect();
    Mask::new(rm.width, rm.height, values)
}

/// The original image with cloud pixels tinted red at 40% opacity.
pub fn overlay(img: &PixelImage, mask: &Mask) -> Result<RgbImage> {
    if img.dims() != mask.dims() {
        return Err(Error::dims(img.dims(), mask.dims()));
    }
    let mut out = RgbImage::new(img.width(), img.height());
    for ((px, src), v) in out.pixels_mut().zip(img.pixels()).zip(&mask.values) {
        px.0 = if *v == MaskValue::Cloud {
            let tint = [255.0, 0.0, 0.0];
            [0, 1, 2].map(|c| (0.6 * src[c] as f64 + 0.4 * tint[c]).round() as u8)
        } else {
            *src
        };
    }
    Ok(out)
}

pub fn save_overlay(img: &PixelImage, mask: &Mask, path: &Path) -> Result<()> {
    overlay(img, mask)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
