//! Image -> regions -> site graph -> labels, shared by training, the CLI,
//! evaluation and the C bindings.

use serde::{Deserialize, Serialize};

use crate::crfmodel::{CrfParams, LabelConfig};
use crate::error::Result;
use crate::imaging::{compute_features, FeatureImage, PixelImage};
use crate::inference::{icm_with, labels_to_mask, IcmOptions, IcmOutcome};
use crate::mask::{Label, Mask};
use crate::regions::{build_site_graph, mean_shift_segment, MeanShiftParams, RegionMap, SiteGraph};

pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 200.0;

/// Region formation and graph settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub mean_shift: MeanShiftParams,
    pub neighbor_radius: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            mean_shift: MeanShiftParams::default(),
            neighbor_radius: DEFAULT_NEIGHBOR_RADIUS,
        }
    }
}

/// A segmented image ready for inference.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub features: FeatureImage,
    pub regions: RegionMap,
    pub graph: SiteGraph,
}

impl Segmentation {
    pub fn compute(img: &PixelImage, cfg: &SegmentConfig) -> Result<Self> {
        let features = compute_features(img);
        let regions = mean_shift_segment(img, &cfg.mean_shift)?;
        let graph = build_site_graph(&regions, &features, cfg.neighbor_radius)?;
        Ok(Self {
            features,
            regions,
            graph,
        })
    }

    pub fn infer(&self, params: &CrfParams, opts: &IcmOptions) -> Result<IcmOutcome> {
        icm_with(&self.graph, params, None, opts)
    }

    pub fn mask(&self, labels: &LabelConfig) -> Result<Mask> {
        labels_to_mask(labels, &self.regions)
    }

    /// Per-site count of `(sky, cloud)` truth pixels; ignore-labelled truth
    /// pixels are not counted.
    pub fn truth_counts(&self, truth: &Mask) -> Result<Vec<[usize; 2]>> {
        if truth.dims() != self.regions.dims() {
            return Err(crate::error::Error::dims(self.regions.dims(), truth.dims()));
        }
        let mut counts = vec![[0usize; 2]; self.regions.region_count()];
        for (id, v) in self.regions.region_id.iter().zip(&truth.values) {
            if let (Some(r), Some(label)) = (id, v.label()) {
                counts[*r as usize][label as usize] += 1;
            }
        }
        Ok(counts)
    }
}

/// Misclassified truth pixels when each site takes its label.
pub fn site_pixel_errors(labels: &LabelConfig, counts: &[[usize; 2]]) -> usize {
    labels
        .labels()
        .iter()
        .zip(counts)
        .map(|(l, c)| match l {
            Label::Cloud => c[Label::Sky as usize],
            Label::Sky => c[Label::Cloud as usize],
        })
        .sum()
}

/// Segment and label one image in a single call.
pub fn detect(
    img: &PixelImage,
    params: &CrfParams,
    cfg: &SegmentConfig,
    opts: &IcmOptions,
) -> Result<(Mask, Segmentation, IcmOutcome)> {
    let seg = Segmentation::compute(img, cfg)?;
    let out = seg.infer(params, opts)?;
    let mask = seg.mask(&out.labels)?;
    Ok((mask, seg, out))
}
