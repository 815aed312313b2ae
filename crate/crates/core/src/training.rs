//! Piecewise training: the association parameters come from a weighted
//! logistic fit on one half of the labelled images, then the interaction
//! weight is picked by grid search on the other half with the association
//! held fixed.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crfmodel::CrfParams;
use crate::error::{Error, Result};
use crate::imaging::{nbr, PixelImage};
use crate::inference::{icm_with, IcmOptions};
use crate::mask::{Label, Mask};
use crate::pipeline::{site_pixel_errors, SegmentConfig, Segmentation};

/// One site (or pixel group) for the logistic fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSample {
    /// Mean NBR.
    pub k: f64,
    pub label: Label,
    pub weight: f64,
}

/// Site-level samples from per-site `(sky, cloud)` truth pixel counts.
/// Majority label wins, ties go to cloud, sites with no labelled pixels are
/// dropped.
pub fn samples_from_counts(seg: &Segmentation, counts: &[[usize; 2]]) -> Vec<TrainSample> {
    seg.graph
        .sites()
        .iter()
        .zip(counts)
        .filter(|(_, c)| c[0] + c[1] > 0)
        .map(|(site, c)| TrainSample {
            k: site.nbr,
            label: Label::from_bit(c[1] >= c[0]),
            weight: (c[0] + c[1]) as f64,
        })
        .collect()
}

pub fn make_samples(img: &PixelImage, truth: &Mask, cfg: &SegmentConfig) -> Result<Vec<TrainSample>> {
    let seg = Segmentation::compute(img, cfg)?;
    let counts = seg.truth_counts(truth)?;
    let samples = samples_from_counts(&seg, &counts);
    if samples.is_empty() {
        return Err(Error::EmptyInput("no site has labelled truth pixels".into()));
    }
    Ok(samples)
}

/// Per-pixel samples, grouped by identical `(R, B, label)` so each group is
/// one weighted sample.
pub fn pixel_samples(img: &PixelImage, truth: &Mask) -> Result<Vec<TrainSample>> {
    if img.dims() != truth.dims() {
        return Err(Error::dims(img.dims(), truth.dims()));
    }
    let mut groups: BTreeMap<(u8, u8, Label), usize> = BTreeMap::new();
    for (idx, (px, v)) in img.pixels().iter().zip(&truth.values).enumerate() {
        if img.is_ignored(idx) {
            continue;
        }
        if let Some(label) = v.label() {
            *groups.entry((px[0], px[2], label)).or_default() += 1;
        }
    }
    Ok(groups
        .into_iter()
        .map(|((r, b, label), n)| TrainSample {
            k: nbr(r, b),
            label,
            weight: n as f64,
        })
        .collect())
}

pub const IRLS_MAX_ITERATIONS: usize = 50;
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_HALVINGS: usize = 10;
/// Relative NLL rise accepted as rounding noise near the optimum.
pub const IRLS_ASCENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub alpha0: f64,
    pub alpha1: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The two classes do not overlap in K, so the likelihood has no finite
    /// maximizer and the returned values are the last iterate.
    pub separated: bool,
    /// Weighted negative log-likelihood at the start and after every
    /// accepted step.
    pub nll_trace: Vec<f64>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Weighted negative log-likelihood of the logistic model.
pub fn logistic_nll(samples: &[TrainSample], a0: f64, a1: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let z = a0 + a1 * s.k;
            let y = if s.label.is_cloud() { 1.0 } else { 0.0 };
            s.weight * (softplus(z) - y * z)
        })
        .sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted logistic regression of label on K by iteratively reweighted
/// least squares, with step halving whenever the likelihood would drop.
pub fn fit_logistic(samples: &[TrainSample]) -> Result<LogisticFit> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} samples", samples.len())));
    }
    if samples.iter().any(|s| !(s.weight > 0.0) || !s.k.is_finite()) {
        return Err(Error::Contract("sample weights must be positive and K finite".into()));
    }
    let class_range = |label: Label| {
        samples
            .iter()
            .filter(|s| s.label == label)
            .fold(None, |acc: Option<(f64, f64)>, s| {
                Some(acc.map_or((s.k, s.k), |(lo, hi)| (lo.min(s.k), hi.max(s.k))))
            })
    };
    let (Some(sky), Some(cloud)) = (class_range(Label::Sky), class_range(Label::Cloud)) else {
        return Err(Error::DegenerateFit("samples contain a single class".into()));
    };
    if samples.iter().all(|s| s.k == samples[0].k) {
        return Err(Error::DegenerateFit("K does not vary".into()));
    }
    let separated = sky.1 <= cloud.0 || cloud.1 <= sky.0;

    let (mut a0, mut a1) = (0.0f64, 0.0f64);
    let mut nll = logistic_nll(samples, a0, a1);
    let mut trace = vec![nll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < IRLS_MAX_ITERATIONS {
        iterations += 1;
        let (mut h00, mut h01, mut h11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in samples {
            let p = sigmoid(a0 + a1 * s.k);
            let w = s.weight * p * (1.0 - p);
            let r = s.weight * (if s.label.is_cloud() { 1.0 } else { 0.0 } - p);
            h00 += w;
            h01 += w * s.k;
            h11 += w * s.k * s.k;
            g0 += r;
            g1 += r * s.k;
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > f64::EPSILON * h00 * h11) {
            break;
        }
        let d0 = (h11 * g0 - h01 * g1) / det;
        let d1 = (h00 * g1 - h01 * g0) / det;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=IRLS_MAX_HALVINGS {
            let cand = logistic_nll(samples, a0 + scale * d0, a1 + scale * d1);
            if cand <= nll + IRLS_ASCENT_TOLERANCE * nll.abs().max(1.0) {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            break;
        };
        a0 += scale * d0;
        a1 += scale * d1;
        nll = next;
        trace.push(nll);
        if (scale * d0).abs().max((scale * d1).abs()) < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }
    if separated {
        converged = false;
        log::warn!("classes are perfectly separated in K; logistic fit does not converge");
    } else if !converged {
        log::warn!("IRLS stopped after {iterations} iterations without converging");
    }
    Ok(LogisticFit {
        alpha0: a0,
        alpha1: a1,
        iterations,
        converged,
        separated,
        nll_trace: trace,
    })
}

/// Inclusive, evenly spaced grid of candidate interaction weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for BetaGrid {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 2.0,
            step: 0.01,
        }
    }
}

impl BetaGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.min >= 0.0 && self.step > 0.0 && self.max >= self.min)
            || !(self.min.is_finite() && self.max.is_finite())
        {
            return Err(Error::Contract(format!("empty beta grid {self:?}")));
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.min + k as f64 * self.step).collect())
    }
}

impl FromStr for BetaGrid {
    type Err = Error;

    /// `min:max:step`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::parse("beta grid", format!("{s:?}, expected min:max:step"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
        Ok(Self {
            min: num(parts[0])?,
            max: num(parts[1])?,
            step: num(parts[2])?,
        })
    }
}

/// A segmented training image with per-site truth pixel counts.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub seg: Segmentation,
    pub counts: Vec<[usize; 2]>,
}

impl LabelledImage {
    pub fn prepare(img: &PixelImage, truth: &Mask, cfg: &SegmentConfig) -> Result<Self> {
        let seg = Segmentation::compute(img, cfg)?;
        let counts = seg.truth_counts(truth)?;
        Ok(Self { seg, counts })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaFit {
    pub beta: f64,
    /// Total misclassified pixels at every grid point.
    pub curve: Vec<(f64, usize)>,
}

impl BetaFit {
    pub fn error_at(&self, beta: f64) -> Option<usize> {
        self.curve
            .iter()
            .find(|(b, _)| (b - beta).abs() < 1e-12)
            .map(|&(_, e)| e)
    }
}

/// Total pixel error over `images` after ICM at one parameter setting.
pub fn corpus_pixel_error(images: &[LabelledImage], params: &CrfParams, opts: &IcmOptions) -> Result<usize> {
    let mut total = 0;
    for im in images {
        let out = icm_with(&im.seg.graph, params, None, opts)?;
        total += site_pixel_errors(&out.labels, &im.counts);
    }
    Ok(total)
}

/// Pick the grid weight with the fewest misclassified pixels summed over
/// all images; ties go to the smallest weight.
pub fn fit_beta_prepared(
    images: &[LabelledImage],
    alpha0: f64,
    alpha1: f64,
    grid: &BetaGrid,
    opts: &IcmOptions,
) -> Result<BetaFit> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images for beta selection".into()));
    }
    let points = grid.points()?;
    let curve: Vec<(f64, usize)> = points
        .par_iter()
        .map(|&beta| {
            let params = CrfParams::new(alpha0, alpha1, beta)?;
            Ok((beta, corpus_pixel_error(images, &params, opts)?))
        })
        .collect::<Result<_>>()?;
    let best = curve
        .iter()
        .fold(curve[0], |best, &cur| if cur.1 < best.1 { cur } else { best });
    Ok(BetaFit {
        beta: best.0,
        curve,
    })
}

pub fn fit_beta(
    beta_images: &[(PixelImage, Mask)],
    alpha0: f64,
    alpha1: f64,
    grid: &BetaGrid,
    cfg: &SegmentConfig,
    opts: &IcmOptions,
) -> Result<BetaFit> {
    let prepared = beta_images
        .iter()
        .map(|(img, truth)| LabelledImage::prepare(img, truth, cfg))
        .collect::<Result<Vec<_>>>()?;
    fit_beta_prepared(&prepared, alpha0, alpha1, grid, opts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub segment: SegmentConfig,
    pub beta_grid: BetaGrid,
    pub icm: IcmOptions,
    /// Fit the association on individual pixels instead of sites.
    pub per_pixel: bool,
}

/// Labelled images for the two training pieces.
#[derive(Debug, Clone, Default)]
pub struct TrainSplit {
    pub assoc_images: Vec<(PixelImage, Mask)>,
    pub beta_images: Vec<(PixelImage, Mask)>,
}

impl TrainSplit {
    /// True when some image appears in both halves.
    pub fn has_leakage(&self) -> bool {
        self.assoc_images
            .iter()
            .any(|(a, _)| self.beta_images.iter().any(|(b, _)| a == b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: CrfParams,
    pub logistic: LogisticFit,
    pub beta: BetaFit,
    pub leakage: bool,
}

pub fn fit_association(images: &[(PixelImage, Mask)], cfg: &TrainConfig) -> Result<LogisticFit> {
    let per_image: Vec<Vec<TrainSample>> = images
        .par_iter()
        .map(|(img, truth)| {
            if cfg.per_pixel {
                pixel_samples(img, truth)
            } else {
                make_samples(img, truth, &cfg.segment)
            }
        })
        .collect::<Result<_>>()?;
    fit_logistic(&per_image.concat())
}

pub fn train_pipeline(split: &TrainSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if split.assoc_images.is_empty() || split.beta_images.is_empty() {
        return Err(Error::EmptyInput("both training halves need images".into()));
    }
    let leakage = split.has_leakage();
    if leakage {
        log::warn!("the same image appears in both training halves");
    }
    let logistic = fit_association(&split.assoc_images, cfg)?;
    log::info!(
        "association fit: alpha0 = {}, alpha1 = {} ({} iterations)",
        logistic.alpha0,
        logistic.alpha1,
        logistic.iterations
    );
    let prepared = split
        .beta_images
        .par_iter()
        .map(|(img, truth)| LabelledImage::prepare(img, truth, &cfg.segment))
        .collect::<Result<Vec<_>>>()?;
    let beta = fit_beta_prepared(&prepared, logistic.alpha0, logistic.alpha1, &cfg.beta_grid, &cfg.icm)?;
    log::info!("interaction weight: beta = {}", beta.beta);
    let params = CrfParams::new(logistic.alpha0, logistic.alpha1, beta.beta)?;
    Ok(TrainOutcome {
        params,
        logistic,
        beta,
        leakage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::MaskValue;
    use rand::{Rng, SeedableRng};

    fn sample(k: f64, cloud: bool, weight: f64) -> TrainSample {
        TrainSample {
            k,
            label: Label::from_bit(cloud),
            weight,
        }
    }

    #[test]
    fn symmetric_samples_put_boundary_at_midpoint() {
        // Overlapping classes mirrored about 0.5.
        let mut s = Vec::new();
        for (i, &k) in [0.1, 0.2, 0.3, 0.4, 0.45, 0.48].iter().enumerate() {
            let w = (i + 1) as f64;
            s.push(sample(k, true, 3.0 * w));
            s.push(sample(k, false, w));
            s.push(sample(1.0 - k, false, 3.0 * w));
            s.push(sample(1.0 - k, true, w));
        }
        let fit = fit_logistic(&s).unwrap();
        assert!(fit.converged);
        assert!((-fit.alpha0 / fit.alpha1 - 0.5).abs() < 1e-6);
    }

    #[test]
    fn single_class_is_degenerate() {
        let s = vec![sample(0.1, true, 1.0), sample(0.2, true, 1.0)];
        assert!(matches!(fit_logistic(&s), Err(Error::DegenerateFit(_))));
        assert!(matches!(fit_logistic(&s[..1]), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn separation_is_flagged_not_converged() {
        let s = vec![
            sample(0.0, true, 1.0),
            sample(0.05, true, 1.0),
            sample(0.3, false, 1.0),
            sample(0.4, false, 1.0),
        ];
        let fit = fit_logistic(&s).unwrap();
        assert!(fit.separated);
        assert!(!fit.converged);
        assert!(fit.alpha1 < 0.0);
        assert!(fit.nll_trace.windows(2).all(|w| w[1] <= w[0] + IRLS_ASCENT_TOLERANCE * w[0].abs().max(1.0)));
    }

    #[test]
    fn fit_is_invariant_to_order_and_weight_scale() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let s: Vec<TrainSample> = (0..300)
            .map(|_| {
                let k: f64 = rng.gen_range(-0.1..0.5);
                let p = 1.0 / (1.0 + (-(4.0 - 25.0 * k)).exp());
                sample(k, rng.gen_bool(p), rng.gen_range(1..50) as f64)
            })
            .collect();
        let base = fit_logistic(&s).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        let r = fit_logistic(&rev).unwrap();
        let scaled: Vec<TrainSample> = s.iter().map(|t| TrainSample { weight: t.weight * 7.5, ..*t }).collect();
        let sc = fit_logistic(&scaled).unwrap();
        for other in [r, sc] {
            assert!((other.alpha0 - base.alpha0).abs() < 1e-9 * base.alpha0.abs().max(1.0));
            assert!((other.alpha1 - base.alpha1).abs() < 1e-9 * base.alpha1.abs().max(1.0));
        }
    }

    #[test]
    fn grid_parsing_and_points() {
        let g: BetaGrid = "0:2:0.01".parse().unwrap();
        let p = g.points().unwrap();
        assert_eq!(p.len(), 201);
        assert!((p[95] - 0.95).abs() < 1e-12);
        assert_eq!(*p.last().unwrap(), 2.0);
        let single = BetaGrid { min: 0.0, max: 0.0, step: 0.01 };
        assert_eq!(single.points().unwrap(), vec![0.0]);
        assert!(BetaGrid { min: 0.0, max: 1.0, step: 0.0 }.points().is_err());
        assert!(BetaGrid { min: 1.0, max: 0.5, step: 0.1 }.points().is_err());
        assert!("0:1".parse::<BetaGrid>().is_err());
    }

    fn two_blocks() -> (PixelImage, Mask) {
        // Left half blue sky, right half white cloud; truth matches.
        let (w, h) = (40u32, 20u32);
        let px = (0..w * h)
            .map(|i| if i % w < 20 { [70, 100, 210] } else { [215, 215, 220] })
            .collect();
        let values = (0..w * h)
            .map(|i| if i % w < 20 { MaskValue::Sky } else { MaskValue::Cloud })
            .collect();
        (PixelImage::new(w, h, px).unwrap(), Mask::new(w, h, values).unwrap())
    }

    #[test]
    fn majority_label_and_weight() {
        let (img, _) = two_blocks();
        let seg = Segmentation::compute(&img, &SegmentConfig::default()).unwrap();
        let counts = vec![[60, 40], [0, 0]];
        let s = samples_from_counts(&seg, &counts);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, Label::Sky);
        assert_eq!(s[0].weight, 100.0);
        let s = samples_from_counts(&seg, &[[5, 5], [1, 0]]);
        assert_eq!(s[0].label, Label::Cloud);
    }

    #[test]
    fn all_cloud_truth_gives_cloud_samples() {
        let (img, truth) = two_blocks();
        let all_cloud = Mask::filled(truth.width, truth.height, MaskValue::Cloud);
        let s = make_samples(&img, &all_cloud, &SegmentConfig::default()).unwrap();
        assert!(s.iter().all(|t| t.label == Label::Cloud));
        let s = make_samples(&img, &truth, &SegmentConfig::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.iter().map(|t| t.weight).sum::<f64>(), 800.0);
    }

    #[test]
    fn singleton_grid_and_perfect_labelling_select_zero() {
        let (img, truth) = two_blocks();
        let images = vec![(img, truth)];
        let cfg = SegmentConfig::default();
        let opts = IcmOptions::default();
        let single = BetaGrid { min: 0.0, max: 0.0, step: 0.01 };
        let fit = fit_beta(&images, 6.072, -37.001, &single, &cfg, &opts).unwrap();
        assert_eq!(fit.beta, 0.0);
        // The association alone already labels both blocks correctly.
        let fit = fit_beta(&images, 6.072, -37.001, &BetaGrid::default(), &cfg, &opts).unwrap();
        assert_eq!(fit.curve[0].1, 0);
        assert_eq!(fit.beta, 0.0);
    }

    #[test]
    fn leakage_is_reported() {
        let (img, truth) = two_blocks();
        let split = TrainSplit {
            assoc_images: vec![(img.clone(), truth.clone()), (img.clone(), truth.clone())],
            beta_images: vec![(img, truth)],
        };
        assert!(split.has_leakage());
    }
}
