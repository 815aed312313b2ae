//! Thresholding baselines: a corpus-trained fixed threshold, per-image
//! minimum cross entropy thresholding, and the hybrid rule that switches
//! between them on the spread of NBR.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{compute_features, FeatureImage, PixelImage};
use crate::mask::{Label, Mask, MaskValue};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Nbr,
    Nsv,
}

/// Which side of the threshold is cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Cloud when `value < t`.
    CloudLow,
    /// Cloud when `value >= t`.
    CloudHigh,
}

impl Feature {
    /// Histogram range. NSV never reaches -1 but shares the NBR range.
    pub fn range(self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    /// Clouds have low NBR and high NSV.
    pub fn cloud_direction(self) -> Direction {
        match self {
            Feature::Nbr => Direction::CloudLow,
            Feature::Nsv => Direction::CloudHigh,
        }
    }

    pub fn field(self, feats: &FeatureImage) -> &[f64] {
        match self {
            Feature::Nbr => &feats.nbr,
            Feature::Nsv => &feats.nsv,
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nbr" => Ok(Feature::Nbr),
            "nsv" => Ok(Feature::Nsv),
            other => Err(Error::parse("feature", format!("unknown feature {other:?}"))),
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Feature::Nbr => "nbr",
            Feature::Nsv => "nsv",
        })
    }
}

impl Direction {
    #[inline]
    pub fn classify(self, value: f64, t: f64) -> Label {
        let below = value < t;
        match self {
            Direction::CloudLow => Label::from_bit(below),
            Direction::CloudHigh => Label::from_bit(!below),
        }
    }
}

/// 256-bin histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bins: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub feature: Feature,
}

impl Histogram {
    pub fn empty(feature: Feature) -> Self {
        let (lo, hi) = feature.range();
        Self {
            bins: vec![0.0; HISTOGRAM_BINS],
            lo,
            hi,
            feature,
        }
    }

    pub fn from_values(feature: Feature, values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::empty(feature);
        for v in values {
            if !v.is_nan() {
                let b = h.bin_of(v);
                h.bins[b] += 1.0;
            }
        }
        h
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / HISTOGRAM_BINS as f64
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let pos = ((v - self.lo) / (self.hi - self.lo) * HISTOGRAM_BINS as f64).floor();
        pos.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize
    }

    /// Edge `k` in `0..=256`; edge `k` is the lower edge of bin `k`.
    pub fn edge(&self, k: usize) -> f64 {
        if k == HISTOGRAM_BINS {
            self.hi
        } else {
            self.lo + k as f64 * self.bin_width()
        }
    }

    pub fn occupied_bins(&self) -> usize {
        self.bins.iter().filter(|&&c| c > 0.0).count()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            bins: self.bins.iter().map(|b| b * c).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedThreshold {
    pub threshold: f64,
    pub edge: usize,
    pub errors: f64,
}

/// Scan the 257 histogram edges of the feature range for the threshold with
/// the fewest weighted misclassifications. Ties go to the lowest edge.
pub fn fixed_threshold_train(
    samples: &[(f64, Label, f64)],
    feature: Feature,
    direction: Direction,
) -> Result<FixedThreshold> {
    let has = |l: Label| samples.iter().any(|s| s.1 == l && s.2 > 0.0);
    if !has(Label::Sky) || !has(Label::Cloud) {
        return Err(Error::DegenerateFit("fixed threshold needs both labels".into()));
    }
    let mut by_class: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for &(v, label, w) in samples {
        if !v.is_nan() {
            by_class[label as usize].push((v, w));
        }
    }
    // Prefix sums of weight in ascending value order give the weight below
    // any threshold by binary search.
    let prefix: Vec<(Vec<f64>, Vec<f64>)> = by_class
        .iter_mut()
        .map(|c| {
            c.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut acc = 0.0;
            let cum = std::iter::once(0.0)
                .chain(c.iter().map(|&(_, w)| {
                    acc += w;
                    acc
                }))
                .collect();
            (c.iter().map(|p| p.0).collect(), cum)
        })
        .collect();
    let below = |class: usize, t: f64| {
        let (vals, cum) = &prefix[class];
        cum[vals.partition_point(|&v| v < t)]
    };
    let total = |class: usize| *prefix[class].1.last().unwrap();

    let hist = Histogram::empty(feature);
    let mut best: Option<FixedThreshold> = None;
    for k in 0..=HISTOGRAM_BINS {
        let t = hist.edge(k);
        let (sky_below, cloud_below) = (below(0, t), below(1, t));
        let errors = match direction {
            // Cloud below t: sky below and cloud at or above are errors.
            Direction::CloudLow => sky_below + (total(1) - cloud_below),
            Direction::CloudHigh => cloud_below + (total(0) - sky_below),
        };
        if best.is_none_or(|b| errors < b.errors) {
            best = Some(FixedThreshold {
                threshold: t,
                edge: k,
                errors,
            });
        }
    }
    Ok(best.expect("at least one edge"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MceThreshold {
    /// Last bin (1-based) of the lower class.
    pub bin: usize,
    /// The same split in feature units: values below go to the lower class.
    pub threshold: f64,
    pub divergence: f64,
}

/// Minimum cross entropy threshold of a histogram.
///
/// Bins are indexed `g = 1..=256` so every grey level is positive. For each
/// split `t` the lower class is `g <= t`, and the cross entropy is
/// `sum_{g<=t} g h(g) ln(g / mu1) + sum_{g>t} g h(g) ln(g / mu2)` with `mu1`,
/// `mu2` the class means. Only splits that leave mass on both sides are
/// considered; ties go to the lowest `t`.
pub fn mce_threshold(h: &Histogram) -> Result<MceThreshold> {
    if h.bins.len() != HISTOGRAM_BINS || h.bins.iter().any(|&c| c < 0.0) {
        return Err(Error::Contract("malformed histogram".into()));
    }
    if h.occupied_bins() < 2 {
        return Err(Error::EmptyInput(
            "cross entropy thresholding needs mass in at least two bins".into(),
        ));
    }
    // Cumulative mass, first moment and sum of g h ln g.
    let mut mass = [0.0; HISTOGRAM_BINS + 1];
    let mut moment = [0.0; HISTOGRAM_BINS + 1];
    let mut entropy = [0.0; HISTOGRAM_BINS + 1];
    for (i, &c) in h.bins.iter().enumerate() {
        let g = (i + 1) as f64;
        mass[i + 1] = mass[i] + c;
        moment[i + 1] = moment[i] + g * c;
        entropy[i + 1] = entropy[i] + g * c * g.ln();
    }
    let n = HISTOGRAM_BINS;
    let mut best: Option<MceThreshold> = None;
    for t in 1..n {
        let (m1, m2) = (mass[t], mass[n] - mass[t]);
        if m1 <= 0.0 || m2 <= 0.0 {
            continue;
        }
        let (s1, s2) = (moment[t], moment[n] - moment[t]);
        let (mu1, mu2) = (s1 / m1, s2 / m2);
        let d = (entropy[t] - s1 * mu1.ln()) + ((entropy[n] - entropy[t]) - s2 * mu2.ln());
        if best.is_none_or(|b| d < b.divergence) {
            best = Some(MceThreshold {
                bin: t,
                threshold: h.edge(t),
                divergence: d,
            });
        }
    }
    best.ok_or_else(|| Error::EmptyInput("no split leaves mass on both sides".into()))
}

/// Per-pixel thresholding; ignored pixels stay ignored.
pub fn threshold_classify(feats: &FeatureImage, t: f64, feature: Feature, direction: Direction) -> Mask {
    let values = feature
        .field(feats)
        .iter()
        .map(|&v| {
            if v.is_nan() {
                MaskValue::Ignore
            } else {
                direction.classify(v, t).into()
            }
        })
        .collect();
    Mask {
        width: feats.width,
        height: feats.height,
        values,
    }
}

/// Adaptive thresholding of one image on one feature.
pub fn mce_classify(feats: &FeatureImage, feature: Feature) -> Result<(Mask, MceThreshold)> {
    let h = Histogram::from_values(feature, feats.valid_values(feature));
    let t = mce_threshold(&h)?;
    Ok((threshold_classify(feats, t.threshold, feature, feature.cloud_direction()), t))
}

/// Population standard deviation of the non-ignored NBR values.
pub fn nbr_std(feats: &FeatureImage) -> Result<f64> {
    let (n, sum) = feats
        .valid_values(Feature::Nbr)
        .fold((0usize, 0.0f64), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return Err(Error::EmptyInput("every pixel is ignored".into()));
    }
    let mean = sum / n as f64;
    let ss: f64 = feats.valid_values(Feature::Nbr).map(|v| (v - mean) * (v - mean)).sum();
    Ok((ss / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fixed,
    Adaptive,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Fixed => "fixed",
            Branch::Adaptive => "adaptive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutcome {
    pub mask: Mask,
    pub std_nbr: f64,
    pub branch: Branch,
    pub threshold: f64,
}

impl HybridOutcome {
    /// CSV record `image,std_nbr,branch,threshold`.
    pub fn csv_record(&self, image: &str) -> String {
        format!("{image},{},{},{}", self.std_nbr, self.branch, self.threshold)
    }
}

pub const HYBRID_CSV_HEADER: &str = "image,std_nbr,branch,threshold";

/// Fixed NBR threshold when the NBR spread is below `sigma_threshold`,
/// adaptive NBR threshold otherwise. An image whose histogram cannot be
/// split falls back to the fixed threshold.
pub fn hybrid_classify(feats: &FeatureImage, sigma_threshold: f64, fixed_t: f64) -> Result<HybridOutcome> {
    if !(sigma_threshold >= 0.0) {
        return Err(Error::Contract(format!("sigma threshold {sigma_threshold} < 0")));
    }
    let std_nbr = nbr_std(feats)?;
    let direction = Feature::Nbr.cloud_direction();
    let fixed = |std_nbr| HybridOutcome {
        mask: threshold_classify(feats, fixed_t, Feature::Nbr, direction),
        std_nbr,
        branch: Branch::Fixed,
        threshold: fixed_t,
    };
    if std_nbr < sigma_threshold {
        return Ok(fixed(std_nbr));
    }
    match mce_classify(feats, Feature::Nbr) {
        Ok((mask, t)) => Ok(HybridOutcome {
            mask,
            std_nbr,
            branch: Branch::Adaptive,
            threshold: t.threshold,
        }),
        Err(Error::EmptyInput(_)) => {
            log::warn!("NBR histogram has a single occupied bin; using the fixed threshold");
            Ok(fixed(std_nbr))
        }
        Err(e) => Err(e),
    }
}

/// Per-image inputs to the hybrid switch training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridRecord {
    pub std_nbr: f64,
    pub fixed_errors: usize,
    pub adaptive_errors: usize,
}

/// Choose the spread threshold minimizing total corpus pixel error. The
/// candidates are 0, every observed spread, and +infinity (always fixed);
/// ties go to the smallest candidate.
pub fn train_sigma_threshold(records: &[HybridRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no images for the hybrid switch".into()));
    }
    let mut candidates: Vec<f64> = records.iter().map(|r| r.std_nbr).collect();
    candidates.push(0.0);
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let cost = |sigma: f64| -> usize {
        records
            .iter()
            .map(|r| if r.std_nbr < sigma { r.fixed_errors } else { r.adaptive_errors })
            .sum()
    };
    let mut best = (candidates[0], cost(candidates[0]));
    for &c in &candidates[1..] {
        let e = cost(c);
        if e < best.1 {
            best = (c, e);
        }
    }
    Ok(best.0)
}

/// Every labelled, non-ignored pixel as a unit-weight sample.
pub fn labelled_pixels(feats: &FeatureImage, truth: &Mask, feature: Feature) -> Result<Vec<(f64, Label, f64)>> {
    if feats.dims() != truth.dims() {
        return Err(Error::dims(feats.dims(), truth.dims()));
    }
    Ok(feature
        .field(feats)
        .iter()
        .zip(&truth.values)
        .filter_map(|(&v, t)| Some((v, t.label()?, 1.0)))
        .filter(|s| !s.0.is_nan())
        .collect())
}

/// Fixed threshold trained on the pixels of labelled images.
pub fn fit_fixed(images: &[(PixelImage, Mask)], feature: Feature) -> Result<FixedThreshold> {
    let per_image = images
        .par_iter()
        .map(|(img, truth)| labelled_pixels(&compute_features(img), truth, feature))
        .collect::<Result<Vec<_>>>()?;
    fixed_threshold_train(&per_image.concat(), feature, feature.cloud_direction())
}

fn pixel_errors(pred: &Mask, truth: &Mask) -> usize {
    pred.values
        .iter()
        .zip(&truth.values)
        .filter(|(p, t)| match (p.label(), t.label()) {
            (Some(a), Some(b)) => a != b,
            _ => false,
        })
        .count()
}

/// Spread threshold for the hybrid rule, trained on labelled images with the
/// fixed NBR threshold `fixed_t`.
pub fn fit_hybrid(images: &[(PixelImage, Mask)], fixed_t: f64) -> Result<(f64, Vec<HybridRecord>)> {
    let records = images
        .par_iter()
        .map(|(img, truth)| {
            let feats = compute_features(img);
            let fixed = threshold_classify(&feats, fixed_t, Feature::Nbr, Feature::Nbr.cloud_direction());
            // Forcing the adaptive branch; a degenerate histogram falls back.
            let adaptive = hybrid_classify(&feats, 0.0, fixed_t)?;
            Ok(HybridRecord {
                std_nbr: adaptive.std_nbr,
                fixed_errors: pixel_errors(&fixed, truth),
                adaptive_errors: pixel_errors(&adaptive.mask, truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train_sigma_threshold(&records)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn feats_from(nbr: Vec<f64>, nsv: Vec<f64>) -> FeatureImage {
        FeatureImage {
            width: nbr.len() as u32,
            height: 1,
            nbr,
            nsv,
        }
    }

    /// Direct evaluation of the cross entropy at every split.
    fn mce_oracle(h: &Histogram) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for t in 1..256 {
            let (mut m1, mut s1, mut m2, mut s2) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in h.bins.iter().enumerate() {
                let g = (i + 1) as f64;
                if i + 1 <= t {
                    m1 += c;
                    s1 += g * c;
                } else {
                    m2 += c;
                    s2 += g * c;
                }
            }
            if m1 == 0.0 || m2 == 0.0 {
                continue;
            }
            let (mu1, mu2) = (s1 / m1, s2 / m2);
            let mut d = 0.0;
            for (i, &c) in h.bins.iter().enumerate() {
                let g = (i + 1) as f64;
                let mu = if i + 1 <= t { mu1 } else { mu2 };
                if c > 0.0 {
                    d += g * c * (g / mu).ln();
                }
            }
            if d < best.1 - 1e-9 * d.abs().max(1.0) {
                best = (t, d);
            }
        }
        best
    }

    #[test]
    fn two_spikes_give_zero_divergence_at_lowest_split() {
        let mut h = Histogram::empty(Feature::Nbr);
        h.bins[51] = 300.0; // g = 52
        h.bins[204] = 100.0; // g = 205
        let t = mce_threshold(&h).unwrap();
        assert_eq!(t.bin, 52);
        assert!(t.divergence.abs() < 1e-9);
        assert_eq!(t.threshold, h.edge(52));
    }

    #[test]
    fn bimodal_mixture_matches_direct_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let values = (0..20_000).map(|i| {
            let u: f64 = rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5;
            if i % 3 == 0 { 0.05 + 0.06 * u } else { 0.35 + 0.1 * u }
        });
        let h = Histogram::from_values(Feature::Nbr, values);
        let t = mce_threshold(&h).unwrap();
        let (bin, d) = mce_oracle(&h);
        assert_eq!(t.bin, bin);
        assert!((t.divergence - d).abs() < 1e-6 * d.abs().max(1.0));
    }

    #[test]
    fn uniform_histogram_matches_direct_scan() {
        let mut h = Histogram::empty(Feature::Nbr);
        h.bins.iter_mut().for_each(|b| *b = 10.0);
        let t = mce_threshold(&h).unwrap();
        let (bin, d) = mce_oracle(&h);
        assert_eq!(t.bin, bin);
        assert!((t.divergence - d).abs() < 1e-6 * d.abs());
    }

    #[test]
    fn mce_rejects_single_bin() {
        let mut h = Histogram::empty(Feature::Nsv);
        h.bins[10] = 5.0;
        assert!(matches!(mce_threshold(&h), Err(Error::EmptyInput(_))));
        assert!(mce_threshold(&Histogram::empty(Feature::Nsv)).is_err());
    }

    #[test]
    fn mce_is_scale_invariant() {
        let mut h = Histogram::empty(Feature::Nbr);
        for (i, b) in h.bins.iter_mut().enumerate() {
            *b = ((i * 37) % 11) as f64;
        }
        assert_eq!(mce_threshold(&h).unwrap().bin, mce_threshold(&h.scaled(13.0)).unwrap().bin);
    }

    fn brute_fixed(samples: &[(f64, Label, f64)], dir: Direction) -> (usize, f64) {
        let h = Histogram::empty(Feature::Nbr);
        let mut best = (0, f64::INFINITY);
        for k in 0..=256 {
            let t = h.edge(k);
            let e: f64 = samples
                .iter()
                .filter(|s| dir.classify(s.0, t) != s.1)
                .map(|s| s.2)
                .sum();
            if e < best.1 {
                best = (k, e);
            }
        }
        best
    }

    #[test]
    fn separated_samples_pick_lowest_zero_error_edge() {
        let samples: Vec<_> = [0.01, 0.02, 0.03]
            .iter()
            .map(|&v| (v, Label::Cloud, 1.0))
            .chain([0.4, 0.5].iter().map(|&v| (v, Label::Sky, 1.0)))
            .collect();
        let f = fixed_threshold_train(&samples, Feature::Nbr, Direction::CloudLow).unwrap();
        assert_eq!(f.errors, 0.0);
        // First edge above 0.03.
        let h = Histogram::empty(Feature::Nbr);
        assert!(h.edge(f.edge - 1) <= 0.03 && f.threshold > 0.03);
    }

    #[test]
    fn overlapping_gaussians_match_brute_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<_> = (0..4000)
            .map(|i| {
                let u: f64 = (0..4).map(|_| rng.gen::<f64>()).sum::<f64>() - 2.0;
                if i % 2 == 0 {
                    (0.08 + 0.08 * u, Label::Cloud, 1.0)
                } else {
                    (0.25 + 0.1 * u, Label::Sky, rng.gen_range(1..4) as f64)
                }
            })
            .collect();
        for dir in [Direction::CloudLow, Direction::CloudHigh] {
            let f = fixed_threshold_train(&samples, Feature::Nbr, dir).unwrap();
            let (k, e) = brute_fixed(&samples, dir);
            assert_eq!(f.edge, k);
            assert_eq!(f.errors, e);
        }
    }

    #[test]
    fn identical_values_cost_the_minority() {
        let samples = vec![
            (0.2, Label::Cloud, 1.0),
            (0.2, Label::Sky, 1.0),
            (0.2, Label::Sky, 1.0),
        ];
        let f = fixed_threshold_train(&samples, Feature::Nbr, Direction::CloudLow).unwrap();
        assert_eq!(f.errors, 1.0);
        assert!(f.threshold <= 0.2);
        assert!(fixed_threshold_train(&samples[1..], Feature::Nbr, Direction::CloudLow).is_err());
    }

    #[test]
    fn vacuous_thresholds() {
        let f = feats_from(vec![0.1, 0.3, f64::NAN], vec![0.5, 0.6, f64::NAN]);
        let all_sky = threshold_classify(&f, -1.0, Feature::Nbr, Direction::CloudLow);
        assert_eq!(all_sky.values, vec![MaskValue::Sky, MaskValue::Sky, MaskValue::Ignore]);
        let all_cloud = threshold_classify(&f, 1.1, Feature::Nbr, Direction::CloudLow);
        assert_eq!(all_cloud.count(MaskValue::Cloud), 2);
        let nsv = threshold_classify(&f, 0.55, Feature::Nsv, Direction::CloudHigh);
        assert_eq!(nsv.values[..2], [MaskValue::Sky, MaskValue::Cloud]);
    }

    #[test]
    fn hybrid_branches() {
        let flat = feats_from(vec![0.2; 10], vec![0.5; 10]);
        let out = hybrid_classify(&flat, 0.01, 0.15).unwrap();
        assert_eq!(out.branch, Branch::Fixed);
        assert!(out.std_nbr < 1e-15);

        let split = feats_from(
            (0..20).map(|i| if i < 10 { 0.02 } else { 0.4 }).collect(),
            vec![0.5; 20],
        );
        let out = hybrid_classify(&split, 0.0, 0.15).unwrap();
        assert_eq!(out.branch, Branch::Adaptive);
        assert!((out.std_nbr - 0.19).abs() < 1e-12);
        assert_eq!(out.mask.count(MaskValue::Cloud), 10);
        assert_eq!(out.csv_record("a.png").split(',').nth(2), Some("adaptive"));
    }

    #[test]
    fn sigma_training_picks_cheapest_switch() {
        let r = |s, f, a| HybridRecord {
            std_nbr: s,
            fixed_errors: f,
            adaptive_errors: a,
        };
        // Low spread images prefer fixed, high spread adaptive.
        let records = [r(0.01, 1, 50), r(0.02, 2, 40), r(0.2, 30, 3), r(0.3, 20, 5)];
        assert_eq!(train_sigma_threshold(&records).unwrap(), 0.2);
        let all_fixed = [r(0.1, 0, 9), r(0.2, 0, 9)];
        assert_eq!(train_sigma_threshold(&all_fixed).unwrap(), f64::INFINITY);
    }
}
