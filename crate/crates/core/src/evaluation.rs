//! Pixel confusion counts, accuracy/precision/recall, Student-t confidence
//! intervals over per-image metrics, and corpus-level method comparison.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{hybrid_classify, mce_classify, threshold_classify, Feature};
use crate::crfmodel::CrfParams;
use crate::error::{Error, Result};
use crate::imaging::{compute_features, load_image, PixelImage};
use crate::inference::IcmOptions;
use crate::manifest::ManifestEntry;
use crate::mask::{Mask, MaskValue};
use crate::pipeline::{SegmentConfig, Segmentation};

/// Pixel counts with cloud as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn errors(&self) -> u64 {
        self.fp + self.fn_
    }
}

/// Compare a prediction against truth over pixels that neither mask ignores.
pub fn confusion(pred: &Mask, truth: &Mask) -> Result<ConfusionMatrix> {
    if pred.dims() != truth.dims() {
        return Err(Error::dims(truth.dims(), pred.dims()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in pred.values.iter().zip(&truth.values) {
        match (p, t) {
            (MaskValue::Cloud, MaskValue::Cloud) => cm.tp += 1,
            (MaskValue::Sky, MaskValue::Sky) => cm.tn += 1,
            (MaskValue::Cloud, MaskValue::Sky) => cm.fp += 1,
            (MaskValue::Sky, MaskValue::Cloud) => cm.fn_ += 1,
            _ => {}
        }
    }
    if cm.total() == 0 {
        return Err(Error::EmptyInput("no pixel is labelled in both masks".into()));
    }
    Ok(cm)
}

/// Metrics whose denominator is zero are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        precision: ratio(cm.tp, cm.tp + cm.fp),
        recall: ratio(cm.tp, cm.tp + cm.fn_),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Accuracy, Metric::Precision, Metric::Recall];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
        }
    }

    pub fn of(self, m: &Metrics) -> Option<f64> {
        match self {
            Metric::Accuracy => m.accuracy,
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

// Lanczos approximation, g = 7, n = 9.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Student-t cumulative distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Student-t quantile for `p` in `(0, 1)`, found by bisection on the CDF.
pub fn student_t_quantile(p: f64, df: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || !(df > 0.0) {
        return Err(Error::Contract(format!("t quantile p = {p}, df = {df}")));
    }
    if p < 0.5 {
        return Ok(-student_t_quantile(1.0 - p, df)?);
    }
    let mut hi = 1.0;
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
    pub level: f64,
}

/// Below this many values the interval is reported but flagged as unreliable.
pub const SMALL_SAMPLE: usize = 5;

/// Two-sided Student-t interval `mean +/- t * s / sqrt(n)`.
pub fn t_interval(values: &[f64], level: f64) -> Result<Interval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Contract(format!("t interval needs n >= 2, got {n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Contract(format!("confidence level {level}")));
    }
    if n < SMALL_SAMPLE {
        log::debug!("confidence interval from only {n} values");
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = student_t_quantile((1.0 + level) / 2.0, (n - 1) as f64)?;
    Ok(Interval {
        mean,
        half_width: t * var.sqrt() / (n as f64).sqrt(),
        n,
        level,
    })
}

/// A detector under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Method {
    Crf {
        name: String,
        params: CrfParams,
    },
    Fixed {
        feature: Feature,
        threshold: f64,
    },
    Adaptive {
        feature: Feature,
    },
    Hybrid {
        sigma_threshold: f64,
        fixed_threshold: f64,
    },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Crf { name, .. } => name.clone(),
            Method::Fixed { feature, .. } => format!("fixed-{feature}"),
            Method::Adaptive { feature } => format!("mce-{feature}"),
            Method::Hybrid { .. } => "hybrid".into(),
        }
    }
}

/// Run one method on one image.
pub fn predict(
    method: &Method,
    img: &PixelImage,
    seg: &mut Option<Segmentation>,
    cfg: &EvalConfig,
) -> Result<Mask> {
    match method {
        Method::Crf { params, .. } => {
            if seg.is_none() {
                *seg = Some(Segmentation::compute(img, &cfg.segment)?);
            }
            let s = seg.as_ref().expect("segmentation computed");
            let out = s.infer(params, &cfg.icm)?;
            s.mask(&out.labels)
        }
        Method::Fixed { feature, threshold } => {
            let feats = compute_features(img);
            Ok(threshold_classify(&feats, *threshold, *feature, feature.cloud_direction()))
        }
        Method::Adaptive { feature } => Ok(mce_classify(&compute_features(img), *feature)?.0),
        Method::Hybrid {
            sigma_threshold,
            fixed_threshold,
        } => Ok(hybrid_classify(&compute_features(img), *sigma_threshold, *fixed_threshold)?.mask),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub segment: SegmentConfig,
    pub icm: IcmOptions,
    pub ci_level: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            segment: SegmentConfig::default(),
            icm: IcmOptions::default(),
            ci_level: 0.98,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub method: String,
    pub image: String,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub metric: Metric,
    pub mean: f64,
    /// `None` when fewer than two images define the metric.
    pub half_width: Option<f64>,
    pub level: f64,
    pub n: usize,
    /// Images whose metric was undefined.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusReport {
    pub methods: Vec<String>,
    pub images: Vec<ImageResult>,
    pub summary: Vec<SummaryRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl CorpusReport {
    pub fn summary_for(&self, method: &str, metric: Metric) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.metric == metric)
    }

    /// `method,image,accuracy,precision,recall`
    pub fn report_csv(&self) -> String {
        let mut out = String::from("method,image,accuracy,precision,recall\n");
        for r in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method,
                r.image,
                fmt_opt(r.metrics.accuracy),
                fmt_opt(r.metrics.precision),
                fmt_opt(r.metrics.recall)
            );
        }
        out
    }

    /// `method,metric,mean,half_width,level,n`
    pub fn summary_csv(&self) -> String {
        summary_csv(&self.summary)
    }

    pub fn table(&self) -> String {
        render_table(&self.summary)
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,metric,mean,half_width,level,n\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.metric.name(),
            r.mean,
            fmt_opt(r.half_width),
            r.level,
            r.n
        );
    }
    out
}

/// Parse a summary CSV, e.g. reference numbers from elsewhere.
pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("method,")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |why: &str| Error::parse("summary csv", format!("line {}: {why}", i + 1));
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(SummaryRow {
            method: f[0].to_string(),
            metric: Metric::parse(f[1]).ok_or_else(|| bad("unknown metric"))?,
            mean: num(f[2])?,
            half_width: if f[3] == "NA" { None } else { Some(num(f[3])?) },
            level: num(f[4])?,
            n: f[5].parse().map_err(|_| bad("bad count"))?,
            excluded: 0,
        });
    }
    Ok(rows)
}

fn capitalized(metric: Metric) -> &'static str {
    match metric {
        Metric::Accuracy => "Accuracy",
        Metric::Precision => "Precision",
        Metric::Recall => "Recall",
    }
}

/// Aligned text table: one row per metric, one column per method, cells
/// `mean ± half_width` to four decimals.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let levels: Vec<f64> = rows.iter().map(|r| r.level).collect();
    let cell = |method: &str, metric: Metric| {
        rows.iter()
            .find(|r| r.method == method && r.metric == metric)
            .map_or_else(
                || "-".to_string(),
                |r| match r.half_width {
                    Some(h) => format!("{:.4} ± {:.4}", r.mean, h),
                    None => format!("{:.4}", r.mean),
                },
            )
    };
    let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new())
        .chain(methods.iter().map(|m| m.to_string()))
        .collect()];
    for metric in Metric::ALL {
        grid.push(
            std::iter::once(capitalized(metric).to_string())
                .chain(methods.iter().map(|m| cell(m, metric)))
                .collect(),
        );
    }
    let ncols = methods.len() + 1;
    let widths: Vec<usize> = (0..ncols)
        .map(|c| grid.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    if let Some(level) = levels.first() {
        let _ = writeln!(out, "Mean ± half-width at {}% confidence", level * 100.0);
    }
    for row in &grid {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

/// Aggregate per-image results (per image first, then mean over images).
pub fn summarize(images: &[ImageResult], methods: &[String], level: f64) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut small = usize::MAX;
    for method in methods {
        for metric in Metric::ALL {
            let all: Vec<Option<f64>> = images
                .iter()
                .filter(|r| &r.method == method)
                .map(|r| metric.of(&r.metrics))
                .collect();
            let values: Vec<f64> = all.iter().flatten().copied().collect();
            let excluded = all.len() - values.len();
            if values.is_empty() {
                continue;
            }
            if excluded > 0 {
                log::warn!("{method}: {metric:?} undefined on {excluded} images, excluded");
            }
            small = small.min(values.len());
            let (mean, half_width) = if values.len() >= 2 {
                let iv = t_interval(&values, level)?;
                (iv.mean, Some(iv.half_width))
            } else {
                (values[0], None)
            };
            rows.push(SummaryRow {
                method: method.clone(),
                metric,
                mean,
                half_width,
                level,
                n: values.len(),
                excluded,
            });
        }
    }
    if small < SMALL_SAMPLE {
        log::warn!("confidence intervals from as few as {small} values are very wide");
    }
    Ok(rows)
}

/// Run every method on every `(name, image, truth)` triple and aggregate.
pub fn evaluate_images(
    methods: &[Method],
    images: &[(String, PixelImage, Mask)],
    cfg: &EvalConfig,
) -> Result<CorpusReport> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images with truth to evaluate".into()));
    }
    let per_image: Vec<Vec<ImageResult>> = images
        .par_iter()
        .map(|(name, img, truth)| {
            let mut seg = None;
            methods
                .iter()
                .map(|m| {
                    let pred = predict(m, img, &mut seg, cfg)?;
                    let cm = confusion(&pred, truth)?;
                    Ok(ImageResult {
                        method: m.name(),
                        image: name.clone(),
                        confusion: cm,
                        metrics: metrics(&cm),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let method_names: Vec<String> = methods.iter().map(Method::name).collect();
    // Method-major order for the report.
    let mut results = Vec::new();
    for name in &method_names {
        for img in &per_image {
            results.extend(img.iter().filter(|r| &r.method == name).cloned());
        }
    }
    let summary = summarize(&results, &method_names, cfg.ci_level)?;
    Ok(CorpusReport {
        methods: method_names,
        images: results,
        summary,
    })
}

/// Load manifest entries that have truth masks; entries without one are
/// skipped with a warning.
pub fn load_labelled(entries: &[ManifestEntry]) -> Result<Vec<(String, PixelImage, Mask)>> {
    let mut out = Vec::new();
    for e in entries {
        let Some(truth_path) = &e.truth else {
            log::warn!("{}: no truth mask, skipped", e.image.display());
            continue;
        };
        if !truth_path.is_file() {
            log::warn!("{}: truth mask {} missing, skipped", e.image.display(), truth_path.display());
            continue;
        }
        let img = load_image(&e.image)?;
        let truth = Mask::load(truth_path)?;
        if truth.dims() != img.dims() {
            return Err(Error::dims(img.dims(), truth.dims()));
        }
        out.push((e.name(), img, truth));
    }
    Ok(out)
}

pub fn evaluate_corpus(methods: &[Method], entries: &[ManifestEntry], cfg: &EvalConfig) -> Result<CorpusReport> {
    let images = load_labelled(entries)?;
    evaluate_images(methods, &images, cfg)
}

pub fn write_report(dir: &Path, report: &CorpusReport) -> Result<()> {
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.csv", &report.report_csv())?;
    write("summary.csv", &report.summary_csv())?;
    write("table.txt", &report.table())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_of(v: &[u8]) -> Mask {
        let values = v
            .iter()
            .map(|b| match b {
                0 => MaskValue::Sky,
                1 => MaskValue::Cloud,
                _ => MaskValue::Ignore,
            })
            .collect();
        Mask::new(v.len() as u32, 1, values).unwrap()
    }

    #[test]
    fn identity_and_complement() {
        let truth: Vec<u8> = (0..150).map(|i| u8::from(i < 100)).collect();
        let t = mask_of(&truth);
        assert_eq!(
            confusion(&t, &t).unwrap(),
            ConfusionMatrix { tp: 100, tn: 50, fp: 0, fn_: 0 }
        );
        assert_eq!(
            confusion(&t.complement(), &t).unwrap(),
            ConfusionMatrix { tp: 0, tn: 0, fp: 50, fn_: 100 }
        );
    }

    #[test]
    fn ignore_in_either_mask_is_excluded() {
        let pred = mask_of(&[1, 2, 0, 1]);
        let truth = mask_of(&[1, 1, 2, 0]);
        let cm = confusion(&pred, &truth).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, tn: 0, fp: 1, fn_: 0 });
        assert!(confusion(&mask_of(&[2, 2]), &mask_of(&[0, 1])).is_err());
        assert!(confusion(&mask_of(&[0]), &mask_of(&[0, 1])).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&ConfusionMatrix { tp: 50, tn: 30, fp: 10, fn_: 10 });
        assert_eq!(m.accuracy, Some(0.8));
        assert_eq!(m.precision, Some(50.0 / 60.0));
        assert_eq!(m.recall, Some(50.0 / 60.0));
        let m = metrics(&ConfusionMatrix { tp: 5, tn: 7, fp: 0, fn_: 0 });
        assert_eq!((m.accuracy, m.precision, m.recall), (Some(1.0), Some(1.0), Some(1.0)));
        let m = metrics(&ConfusionMatrix { tp: 0, tn: 9, fp: 0, fn_: 1 });
        assert_eq!(m.precision, None);
        assert_eq!(m.accuracy, Some(0.9));
        assert_eq!(m.recall, Some(0.0));
    }

    #[test]
    fn quantiles_against_statrs_and_closed_form() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for df in [1.0, 2.0, 3.0, 7.0, 21.0, 25.0, 120.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for p in [0.6, 0.9, 0.975, 0.99, 0.9995] {
                let q = student_t_quantile(p, df).unwrap();
                let oracle = dist.inverse_cdf(p);
                assert!((q - oracle).abs() < 1e-6 * oracle.abs().max(1.0), "df {df} p {p}: {q} vs {oracle}");
            }
        }
        // Cauchy: quantile = tan(pi (p - 1/2)).
        let q = student_t_quantile(0.9995, 1.0).unwrap();
        let exact = (std::f64::consts::PI * 0.4995).tan();
        assert!((q - exact).abs() < 1e-8 * exact);
        assert!((student_t_quantile(0.99, 2.0).unwrap() - 6.964_556_7).abs() < 1e-6);
    }

    #[test]
    fn worked_intervals() {
        let iv = t_interval(&[0.9, 0.92, 0.94], 0.98).unwrap();
        assert!((iv.mean - 0.92).abs() < 1e-15);
        let expect = 6.964_556_734_283_274 * 0.02 / 3f64.sqrt();
        assert!((iv.half_width - expect).abs() < 1e-6);
        assert!((iv.half_width - 0.08042).abs() < 1e-5);

        let iv = t_interval(&[0.7, 0.7, 0.7, 0.7], 0.999).unwrap();
        assert_eq!(iv.half_width, 0.0);

        let iv = t_interval(&[0.8, 0.9], 0.999).unwrap();
        let t = (std::f64::consts::PI * 0.4995).tan();
        assert!((iv.half_width - t * 0.05).abs() < 1e-6);
        assert!((iv.half_width - 31.83).abs() < 0.01);
        assert!(t_interval(&[0.5], 0.9).is_err());
    }

    #[test]
    fn table_layout() {
        let rows = vec![
            SummaryRow {
                method: "crf".into(),
                metric: Metric::Accuracy,
                mean: 0.93456,
                half_width: Some(0.02691),
                level: 0.98,
                n: 3,
                excluded: 0,
            },
        ];
        let t = render_table(&rows);
        assert!(t.contains("0.9346 ± 0.0269"));
        assert!(t.lines().any(|l| l.starts_with("| Accuracy ")));
        let csv = summary_csv(&rows);
        assert_eq!(parse_summary_csv(&csv).unwrap()[0].mean, 0.93456);
    }

    proptest! {
        #[test]
        fn counts_cover_jointly_labelled_pixels(
            a in proptest::collection::vec(0u8..3, 1..200),
            seed in any::<u64>(),
        ) {
            let b: Vec<u8> = a.iter().enumerate().map(|(i, _)| ((seed >> (i % 64)) % 3) as u8).collect();
            let (pa, pb) = (mask_of(&a), mask_of(&b));
            let both = a.iter().zip(&b).filter(|(x, y)| **x < 2 && **y < 2).count() as u64;
            match confusion(&pa, &pb) {
                Ok(cm) => prop_assert_eq!(cm.total(), both),
                Err(_) => prop_assert_eq!(both, 0),
            }
        }

        #[test]
        fn metrics_scale_free(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 1u64..1000, k in 1u64..50) {
            let a = metrics(&ConfusionMatrix { tp, tn, fp, fn_ });
            let b = metrics(&ConfusionMatrix { tp: tp * k, tn: tn * k, fp: fp * k, fn_: fn_ * k });
            for m in Metric::ALL {
                match (m.of(&a), m.of(&b)) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
        }

        #[test]
        fn half_width_grows_with_level(values in proptest::collection::vec(0.0f64..1.0, 2..30)) {
            let lo = t_interval(&values, 0.9).unwrap().half_width;
            let mid = t_interval(&values, 0.98).unwrap().half_width;
            let hi = t_interval(&values, 0.999).unwrap().half_width;
            prop_assert!(lo <= mid && mid <= hi);
        }
    }
}
