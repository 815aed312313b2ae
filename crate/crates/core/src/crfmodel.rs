//! The CRF over sites: association and interaction potentials, the
//! unnormalized log-posterior of a labelling, and exact normalization by
//! enumeration on small graphs.
//!
//! The score of a labelling `y` is
//!
//! ```text
//! score(y) = sum_i A(y_i, K_i) + beta * sum_i phi_i(y)
//! ```
//!
//! with `A(1, K) = psi(K)`, `A(0, K) = 1 - psi(K)`, `psi` the logistic
//! classifier on mean NBR, and `phi_i` the interaction of site `i` against the
//! mean NSV of its sky and cloud neighbours. `phi_i` is evaluated once per
//! site rather than once per neighbour pair.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Label;
use crate::regions::SiteGraph;

/// Largest graph that [`partition`], [`posterior`] and exhaustive MAP will
/// enumerate.
pub const MAX_ENUMERATION_SITES: usize = 20;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    alpha0: f64,
    alpha1: f64,
    beta: f64,
    format_version: u32,
}

impl CrfParams {
    pub fn new(alpha0: f64, alpha1: f64, beta: f64) -> Result<Self> {
        let p = Self {
            alpha0,
            alpha1,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0.is_finite() && self.alpha1.is_finite() && self.beta.is_finite()) {
            return Err(Error::InvalidParams("parameters must be finite".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidParams(format!("beta = {} < 0", self.beta)));
        }
        Ok(())
    }

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    /// The feature value where the association crosses 0.5.
    pub fn decision_boundary(&self) -> f64 {
        -self.alpha0 / self.alpha1
    }

    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            alpha0: self.alpha0,
            alpha1: self.alpha1,
            beta: self.beta,
            format_version: PARAMS_FORMAT_VERSION,
        };
        serde_json::to_string(&file).expect("plain struct serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text)?;
        if file.format_version != PARAMS_FORMAT_VERSION {
            return Err(Error::parse(
                "params file",
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        Self::new(file.alpha0, file.alpha1, file.beta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One label per site.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelConfig(pub Vec<Label>);

impl LabelConfig {
    pub fn uniform(n: usize, label: Label) -> Self {
        Self(vec![label; n])
    }

    /// Configuration number `index` in lexicographic order, site 0 most
    /// significant.
    pub fn from_index(index: u64, n: usize) -> Self {
        Self(
            (0..n)
                .map(|i| Label::from_bit((index >> (n - 1 - i)) & 1 == 1))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Label {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, label: Label) {
        self.0[i] = label;
    }

    pub fn check_for(&self, g: &SiteGraph) -> Result<()> {
        if self.len() == g.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{} labels for {} sites",
                self.len(),
                g.len()
            )))
        }
    }
}

/// Logistic cloud probability of a site with mean NBR `k`.
#[inline]
pub fn association(k: f64, params: &CrfParams) -> f64 {
    let z = params.alpha0 + params.alpha1 * k;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Association term for a given label.
#[inline]
pub fn association_term(label: Label, k: f64, params: &CrfParams) -> f64 {
    let psi = association(k, params);
    match label {
        Label::Cloud => psi,
        Label::Sky => 1.0 - psi,
    }
}

/// Image-wide mean NSV of sky and cloud sites (pixel weighted), used when
/// a site has no neighbour of the label it needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMeans {
    pub sky: Option<f64>,
    pub cloud: Option<f64>,
}

impl LabelMeans {
    pub fn of(y: &LabelConfig, g: &SiteGraph) -> Self {
        let mut sum = [0.0f64; 2];
        let mut weight = [0usize; 2];
        for (site, &label) in g.sites().iter().zip(y.labels()) {
            sum[label as usize] += site.nsv * site.pixel_count as f64;
            weight[label as usize] += site.pixel_count;
        }
        let mean = |k: usize| (weight[k] > 0).then(|| sum[k] / weight[k] as f64);
        Self {
            sky: mean(0),
            cloud: mean(1),
        }
    }

    fn get(&self, label: Label) -> Option<f64> {
        match label {
            Label::Sky => self.sky,
            Label::Cloud => self.cloud,
        }
    }
}

/// Interaction of site `i` when it carries `label`, with neighbour labels
/// read from `y` and the fallback reference taken from `fallback`.
pub fn interaction_as(
    i: usize,
    label: Label,
    y: &LabelConfig,
    g: &SiteGraph,
    fallback: &LabelMeans,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &j in g.neighbors(i) {
        if y.get(j) == label {
            sum += g.site(j).nsv;
            n += 1;
        }
    }
    let reference = if n > 0 {
        sum / n as f64
    } else {
        match fallback.get(label) {
            Some(v) => v,
            None => return 0.0,
        }
    };
    let v = g.site(i).nsv;
    match label {
        Label::Sky => reference - v,
        Label::Cloud => v - reference,
    }
}

/// Interaction of site `i` under `y`, falling back on the image-wide means
/// of `y` itself.
pub fn interaction(i: usize, y: &LabelConfig, g: &SiteGraph) -> f64 {
    interaction_as(i, y.get(i), y, g, &LabelMeans::of(y, g))
}

/// Log of the unnormalized posterior of `y`.
pub fn config_score(y: &LabelConfig, g: &SiteGraph, params: &CrfParams) -> f64 {
    let fallback = LabelMeans::of(y, g);
    score_with_fallback(y, g, params, &fallback)
}

pub(crate) fn score_with_fallback(
    y: &LabelConfig,
    g: &SiteGraph,
    params: &CrfParams,
    fallback: &LabelMeans,
) -> f64 {
    let mut assoc = 0.0;
    let mut inter = 0.0;
    for i in 0..g.len() {
        let label = y.get(i);
        assoc += association_term(label, g.site(i).nbr, params);
        if params.beta != 0.0 {
            inter += interaction_as(i, label, y, g, fallback);
        }
    }
    assoc + params.beta * inter
}

fn check_capacity(g: &SiteGraph) -> Result<()> {
    if g.len() > MAX_ENUMERATION_SITES {
        Err(Error::Capacity {
            sites: g.len(),
            limit: MAX_ENUMERATION_SITES,
        })
    } else {
        Ok(())
    }
}

/// Scores of all `2^n` labellings in lexicographic order.
pub fn enumerate_scores(g: &SiteGraph, params: &CrfParams) -> Result<Vec<f64>> {
    check_capacity(g)?;
    let n = g.len();
    Ok((0..1u64 << n)
        .map(|m| config_score(&LabelConfig::from_index(m, n), g, params))
        .collect())
}

/// Partition function by exhaustive enumeration, summed in lexicographic
/// order.
pub fn partition(g: &SiteGraph, params: &CrfParams) -> Result<f64> {
    Ok(enumerate_scores(g, params)?.into_iter().map(f64::exp).sum())
}

pub fn posterior(y: &LabelConfig, g: &SiteGraph, params: &CrfParams) -> Result<f64> {
    y.check_for(g)?;
    let z = partition(g, params)?;
    Ok(config_score(y, g, params).exp() / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::Site;

    const PAPER: CrfParams = CrfParams {
        alpha0: 6.072,
        alpha1: -37.001,
        beta: 0.95,
    };

    fn site(k: f64, v: f64, pixels: usize) -> Site {
        Site {
            pixel_count: pixels,
            centroid: (0.0, 0.0),
            nbr: k,
            nsv: v,
        }
    }

    fn sigmoid_oracle(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn association_at_published_fit() {
        let mid = -PAPER.alpha0 / PAPER.alpha1;
        assert!((mid - 0.16410).abs() < 1e-5);
        assert!((association(mid, &PAPER) - 0.5).abs() < 1e-12);
        assert!((association(0.0, &PAPER) - sigmoid_oracle(6.072)).abs() < 1e-15);
        assert!((association(0.0, &PAPER) - 0.99770).abs() < 5e-6);
        let z: f64 = 6.072 - 37.001 * 0.3;
        assert!((z - -5.0283).abs() < 1e-12);
        assert!((association(0.3, &PAPER) - sigmoid_oracle(-5.0283)).abs() < 1e-15);
        assert!((association(0.3, &PAPER) - 0.00650).abs() < 1e-5);
    }

    #[test]
    fn association_does_not_overflow() {
        let p = CrfParams::new(0.0, 1.0, 0.0).unwrap();
        assert_eq!(association(1e6, &p), 1.0);
        assert_eq!(association(-1e6, &p), 0.0);
    }

    #[test]
    fn interaction_reference_points() {
        // Site 0 sky at 0.3 with one sky neighbour at 0.4.
        let g = SiteGraph::from_edges(vec![site(0.0, 0.3, 1), site(0.0, 0.4, 1)], &[(0, 1)], 1.0)
            .unwrap();
        let y = LabelConfig(vec![Label::Sky, Label::Sky]);
        assert!((interaction(0, &y, &g) - 0.1).abs() < 1e-12);

        // Cloud at 0.9 with cloud neighbour at 0.7.
        let g = SiteGraph::from_edges(vec![site(0.0, 0.9, 1), site(0.0, 0.7, 1)], &[(0, 1)], 1.0)
            .unwrap();
        let y = LabelConfig(vec![Label::Cloud, Label::Cloud]);
        assert!((interaction(0, &y, &g) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn between_references_is_negative_either_way() {
        // V_s = 0.2 (site 1, sky), V_c = 0.8 (site 2, cloud), V_0 = 0.5.
        let g = SiteGraph::from_edges(
            vec![site(0.0, 0.5, 1), site(0.0, 0.2, 1), site(0.0, 0.8, 1)],
            &[(0, 1), (0, 2)],
            1.0,
        )
        .unwrap();
        let mut y = LabelConfig(vec![Label::Sky, Label::Sky, Label::Cloud]);
        let fb = LabelMeans::of(&y, &g);
        assert!(interaction_as(0, Label::Sky, &y, &g, &fb) < 0.0);
        y.set(0, Label::Cloud);
        assert!(interaction_as(0, Label::Cloud, &y, &g, &fb) < 0.0);

        let g = SiteGraph::from_edges(vec![site(0.0, 0.7, 1), site(0.0, 0.7, 1)], &[(0, 1)], 1.0)
            .unwrap();
        let y = LabelConfig(vec![Label::Cloud, Label::Cloud]);
        assert_eq!(interaction(0, &y, &g), 0.0);
    }

    #[test]
    fn fallback_uses_image_wide_pixel_weighted_means() {
        // Site 0 (cloud) has only a sky neighbour; the cloud reference comes
        // from every cloud site: (0.9*1 + 0.6*3) / 4 = 0.675.
        let g = SiteGraph::from_edges(
            vec![site(0.0, 0.9, 1), site(0.0, 0.1, 1), site(0.0, 0.6, 3)],
            &[(0, 1)],
            1.0,
        )
        .unwrap();
        let y = LabelConfig(vec![Label::Cloud, Label::Sky, Label::Cloud]);
        assert!((interaction(0, &y, &g) - (0.9 - 0.675)).abs() < 1e-12);
        // No sky site anywhere: the sky branch contributes nothing.
        let y = LabelConfig(vec![Label::Sky, Label::Cloud, Label::Cloud]);
        let fb = LabelMeans { sky: None, cloud: Some(0.5) };
        assert_eq!(interaction_as(2, Label::Sky, &y, &g, &fb), 0.0);
    }

    #[test]
    fn single_site_score_is_association_only() {
        let g = SiteGraph::new(vec![site(0.1, 0.8, 5)], vec![vec![]], 200.0).unwrap();
        for label in [Label::Sky, Label::Cloud] {
            let y = LabelConfig(vec![label]);
            assert_eq!(config_score(&y, &g, &PAPER), association_term(label, 0.1, &PAPER));
        }
    }

    #[test]
    fn three_site_score_matches_hand_sum() {
        // Path 0 - 1 - 2; labels cloud, sky, cloud.
        let sites = vec![site(0.05, 0.85, 10), site(0.30, 0.20, 20), site(0.15, 0.60, 30)];
        let g = SiteGraph::from_edges(sites, &[(0, 1), (1, 2)], 200.0).unwrap();
        let y = LabelConfig(vec![Label::Cloud, Label::Sky, Label::Cloud]);
        let p = CrfParams::new(6.0, -37.0, 0.7).unwrap();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let a0 = s(6.0 - 37.0 * 0.05);
        let a1 = 1.0 - s(6.0 - 37.0 * 0.30);
        let a2 = s(6.0 - 37.0 * 0.15);
        // Site 0: no cloud neighbour -> cloud mean (0.85*10 + 0.6*30) / 40.
        let vc = (0.85 * 10.0 + 0.60 * 30.0) / 40.0;
        let phi0 = 0.85 - vc;
        // Site 1: sky, no sky neighbour -> sky mean is its own 0.20.
        let phi1 = 0.20 - 0.20;
        // Site 2: cloud, no cloud neighbour -> same cloud mean.
        let phi2 = 0.60 - vc;
        let expected = a0 + a1 + a2 + 0.7 * (phi0 + phi1 + phi2);
        assert!((config_score(&y, &g, &p) - expected).abs() < 1e-12);
    }

    #[test]
    fn two_site_partition_is_four_term_sum() {
        let sites = vec![site(0.1, 0.7, 1), site(0.2, 0.3, 1)];
        let g = SiteGraph::from_edges(sites, &[(0, 1)], 1.0).unwrap();
        let p = CrfParams::new(6.072, -37.001, 0.95).unwrap();
        let s = |k: f64| association(k, &p);
        let (c0, c1) = (s(0.1), s(0.2));
        // Hand enumeration (sky=0, cloud=1). With both sites equal-labelled
        // each sees the other as reference; otherwise each falls back on its
        // own image-wide mean, i.e. itself.
        let ss = (1.0 - c0) + (1.0 - c1) + 0.95 * ((0.3 - 0.7) + (0.7 - 0.3));
        let sc = (1.0 - c0) + c1;
        let cs = c0 + (1.0 - c1);
        let cc = c0 + c1 + 0.95 * ((0.7 - 0.3) + (0.3 - 0.7));
        let z = ss.exp() + sc.exp() + cs.exp() + cc.exp();
        assert!((partition(&g, &p).unwrap() - z).abs() < 1e-12);
    }

    #[test]
    fn one_site_partition() {
        let g = SiteGraph::new(vec![site(0.2, 0.5, 1)], vec![vec![]], 1.0).unwrap();
        let z = partition(&g, &PAPER).unwrap();
        let psi = association(0.2, &PAPER);
        assert!((z - ((1.0 - psi).exp() + psi.exp())).abs() < 1e-15);
    }

    #[test]
    fn beta_zero_posterior_factorizes() {
        let sites = vec![site(0.1, 0.7, 1), site(0.2, 0.3, 4), site(0.17, 0.5, 2)];
        let g = SiteGraph::from_edges(sites, &[(0, 1), (1, 2)], 1.0).unwrap();
        let p = PAPER.with_beta(0.0);
        for m in 0..8 {
            let y = LabelConfig::from_index(m, 3);
            let expect: f64 = (0..3)
                .map(|i| {
                    let k = g.site(i).nbr;
                    let a = association_term(y.get(i), k, &p).exp();
                    let b = association_term(y.get(i).flipped(), k, &p).exp();
                    a / (a + b)
                })
                .product();
            assert!((posterior(&y, &g, &p).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn capacity_guard() {
        let sites = vec![site(0.0, 0.0, 1); 21];
        let g = SiteGraph::new(sites, vec![vec![]; 21], 1.0).unwrap();
        assert!(matches!(partition(&g, &PAPER), Err(Error::Capacity { sites: 21, limit: 20 })));
    }

    #[test]
    fn params_json_round_trip_and_version_check() {
        let text = PAPER.to_json();
        assert_eq!(
            text,
            r#"{"alpha0":6.072,"alpha1":-37.001,"beta":0.95,"format_version":1}"#
        );
        assert_eq!(CrfParams::from_json(&text).unwrap(), PAPER);
        let bad = r#"{"alpha0":1,"alpha1":1,"beta":0,"format_version":2}"#;
        assert!(CrfParams::from_json(bad).is_err());
        let negative = r#"{"alpha0":1,"alpha1":1,"beta":-1,"format_version":1}"#;
        assert!(matches!(CrfParams::from_json(negative), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn lexicographic_index_order() {
        assert_eq!(
            LabelConfig::from_index(1, 3).0,
            vec![Label::Sky, Label::Sky, Label::Cloud]
        );
        assert!(LabelConfig::from_index(3, 3) < LabelConfig::from_index(4, 3));
    }
}
