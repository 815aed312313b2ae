//! Mean-shift region formation and the site graph the CRF is defined over.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{FeatureImage, PixelImage};

/// Mean-shift settings. Bandwidths are radii of a flat kernel in the joint
/// `(x/h_s, y/h_s, R/h_r, G/h_r, B/h_r)` space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanShiftParams {
    pub spatial_bandwidth: f64,
    pub range_bandwidth: f64,
    pub min_region_size: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        Self {
            spatial_bandwidth: 8.0,
            range_bandwidth: 8.0,
            min_region_size: 100,
            max_iterations: 100,
            convergence_tol: 0.1,
        }
    }
}

impl MeanShiftParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.spatial_bandwidth > 0.0
            && self.range_bandwidth > 0.0
            && self.min_region_size >= 1
            && self.convergence_tol > 0.0
            && self.spatial_bandwidth.is_finite()
            && self.range_bandwidth.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Colour distance between modes, in units of the range bandwidth, within
/// which a pixel joins the region grown from a seed pixel.
pub const MODE_MERGE_DISTANCE: f64 = 1.0;

/// Per-pixel region assignment; ignored pixels have no region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    pub width: u32,
    pub height: u32,
    pub region_id: Vec<Option<u32>>,
    n_regions: usize,
}

impl RegionMap {
    /// Wrap raw ids, checking that they are contiguous `0..n`.
    pub fn from_ids(width: u32, height: u32, region_id: Vec<Option<u32>>) -> Result<Self> {
        if region_id.len() != width as usize * height as usize {
            return Err(Error::Contract(format!(
                "{} region ids for a {width}x{height} map",
                region_id.len()
            )));
        }
        let max = region_id.iter().flatten().copied().max();
        let n_regions = max.map_or(0, |m| m as usize + 1);
        let mut seen = vec![false; n_regions];
        for id in region_id.iter().flatten() {
            seen[*id as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Contract("region ids are not contiguous".into()));
        }
        Ok(Self {
            width,
            height,
            region_id,
            n_regions,
        })
    }

    pub fn region_count(&self) -> usize {
        self.n_regions
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_regions];
        for id in self.region_id.iter().flatten() {
            sizes[*id as usize] += 1;
        }
        sizes
    }

    /// Pixel indices of every region, in raster order.
    pub fn pixel_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.n_regions];
        for (idx, id) in self.region_id.iter().enumerate() {
            if let Some(id) = id {
                lists[*id as usize].push(idx);
            }
        }
        lists
    }
}

type Mode = [f64; 5];

fn joint_dist2(a: &Mode, b: &Mode) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Converge one pixel to its mode with a flat kernel of unit radius in
/// the bandwidth-normalized joint space.
fn seek_mode(
    img: &PixelImage,
    scaled_rgb: &[[f64; 3]],
    start: usize,
    params: &MeanShiftParams,
) -> Mode {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let hs = params.spatial_bandwidth;
    let inv_hs = 1.0 / hs;
    let x0 = (start as i64 % w) as f64;
    let y0 = (start as i64 / w) as f64;
    let c = scaled_rgb[start];
    let mut cur: Mode = [x0 * inv_hs, y0 * inv_hs, c[0], c[1], c[2]];
    let tol2 = params.convergence_tol * params.convergence_tol;

    for _ in 0..params.max_iterations {
        let cx = cur[0] * hs;
        let cy = cur[1] * hs;
        let x_lo = ((cx - hs).ceil() as i64).max(0);
        let x_hi = ((cx + hs).floor() as i64).min(w - 1);
        let y_lo = ((cy - hs).ceil() as i64).max(0);
        let y_hi = ((cy + hs).floor() as i64).min(h - 1);

        let mut acc = [0.0f64; 5];
        let mut n = 0u32;
        for y in y_lo..=y_hi {
            let dy = y as f64 * inv_hs - cur[1];
            let dy2 = dy * dy;
            let row = (y * w) as usize;
            for x in x_lo..=x_hi {
                let dx = x as f64 * inv_hs - cur[0];
                let ds2 = dx * dx + dy2;
                if ds2 > 1.0 {
                    continue;
                }
                let idx = row + x as usize;
                if img.is_ignored(idx) {
                    continue;
                }
                let q = &scaled_rgb[idx];
                let dr = q[0] - cur[2];
                let dg = q[1] - cur[3];
                let db = q[2] - cur[4];
                if ds2 + dr * dr + dg * dg + db * db <= 1.0 {
                    acc[0] += x as f64 * inv_hs;
                    acc[1] += y as f64 * inv_hs;
                    acc[2] += q[0];
                    acc[3] += q[1];
                    acc[4] += q[2];
                    n += 1;
                }
            }
        }
        if n == 0 {
            break;
        }
        let inv_n = 1.0 / n as f64;
        let next: Mode = acc.map(|v| v * inv_n);
        let shift2 = joint_dist2(&next, &cur);
        cur = next;
        if shift2 < tol2 {
            break;
        }
    }
    cur
}

/// Segment an image into homogeneous, 4-connected regions.
///
/// Every non-ignored pixel climbs to its mode. Regions are then grown in
/// raster order: an unassigned pixel seeds a region, which takes in every
/// 4-connected unassigned pixel whose mode colour lies within
/// [`MODE_MERGE_DISTANCE`] of the seed's mode colour. Anchoring on the seed
/// keeps a smooth gradient from collapsing into one region. Regions smaller than `min_region_size` are then absorbed into the
/// 4-adjacent region with the closest mean colour.
pub fn mean_shift_segment(img: &PixelImage, params: &MeanShiftParams) -> Result<RegionMap> {
    params.validate()?;
    if img.active_count() == 0 {
        return Err(Error::EmptyInput("every pixel is ignored".into()));
    }
    let inv_hr = 1.0 / params.range_bandwidth;
    let scaled_rgb: Vec<[f64; 3]> = img
        .pixels()
        .iter()
        .map(|p| p.map(|c| c as f64 * inv_hr))
        .collect();

    let modes: Vec<Option<Mode>> = (0..img.len())
        .into_par_iter()
        .map(|idx| (!img.is_ignored(idx)).then(|| seek_mode(img, &scaled_rgb, idx, params)))
        .collect();

    let (w, h) = (img.width() as usize, img.height() as usize);
    let merge2 = MODE_MERGE_DISTANCE * MODE_MERGE_DISTANCE;
    let range_dist2 = |a: &Mode, b: &Mode| -> f64 { (2..5).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum() };
    let mut labels: Vec<Option<u32>> = vec![None; img.len()];
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..img.len() {
        let Some(seed_mode) = &modes[seed] else { continue };
        if labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            let mut visit = |q: usize| {
                if labels[q].is_none() {
                    if let Some(m) = &modes[q] {
                        if range_dist2(m, seed_mode) <= merge2 {
                            labels[q] = Some(next);
                            queue.push_back(q);
                        }
                    }
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        next += 1;
    }

    let merged = merge_small_regions(img, labels, next as usize, params.min_region_size);
    RegionMap::from_ids(img.width(), img.height(), merged)
}

fn merge_small_regions(
    img: &PixelImage,
    labels: Vec<Option<u32>>,
    n: usize,
    min_size: usize,
) -> Vec<Option<u32>> {
    let w = img.width() as usize;
    let mut count = vec![0usize; n];
    let mut sum = vec![[0.0f64; 3]; n];
    let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for (idx, label) in labels.iter().enumerate() {
        let Some(a) = *label else { continue };
        count[a as usize] += 1;
        let px = img.pixels()[idx];
        for c in 0..3 {
            sum[a as usize][c] += px[c] as f64;
        }
        let x = idx % w;
        let mut link = |other: Option<u32>| {
            if let Some(b) = other {
                if b != a {
                    adj[a as usize].insert(b);
                    adj[b as usize].insert(a);
                }
            }
        };
        if x + 1 < w {
            link(labels[idx + 1]);
        }
        if idx + w < labels.len() {
            link(labels[idx + w]);
        }
    }

    let mean = |count: &[usize], sum: &[[f64; 3]], r: usize| sum[r].map(|s| s / count[r] as f64);
    let mut target: Vec<u32> = (0..n as u32).collect();
    let mut alive = vec![true; n];
    loop {
        let mut changed = false;
        for r in 0..n {
            if !alive[r] || count[r] >= min_size || adj[r].is_empty() {
                continue;
            }
            let mr = mean(&count, &sum, r);
            let best = adj[r]
                .iter()
                .map(|&j| {
                    let mj = mean(&count, &sum, j as usize);
                    let d: f64 = (0..3).map(|c| (mr[c] - mj[c]).powi(2)).sum();
                    (d, j)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, j)| j as usize)
                .expect("non-empty adjacency");

            alive[r] = false;
            target[r] = best as u32;
            count[best] += count[r];
            for c in 0..3 {
                sum[best][c] += sum[r][c];
            }
            let moved = std::mem::take(&mut adj[r]);
            for j in moved {
                let j = j as usize;
                adj[j].remove(&(r as u32));
                if j != best {
                    adj[j].insert(best as u32);
                    adj[best].insert(j as u32);
                }
            }
            adj[best].remove(&(r as u32));
            changed = true;
        }
        if !changed {
            break;
        }
    }

    let resolve = |mut r: u32| {
        while !alive[r as usize] {
            r = target[r as usize];
        }
        r
    };
    let mut remap = vec![u32::MAX; n];
    let mut next = 0u32;
    labels
        .iter()
        .map(|l| {
            l.map(|r| {
                let root = resolve(r) as usize;
                if remap[root] == u32::MAX {
                    remap[root] = next;
                    next += 1;
                }
                remap[root]
            })
        })
        .collect()
}

/// One CRF site: a region with its mean features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub pixel_count: usize,
    /// Mean pixel coordinate `(x, y)`.
    pub centroid: (f64, f64),
    /// Mean NBR over the region.
    pub nbr: f64,
    /// Mean NSV over the region.
    pub nsv: f64,
}

/// Sites plus a symmetric, irreflexive neighbour relation.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteGraph {
    sites: Vec<Site>,
    neighbors: Vec<Vec<usize>>,
    neighbor_radius: f64,
}

impl SiteGraph {
    /// Build from explicit neighbour lists, which must already be symmetric.
    pub fn new(sites: Vec<Site>, mut neighbors: Vec<Vec<usize>>, neighbor_radius: f64) -> Result<Self> {
        if neighbors.len() != sites.len() {
            return Err(Error::Contract("one neighbour list per site required".into()));
        }
        let n = sites.len();
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Contract(format!("bad neighbour list for site {i}")));
            }
        }
        for i in 0..n {
            for &j in &neighbors[i] {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::Contract(format!("neighbour {i}-{j} is not symmetric")));
                }
            }
        }
        Ok(Self {
            sites,
            neighbors,
            neighbor_radius,
        })
    }

    /// Build from an undirected edge list.
    pub fn from_edges(sites: Vec<Site>, edges: &[(usize, usize)], neighbor_radius: f64) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); sites.len()];
        for &(a, b) in edges {
            if a >= sites.len() || b >= sites.len() {
                return Err(Error::Contract(format!("edge {a}-{b} out of range")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        Self::new(sites, neighbors, neighbor_radius)
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn neighbor_radius(&self) -> f64 {
        self.neighbor_radius
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Reorder sites so that new site `k` is old site `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[old] = new;
        }
        if order.len() != n {
            return Err(Error::Contract("not a permutation".into()));
        }
        let sites = order.iter().map(|&old| self.sites[old]).collect();
        let neighbors = order
            .iter()
            .map(|&old| self.neighbors[old].iter().map(|&j| inverse[j]).collect())
            .collect();
        Self::new(sites, neighbors, self.neighbor_radius)
    }

    /// CSV dump: `id,pixel_count,cx,cy,K,V,neighbors`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pixel_count,cx,cy,K,V,neighbors\n");
        for (i, s) in self.sites.iter().enumerate() {
            let nbrs: Vec<String> = self.neighbors[i].iter().map(|j| j.to_string()).collect();
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                s.pixel_count,
                s.centroid.0,
                s.centroid.1,
                s.nbr,
                s.nsv,
                nbrs.join(";")
            );
        }
        out
    }
}

/// Distance squared from a point to the nearest point of an axis-aligned box.
fn box_dist2(p: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> f64 {
    let dx = (lo.0 - p.0).max(0.0).max(p.0 - hi.0);
    let dy = (lo.1 - p.1).max(0.0).max(p.1 - hi.1);
    dx * dx + dy * dy
}

/// Per-site statistics and the disc neighbourhood rule.
///
/// Site `j` is a neighbour of `i` when any pixel of `j` lies within `radius`
/// of the centroid of `i`; the relation is then symmetrized by union.
pub fn build_site_graph(rm: &RegionMap, feats: &FeatureImage, radius: f64) -> Result<SiteGraph> {
    if rm.dims() != feats.dims() {
        return Err(Error::dims(rm.dims(), feats.dims()));
    }
    let w = rm.width as usize;
    let lists = rm.pixel_lists();
    let mut sites = Vec::with_capacity(lists.len());
    let mut boxes = Vec::with_capacity(lists.len());
    for (id, pixels) in lists.iter().enumerate() {
        if pixels.is_empty() {
            return Err(Error::Contract(format!("region {id} has no pixels")));
        }
        let (mut sx, mut sy, mut sk, mut sv) = (0.0, 0.0, 0.0, 0.0);
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &idx in pixels {
            if !feats.is_valid(idx) {
                return Err(Error::Contract(format!(
                    "region {id} contains an ignored pixel"
                )));
            }
            let (x, y) = ((idx % w) as f64, (idx / w) as f64);
            sx += x;
            sy += y;
            sk += feats.nbr[idx];
            sv += feats.nsv[idx];
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        let n = pixels.len() as f64;
        sites.push(Site {
            pixel_count: pixels.len(),
            centroid: (sx / n, sy / n),
            nbr: sk / n,
            nsv: sv / n,
        });
        boxes.push((lo, hi));
    }

    let r2 = radius * radius;
    let n = sites.len();
    let mut neighbors = vec![BTreeSet::new(); n];
    for i in 0..n {
        let c = sites[i].centroid;
        for j in 0..n {
            if i == j || box_dist2(c, boxes[j].0, boxes[j].1) > r2 {
                continue;
            }
            let reaches = lists[j].iter().any(|&idx| {
                let dx = (idx % w) as f64 - c.0;
                let dy = (idx / w) as f64 - c.1;
                dx * dx + dy * dy <= r2
            });
            if reaches {
                neighbors[i].insert(j);
                neighbors[j].insert(i);
            }
        }
    }
    SiteGraph::new(
        sites,
        neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
        radius,
    )
}
