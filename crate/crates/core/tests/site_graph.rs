use cloudcrf::imaging::{compute_features, PixelImage};
use cloudcrf::regions::{build_site_graph, RegionMap};

/// Region map with vertical stripes `[x0, x0 + width)` spanning `height` rows;
/// everything else is ignored.
fn stripes(width: u32, height: u32, stripes: &[(u32, u32)]) -> (RegionMap, PixelImage) {
    let ids = (0..width * height)
        .map(|i| {
            let x = i % width;
            stripes
                .iter()
                .position(|&(x0, w)| x >= x0 && x < x0 + w)
                .map(|p| p as u32)
        })
        .collect::<Vec<_>>();
    let ignore = ids.iter().map(Option::is_none).collect();
    let img = PixelImage::filled(width, height, [90, 120, 200])
        .unwrap()
        .with_ignore(ignore)
        .unwrap();
    (RegionMap::from_ids(width, height, ids).unwrap(), img)
}

/// Definition applied directly: `j` is a neighbour of `i` when some pixel of
/// `j` is within `radius` of the centroid of `i`, or vice versa.
fn oracle(rm: &RegionMap, radius: f64) -> Vec<Vec<bool>> {
    let w = rm.width as usize;
    let n = rm.region_count();
    let mut sums = vec![(0.0, 0.0, 0.0); n];
    for (idx, id) in rm.region_id.iter().enumerate() {
        if let Some(id) = id {
            let s = &mut sums[*id as usize];
            s.0 += (idx % w) as f64;
            s.1 += (idx / w) as f64;
            s.2 += 1.0;
        }
    }
    let centroids: Vec<(f64, f64)> = sums.iter().map(|s| (s.0 / s.2, s.1 / s.2)).collect();
    let reaches = |i: usize, j: usize| {
        rm.region_id.iter().enumerate().any(|(idx, id)| {
            *id == Some(j as u32) && {
                let dx = (idx % w) as f64 - centroids[i].0;
                let dy = (idx / w) as f64 - centroids[i].1;
                (dx * dx + dy * dy).sqrt() <= radius
            }
        })
    };
    (0..n)
        .map(|i| (0..n).map(|j| i != j && (reaches(i, j) || reaches(j, i))).collect())
        .collect()
}

#[test]
fn collinear_regions_follow_pixel_distance() {
    let (rm, img) = stripes(440, 3, &[(0, 20), (190, 20), (420, 20)]);
    let g = build_site_graph(&rm, &compute_features(&img), 200.0).unwrap();
    let expect = oracle(&rm, 200.0);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g.are_neighbors(i, j), expect[i][j], "pair {i}-{j}");
        }
    }
    // Centroid 0 at x = 9.5 reaches x = 190 and beyond; region 2 starts at
    // 420, which is 220.5 px from centroid 1 at 199.5.
    assert!(g.are_neighbors(0, 1));
    assert!(!g.are_neighbors(1, 2));
    assert!(!g.are_neighbors(0, 2));
}

#[test]
fn partial_reach_is_enough() {
    // Centroid 1 at x = 219.5; the last pixel of region 0 is at x = 19,
    // exactly 200.5 away, and the first pixel of region 2 at x = 419.
    let (rm, img) = stripes(440, 1, &[(0, 20), (210, 20), (419, 21)]);
    let g = build_site_graph(&rm, &compute_features(&img), 200.0).unwrap();
    let expect = oracle(&rm, 200.0);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(g.are_neighbors(i, j), expect[i][j], "pair {i}-{j}");
        }
    }
    assert!(!g.are_neighbors(0, 1));
    assert!(g.are_neighbors(1, 2));
}

#[test]
fn squares_150_apart_are_mutual_neighbours() {
    let w = 200;
    let ids = (0..w * 10)
        .map(|i| match i % w {
            0..=9 => Some(0),
            150..=159 => Some(1),
            _ => None,
        })
        .collect::<Vec<_>>();
    let ignore = ids.iter().map(Option::is_none).collect();
    let img = PixelImage::filled(w, 10, [1, 2, 3]).unwrap().with_ignore(ignore).unwrap();
    let rm = RegionMap::from_ids(w, 10, ids).unwrap();
    let g = build_site_graph(&rm, &compute_features(&img), 200.0).unwrap();
    assert!(g.are_neighbors(0, 1) && g.are_neighbors(1, 0));
    assert_eq!(g.site(0).centroid, (4.5, 4.5));
    assert_eq!(g.site(1).centroid, (154.5, 4.5));
}

#[test]
fn radius_sweep_matches_oracle() {
    let (rm, img) = stripes(300, 4, &[(0, 7), (30, 50), (100, 3), (150, 60), (260, 40)]);
    let feats = compute_features(&img);
    for radius in [0.0, 5.0, 20.0, 49.5, 50.0, 120.0, 300.0] {
        let g = build_site_graph(&rm, &feats, radius).unwrap();
        let expect = oracle(&rm, radius);
        for i in 0..g.len() {
            for j in 0..g.len() {
                assert_eq!(g.are_neighbors(i, j), expect[i][j], "radius {radius}, pair {i}-{j}");
            }
        }
    }
}
