//! Point-cloud geometry kernels: normalization, farthest point sampling,
//! k-nearest-neighbour grouping and nearest-neighbour correspondences.
//!
//! All distance comparisons accumulate in f64 and break ties by lowest
//! index, so results are deterministic across runs and platforms.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// A point cloud, row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("point cloud must be non-empty"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("point {i}: {p:?}")));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Patches produced by FPS + KNN grouping. `patches` holds neighbour
/// coordinates relative to their patch center, flattened row-major with `k`
/// consecutive rows per patch.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub n: usize,
    pub k: usize,
    /// Cloud index of each patch center.
    pub center_idx: Vec<usize>,
    /// Absolute center coordinates, one per patch.
    pub centers: Vec<[f32; 3]>,
    /// Cloud indices of the k neighbours per patch, flattened `n * k`.
    pub neighbor_idx: Vec<usize>,
    /// Center-relative neighbour coordinates, flattened `n * k`.
    pub patches: Vec<[f32; 3]>,
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

/// Translate the centroid to the origin and scale so the farthest point
/// sits on the unit sphere. A cloud with zero radius (all points equal) is
/// centered and left unscaled.
pub fn normalize_cloud(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut c = [0.0f64; 3];
    for p in &cloud.points {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    for a in &mut c {
        *a /= n;
    }
    let centered: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
        .collect();
    let mut r2max = 0.0f64;
    for p in &centered {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if r2 > r2max {
            r2max = r2;
        }
    }
    let scale = if r2max > 1e-24 { r2max.sqrt().recip() } else { 1.0 };
    PointCloud {
        points: centered
            .iter()
            .map(|p| {
                [
                    (p[0] * scale) as f32,
                    (p[1] * scale) as f32,
                    (p[2] * scale) as f32,
                ]
            })
            .collect(),
    }
}

/// Greedy farthest point sampling: starting from `start`, repeatedly pick
/// the point with the largest distance to the already-selected set. Ties
/// pick the lowest index.
pub fn fps(points: &[[f32; 3]], n: usize, start: usize) -> Result<Vec<usize>> {
    let p = points.len();
    if n == 0 || n > p {
        return Err(Error::arg(format!(
            "fps: {n} samples requested from {p} points"
        )));
    }
    if start >= p {
        return Err(Error::index(format!("fps: start {start} of {p}")));
    }
    let mut chosen = vec![false; p];
    let mut selected = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; p];
    chosen[start] = true;
    selected.push(start);
    let mut last = start;
    while selected.len() < n {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..p {
            if chosen[i] {
                continue;
            }
            let d = dist2(points[i], points[last]).min(min_d[i]);
            min_d[i] = d;
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen[best] = true;
        selected.push(best);
        last = best;
    }
    Ok(selected)
}

/// For each center index, the `k` nearest cloud points by squared Euclidean
/// distance, sorted by (distance, index). The center itself is always the
/// first neighbour (distance zero).
pub fn knn(points: &[[f32; 3]], center_idx: &[usize], k: usize) -> Result<Vec<usize>> {
    let p = points.len();
    if k == 0 || k > p {
        return Err(Error::arg(format!(
            "knn: {k} neighbours requested from {p} points"
        )));
    }
    let mut out = Vec::with_capacity(center_idx.len() * k);
    for &c in center_idx {
        if c >= p {
            return Err(Error::index(format!("knn: center {c} of {p}")));
        }
        let mut order: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, &pt)| (dist2(pt, points[c]), i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(order[..k].iter().map(|&(_, i)| i));
    }
    Ok(out)
}

/// FPS + KNN + centering in one step: sample `n` patch centers starting at
/// `start`, group `k` neighbours per center, and express each neighbour
/// relative to its center.
pub fn group_and_center(points: &[[f32; 3]], n: usize, k: usize, start: usize) -> Result<PatchSet> {
    let center_idx = fps(points, n, start)?;
    let neighbor_idx = knn(points, &center_idx, k)?;
    let centers: Vec<[f32; 3]> = center_idx.iter().map(|&i| points[i]).collect();
    let mut patches = Vec::with_capacity(n * k);
    for (pi, &ci) in center_idx.iter().enumerate() {
        let c = points[ci];
        for j in 0..k {
            let nb = points[neighbor_idx[pi * k + j]];
            patches.push([nb[0] - c[0], nb[1] - c[1], nb[2] - c[2]]);
        }
    }
    Ok(PatchSet {
        n,
        k,
        center_idx,
        centers,
        neighbor_idx,
        patches,
    })
}

/// Nearest-neighbour index in `b` for every point of `a`, and in `a` for
/// every point of `b`. Ties pick the lowest index. Distances compare in
/// f64 regardless of the storage scalar.
pub fn chamfer_correspondences<T: Element>(
    a: &[[T; 3]],
    b: &[[T; 3]],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("chamfer correspondences need non-empty sets"));
    }
    let nearest = |from: &[[T; 3]], to: &[[T; 3]]| -> Vec<usize> {
        from.iter()
            .map(|p| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, q) in to.iter().enumerate() {
                    let dx = p[0].as_f64() - q[0].as_f64();
                    let dy = p[1].as_f64() - q[1].as_f64();
                    let dz = p[2].as_f64() - q[2].as_f64();
                    let d = dx * dx + dy * dy + dz * dz;
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            })
            .collect()
    };
    Ok((nearest(a, b), nearest(b, a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fps_square_picks_diagonal_then_breaks_tie_low() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        // From corner 0 the farthest is the diagonal corner 3; corners 1 and
        // 2 then tie and the lower index wins.
        assert_eq!(fps(&pts, 3, 0).unwrap(), vec![0, 3, 1]);
        assert_eq!(fps(&pts, 4, 0).unwrap(), vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_respects_start_index() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        assert_eq!(fps(&pts, 2, 3).unwrap(), vec![3, 0]);
    }

    #[test]
    fn fps_coverage_radius_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let cloud = random_cloud(&mut rng, 40);
            let sel = fps(&cloud.points, 12, 0).unwrap();
            // Distance of each newly selected point to the prior selection.
            let mut prev = f64::INFINITY;
            for t in 1..sel.len() {
                let d = sel[..t]
                    .iter()
                    .map(|&s| dist2(cloud.points[sel[t]], cloud.points[s]))
                    .fold(f64::INFINITY, f64::min);
                assert!(d <= prev + 1e-12, "coverage radius increased");
                prev = d;
            }
        }
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(fps(&pts, 3, 0).is_err());
        assert!(fps(&pts, 0, 0).is_err());
        assert!(fps(&pts, 1, 5).is_err());
    }

    #[test]
    fn knn_includes_center_first_and_sorts_by_distance() {
        let pts = [
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [5.0, 5.0, 5.0],
            [0.2, 0.0, 0.0],
        ];
        assert_eq!(knn(&pts, &[0], 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn knn_ties_pick_lowest_index() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(knn(&pts, &[0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(knn(&pts, &[0], 3).is_err());
        assert!(knn(&pts, &[4], 1).is_err());
    }

    #[test]
    fn patches_are_center_relative() {
        let pts = [
            [1.0, 1.0, 1.0],
            [1.5, 1.0, 1.0],
            [9.0, 9.0, 9.0],
            [9.5, 9.0, 9.0],
        ];
        let ps = group_and_center(&pts, 2, 2, 0).unwrap();
        // Farthest point from (1,1,1) is (9.5,9,9), so it becomes the
        // second center; its nearest other point lies 0.5 below in x.
        assert_eq!(ps.center_idx, vec![0, 3]);
        assert_eq!(ps.patches[0], [0.0, 0.0, 0.0]);
        assert_eq!(ps.patches[1], [0.5, 0.0, 0.0]);
        assert_eq!(ps.patches[2], [0.0, 0.0, 0.0]);
        assert_eq!(ps.patches[3], [-0.5, 0.0, 0.0]);
    }

    #[test]
    fn patches_are_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cloud = random_cloud(&mut rng, 64);
        let shifted: Vec<[f32; 3]> = cloud
            .points
            .iter()
            .map(|p| [p[0] + 3.25, p[1] - 1.5, p[2] + 0.75])
            .collect();
        let a = group_and_center(&cloud.points, 8, 4, 0).unwrap();
        let b = group_and_center(&shifted, 8, 4, 0).unwrap();
        assert_eq!(a.center_idx, b.center_idx);
        assert_eq!(a.neighbor_idx, b.neighbor_idx);
        for (pa, pb) in a.patches.iter().zip(&b.patches) {
            for c in 0..3 {
                assert!((pa[c] - pb[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normalize_centers_and_scales_to_unit_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let mut cloud = random_cloud(&mut rng, 50);
            for p in &mut cloud.points {
                p[0] = p[0] * 4.0 + 10.0;
                p[1] *= 0.5;
            }
            let norm = normalize_cloud(&cloud);
            let mut centroid = [0.0f64; 3];
            let mut rmax = 0.0f64;
            for p in &norm.points {
                for a in 0..3 {
                    centroid[a] += p[a] as f64;
                }
                rmax = rmax.max(dist2(*p, [0.0; 3]));
            }
            for a in centroid {
                assert!((a / 50.0).abs() < 1e-5);
            }
            assert!((rmax.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn normalize_handles_degenerate_cloud() {
        let cloud = PointCloud::new(vec![[2.0, 2.0, 2.0]; 5]).unwrap();
        let norm = normalize_cloud(&cloud);
        for p in norm.points {
            assert_eq!(p, [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn correspondences_on_identical_clouds_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cloud = random_cloud(&mut rng, 20);
        let (ab, ba) = chamfer_correspondences(&cloud.points, &cloud.points).unwrap();
        let ident: Vec<usize> = (0..20).collect();
        assert_eq!(ab, ident);
        assert_eq!(ba, ident);
    }

    #[test]
    fn correspondences_find_nearest_point() {
        let a = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[0.9f32, 0.0, 0.0], [0.2, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let (ab, ba) = chamfer_correspondences(&a, &b).unwrap();
        assert_eq!(ab, vec![1, 0]);
        assert_eq!(ba, vec![1, 0, 1]);
    }

    #[test]
    fn cloud_construction_validates() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f32::NAN, 0.0, 0.0]]).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_points(n: usize) -> impl Strategy<Value = Vec<[f32; 3]>> {
            proptest::collection::vec(
                (-100.0f32..100.0, -100.0f32..100.0, -100.0f32..100.0)
                    .prop_map(|(x, y, z)| [x, y, z]),
                n,
            )
        }

        proptest! {
            #[test]
            fn fps_indices_are_unique_and_start_correct(pts in arb_points(30)) {
                let sel = fps(&pts, 10, 0).unwrap();
                prop_assert_eq!(sel[0], 0);
                let mut sorted = sel.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), 10);
            }

            #[test]
            fn knn_rows_are_sorted_and_unique(pts in arb_points(25)) {
                let centers = fps(&pts, 4, 0).unwrap();
                let nb = knn(&pts, &centers, 6).unwrap();
                for (row, &c) in nb.chunks(6).zip(&centers) {
                    prop_assert_eq!(row[0], c);
                    let mut prev = -1.0f64;
                    let mut seen = std::collections::HashSet::new();
                    for &i in row {
                        prop_assert!(seen.insert(i));
                        let d = dist2(pts[i], pts[c]);
                        prop_assert!(d >= prev);
                        prev = d;
                    }
                }
            }
        }
    }
}
