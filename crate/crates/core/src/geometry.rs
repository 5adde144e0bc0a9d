//! Non-learned point-cloud kernels: farthest point sampling, exact k-NN,
//! inverse-distance interpolation and backward warping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::{c, Real};

/// Inverse-distance guard: `w = 1 / (d + IDW_EPS)`.
pub const IDW_EPS: f64 = 1e-8;

/// Positions (meters) and per-point features for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    positions: Vec<[f32; 3]>,
    features: Vec<f32>,
    feature_dim: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, features: Vec<f32>, feature_dim: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument(
                "point cloud must hold at least one point".into(),
            ));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud has non-finite coordinates".into()));
        }
        if features.len() != positions.len() * feature_dim {
            return Err(Error::shape(
                "PointCloud",
                &[positions.len(), feature_dim],
                &[features.len()],
            ));
        }
        Ok(PointCloud {
            positions,
            features,
            feature_dim,
        })
    }

    /// Cloud without features.
    pub fn from_positions(positions: Vec<[f32; 3]>) -> Result<Self> {
        PointCloud::new(positions, Vec::new(), 0)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Sub-cloud with the given rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let d = self.feature_dim;
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            features: idx
                .iter()
                .flat_map(|&i| self.features[i * d..(i + 1) * d].iter().copied())
                .collect(),
            feature_dim: d,
        }
    }

    pub fn positions_as<T: Real>(&self) -> Vec<[T; 3]> {
        self.positions.iter().map(|p| cast3(*p)).collect()
    }
}

/// Per-point motion vectors aligned with a source cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField(pub Vec<[f32; 3]>);

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField(vec![[0.0; 3]; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> FlowField {
        FlowField(idx.iter().map(|&i| self.0[i]).collect())
    }
}

/// Per-point non-occlusion probability: 1 visible in the other frame, 0 occluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMask(pub Vec<f32>);

impl OcclusionMask {
    pub fn ones(n: usize) -> Self {
        OcclusionMask(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn select(&self, idx: &[usize]) -> OcclusionMask {
        OcclusionMask(idx.iter().map(|&i| self.0[i]).collect())
    }
}

/// Neighbor lists: `k` reference indices per query with ascending distances.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexMatrix {
    indices: Vec<usize>,
    distances: Vec<f64>,
    k: usize,
}

impl IndexMatrix {
    /// Builds a matrix from explicit rows; distances are zero-filled.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("index rows must share a non-zero width".into()));
        }
        let indices: Vec<usize> = rows.iter().flatten().copied().collect();
        let distances = vec![0.0; indices.len()];
        Ok(IndexMatrix { indices, distances, k })
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Row-major `rows x k` indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn row_distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }
}

#[inline]
pub(crate) fn cast3<A: Real, B: Real>(p: [A; 3]) -> [B; 3] {
    [c(p[0].as_f64()), c(p[1].as_f64()), c(p[2].as_f64())]
}

#[inline]
pub(crate) fn dist2<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling starting at `seed_index`.
///
/// Each pick maximises the minimum distance to all earlier picks; ties go to
/// the lowest index.
pub fn farthest_point_sampling<T: Real>(positions: &[[T; 3]], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!("fps: m = {m} outside 1..={n}")));
    }
    if seed_index >= n {
        return Err(Error::Index {
            op: "farthest_point_sampling",
            index: seed_index,
            len: n,
        });
    }
    let mut picks = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); n];
    let mut current = seed_index;
    picks.push(current);
    while picks.len() < m {
        let p = positions[current];
        let mut best = 0;
        let mut best_d = T::neg_infinity();
        for (i, (q, md)) in positions.iter().zip(min_d.iter_mut()).enumerate() {
            let d = dist2(&p, q);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
        picks.push(current);
    }
    Ok(picks)
}

/// Exact k nearest references for every query, ascending, ties by lower index.
pub fn knn_search<T: Real>(queries: &[[T; 3]], refs: &[[T; 3]], k: usize) -> Result<IndexMatrix> {
    knn_search_with(Exec::default(), queries, refs, k)
}

pub fn knn_search_with<T: Real>(exec: Exec, queries: &[[T; 3]], refs: &[[T; 3]], k: usize) -> Result<IndexMatrix> {
    if k == 0 || k > refs.len() {
        return Err(Error::InvalidArgument(format!(
            "knn: k = {k} outside 1..={}",
            refs.len()
        )));
    }
    let rows = exec.map_slice(queries, |q| nearest_k(q, refs, k));
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut distances = Vec::with_capacity(queries.len() * k);
    for row in rows {
        for (i, d2) in row {
            indices.push(i);
            distances.push(d2.as_f64().sqrt());
        }
    }
    Ok(IndexMatrix { indices, distances, k })
}

/// Insertion into a bounded sorted buffer; strict comparison keeps the earlier
/// (lower) index ahead on ties.
fn nearest_k<T: Real>(q: &[T; 3], refs: &[[T; 3]], k: usize) -> Vec<(usize, T)> {
    let mut best: Vec<(usize, T)> = Vec::with_capacity(k + 1);
    for (i, r) in refs.iter().enumerate() {
        let d = dist2(q, r);
        if best.len() == k && d >= best[k - 1].1 {
            continue;
        }
        let pos = best.partition_point(|&(_, bd)| bd <= d);
        best.insert(pos, (i, d));
        best.truncate(k);
    }
    best
}

/// Inverse-distance weighted interpolation of `values` (`refs.len() x dim`).
pub fn idw_interpolate<T: Real>(
    queries: &[[T; 3]],
    refs: &[[T; 3]],
    values: &[T],
    dim: usize,
    k: usize,
) -> Result<Vec<T>> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("idw: empty reference set".into()));
    }
    if values.len() != refs.len() * dim {
        return Err(Error::shape("idw_interpolate", &[refs.len(), dim], &[values.len()]));
    }
    let nn = knn_search(queries, refs, k)?;
    let mut out = vec![T::zero(); queries.len() * dim];
    for (qi, o) in out.chunks_mut(dim.max(1)).enumerate().take(queries.len()) {
        let mut total = T::zero();
        for (&ri, &d) in nn.row(qi).iter().zip(nn.row_distances(qi)) {
            let w = T::one() / (c::<T>(d) + c(IDW_EPS));
            total += w;
            for (ov, &v) in o.iter_mut().zip(&values[ri * dim..(ri + 1) * dim]) {
                *ov += w * v;
            }
        }
        o.iter_mut().for_each(|v| *v = *v / total);
    }
    Ok(out)
}

/// Moves target points back toward the source by the flow interpolated at each
/// target point from the warped source `{s_i + f_i}`. Features are untouched.
pub fn warp_target(target: &PointCloud, source: &PointCloud, flow: &FlowField, k: usize) -> Result<PointCloud> {
    if flow.len() != source.len() {
        return Err(Error::shape("warp_target", &[source.len(), 3], &[flow.len(), 3]));
    }
    let warped: Vec<[f64; 3]> = source
        .positions()
        .iter()
        .zip(&flow.0)
        .map(|(s, f)| {
            [
                s[0] as f64 + f[0] as f64,
                s[1] as f64 + f[1] as f64,
                s[2] as f64 + f[2] as f64,
            ]
        })
        .collect();
    let values: Vec<f64> = flow.0.iter().flatten().map(|&v| v as f64).collect();
    let queries: Vec<[f64; 3]> = target.positions_as();
    let k = k.min(source.len());
    let interp = idw_interpolate(&queries, &warped, &values, 3, k)?;
    let positions = target
        .positions()
        .iter()
        .zip(interp.chunks(3))
        .map(|(t, f)| [t[0] - f[0] as f32, t[1] - f[1] as f32, t[2] - f[2] as f32])
        .collect();
    PointCloud::new(positions, target.features().to_vec(), target.feature_dim())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn fps_collinear() {
        let pts: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(farthest_point_sampling(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sampling(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sampling(&pts, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sampling(&pts, 5, 0).is_err());
        assert!(farthest_point_sampling(&pts, 0, 0).is_err());
    }

    #[test]
    fn fps_tie_picks_lowest_index() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(farthest_point_sampling(&pts, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn knn_examples() {
        let q = [[0.0, 0.0, 0.0]];
        let refs = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let nn = knn_search(&q, &refs, 2).unwrap();
        assert_eq!(nn.row(0), &[0, 1]);
        assert_eq!(nn.row_distances(0), &[1.0, 2.0]);

        let all = knn_search(&q, &refs, 3).unwrap();
        assert_eq!(all.row(0), &[0, 1, 2]);

        let tied = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(knn_search(&q, &tied, 1).unwrap().row(0), &[0]);
        assert!(knn_search(&q, &refs, 4).is_err());
    }

    #[test]
    fn idw_examples() {
        let refs = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let vals = [0.0, 2.0];
        let mid = idw_interpolate(&[[1.0, 0.0, 0.0]], &refs, &vals, 1, 2).unwrap();
        assert!((mid[0] - 1.0f64).abs() < 1e-12);

        let on = idw_interpolate(&[[2.0, 0.0, 0.0]], &refs, &vals, 1, 2).unwrap();
        assert!((on[0] - 2.0f64).abs() < 1e-6);

        let same = idw_interpolate(&[[0.3, 0.7, 0.1]], &refs, &[5.0, 5.0], 1, 2).unwrap();
        assert_eq!(same[0], 5.0);
        assert!(idw_interpolate::<f64>(&[[0.0; 3]], &[], &[], 1, 1).is_err());
    }

    #[test]
    fn warp_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let src: Vec<[f32; 3]> = random_points(&mut r, 20).iter().map(|p| cast3(*p)).collect();
        let source = PointCloud::from_positions(src.clone()).unwrap();
        let tgt: Vec<[f32; 3]> = random_points(&mut r, 15).iter().map(|p| cast3(*p)).collect();
        let target = PointCloud::new(tgt.clone(), vec![1.0; 15], 1).unwrap();

        let zero = warp_target(&target, &source, &FlowField::zeros(20), 3).unwrap();
        assert_eq!(zero, target);

        let u = [0.5f32, -0.25, 1.0];
        let moved: Vec<[f32; 3]> = src.iter().map(|p| [p[0] + u[0], p[1] + u[1], p[2] + u[2]]).collect();
        let shifted = PointCloud::from_positions(moved).unwrap();
        let w = warp_target(&shifted, &source, &FlowField(vec![u; 20]), 3).unwrap();
        for (a, b) in w.positions().iter().zip(&src) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-5);
            }
        }

        let one = PointCloud::from_positions(vec![[0.0, 0.0, 0.0]]).unwrap();
        let f = [0.1f32, 0.2, 0.3];
        let w = warp_target(&target, &one, &FlowField(vec![f]), 3).unwrap();
        for (a, b) in w.positions().iter().zip(&tgt) {
            for d in 0..3 {
                assert!((a[d] - (b[d] - f[d])).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn knn_rows_sorted_and_match_sort(seed in any::<u64>(), n in 1usize..20, m in 1usize..30) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let q = random_points(&mut r, n);
            let refs = random_points(&mut r, m);
            let k = r.gen_range(1..=m);
            let nn = knn_search(&q, &refs, k).unwrap();
            for (qi, qp) in q.iter().enumerate() {
                let mut all: Vec<(f64, usize)> = refs.iter().enumerate().map(|(i, p)| (dist2(qp, p), i)).collect();
                all.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
                prop_assert_eq!(nn.row(qi), &want[..]);
                prop_assert!(nn.row_distances(qi).windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn idw_stays_in_neighbor_hull(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let refs = random_points(&mut r, 12);
            let vals: Vec<f64> = (0..24).map(|_| r.gen_range(-3.0..3.0)).collect();
            let q = random_points(&mut r, 5);
            let out = idw_interpolate(&q, &refs, &vals, 2, 3).unwrap();
            let nn = knn_search(&q, &refs, 3).unwrap();
            for qi in 0..5 {
                for d in 0..2 {
                    let vs: Vec<f64> = nn.row(qi).iter().map(|&i| vals[i * 2 + d]).collect();
                    let lo = vs.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out[qi * 2 + d] >= lo - 1e-12 && out[qi * 2 + d] <= hi + 1e-12);
                }
            }
        }
    }
}
