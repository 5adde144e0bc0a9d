//! Exhaustive O(N^2) reference computations, written from the definitions
//! without touching the optimized kernels.

/// `k` nearest reference indices per query by full sort; ties go to the lower index.
pub fn knn(queries: &[[f32; 3]], refs: &[[f32; 3]], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = refs
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let d: f64 = (0..3).map(|a| (q[a] as f64 - r[a] as f64).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn nearest(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// One level of the occlusion-weighted, cardinality-scaled Chamfer distance.
pub fn weighted_chamfer(warped: &[[f64; 3]], target: &[[f64; 3]], occ_fwd: &[f64], occ_bwd: &[f64]) -> f64 {
    let sf: f64 = occ_fwd.iter().sum();
    let sb: f64 = occ_bwd.iter().sum();
    let mut fwd = 0.0;
    for (i, &p) in warped.iter().enumerate() {
        fwd += nearest(p, target) * occ_fwd[i];
    }
    let mut bwd = 0.0;
    for (j, &t) in target.iter().enumerate() {
        bwd += nearest(t, warped) * occ_bwd[j];
    }
    warped.len() as f64 * fwd / sf + target.len() as f64 * bwd / sb
}

/// Reference flow metrics: `(epe_full, epe, acc_05, acc_10, outliers)`.
pub fn flow_metrics(pred: &[[f32; 3]], gt: &[[f32; 3]], gt_occ: &[f32]) -> (f64, f64, f64, f64, f64) {
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = [0, 1, 2].map(|a| g[a] as f64 - p[a] as f64);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    let epe_full = errs.iter().sum::<f64>() / errs.len() as f64;
    let mut visible = Vec::new();
    for i in 0..gt.len() {
        if gt_occ[i] == 1.0 {
            let g = gt[i].map(|v| v as f64);
            let mag = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let rel = errs[i] / if mag > 1e-4 { mag } else { 1e-4 };
            visible.push((errs[i], rel));
        }
    }
    let n = visible.len() as f64;
    let frac = |f: &dyn Fn(f64, f64) -> bool| visible.iter().filter(|(e, r)| f(*e, *r)).count() as f64 / n;
    (
        epe_full,
        visible.iter().map(|v| v.0).sum::<f64>() / n,
        frac(&|e, r| e < 0.05 || r < 0.05),
        frac(&|e, r| e < 0.1 || r < 0.1),
        frac(&|e, r| e > 0.3 || r > 0.1),
    )
}

/// Greedy farthest-point picks with exhaustive min-distance scans.
pub fn fps(points: &[[f32; 3]], m: usize, seed: usize) -> Vec<usize> {
    let p: Vec<[f64; 3]> = points.iter().map(|q| q.map(|v| v as f64)).collect();
    let mut picks = vec![seed];
    while picks.len() < m {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..p.len() {
            let d = picks.iter().map(|&j| dist(p[i], p[j])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picks.push(best.1);
    }
    picks
}
