//! Learned layers of one pyramid level.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use super::config::CostVolumeMode;
use super::params::BoundParams;
use crate::diffmath::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::geometry::{knn_search, IndexMatrix, IDW_EPS};
use crate::real::{c, Real};

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// Neighbor count limited to what the reference set can provide.
pub(crate) fn clamp_k(name: &str, k: usize, available: usize) -> usize {
    if k > available {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("{name} = {k} exceeds {available} available points; clamping");
        }
        available
    } else {
        k
    }
}

pub(crate) fn to_points<T: Real>(flat: &[T]) -> Vec<[T; 3]> {
    flat.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()
}

pub(crate) fn flatten<T: Real>(pts: &[[T; 3]]) -> Vec<T> {
    pts.iter().flatten().copied().collect()
}

/// `out[n * k + j] = n`: repeats each row `k` times through [`Graph::gather`].
pub(crate) fn repeat_index(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// `x[.., Din] * W + b` using the buffers `{name}.w` / `{name}.b`.
pub fn dense<T: Real>(g: &mut Graph<T>, params: &BoundParams, name: &str, x: ValueId) -> Result<ValueId> {
    let lookup = |suffix: &str| {
        params
            .get(&format!("{name}.{suffix}"))
            .copied()
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}.{suffix}`")))
    };
    let (w, b) = (lookup("w")?, lookup("b")?);
    g.linear(x, w, b)
}

/// Per-neighbor displacement `in[idx[n, j]] - out[n]` as a constant `[N, k, 3]`.
fn displacement<T: Real>(
    g: &mut Graph<T>,
    in_pos: &[[T; 3]],
    out_pos: &[[T; 3]],
    nbrs: &IndexMatrix,
) -> Result<ValueId> {
    let k = nbrs.k();
    let mut data = Vec::with_capacity(out_pos.len() * k * 3);
    for (n, o) in out_pos.iter().enumerate() {
        for &j in nbrs.row(n) {
            let p = in_pos[j];
            data.extend_from_slice(&[p[0] - o[0], p[1] - o[1], p[2] - o[2]]);
        }
    }
    g.constant(data, &[out_pos.len(), k, 3])
}

/// Simplified point convolution: for every output point, a shared linear layer
/// with leaky-relu over `(neighbor - center, neighbor feature)` followed by a
/// max over its `k` nearest input points.
#[allow(clippy::too_many_arguments)]
pub fn point_conv<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    layer: &str,
    in_pos: &[[T; 3]],
    in_feat: Option<ValueId>,
    out_pos: &[[T; 3]],
    k: usize,
    slope: T,
) -> Result<ValueId> {
    let k = clamp_k("k_conv", k, in_pos.len());
    let nbrs = knn_search(out_pos, in_pos, k)?;
    let disp = displacement(g, in_pos, out_pos, &nbrs)?;
    let input = match in_feat {
        Some(f) if g.shape(f)[1] > 0 => {
            let grouped = g.gather(f, nbrs.indices(), k)?;
            g.concat(&[disp, grouped])?
        }
        _ => disp,
    };
    let h = dense(g, params, layer, input)?;
    let a = g.leaky_relu(h, slope);
    g.max_over_axis(a)
}

/// Warped-target neighborhood of every source point, shared by the occlusion
/// predictor and the cost volume.
#[derive(Clone, Debug)]
pub struct Grouped {
    pub neighbors: Arc<IndexMatrix>,
    /// `t_j - s_i`, `[N, k1, 3]`.
    pub displacement: ValueId,
    /// `c_i` repeated over neighbors, `[N, k1, w]`.
    pub source_features: ValueId,
    /// `g_j`, `[N, k1, w]`.
    pub target_features: ValueId,
}

pub fn group_neighbors<T: Real>(
    g: &mut Graph<T>,
    source_pos: &[[T; 3]],
    source_feat: ValueId,
    warped_target: ValueId,
    target_feat: ValueId,
    k1: usize,
) -> Result<Grouped> {
    let tw = to_points(g.data(warped_target));
    let k = clamp_k("k1", k1, tw.len());
    let nbrs = Arc::new(knn_search(source_pos, &tw, k)?);
    let n = source_pos.len();
    let gathered = g.gather(warped_target, nbrs.indices(), k)?;
    let centers: Vec<T> = source_pos
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, k).flatten().copied())
        .collect();
    let centers = g.constant(centers, &[n, k, 3])?;
    let displacement = g.sub(gathered, centers)?;
    let source_features = g.gather(source_feat, &repeat_index(n, k), k)?;
    let target_features = g.gather(target_feat, nbrs.indices(), k)?;
    Ok(Grouped {
        neighbors: nbrs,
        displacement,
        source_features,
        target_features,
    })
}

/// Matching cost `h(c_i, g_j, t_j - s_i)` for every grouped pair, `[N, k1, d_cv]`.
pub fn matching_cost<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    level: usize,
    grouped: &Grouped,
    slope: T,
) -> Result<ValueId> {
    let x = g.concat(&[grouped.source_features, grouped.target_features, grouped.displacement])?;
    let h = dense(g, params, &format!("cost{level}.h0"), x)?;
    let a = g.leaky_relu(h, slope);
    dense(g, params, &format!("cost{level}.h1"), a)
}

/// Max of the matching cost over the warped-target neighbors.
pub fn cost_volume_cross<T: Real>(g: &mut Graph<T>, cost: ValueId) -> Result<ValueId> {
    g.max_over_axis(cost)
}

/// Max of `CV_cross` over each source point's self-neighborhood.
pub fn cost_volume_self<T: Real>(g: &mut Graph<T>, cv_cross: ValueId, self_neighbors: &IndexMatrix) -> Result<ValueId> {
    let gathered = g.gather(cv_cross, self_neighbors.indices(), self_neighbors.k())?;
    g.max_over_axis(gathered)
}

/// Blends the two volumes with the per-point non-occlusion probability `[N, 1]`.
pub fn occlusion_weighted_cv<T: Real>(
    g: &mut Graph<T>,
    cv_cross: ValueId,
    cv_self: ValueId,
    occlusion: ValueId,
    mode: CostVolumeMode,
) -> Result<ValueId> {
    if g.shape(cv_cross) != g.shape(cv_self) {
        return Err(Error::shape(
            "occlusion_weighted_cv",
            g.shape(cv_cross),
            g.shape(cv_self),
        ));
    }
    if g.value(occlusion).len() != g.shape(cv_cross)[0] {
        return Err(Error::shape(
            "occlusion_weighted_cv",
            g.shape(cv_cross),
            g.shape(occlusion),
        ));
    }
    if g.data(occlusion).iter().any(|&o| !(o >= T::zero() && o <= T::one())) {
        return Err(Error::InvalidArgument("occlusion probabilities outside [0, 1]".into()));
    }
    match mode {
        CostVolumeMode::CrossOnly => Ok(cv_cross),
        CostVolumeMode::SelfOnly => Ok(cv_self),
        CostVolumeMode::MaskedCross => g.scale_rows(cv_cross, occlusion),
        CostVolumeMode::OcclusionWeighted => {
            let visible = g.scale_rows(cv_cross, occlusion)?;
            let hidden_w = g.affine(occlusion, -T::one(), T::one());
            let hidden = g.scale_rows(cv_self, hidden_w)?;
            g.add(visible, hidden)
        }
    }
}

/// Per-point non-occlusion probability `[N, 1]`, strictly inside (0, 1).
pub fn predict_occlusion<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    level: usize,
    grouped: &Grouped,
    upsampled_occ: ValueId,
    slope: T,
) -> Result<ValueId> {
    let k = grouped.neighbors.k();
    let n = grouped.neighbors.rows();
    if g.value(upsampled_occ).len() != n {
        return Err(Error::shape("predict_occlusion", &[n, 1], g.shape(upsampled_occ)));
    }
    let occ = g.reshape(upsampled_occ, &[n, 1])?;
    let occ_rep = g.gather(occ, &repeat_index(n, k), k)?;
    let x = g.concat(&[
        occ_rep,
        grouped.source_features,
        grouped.displacement,
        grouped.target_features,
    ])?;
    let h = dense(g, params, &format!("occ{level}.conv0"), x)?;
    let h = g.leaky_relu(h, slope);
    let h = dense(g, params, &format!("occ{level}.conv1"), h)?;
    let h = g.leaky_relu(h, slope);
    let pooled = g.max_over_axis(h)?;
    let m = dense(g, params, &format!("occ{level}.mlp0"), pooled)?;
    let m = g.leaky_relu(m, slope);
    let logit = dense(g, params, &format!("occ{level}.mlp1"), m)?;
    Ok(g.sigmoid(logit))
}

/// Residual flow `[N, 3]` from source features, cost volume, upsampled flow and
/// occlusion. The caller adds the upsampled flow.
#[allow(clippy::too_many_arguments)]
pub fn predict_residual_flow<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    level: usize,
    source_pos: &[[T; 3]],
    source_feat: ValueId,
    cost_volume: ValueId,
    upsampled_flow: ValueId,
    occlusion: ValueId,
    k_conv: usize,
    slope: T,
) -> Result<ValueId> {
    let x = g.concat(&[source_feat, cost_volume, upsampled_flow, occlusion])?;
    let h = point_conv(
        g,
        params,
        &format!("flow{level}.conv"),
        source_pos,
        Some(x),
        source_pos,
        k_conv,
        slope,
    )?;
    let h = dense(g, params, &format!("flow{level}.mlp0"), h)?;
    let h = g.leaky_relu(h, slope);
    dense(g, params, &format!("flow{level}.mlp1"), h)
}

/// Inverse-distance interpolation of `values` (`[coarse, D]`) onto `fine`
/// positions. Weights depend on constant positions only.
pub fn upsample<T: Real>(
    g: &mut Graph<T>,
    values: ValueId,
    coarse: &[[T; 3]],
    fine: &[[T; 3]],
    k: usize,
) -> Result<ValueId> {
    let k = clamp_k("k_interp", k, coarse.len());
    let nn = knn_search(fine, coarse, k)?;
    let weights: Vec<T> = nn
        .distances()
        .iter()
        .map(|&d| T::one() / (c::<T>(d) + c(IDW_EPS)))
        .collect();
    let w = g.constant(weights, &[fine.len(), k])?;
    let gathered = g.gather(values, nn.indices(), k)?;
    g.weighted_mean(gathered, w)
}

/// Differentiable backward warp: `t_j - f_hat(t_j)` where `f_hat` interpolates
/// `flow` from the warped source `s_i + f_i`.
pub fn warp<T: Real>(
    g: &mut Graph<T>,
    target: &[[T; 3]],
    source: &[[T; 3]],
    flow: ValueId,
    k: usize,
) -> Result<ValueId> {
    let (ns, nt) = (source.len(), target.len());
    let s = g.constant(flatten(source), &[ns, 3])?;
    let ws = g.add(s, flow)?;
    let k = clamp_k("k_interp", k, ns);
    let nn = knn_search(target, &to_points(g.data(ws)), k)?;
    let gathered_pos = g.gather(ws, nn.indices(), k)?;
    let centers: Vec<T> = target
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, k).flatten().copied())
        .collect();
    let centers = g.constant(centers, &[nt, k, 3])?;
    let diff = g.sub(gathered_pos, centers)?;
    let dist = g.row_norm(diff)?;
    let ones = g.constant(vec![T::one(); nt * k], &[nt, k])?;
    let w = g.div(ones, dist, c(IDW_EPS))?;
    let gathered_flow = g.gather(flow, nn.indices(), k)?;
    let f_hat = g.weighted_mean(gathered_flow, w)?;
    let t = g.constant(flatten(target), &[nt, 3])?;
    g.sub(t, f_hat)
}
