//! Training objectives. All losses are point sums per level, alpha-weighted
//! across levels; per-level inputs are ordered finest first.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::geometry::{knn_search, FlowField, IndexMatrix, OcclusionMask};
use crate::network::layers::{flatten, repeat_index, to_points};
use crate::network::ForwardPass;
use crate::real::{c, Real};

/// Smallest admissible occlusion-mask sum inside the Chamfer normalisation.
pub const MASK_SUM_EPS: f64 = 1e-6;

/// Level weights for the full four-level pyramid, finest first.
pub const DEFAULT_ALPHA: [f64; 4] = [0.02, 0.04, 0.08, 0.16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: Vec<f64>,
    pub lambda_reg: f64,
    pub lambda_f: f64,
    pub lambda_oc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA.to_vec(),
            lambda_reg: 3.0,
            lambda_f: 0.6,
            lambda_oc: 1.0,
        }
    }
}

impl LossWeights {
    /// Default weights truncated to the first `levels` alphas.
    pub fn for_levels(levels: usize) -> Self {
        LossWeights {
            alpha: (0..levels)
                .map(|l| {
                    DEFAULT_ALPHA
                        .get(l)
                        .copied()
                        .unwrap_or(DEFAULT_ALPHA[3] * 2f64.powi(l as i32 - 3))
                })
                .collect(),
            ..LossWeights::default()
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.alpha.len() != levels {
            return Err(Error::LevelMismatch {
                expected: levels,
                actual: self.alpha.len(),
            });
        }
        let all = self
            .alpha
            .iter()
            .chain([&self.lambda_reg, &self.lambda_f, &self.lambda_oc]);
        for v in all {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

fn check_levels(n: usize, others: &[usize]) -> Result<()> {
    match others.iter().find(|&&m| m != n) {
        Some(&m) => Err(Error::LevelMismatch { expected: n, actual: m }),
        None => Ok(()),
    }
}

fn weighted_total<T: Real>(g: &mut Graph<T>, terms: Vec<ValueId>, alpha: &[f64]) -> Result<ValueId> {
    let mut total: Option<ValueId> = None;
    for (term, &a) in terms.into_iter().zip(alpha) {
        let scaled = g.scale(term, c(a));
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("loss over zero levels".into()))
}

/// `sum_l alpha_l sum_i ||gt - pred||_2` over `[N_l, 3]` flows.
pub fn flow_loss<T: Real>(g: &mut Graph<T>, pred: &[ValueId], gt: &[ValueId], alpha: &[f64]) -> Result<ValueId> {
    check_levels(pred.len(), &[gt.len(), alpha.len()])?;
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(gt) {
        let diff = g.sub(t, p)?;
        let norms = g.row_norm(diff)?;
        terms.push(g.sum(norms));
    }
    weighted_total(g, terms, alpha)
}

/// `sum_l alpha_l sum_i |gt - pred|` over `[N_l, 1]` occlusion probabilities.
pub fn occlusion_loss<T: Real>(g: &mut Graph<T>, pred: &[ValueId], gt: &[ValueId], alpha: &[f64]) -> Result<ValueId> {
    check_levels(pred.len(), &[gt.len(), alpha.len()])?;
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(gt) {
        let diff = g.sub(t, p)?;
        let abs = g.abs(diff);
        terms.push(g.sum(abs));
    }
    weighted_total(g, terms, alpha)
}

/// Occlusion-weighted bidirectional Chamfer distance.
///
/// Per level: `|S| sum_i d(s_i, T) O^f_i / sum O^f + |T| sum_j d(t_j, S_w) O^b_j / sum O^b`
/// where `S_w` is the warped source. Both masks are detached here, so no gradient
/// ever reaches the occlusion predictor through this loss.
pub fn nonoccluded_chamfer<T: Real>(
    g: &mut Graph<T>,
    warped_source: &[ValueId],
    target: &[Vec<[T; 3]>],
    occ_fwd: &[ValueId],
    occ_bwd: &[ValueId],
    alpha: &[f64],
) -> Result<ValueId> {
    check_levels(
        warped_source.len(),
        &[target.len(), occ_fwd.len(), occ_bwd.len(), alpha.len()],
    )?;
    let mut terms = Vec::with_capacity(target.len());
    for l in 0..target.len() {
        let ws = warped_source[l];
        let t_pos = &target[l];
        let (ns, nt) = (g.shape(ws)[0], t_pos.len());
        if g.value(occ_fwd[l]).len() != ns || g.value(occ_bwd[l]).len() != nt {
            return Err(Error::shape(
                "nonoccluded_chamfer",
                &[ns, nt],
                &[g.value(occ_fwd[l]).len(), g.value(occ_bwd[l]).len()],
            ));
        }
        let of = g.detach(occ_fwd[l]);
        let of = g.reshape(of, &[ns])?;
        let ob = g.detach(occ_bwd[l]);
        let ob = g.reshape(ob, &[nt])?;
        let sum_f: f64 = g.data(of).iter().map(|v| v.as_f64()).sum();
        let sum_b: f64 = g.data(ob).iter().map(|v| v.as_f64()).sum();
        for sum in [sum_f, sum_b] {
            if !(sum >= MASK_SUM_EPS) {
                return Err(Error::DegenerateMask { level: l, sum });
            }
        }
        let ws_pts = to_points(g.data(ws));

        // source -> target
        let nn_t = knn_search(&ws_pts, t_pos, 1)?;
        let nearest: Vec<[T; 3]> = nn_t.indices().iter().map(|&j| t_pos[j]).collect();
        let nearest = g.constant(flatten(&nearest), &[ns, 3])?;
        let diff = g.sub(ws, nearest)?;
        let d = g.row_norm(diff)?;
        let wd = g.mul(d, of)?;
        let fwd = g.sum(wd);
        let fwd = g.scale(fwd, c(ns as f64 / sum_f));

        // target -> source
        let nn_s = knn_search(t_pos, &ws_pts, 1)?;
        let gathered = g.gather(ws, nn_s.indices(), 1)?;
        let gathered = g.reshape(gathered, &[nt, 3])?;
        let t_const = g.constant(flatten(t_pos), &[nt, 3])?;
        let diff = g.sub(gathered, t_const)?;
        let d = g.row_norm(diff)?;
        let wd = g.mul(d, ob)?;
        let bwd = g.sum(wd);
        let bwd = g.scale(bwd, c(nt as f64 / sum_b));

        terms.push(g.add(fwd, bwd)?);
    }
    weighted_total(g, terms, alpha)
}

/// `sum_l alpha_l sum_i sum_{k in N(i)} ||f_i - f_k||_1 / |N(i)|`.
pub fn smoothness_reg<T: Real>(
    g: &mut Graph<T>,
    flow: &[ValueId],
    self_neighbors: &[&IndexMatrix],
    alpha: &[f64],
) -> Result<ValueId> {
    check_levels(flow.len(), &[self_neighbors.len(), alpha.len()])?;
    let mut terms = Vec::with_capacity(flow.len());
    let mut scaled_alpha = Vec::with_capacity(flow.len());
    for ((&f, nbrs), &a) in flow.iter().zip(self_neighbors).zip(alpha) {
        let (n, k) = (nbrs.rows(), nbrs.k());
        if g.shape(f) != [n, 3] {
            return Err(Error::shape("smoothness_reg", g.shape(f), &[n, 3]));
        }
        let others = g.gather(f, nbrs.indices(), k)?;
        let center = g.gather(f, &repeat_index(n, k), k)?;
        let diff = g.sub(center, others)?;
        let abs = g.abs(diff);
        terms.push(g.sum(abs));
        scaled_alpha.push(a / k as f64);
    }
    weighted_total(g, terms, &scaled_alpha)
}

/// `L_nch + lambda_reg L_reg + lambda_f L_f + lambda_oc L_oc`; the synthetic
/// flow term is dropped when `synth_flow_enabled` is false.
pub fn self_supervised_total<T: Real>(
    g: &mut Graph<T>,
    chamfer: ValueId,
    reg: ValueId,
    synth_flow: ValueId,
    synth_occ: ValueId,
    weights: &LossWeights,
    synth_flow_enabled: bool,
) -> Result<ValueId> {
    weights.validate(weights.alpha.len())?;
    let reg = g.scale(reg, c(weights.lambda_reg));
    let mut total = g.add(chamfer, reg)?;
    if synth_flow_enabled {
        let f = g.scale(synth_flow, c(weights.lambda_f));
        total = g.add(total, f)?;
    }
    let o = g.scale(synth_occ, c(weights.lambda_oc));
    g.add(total, o)
}

/// Ground-truth flow per source level, subsampled through the pyramid's FPS indices.
pub fn level_flow_targets<T: Real>(g: &mut Graph<T>, pass: &ForwardPass<T>, gt: &FlowField) -> Result<Vec<ValueId>> {
    let src = &pass.pyramid.source;
    if gt.len() != src.positions[0].len() {
        return Err(Error::shape(
            "level_flow_targets",
            &[gt.len(), 3],
            &[src.positions[0].len(), 3],
        ));
    }
    src.full_index
        .iter()
        .map(|idx| {
            let data = idx
                .iter()
                .flat_map(|&i| gt.0[i].iter().map(|&v| c::<T>(v as f64)))
                .collect();
            g.constant(data, &[idx.len(), 3])
        })
        .collect()
}

/// Ground-truth occlusion per source level, subsampled like [`level_flow_targets`].
pub fn level_occlusion_targets<T: Real>(
    g: &mut Graph<T>,
    pass: &ForwardPass<T>,
    gt: &OcclusionMask,
) -> Result<Vec<ValueId>> {
    let src = &pass.pyramid.source;
    if gt.len() != src.positions[0].len() {
        return Err(Error::shape(
            "level_occlusion_targets",
            &[gt.len()],
            &[src.positions[0].len()],
        ));
    }
    src.full_index
        .iter()
        .map(|idx| {
            let data = idx.iter().map(|&i| c::<T>(gt.0[i] as f64)).collect();
            g.constant(data, &[idx.len(), 1])
        })
        .collect()
}

/// Per-level flows of a forward pass, finest first.
pub fn level_flows<T>(pass: &ForwardPass<T>) -> Vec<ValueId> {
    (0..pass.levels()).map(|l| pass.level(l).flow).collect()
}

/// Per-level occlusions of a forward pass, finest first.
pub fn level_occlusions<T>(pass: &ForwardPass<T>) -> Vec<ValueId> {
    (0..pass.levels()).map(|l| pass.level(l).occlusion).collect()
}

/// Supervised objective: multi-level flow loss against subsampled ground truth.
pub fn supervised_loss<T: Real>(
    g: &mut Graph<T>,
    pass: &ForwardPass<T>,
    gt: &FlowField,
    alpha: &[f64],
) -> Result<ValueId> {
    let targets = level_flow_targets(g, pass, gt)?;
    let preds = level_flows(pass);
    flow_loss(g, &preds, &targets, alpha)
}

/// Warped source `S^l + f^l` for every level, finest first.
pub fn warped_sources<T: Real>(g: &mut Graph<T>, pass: &ForwardPass<T>) -> Result<Vec<ValueId>> {
    (0..pass.levels())
        .map(|l| {
            let pos = &pass.pyramid.source.positions[l];
            let s = g.constant(flatten(pos), &[pos.len(), 3])?;
            g.add(s, pass.level(l).flow)
        })
        .collect()
}
