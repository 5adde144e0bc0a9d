use std::sync::Arc;

use super::config::ModelConfig;
use super::layers::{
    clamp_k, cost_volume_cross, cost_volume_self, group_neighbors, matching_cost, occlusion_weighted_cv, point_conv,
    predict_occlusion, predict_residual_flow, to_points, upsample, warp,
};
use super::params::{BoundParams, ModelParams};
use crate::diffmath::{Graph, ValueId};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sampling, knn_search, FlowField, IndexMatrix, OcclusionMask, PointCloud};
use crate::real::{c, Real};

/// Hierarchy of one cloud: positions and encoded features per level.
#[derive(Clone, Debug)]
pub struct CloudPyramid<T> {
    pub positions: Vec<Vec<[T; 3]>>,
    /// Encoded features `[|level|, feature_widths[l]]`.
    pub features: Vec<ValueId>,
    /// Rows of level `l - 1` kept at level `l` (identity for level 0).
    pub down_index: Vec<Vec<usize>>,
    /// Rows of the input cloud kept at level `l`.
    pub full_index: Vec<Vec<usize>>,
    /// k2 nearest neighbors of every point within its own level (self included).
    pub self_neighbors: Vec<Arc<IndexMatrix>>,
}

impl<T> CloudPyramid<T> {
    pub fn levels(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Debug)]
pub struct Pyramid<T> {
    pub source: CloudPyramid<T>,
    pub target: CloudPyramid<T>,
}

/// Predictions at one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    /// `[|S^l|, 3]`.
    pub flow: ValueId,
    /// `[|S^l|, 1]`, strictly inside (0, 1).
    pub occlusion: ValueId,
    /// `[|S^l|, d_cv]`, the blended volume fed to the flow predictor.
    pub cost_volume: ValueId,
    pub cv_cross: ValueId,
    pub cv_self: ValueId,
    pub upsampled_flow: ValueId,
    pub warped_target: ValueId,
    /// Neighbor lists consumed by the occlusion predictor and the cost volume.
    pub occ_neighbors: Arc<IndexMatrix>,
    pub cv_neighbors: Arc<IndexMatrix>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub pyramid: Pyramid<T>,
    /// Coarsest first; the full-resolution level is last.
    pub outputs: Vec<LevelOutput>,
}

impl<T> ForwardPass<T> {
    /// Output at pyramid level `l` (0 = full resolution).
    pub fn level(&self, l: usize) -> &LevelOutput {
        let n = self.outputs.len();
        &self.outputs[n - 1 - l]
    }

    pub fn finest(&self) -> &LevelOutput {
        self.outputs.last().expect("forward pass has at least one level")
    }

    pub fn levels(&self) -> usize {
        self.outputs.len()
    }
}

fn encode_cloud<T: Real>(
    g: &mut Graph<T>,
    cloud: &PointCloud,
    params: &BoundParams,
    config: &ModelConfig,
    fps_start: usize,
) -> Result<CloudPyramid<T>> {
    if cloud.feature_dim() != config.input_feature_dim {
        return Err(Error::shape(
            "encode_pyramid",
            &[cloud.len(), cloud.feature_dim()],
            &[cloud.len(), config.input_feature_dim],
        ));
    }
    let counts = config.level_counts(cloud.len());
    let slope = c::<T>(config.leaky_slope);
    let mut pyr = CloudPyramid {
        positions: Vec::with_capacity(config.levels),
        features: Vec::with_capacity(config.levels),
        down_index: Vec::with_capacity(config.levels),
        full_index: Vec::with_capacity(config.levels),
        self_neighbors: Vec::with_capacity(config.levels),
    };
    let base: Vec<[T; 3]> = cloud.positions_as();
    let raw = if cloud.feature_dim() > 0 {
        let data = cloud.features().iter().map(|&v| c(v as f64)).collect();
        Some(g.constant(data, &[cloud.len(), cloud.feature_dim()])?)
    } else {
        None
    };

    for (l, &count) in counts.iter().enumerate() {
        let (positions, down, full) = if l == 0 {
            let id: Vec<usize> = (0..cloud.len()).collect();
            (base.clone(), id.clone(), id)
        } else {
            let prev = &pyr.positions[l - 1];
            if count > prev.len() {
                return Err(Error::InvalidArgument(format!(
                    "level {l} needs {count} points but only {} are available",
                    prev.len()
                )));
            }
            let down = farthest_point_sampling(prev, count, fps_start % prev.len())?;
            let positions = down.iter().map(|&i| prev[i]).collect();
            let full = down.iter().map(|&i| pyr.full_index[l - 1][i]).collect();
            (positions, down, full)
        };
        let (in_pos, in_feat) = if l == 0 {
            (&base, raw)
        } else {
            (&pyr.positions[l - 1], Some(pyr.features[l - 1]))
        };
        let feat = point_conv(
            g,
            params,
            &format!("enc{l}"),
            in_pos,
            in_feat,
            &positions,
            config.k_conv,
            slope,
        )?;
        let k2 = clamp_k("k2", config.k2, positions.len());
        let nbrs = Arc::new(knn_search(&positions, &positions, k2)?);
        pyr.positions.push(positions);
        pyr.features.push(feat);
        pyr.down_index.push(down);
        pyr.full_index.push(full);
        pyr.self_neighbors.push(nbrs);
    }
    Ok(pyr)
}

/// Builds both feature pyramids with shared encoder weights.
pub fn encode_pyramid<T: Real>(
    g: &mut Graph<T>,
    source: &PointCloud,
    target: &PointCloud,
    params: &BoundParams,
    config: &ModelConfig,
    fps_start: usize,
) -> Result<Pyramid<T>> {
    config.validate()?;
    Ok(Pyramid {
        source: encode_cloud(g, source, params, config, fps_start)?,
        target: encode_cloud(g, target, params, config, fps_start)?,
    })
}

/// Coarse-to-fine forward pass. The coarsest level starts from zero flow and an
/// all-visible occlusion prior; each finer level upsamples the previous
/// estimates, warps the target, predicts occlusion, builds the blended cost
/// volume and adds a predicted residual to the upsampled flow.
pub fn model_forward<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    source: &PointCloud,
    target: &PointCloud,
    config: &ModelConfig,
    fps_start: usize,
) -> Result<ForwardPass<T>> {
    model_forward_with(g, params, source, target, config, fps_start, ForwardOptions::default())
}

/// Switches for [`model_forward_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Cut the occlusion estimates out of the graph at every level, so no loss
    /// computed from this pass can update the occlusion predictor.
    pub detach_occlusion: bool,
}

pub fn model_forward_with<T: Real>(
    g: &mut Graph<T>,
    params: &BoundParams,
    source: &PointCloud,
    target: &PointCloud,
    config: &ModelConfig,
    fps_start: usize,
    options: ForwardOptions,
) -> Result<ForwardPass<T>> {
    let pyramid = encode_pyramid(g, source, target, params, config, fps_start)?;
    let slope = c::<T>(config.leaky_slope);
    let mut outputs: Vec<LevelOutput> = Vec::with_capacity(config.levels);

    for l in (0..config.levels).rev() {
        let s_pos = &pyramid.source.positions[l];
        let t_pos = &pyramid.target.positions[l];
        let s_feat = pyramid.source.features[l];
        let t_feat = pyramid.target.features[l];
        let n = s_pos.len();

        let (up_flow, up_occ) = match outputs.last() {
            None => (
                g.constant(vec![T::zero(); n * 3], &[n, 3])?,
                g.constant(vec![T::one(); n], &[n, 1])?,
            ),
            Some(prev) => {
                let coarse = &pyramid.source.positions[l + 1];
                (
                    upsample(g, prev.flow, coarse, s_pos, config.k_interp)?,
                    upsample(g, prev.occlusion, coarse, s_pos, config.k_interp)?,
                )
            }
        };

        let warped = warp(g, t_pos, s_pos, up_flow, config.k_interp)?;
        let grouped = group_neighbors(g, s_pos, s_feat, warped, t_feat, config.k1)?;
        let mut occlusion = predict_occlusion(g, params, l, &grouped, up_occ, slope)?;
        if options.detach_occlusion {
            occlusion = g.detach(occlusion);
        }
        let cost = matching_cost(g, params, l, &grouped, slope)?;
        let cv_cross = cost_volume_cross(g, cost)?;
        let cv_self = cost_volume_self(g, cv_cross, &pyramid.source.self_neighbors[l])?;
        let cost_volume = occlusion_weighted_cv(g, cv_cross, cv_self, occlusion, config.cost_volume_mode)?;
        let residual = predict_residual_flow(
            g,
            params,
            l,
            s_pos,
            s_feat,
            cost_volume,
            up_flow,
            occlusion,
            config.k_conv,
            slope,
        )?;
        let flow = g.add(up_flow, residual)?;
        outputs.push(LevelOutput {
            level: l,
            flow,
            occlusion,
            cost_volume,
            cv_cross,
            cv_self,
            upsampled_flow: up_flow,
            warped_target: warped,
            occ_neighbors: Arc::clone(&grouped.neighbors),
            cv_neighbors: grouped.neighbors,
        });
    }
    Ok(ForwardPass { pyramid, outputs })
}

/// Full-resolution estimates as plain buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub flow: FlowField,
    pub occlusion: OcclusionMask,
}

impl<T: Real> ForwardPass<T> {
    pub fn flow_at(&self, g: &Graph<T>, level: usize) -> FlowField {
        let data = g.data(self.level(level).flow);
        FlowField(
            to_points(data)
                .into_iter()
                .map(|p| [p[0].as_f64() as f32, p[1].as_f64() as f32, p[2].as_f64() as f32])
                .collect(),
        )
    }

    pub fn occlusion_at(&self, g: &Graph<T>, level: usize) -> OcclusionMask {
        OcclusionMask(
            g.data(self.level(level).occlusion)
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect(),
        )
    }
}

/// Inference on one pair with deterministic sampling.
pub fn predict(
    source: &PointCloud,
    target: &PointCloud,
    params: &ModelParams<f32>,
    config: &ModelConfig,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let pass = model_forward(&mut g, &bound, source, target, config, 0)?;
    Ok(Prediction {
        flow: pass.flow_at(&g, 0),
        occlusion: pass.occlusion_at(&g, 0),
    })
}
