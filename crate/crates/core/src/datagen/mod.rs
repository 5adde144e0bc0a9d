//! Synthetic-occlusion pairs, procedural rigid scenes with exact ground truth,
//! and the OGF1 pair format.

mod ogf;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn_search, FlowField, OcclusionMask, PointCloud};

pub use ogf::{decode_pair, encode_pair, read_pair, write_pair, FORMAT_VERSION, MAGIC};

/// Source/target frames with optional ground truth aligned to the source.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_flow: Option<FlowField>,
    pub gt_occlusion: Option<OcclusionMask>,
}

impl ScenePair {
    pub fn new(
        source: PointCloud,
        target: PointCloud,
        gt_flow: Option<FlowField>,
        gt_occlusion: Option<OcclusionMask>,
    ) -> Result<Self> {
        let n = source.len();
        if let Some(f) = &gt_flow {
            if f.len() != n {
                return Err(Error::shape("ScenePair flow", &[f.len(), 3], &[n, 3]));
            }
        }
        if let Some(o) = &gt_occlusion {
            if o.len() != n {
                return Err(Error::shape("ScenePair occlusion", &[o.len()], &[n]));
            }
            if o.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument("occlusion entries must lie in [0, 1]".into()));
            }
        }
        Ok(ScenePair {
            source,
            target,
            gt_flow,
            gt_occlusion,
        })
    }

    /// Flow and occlusion labels, with the occlusion required to be binary.
    pub fn labels(&self) -> Result<(&FlowField, &OcclusionMask)> {
        let flow = self.gt_flow.as_ref().ok_or(Error::MissingGroundTruth)?;
        let occ = self.gt_occlusion.as_ref().ok_or(Error::MissingGroundTruth)?;
        if !occ.is_binary() {
            return Err(Error::InvalidArgument("ground-truth occlusion must be binary".into()));
        }
        Ok((flow, occ))
    }

    /// The same frames with ground truth stripped.
    pub fn unlabeled(&self) -> ScenePair {
        ScenePair {
            source: self.source.clone(),
            target: self.target.clone(),
            gt_flow: None,
            gt_occlusion: None,
        }
    }
}

/// Independent generator for worker/sample `stream` under a base seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of the translate-and-carve synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPairSpec {
    /// Meters.
    pub translation_magnitude: f64,
    pub num_centers: usize,
    /// Fraction of the cloud removed around each center.
    pub removal_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        SyntheticPairSpec {
            translation_magnitude: 2.0,
            num_centers: 4,
            removal_fraction: 0.025,
            rng_seed: 0,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.translation_magnitude > 0.0 && self.translation_magnitude.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "translation magnitude {} must be positive",
                self.translation_magnitude
            )));
        }
        if !(0.0..1.0).contains(&self.removal_fraction) || self.num_centers as f64 * self.removal_fraction >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "{} centers x {} removal must stay below the whole cloud",
                self.num_centers, self.removal_fraction
            )));
        }
        Ok(())
    }

    /// Neighbors removed around each center for a cloud of `n` points.
    pub fn removal_count(&self, n: usize) -> usize {
        ((self.removal_fraction * n as f64).ceil() as usize).min(n)
    }

    pub fn with_seed(&self, rng_seed: u64) -> Self {
        SyntheticPairSpec {
            rng_seed,
            ..self.clone()
        }
    }
}

/// A synthetic pair plus the source indices carved out of the target.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub pair: ScenePair,
    /// Sorted ascending.
    pub removed: Vec<usize>,
}

/// Translates `source` by a random direction at fixed magnitude, then removes
/// the nearest neighbors of a few random centers to fabricate occlusion.
pub fn make_synthetic_pair(source: &PointCloud, spec: &SyntheticPairSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let n = source.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let t = dir.map(|d| (d * spec.translation_magnitude) as f32);
    let moved: Vec<[f32; 3]> = source
        .positions()
        .iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect();

    let mut removed = BTreeSet::new();
    if spec.num_centers > 0 {
        let centers = sample(&mut rng, n, spec.num_centers.min(n));
        let queries: Vec<[f32; 3]> = centers.iter().map(|i| moved[i]).collect();
        let nbrs = knn_search(&queries, &moved, spec.removal_count(n))?;
        removed.extend(nbrs.indices().iter().copied());
    }
    if removed.len() >= n {
        return Err(Error::InvalidArgument(
            "synthetic removal leaves no target points".into(),
        ));
    }
    let kept: Vec<usize> = (0..n).filter(|i| !removed.contains(i)).collect();
    let target = PointCloud::new(moved, source.features().to_vec(), source.feature_dim())?.select(&kept);
    let mut occ = OcclusionMask::ones(n);
    for &i in &removed {
        occ.0[i] = 0.0;
    }
    let pair = ScenePair::new(source.clone(), target, Some(FlowField(vec![t; n])), Some(occ))?;
    Ok(SyntheticPair {
        pair,
        removed: removed.into_iter().collect(),
    })
}

/// Procedural rigid-primitive scene parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub num_points: usize,
    pub max_primitives: usize,
    /// The viewing box is `[-h, h]^3`.
    pub view_half_extent: f32,
    /// Largest per-primitive translation norm, meters.
    pub motion_bound: f32,
    /// Scenes with fewer cropped points are redrawn, up to `max_attempts` times.
    pub min_occluded_fraction: f32,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_points: 256,
            max_primitives: 4,
            view_half_extent: 1.0,
            motion_bound: 0.3,
            min_occluded_fraction: 0.0,
            max_attempts: 256,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_points == 0 || self.max_primitives == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidArgument(
                "scene needs at least one point, primitive and attempt".into(),
            ));
        }
        if !(self.view_half_extent > 0.0) || !(self.motion_bound >= 0.0) || !self.motion_bound.is_finite() {
            return Err(Error::InvalidArgument(
                "scene extents must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.min_occluded_fraction) {
            return Err(Error::InvalidArgument(
                "min occluded fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Sphere { center: [f32; 3], radius: f32 },
    Cuboid { center: [f32; 3], half: [f32; 3] },
}

impl Primitive {
    fn random(rng: &mut ChaCha8Rng, h: f32) -> Self {
        let center = [0; 3].map(|_| rng.gen_range(-0.75 * h..0.75 * h));
        if rng.gen_bool(0.5) {
            Primitive::Sphere {
                center,
                radius: rng.gen_range(0.2 * h..0.45 * h),
            }
        } else {
            Primitive::Cuboid {
                center,
                half: [0; 3].map(|_| rng.gen_range(0.15 * h..0.4 * h)),
            }
        }
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f32; 3] {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d: [f32; 3] = UnitSphere.sample(rng);
                [0, 1, 2].map(|a| center[a] + radius * d[a])
            }
            Primitive::Cuboid { center, half } => {
                // Face chosen proportionally to its area.
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f32 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (a, &area) in areas.iter().enumerate() {
                    if pick < area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut p = [0.0f32; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        center[a] + sign * half[a]
                    } else {
                        center[a] + rng.gen_range(-half[a]..half[a])
                    };
                }
                p
            }
        }
    }
}

fn inside(p: &[f32; 3], h: f32) -> bool {
    p.iter().all(|v| v.abs() <= h)
}

/// One rigid-primitive scene: each primitive translates independently, points
/// leaving the viewing box vanish from the target and are labeled occluded.
pub fn gen_scene(spec: &SceneSpec, rng_seed: u64) -> Result<ScenePair> {
    spec.validate()?;
    let mut best: Option<(usize, ScenePair)> = None;
    for attempt in 0..spec.max_attempts as u64 {
        let mut rng = stream_rng(rng_seed, attempt);
        let pair = draw_scene(spec, &mut rng)?;
        let zeros = pair
            .gt_occlusion
            .as_ref()
            .map_or(0, |o| o.0.iter().filter(|&&v| v == 0.0).count());
        if zeros as f32 >= spec.min_occluded_fraction * spec.num_points as f32 {
            return Ok(pair);
        }
        if best.as_ref().is_none_or(|(z, _)| zeros > *z) {
            best = Some((zeros, pair));
        }
    }
    let (zeros, pair) = best.expect("at least one attempt");
    log::warn!(
        "scene seed {rng_seed}: occluded fraction {:.3} stays below {} after {} attempts",
        zeros as f32 / spec.num_points as f32,
        spec.min_occluded_fraction,
        spec.max_attempts
    );
    Ok(pair)
}

fn draw_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<ScenePair> {
    let h = spec.view_half_extent;
    let count = rng.gen_range(1..=spec.max_primitives);
    let prims: Vec<Primitive> = (0..count).map(|_| Primitive::random(rng, h)).collect();
    let motions: Vec<[f32; 3]> = prims
        .iter()
        .map(|_| {
            let b: [f32; 3] = UnitBall.sample(rng);
            b.map(|v| v * spec.motion_bound)
        })
        .collect();

    let mut source = Vec::with_capacity(spec.num_points);
    let mut flow = Vec::with_capacity(spec.num_points);
    while source.len() < spec.num_points {
        let k = rng.gen_range(0..count);
        let p = prims[k].sample_surface(rng);
        if inside(&p, h) {
            source.push(p);
            flow.push(motions[k]);
        }
    }
    let moved: Vec<[f32; 3]> = source
        .iter()
        .zip(&flow)
        .map(|(p, f)| [p[0] + f[0], p[1] + f[1], p[2] + f[2]])
        .collect();
    let occ: Vec<f32> = moved.iter().map(|p| if inside(p, h) { 1.0 } else { 0.0 }).collect();
    let mut target: Vec<[f32; 3]> = moved.into_iter().filter(|p| inside(p, h)).collect();
    if target.is_empty() {
        // Everything left the box; keep one stray point so the target stays a valid cloud.
        target.push([0.0; 3]);
    }
    ScenePair::new(
        PointCloud::from_positions(source)?,
        PointCloud::from_positions(target)?,
        Some(FlowField(flow)),
        Some(OcclusionMask(occ)),
    )
}

/// `scene_00042.ogf` style names, so lexical order is generation order.
pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:05}.ogf")
}

/// Pair files (`*.ogf`) of a directory in sorted order.
pub fn list_pairs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ogf") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<ScenePair>> {
    list_pairs(dir)?
        .iter()
        .map(|p| read_pair(p).map_err(|e| e.with_context(p.display().to_string())))
        .collect()
}
