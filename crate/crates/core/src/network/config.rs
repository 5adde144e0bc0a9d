use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which cost volume feeds the residual flow predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostVolumeMode {
    /// `CV_cross` alone.
    CrossOnly,
    /// `CV_self` alone.
    SelfOnly,
    /// `O * CV_cross`: occluded points get a zero volume.
    MaskedCross,
    /// `O * CV_cross + (1 - O) * CV_self`.
    #[default]
    OcclusionWeighted,
}

impl CostVolumeMode {
    pub const ALL: [CostVolumeMode; 4] = [
        CostVolumeMode::CrossOnly,
        CostVolumeMode::SelfOnly,
        CostVolumeMode::MaskedCross,
        CostVolumeMode::OcclusionWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostVolumeMode::CrossOnly => "cross_only",
            CostVolumeMode::SelfOnly => "self_only",
            CostVolumeMode::MaskedCross => "masked_cross",
            CostVolumeMode::OcclusionWeighted => "occlusion_weighted",
        }
    }
}

impl std::str::FromStr for CostVolumeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostVolumeMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cost volume mode `{s}`")))
    }
}

impl std::fmt::Display for CostVolumeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. Per-level lists are indexed finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    /// Nominal point counts per level for a cloud of `points_per_level[0]` points.
    /// Other cloud sizes are scaled by the same ratios.
    pub points_per_level: Vec<usize>,
    /// Width of the raw per-point input features (0 for xyz only).
    pub input_feature_dim: usize,
    pub feature_widths: Vec<usize>,
    pub d_cv: Vec<usize>,
    pub d_oc: usize,
    /// Warped-target neighbors per source point.
    pub k1: usize,
    /// Source self-neighbors for `CV_self` and smoothness.
    pub k2: usize,
    /// Neighbors of the point convolutions (encoder and flow predictor).
    pub k_conv: usize,
    /// Neighbors used for upsampling and warping interpolation.
    pub k_interp: usize,
    pub leaky_slope: f64,
    pub cost_volume_mode: CostVolumeMode,
}

impl Default for ModelConfig {
    /// Full-size architecture: 4 levels on 8192-point clouds.
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            points_per_level: vec![8192, 2048, 512, 128],
            input_feature_dim: 0,
            feature_widths: vec![64, 96, 192, 320],
            d_cv: vec![32, 64, 128, 256],
            d_oc: 64,
            k1: 32,
            k2: 64,
            k_conv: 16,
            k_interp: 3,
            leaky_slope: 0.1,
            cost_volume_mode: CostVolumeMode::OcclusionWeighted,
        }
    }
}

impl ModelConfig {
    /// Two-level model on 256-point clouds used by the desk-scale runs.
    pub fn desk() -> Self {
        ModelConfig {
            levels: 2,
            points_per_level: vec![256, 64],
            input_feature_dim: 0,
            feature_widths: vec![16, 32],
            d_cv: vec![16, 32],
            d_oc: 16,
            k1: 16,
            k2: 8,
            k_conv: 8,
            k_interp: 3,
            leaky_slope: 0.1,
            cost_volume_mode: CostVolumeMode::OcclusionWeighted,
        }
    }

    /// Smallest useful model: two levels on 16 points, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            levels: 2,
            points_per_level: vec![16, 4],
            input_feature_dim: 0,
            feature_widths: vec![4, 6],
            d_cv: vec![4, 6],
            d_oc: 4,
            k1: 4,
            k2: 3,
            k_conv: 3,
            k_interp: 3,
            leaky_slope: 0.1,
            cost_volume_mode: CostVolumeMode::OcclusionWeighted,
        }
    }

    /// Uniform decimation by `factor` from `n` points.
    pub fn with_points(mut self, n: usize, factor: usize) -> Self {
        self.points_per_level = (0..self.levels).map(|l| (n / factor.pow(l as u32)).max(1)).collect();
        self
    }

    /// Truncates the per-level lists, or extends them by doubling widths and
    /// quartering point counts per added level.
    pub fn with_levels(mut self, levels: usize) -> Self {
        fn fit(v: &mut Vec<usize>, levels: usize, grow: impl Fn(usize) -> usize) {
            v.truncate(levels);
            while v.len() < levels {
                let last = *v.last().unwrap_or(&1);
                v.push(grow(last));
            }
        }
        fit(&mut self.points_per_level, levels, |p| (p / 4).max(1));
        fit(&mut self.feature_widths, levels, |w| w * 2);
        fit(&mut self.d_cv, levels, |w| w * 2);
        self.levels = levels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels < 2 {
            return bad(format!("levels = {} (need >= 2)", self.levels));
        }
        for (name, len) in [
            ("points_per_level", self.points_per_level.len()),
            ("feature_widths", self.feature_widths.len()),
            ("d_cv", self.d_cv.len()),
        ] {
            if len != self.levels {
                return bad(format!("{name} has {len} entries for {} levels", self.levels));
            }
        }
        if self.points_per_level.windows(2).any(|w| w[1] >= w[0]) || self.points_per_level[self.levels - 1] == 0 {
            return bad(format!(
                "points_per_level must be strictly decreasing and positive: {:?}",
                self.points_per_level
            ));
        }
        if self.feature_widths.iter().chain(&self.d_cv).any(|&w| w == 0) || self.d_oc == 0 {
            return bad("layer widths must be positive".into());
        }
        if [self.k1, self.k2, self.k_conv, self.k_interp].contains(&0) {
            return bad("neighbor counts must be positive".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Point counts per level for a cloud with `n` points. Level 0 keeps every
    /// point; coarser levels scale the nominal counts by `n / points_per_level[0]`.
    pub fn level_counts(&self, n: usize) -> Vec<usize> {
        let base = self.points_per_level[0] as f64;
        let mut out = Vec::with_capacity(self.levels);
        out.push(n);
        for l in 1..self.levels {
            let scaled = (n as f64 * self.points_per_level[l] as f64 / base).round() as usize;
            let prev = out[l - 1];
            out.push(scaled.clamp(1, prev));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_architecture() {
        let c = ModelConfig::default();
        assert_eq!(c.d_cv, vec![32, 64, 128, 256]);
        assert_eq!(c.feature_widths, vec![64, 96, 192, 320]);
        assert_eq!((c.d_oc, c.k1, c.k2), (64, 32, 64));
        assert_eq!(c.cost_volume_mode, CostVolumeMode::OcclusionWeighted);
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn level_counts_scale_with_cloud_size() {
        let c = ModelConfig::desk();
        assert_eq!(c.level_counts(256), vec![256, 64]);
        assert_eq!(c.level_counts(230), vec![230, 58]);
        assert_eq!(c.level_counts(1), vec![1, 1]);
    }

    #[test]
    fn level_count_override() {
        let c = ModelConfig::desk().with_levels(3);
        assert_eq!(c.points_per_level, vec![256, 64, 16]);
        assert_eq!(c.feature_widths, vec![16, 32, 64]);
        c.validate().unwrap();
        let c = ModelConfig::default().with_levels(2);
        assert_eq!(c.d_cv, vec![32, 64]);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ModelConfig::desk();
        c.levels = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.points_per_level = vec![64, 64];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.d_cv.push(8);
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in CostVolumeMode::ALL {
            assert_eq!(m.name().parse::<CostVolumeMode>().unwrap(), m);
        }
        assert!("cv".parse::<CostVolumeMode>().is_err());
    }
}
