use std::fs;
use std::path::Path;

use ogflow::datagen::{SceneSpec, SyntheticPairSpec};
use ogflow::network::{CostVolumeMode, ModelConfig};
use ogflow::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::cli::Overrides;
use crate::Failure;

/// Everything a subcommand reads: defaults, then the config file, then flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticPairSpec,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            synthetic: SyntheticPairSpec::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn resolve(flags: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match &flags.config {
            Some(path) => Self::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(flags);
        cfg.model.validate().map_err(Failure::usage)?;
        cfg.train.validate().map_err(Failure::usage)?;
        cfg.synthetic.validate().map_err(Failure::usage)?;
        cfg.scene.validate().map_err(Failure::usage)?;
        Ok(cfg)
    }

    fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, f: &Overrides) {
        if let Some(seed) = f.seed {
            self.seed = seed;
            self.train.rng_seed = seed;
            self.synthetic.rng_seed = seed;
        }
        self.deterministic |= f.deterministic;
        if let Some(levels) = f.levels {
            let n = self.model.points_per_level[0];
            self.model = self.model.clone().with_levels(levels).with_points(n, 4);
        }
        if let Some(points) = f.points {
            self.scene.num_points = points;
            self.model = self.model.clone().with_points(points, 4);
        }
        set(&mut self.model.k1, f.k1);
        set(&mut self.model.k2, f.k2);
        set(&mut self.model.cost_volume_mode, f.cost_volume_mode);
        set(&mut self.train.epochs, f.epochs);
        set(&mut self.train.batch_size, f.batch_size);
        set(&mut self.train.lr_initial, f.lr);
        set(&mut self.train.lambda_f, f.lambda_f);
        set(&mut self.train.lambda_oc, f.lambda_oc);
        set(&mut self.train.lambda_reg_start, f.lambda_reg);
        set(&mut self.synthetic.translation_magnitude, f.translation_magnitude);
        set(&mut self.synthetic.num_centers, f.centers);
        set(&mut self.synthetic.removal_fraction, f.removal_fraction);
        set(&mut self.scene.motion_bound, f.motion_bound);
        set(&mut self.scene.min_occluded_fraction, f.min_occluded);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Keeps clap's value parser and the library's mode names in one place.
pub fn parse_mode(s: &str) -> Result<CostVolumeMode, String> {
    s.parse().map_err(|e: ogflow::Error| e.to_string())
}
