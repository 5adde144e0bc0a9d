use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ogflow::network::CostVolumeMode;

use crate::config::parse_mode;

/// Occlusion-guided scene flow: data generation, training, evaluation and checks.
#[derive(Debug, Parser)]
#[command(name = "ogflow", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural (or synthetic-occlusion) pairs as OGF1 files.
    Gen {
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        /// Translate-and-carve pairs built from each procedural source frame.
        #[arg(long)]
        synthetic: bool,
    },
    /// Train from a directory of pairs and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Labeled pairs evaluated after every epoch.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Train without labels from synthetic pairs and the occlusion-aware Chamfer loss.
        #[arg(long)]
        self_supervised: bool,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, or a directory of prediction files, against labeled pairs.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// OGF1 files named like the data files, holding predicted flow and occlusion.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Predict flow and occlusion for one pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pair: PathBuf,
    },
    /// Finite-difference check of every differentiable primitive and the end-to-end loss.
    Gradcheck,
    /// Oracle equivalence and invariant checks.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        trials: u64,
    },
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single worker, ordered execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    /// Points per cloud (scene size and finest pyramid level).
    #[arg(long, global = true)]
    pub points: Option<usize>,
    #[arg(long, global = true)]
    pub k1: Option<usize>,
    #[arg(long, global = true)]
    pub k2: Option<usize>,
    /// cross_only, self_only, masked_cross or occlusion_weighted.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub cost_volume_mode: Option<CostVolumeMode>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_f: Option<f64>,
    #[arg(long, global = true)]
    pub lambda_oc: Option<f64>,
    /// Smoothness weight before its ramp-down.
    #[arg(long, global = true)]
    pub lambda_reg: Option<f64>,
    #[arg(long, global = true)]
    pub translation_magnitude: Option<f64>,
    #[arg(long, global = true)]
    pub centers: Option<usize>,
    #[arg(long, global = true)]
    pub removal_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub motion_bound: Option<f32>,
    #[arg(long, global = true)]
    pub min_occluded: Option<f32>,
    /// Output directory (gen, train, eval) or file (infer).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}
