//! Scene-flow and occlusion metrics, report emission, and brute-force oracles.

pub mod oracle;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, OcclusionMask};

/// Denominator floor for relative error, meters.
pub const REL_DENOM_FLOOR: f64 = 1e-4;

/// Points whose threshold metrics are averaged.
pub const THRESHOLD_POPULATION: &str = "non_occluded";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe_full: f64,
    pub epe: f64,
    pub acc_05: f64,
    pub acc_10: f64,
    pub outliers: f64,
    pub occ_accuracy: Option<f64>,
    pub sample_count: usize,
    pub threshold_population: String,
}

/// Per-sample flow metrics. Every point enters `epe_full`; `epe`, the accuracies
/// and the outlier rate only use points labeled non-occluded.
pub fn flow_metrics(pred: &FlowField, gt: &FlowField, gt_occ: &OcclusionMask) -> Result<MetricsReport> {
    if pred.len() != gt.len() || gt.len() != gt_occ.len() {
        return Err(Error::shape("flow_metrics", &[pred.len(), gt.len()], &[gt_occ.len()]));
    }
    if !gt_occ.is_binary() {
        return Err(Error::InvalidArgument("ground-truth occlusion must be binary".into()));
    }
    let n = gt.len();
    let (mut full, mut vis, mut a05, mut a10, mut out, mut count) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        let e = norm(sub(gt.0[i], pred.0[i]));
        full += e;
        if gt_occ.0[i] != 1.0 {
            continue;
        }
        let r = e / norm(gt.0[i].map(f64::from)).max(REL_DENOM_FLOOR);
        vis += e;
        count += 1;
        a05 += usize::from(e < 0.05 || r < 0.05);
        a10 += usize::from(e < 0.1 || r < 0.1);
        out += usize::from(e > 0.3 || r > 0.1);
    }
    if count == 0 {
        return Err(Error::UndefinedEpe);
    }
    let c = count as f64;
    Ok(MetricsReport {
        epe_full: full / n as f64,
        epe: vis / c,
        acc_05: a05 as f64 / c,
        acc_10: a10 as f64 / c,
        outliers: out as f64 / c,
        occ_accuracy: None,
        sample_count: 1,
        threshold_population: THRESHOLD_POPULATION.into(),
    })
}

fn sub(a: [f32; 3], b: [f32; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] as f64 - b[k] as f64)
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Fraction of points whose thresholded prediction (`>= 0.5` means visible) matches the label.
pub fn occlusion_accuracy(pred: &OcclusionMask, gt: &OcclusionMask) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("occlusion_accuracy", &[pred.len()], &[gt.len()]));
    }
    let hits = pred
        .0
        .iter()
        .zip(&gt.0)
        .filter(|(&p, &g)| (p >= 0.5) == (g == 1.0))
        .count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Full per-sample report including occlusion accuracy.
pub fn evaluate_sample(
    pred_flow: &FlowField,
    pred_occ: &OcclusionMask,
    gt_flow: &FlowField,
    gt_occ: &OcclusionMask,
) -> Result<MetricsReport> {
    let mut report = flow_metrics(pred_flow, gt_flow, gt_occ)?;
    report.occ_accuracy = Some(occlusion_accuracy(pred_occ, gt_occ)?);
    Ok(report)
}

/// Plain mean over per-sample reports.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let occ = if reports.iter().all(|r| r.occ_accuracy.is_some()) {
        Some(reports.iter().filter_map(|r| r.occ_accuracy).sum::<f64>() / n)
    } else {
        None
    };
    Ok(MetricsReport {
        epe_full: mean(|r| r.epe_full),
        epe: mean(|r| r.epe),
        acc_05: mean(|r| r.acc_05),
        acc_10: mean(|r| r.acc_10),
        outliers: mean(|r| r.outliers),
        occ_accuracy: occ,
        sample_count: reports.iter().map(|r| r.sample_count).sum(),
        threshold_population: THRESHOLD_POPULATION.into(),
    })
}

impl MetricsReport {
    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epe_full = {:.6}", self.epe_full);
        let _ = writeln!(s, "epe = {:.6}", self.epe);
        let _ = writeln!(s, "acc_05 = {:.6}", self.acc_05);
        let _ = writeln!(s, "acc_10 = {:.6}", self.acc_10);
        let _ = writeln!(s, "outliers = {:.6}", self.outliers);
        match self.occ_accuracy {
            Some(a) => {
                let _ = writeln!(s, "occ_accuracy = {a:.6}");
            }
            None => s.push_str("occ_accuracy = n/a\n"),
        }
        let _ = writeln!(s, "sample_count = {}", self.sample_count);
        let _ = writeln!(s, "threshold_population = {}", self.threshold_population);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
