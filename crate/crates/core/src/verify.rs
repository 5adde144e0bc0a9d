//! Finite-difference and oracle-equivalence suites shared by the command line
//! and the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{gen_scene, make_synthetic_pair, SceneSpec, SyntheticPairSpec};
use crate::diffmath::gradcheck::{check, project, GradCheckReport, Input, DEFAULT_STEP};
use crate::diffmath::{Graph, ValueId};
use crate::error::Result;
use crate::evalkit::{flow_metrics, oracle};
use crate::geometry::{farthest_point_sampling, knn_search, FlowField, OcclusionMask, PointCloud};
use crate::losses::{nonoccluded_chamfer, supervised_loss};
use crate::network::layers::occlusion_weighted_cv;
use crate::network::{model_forward, BoundParams, CostVolumeMode, ModelConfig, ModelParams};
use crate::trainer::chamfer_grads;

/// Largest relative error tolerated by the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_grad(name: &str, r: Result<GradCheckReport>) -> Self {
        match r {
            Ok(r) => CheckOutcome::new(
                name,
                r.max_rel_error < GRAD_TOLERANCE,
                format!("max relative error {:.3e} over {} elements", r.max_rel_error, r.checked),
            ),
            Err(e) => CheckOutcome::new(name, false, e.to_string()),
        }
    }
}

type GradFn = fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>;
type Builder = fn(&mut ChaCha8Rng) -> Vec<Input>;

fn rand_input(r: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    Input::random(r, shape, 1.0)
}

fn positive_input(r: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    Input::new((0..n).map(|_| r.gen_range(0.5..2.0)).collect(), shape)
}

/// Primitive cases: name, input builder, scalar function.
fn primitive_cases() -> Vec<(&'static str, Builder, GradFn)> {
    vec![
        (
            "linear",
            |r| vec![rand_input(r, &[5, 4]), rand_input(r, &[4, 3]), rand_input(r, &[3])],
            |g, x| {
                let y = g.linear(x[0], x[1], x[2])?;
                project(g, y, 1)
            },
        ),
        (
            "leaky_relu",
            |r| vec![rand_input(r, &[7, 3])],
            |g, x| {
                let y = g.leaky_relu(x[0], 0.1);
                project(g, y, 2)
            },
        ),
        (
            "sigmoid",
            |r| vec![rand_input(r, &[6, 2])],
            |g, x| {
                let y = g.sigmoid(x[0]);
                project(g, y, 3)
            },
        ),
        (
            "concat",
            |r| vec![rand_input(r, &[4, 2]), rand_input(r, &[4, 3])],
            |g, x| {
                let y = g.concat(x)?;
                project(g, y, 4)
            },
        ),
        (
            "gather",
            |r| vec![rand_input(r, &[5, 3])],
            |g, x| {
                let y = g.gather(x[0], &[0, 4, 4, 1, 2, 0], 2)?;
                project(g, y, 5)
            },
        ),
        (
            "max_over_axis",
            |r| vec![rand_input(r, &[4, 5, 3])],
            |g, x| {
                let y = g.max_over_axis(x[0])?;
                project(g, y, 6)
            },
        ),
        (
            "add_sub_mul",
            |r| vec![rand_input(r, &[3, 3]), rand_input(r, &[3, 3])],
            |g, x| {
                let a = g.add(x[0], x[1])?;
                let s = g.sub(a, x[1])?;
                let m = g.mul(s, x[1])?;
                project(g, m, 7)
            },
        ),
        (
            "div",
            |r| vec![rand_input(r, &[6]), positive_input(r, &[6])],
            |g, x| {
                let y = g.div(x[0], x[1], 1e-8)?;
                project(g, y, 8)
            },
        ),
        (
            "affine_scale",
            |r| vec![rand_input(r, &[5])],
            |g, x| {
                let a = g.affine(x[0], 1.5, -0.5);
                let y = g.scale(a, -2.0);
                project(g, y, 9)
            },
        ),
        (
            "scale_rows",
            |r| vec![rand_input(r, &[4, 3]), rand_input(r, &[4, 1])],
            |g, x| {
                let y = g.scale_rows(x[0], x[1])?;
                project(g, y, 10)
            },
        ),
        (
            "sum_mean",
            |r| vec![rand_input(r, &[3, 4])],
            |g, x| {
                let m = g.mean(x[0]);
                let s = g.sum(x[0]);
                let ms = g.mul(m, s)?;
                Ok(ms)
            },
        ),
        (
            "row_norm",
            |r| vec![rand_input(r, &[6, 3])],
            |g, x| {
                let y = g.row_norm(x[0])?;
                project(g, y, 11)
            },
        ),
        (
            "abs",
            |r| vec![rand_input(r, &[8])],
            |g, x| {
                let y = g.abs(x[0]);
                project(g, y, 12)
            },
        ),
        (
            "weighted_mean",
            |r| vec![rand_input(r, &[3, 4, 2]), positive_input(r, &[3, 4])],
            |g, x| {
                let y = g.weighted_mean(x[0], x[1])?;
                project(g, y, 13)
            },
        ),
        (
            "reshape",
            |r| vec![rand_input(r, &[2, 6])],
            |g, x| {
                let y = g.reshape(x[0], &[3, 4])?;
                project(g, y, 14)
            },
        ),
    ]
}

/// Random 16-point pair with ground-truth flow for the end-to-end check.
pub fn tiny_problem(seed: u64) -> Result<(PointCloud, PointCloud, FlowField)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = || PointCloud::from_positions((0..16).map(|_| [0; 3].map(|_| r.gen_range(-1.0f32..1.0))).collect());
    let (s, t) = (cloud()?, cloud()?);
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let gt = FlowField((0..16).map(|_| [0; 3].map(|_| r.gen_range(-0.3f32..0.3))).collect());
    Ok((s, t, gt))
}

/// Model parameters as gradcheck inputs; buffers that start at zero are
/// randomized so no unit sits exactly on an activation kink.
pub fn perturbed_inputs(params: &ModelParams<f64>, seed: u64) -> (Vec<String>, Vec<Input>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    params
        .iter()
        .map(|(name, t)| {
            let mut data = t.data.clone();
            if data.iter().all(|&v| v == 0.0) {
                for v in &mut data {
                    *v = r.gen_range(0.05..0.3) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                }
            }
            (name.clone(), Input::new(data, &t.shape))
        })
        .unzip()
}

/// End-to-end supervised loss gradient on a 2-level, 16-point model.
pub fn end_to_end_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, seed)?;
    let (s, t, gt) = tiny_problem(seed)?;
    let (names, inputs) = perturbed_inputs(&params, seed);
    check(&inputs, DEFAULT_STEP, |g, ids| {
        let bound: BoundParams = names.iter().cloned().zip(ids.iter().copied()).collect();
        let pass = model_forward(g, &bound, &s, &t, &cfg, 0)?;
        supervised_loss(g, &pass, &gt, &[0.02, 0.04])
    })
}

/// Every differentiable primitive plus the end-to-end loss.
pub fn gradcheck_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (i, (name, build, f)) in primitive_cases().into_iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let inputs = build(&mut r);
        out.push(CheckOutcome::from_grad(name, check(&inputs, DEFAULT_STEP, f)));
    }
    out.push(CheckOutcome::from_grad(
        "end_to_end_flow_loss",
        end_to_end_gradcheck(seed),
    ));
    out
}

fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n).map(|_| [0; 3].map(|_| r.gen_range(-1.0f32..1.0))).collect()
}

/// Oracle equivalence and invariant checks over `trials` random seeds.
pub fn selfcheck_suite(seed: u64, trials: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut summary = |name: &str, failures: Vec<String>| {
        let detail = match failures.first() {
            None => format!("{trials} trials agree"),
            Some(f) => format!("{} of {trials} trials disagree; first: {f}", failures.len()),
        };
        out.push(CheckOutcome::new(name, failures.is_empty(), detail));
    };

    let mut fails = Vec::new();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let (nq, nr) = (r.gen_range(1..40), r.gen_range(1..40));
        let k = r.gen_range(1..=nr);
        let (q, p) = (random_points(&mut r, nq), random_points(&mut r, nr));
        match knn_search(&q, &p, k) {
            Ok(m) if (0..nq).all(|i| m.row(i) == oracle::knn(&q[i..=i], &p, k)[0].as_slice()) => {}
            other => fails.push(format!("seed {t}: {:?}", other.err())),
        }
    }
    summary("knn_vs_oracle", fails);

    let mut fails = Vec::new();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let n = r.gen_range(1..=64);
        let m = r.gen_range(1..=n);
        let start = r.gen_range(0..n);
        let p = random_points(&mut r, n);
        match farthest_point_sampling(&p, m, start) {
            Ok(picks) if picks == oracle::fps(&p, m, start) => {}
            other => fails.push(format!("seed {t}: {other:?}")),
        }
    }
    summary("fps_vs_oracle", fails);

    let mut fails = Vec::new();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let (ns, nt) = (r.gen_range(1..40), r.gen_range(1..40));
        let a: Vec<[f64; 3]> = random_points(&mut r, ns).iter().map(|p| p.map(f64::from)).collect();
        let b: Vec<[f64; 3]> = random_points(&mut r, nt).iter().map(|p| p.map(f64::from)).collect();
        let of: Vec<f64> = (0..ns).map(|_| r.gen_range(0.05..1.0)).collect();
        let ob: Vec<f64> = (0..nt).map(|_| r.gen_range(0.05..1.0)).collect();
        let got = (|| -> Result<f64> {
            let mut g = Graph::<f64>::new();
            let ws = g.constant(a.iter().flatten().copied().collect(), &[ns, 3])?;
            let ofv = g.constant(of.clone(), &[ns, 1])?;
            let obv = g.constant(ob.clone(), &[nt, 1])?;
            let l = nonoccluded_chamfer(&mut g, &[ws], &[b.clone()], &[ofv], &[obv], &[1.0])?;
            Ok(g.scalar(l))
        })();
        let want = oracle::weighted_chamfer(&a, &b, &of, &ob);
        match got {
            Ok(v) if (v - want).abs() <= 1e-5 => {}
            other => fails.push(format!("seed {t}: {other:?} vs {want}")),
        }
    }
    summary("chamfer_vs_oracle", fails);

    let mut fails = Vec::new();
    for t in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t));
        let n = r.gen_range(1..60);
        let gt: Vec<[f32; 3]> = (0..n).map(|_| [0; 3].map(|_| r.gen_range(-0.5f32..0.5))).collect();
        let pred: Vec<[f32; 3]> = gt
            .iter()
            .map(|g| g.map(|v| v + r.gen_range(-0.4f32..0.4) * r.gen_range(0.0f32..1.0)))
            .collect();
        let mut occ: Vec<f32> = (0..n).map(|_| if r.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        occ[0] = 1.0;
        let want = oracle::flow_metrics(&pred, &gt, &occ);
        match flow_metrics(&FlowField(pred), &FlowField(gt), &OcclusionMask(occ)) {
            Ok(m) => {
                let got = [m.epe_full, m.epe, m.acc_05, m.acc_10, m.outliers];
                let want = [want.0, want.1, want.2, want.3, want.4];
                if got.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-6) {
                    fails.push(format!("seed {t}: {got:?} vs {want:?}"));
                }
            }
            Err(e) => fails.push(format!("seed {t}: {e}")),
        }
    }
    summary("metrics_vs_oracle", fails);

    let mut fails = Vec::new();
    for t in 0..trials {
        if let Err(e) = blend_identities(seed.wrapping_add(t)) {
            fails.push(format!("seed {t}: {e}"));
        }
    }
    summary("blend_identities", fails);

    let mut fails = Vec::new();
    for t in 0..trials.min(20) {
        match chamfer_occlusion_grad_is_zero(seed.wrapping_add(t)) {
            Ok(true) => {}
            other => fails.push(format!("seed {t}: {other:?}")),
        }
    }
    summary("chamfer_stop_gradient", fails);

    let mut fails = Vec::new();
    for t in 0..trials {
        if let Err(e) = synthetic_bookkeeping(seed.wrapping_add(t)) {
            fails.push(format!("seed {t}: {e}"));
        }
    }
    summary("synthetic_bookkeeping", fails);
    out
}

/// The blended cost volume equals cross at O = 1, self at O = 0 (bit for bit)
/// and their mean at O = 0.5.
pub fn blend_identities(seed: u64) -> std::result::Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (r.gen_range(1..20), r.gen_range(1..10));
    let mut g = Graph::<f32>::new();
    let mut rand = |g: &mut Graph<f32>, shape: &[usize]| {
        let len = shape.iter().product();
        g.constant((0..len).map(|_| r.gen_range(-2.0..2.0)).collect(), shape)
            .map_err(|e| e.to_string())
    };
    let cross = rand(&mut g, &[n, d])?;
    let own = rand(&mut g, &[n, d])?;
    let mode = CostVolumeMode::OcclusionWeighted;
    let bits = |g: &Graph<f32>, id| g.data(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (o, want) in [(1.0f32, cross), (0.0, own)] {
        let occ = g.constant(vec![o; n], &[n, 1]).map_err(|e| e.to_string())?;
        let out = occlusion_weighted_cv(&mut g, cross, own, occ, mode).map_err(|e| e.to_string())?;
        if bits(&g, out) != bits(&g, want) {
            return Err(format!("O = {o} is not bit-identical"));
        }
    }
    let half = g.constant(vec![0.5; n], &[n, 1]).map_err(|e| e.to_string())?;
    let out = occlusion_weighted_cv(&mut g, cross, own, half, mode).map_err(|e| e.to_string())?;
    let close = g
        .data(out)
        .iter()
        .zip(g.data(cross).iter().zip(g.data(own)))
        .all(|(v, (a, b))| (v - 0.5 * (a + b)).abs() <= 1e-6);
    if close {
        Ok(())
    } else {
        Err("O = 0.5 differs from the mean".into())
    }
}

/// Whether the Chamfer term's gradient on every occlusion parameter is exactly zero.
pub fn chamfer_occlusion_grad_is_zero(seed: u64) -> Result<bool> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, seed)?;
    let spec = SceneSpec {
        num_points: 16,
        ..Default::default()
    };
    let pair = gen_scene(&spec, seed)?.unlabeled();
    let grads = chamfer_grads(
        &params,
        &cfg,
        &pair,
        &SyntheticPairSpec::default().with_seed(seed),
        &[0.02, 0.04],
    )?;
    let zero = grads
        .iter()
        .filter(|(name, _)| name.starts_with("occ"))
        .all(|(_, t)| t.data.iter().all(|&v| v == 0.0));
    Ok(zero)
}

/// Sizes, zero set and translation norm of one default synthetic pair.
pub fn synthetic_bookkeeping(seed: u64) -> std::result::Result<(), String> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(50..300);
    let cloud = PointCloud::from_positions(random_points(&mut r, n)).map_err(|e| e.to_string())?;
    let out = make_synthetic_pair(&cloud, &SyntheticPairSpec::default().with_seed(seed)).map_err(|e| e.to_string())?;
    let occ = out.pair.gt_occlusion.as_ref().ok_or("missing occlusion")?;
    let flow = out.pair.gt_flow.as_ref().ok_or("missing flow")?;
    let zeros: Vec<usize> = (0..n).filter(|&i| occ.0[i] == 0.0).collect();
    if out.pair.target.len() + zeros.len() != n {
        return Err(format!("{} + {} != {n}", out.pair.target.len(), zeros.len()));
    }
    if zeros != out.removed {
        return Err("zero set differs from removed set".into());
    }
    for f in &flow.0 {
        let norm = f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 2.0).abs() > 1e-6 {
            return Err(format!("translation norm {norm}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for c in gradcheck_suite(0).into_iter().chain(selfcheck_suite(0, 10)) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
