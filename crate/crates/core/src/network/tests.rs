use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;
use crate::diffmath::gradcheck::{check, project, Input, DEFAULT_STEP};
use crate::diffmath::Graph;
use crate::geometry::FlowField;
use crate::geometry::{IndexMatrix, PointCloud};
use crate::losses::supervised_loss;

pub(crate) fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> PointCloud {
    PointCloud::from_positions(
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                ]
            })
            .collect(),
    )
    .unwrap()
}

fn shifted(cloud: &PointCloud, d: [f32; 3]) -> PointCloud {
    PointCloud::from_positions(
        cloud
            .positions()
            .iter()
            .map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            .collect(),
    )
    .unwrap()
}

fn zero_layer<T: crate::Real>(params: &mut ModelParams<T>, layer: &str) {
    for suffix in ["w", "b"] {
        let t = params.get_mut(&format!("{layer}.{suffix}")).unwrap();
        t.data.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Biases (and the last occlusion layer) start at zero, which puts every
/// self-neighbor exactly on the leaky-relu kink; finite differences need
/// them moved off it.
fn params_as_inputs(params: &ModelParams<f64>) -> (Vec<String>, Vec<Input>) {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    params
        .iter()
        .map(|(k, t)| {
            let mut data = t.data.clone();
            if data.iter().all(|&v| v == 0.0) {
                data.iter_mut()
                    .for_each(|v| *v = r.gen_range(0.05..0.3) * if r.gen() { 1.0 } else { -1.0 });
            }
            (k.clone(), Input::new(data, &t.shape))
        })
        .unzip()
}

fn rebind(names: &[String], ids: &[crate::diffmath::ValueId]) -> BoundParams {
    names.iter().cloned().zip(ids.iter().copied()).collect()
}

#[test]
fn encoder_shape_contract() {
    let mut cfg = ModelConfig::tiny();
    cfg.points_per_level = vec![32, 8];
    cfg.feature_widths = vec![4, 8];
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let s = random_cloud(&mut r, 32, 1.0);
    let t = random_cloud(&mut r, 32, 1.0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let pyr = encode_pyramid(&mut g, &s, &t, &bound, &cfg, 0).unwrap();
    assert_eq!(g.shape(pyr.source.features[0]), &[32, 4]);
    assert_eq!(g.shape(pyr.source.features[1]), &[8, 8]);
    assert_eq!(pyr.source.positions[1].len(), 8);
    assert_eq!(pyr.source.full_index[0], (0..32).collect::<Vec<_>>());

    let same = encode_pyramid(&mut g, &s, &s, &bound, &cfg, 0).unwrap();
    for l in 0..2 {
        assert_eq!(g.data(same.source.features[l]), g.data(same.target.features[l]));
    }
}

#[test]
fn encoder_is_translation_invariant() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let s = random_cloud(&mut r, 16, 1.0);
    let moved = shifted(&s, [0.5, -0.25, 0.125]);
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let a = encode_pyramid(&mut g, &s, &s, &bound, &cfg, 0).unwrap();
    let b = encode_pyramid(&mut g, &moved, &moved, &bound, &cfg, 0).unwrap();
    for l in 0..2 {
        for (x, y) in g.data(a.source.features[l]).iter().zip(g.data(b.source.features[l])) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn encoder_gradcheck_two_levels() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let s = random_cloud(&mut r, 16, 1.0);
    let t = random_cloud(&mut r, 16, 1.0);
    let (names, inputs) = params_as_inputs(&params);
    let enc: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("enc"))
        .map(|(i, _)| i)
        .collect();
    let report = check(&inputs, DEFAULT_STEP, |g, ids| {
        let bound = rebind(&names, ids);
        let pyr = encode_pyramid(g, &s, &t, &bound, &cfg, 0)?;
        let f = g.concat(&[pyr.target.features[1]])?;
        let a = project(g, pyr.source.features[1], 9)?;
        let b = project(g, f, 10)?;
        g.add(a, b)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert!(!enc.is_empty());
}

#[test]
fn point_conv_self_neighbor_and_invariance() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let pos: Vec<[f64; 3]> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    // k = 1 on the same cloud: each point sees only itself, so the input is (0, 0, 0).
    let out = point_conv(&mut g, &bound, "enc0", &pos, None, &pos, 1, 0.1).unwrap();
    let b = params.get("enc0.b").unwrap();
    for row in g.data(out).chunks(4) {
        for (v, bias) in row.iter().zip(&b.data) {
            assert_eq!(*v, bias.max(0.1 * bias));
        }
    }
    let moved: Vec<[f64; 3]> = pos.iter().map(|p| [p[0] + 3.0, p[1] - 1.0, p[2] + 0.5]).collect();
    let a = point_conv(&mut g, &bound, "enc0", &pos, None, &pos, 2, 0.1).unwrap();
    let b = point_conv(&mut g, &bound, "enc0", &moved, None, &moved, 2, 0.1).unwrap();
    for (x, y) in g.data(a).iter().zip(g.data(b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn point_conv_gradcheck() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let pos: Vec<[f64; 3]> = (0..6).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let inputs = vec![
        Input::random(&mut r, &[6, 2], 1.0),
        Input::random(&mut r, &[5, 4], 1.0),
        Input::random(&mut r, &[4], 0.5),
    ];
    let report = check(&inputs, DEFAULT_STEP, |g, ids| {
        let bound: BoundParams = [("pc.w".to_string(), ids[1]), ("pc.b".to_string(), ids[2])].into();
        let out = point_conv(g, &bound, "pc", &pos, Some(ids[0]), &pos[..3], 3, 0.1)?;
        project(g, out, 3)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

struct LevelFixture {
    g: Graph<f64>,
    bound: BoundParams,
    grouped: Grouped,
    params: ModelParams<f64>,
}

fn level_fixture(params: Option<ModelParams<f64>>) -> LevelFixture {
    let cfg = ModelConfig::tiny();
    let params = params.unwrap_or_else(|| ModelParams::<f64>::init(&cfg, 11).unwrap());
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let s_pos: Vec<[f64; 3]> = (0..6).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let t: Vec<f64> = (0..18).map(|_| r.gen()).collect();
    let tw = g.constant(t, &[6, 3]).unwrap();
    let sf = g
        .constant((0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), &[6, 4])
        .unwrap();
    let tf = g
        .constant((0..24).map(|_| r.gen_range(-1.0..1.0)).collect(), &[6, 4])
        .unwrap();
    let grouped = group_neighbors(&mut g, &s_pos, sf, tw, tf, 4).unwrap();
    LevelFixture {
        g,
        bound,
        grouped,
        params,
    }
}

#[test]
fn matching_cost_zero_weights_and_determinism() {
    let cfg = ModelConfig::tiny();
    let mut p = ModelParams::<f64>::init(&cfg, 13).unwrap();
    zero_layer(&mut p, "cost0.h0");
    zero_layer(&mut p, "cost0.h1");
    let mut fx = level_fixture(Some(p));
    let cost = matching_cost(&mut fx.g, &fx.bound, 0, &fx.grouped, 0.1).unwrap();
    assert_eq!(fx.g.shape(cost), &[6, 4, 4]);
    assert!(fx.g.data(cost).iter().all(|&v| v == 0.0));

    let mut fx = level_fixture(None);
    let a = matching_cost(&mut fx.g, &fx.bound, 0, &fx.grouped, 0.1).unwrap();
    let b = matching_cost(&mut fx.g, &fx.bound, 0, &fx.grouped, 0.1).unwrap();
    assert_eq!(fx.g.data(a), fx.g.data(b));
}

#[test]
fn matching_cost_and_occlusion_gradcheck() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, 14).unwrap();
    let (names, inputs) = params_as_inputs(&params);
    let mut r = ChaCha8Rng::seed_from_u64(15);
    let s_pos: Vec<[f64; 3]> = (0..6).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let t: Vec<f64> = (0..18).map(|_| r.gen()).collect();
    let sf: Vec<f64> = (0..24).map(|_| r.gen_range(-1.0..1.0)).collect();
    let tf: Vec<f64> = (0..24).map(|_| r.gen_range(-1.0..1.0)).collect();
    let report = check(&inputs, DEFAULT_STEP, |g, ids| {
        let bound = rebind(&names, ids);
        let tw = g.constant(t.clone(), &[6, 3])?;
        let sfv = g.constant(sf.clone(), &[6, 4])?;
        let tfv = g.constant(tf.clone(), &[6, 4])?;
        let grouped = group_neighbors(g, &s_pos, sfv, tw, tfv, 4)?;
        let cost = matching_cost(g, &bound, 0, &grouped, 0.1)?;
        let prior = g.constant(vec![0.7; 6], &[6, 1])?;
        let occ = predict_occlusion(g, &bound, 0, &grouped, prior, 0.1)?;
        let a = project(g, cost, 1)?;
        let b = project(g, occ, 2)?;
        g.add(a, b)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn cost_volume_cross_examples() {
    let mut g = Graph::<f64>::new();
    let cost = g.constant(vec![3.0, 7.0, 5.0], &[1, 3, 1]).unwrap();
    let cv = cost_volume_cross(&mut g, cost).unwrap();
    assert_eq!(g.data(cv), &[7.0]);
    let single = g.constant(vec![1.0, -2.0], &[2, 1, 1]).unwrap();
    let cv = cost_volume_cross(&mut g, single).unwrap();
    assert_eq!(g.data(cv), &[1.0, -2.0]);
}

#[test]
fn cost_volume_self_examples() {
    let mut g = Graph::<f64>::new();
    let cross = g.constant(vec![1.0, 5.0, 4.0, 2.0], &[2, 2]).unwrap();
    let own = IndexMatrix::from_rows(&[vec![0], vec![1]]).unwrap();
    let cv = cost_volume_self(&mut g, cross, &own).unwrap();
    assert_eq!(g.data(cv), g.data(cross));

    let mutual = IndexMatrix::from_rows(&[vec![0, 1], vec![1, 0]]).unwrap();
    let cv = cost_volume_self(&mut g, cross, &mutual).unwrap();
    assert_eq!(g.data(cv), &[4.0, 5.0, 4.0, 5.0]);

    let same = g.constant(vec![2.0, 3.0, 2.0, 3.0], &[2, 2]).unwrap();
    let cv = cost_volume_self(&mut g, same, &mutual).unwrap();
    assert_eq!(g.data(cv), g.data(same));

    let bad = IndexMatrix::from_rows(&[vec![0, 2], vec![1, 0]]).unwrap();
    assert!(cost_volume_self(&mut g, cross, &bad).is_err());
}

#[test]
fn blend_identities() {
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let mut g = Graph::<f32>::new();
    let cross = g
        .constant((0..12).map(|_| r.gen_range(-1.0..1.0)).collect(), &[4, 3])
        .unwrap();
    let selfv = g
        .constant((0..12).map(|_| r.gen_range(-1.0..1.0)).collect(), &[4, 3])
        .unwrap();
    let ones = g.constant(vec![1.0; 4], &[4, 1]).unwrap();
    let zeros = g.constant(vec![0.0; 4], &[4, 1]).unwrap();
    let half = g.constant(vec![0.5; 4], &[4, 1]).unwrap();
    let w = CostVolumeMode::OcclusionWeighted;
    let a = occlusion_weighted_cv(&mut g, cross, selfv, ones, w).unwrap();
    let bits = |g: &Graph<f32>, id| g.data(id).iter().map(|v: &f32| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&g, a), bits(&g, cross));
    let b = occlusion_weighted_cv(&mut g, cross, selfv, zeros, w).unwrap();
    assert_eq!(bits(&g, b), bits(&g, selfv));
    let m = occlusion_weighted_cv(&mut g, cross, selfv, half, w).unwrap();
    for ((v, x), y) in g.data(m).iter().zip(g.data(cross)).zip(g.data(selfv)) {
        assert!((v - 0.5 * (x + y)).abs() < 1e-6);
    }
    let co = occlusion_weighted_cv(&mut g, cross, selfv, half, CostVolumeMode::CrossOnly).unwrap();
    assert_eq!(co, cross);
    let masked = occlusion_weighted_cv(&mut g, cross, selfv, zeros, CostVolumeMode::MaskedCross).unwrap();
    assert!(g.data(masked).iter().all(|&v| v == 0.0));
    let bad = g.constant(vec![1.5; 4], &[4, 1]).unwrap();
    assert!(occlusion_weighted_cv(&mut g, cross, selfv, bad, w).is_err());
}

#[test]
fn occlusion_predictor_range_and_zero_head() {
    let cfg = ModelConfig::tiny();
    let mut p = ModelParams::<f64>::init(&cfg, 17).unwrap();
    zero_layer(&mut p, "occ0.mlp1");
    let mut fx = level_fixture(Some(p));
    let prior = fx.g.constant(vec![1.0; 6], &[6, 1]).unwrap();
    let occ = predict_occlusion(&mut fx.g, &fx.bound, 0, &fx.grouped, prior, 0.1).unwrap();
    assert!(fx.g.data(occ).iter().all(|&v| v == 0.5));

    let mut fx = level_fixture(None);
    let prior = fx.g.constant(vec![0.3; 6], &[6, 1]).unwrap();
    let occ = predict_occlusion(&mut fx.g, &fx.bound, 0, &fx.grouped, prior, 0.1).unwrap();
    assert!(fx.g.data(occ).iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(fx.params.get("occ0.mlp1.w").is_some());
}

#[test]
fn residual_flow_zero_and_shape() {
    let cfg = ModelConfig::tiny();
    let mut p = ModelParams::<f64>::init(&cfg, 18).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(19);
    let pos: Vec<[f64; 3]> = (0..6).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let build = |p: &ModelParams<f64>| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g).unwrap();
        let sf = g.constant(vec![0.1; 24], &[6, 4]).unwrap();
        let cv = g.constant(vec![0.2; 24], &[6, 4]).unwrap();
        let up = g.constant(vec![0.3; 18], &[6, 3]).unwrap();
        let occ = g.constant(vec![0.9; 6], &[6, 1]).unwrap();
        let res = predict_residual_flow(&mut g, &bound, 0, &pos, sf, cv, up, occ, 3, 0.1).unwrap();
        (g.shape(res).to_vec(), g.data(res).to_vec())
    };
    let (shape, _) = build(&p);
    assert_eq!(shape, vec![6, 3]);
    for layer in ["flow0.conv", "flow0.mlp0", "flow0.mlp1"] {
        zero_layer(&mut p, layer);
    }
    let (_, data) = build(&p);
    assert!(data.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_contracts() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::<f32>::init(&cfg, 20).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let s = random_cloud(&mut r, 256, 1.0);
    let t = random_cloud(&mut r, 230, 1.0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let pass = model_forward(&mut g, &bound, &s, &t, &cfg, 0).unwrap();
    assert_eq!(pass.levels(), 2);
    assert_eq!(pass.finest().level, 0);
    for l in 0..2 {
        let out = pass.level(l);
        let n = pass.pyramid.source.positions[l].len();
        assert_eq!(g.shape(out.flow), &[n, 3]);
        assert!(g.data(out.flow).iter().all(|v| v.is_finite()));
        assert!(g.data(out.occlusion).iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(Arc::ptr_eq(&out.occ_neighbors, &out.cv_neighbors));
        // CV_self >= CV_cross because every point is its own nearest neighbor.
        for (a, b) in g.data(out.cv_self).iter().zip(g.data(out.cv_cross)) {
            assert!(a >= b);
        }
    }
    assert_eq!(pass.pyramid.source.positions[1].len(), 64);
    assert_eq!(pass.pyramid.target.positions[1].len(), 58);

    let mut g2 = Graph::new();
    let bound2 = params.bind(&mut g2).unwrap();
    let again = model_forward(&mut g2, &bound2, &s, &t, &cfg, 0).unwrap();
    assert_eq!(g.data(pass.finest().flow), g2.data(again.finest().flow));
}

#[test]
fn weighted_mode_with_unit_occlusion_matches_cross_only() {
    let mut r = ChaCha8Rng::seed_from_u64(22);
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f32>::init(&cfg, 23).unwrap();
    let s = random_cloud(&mut r, 16, 1.0);
    let t = random_cloud(&mut r, 16, 1.0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g).unwrap();
    let pass = model_forward(&mut g, &bound, &s, &t, &cfg, 0).unwrap();
    let out = pass.finest();
    let n = g.shape(out.cv_cross)[0];
    let ones = g.constant(vec![1.0; n], &[n, 1]).unwrap();
    let w = occlusion_weighted_cv(
        &mut g,
        out.cv_cross,
        out.cv_self,
        ones,
        CostVolumeMode::OcclusionWeighted,
    )
    .unwrap();
    let c = occlusion_weighted_cv(&mut g, out.cv_cross, out.cv_self, ones, CostVolumeMode::CrossOnly).unwrap();
    let bits = |id| g.data(id).iter().map(|v: &f32| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(w), bits(c));
}

#[test]
fn end_to_end_supervised_gradcheck() {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::<f64>::init(&cfg, 24).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(25);
    let s = random_cloud(&mut r, 16, 1.0);
    let t = random_cloud(&mut r, 16, 1.0);
    let gt = FlowField(
        (0..16)
            .map(|_| [r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), 0.1])
            .collect(),
    );
    let (names, inputs) = params_as_inputs(&params);
    let report = check(&inputs, DEFAULT_STEP, |g, ids| {
        let bound = rebind(&names, ids);
        let pass = model_forward(g, &bound, &s, &t, &cfg, 0)?;
        supervised_loss(g, &pass, &gt, &[0.02, 0.04])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
