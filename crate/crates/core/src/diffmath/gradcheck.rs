//! Central finite-difference gradient checking in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ValueId};
use crate::error::{Error, Result};

/// Step used by the central difference.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// A differentiable input to a gradient check.
#[derive(Clone, Debug)]
pub struct Input {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Input {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        Input {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Input::new(data, shape)
    }
}

fn evaluate<F>(inputs: &[Input], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|i| g.param(i.data.clone(), &i.shape))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarSeed(g.shape(out).to_vec()));
    }
    Ok(g.scalar(out))
}

/// Compares analytic gradients of the scalar `f` against central differences for
/// every element of every input.
pub fn check<F>(inputs: &[Input], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|i| g.param(i.data.clone(), &i.shape))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[which].data.len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = work[which].data[e];
            work[which].data[e] = orig + step;
            let plus = evaluate(&work, &f)?;
            work[which].data[e] = orig - step;
            let minus = evaluate(&work, &f)?;
            work[which].data[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((which, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Reduces a tensor to a scalar through a fixed random projection, so every
/// output element contributes a distinct weight to the checked gradient.
pub fn project(g: &mut Graph<f64>, out: ValueId, seed: u64) -> Result<ValueId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let weights = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(weights, &shape)?;
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
