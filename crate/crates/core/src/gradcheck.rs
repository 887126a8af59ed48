//! Finite-difference certification of analytic gradients.
//!
//! The oracle only ever evaluates the forward function; it never looks at
//! the backward rules it is certifying.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// `(input index, flat entry)` where the maximum was attained.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    let value = g.value(root);
    if value.len() != 1 {
        return Err(Error::NonScalarRoot(value.shape().to_vec()));
    }
    Ok(value.data()[0])
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    Ok(vars.iter().map(|&v| g.grad(v).cloned().expect("leaf gradient")).collect())
}

/// Central-difference check of `f` against its analytic gradient.
///
/// `coords` restricts the check to `(input, entry)` pairs; `None` checks
/// every entry of every input.
pub fn check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let analytic = analytic_gradients(&f, inputs)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval_scalar(&f, &work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval_scalar(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[j];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Max relative error between the analytic gradient of a scalar function of
/// one tensor and its central finite difference with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_many(|g: &mut Graph<f64>, v: &[Var]| f(g, v[0]), std::slice::from_ref(x), h, None)
        .map(|r| r.max_rel_error)
}

/// Up to `per_input` random entries of each input, deterministic in `seed`.
pub fn sample_coords(inputs: &[Tensor<f64>], per_input: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let k = per_input.min(t.len());
            let mut picked: Vec<usize> = sample(&mut rng, t.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(move |j| (i, j))
        })
        .collect()
}
