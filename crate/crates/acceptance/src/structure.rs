use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsgn_core::layers::{instance_norm, shuffle, unshuffle, DEFAULT_EPS};
use gsgn_core::losses::{
    conditional_loss, critic_loss, cycle_loss, identity_loss, penalty_hinge, psnr_loss, total_generator_loss,
    GeneratorLosses, LossWeights, PenaltyForm,
};
use gsgn_core::models::{count_parameters, Gsgn, ModelConfig};
use gsgn_core::{Graph, Result, Tensor, Var};

use crate::{Context, CriterionResult, Outcome};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn shuffle_algebra(_: &mut Context) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut broken = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..4);
        let c = rng.random_range(1..6);
        let h = 2 * rng.random_range(1..9);
        let w = 2 * rng.random_range(1..9);
        let x = uniform(&mut rng, &[n, c, h, w], -10.0, 10.0);
        let y = uniform(&mut rng, &[n, 4 * c, h / 2, w / 2], -10.0, 10.0);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone())?;
        let yv = g.constant(y.clone())?;
        let s = shuffle(&mut g, xv)?;
        let back = unshuffle(&mut g, s)?;
        let u = unshuffle(&mut g, yv)?;
        let forth = shuffle(&mut g, u)?;
        if g.value(back) != &x || g.value(forth) != &y || g.shape(s) != [n, 4 * c, h / 2, w / 2] {
            broken += 1;
        }
    }
    Ok(Outcome::check(broken == 0, format!("100 random tensors, both compositions bit-exact; {broken} mismatches")))
}

fn channel_stats(t: &Tensor, n: usize, c: usize) -> Vec<(usize, f64, f64)> {
    let inner = t.len() / (n * c);
    t.data()
        .chunks_exact(inner)
        .enumerate()
        .map(|(i, ch)| {
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / inner as f64;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / inner as f64;
            (i % c, mean, var.sqrt())
        })
        .collect()
}

/// Randomizes every parameter present in both stores to the same values.
fn share_weights(a: &mut gsgn_core::params::ParamStore, b: &mut gsgn_core::params::ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = a.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let Some(ib) = b.id(&name) else { continue };
        let ia = a.id(&name).expect("own name");
        if name.contains("norm") {
            continue;
        }
        let t = Tensor::from_fn(a.get(ia).shape().to_vec(), |_| rng.random_range(-0.3..0.3));
        *a.get_mut(ia) = t.clone();
        *b.get_mut(ib) = t;
    }
}

pub fn normalization_contracts(_: &mut Context) -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mean, mut worst_std) = (0f64, 0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..5);
        let hw = [rng.random_range(4..12), rng.random_range(4..12)];
        let scale = rng.random_range(0.5..3.0);
        let x = Tensor::from_fn([n, c, hw[0], hw[1]], |_| rng.random_range(-1.0f32..1.0) * scale);
        let gamma = uniform(&mut rng, &[c], -2.0, 2.0);
        let beta = uniform(&mut rng, &[c], -2.0, 2.0);
        let mut g = Graph::<f32>::new();
        let (xv, gv, bv) = (g.constant(x)?, g.constant(gamma.clone())?, g.constant(beta.clone())?);
        let y = instance_norm(&mut g, xv, gv, bv, DEFAULT_EPS)?;
        for (ch, mean, std) in channel_stats(g.value(y), n, c) {
            worst_mean = worst_mean.max((mean - beta.data()[ch] as f64).abs());
            worst_std = worst_std.max((std - gamma.data()[ch].abs() as f64).abs());
        }
    }
    let stats_ok = worst_mean <= 1e-5 && worst_std <= 1e-3;

    // adaptive model with zero-initialised heads against the plain model
    let mut mismatches = 0;
    let mut compared = 0;
    for seed in 0..3u64 {
        let (mt, mut mp) = Gsgn::build(&ModelConfig::desk_multitask(3), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let (plain, mut pp) = Gsgn::build(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed + 100))?;
        share_weights(&mut pp, &mut mp, seed + 200);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 300);
        for (name, t) in mp.iter_mut() {
            if name.starts_with("mapping.") {
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
            }
        }
        let x = uniform(&mut r, &[2, 3, 32, 32], 0.0, 1.0);
        let b = plain.infer(&pp, &x, None)?;
        for z in [[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], [0.2, 0.5, 0.3, 1.0, 1.0, 1.0]] {
            let z = Tensor::from_slice([2, 3], &z)?;
            let a = mt.infer(&mp, &x, Some(&z))?;
            compared += 1;
            if a.data() != b.data() {
                mismatches += 1;
            }
        }
    }
    Ok(Outcome::check(
        stats_ok && mismatches == 0,
        format!(
            "instance norm over 100 tensors with per-channel std >= 0.29: max |mean-beta| {worst_mean:.1e} (<= 1e-5), max |std-|gamma|| {worst_std:.1e} (<= 1e-3); zero-head adaptive vs plain forward: {}/{compared} bit-identical",
            compared - mismatches
        ),
    ))
}

pub fn parameter_budget(_: &mut Context) -> CriterionResult {
    let full = count_parameters(&ModelConfig::gsgn())?;
    let no_in = count_parameters(&ModelConfig::gsgn_without_in())?;
    let bare = count_parameters(&ModelConfig::gsgn_without_global_and_in())?;
    let rel = full as f64 / 339_000.0 - 1.0;
    let pass = rel.abs() <= 0.15 && bare < no_in && no_in <= full;
    Ok(Outcome::check(
        pass,
        format!("full {full} ({:+.1}% of 339k, tolerance 15%), without IN {no_in}, without global features and IN {bare}", rel * 100.0),
    ))
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn vars(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Result<Var> {
    g.constant(Tensor::from_slice(shape.to_vec(), data)?)
}

/// Each example as (label, computed, expected, tolerance).
fn loss_examples() -> Result<Vec<(&'static str, f64, f64, f64)>> {
    let mut out = Vec::new();
    out.push(("hinge(1.0)", penalty_hinge(1.0), 0.0, 0.0));
    out.push(("hinge(1.5)", penalty_hinge(1.5), 0.5, 0.0));
    out.push(("hinge(0.3)", penalty_hinge(0.3), 0.0, 0.0));

    for (label, form, expected) in
        [("paper-form critic loss", PenaltyForm::Paper, 5.0), ("standard-form critic loss", PenaltyForm::Standard, 1.5)]
    {
        let mut g = Graph::<f64>::new();
        let (dr, df, l) = (vars(&mut g, &[1], &[2.0])?, vars(&mut g, &[1], &[1.0])?, vars(&mut g, &[1], &[0.5])?);
        let w = LossWeights { penalty_form: form, gp_weight: 10.0, ..LossWeights::default() };
        let v = critic_loss(&mut g, dr, df, l, &w)?;
        out.push((label, scalar(&g, v), expected, 0.0));
    }
    {
        let mut g = Graph::<f64>::new();
        let (d, l) = (vars(&mut g, &[1], &[0.7])?, vars(&mut g, &[1], &[0.0])?);
        let v = critic_loss(&mut g, d, d, l, &LossWeights::default())?;
        out.push(("standard form, lambda 0, equal scores", scalar(&g, v), 0.0, 0.0));
    }

    for (label, z, c, expected, tol) in [
        ("conditional z=[1,0] c=[.5,.5]", vec![1.0, 0.0], vec![0.5, 0.5], 1.3863, 5e-5),
        ("conditional z=[1] c=[.5]", vec![1.0], vec![0.5], 0.6931, 5e-5),
        ("conditional perfect", vec![1.0, 0.0], vec![1.0 - 1e-7, 1e-7], 2e-7, 1e-9),
    ] {
        let mut g = Graph::<f64>::new();
        let k = z.len();
        let (zv, cv) = (vars(&mut g, &[1, k], &z)?, vars(&mut g, &[1, k], &c)?);
        let v = conditional_loss(&mut g, zv, cv)?;
        out.push((label, scalar(&g, v), expected, tol));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn([2, 3, 8, 8], |_| rng.random_range(0.1..0.5));
    let (xs, xt) = (img(&mut rng), img(&mut rng));
    {
        let mut g = Graph::<f64>::new();
        let shifted = xs.map(|v| v + 0.37);
        let (a, b, c, d) = (g.constant(xs.clone())?, g.constant(shifted)?, g.constant(xt.clone())?, g.constant(xt.clone())?);
        let v = identity_loss(&mut g, a, b, c, d)?;
        out.push(("identity under uniform brightness shift", scalar(&g, v), 0.0, 1e-24));
        let k1 = g.constant(Tensor::full([1, 3, 4, 4], 0.2))?;
        let k2 = g.constant(Tensor::full([1, 3, 4, 4], 0.9))?;
        let v = identity_loss(&mut g, k1, k2, k1, k1)?;
        out.push(("identity of constants", scalar(&g, v), 0.0, 1e-24));
    }
    {
        let mut g = Graph::<f64>::new();
        let plus = xs.map(|v| v + 1.0);
        let (a, b, c) = (g.constant(xs.clone())?, g.constant(plus)?, g.constant(xt.clone())?);
        let v = cycle_loss(&mut g, a, b, c, c)?;
        out.push(("cycle with unit offset", scalar(&g, v), 1.0, 1e-12));
        let v = cycle_loss(&mut g, a, a, c, c)?;
        out.push(("cycle perfect", scalar(&g, v), 0.0, 0.0));
    }
    for (label, data, expected) in [("psnr loss mse 0.01", 0.1, 2.0), ("psnr loss mse 1", 1.0, 0.0), ("psnr loss identical", 0.0, 10.0)] {
        let mut g = Graph::<f64>::new();
        let a = vars(&mut g, &[1, 4], &[0.0; 4])?;
        let b = vars(&mut g, &[1, 4], &[data; 4])?;
        let v = psnr_loss(&mut g, a, b)?;
        out.push((label, scalar(&g, v), expected, 1e-12));
    }
    {
        let mut g = Graph::<f64>::new();
        let c: Vec<Var> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| g.constant(Tensor::scalar(v))).collect::<Result<_>>()?;
        let parts = GeneratorLosses { cycle: c[0], identity: c[1], adversarial: c[2], conditional: Some(c[3]) };
        let ones = LossWeights { w_cy: 1.0, w_i: 1.0, w_a: 1.0, w_co: 1.0, ..LossWeights::default() };
        let v = total_generator_loss(&mut g, &parts, &ones)?;
        out.push(("total with unit weights", scalar(&g, v), 10.0, 0.0));
        let zeros = LossWeights { w_cy: 0.0, w_i: 0.0, w_a: 0.0, w_co: 0.0, ..LossWeights::default() };
        let v = total_generator_loss(&mut g, &parts, &zeros)?;
        out.push(("total with zero weights", scalar(&g, v), 0.0, 0.0));
    }
    Ok(out)
}

pub fn loss_arithmetic(_: &mut Context) -> CriterionResult {
    let examples = loss_examples()?;
    let failed: Vec<String> = examples
        .iter()
        .filter(|(_, got, want, tol)| !((got - want).abs() <= *tol))
        .map(|(label, got, want, _)| format!("{label}: {got} != {want}"))
        .collect();
    let detail = if failed.is_empty() {
        format!("{} worked examples hold", examples.len())
    } else {
        format!("{} of {} failed: {}", failed.len(), examples.len(), failed.join("; "))
    };
    Ok(Outcome::check(failed.is_empty(), detail))
}
