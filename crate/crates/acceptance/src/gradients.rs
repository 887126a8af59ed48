use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsgn_core::gradcheck::{check_many, DEFAULT_STEP};
use gsgn_core::layers::{
    adaptive_instance_norm, fully_connected, global_feature_gate, instance_norm, leaky_relu, residual_block,
    ConvBlockVars, ConvSpec, GateVars, Norm, ResidualVars, DEFAULT_EPS, DEFAULT_SLOPE,
};
use gsgn_core::losses::{
    adversarial_loss, conditional_loss, critic_loss, cycle_loss, gradient_penalty, identity_loss, psnr_loss,
    total_generator_loss, GeneratorLosses, LossWeights, PenaltyForm,
};
use gsgn_core::models::{Classifier, Critic, CriticConfig, Gsgn, ModelConfig, NormMode};
use gsgn_core::params::Bound;
use gsgn_core::{Graph, Result, Tensor, Var};

use crate::{Context, CriterionResult, Outcome};

const TOLERANCE: f64 = 1e-4;
const SEEDS: u64 = 20;
const BUDGET_SECS: f64 = 120.0;

#[derive(Default)]
struct Tracker {
    functions: usize,
    worst: f64,
    worst_name: String,
    failures: Vec<String>,
}

impl Tracker {
    fn check(
        &mut self,
        name: &str,
        seed: u64,
        inputs: &[Tensor<f64>],
        h: f64,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        let r = check_many(f, inputs, h, None)?;
        if r.max_rel_error > self.worst || self.worst_name.is_empty() {
            self.worst = r.max_rel_error;
            self.worst_name = name.to_string();
        }
        if !(r.max_rel_error < TOLERANCE) {
            self.failures.push(format!("{name} seed {seed}: {:.2e}", r.max_rel_error));
        }
        Ok(())
    }

    /// Inputs drawn uniformly from `range`, `SEEDS` draws.
    fn sweep(
        &mut self,
        name: &str,
        shapes: &[&[usize]],
        range: (f64, f64),
        h: f64,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        self.functions += 1;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform(&mut rng, s, range.0, range.1)).collect();
            self.check(name, seed, &inputs, h, &f)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i % 7) as f64 - 3.0) * 0.3 + 0.1);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn layers(t: &mut Tracker) -> Result<()> {
    let sym = (-1.0, 1.0);
    t.sweep("shuffle/unshuffle", &[&[2, 2, 4, 4]], sym, DEFAULT_STEP, |g, v| {
        let s = g.shuffle(v[0])?;
        let s = g.mul(s, s)?;
        let u = g.unshuffle(s)?;
        project(g, u)
    })?;
    t.sweep("conv2d", &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], sym, DEFAULT_STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]))?;
        project(g, y)
    })?;
    t.sweep("fully_connected", &[&[3, 5], &[4, 5], &[4]], sym, DEFAULT_STEP, |g, v| {
        let y = fully_connected(g, v[0], v[1], v[2])?;
        project(g, y)
    })?;
    t.sweep("leaky_relu+sigmoid", &[&[4, 6]], sym, DEFAULT_STEP, |g, v| {
        let y = leaky_relu(g, v[0], DEFAULT_SLOPE)?;
        let s = g.sigmoid(v[0])?;
        let y = g.add(y, s)?;
        project(g, y)
    })?;
    t.sweep("instance_norm", &[&[2, 3, 3, 4], &[3], &[3]], sym, DEFAULT_STEP, |g, v| {
        let y = instance_norm(g, v[0], v[1], v[2], DEFAULT_EPS)?;
        project(g, y)
    })?;
    t.sweep("adaptive_instance_norm", &[&[2, 3, 3, 4], &[2, 3], &[2, 3]], sym, DEFAULT_STEP, |g, v| {
        let y = adaptive_instance_norm(g, v[0], v[1], v[2], DEFAULT_EPS)?;
        project(g, y)
    })?;
    t.sweep("global_feature_gate", &[&[2, 4, 3, 3], &[4, 4], &[4], &[4, 4], &[4]], sym, DEFAULT_STEP, |g, v| {
        let gate = GateVars { fc1_w: v[1], fc1_b: v[2], fc2_w: v[3], fc2_b: v[4] };
        let y = global_feature_gate(g, v[0], &gate, DEFAULT_SLOPE)?;
        project(g, y)
    })?;
    let res: &[&[usize]] = &[&[1, 2, 4, 4], &[2, 2, 3, 3], &[2], &[2], &[2], &[2, 2, 3, 3], &[2], &[2], &[2]];
    t.sweep("residual_block", res, sym, DEFAULT_STEP, |g, v| {
        let spec = ConvSpec::k3(2, 2)?;
        let first = ConvBlockVars { spec, w: v[1], b: v[2], norm: Norm::Instance { gamma: v[3], beta: v[4] } };
        let second = ConvBlockVars { spec, w: v[5], b: v[6], norm: Norm::Instance { gamma: v[7], beta: v[8] } };
        let y = residual_block(g, v[0], &ResidualVars { first, second }, DEFAULT_SLOPE, DEFAULT_EPS)?;
        project(g, y)
    })
}

fn losses(t: &mut Tracker) -> Result<()> {
    let unit = (0.05, 0.95);
    let img: &[usize] = &[2, 3, 4, 4];
    t.sweep("psnr_loss", &[img, img], unit, 1e-6, |g, v| psnr_loss(g, v[0], v[1]))?;
    t.sweep("cycle+identity", &[img, img, img, img], unit, 1e-6, |g, v| {
        let a = cycle_loss(g, v[0], v[1], v[2], v[3])?;
        let b = identity_loss(g, v[0], v[1], v[2], v[3])?;
        let b = g.mul_scalar(b, 3.0)?;
        g.add(a, b)
    })?;
    t.functions += 1;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let z = uniform(&mut rng, &[3, 4], 0.0, 1.0);
        let logits = uniform(&mut rng, &[3, 4], -3.0, 3.0);
        t.check("conditional_loss", seed, &[logits], 1e-6, |g, v| {
            let zc = g.constant(z.clone())?;
            let p = g.sigmoid(v[0])?;
            conditional_loss(g, zc, p)
        })?;
    }
    for (name, form) in [("critic+adversarial (standard)", PenaltyForm::Standard), ("critic+adversarial (hinge)", PenaltyForm::Paper)] {
        let w = LossWeights { penalty_form: form, ..LossWeights::default() };
        t.sweep(name, &[&[3], &[3], &[3]], unit, 1e-6, |g, v| {
            let l = critic_loss(g, v[0], v[1], v[2], &w)?;
            let a = adversarial_loss(g, v[1])?;
            g.add(l, a)
        })?;
    }
    let w = LossWeights { w_cy: 2.0, w_i: 0.5, w_a: 1.5, w_co: 0.7, ..LossWeights::default() };
    t.sweep("total_generator_loss", &[&[1], &[1], &[1], &[1]], unit, 1e-6, |g, v| {
        let mut c = Vec::new();
        for &x in v {
            c.push(g.sum_all(x)?);
        }
        let sq = g.square(c[0])?;
        let parts = GeneratorLosses { cycle: sq, identity: c[1], adversarial: c[2], conditional: Some(c[3]) };
        total_generator_loss(g, &parts, &w)
    })
}

/// Critic loss including the gradient penalty, differentiated with respect
/// to the critic parameters, which requires the second-order path.
fn penalty(t: &mut Tracker) -> Result<()> {
    t.functions += 1;
    let cfg = CriticConfig { base_channels: 3, stages: 2, max_channels: 6, ..CriticConfig::default() };
    for seed in 0..SEEDS {
        let (critic, params) = Critic::build(&cfg, &mut ChaCha8Rng::seed_from_u64(30_000 + seed))?;
        let params = params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(31_000 + seed);
        let xt = uniform(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
        let xf = uniform(&mut rng, &[3, 3, 8, 8], 0.0, 1.0);
        let u: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let head = params.id("head.w").expect("critic head").index();
        inputs[head] = inputs[head].map(|v| v * 40.0);
        let w = LossWeights::default();
        t.check("gradient_penalty (second order)", seed, &inputs, 1e-6, |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let pen = gradient_penalty(g, &critic, &p, &xt, &xf, &u)?;
            let xtv = g.constant(xt.clone())?;
            let xfv = g.constant(xf.clone())?;
            let dr = critic.forward(g, &p, xtv)?;
            let df = critic.forward(g, &p, xfv)?;
            critic_loss(g, dr, df, pen.lambda, &w)
        })?;
    }
    Ok(())
}

fn discriminators(t: &mut Tracker) -> Result<()> {
    let cfg = CriticConfig { base_channels: 3, stages: 2, max_channels: 5, ..CriticConfig::default() };
    t.functions += 2;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(40_000 + seed);
        let (critic, params) = Critic::build(&cfg, &mut rng)?;
        let mut inputs = vec![uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0)];
        inputs.extend(params.cast::<f64>().iter().map(|(_, t)| t.clone()));
        t.check("critic", seed, &inputs, 1e-6, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let s = critic.forward(g, &p, v[0])?;
            let w = g.constant(Tensor::from_slice([2], &[0.7, -1.3])?)?;
            let s = g.mul(s, w)?;
            g.sum_all(s)
        })?;
        let (cls, params) = Classifier::build(&cfg, 2, &mut rng)?;
        let mut inputs = vec![uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0)];
        inputs.extend(params.cast::<f64>().iter().map(|(_, t)| t.clone()));
        t.check("classifier", seed, &inputs, 1e-6, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let c = cls.forward(g, &p, v[0])?;
            let l = g.ln(c)?;
            g.sum_all(l)
        })?;
    }
    Ok(())
}

/// `log10(mse(G(x, z), y))` on a 1x3x8x8 input, every parameter free.
fn generator(t: &mut Tracker, name: &str, norm: NormMode, seeds: u64) -> Result<()> {
    t.functions += 1;
    let adaptive = norm == NormMode::Adaptive;
    let cfg = ModelConfig {
        base_channels: 4,
        blocks_per_level: vec![1, 1, 1],
        norm_mode: norm,
        task_count: 2,
        latent_w_dim: 6,
        zero_output_init: false,
        ..ModelConfig::default()
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + seed);
        let (model, params) = Gsgn::build(&cfg, &mut rng)?;
        let mut inputs = vec![uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0), uniform(&mut rng, &[1, 3, 8, 8], 0.0, 1.0)];
        if adaptive {
            inputs.push(Tensor::from_slice([1, 2], &[0.7, 0.3])?);
        }
        for (_, p) in params.iter() {
            inputs.push(uniform(&mut rng, p.shape(), -0.4, 0.4));
        }
        let extra = if adaptive { 3 } else { 2 };
        t.check(name, seed, &inputs, 1e-6, |g, v| {
            let p = Bound::from_vars(v[extra..].to_vec());
            let y = model.forward(g, &p, v[0], adaptive.then(|| v[2]))?;
            let d = g.sub(y, v[1])?;
            let sq = g.square(d)?;
            let mse = g.mean_all(sq)?;
            g.log10(mse)
        })?;
    }
    Ok(())
}

pub fn certification(_: &mut Context) -> CriterionResult {
    let start = Instant::now();
    let mut t = Tracker::default();
    layers(&mut t)?;
    losses(&mut t)?;
    penalty(&mut t)?;
    discriminators(&mut t)?;
    generator(&mut t, "gsgn end to end", NormMode::Instance, 2)?;
    generator(&mut t, "mt-gsgn end to end", NormMode::Adaptive, 2)?;
    let secs = start.elapsed().as_secs_f64();
    let mut detail = format!(
        "{} functions, {SEEDS} seeds per layer/loss, worst rel err {:.2e} ({}) vs {TOLERANCE:.0e}, {secs:.0} s (budget {BUDGET_SECS:.0} s)",
        t.functions, t.worst, t.worst_name
    );
    if !t.failures.is_empty() {
        detail.push_str(&format!("; failed: {}", t.failures.join(", ")));
    }
    Ok(Outcome::check(t.failures.is_empty() && secs < BUDGET_SECS, detail))
}
