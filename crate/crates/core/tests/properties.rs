use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::gradcheck::analytic_gradients;
use gsgn_core::layers::{adaptive_instance_norm, global_feature_gate, instance_norm, shuffle, unshuffle, GateVars, DEFAULT_EPS, DEFAULT_SLOPE};
use gsgn_core::losses::{
    conditional_loss, gradient_penalty, identity_loss, psnr_loss, total_generator_loss, GeneratorLosses, LossWeights,
};
use gsgn_core::metrics::psnr;
use gsgn_core::models::{Critic, CriticConfig, Gsgn, LatentStyle, ModelConfig, NormMode};
use gsgn_core::{Graph, Result, Tensor, Var};

fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn weighted(g: &mut Graph<f64>, y: Var, k: usize) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i * k) % 5) as f64 - 2.0);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn tiny_model(norm: NormMode) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        blocks_per_level: vec![1, 1, 1],
        norm_mode: norm,
        task_count: 2,
        latent_w_dim: 6,
        zero_output_init: false,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_additive_over_shared_leaves(seed in 0u64..10_000, n in 1usize..12) {
        let x = rand_tensor(seed, &[n], -2.0, 2.0);
        let f1 = |g: &mut Graph<f64>, v: &[Var]| { let s = g.mul(v[0], v[0])?; weighted(g, s, 1) };
        let f2 = |g: &mut Graph<f64>, v: &[Var]| { let s = g.sigmoid(v[0])?; weighted(g, s, 3) };
        let both = |g: &mut Graph<f64>, v: &[Var]| { let a = f1(g, v)?; let b = f2(g, v)?; g.add(a, b) };
        let (g1, g2, g12) = (
            analytic_gradients(&f1, std::slice::from_ref(&x)).unwrap(),
            analytic_gradients(&f2, std::slice::from_ref(&x)).unwrap(),
            analytic_gradients(&both, std::slice::from_ref(&x)).unwrap(),
        );
        for i in 0..n {
            let sum = g1[0].data()[i] + g2[0].data()[i];
            prop_assert!((g12[0].data()[i] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn operations_are_deterministic(seed in 0u64..10_000) {
        let x: Tensor = rand_tensor(seed, &[2, 3, 6, 6], 0.0, 1.0).cast();
        let w: Tensor = rand_tensor(seed + 1, &[4, 3, 3, 3], -1.0, 1.0).cast();
        let run = || {
            let mut g = Graph::<f32>::new();
            let (xv, wv) = (g.param(x.clone()).unwrap(), g.param(w.clone()).unwrap());
            let y = g.conv2d(xv, wv, None).unwrap();
            let s = g.sum_all(y).unwrap();
            g.backward(s).unwrap();
            (g.value(y).clone(), g.grad(wv).cloned().unwrap())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn shuffle_pair_is_a_bijection(seed in 0u64..10_000, n in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let x = rand_tensor(seed, &[n, c, 2 * h, 2 * w], -5.0, 5.0);
        let y = rand_tensor(seed + 1, &[n, 4 * c, h, w], -5.0, 5.0);
        let mut g = Graph::<f64>::new();
        let (xv, yv) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
        let s = shuffle(&mut g, xv).unwrap();
        let back = unshuffle(&mut g, s).unwrap();
        let u = unshuffle(&mut g, yv).unwrap();
        let forth = shuffle(&mut g, u).unwrap();
        prop_assert_eq!(g.value(back), &x);
        prop_assert_eq!(g.value(forth), &y);
        let mut moved = g.value(s).data().to_vec();
        let mut orig = x.data().to_vec();
        moved.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        prop_assert_eq!(moved, orig);
    }

    #[test]
    fn instance_norm_sets_channel_statistics(seed in 0u64..10_000, c in 1usize..4, h in 3usize..9, w in 3usize..9, scale in 0.5f64..4.0) {
        let x = rand_tensor(seed, &[2, c, h, w], -scale, scale);
        let gamma = rand_tensor(seed + 1, &[c], -2.0, 2.0);
        let beta = rand_tensor(seed + 2, &[c], -2.0, 2.0);
        let mut g = Graph::<f64>::new();
        let (xv, gv, bv) = (g.constant(x).unwrap(), g.constant(gamma.clone()).unwrap(), g.constant(beta.clone()).unwrap());
        let y = instance_norm(&mut g, xv, gv, bv, DEFAULT_EPS).unwrap();
        for (i, ch) in g.value(y).data().chunks_exact(h * w).enumerate() {
            let mean = ch.iter().sum::<f64>() / ch.len() as f64;
            let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64).sqrt();
            prop_assert!((mean - beta.data()[i % c]).abs() <= 1e-5);
            prop_assert!((std - gamma.data()[i % c].abs()).abs() <= 1e-3);
        }
    }

    #[test]
    fn unit_adaptive_norm_equals_unit_instance_norm(seed in 0u64..10_000, n in 1usize..3, c in 1usize..4) {
        let x = rand_tensor(seed, &[n, c, 5, 4], -3.0, 3.0);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x).unwrap();
        let (one, zero) = (g.constant(Tensor::ones([c])).unwrap(), g.constant(Tensor::zeros([c])).unwrap());
        let (s, b) = (g.constant(Tensor::ones([n, c])).unwrap(), g.constant(Tensor::zeros([n, c])).unwrap());
        let a = instance_norm(&mut g, xv, one, zero, DEFAULT_EPS).unwrap();
        let d = adaptive_instance_norm(&mut g, xv, s, b, DEFAULT_EPS).unwrap();
        prop_assert_eq!(g.value(a), g.value(d));
    }

    #[test]
    fn gate_ignores_spatial_size_of_constant_inputs(seed in 0u64..10_000, h in 1usize..9, w in 1usize..9) {
        let c = 3;
        let level = rand_tensor(seed, &[c], 0.0, 1.0);
        let params = [rand_tensor(seed + 1, &[2, c], -1.0, 1.0), rand_tensor(seed + 2, &[2], -1.0, 1.0),
                      rand_tensor(seed + 3, &[c, 2], -1.0, 1.0), rand_tensor(seed + 4, &[c], -1.0, 1.0)];
        let gated = |h: usize, w: usize| {
            let x = Tensor::from_fn([1, c, h, w], |i| level.data()[i / (h * w)]);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(x).unwrap();
            let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
            let gate = GateVars { fc1_w: p[0], fc1_b: p[1], fc2_w: p[2], fc2_b: p[3] };
            let y = global_feature_gate(&mut g, xv, &gate, DEFAULT_SLOPE).unwrap();
            (0..c).map(|k| g.value(y).data()[k * h * w]).collect::<Vec<_>>()
        };
        let (a, b) = (gated(h, w), gated(2, 2));
        for k in 0..c {
            prop_assert!((a[k] - b[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn psnr_loss_is_a_tenth_of_psnr(seed in 0u64..10_000) {
        let (x, y) = (rand_tensor(seed, &[1, 3, 4, 5], 0.0, 1.0), rand_tensor(seed + 1, &[1, 3, 4, 5], 0.0, 1.0));
        let mut g = Graph::<f64>::new();
        let (xv, yv) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
        let l = psnr_loss(&mut g, xv, yv).unwrap();
        let p = psnr(&x, &y, 1.0).unwrap();
        prop_assert!((g.value(l).data()[0] - p / 10.0).abs() < 1e-10);
    }

    #[test]
    fn identity_loss_ignores_per_image_offsets(seed in 0u64..10_000, arg in 0usize..4, shift in -0.5f64..0.5) {
        let imgs: Vec<Tensor<f64>> = (0..4).map(|i| rand_tensor(seed + i, &[1, 3, 4, 4], 0.0, 1.0)).collect();
        let eval = |imgs: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let v: Vec<Var> = imgs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
            let l = identity_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
            g.value(l).data()[0]
        };
        let mut shifted = imgs.clone();
        shifted[arg] = shifted[arg].map(|v| v + shift);
        prop_assert!((eval(&imgs) - eval(&shifted)).abs() < 1e-12);
    }

    #[test]
    fn conditional_loss_is_non_negative(seed in 0u64..10_000, k in 1usize..5) {
        let z = rand_tensor(seed, &[2, k], 0.0, 1.0);
        let c = rand_tensor(seed + 1, &[2, k], 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (zv, cv) = (g.constant(z.clone()).unwrap(), g.constant(c).unwrap());
        let l = conditional_loss(&mut g, zv, cv).unwrap();
        prop_assert!(g.value(l).data()[0] >= 0.0);
        // perfect prediction of a binary z at the clamp resolution is the minimum
        let zb = z.map(|v| v.round());
        let mut g = Graph::<f64>::new();
        let (zv, cv) = (g.constant(zb.clone()).unwrap(), g.constant(zb).unwrap());
        let l = conditional_loss(&mut g, zv, cv).unwrap();
        prop_assert!(g.value(l).data()[0] <= 2.0 * k as f64 * 1.0000001e-7);
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(vals in proptest::array::uniform4(-5.0f64..5.0),
                                           w in proptest::array::uniform4(0.0f64..3.0), which in 0usize..4, t in 0.0f64..4.0) {
        let eval = |w: [f64; 4]| {
            let mut g = Graph::<f64>::new();
            let c: Vec<Var> = vals.iter().map(|&v| g.constant(Tensor::scalar(v)).unwrap()).collect();
            let parts = GeneratorLosses { cycle: c[0], identity: c[1], adversarial: c[2], conditional: Some(c[3]) };
            let lw = LossWeights { w_cy: w[0], w_i: w[1], w_a: w[2], w_co: w[3], ..LossWeights::default() };
            let l = total_generator_loss(&mut g, &parts, &lw).unwrap();
            g.value(l).data()[0]
        };
        let mut moved = w;
        moved[which] += t;
        prop_assert!((eval(moved) - eval(w) - t * vals[which]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn penalty_vanishes_for_gentle_critics(seed in 0u64..10_000) {
        let cfg = CriticConfig { base_channels: 3, stages: 2, max_channels: 6, ..CriticConfig::default() };
        let (critic, params) = Critic::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut params = params.cast::<f64>();
        let head = params.id("head.w").unwrap();
        let gentle = params.get(head).map(|v| v * 1e-3);
        *params.get_mut(head) = gentle;
        let xt = rand_tensor(seed, &[2, 3, 8, 8], 0.0, 1.0);
        let xf = rand_tensor(seed + 1, &[2, 3, 8, 8], 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let p = params.bind(&mut g, true).unwrap();
        let pen = gradient_penalty(&mut g, &critic, &p, &xt, &xf, &[0.25, 0.8]).unwrap();
        prop_assert!(pen.grad_norm.iter().all(|&n| n <= 1.0));
        prop_assert!(g.value(pen.lambda).data().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn generator_accepts_any_multiple_of_four(seed in 0u64..10_000, h in 1usize..5, w in 1usize..5) {
        let (model, params) = Gsgn::build(&tiny_model(NormMode::Instance), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x: Tensor = rand_tensor(seed, &[1, 3, 4 * h, 4 * w], 0.0, 1.0).cast();
        let y = model.infer(&params, &x, None).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.is_finite());
    }

    #[test]
    fn checkpoint_round_trip_keeps_the_forward(seed in 0u64..10_000) {
        let cfg = tiny_model(NormMode::Adaptive);
        let (model, params) = Gsgn::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let ck = Checkpoint::from_generator(&cfg, vec!["a".into(), "b".into()], &params).unwrap();
        let (m2, p2) = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().generator().unwrap();
        let x: Tensor = rand_tensor(seed, &[1, 3, 8, 8], 0.0, 1.0).cast();
        let z = LatentStyle::from_weights(vec![0.3, 0.6]).unwrap().batch(1).unwrap();
        prop_assert_eq!(model.infer(&params, &x, Some(&z)).unwrap(), m2.infer(&p2, &x, Some(&z)).unwrap());
    }

    #[test]
    fn style_interpolation_is_continuous(seed in 0u64..10_000, alpha in 0.0f32..0.99) {
        let cfg = tiny_model(NormMode::Adaptive);
        let (model, mut params) = Gsgn::build(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for (name, t) in params.iter_mut() {
            if name.contains(".head.") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let x: Tensor = rand_tensor(seed, &[1, 3, 8, 8], 0.0, 1.0).cast();
        let at = |a: f32| {
            let z = LatentStyle::from_weights(vec![1.0 - a, a]).unwrap().batch(1).unwrap();
            model.infer(&params, &x, Some(&z)).unwrap()
        };
        let base = at(alpha);
        let d1 = base.max_abs_diff(&at(alpha + 0.01)).unwrap();
        let d2 = base.max_abs_diff(&at(alpha + 0.001)).unwrap();
        // a Lipschitz response: ten times smaller steps move the output far less
        prop_assert!(d2 <= 0.2 * d1 + 1e-6, "{} vs {}", d2, d1);
    }
}
