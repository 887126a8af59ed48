//! Network building blocks: shuffling, convolution, fully connected layers,
//! activations, (adaptive) instance normalization, the global feature gate
//! and residual blocks.
//!
//! Every block is a free function over a [`Graph`] so that the same code
//! runs in `f32` for training and in `f64` for gradient certification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduce, Var};
use crate::tensor::Scalar;

pub const DEFAULT_SLOPE: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Same-padded, stride-1 convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("convolution channel counts must be positive".into()));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel must be odd, got {kernel}")));
        }
        Ok(Self { in_channels, out_channels, kernel })
    }

    pub fn k3(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, 3)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

fn channels<T: Scalar>(g: &Graph<T>, x: Var) -> Result<usize> {
    Ok(g.value(x).nchw()?.1)
}

pub fn shuffle<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.shuffle(x)
}

pub fn unshuffle<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.unshuffle(x)
}

pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, spec: &ConvSpec, w: Var, b: Var) -> Result<Var> {
    let c = channels(g, x)?;
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: g.shape(x).to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    if g.shape(w) != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d weights",
            lhs: g.shape(w).to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    g.conv2d(x, w, Some(b))
}

/// `x (N, in) -> (N, out)` with `w (out, in)`.
pub fn fully_connected<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    g.linear(x, w, Some(b))
}

pub fn leaky_relu<T: Scalar>(g: &mut Graph<T>, x: Var, slope: f64) -> Result<Var> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::InvalidArgument(format!("leaky relu slope {slope} outside (0, 1)")));
    }
    g.leaky_relu(x, slope)
}

/// Per-channel `x * scale + shift` with `scale`, `shift` of shape `(N, C)`.
fn channel_affine<T: Scalar>(g: &mut Graph<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let scaled = g.mul_bcast(x, scale)?;
    g.add_bcast(scaled, shift)
}

/// Instance normalization with learned per-channel `gamma` and `beta` of shape `(C)`.
pub fn instance_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let (n, c, _, _) = g.value(x).nchw()?;
    for p in [gamma, beta] {
        if g.shape(p) != [c] {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                lhs: g.shape(x).to_vec(),
                rhs: g.shape(p).to_vec(),
            });
        }
    }
    let normed = g.instance_normalize(x, eps)?;
    let scale = g.tile(gamma, n)?;
    let shift = g.tile(beta, n)?;
    channel_affine(g, normed, scale, shift)
}

/// Instance normalization whose per-sample, per-channel `scale` and `shift`
/// (both `(N, C)`) come from an external conditioning vector.
pub fn adaptive_instance_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    scale: Var,
    shift: Var,
    eps: f64,
) -> Result<Var> {
    let (n, c, _, _) = g.value(x).nchw()?;
    for p in [scale, shift] {
        if g.shape(p) != [n, c] {
            return Err(Error::ShapeMismatch {
                op: "adaptive_instance_norm",
                lhs: g.shape(x).to_vec(),
                rhs: g.shape(p).to_vec(),
            });
        }
    }
    let normed = g.instance_normalize(x, eps)?;
    channel_affine(g, normed, scale, shift)
}

/// Normalization applied at one site of a network.
#[derive(Clone, Copy, Debug)]
pub enum Norm {
    None,
    Instance { gamma: Var, beta: Var },
    Adaptive { scale: Var, shift: Var },
}

pub fn apply_norm<T: Scalar>(g: &mut Graph<T>, x: Var, norm: &Norm, eps: f64) -> Result<Var> {
    match *norm {
        Norm::None => Ok(x),
        Norm::Instance { gamma, beta } => instance_norm(g, x, gamma, beta, eps),
        Norm::Adaptive { scale, shift } => adaptive_instance_norm(g, x, scale, shift, eps),
    }
}

/// Weights of the two fully connected layers of the global feature gate.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Channel gate computed from global average pooling:
/// `sigmoid(fc2(leaky_relu(fc1(mean_hw(x)))))`, multiplied onto `x`.
pub fn global_feature_gate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gate: &GateVars,
    slope: f64,
) -> Result<Var> {
    let c = channels(g, x)?;
    if g.shape(gate.fc1_w).get(1) != Some(&c) || g.shape(gate.fc2_w).first() != Some(&c) {
        return Err(Error::ShapeMismatch {
            op: "global_feature_gate",
            lhs: g.shape(x).to_vec(),
            rhs: g.shape(gate.fc1_w).to_vec(),
        });
    }
    let pooled = g.reduce(Reduce::Mean, x, &[2, 3])?;
    let h = fully_connected(g, pooled, gate.fc1_w, gate.fc1_b)?;
    let h = leaky_relu(g, h, slope)?;
    let h = fully_connected(g, h, gate.fc2_w, gate.fc2_b)?;
    let gates = g.sigmoid(h)?;
    g.mul_bcast(x, gates)
}

/// One convolution stage: `conv -> leaky relu -> norm`.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockVars {
    pub spec: ConvSpec,
    pub w: Var,
    pub b: Var,
    pub norm: Norm,
}

pub fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &ConvBlockVars,
    slope: f64,
    eps: f64,
) -> Result<Var> {
    let y = conv2d(g, x, &block.spec, block.w, block.b)?;
    let y = leaky_relu(g, y, slope)?;
    apply_norm(g, y, &block.norm, eps)
}

/// Residual block `x + F(x)` with `F = conv -> act -> norm -> conv -> norm`.
#[derive(Clone, Copy, Debug)]
pub struct ResidualVars {
    pub first: ConvBlockVars,
    pub second: ConvBlockVars,
}

pub fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    block: &ResidualVars,
    slope: f64,
    eps: f64,
) -> Result<Var> {
    let c = channels(g, x)?;
    if block.first.spec.in_channels != c || block.second.spec.out_channels != c {
        return Err(Error::ShapeMismatch {
            op: "residual_block",
            lhs: g.shape(x).to_vec(),
            rhs: block.second.spec.weight_shape().to_vec(),
        });
    }
    let h = conv_block(g, x, &block.first, slope, eps)?;
    let h = conv2d(g, h, &block.second.spec, block.second.w, block.second.b)?;
    let h = apply_norm(g, h, &block.second.norm, eps)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_many, DEFAULT_STEP};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn value_of(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn shuffle_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(value_of(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let s = shuffle(&mut g, x).unwrap();
        assert_eq!(g.shape(s), &[1, 4, 1, 1]);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);
        let u = unshuffle(&mut g, s).unwrap();
        assert_eq!(g.value(u), g.value(x));

        let y = g.constant(Tensor::zeros([2, 3, 8, 8])).unwrap();
        let sy = shuffle(&mut g, y).unwrap();
        assert_eq!(g.shape(sy), &[2, 12, 4, 4]);
        let uy = unshuffle(&mut g, sy).unwrap();
        assert_eq!(g.shape(uy), &[2, 3, 8, 8]);
    }

    #[test]
    fn shuffle_errors() {
        let mut g = Graph::<f64>::new();
        let odd = g.constant(Tensor::zeros([1, 1, 3, 2])).unwrap();
        assert!(shuffle(&mut g, odd).is_err());
        let bad = g.constant(Tensor::zeros([1, 3, 2, 2])).unwrap();
        assert!(unshuffle(&mut g, bad).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| i as f64)).unwrap();
        let spec = ConvSpec::new(1, 1, 1).unwrap();
        let w = g.constant(Tensor::ones([1, 1, 1, 1])).unwrap();
        let b = g.constant(Tensor::zeros([1])).unwrap();
        let y = conv2d(&mut g, x, &spec, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::ones([1, 1, 3, 3])).unwrap();
        let spec3 = ConvSpec::k3(1, 1).unwrap();
        let w3 = g.constant(Tensor::ones([1, 1, 3, 3])).unwrap();
        let y3 = conv2d(&mut g, ones, &spec3, w3, b).unwrap();
        assert_eq!(g.value(y3).data()[4], 9.0);
        assert_eq!(g.value(y3).data()[0], 4.0);

        let two = g.constant(Tensor::zeros([1, 2, 3, 3])).unwrap();
        assert!(conv2d(&mut g, two, &spec3, w3, b).is_err());
        assert_eq!(ConvSpec::k3(3, 16).unwrap().param_count(), 448);
        assert!(ConvSpec::new(3, 16, 2).is_err());
    }

    #[test]
    fn fully_connected_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(value_of(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let eye = g.constant(value_of(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zb = g.constant(Tensor::zeros([2])).unwrap();
        let y = fully_connected(&mut g, x, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let zw = g.constant(Tensor::zeros([3, 2])).unwrap();
        let b = g.constant(value_of(&[3], &[1.0, -1.0, 0.5])).unwrap();
        let y = fully_connected(&mut g, x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
        let bad = g.constant(Tensor::zeros([3, 3])).unwrap();
        assert!(fully_connected(&mut g, x, bad, b).is_err());
    }

    #[test]
    fn leaky_relu_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(value_of(&[3], &[2.0, -1.0, 0.0])).unwrap();
        let y = leaky_relu(&mut g, x, DEFAULT_SLOPE).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, -0.2, 0.0]);
        assert!(leaky_relu(&mut g, x, 1.5).is_err());
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::ones([1])).unwrap();
        let zero = g.constant(Tensor::zeros([1])).unwrap();
        let c = g.constant(Tensor::full([1, 1, 2, 2], 0.7)).unwrap();
        let y = instance_norm(&mut g, c, one, zero, DEFAULT_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let x = g.constant(value_of(&[1, 1, 1, 2], &[1.0, 3.0])).unwrap();
        let y = instance_norm(&mut g, x, one, zero, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let five = g.constant(Tensor::full([1], 5.0)).unwrap();
        let r = g.constant(Tensor::from_fn([1, 1, 3, 3], |i| (i * i) as f64)).unwrap();
        let y = instance_norm(&mut g, r, zero, five, DEFAULT_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut g = Graph::<f64>::new();
            let x = g.constant(rand_tensor(&mut rng, &[2, 3, 5, 6]).map(|v| 4.0 * v + 2.0)).unwrap();
            let gamma = g.constant(rand_tensor(&mut rng, &[3]).map(|v| 3.0 * v)).unwrap();
            let beta = g.constant(rand_tensor(&mut rng, &[3])).unwrap();
            let y = instance_norm(&mut g, x, gamma, beta, DEFAULT_EPS).unwrap();
            let (gv, bv) = (g.value(gamma).data().to_vec(), g.value(beta).data().to_vec());
            for (p, plane) in g.value(y).data().chunks(30).enumerate() {
                let mean = plane.iter().sum::<f64>() / 30.0;
                let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0).sqrt();
                assert!((mean - bv[p % 3]).abs() < 1e-5);
                assert!((std - gv[p % 3].abs()).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn adaptive_instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 2, 4, 4], |i| ((i * 7) % 5) as f64)).unwrap();
        let s2 = g.constant(Tensor::full([1, 2], 2.0)).unwrap();
        let b3 = g.constant(Tensor::full([1, 2], 3.0)).unwrap();
        let y = adaptive_instance_norm(&mut g, x, s2, b3, DEFAULT_EPS).unwrap();
        for plane in g.value(y).data().chunks(16) {
            let mean = plane.iter().sum::<f64>() / 16.0;
            let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((mean - 3.0).abs() < 1e-3 && (std - 2.0).abs() < 1e-3);
        }
        let c = g.constant(Tensor::full([1, 2, 4, 4], 0.3)).unwrap();
        let y = adaptive_instance_norm(&mut g, c, s2, b3, DEFAULT_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 3.0).abs() < 1e-9));

        let bad = g.constant(Tensor::full([1, 3], 1.0)).unwrap();
        assert!(adaptive_instance_norm(&mut g, x, bad, b3, DEFAULT_EPS).is_err());
    }

    #[test]
    fn adaptive_identity_equals_plain_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = rand_tensor(&mut rng, &[2, 3, 4, 4]).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let x = g.constant(xv).unwrap();
        let gamma = g.constant(Tensor::ones([3])).unwrap();
        let beta = g.constant(Tensor::zeros([3])).unwrap();
        let scale = g.constant(Tensor::ones([2, 3])).unwrap();
        let shift = g.constant(Tensor::zeros([2, 3])).unwrap();
        let a = instance_norm(&mut g, x, gamma, beta, DEFAULT_EPS).unwrap();
        let b = adaptive_instance_norm(&mut g, x, scale, shift, DEFAULT_EPS).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    fn gate_vars(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, c: usize, bias2: f64) -> GateVars {
        GateVars {
            fc1_w: g.constant(rand_tensor(rng, &[c, c])).unwrap(),
            fc1_b: g.constant(rand_tensor(rng, &[c])).unwrap(),
            fc2_w: g.constant(rand_tensor(rng, &[c, c])).unwrap(),
            fc2_b: g.constant(Tensor::full([c], bias2)).unwrap(),
        }
    }

    #[test]
    fn global_gate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, &[1, 2, 4, 4])).unwrap();
        let open = gate_vars(&mut g, &mut rng, 2, 60.0);
        let y = global_feature_gate(&mut g, x, &open, DEFAULT_SLOPE).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)).unwrap() < 1e-12);

        let c = g.constant(Tensor::full([1, 1, 3, 3], 0.4)).unwrap();
        let pooled = g.reduce(Reduce::Mean, c, &[2, 3]).unwrap();
        assert!((g.value(pooled).data()[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn global_gate_ignores_spatial_size_of_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let gate = gate_vars(&mut g, &mut rng, 3, 0.0);
        let small = g.constant(Tensor::from_fn([1, 3, 2, 2], |i| [0.2, -0.5, 0.9][i / 4])).unwrap();
        let large = g.constant(Tensor::from_fn([1, 3, 8, 6], |i| [0.2, -0.5, 0.9][i / 48])).unwrap();
        let ys = global_feature_gate(&mut g, small, &gate, DEFAULT_SLOPE).unwrap();
        let yl = global_feature_gate(&mut g, large, &gate, DEFAULT_SLOPE).unwrap();
        // per-channel gated value of a constant channel reveals the gate
        for c in 0..3 {
            assert!((g.value(ys).data()[c * 4] - g.value(yl).data()[c * 48]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_zero_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 4, 4])).unwrap();
        let spec = ConvSpec::k3(3, 3).unwrap();
        let zw = g.constant(Tensor::zeros(spec.weight_shape())).unwrap();
        let zb = g.constant(Tensor::zeros([3])).unwrap();
        let one = g.constant(Tensor::ones([3])).unwrap();
        let norm = Norm::Instance { gamma: one, beta: zb };
        let stage = ConvBlockVars { spec, w: zw, b: zb, norm };
        let block = ResidualVars { first: stage, second: stage };
        let y = residual_block(&mut g, x, &block, DEFAULT_SLOPE, DEFAULT_EPS).unwrap();
        assert_eq!(g.shape(y), g.shape(x));
        assert_eq!(g.value(y), g.value(x));
    }

    // ---- gradient certification, 20 seeds per layer ----

    fn certify(seeds: u64, shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let report = check_many(&f, &inputs, DEFAULT_STEP, None).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    /// Weighted sum so that every output entry carries a distinct gradient.
    fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
        let w = Tensor::from_fn(g.shape(y).to_vec(), |i| ((i % 7) as f64 - 3.0) * 0.3 + 0.1);
        let w = g.constant(w)?;
        let p = g.mul(y, w)?;
        g.sum_all(p)
    }

    #[test]
    fn gradcheck_shuffle_pair() {
        certify(20, &[&[2, 2, 4, 4]], |g, v| {
            let s = g.shuffle(v[0])?;
            let s = g.mul(s, s)?;
            let u = g.unshuffle(s)?;
            project(g, u)
        });
    }

    #[test]
    fn gradcheck_conv2d() {
        certify(20, &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_fully_connected() {
        certify(20, &[&[3, 5], &[4, 5], &[4]], |g, v| {
            let y = fully_connected(g, v[0], v[1], v[2])?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_leaky_relu_and_sigmoid() {
        certify(20, &[&[4, 6]], |g, v| {
            let y = leaky_relu(g, v[0], DEFAULT_SLOPE)?;
            let s = g.sigmoid(v[0])?;
            let y = g.add(y, s)?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_instance_norm() {
        certify(20, &[&[2, 3, 3, 4], &[3], &[3]], |g, v| {
            let y = instance_norm(g, v[0], v[1], v[2], DEFAULT_EPS)?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_adaptive_instance_norm() {
        certify(20, &[&[2, 3, 3, 4], &[2, 3], &[2, 3]], |g, v| {
            let y = adaptive_instance_norm(g, v[0], v[1], v[2], DEFAULT_EPS)?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_global_gate() {
        certify(20, &[&[2, 4, 3, 3], &[4, 4], &[4], &[4, 4], &[4]], |g, v| {
            let gate = GateVars { fc1_w: v[1], fc1_b: v[2], fc2_w: v[3], fc2_b: v[4] };
            let y = global_feature_gate(g, v[0], &gate, DEFAULT_SLOPE)?;
            project(g, y)
        });
    }

    #[test]
    fn gradcheck_residual_block() {
        certify(
            20,
            &[&[1, 2, 4, 4], &[2, 2, 3, 3], &[2], &[2], &[2], &[2, 2, 3, 3], &[2], &[2], &[2]],
            |g, v| {
                let spec = ConvSpec::k3(2, 2)?;
                let first = ConvBlockVars {
                    spec,
                    w: v[1],
                    b: v[2],
                    norm: Norm::Instance { gamma: v[3], beta: v[4] },
                };
                let second = ConvBlockVars {
                    spec,
                    w: v[5],
                    b: v[6],
                    norm: Norm::Instance { gamma: v[7], beta: v[8] },
                };
                let y = residual_block(g, v[0], &ResidualVars { first, second }, DEFAULT_SLOPE, DEFAULT_EPS)?;
                project(g, y)
            },
        );
    }

    #[test]
    fn gradcheck_elementwise_and_reductions() {
        certify(20, &[&[3, 4], &[3, 4], &[3]], |g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.sigmoid(v[1])?;
            let b = g.add_scalar(b, 0.5)?;
            let q = g.div(a, b)?;
            let p = g.pow_scalar(b, 1.7)?;
            let l = g.log10(b)?;
            let n = g.ln(b)?;
            let s = g.sub(q, p)?;
            let s = g.add(s, l)?;
            let s = g.add(s, n)?;
            let m = g.mul_bcast(s, v[2])?;
            let m = g.add_bcast(m, v[2])?;
            let r = g.reduce(Reduce::L2Norm, m, &[1])?;
            let mean = g.reduce(Reduce::Mean, m, &[0])?;
            let tot = g.sum_all(r)?;
            let tm = project(g, mean)?;
            let c = g.clamp(v[0], -0.5, 0.5)?;
            let c = project(g, c)?;
            let t = g.add(tot, tm)?;
            g.add(t, c)
        });
    }

    #[test]
    fn gradcheck_concat_narrow_tile() {
        certify(20, &[&[2, 2, 2, 2], &[2, 3, 2, 2], &[2, 5], &[5]], |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let c = g.mul(c, c)?;
            let a = project(g, c)?;
            let n = g.narrow(v[2], 1, 3)?;
            let n = g.mul(n, n)?;
            let b = project(g, n)?;
            let t = g.tile(v[3], 3)?;
            let t = g.mul(t, t)?;
            let t = project(g, t)?;
            let s = g.add(a, b)?;
            g.add(s, t)
        });
    }
}
