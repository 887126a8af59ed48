use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Reduce, Var};
use crate::layers;
use crate::models::config::CriticConfig;
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

/// Downsampling trunk: per stage space-to-depth, 3x3 conv, leaky relu; then
/// global average pooling. No normalization, so samples never interact.
#[derive(Clone, Debug)]
struct Trunk {
    config: CriticConfig,
    stages: Vec<(ParamId, ParamId)>,
}

impl Trunk {
    fn build<R: Rng>(config: &CriticConfig, init: &mut Initializer<'_, R>) -> Result<Self> {
        config.validate()?;
        let mut cin = 3;
        let mut stages = Vec::new();
        for s in 0..config.stages {
            let cout = config.width(s);
            let w = init.he(&format!("stage{s}.w"), &[cout, 4 * cin, 3, 3], 1.0)?;
            let b = init.constant(&format!("stage{s}.b"), &[cout], 0.0)?;
            stages.push((w, b));
            cin = cout;
        }
        Ok(Self { config: config.clone(), stages })
    }

    fn out_channels(&self) -> usize {
        self.config.width(self.config.stages - 1)
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var, op: &'static str) -> Result<()> {
        let (_, c, h, w) = g.value(x).nchw()?;
        let m = self.config.size_multiple();
        if c != 3 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidShape {
                op,
                shape: g.shape(x).to_vec(),
                reason: format!("expected 3 channels and sides divisible by {m}"),
            });
        }
        Ok(())
    }

    /// Pooled features `(N, C)`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.stages {
            h = g.shuffle(h)?;
            h = g.conv2d(h, p.var(w), Some(p.var(b)))?;
            h = g.leaky_relu(h, self.config.slope)?;
        }
        g.reduce(Reduce::Mean, h, &[2, 3])
    }

    /// Pooled features and their directional derivative along `dx`.
    fn forward_tangent<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, dx: Var) -> Result<(Var, Var)> {
        let (mut h, mut dh) = (x, dx);
        for &(w, b) in &self.stages {
            h = g.shuffle(h)?;
            dh = g.shuffle(dh)?;
            let pre = g.conv2d(h, p.var(w), Some(p.var(b)))?;
            let dpre = g.conv2d(dh, p.var(w), None)?;
            h = g.leaky_relu(pre, self.config.slope)?;
            dh = g.leaky_relu_tangent(pre, dpre, self.config.slope)?;
        }
        let pooled = g.reduce(Reduce::Mean, h, &[2, 3])?;
        let dpooled = g.reduce(Reduce::Mean, dh, &[2, 3])?;
        Ok((pooled, dpooled))
    }
}

/// Wasserstein critic: unbounded scalar score per sample.
#[derive(Clone, Debug)]
pub struct Critic {
    trunk: Trunk,
    head_w: ParamId,
    head_b: ParamId,
}

impl Critic {
    pub fn build<R: Rng>(config: &CriticConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, rng, "");
        let trunk = Trunk::build(config, &mut init)?;
        let c = trunk.out_channels();
        let head_w = init.he("head.w", &[1, c], 1.0)?;
        let head_b = init.constant("head.b", &[1], 0.0)?;
        Ok((Self { trunk, head_w, head_b }, store))
    }

    pub fn with_params(config: &CriticConfig, params: &ParamStore) -> Result<(Self, ParamStore)> {
        let (model, mut fresh) = Self::build(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        fresh.copy_from(params).map_err(|e| Error::Checkpoint(format!("critic parameters: {e}")))?;
        Ok((model, fresh))
    }

    pub fn config(&self) -> &CriticConfig {
        &self.trunk.config
    }

    /// Scores of shape `(N)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.trunk.check_input(g, x, "critic_forward")?;
        let n = g.shape(x)[0];
        let f = self.trunk.forward(g, p, x)?;
        let s = g.linear(f, p.var(self.head_w), Some(p.var(self.head_b)))?;
        g.reshape(s, &[n])
    }

    /// Scores and their directional derivatives `dD(x)[dx]`, both `(N)`.
    pub fn forward_tangent<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, dx: Var) -> Result<(Var, Var)> {
        self.trunk.check_input(g, x, "critic_forward")?;
        if g.shape(x) != g.shape(dx) {
            return Err(Error::ShapeMismatch {
                op: "critic tangent",
                lhs: g.shape(x).to_vec(),
                rhs: g.shape(dx).to_vec(),
            });
        }
        let n = g.shape(x)[0];
        let (f, df) = self.trunk.forward_tangent(g, p, x, dx)?;
        let s = g.linear(f, p.var(self.head_w), Some(p.var(self.head_b)))?;
        let ds = g.linear(df, p.var(self.head_w), None)?;
        Ok((g.reshape(s, &[n])?, g.reshape(ds, &[n])?))
    }

    /// Scores for a batch, without gradients.
    pub fn score(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let s = self.forward(&mut g, &p, xv)?;
        Ok(g.value(s).clone())
    }

    /// Gradient of each sample's score with respect to its input.
    pub fn input_gradient<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let values: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
        self.input_gradient_from(&values, x)
    }

    /// As [`Critic::input_gradient`], with parameter values given in store order.
    pub fn input_gradient_from<T: Scalar>(&self, values: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::<T>::new();
        let vars = values.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let p = Bound::from_vars(vars);
        let xv = g.param(x.clone())?;
        let s = self.forward(&mut g, &p, xv)?;
        let total = g.sum_all(s)?;
        g.backward(total)?;
        g.grad(xv).cloned().ok_or_else(|| Error::NonFinite("critic input gradient".into()))
    }
}

/// Style classifier: `K` independent sigmoid confidences per sample.
#[derive(Clone, Debug)]
pub struct Classifier {
    trunk: Trunk,
    head_w: ParamId,
    head_b: ParamId,
    tasks: usize,
}

impl Classifier {
    pub fn build<R: Rng>(config: &CriticConfig, tasks: usize, rng: &mut R) -> Result<(Self, ParamStore)> {
        if tasks == 0 {
            return Err(Error::Config("classifier needs at least one task".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, rng, "");
        let trunk = Trunk::build(config, &mut init)?;
        let c = trunk.out_channels();
        let head_w = init.he("head.w", &[tasks, c], 1.0)?;
        let head_b = init.constant("head.b", &[tasks], 0.0)?;
        Ok((Self { trunk, head_w, head_b, tasks }, store))
    }

    pub fn with_params(config: &CriticConfig, tasks: usize, params: &ParamStore) -> Result<(Self, ParamStore)> {
        let (model, mut fresh) = Self::build(config, tasks, &mut ChaCha8Rng::seed_from_u64(0))?;
        fresh.copy_from(params).map_err(|e| Error::Checkpoint(format!("classifier parameters: {e}")))?;
        Ok((model, fresh))
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Probabilities `(N, K)` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.trunk.check_input(g, x, "classifier_forward")?;
        let f = self.trunk.forward(g, p, x)?;
        let logits = layers::fully_connected(g, f, p.var(self.head_w), p.var(self.head_b))?;
        let probs = g.sigmoid(logits)?;
        g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let p = params.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let s = self.forward(&mut g, &p, xv)?;
        Ok(g.value(s).clone())
    }
}
