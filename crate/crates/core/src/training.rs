//! Supervised and unpaired training loops, optimizer, run log, evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{crop, BatchSampler, Dataset, SampleMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, GeneratorLosses, LossWeights};
use crate::metrics::{self, ImageMetrics, MetricReport, MetricSummary};
use crate::models::{Classifier, Critic, CriticConfig, Gsgn, LatentStyle, ModelConfig, NormMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

// ---- optimizer ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument("gradient count does not match the parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd[i] as f64;
                let mi = beta1 * md[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i] as f64 + (1.0 - beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let delta = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                pd[i] -= delta as f32;
            }
        }
        Ok(())
    }

    fn save(&self, ck: &mut Checkpoint, role: &str, params: &ParamStore) -> Result<()> {
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.tensors.insert(format!("opt.{role}.m.{name}"), m.clone())?;
            ck.tensors.insert(format!("opt.{role}.v.{name}"), v.clone())?;
        }
        Ok(())
    }

    fn load(config: AdamConfig, ck: &Checkpoint, role: &str, params: &ParamStore, step: u64) -> Result<Self> {
        let mut out = Self::new(config, params);
        out.step = step;
        for (i, (name, t)) in params.iter().enumerate() {
            for (buf, kind) in [(&mut out.m[i], "m"), (&mut out.v[i], "v")] {
                let key = format!("opt.{role}.{kind}.{name}");
                let stored = ck
                    .tensors
                    .by_name(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has the wrong shape")));
                }
                *buf = stored.clone();
            }
        }
        Ok(out)
    }
}

// ---- configuration ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    SupervisedSingle,
    SupervisedAll,
    SupervisedMultitask,
    UnpairedSingle,
    UnpairedMultitask,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        Self::SupervisedSingle,
        Self::SupervisedAll,
        Self::SupervisedMultitask,
        Self::UnpairedSingle,
        Self::UnpairedMultitask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SupervisedSingle => "supervised-single",
            Self::SupervisedAll => "supervised-all",
            Self::SupervisedMultitask => "supervised-multitask",
            Self::UnpairedSingle => "unpaired-single",
            Self::UnpairedMultitask => "unpaired-multitask",
        }
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, Self::SupervisedSingle | Self::SupervisedAll | Self::SupervisedMultitask)
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Self::SupervisedMultitask | Self::UnpairedMultitask)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training mode {s}")))
    }
}

/// Learning rate over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at iteration 0 down to 0 at the end.
    Cosine,
}

impl LrSchedule {
    /// Rate for the update that starts at `iteration` (0-based).
    pub fn rate(self, base: f64, iteration: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = iteration as f64 / total.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Generator updates.
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub beta1_supervised: f64,
    pub beta1_adversarial: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Critic updates per generator update.
    pub critic_ratio: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Validate every this many iterations; 0 disables validation.
    pub eval_every: u64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Validate on at most this many samples; 0 means all.
    pub val_limit: usize,
    /// Task trained by the single-task modes; the first task when absent.
    pub task: Option<String>,
    pub model: ModelConfig,
    pub critic: CriticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 4,
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            beta1_supervised: 0.9,
            beta1_adversarial: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            critic_ratio: 30,
            loss: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            val_limit: 0,
            task: None,
            model: ModelConfig::default(),
            critic: CriticConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Supervised training of the small generator on 64x64 data.
    pub fn desk_supervised() -> Self {
        Self {
            iterations: 3000,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            model: ModelConfig::desk(),
            critic: CriticConfig::desk(),
            ..Self::default()
        }
    }

    /// Unpaired training of the small generator; sized for 32x32 data on
    /// one core, with the full critic ratio.
    pub fn desk_unpaired() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            model: ModelConfig { zero_output_init: false, ..ModelConfig::desk() },
            critic: CriticConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.critic_ratio == 0 {
            return Err(Error::Config("critic_ratio must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, b) in [
            ("beta1_supervised", self.beta1_supervised),
            ("beta1_adversarial", self.beta1_adversarial),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        self.loss.validate()?;
        self.model.validate()?;
        self.critic.validate()
    }

    /// Parses JSON or TOML, chosen by the file extension (TOML unless `.json`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let is_json = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn adam(&self, adversarial: bool) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: if adversarial { self.beta1_adversarial } else { self.beta1_supervised },
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Generator configuration used for `mode` on `tasks` tasks.
    pub fn model_for(&self, mode: TrainMode, tasks: usize) -> ModelConfig {
        let mut m = self.model.clone();
        if mode.is_multitask() {
            m.norm_mode = NormMode::Adaptive;
            m.task_count = tasks;
        } else {
            if m.norm_mode == NormMode::Adaptive {
                m.norm_mode = NormMode::Instance;
            }
            m.task_count = 1;
        }
        m
    }
}

// ---- run log ----

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub losses: BTreeMap<String, f64>,
    /// Critic updates performed before this generator update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_updates: Option<usize>,
    /// Mean critic input-gradient norm of each of those updates.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub critic_grad_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricSummary>,
    /// Wall-clock time since the run started; not written to the log file.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

impl LogRecord {
    /// The record without its wall-clock timing.
    pub fn without_timing(&self) -> Self {
        Self { elapsed_ms: 0.0, ..self.clone() }
    }
}

/// Line-delimited JSON log of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Critic gradient norms of every logged critic update, in order.
    pub fn critic_grad_norms(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.critic_grad_norms.iter().copied()).collect()
    }
}

// ---- helpers ----

const TASK_STREAM: u64 = 11;
const CRITIC_TASK_STREAM: u64 = 12;
const INTERP_STREAM: u64 = 13;
const GENERATOR_SEED_OFFSET: u64 = 0x9e37_79b9;

/// Random stream for event `index` of kind `stream`.
fn event_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 16);
    rng
}

/// One-hot rows `(N, K)` for the given tasks.
pub fn one_hot_rows(tasks: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; tasks.len() * k];
    for (i, &t) in tasks.iter().enumerate() {
        if t >= k {
            return Err(Error::InvalidArgument(format!("task {t} out of {k}")));
        }
        data[i * k + t] = 1.0;
    }
    Tensor::new([tasks.len(), k], data)
}

fn style_for(model: &Gsgn, tasks: &[usize]) -> Result<Option<Tensor>> {
    if model.config().is_adaptive() {
        Ok(Some(one_hot_rows(tasks, model.config().task_count)?))
    } else {
        Ok(None)
    }
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} loss")))
    }
}

/// Unclamped generator output without gradients.
fn generate(model: &Gsgn, params: &ParamStore, x: &Tensor, z: Option<&Tensor>) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let zv = z.map(|z| g.constant(z.clone())).transpose()?;
    let y = model.forward(&mut g, &p, xv, zv)?;
    Ok(g.value(y).clone())
}

/// `log10` of the mean squared error over the unpadded pixels.
fn masked_log10_mse(g: &mut Graph<f32>, out: Var, target: Var, masks: &[crate::data::PadMask]) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if masks.iter().all(|m| m.height >= h && m.width >= w) {
        let l = losses::psnr_loss(g, out, target)?;
        return g.neg(l);
    }
    let mask = Tensor::from_fn(shape.clone(), |k| {
        let (b, i, j) = (k / (c * h * w), (k / w) % h, k % w);
        if masks[b].contains(i, j) {
            1.0
        } else {
            0.0
        }
    });
    let covered = mask.sum() as f64;
    let mv = g.constant(mask)?;
    let d = g.sub(out, target)?;
    let d = g.mul(d, mv)?;
    let sq = g.square(d)?;
    let m = g.mean_all(sq)?;
    let m = g.mul_scalar(m, (n * c * h * w) as f64 / covered)?;
    let m = g.clamp(m, losses::MSE_FLOOR, 1e30)?;
    g.log10(m)
}

// ---- supervised ----

/// Loss of one supervised step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// `log10(mse)` before the update.
    pub loss: f64,
    pub psnr_db: f64,
}

/// One gradient step minimizing `log10(mse)` (maximizing PSNR).
pub fn supervised_step(
    model: &Gsgn,
    params: &mut ParamStore,
    opt: &mut Adam,
    batch: &crate::data::Batch,
) -> Result<StepReport> {
    let z = style_for(model, &batch.tasks)?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true)?;
    let x = g.constant(batch.source.clone())?;
    let t = g.constant(batch.target.clone())?;
    let zv = z.map(|z| g.constant(z)).transpose()?;
    let y = model.forward(&mut g, &p, x, zv)?;
    let loss = masked_log10_mse(&mut g, y, t, &batch.masks)?;
    let lv = check_finite("supervised", g.value(loss).item()? as f64)?;
    g.backward(loss)?;
    let grads = params.gradients(&g, &p)?;
    opt.update(params, &grads)?;
    Ok(StepReport { loss: lv, psnr_db: -10.0 * lv })
}

// ---- unpaired ----

/// Networks and optimizers of the two-cycle adversarial procedure.
#[derive(Clone, Debug)]
pub struct CycleNets {
    pub g_st: Gsgn,
    pub p_st: ParamStore,
    pub g_ts: Gsgn,
    pub p_ts: ParamStore,
    pub d_s: Critic,
    pub pd_s: ParamStore,
    pub d_t: Critic,
    pub pd_t: ParamStore,
    pub classifier: Option<(Classifier, ParamStore)>,
    pub opt_st: Adam,
    pub opt_ts: Adam,
    pub opt_ds: Adam,
    pub opt_dt: Adam,
    pub opt_c: Option<Adam>,
}

impl CycleNets {
    pub fn build(model: &ModelConfig, critic: &CriticConfig, tasks: usize, use_classifier: bool, config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g_st, p_st) = Gsgn::build(model, &mut rng)?;
        let (g_ts, p_ts) = Gsgn::build(&checkpoint::reverse_config(model), &mut rng)?;
        let (d_s, pd_s) = Critic::build(critic, &mut rng)?;
        let (d_t, pd_t) = Critic::build(critic, &mut rng)?;
        let classifier = if use_classifier { Some(Classifier::build(critic, tasks, &mut rng)?) } else { None };
        let adam = config.adam(true);
        Ok(Self {
            opt_st: Adam::new(adam, &p_st),
            opt_ts: Adam::new(adam, &p_ts),
            opt_ds: Adam::new(adam, &pd_s),
            opt_dt: Adam::new(adam, &pd_t),
            opt_c: classifier.as_ref().map(|(_, p)| Adam::new(adam, p)),
            g_st,
            p_st,
            g_ts,
            p_ts,
            d_s,
            pd_s,
            d_t,
            pd_t,
            classifier,
        })
    }
}

/// Losses and diagnostics of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticReport {
    pub loss_s: f64,
    pub loss_t: f64,
    /// Mean `||grad D||` over both critics and the batch.
    pub grad_norm: f64,
}

/// One update of both critics on a fresh unpaired batch.
pub fn critic_step(
    nets: &mut CycleNets,
    batch: &crate::data::Batch,
    weights: &LossWeights,
    seed: u64,
    index: u64,
) -> Result<CriticReport> {
    let n = batch.source.shape()[0];
    let mut rng = event_rng(seed, CRITIC_TASK_STREAM, index);
    let tasks: Vec<usize> = (0..n).map(|_| rng.random_range(0..nets.g_st.config().task_count)).collect();
    let z = style_for(&nets.g_st, &tasks)?;
    let fake_t = generate(&nets.g_st, &nets.p_st, &batch.source, z.as_ref())?;
    let fake_s = generate(&nets.g_ts, &nets.p_ts, &batch.target, None)?;
    let mut urng = event_rng(seed, INTERP_STREAM, index);
    let u_t: Vec<f64> = (0..n).map(|_| urng.random_range(0.0..=1.0)).collect();
    let u_s: Vec<f64> = (0..n).map(|_| urng.random_range(0.0..=1.0)).collect();

    let mut g = Graph::<f32>::new();
    let bt = nets.pd_t.bind(&mut g, true)?;
    let bs = nets.pd_s.bind(&mut g, true)?;
    let side = |g: &mut Graph<f32>, critic: &Critic, b: &crate::params::Bound, real: &Tensor, fake: &Tensor, u: &[f64]| -> Result<(Var, Vec<f64>)> {
        let pen = losses::gradient_penalty(g, critic, b, real, fake, u)?;
        let rv = g.constant(real.clone())?;
        let fv = g.constant(fake.clone())?;
        let dr = critic.forward(g, b, rv)?;
        let df = critic.forward(g, b, fv)?;
        Ok((losses::critic_loss(g, dr, df, pen.lambda, weights)?, pen.grad_norm))
    };
    let (lt, nt) = side(&mut g, &nets.d_t, &bt, &batch.target, &fake_t, &u_t)?;
    let (ls, ns) = side(&mut g, &nets.d_s, &bs, &batch.source, &fake_s, &u_s)?;
    let loss_t = check_finite("critic", g.value(lt).item()? as f64)?;
    let loss_s = check_finite("critic", g.value(ls).item()? as f64)?;
    let total = g.add(lt, ls)?;
    g.backward(total)?;
    let grads_t = nets.pd_t.gradients(&g, &bt)?;
    let grads_s = nets.pd_s.gradients(&g, &bs)?;
    nets.opt_dt.update(&mut nets.pd_t, &grads_t)?;
    nets.opt_ds.update(&mut nets.pd_s, &grads_s)?;
    let norms: Vec<f64> = nt.iter().chain(&ns).copied().collect();
    Ok(CriticReport { loss_s, loss_t, grad_norm: norms.iter().sum::<f64>() / norms.len() as f64 })
}

/// Loss breakdown of one generator update.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorReport {
    pub total: f64,
    pub cycle: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub conditional: Option<f64>,
    pub classifier: Option<f64>,
}

/// One update of both generators over the two cycles, then one classifier
/// update on the real targets.
pub fn generator_step(
    nets: &mut CycleNets,
    batch: &crate::data::Batch,
    weights: &LossWeights,
    seed: u64,
    index: u64,
) -> Result<GeneratorReport> {
    let n = batch.source.shape()[0];
    let k = nets.g_st.config().task_count;
    let adaptive = nets.g_st.config().is_adaptive();
    if adaptive && batch.tasks.iter().any(|&t| t >= k) {
        return Err(Error::InvalidArgument("target task labels exceed the model's task count".into()));
    }
    let mut rng = event_rng(seed, TASK_STREAM, index);
    let drawn: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let z_draw = style_for(&nets.g_st, &drawn)?;
    let z_real = style_for(&nets.g_st, &batch.tasks)?;
    let use_co = nets.classifier.is_some() && weights.w_co > 0.0;

    let mut g = Graph::<f32>::new();
    let b_st = nets.p_st.bind(&mut g, true)?;
    let b_ts = nets.p_ts.bind(&mut g, true)?;
    let b_dt = nets.pd_t.bind(&mut g, false)?;
    let b_ds = nets.pd_s.bind(&mut g, false)?;
    let x_s = g.constant(batch.source.clone())?;
    let x_t = g.constant(batch.target.clone())?;
    let zd = z_draw.clone().map(|z| g.constant(z)).transpose()?;
    let zr = z_real.map(|z| g.constant(z)).transpose()?;

    let fake_t = nets.g_st.forward(&mut g, &b_st, x_s, zd)?;
    let cyc_s = nets.g_ts.forward(&mut g, &b_ts, fake_t, None)?;
    let fake_s = nets.g_ts.forward(&mut g, &b_ts, x_t, None)?;
    let cyc_t = nets.g_st.forward(&mut g, &b_st, fake_s, zr)?;

    let cycle = losses::cycle_loss(&mut g, x_s, cyc_s, x_t, cyc_t)?;
    let identity = losses::identity_loss(&mut g, x_s, fake_t, x_t, fake_s)?;
    let dft = nets.d_t.forward(&mut g, &b_dt, fake_t)?;
    let dfs = nets.d_s.forward(&mut g, &b_ds, fake_s)?;
    let at = losses::adversarial_loss(&mut g, dft)?;
    let as_ = losses::adversarial_loss(&mut g, dfs)?;
    let adversarial = g.add(at, as_)?;
    let conditional = match (&nets.classifier, use_co) {
        (Some((c, pc)), true) => {
            let b_c = pc.bind(&mut g, false)?;
            let probs = c.forward(&mut g, &b_c, fake_t)?;
            let zv = zd.expect("adaptive model has a style");
            Some(losses::conditional_loss(&mut g, zv, probs)?)
        }
        _ => None,
    };
    let eff = if use_co { weights.clone() } else { LossWeights { w_co: 0.0, ..weights.clone() } };
    let comps = GeneratorLosses { cycle, identity, adversarial, conditional };
    let total = losses::total_generator_loss(&mut g, &comps, &eff)?;
    let value = |g: &Graph<f32>, v: Var| -> Result<f64> { Ok(g.value(v).item()? as f64) };
    let mut report = GeneratorReport {
        total: check_finite("generator", value(&g, total)?)?,
        cycle: value(&g, cycle)?,
        identity: value(&g, identity)?,
        adversarial: value(&g, adversarial)?,
        conditional: conditional.map(|c| value(&g, c)).transpose()?,
        classifier: None,
    };
    g.backward(total)?;
    let grads_st = nets.p_st.gradients(&g, &b_st)?;
    let grads_ts = nets.p_ts.gradients(&g, &b_ts)?;
    nets.opt_st.update(&mut nets.p_st, &grads_st)?;
    nets.opt_ts.update(&mut nets.p_ts, &grads_ts)?;

    if use_co {
        let (c, pc) = nets.classifier.as_mut().expect("classifier present");
        let opt = nets.opt_c.as_mut().expect("classifier optimizer present");
        let mut g = Graph::<f32>::new();
        let b_c = pc.bind(&mut g, true)?;
        let x_t = g.constant(batch.target.clone())?;
        let labels = g.constant(one_hot_rows(&batch.tasks, k)?)?;
        let probs = c.forward(&mut g, &b_c, x_t)?;
        let l = losses::conditional_loss(&mut g, labels, probs)?;
        report.classifier = Some(check_finite("classifier", g.value(l).item()? as f64)?);
        g.backward(l)?;
        let grads = pc.gradients(&g, &b_c)?;
        opt.update(pc, &grads)?;
    }
    Ok(report)
}

/// Breakdown of one full cycle step.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleReport {
    pub critics: Vec<CriticReport>,
    pub generator: GeneratorReport,
}

/// `critic_ratio` critic updates, each on a fresh batch, then one generator
/// update. Iteration `i` uses critic batches `i * ratio ..` of
/// `critic_batches` and batch `i` of `generator_batches`.
pub fn cycle_step(
    nets: &mut CycleNets,
    critic_batches: &BatchSampler,
    generator_batches: &BatchSampler,
    config: &TrainConfig,
    iteration: u64,
) -> Result<CycleReport> {
    let ratio = config.critic_ratio as u64;
    let mut critics = Vec::with_capacity(config.critic_ratio);
    for j in 0..ratio {
        let idx = iteration * ratio + j;
        let b = critic_batches.batch(idx)?;
        critics.push(critic_step(nets, &b, &config.loss, config.seed, idx)?);
    }
    let b = generator_batches.batch(iteration)?;
    let generator = generator_step(nets, &b, &config.loss, config.seed, iteration)?;
    Ok(CycleReport { critics, generator })
}

// ---- evaluation ----

/// Per-task metric reports of a generator on a dataset, padding excluded.
pub fn evaluate(model: &Gsgn, params: &ParamStore, ds: &Dataset, limit: usize) -> Result<Vec<(String, MetricReport)>> {
    evaluate_with(ds, limit, |x, tasks| model.infer(params, x, style_for(model, tasks)?.as_ref()))
}

/// The samples of `ds` whose tasks appear in `tasks`, renumbered to that order.
pub fn align_tasks(ds: &Dataset, tasks: &[String]) -> Result<Dataset> {
    let keep = tasks
        .iter()
        .map(|t| ds.task_index(t).ok_or_else(|| Error::Dataset(format!("dataset has no task {t}"))))
        .collect::<Result<Vec<_>>>()?;
    ds.restrict_tasks(&keep)
}

/// Reports for the untouched sources against the targets.
pub fn evaluate_identity(ds: &Dataset, limit: usize) -> Result<Vec<(String, MetricReport)>> {
    evaluate_with(ds, limit, |x, _| Ok(x.clone()))
}

fn evaluate_with(
    ds: &Dataset,
    limit: usize,
    mut run: impl FnMut(&Tensor, &[usize]) -> Result<Tensor>,
) -> Result<Vec<(String, MetricReport)>> {
    if ds.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let take = if limit == 0 { ds.len() } else { limit.min(ds.len()) };
    let mut reports: Vec<(String, MetricReport)> = ds.tasks.iter().map(|t| (t.clone(), MetricReport::default())).collect();
    const CHUNK: usize = 8;
    let samples = &ds.samples[..take];
    let mut start = 0;
    while start < samples.len() {
        let shape = samples[start].source.shape().to_vec();
        let mut end = start + 1;
        while end < samples.len() && end - start < CHUNK && samples[end].source.shape() == shape.as_slice() {
            end += 1;
        }
        let chunk = &samples[start..end];
        let x = Tensor::stack(&chunk.iter().map(|s| s.source.as_ref()).collect::<Vec<_>>())?;
        let tasks: Vec<usize> = chunk.iter().map(|s| s.task).collect();
        let y = run(&x, &tasks)?;
        for (i, s) in chunk.iter().enumerate() {
            let out = crop(&y.batch_item(i)?, s.mask.height, s.mask.width)?;
            let tgt = crop(&s.target.as_ref().clone().reshape([1, shape[0], shape[1], shape[2]])?, s.mask.height, s.mask.width)?;
            reports[s.task].1.push(ImageMetrics::measure(s.id.clone(), &out, &tgt)?);
        }
        start = end;
    }
    Ok(reports.into_iter().filter(|(_, r)| !r.is_empty()).collect())
}

/// Summary over every evaluated sample.
pub fn pooled_summary(reports: &[(String, MetricReport)]) -> MetricSummary {
    let mut all = MetricReport::default();
    for (_, r) in reports {
        all.images.extend(r.images.iter().cloned());
    }
    all.summary()
}

/// Mean `PSNR(x_s, G_ts(G_st(x_s, z)))` over the sources of `ds`, averaged over
/// every task style for adaptive generators.
pub fn cycle_psnr(nets: &CycleNets, ds: &Dataset, limit: usize) -> Result<f64> {
    let take = if limit == 0 { ds.sources.len() } else { limit.min(ds.sources.len()) };
    let k = nets.g_st.config().task_count;
    let styles: Vec<Option<usize>> = if nets.g_st.config().is_adaptive() { (0..k).map(Some).collect() } else { vec![None] };
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in ds.sources[..take].chunks(8) {
        let x = Tensor::stack(&chunk.iter().map(|s| s.1.as_ref()).collect::<Vec<_>>())?;
        for &s in &styles {
            let z = s.map(|t| LatentStyle::one_hot(k, t)?.batch(chunk.len())).transpose()?;
            let fake = nets.g_st.infer(&nets.p_st, &x, z.as_ref())?;
            let back = nets.g_ts.infer(&nets.p_ts, &fake, None)?;
            for i in 0..chunk.len() {
                total += metrics::psnr(&x.batch_item(i)?, &back.batch_item(i)?, 1.0)?;
                count += 1;
            }
        }
    }
    Ok(total / count.max(1) as f64)
}

// ---- run ----

/// Paths used by [`run_training`] when writing to disk.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `run_log.jsonl`, periodic `checkpoint_<iter>.gsgn`, the final
    /// `checkpoint.gsgn` and, with validation, `best.gsgn`.
    pub out_dir: Option<PathBuf>,
    /// Training state to continue from.
    pub resume: Option<Checkpoint>,
}

pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.gsgn";
pub const BEST_CHECKPOINT: &str = "best.gsgn";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final state, including optimizer and critic state.
    pub checkpoint: Checkpoint,
    /// Parameters with the best mean validation PSNR, when validation ran.
    pub best: Option<Checkpoint>,
    pub log: RunLog,
}

enum State {
    Supervised { model: Gsgn, params: ParamStore, opt: Adam, sampler: BatchSampler },
    Unpaired { nets: Box<CycleNets>, critic_batches: BatchSampler, generator_batches: BatchSampler },
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    mode: TrainMode,
    train_config: TrainConfig,
    optimizer_steps: BTreeMap<String, u64>,
    best_val_psnr: Option<f64>,
}

fn select_data(mode: TrainMode, data: &Dataset, config: &TrainConfig) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    match mode {
        TrainMode::SupervisedSingle | TrainMode::UnpairedSingle => {
            let idx = match &config.task {
                Some(name) => data.task_index(name).ok_or_else(|| Error::Config(format!("unknown task {name}")))?,
                None => 0,
            };
            data.restrict_tasks(&[idx])
        }
        _ => Ok(data.clone()),
    }
}

fn build_state(mode: TrainMode, train: Arc<Dataset>, config: &TrainConfig, resume: Option<&Checkpoint>) -> Result<State> {
    let k = train.tasks.len();
    let model_cfg = config.model_for(mode, k);
    let meta: Option<RunMeta> = resume.map(|ck| serde_json::from_value(ck.metadata.clone())).transpose()?;
    if let Some(m) = &meta {
        if m.mode != mode {
            return Err(Error::Checkpoint(format!("checkpoint was trained in mode {}, not {mode}", m.mode)));
        }
    }
    let steps = |role: &str| meta.as_ref().and_then(|m| m.optimizer_steps.get(role).copied()).unwrap_or(0);
    if mode.is_supervised() {
        let sampler = BatchSampler::new(train, config.batch_size, config.seed, SampleMode::Paired)?;
        let adam = config.adam(false);
        let (model, params, opt) = match resume {
            Some(ck) => {
                let (model, params) = ck.generator()?;
                let opt = Adam::load(adam, ck, "generator", &params, steps("generator"))?;
                (model, params, opt)
            }
            None => {
                let (model, params) = Gsgn::build(&model_cfg, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
                let opt = Adam::new(adam, &params);
                (model, params, opt)
            }
        };
        Ok(State::Supervised { model, params, opt, sampler })
    } else {
        let critic_batches = BatchSampler::new(train.clone(), config.batch_size, config.seed, SampleMode::Unpaired)?;
        let generator_batches =
            BatchSampler::new(train, config.batch_size, config.seed.wrapping_add(GENERATOR_SEED_OFFSET), SampleMode::Unpaired)?;
        let use_c = mode.is_multitask() && config.loss.w_co > 0.0;
        let mut nets = CycleNets::build(&model_cfg, &config.critic, k, use_c, config, config.seed)?;
        if let Some(ck) = resume {
            let adam = config.adam(true);
            (nets.g_st, nets.p_st) = ck.generator()?;
            (nets.g_ts, nets.p_ts) = ck.generator_at(checkpoint::GENERATOR_TS)?;
            (nets.d_s, nets.pd_s) = ck.critic_at(checkpoint::CRITIC_S)?;
            (nets.d_t, nets.pd_t) = ck.critic_at(checkpoint::CRITIC_T)?;
            nets.opt_st = Adam::load(adam, ck, "generator", &nets.p_st, steps("generator"))?;
            nets.opt_ts = Adam::load(adam, ck, "generator_ts", &nets.p_ts, steps("generator_ts"))?;
            nets.opt_ds = Adam::load(adam, ck, "critic_s", &nets.pd_s, steps("critic_s"))?;
            nets.opt_dt = Adam::load(adam, ck, "critic_t", &nets.pd_t, steps("critic_t"))?;
            if use_c {
                let (c, pc) = ck.classifier()?;
                nets.opt_c = Some(Adam::load(adam, ck, "classifier", &pc, steps("classifier"))?);
                nets.classifier = Some((c, pc));
            }
        }
        Ok(State::Unpaired { nets: Box::new(nets), critic_batches, generator_batches })
    }
}

fn state_checkpoint(
    state: &State,
    mode: TrainMode,
    tasks: &[String],
    config: &TrainConfig,
    iteration: u64,
    best: Option<f64>,
    with_optimizer: bool,
) -> Result<Checkpoint> {
    let mut steps = BTreeMap::new();
    let mut ck = match state {
        State::Supervised { model, params, opt, .. } => {
            let mut ck = Checkpoint::from_generator(model.config(), tasks.to_vec(), params)?;
            if with_optimizer {
                opt.save(&mut ck, "generator", params)?;
                steps.insert("generator".to_string(), opt.steps());
            }
            ck
        }
        State::Unpaired { nets, .. } => {
            let mut ck = Checkpoint::from_generator(nets.g_st.config(), tasks.to_vec(), &nets.p_st)?;
            ck.critic_config = Some(config.critic.clone());
            ck.insert_store(checkpoint::GENERATOR_TS, &nets.p_ts)?;
            ck.insert_store(checkpoint::CRITIC_S, &nets.pd_s)?;
            ck.insert_store(checkpoint::CRITIC_T, &nets.pd_t)?;
            if let Some((_, pc)) = &nets.classifier {
                ck.insert_store(checkpoint::CLASSIFIER, pc)?;
            }
            if with_optimizer {
                let mut parts = vec![
                    ("generator", &nets.opt_st, &nets.p_st),
                    ("generator_ts", &nets.opt_ts, &nets.p_ts),
                    ("critic_s", &nets.opt_ds, &nets.pd_s),
                    ("critic_t", &nets.opt_dt, &nets.pd_t),
                ];
                if let (Some((_, pc)), Some(o)) = (&nets.classifier, &nets.opt_c) {
                    parts.push(("classifier", o, pc));
                }
                for (role, o, p) in parts {
                    o.save(&mut ck, role, p)?;
                    steps.insert(role.to_string(), o.steps());
                }
            }
            ck
        }
    };
    ck.iteration = Some(iteration);
    ck.metadata = serde_json::to_value(RunMeta { mode, train_config: config.clone(), optimizer_steps: steps, best_val_psnr: best })?;
    Ok(ck)
}

fn validate_state(state: &State, val: &Dataset, limit: usize) -> Result<MetricSummary> {
    let reports = match state {
        State::Supervised { model, params, .. } => evaluate(model, params, val, limit)?,
        State::Unpaired { nets, .. } => evaluate(&nets.g_st, &nets.p_st, val, limit)?,
    };
    Ok(pooled_summary(&reports))
}

/// Runs `config.iterations` generator updates (continuing from
/// `options.resume` when given), validating every `eval_every` iterations.
pub fn run_training(
    mode: TrainMode,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    let data = Arc::new(select_data(mode, train, config)?);
    let val = val.map(|v| select_data(mode, v, config)).transpose()?;
    let tasks = data.tasks.clone();
    let mut state = build_state(mode, data, config, options.resume.as_ref())?;
    let start = options.resume.as_ref().and_then(|c| c.iteration).unwrap_or(0);
    let mut best_psnr: Option<f64> = options
        .resume
        .as_ref()
        .and_then(|c| c.metadata.get("best_val_psnr").and_then(|v| v.as_f64()));
    let mut best: Option<Checkpoint> = None;
    let mut log = RunLog::default();
    let mut sink = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(start > 0)
                .write(true)
                .truncate(start == 0)
                .open(dir.join(RUN_LOG_FILE))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let clock = Instant::now();
    for it in start..config.iterations {
        let mut losses = BTreeMap::new();
        let mut record = LogRecord {
            iteration: it + 1,
            losses: BTreeMap::new(),
            critic_updates: None,
            critic_grad_norms: Vec::new(),
            validation: None,
            elapsed_ms: 0.0,
        };
        let lr = config.lr_schedule.rate(config.learning_rate, it, config.iterations);
        match &mut state {
            State::Supervised { model, params, opt, sampler } => {
                opt.config.lr = lr;
                let batch = sampler.batch(it)?;
                let r = supervised_step(model, params, opt, &batch)?;
                losses.insert("log10_mse".into(), r.loss);
                losses.insert("psnr_db".into(), r.psnr_db);
            }
            State::Unpaired { nets, critic_batches, generator_batches } => {
                for o in [&mut nets.opt_st, &mut nets.opt_ts, &mut nets.opt_ds, &mut nets.opt_dt] {
                    o.config.lr = lr;
                }
                if let Some(o) = nets.opt_c.as_mut() {
                    o.config.lr = lr;
                }
                let r = cycle_step(nets, critic_batches, generator_batches, config, it)?;
                let mean = |f: &dyn Fn(&CriticReport) -> f64| r.critics.iter().map(f).sum::<f64>() / r.critics.len() as f64;
                losses.insert("critic_s".into(), mean(&|c| c.loss_s));
                losses.insert("critic_t".into(), mean(&|c| c.loss_t));
                losses.insert("total".into(), r.generator.total);
                losses.insert("cycle".into(), r.generator.cycle);
                losses.insert("identity".into(), r.generator.identity);
                losses.insert("adversarial".into(), r.generator.adversarial);
                if let Some(c) = r.generator.conditional {
                    losses.insert("conditional".into(), c);
                }
                if let Some(c) = r.generator.classifier {
                    losses.insert("classifier".into(), c);
                }
                record.critic_updates = Some(r.critics.len());
                record.critic_grad_norms = r.critics.iter().map(|c| c.grad_norm).collect();
            }
        }
        record.losses = losses;
        let done = it + 1;
        if let (Some(v), true) = (&val, config.eval_every > 0 && done % config.eval_every == 0) {
            let summary = validate_state(&state, v, config.val_limit)?;
            if best_psnr.is_none_or(|b| summary.psnr_db > b) {
                best_psnr = Some(summary.psnr_db);
                best = Some(state_checkpoint(&state, mode, &tasks, config, done, best_psnr, false)?);
                if let Some(dir) = &options.out_dir {
                    best.as_ref().expect("just set").save(dir.join(BEST_CHECKPOINT))?;
                }
            }
            record.validation = Some(summary);
        }
        record.elapsed_ms = clock.elapsed().as_secs_f64() * 1e3;
        if let Some(w) = sink.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }
        log.records.push(record);
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations {
                state_checkpoint(&state, mode, &tasks, config, done, best_psnr, true)?
                    .save(dir.join(format!("checkpoint_{done}.gsgn")))?;
            }
        }
    }
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    let checkpoint = state_checkpoint(&state, mode, &tasks, config, config.iterations.max(start), best_psnr, true)?;
    if let Some(dir) = &options.out_dir {
        checkpoint.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint, best, log })
}

/// Loads the unpaired networks stored in a training checkpoint.
pub fn cycle_nets_from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<CycleNets> {
    let mut nets = CycleNets::build(&ck.config, &config.critic, ck.tasks.len(), false, config, 0)?;
    (nets.g_st, nets.p_st) = ck.generator()?;
    (nets.g_ts, nets.p_ts) = ck.generator_at(checkpoint::GENERATOR_TS)?;
    Ok(nets)
}

/// Path of the final checkpoint inside a run directory.
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(FINAL_CHECKPOINT)
}
