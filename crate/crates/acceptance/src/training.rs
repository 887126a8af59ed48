use std::collections::BTreeMap;

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::data::{default_styles, make_synthetic_dataset, make_synthetic_dataset_sized, Dataset, SyntheticDataset};
use gsgn_core::models::{CriticConfig, LatentStyle, ModelConfig};
use gsgn_core::training::{
    cycle_nets_from_checkpoint, cycle_psnr, evaluate, final_checkpoint_path, run_training, CycleNets, LogRecord, RunLog,
    RunOptions, TrainConfig, TrainMode,
};
use gsgn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Context, CriterionResult, Outcome};

const STYLES: usize = 3;
const BASE_IMAGES: usize = 500;
const DATA_SEED: u64 = 0;
const MIN_GAIN_DB: f64 = 6.0;
const MIN_MT_MARGIN_DB: f64 = 0.5;
const SEEDS: [u64; 3] = [0, 1, 2];

/// Generator updates for the unpaired smoke run.
pub const UNPAIRED_ITERATIONS: u64 = 2000;
/// Side length of the unpaired smoke data.
pub const UNPAIRED_IMAGE_SIZE: usize = 32;
const UNPAIRED_MIN_GAIN_DB: f64 = 5.0;
const GRAD_NORM_RANGE: (f64, f64) = (0.5, 1.5);

/// Supervised step counts at desk scale.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedBudget {
    /// Steps of each single-task run.
    pub single: u64,
    /// Steps of the joint runs (all tasks pooled, and multitask).
    pub joint: u64,
}

impl SupervisedBudget {
    /// The joint runs see three tasks, so they get three times the steps of
    /// one single-task run.
    pub const DESK: Self = Self { single: 600, joint: 1800 };
}

/// Per-task test PSNR of one run, in task order.
type TaskPsnr = Vec<f64>;

#[derive(Default)]
pub(crate) struct SupervisedCache {
    data: Option<SyntheticDataset>,
    single: BTreeMap<u64, TaskPsnr>,
}

impl SupervisedCache {
    fn data(&mut self) -> Result<&SyntheticDataset, gsgn_core::Error> {
        if self.data.is_none() {
            self.data = Some(make_synthetic_dataset(BASE_IMAGES, &default_styles(STYLES), DATA_SEED)?);
        }
        Ok(self.data.as_ref().expect("just built"))
    }

    fn single(&mut self, seed: u64) -> Result<TaskPsnr, gsgn_core::Error> {
        if let Some(p) = self.single.get(&seed) {
            return Ok(p.clone());
        }
        let ds = self.data()?.clone();
        let mut out = Vec::new();
        for (i, task) in ds.train.tasks.iter().enumerate() {
            let cfg = supervised_config(seed, SupervisedBudget::DESK.single, Some(task.clone()));
            let run = run_training(TrainMode::SupervisedSingle, &ds.train, None, &cfg, &RunOptions::default())?;
            let test = ds.test.restrict_tasks(&[i])?;
            out.push(test_psnr(&run.checkpoint, &test)?[0]);
        }
        self.single.insert(seed, out.clone());
        Ok(out)
    }
}

fn supervised_config(seed: u64, iterations: u64, task: Option<String>) -> TrainConfig {
    TrainConfig { seed, iterations, task, ..TrainConfig::desk_supervised() }
}

fn test_psnr(ck: &Checkpoint, test: &Dataset) -> Result<TaskPsnr, gsgn_core::Error> {
    let (model, params) = ck.generator()?;
    Ok(evaluate(&model, &params, test, 0)?.iter().map(|(_, r)| r.mean_psnr()).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn joint(ds: &SyntheticDataset, mode: TrainMode, seed: u64) -> Result<TaskPsnr, gsgn_core::Error> {
    let cfg = supervised_config(seed, SupervisedBudget::DESK.joint, None);
    let run = run_training(mode, &ds.train, None, &cfg, &RunOptions::default())?;
    test_psnr(&run.checkpoint, &ds.test)
}

pub fn supervised_desk(ctx: &mut Context) -> CriterionResult {
    let baseline = ctx.supervised.data()?.test.identity_psnr()?;
    let tasks = ctx.supervised.data()?.test.tasks.clone();
    let trained = ctx.supervised.single(0)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for ((task, b), t) in tasks.iter().zip(&baseline).zip(&trained) {
        pass &= *t >= b + MIN_GAIN_DB;
        parts.push(format!("{task} {b:.2} -> {t:.2} dB ({:+.2})", t - b));
    }
    Ok(Outcome::check(
        pass,
        format!("{} steps per style, need +{MIN_GAIN_DB} dB: {}", SupervisedBudget::DESK.single, parts.join(", ")),
    ))
}

pub fn multitask_ordering(ctx: &mut Context) -> CriterionResult {
    let mut rows = Vec::new();
    let (mut mt, mut single, mut all) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SEEDS {
        let s = mean(&ctx.supervised.single(seed)?);
        let ds = ctx.supervised.data()?.clone();
        let a = mean(&joint(&ds, TrainMode::SupervisedAll, seed)?);
        let m = mean(&joint(&ds, TrainMode::SupervisedMultitask, seed)?);
        rows.push(format!("seed {seed}: mt {m:.2} single {s:.2} all {a:.2}"));
        mt.push(m);
        single.push(s);
        all.push(a);
    }
    let (m, s, a) = (mean(&mt), mean(&single), mean(&all));
    let pass = m >= s && s >= a && m - a >= MIN_MT_MARGIN_DB;
    Ok(Outcome::check(
        pass,
        format!(
            "seed mean: multitask {m:.2} >= single {s:.2} >= all {a:.2}, multitask - all {:.2} dB (need {MIN_MT_MARGIN_DB}); {}",
            m - a,
            rows.join("; ")
        ),
    ))
}

fn unpaired_config() -> TrainConfig {
    TrainConfig { iterations: UNPAIRED_ITERATIONS, task: None, ..TrainConfig::desk_unpaired() }
}

pub fn unpaired_smoke(_: &mut Context) -> CriterionResult {
    let ds = make_synthetic_dataset_sized(BASE_IMAGES, &default_styles(STYLES), DATA_SEED, UNPAIRED_IMAGE_SIZE)?;
    let cfg = unpaired_config();
    let mode = TrainMode::UnpairedSingle;
    let test = ds.test.restrict_tasks(&[0])?;
    let untrained = CycleNets::build(&cfg.model_for(mode, 1), &cfg.critic, 1, false, &cfg, cfg.seed)?;
    let before = cycle_psnr(&untrained, &test, 0)?;
    let run = run_training(mode, &ds.train, None, &cfg, &RunOptions::default())?;
    let after = cycle_psnr(&cycle_nets_from_checkpoint(&run.checkpoint, &cfg)?, &test, 0)?;
    let ratio_ok = run.log.records.len() as u64 == UNPAIRED_ITERATIONS
        && run
            .log
            .records
            .iter()
            .all(|r| r.critic_updates == Some(cfg.critic_ratio) && r.critic_grad_norms.len() == cfg.critic_ratio);
    let norms = run.log.critic_grad_norms();
    let tail = mean(&norms[norms.len().saturating_sub(100)..]);
    let pass = ratio_ok && after - before >= UNPAIRED_MIN_GAIN_DB && (GRAD_NORM_RANGE.0..=GRAD_NORM_RANGE.1).contains(&tail);
    Ok(Outcome::check(
        pass,
        format!(
            "{UNPAIRED_ITERATIONS} generator updates x {} critic updates (logged exactly: {ratio_ok}), {}px batch {}; cycle PSNR {before:.2} -> {after:.2} dB ({:+.2}, need +{UNPAIRED_MIN_GAIN_DB}); mean critic grad norm over last 100 updates {tail:.3} (need [{}, {}])",
            cfg.critic_ratio,
            UNPAIRED_IMAGE_SIZE,
            cfg.batch_size,
            after - before,
            GRAD_NORM_RANGE.0,
            GRAD_NORM_RANGE.1
        ),
    ))
}

fn small_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 2,
        learning_rate: 1e-3,
        critic_ratio: 3,
        checkpoint_every: iterations / 2,
        model: ModelConfig { base_channels: 4, blocks_per_level: vec![1, 1, 1], latent_w_dim: 8, zero_output_init: false, ..ModelConfig::default() },
        critic: CriticConfig { base_channels: 4, stages: 2, max_channels: 8, ..CriticConfig::default() },
        ..TrainConfig::default()
    }
}

fn strip(log: &RunLog) -> Vec<LogRecord> {
    log.records.iter().map(LogRecord::without_timing).collect()
}

/// Runs `mode` twice, reloads the final checkpoint from disk and resumes from
/// the midpoint checkpoint. Returns the failed checks.
fn replay(ds: &SyntheticDataset, mode: TrainMode, root: &std::path::Path) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut failed = Vec::new();
    let cfg = small_config(6);
    let dirs = [root.join(format!("{mode}-a")), root.join(format!("{mode}-b")), root.join(format!("{mode}-r"))];
    let train = |dir: &std::path::Path, resume: Option<Checkpoint>| {
        run_training(mode, &ds.train, None, &cfg, &RunOptions { out_dir: Some(dir.to_path_buf()), resume })
    };
    let a = train(&dirs[0], None)?;
    let b = train(&dirs[1], None)?;
    if strip(&a.log) != strip(&b.log) {
        failed.push(format!("{mode}: run logs differ"));
    }
    let log_a = std::fs::read(dirs[0].join(gsgn_core::training::RUN_LOG_FILE))?;
    if log_a != std::fs::read(dirs[1].join(gsgn_core::training::RUN_LOG_FILE))? {
        failed.push(format!("{mode}: run log files differ"));
    }

    let loaded = Checkpoint::load(final_checkpoint_path(&dirs[0]))?;
    if loaded.to_bytes()? != a.checkpoint.to_bytes()? || loaded.content_hash()? != a.checkpoint.content_hash()? {
        failed.push(format!("{mode}: checkpoint changed on disk"));
    }
    let (m0, p0) = a.checkpoint.generator()?;
    let (m1, p1) = loaded.generator()?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn([2, 3, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let z = m0
        .config()
        .is_adaptive()
        .then(|| LatentStyle::from_weights(vec![0.4; m0.config().task_count]).and_then(|s| s.batch(2)))
        .transpose()?;
    if m0.infer(&p0, &x, z.as_ref())?.data() != m1.infer(&p1, &x, z.as_ref())?.data() {
        failed.push(format!("{mode}: reloaded forward differs"));
    }

    let mid = Checkpoint::load(dirs[0].join(format!("checkpoint_{}.gsgn", cfg.iterations / 2)))?;
    let resumed = train(&dirs[2], Some(mid))?;
    if resumed.checkpoint.tensors != a.checkpoint.tensors {
        failed.push(format!("{mode}: resumed parameters differ"));
    }
    if strip(&resumed.log) != strip(&a.log)[(cfg.iterations / 2) as usize..] {
        failed.push(format!("{mode}: resumed log differs"));
    }
    Ok(failed)
}

pub fn determinism(_: &mut Context) -> CriterionResult {
    let ds = make_synthetic_dataset_sized(12, &default_styles(2), 5, 16)?;
    let root = tempfile::tempdir()?;
    let mut failed = Vec::new();
    for mode in [TrainMode::SupervisedSingle, TrainMode::SupervisedMultitask, TrainMode::UnpairedMultitask] {
        failed.extend(replay(&ds, mode, root.path())?);
    }
    let detail = if failed.is_empty() {
        "supervised-single, supervised-multitask, unpaired-multitask: identical logs and log files, bit-identical checkpoint reload and forward, resume equals uninterrupted".to_string()
    } else {
        failed.join("; ")
    };
    Ok(Outcome::check(failed.is_empty(), detail))
}
