use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::data::{self, default_styles, load_png, load_split, make_synthetic_dataset_sized, save_png, Split};
use gsgn_core::inference::{contact_sheet, mean_abs_diff, Enhancer, ResolvedStyle};
use gsgn_core::metrics::{self, task_table, table_csv};
use gsgn_core::models::count_parameters;
use gsgn_core::training::{self, run_training, RunOptions, TrainConfig, TrainMode};

const DEFAULT_SEED: u64 = 0;

/// Example-based image enhancement with GSGN and MT-GSGN.
#[derive(Parser, Debug)]
#[command(name = "gsgn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic multi-style dataset.
    SynthData(SynthArgs),
    /// Trains a generator and writes checkpoints plus a JSONL run log.
    Train(TrainArgs),
    /// Per-task and average PSNR/SSIM of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Enhances one image, locally or through a running service.
    Enhance(EnhanceArgs),
    /// Frames between two styles plus a contact sheet.
    Interpolate(InterpolateArgs),
    /// Prints a checkpoint's configuration and contents as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Base images before the train/val/test split.
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    styles: usize,
    #[arg(long, default_value_t = data::SYNTHETIC_SIZE)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-size generator, 100k iterations.
    Default,
    DeskSupervised,
    DeskUnpaired,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// supervised-single, supervised-all, supervised-multitask, unpaired-single or unpaired-multitask.
    #[arg(long)]
    mode: TrainMode,
    /// JSON or TOML training configuration; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used without --config; desk presets match the training mode by default.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run of the same mode.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Writes eval.csv, eval.json and per-task image CSVs here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate at most this many samples; 0 means all.
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(clap::Args, Debug)]
struct EnhanceArgs {
    /// Required unless --server is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Task name or comma-separated weights; the first task when absent.
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    output: PathBuf,
    /// Prints PSNR and SSIM of the output against this image.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Resize so the longer side is this many pixels before enhancing.
    #[arg(long)]
    edge: Option<usize>,
    /// Base URL of a running gsgn-serve; weights are then clamped to [0, 1].
    #[arg(long, conflicts_with_all = ["checkpoint", "edge"])]
    server: Option<String>,
}

#[derive(clap::Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    from: String,
    #[arg(long)]
    to: String,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    edge: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Enhance(a) => enhance(a),
        Command::Interpolate(a) => interpolate(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn seed_or_default(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            eprintln!("seed: {DEFAULT_SEED} (default)");
            DEFAULT_SEED
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let seed = seed_or_default(a.seed);
    let ds = make_synthetic_dataset_sized(a.count, &default_styles(a.styles), seed, a.size)?;
    ds.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} samples over {} tasks to {} (train {}, val {}, test {})",
        ds.total_samples(),
        ds.manifest.tasks.len(),
        a.out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match (&a.config, a.preset) {
        (Some(p), _) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(Preset::Default)) => TrainConfig::default(),
        (None, Some(Preset::DeskSupervised)) => TrainConfig::desk_supervised(),
        (None, Some(Preset::DeskUnpaired)) => TrainConfig::desk_unpaired(),
        (None, None) if a.mode.is_supervised() => TrainConfig::desk_supervised(),
        (None, None) => TrainConfig::desk_unpaired(),
    };
    if let Some(i) = a.iterations {
        c.iterations = i;
    }
    if let Some(t) = &a.task {
        c.task = Some(t.clone());
    }
    match a.seed {
        Some(s) => c.seed = s,
        None => eprintln!("seed: {} (from configuration)", c.seed),
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = train_config(&a)?;
    let train_set = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val).ok().filter(|v| !v.is_empty());
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let opts = RunOptions { out_dir: Some(a.out.clone()), resume };
    let out = run_training(a.mode, &train_set, val.as_ref(), &config, &opts)?;
    if let Some(last) = out.log.records.last() {
        let shown: Vec<String> = last.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("iteration {}: {}", last.iteration, shown.join(" "));
    }
    println!("checkpoint: {}", training::final_checkpoint_path(&a.out).display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let split = Split::parse(&a.split)?;
    let ds = load_split(&a.data, split)?;
    let ds = training::align_tasks(&ds, &ck.tasks)?;
    let (model, params) = ck.generator()?;
    let reports = training::evaluate(&model, &params, &ds, a.limit)?;
    let rows = task_table(&reports);
    let csv = table_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.csv"), &csv)?;
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
        for (task, r) in &reports {
            std::fs::write(dir.join(format!("eval_{task}.csv")), r.to_csv())?;
        }
    }
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let (png, x) = match &a.server {
        Some(url) => {
            let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let style = a.style.as_deref().map(gsgn_client::Style::parse);
            let out = gsgn_client::Client::new(url.clone())?.enhance(&bytes, style.as_ref(), false)?;
            eprintln!("model {} style {:?}", out.metadata.model_id, out.metadata.style.weights);
            let x = data::decode_png(&out.png)?;
            (out.png, x)
        }
        None => {
            let path = a.checkpoint.as_ref().context("--checkpoint is required without --server")?;
            let e = Enhancer::load(path)?;
            let style = resolve(&e, a.style.as_deref())?;
            let y = e.enhance(&load_png(&a.input)?, &style, a.edge)?;
            (data::encode_png(&y)?, y)
        }
    };
    write_file(&a.output, &png)?;
    if let Some(r) = &a.reference {
        let reference = load_png(r)?;
        if reference.shape() != x.shape() {
            bail!("reference is {:?} but the output is {:?}", reference.shape(), x.shape());
        }
        // compare the 8-bit output that was written
        let psnr = metrics::psnr(&x, &reference, 1.0)?;
        println!("psnr_db={psnr:.4}");
        if let Ok(s) = metrics::ssim(&x, &reference) {
            println!("ssim={s:.6}");
        }
    }
    Ok(())
}

fn resolve(e: &Enhancer, spec: Option<&str>) -> Result<ResolvedStyle> {
    Ok(match spec {
        Some(s) => e.parse_style(s)?,
        None => e.default_style()?,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let e = Enhancer::load(&a.checkpoint)?;
    let (from, to) = (e.parse_style(&a.from)?, e.parse_style(&a.to)?);
    let x = load_png(&a.input)?;
    let frames = e.interpolate(&x, &from, &to, a.steps, a.edge)?;
    std::fs::create_dir_all(&a.out)?;
    let mut prev: Option<&gsgn_core::Tensor> = None;
    for (i, (alpha, frame)) in frames.iter().enumerate() {
        save_png(&a.out.join(format!("frame_{i:03}.png")), frame)?;
        let step = prev.map(|p| mean_abs_diff(p, frame)).transpose()?;
        match step {
            Some(d) => println!("frame {i}: alpha={alpha:.4} mean_abs_diff_from_previous={d:.6}"),
            None => println!("frame {i}: alpha={alpha:.4}"),
        }
        prev = Some(frame);
    }
    let sheet = contact_sheet(&frames.iter().map(|f| f.1.clone()).collect::<Vec<_>>())?;
    save_png(&a.out.join("contact_sheet.png"), &sheet)?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let groups: std::collections::BTreeMap<String, usize> = ck.tensors.iter().fold(Default::default(), |mut m, (name, t)| {
        *m.entry(name.split('.').next().unwrap_or("").to_string()).or_default() += t.len();
        m
    });
    let v = serde_json::json!({
        "hash": format!("{:016x}", ck.content_hash()?),
        "tasks": ck.tasks,
        "iteration": ck.iteration,
        "generator_parameters": count_parameters(&ck.config)?,
        "tensor_count": ck.tensors.len(),
        "scalars_by_group": groups,
        "config": ck.config,
        "critic_config": ck.critic_config,
        "metadata": ck.metadata,
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}
