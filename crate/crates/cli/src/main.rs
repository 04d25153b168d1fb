mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segtransvae::data::{gen_synthetic, list_volumes, load_volume, save_volume, VolumeSample};
use segtransvae::model::{complexity_report, parse_patch, ModelConfig, SegTransVae};
use segtransvae::tensor::gradcheck::run_op_suite;
use segtransvae::tensor::parallel;
use segtransvae::train::{evaluate, load_checkpoint, model_gradcheck, train_loop, CropSource, DirectoryObserver, TrainState};

use settings::{usage, Settings, UsageError};

const OP_TOLERANCE: f64 = 1e-6;
const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "segtransvae", version, about = "Volumetric segmentation with a transformer bottleneck and a VAE branch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic SVV1 volumes.
    GenData(GenData),
    /// Train from SVV1 volumes.
    Train(Train),
    /// Score a checkpoint on SVV1 volumes and write a per-class CSV report.
    Eval(Eval),
    /// Finite-difference gradient check (elementary ops, or the full model).
    Gradcheck(Gradcheck),
    /// Parameter count, forward FLOPs and inference time.
    Benchmark(Benchmark),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// `16`, `16x24x32` or `16,24,32`.
    #[arg(long, default_value = "16", value_parser = parse_patch)]
    size: [usize; 3],
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data_dir: PathBuf,
    /// Preset name or `key = value` file; flags override it.
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sets both the model and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_parser = parse_patch)]
    patch: Option<[usize; 3]>,
    #[arg(long)]
    workers: Option<usize>,
    /// Any config key, repeatable: `--set key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from `<out-dir>/checkpoint.svck` when present.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Check the whole training objective (desk config, 8³ patch).
    #[arg(long)]
    full_model: bool,
    /// Random instances per op, or parameter coordinates with --full-model.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Benchmark {
    /// Preset name or `key = value` file.
    #[arg(long, default_value = "desk")]
    config: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    parallel::init_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for i in 0..a.count {
        let s = gen_synthetic(a.seed.wrapping_add(i as u64), a.size, a.channels, a.classes)?;
        let path = a.out_dir.join(format!("case_{i:04}.svv"));
        save_volume(&path, &s).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} volumes to {}", a.count, a.out_dir.display());
    Ok(())
}

fn load_dir(dir: &Path) -> Result<Vec<VolumeSample<f32>>> {
    if !dir.is_dir() {
        bail!("data directory {} does not exist", dir.display());
    }
    let paths = list_volumes(dir)?;
    if paths.is_empty() {
        bail!("no .svv volumes in {}", dir.display());
    }
    paths.iter().map(|p| load_volume(p).with_context(|| format!("reading {}", p.display()))).collect()
}

fn train(a: Train) -> Result<()> {
    let mut s = Settings::from_source(a.config.as_deref())?;
    if let Some(v) = a.steps {
        s.train.total_steps = v;
    }
    if let Some(v) = a.lr {
        s.train.lr0 = v;
    }
    if let Some(v) = a.seed {
        s.model.seed = v;
        s.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        s.train.batch_size = v;
    }
    if let Some(v) = a.patch {
        s.model.patch_size = v;
    }
    if let Some(v) = a.workers {
        s.train.workers = v;
    }
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else { return usage(format!("--set expects KEY=VALUE, got {kv:?}")) };
        s.set(k.trim(), v.trim())?;
    }
    s.validate()?;

    let volumes = load_dir(&a.data_dir)?;
    if let Some(v) = volumes.iter().find(|v| v.channels() != s.model.in_channels || v.num_classes != s.model.out_channels) {
        bail!(
            "volume {} has {} channels and {} classes, model expects {} and {}",
            v.id,
            v.channels(),
            v.num_classes,
            s.model.in_channels,
            s.model.out_channels
        );
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;

    let net = SegTransVae::new(&s.model)?;
    let ckpt = a.out_dir.join(DirectoryObserver::CHECKPOINT_FILE);
    let mut state = if a.resume && ckpt.exists() {
        load_checkpoint::<f32>(&ckpt, Some(&s.model)).with_context(|| format!("resuming from {}", ckpt.display()))?
    } else {
        TrainState::new(&net, s.train.seed)?
    };
    if state.step > s.train.total_steps {
        bail!("checkpoint is at step {} beyond total_steps {}", state.step, s.train.total_steps);
    }
    std::fs::write(a.out_dir.join("config.txt"), s.to_text())?;

    let source = CropSource::new(&volumes, s.model.patch_size, &s.train)?;
    let eval_set: Vec<_> = volumes.iter().filter(|v| v.size() == s.model.patch_size).cloned().collect();
    let mut observer = DirectoryObserver::create(&a.out_dir, eval_set, a.resume)?;
    let history = train_loop(&net, &mut state, &source, &s.train, &mut observer)?;
    match history.last() {
        Some(r) => println!("step={} total={} dice={} recon={} kl={}", r.step, r.loss.total, r.loss.dice, r.loss.recon, r.loss.kl),
        None => println!("step={} nothing to do", state.step),
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    if !a.checkpoint.is_file() {
        bail!("checkpoint {} does not exist", a.checkpoint.display());
    }
    let volumes = load_dir(&a.data_dir)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            bail!("report directory {} does not exist", parent.display());
        }
    }
    let state = load_checkpoint::<f32>(&a.checkpoint, None).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let net = SegTransVae::new(&state.config)?;
    let report = evaluate(&net, &state.params, &volumes)?;
    std::fs::write(&a.report, report.to_csv()).with_context(|| format!("writing {}", a.report.display()))?;
    let hd = report.mean_hd95.map_or_else(|| "undefined".to_string(), |v| v.to_string());
    println!("volumes={} mean_dice={} mean_hd95={hd}", volumes.len(), report.mean_dice);
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    if a.full_model {
        let config = ModelConfig { patch_size: [8, 8, 8], ..ModelConfig::desk() };
        let r = model_gradcheck(&config, a.samples.unwrap_or(24), a.seed)?;
        let err = r.report.max_relative_error;
        println!("max_rel_error={err:e} coords={} screened={}", r.report.checked, r.screened_out);
        if !(err < MODEL_TOLERANCE) {
            bail!("full-model relative error {err:e} exceeds {MODEL_TOLERANCE:e}");
        }
    } else {
        let results = run_op_suite(a.samples.unwrap_or(20), a.seed)?;
        let (worst, err) = results.iter().copied().fold(("", 0.0), |acc, r| if r.1 > acc.1 { r } else { acc });
        println!("max_rel_error={err:e} ops={} worst={worst}", results.len());
        if !(err < OP_TOLERANCE) {
            bail!("op {worst} relative error {err:e} exceeds {OP_TOLERANCE:e}");
        }
    }
    Ok(())
}

fn benchmark(a: Benchmark) -> Result<()> {
    let s = Settings::from_source(Some(&a.config))?;
    s.validate()?;
    let r = complexity_report(&s.model, a.reps)?;
    println!("params={} flops={} inference_s={}", r.parameter_count, r.flops_forward, r.inference_seconds);
    Ok(())
}
