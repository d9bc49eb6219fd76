mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdmae::checkpoint::load_checkpoint;
use hdmae::gradcheck::{broken_case, check, run_suite, DEFAULT_TOLERANCE};
use hdmae::image_io::{load_pgm, resize_bilinear, save_pgm};
use hdmae::masking::{context_aware_mask, default_contour, mask_stats, sample_plans};
use hdmae::model::{self, PositionTables};
use hdmae::patch::{patchify, unpatchify};
use hdmae::phantom::{dataset_with, synth_phantom_with, write_dataset, PhantomConfig, PhantomSample};
use hdmae::probe::{reports_csv, run_probe, ProbeSettings};
use hdmae::rng::{self, sub_seed, Purpose};
use hdmae::trainer::Trainer;
use hdmae::{Execution, ImageGray, PatchConfig, Tape, Tensor};

use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "hdmae", version, about = "Masked-autoencoder pre-training with context-aware masking")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `mask.inside_weight=1`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("output_dir={}", serde_json::to_string(out).expect("path serializes")));
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on generated phantoms; writes checkpoints, metrics.csv and the resolved config.
    Pretrain(ConfigArgs),
    /// Write orig.pgm, masked.pgm and recon.pgm for one image.
    Reconstruct(ReconstructArgs),
    /// Monte-Carlo masking statistics on the fallback contour.
    MaskStats {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 10_000)]
        draws: usize,
    },
    /// Linear probe on a frozen encoder; writes probe_report.csv.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every differentiable op and the toy model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, hide = true)]
        inject_broken: bool,
    },
    /// Generate phantom PGMs, region files and a manifest.
    PhantomGen(PhantomGenArgs),
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM input, resized to the model's image side when needed.
    #[arg(long, conflicts_with = "seed", required_unless_present = "seed")]
    image: Option<PathBuf>,
    /// Generate the input phantom from this seed instead.
    #[arg(long)]
    seed: Option<u64>,
    /// Add a lesion to the generated phantom.
    #[arg(long, requires = "seed")]
    lesion: bool,
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long, default_value_t = 4.0)]
    weight: f64,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomGenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    lesion_fraction: f64,
    #[arg(long, default_value_t = 64)]
    image_side: usize,
    #[arg(long, default_value_t = 8)]
    patch_side: usize,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<hdmae::Error> for Failure {
    fn from(e: hdmae::Error) -> Self {
        match e {
            hdmae::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = configure_threads().and_then(|()| match cli.command {
        Command::Pretrain(args) => pretrain(&args),
        Command::Reconstruct(args) => reconstruct(&args),
        Command::MaskStats { config, draws } => mask_stats_cmd(&config, draws),
        Command::Probe { checkpoint, config } => probe_cmd(&checkpoint, &config),
        Command::Gradcheck {
            seed,
            tolerance,
            inject_broken,
        } => gradcheck(seed, tolerance, inject_broken),
        Command::PhantomGen(args) => phantom_gen(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// `HDMAE_THREADS` caps the worker pool; unset means one worker per core.
fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("HDMAE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("HDMAE_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn pretrain(args: &ConfigArgs) -> Outcome {
    let cfg = args.resolve()?;
    let dir = &cfg.output_dir;
    cfg.write_resolved(dir)?;
    let data = dataset_with(
        cfg.pretrain_data_seed(),
        cfg.data.count,
        cfg.data.lesion_fraction,
        &cfg.model.patch,
        &cfg.data.phantom,
        Execution::Parallel,
    )?;
    let mut trainer = Trainer::new(cfg.train_config(), &data, Execution::Parallel)?;
    log::info!("training {} steps on {} phantoms", trainer.total_steps(), data.len());
    let log = trainer.run(Some(dir))?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("steps {}  loss {:.6} -> {:.6}", log.len(), first.loss, last.loss);
    }
    println!("wrote {}", dir.join("final.bin").display());
    Ok(())
}

fn reconstruct(args: &ReconstructArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = ckpt.config.model;
    let patch = cfg.patch;
    let (image, region) = match (&args.image, args.seed) {
        (Some(path), _) => {
            let img = load_pgm(path)?;
            let img = resize_bilinear(&img, patch.image_side)?;
            (img, default_contour(patch.grid_side(), 0.5)?)
        }
        (None, Some(seed)) => {
            let s = synth_phantom_with(seed, &patch, &PhantomConfig::default(), args.lesion)?;
            (s.image, s.region)
        }
        (None, None) => return Err(Failure::Usage("either --image or --seed is required".into())),
    };
    let plan = context_aware_mask(
        &region,
        args.ratio,
        args.weight,
        &mut rng::stream(args.mask_seed, Purpose::Masking),
    )?;
    let original: Tensor<f32> = patchify(&image, &patch)?;
    let pos = PositionTables::new(&cfg)?;
    let mut tape = Tape::no_grad();
    let vars = model::bind(&mut tape, &ckpt.params, false);
    let fwd = model::mae_forward(&mut tape, &vars, &cfg, &pos, original.clone(), &plan)?;
    let pred = tape.value(fwd.pred);

    let width = patch.patch_len();
    let mut masked = original.clone();
    let mut recon = original.clone();
    for &t in plan.masked() {
        let rows = t * width..(t + 1) * width;
        masked.data_mut()[rows.clone()].fill(0.0);
        recon.data_mut()[rows.clone()].copy_from_slice(&pred.data()[rows]);
    }
    fs::create_dir_all(&args.out)?;
    save_pgm(&image, args.out.join("orig.pgm"))?;
    save_pgm(&unpatchify(&masked, &patch)?, args.out.join("masked.pgm"))?;
    save_pgm(&unpatchify(&recon, &patch)?, args.out.join("recon.pgm"))?;
    println!(
        "masked {} of {} patches, loss {:.6}; wrote {}",
        plan.masked().len(),
        plan.n_tokens(),
        tape.value(fwd.loss).item(),
        args.out.display()
    );
    Ok(())
}

fn mask_stats_cmd(args: &ConfigArgs, draws: usize) -> Outcome {
    if draws < 2 {
        return Err(Failure::Usage("--draws must be at least 2".into()));
    }
    let cfg = args.resolve()?;
    let dir = &cfg.output_dir;
    cfg.write_resolved(dir)?;
    let g = cfg.model.patch.grid_side();
    let region = default_contour(g, 0.5)?;
    let plans = sample_plans(
        &region,
        cfg.mask.ratio,
        cfg.mask.inside_weight,
        sub_seed(cfg.seed, Purpose::Masking),
        draws,
        Execution::Parallel,
    )?;
    let s = mask_stats(&plans, &region)?;
    let mut csv = String::from(
        "draws,ratio,inside_weight,inside_rate,inside_se,outside_rate,outside_se,diff_se,separation,masked_fraction\n",
    );
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{},{},{},{}",
        s.draws,
        cfg.mask.ratio,
        cfg.mask.inside_weight,
        s.inside_rate,
        s.inside_se,
        s.outside_rate,
        s.outside_se,
        s.diff_se,
        s.separation(),
        s.masked_fraction
    );
    fs::write(dir.join("mask_stats.csv"), csv)?;
    let mut grid = String::new();
    for row in s.frequency.chunks(g) {
        let cells: Vec<String> = row.iter().map(|f| f.to_string()).collect();
        let _ = writeln!(grid, "{}", cells.join(","));
    }
    fs::write(dir.join("mask_frequency.csv"), grid)?;
    let img = ImageGray::new(g, s.frequency.iter().map(|&f| f as f32).collect())?;
    save_pgm(&img, dir.join("mask_frequency.pgm"))?;
    println!(
        "inside {:.4} ± {:.4}, outside {:.4} ± {:.4}, separation {:.1} SE",
        s.inside_rate,
        s.inside_se,
        s.outside_rate,
        s.outside_se,
        s.separation()
    );
    Ok(())
}

fn probe_cmd(checkpoint: &Path, args: &ConfigArgs) -> Outcome {
    let cfg = args.resolve()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let model_cfg = ckpt.config.model;
    let dir = &cfg.output_dir;
    cfg.write_resolved(dir)?;
    let (train_seed, eval_seed) = cfg.probe_data_seeds();
    let p = &cfg.probe;
    let make = |seed, count| {
        dataset_with(seed, count, p.lesion_fraction, &model_cfg.patch, &cfg.data.phantom, Execution::Parallel)
    };
    let train = make(train_seed, p.train_count)?;
    let eval = make(eval_seed, p.eval_count)?;
    let (ti, tl) = split(&train);
    let (ei, el) = split(&eval);
    let out = run_probe(
        &ckpt.params,
        &model_cfg,
        (&ti, &tl),
        (&ei, &el),
        ProbeSettings { steps: p.steps, lr: p.lr },
        Execution::Parallel,
    )?;
    let csv = reports_csv(&[out.train.clone(), out.eval.clone()]);
    fs::write(dir.join("probe_report.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn split(samples: &[PhantomSample]) -> (Vec<&ImageGray>, Vec<bool>) {
    (samples.iter().map(|s| &s.image).collect(), samples.iter().map(|s| s.label).collect())
}

fn gradcheck(seed: u64, tolerance: f64, inject_broken: bool) -> Outcome {
    if !(tolerance > 0.0) {
        return Err(Failure::Usage("--tolerance must be positive".into()));
    }
    let mut reports = run_suite(seed, tolerance, Execution::Parallel)?;
    if inject_broken {
        reports.push(check(broken_case().as_ref(), tolerance, Execution::Parallel)?);
    }
    println!("{:<34} {:>12} {:>9}  status", "check", "max_rel_err", "elements");
    for r in &reports {
        println!(
            "{:<34} {:>12.3e} {:>9}  {}",
            r.name,
            r.max_rel_err,
            r.elements,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed at rel-err < {tolerance:e}", reports.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn phantom_gen(args: &PhantomGenArgs) -> Outcome {
    let patch = PatchConfig {
        image_side: args.image_side,
        patch_side: args.patch_side,
        embed_dim: PatchConfig::default().embed_dim,
    };
    patch.validate()?;
    let samples = dataset_with(
        args.seed,
        args.count,
        args.lesion_fraction,
        &patch,
        &PhantomConfig::default(),
        Execution::Parallel,
    )?;
    write_dataset(&samples, &args.out)?;
    println!(
        "wrote {} phantoms ({} with lesions) to {}",
        samples.len(),
        samples.iter().filter(|s| s.label).count(),
        args.out.display()
    );
    Ok(())
}
