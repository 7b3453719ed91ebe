use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use metavfi::checkpoint::{read_checkpoint, write_checkpoint};
use metavfi::config::RunConfig;
use metavfi::eval::dataset::{write_sequence, write_triplet};
use metavfi::eval::{load_dataset, run_ablation, run_benchmark, TripletSample};
use metavfi::flow::estimate_initial_flows;
use metavfi::io::{read_image, write_image};
use metavfi::synthetic::{constant_velocity_sequence, translation_triplet};
use metavfi::train::trainer::write_loss_log;
use metavfi::train::{grad_check, prepare_samples, train_loop, AlphaPolicy};
use metavfi::{Error, Model, TimeStep};

#[derive(Parser)]
#[command(name = "metavfi", version, about = "Arbitrary-time video frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize intermediate frames between two images.
    Interpolate {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Time step in (0, 1); repeat for several outputs.
        #[arg(long = "alpha", required = true, value_parser = parse_alpha)]
        alphas: Vec<f64>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying the flow estimator.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on the configured dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint that carries optimiser state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Benchmark a checkpoint on the configured dataset.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and benchmark the four ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic translation dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SynthLayout::Triplet)]
        layout: SynthLayout,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Pixels per frame (triplets move twice this between outer frames).
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthLayout {
    Triplet,
    Sequence,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    TimeStep::new(v).map(|t| t.value()).map_err(|_| format!("alpha must lie strictly between 0 and 1, got {v}"))
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(out) = out {
        cfg.paths.out_dir = out;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig) -> Result<Vec<TripletSample>, Failure> {
    let root = cfg
        .paths
        .dataset
        .as_ref()
        .ok_or_else(|| Failure::Usage("paths.dataset is not set".into()))?;
    let loaded = load_dataset(root, cfg.paths.dataset_layout)?;
    for f in &loaded.failures {
        log::warn!("skipped {f}");
    }
    Ok(loaded.samples)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn interpolate(
    left: &Path,
    right: &Path,
    alphas: &[f64],
    checkpoint: &Path,
    out: &Path,
    config: Option<&Path>,
) -> CmdResult {
    let mut cfg = match config {
        Some(p) => load_config(p, None)?,
        None => RunConfig::default(),
    };
    let (model, _) = read_checkpoint(checkpoint)?;
    cfg.seed = model.seed();
    cfg.model = model.config().clone();
    cfg.paths.checkpoint = Some(checkpoint.to_path_buf());
    cfg.paths.out_dir = out.to_path_buf();
    cfg.write_snapshot(out)?;

    let a = read_image(left)?;
    let b = read_image(right)?;
    let init = estimate_initial_flows(&cfg.estimator, &a, &b, None)?;
    for &alpha in alphas {
        let frame = model.predict(&a, &b, &init, TimeStep::new(alpha)?)?;
        let path = out.join(format!("out_{alpha}.png"));
        write_image(&frame, &path)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn train(config: &Path, out: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, out)?;
    let out_dir = cfg.paths.out_dir.clone();
    cfg.write_snapshot(&out_dir)?;
    let (mut model, state) = match resume {
        Some(p) => {
            let (m, s) = read_checkpoint(&p)?;
            if m.config() != &cfg.model || m.seed() != cfg.seed {
                return Err(Failure::Usage(format!(
                    "{} was trained with a different model config or seed",
                    p.display()
                )));
            }
            (m, s)
        }
        None => (Model::new(cfg.model.clone(), cfg.seed)?, None),
    };
    let ckpt = cfg.paths.checkpoint_path();
    if cfg.train.epochs == 0 {
        write_checkpoint(&ckpt, &model, state.as_ref())?;
        write_loss_log(out_dir.join("losses.csv"), &[])?;
        return Ok(());
    }
    let samples = prepare_samples(&dataset(&cfg)?, &cfg.estimator, cfg.train.alpha_policy)?;
    info!("training on {} samples", samples.len());
    let outcome = train_loop(&mut model, &cfg.train, &samples, state)?;
    write_checkpoint(&ckpt, &model, Some(&outcome.state))?;
    write_loss_log(out_dir.join("losses.csv"), &outcome.log)?;
    info!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, out: Option<PathBuf>) -> CmdResult {
    let mut cfg = load_config(config, out)?;
    cfg.paths.checkpoint = Some(checkpoint.to_path_buf());
    let (model, _) = read_checkpoint(checkpoint)?;
    cfg.seed = model.seed();
    cfg.model = model.config().clone();
    cfg.write_snapshot(&cfg.paths.out_dir)?;
    let report = run_benchmark(&model, &cfg.estimator, &dataset(&cfg)?);
    report.write(&cfg.paths.out_dir)?;
    print!("{}", report.summary());
    Ok(())
}

fn gradcheck(config: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, out)?;
    cfg.write_snapshot(&cfg.paths.out_dir)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let alpha = TimeStep::HALF;
    let [a, b, c] = translation_triplet(8, 8, cfg.model.channels, (1.3, -0.6), alpha, cfg.seed)?;
    let sample = TripletSample::new("gradcheck", a, b, c, alpha)?;
    let prepared = prepare_samples(&[sample], &cfg.estimator, AlphaPolicy::Recorded)?;
    let weights = cfg.train.effective_weights(cfg.model.variant);
    let report = grad_check(&model, &prepared[0], weights, cfg.train.warp_loss, &cfg.gradcheck)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&cfg.paths.out_dir.join("gradcheck.json"), &json)?;
    println!("{}", report.summary());
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::InvalidInput(format!(
            "gradient check failed: max rel. error {:.3e} exceeds {:.1e}",
            report.max_rel_error, report.tolerance
        ))))
    }
}

fn ablate(config: &Path, out: Option<PathBuf>) -> CmdResult {
    let cfg = load_config(config, out)?;
    let out_dir = cfg.paths.out_dir.clone();
    cfg.write_snapshot(&out_dir)?;
    let report = run_ablation(&cfg.model, &cfg.train, &cfg.estimator, &dataset(&cfg)?, cfg.seed)?;
    for v in &report.variants {
        v.report.write(out_dir.join(v.variant.label()))?;
        write_loss_log(out_dir.join(v.variant.label()).join("losses.csv"), &v.log)?;
    }
    let table = report.table();
    write_text(&out_dir.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn synth(out: &Path, layout: SynthLayout, count: usize, size: usize, speed: f64, seed: u64) -> CmdResult {
    for k in 0..count {
        let s = seed.wrapping_add(k as u64);
        let angle = k as f64 * 2.4;
        let v = (speed * angle.cos(), speed * angle.sin());
        let dir = out.join(format!("{k:04}"));
        match layout {
            SynthLayout::Triplet => {
                let frames = translation_triplet(size, size, 3, (2.0 * v.0, 2.0 * v.1), TimeStep::HALF, s)?;
                write_triplet(&dir, &frames)?;
            }
            SynthLayout::Sequence => {
                let frames = constant_velocity_sequence(size, size, 3, 5, v, s);
                write_sequence(&dir, &frames, &[(1, 2, 5), (1, 3, 5), (1, 4, 5)])?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Interpolate {
            left,
            right,
            alphas,
            checkpoint,
            out,
            config,
        } => interpolate(&left, &right, &alphas, &checkpoint, &out, config.as_deref()),
        Command::Train { config, out, resume } => train(&config, out, resume),
        Command::Eval { config, checkpoint, out } => eval(&config, &checkpoint, out),
        Command::Gradcheck { config, out } => gradcheck(&config, out),
        Command::Ablate { config, out } => ablate(&config, out),
        Command::Synth {
            out,
            layout,
            count,
            size,
            speed,
            seed,
        } => synth(&out, layout, count, size, speed, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
