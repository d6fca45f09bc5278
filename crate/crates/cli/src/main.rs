//! `ssmfuse` command-line front end.
//!
//! Exit codes: 0 success, 1 verification failure, 2 argument error or
//! missing file, 3 data error.

mod config;
mod preview;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use ssmfuse::data::{generate_synthetic, read_dataset, write_dataset};
use ssmfuse::flops::{count_flops, BlockKind};
use ssmfuse::gradcheck::{gradcheck, GradCheckConfig, Module};
use ssmfuse::metrics::evaluate;
use ssmfuse::network::{FusionNet, UpsampleKind, SCALE};
use ssmfuse::tensor::{read_fmt, write_fmt};
use ssmfuse::train::Trainer;
use ssmfuse::Error;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Verify(String),
    #[error("{0}")]
    Args(String),
    #[error("{0}")]
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Args(_) => 2,
            Failure::Data(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Args(e.to_string()),
            Error::Config(_) | Error::Usage(_) => Failure::Args(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

#[derive(Parser)]
#[command(name = "ssmfuse", version, about = "Selective state-space pansharpening toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic PAN / LR / GT dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key=value` file; flags below take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Trailing samples kept out of training and scored every epoch.
        #[arg(long, default_value_t = 0)]
        held_out: usize,
        /// Checkpoint period in epochs; 0 writes only the final checkpoint.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        state_size: Option<usize>,
        #[arg(long)]
        upsample: Option<UpsampleKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        halve_every: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse one PAN / LR pair with a trained checkpoint.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pan: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// PNG preview path; defaults to `--out` with a `.png` extension.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Score a prediction against a reference image.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Resolution ratio used by ERGAS.
        #[arg(long, default_value_t = SCALE as f64)]
        ratio: f64,
    },
    /// Analytic FLOP count of one block.
    Flops {
        #[arg(long)]
        kind: BlockKind,
        #[arg(long)]
        height: u64,
        #[arg(long)]
        width: u64,
        #[arg(long)]
        channels: Option<u64>,
        #[arg(long)]
        state: Option<u64>,
        /// Number of parameters of the block.
        #[arg(long)]
        params: u64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// Module name, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries checked per tensor (default depends on the module).
        #[arg(long)]
        max_entries: Option<usize>,
        /// Print every tensor, not just the summary line.
        #[arg(long)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData { seed, count, height, width, bands, out } => {
            if count == 0 {
                return Err(Failure::Args("count must be at least 1".into()));
            }
            let ds = generate_synthetic(seed, count, height, width, bands)?;
            write_dataset(&out, &ds)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            held_out,
            checkpoint_every,
            resume,
            bands,
            channels,
            state_size,
            upsample,
            epochs,
            batch_size,
            lr0,
            halve_every,
            seed,
        } => {
            let file = match &config {
                Some(p) => RunConfig::parse(&read_text(p)?)?,
                None => RunConfig::default(),
            };
            let flags =
                RunConfig { bands, channels, state_size, upsample, epochs, batch_size, lr0, halve_every, seed };
            let cfg = file.overridden_by(&flags);
            train(&data, &out, &cfg, held_out, checkpoint_every, resume)
        }
        Command::Fuse { ckpt, pan, lr, out, preview } => {
            let (net, store) = ssmfuse::train::load_model::<f32>(&ckpt)?;
            let pan = load::<f32>(&pan)?;
            let lr = load::<f32>(&lr)?;
            let fused = net.fuse(&store, &pan, &lr)?;
            write_fmt(&out, &fused)?;
            let preview = preview.unwrap_or_else(|| out.with_extension("png"));
            preview::write_png(&preview, &fused)?;
            println!("wrote {} shape={:?} and {}", out.display(), fused.shape(), preview.display());
            Ok(())
        }
        Command::Eval { pred, gt, ratio } => {
            let pred = load::<f64>(&pred)?;
            let gt = load::<f64>(&gt)?;
            println!("{}", evaluate(&pred, &gt, ratio)?);
            Ok(())
        }
        Command::Flops { kind, height, width, channels, state, params } => {
            let needs_c = kind != BlockKind::Conv;
            let needs_n = kind.scans() > 0;
            let c = match channels {
                Some(c) => c,
                None if needs_c => return Err(Failure::Args(format!("--channels is required for {kind}"))),
                None => 1,
            };
            let n = match state {
                Some(n) => n,
                None if needs_n => return Err(Failure::Args(format!("--state is required for {kind}"))),
                None => 1,
            };
            println!("{}", count_flops(kind, height, width, c, n, params)?);
            Ok(())
        }
        Command::Gradcheck { module, tol, seed, max_entries, verbose } => {
            let modules: Vec<Module> =
                if module == "all" { Module::ALL.to_vec() } else { vec![module.parse::<Module>()?] };
            let mut failed = Vec::new();
            for m in modules {
                let mut cfg = GradCheckConfig { tolerance: tol, seed, ..GradCheckConfig::for_module(m) };
                if let Some(k) = max_entries {
                    cfg.max_entries = k;
                }
                let report = gradcheck(m, &cfg)?;
                if verbose {
                    println!("{report}");
                } else {
                    println!("{}", report.to_string().lines().last().unwrap_or_default());
                }
                if !report.passed() {
                    failed.push(m.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Failure::Verify(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn load<T: ssmfuse::Scalar>(path: &Path) -> Result<ssmfuse::Tensor<T>, Failure> {
    read_fmt::<T>(path).map_err(|e| match Failure::from(e) {
        Failure::Args(m) => Failure::Args(format!("{}: {m}", path.display())),
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        f => f,
    })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Args(format!("{}: {e}", path.display())))
}

fn train(
    data: &Path,
    out: &Path,
    cfg: &RunConfig,
    held_out: usize,
    checkpoint_every: usize,
    resume: bool,
) -> Result<(), Failure> {
    if !data.is_dir() {
        return Err(Failure::Args(format!("dataset directory {} not found", data.display())));
    }
    let ds = read_dataset::<f32>(data)?;
    if held_out >= ds.len() {
        return Err(Failure::Args(format!("--held-out {held_out} leaves no training samples out of {}", ds.len())));
    }
    let bands = ds.bands;
    let (train_set, held) = ds.split_tail(held_out)?;
    let mut trainer = if resume {
        let mut t = Trainer::<f32>::resume(out)?;
        if t.net.config.bands != bands {
            return Err(Failure::Data(format!("checkpoint expects {} bands, dataset has {bands}", t.net.config.bands)));
        }
        if let Some(e) = cfg.epochs {
            t.config.epochs = e;
        }
        t
    } else {
        let net_cfg = cfg.network(bands)?;
        let mut train_cfg = cfg.training()?;
        train_cfg.checkpoint_every = checkpoint_every;
        let (net, store) = FusionNet::build::<f32>(net_cfg)?;
        info!("{} parameters", store.num_scalars());
        Trainer::new(net, store, train_cfg)?
    };
    fs::create_dir_all(out)?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
    let mut log_err = None;
    trainer.run(&train_set.samples, &held.samples, Some(out), |rec| {
        println!("{rec}");
        if let Err(e) = writeln!(log, "{rec}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    Ok(())
}
