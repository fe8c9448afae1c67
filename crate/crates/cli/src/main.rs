//! `s2a`: command-line front end of the detection pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use s2adet::pipeline::{self, PipelineConfig};
use s2adet::Result;

#[derive(Parser)]
#[command(name = "s2a", version, about = "Hyperspectral object detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithK {
    #[command(flatten)]
    common: Common,
    /// Number of bands or components.
    #[arg(long, default_value_t = 3)]
    k: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Split each cube into spatial and spectral images.
    Decouple(Common),
    /// Report the selected bands of each cube.
    Bandselect(WithK),
    /// Report the principal components of each cube.
    Pca(WithK),
    /// Partition annotated images into train, val and test manifests.
    Split(Common),
    /// Render the synthetic corpus.
    Generate(Common),
    /// Train the detector.
    Train(Common),
    /// Write detections and overlays.
    Detect(Common),
    /// Score detections against annotations.
    Eval(Common),
    /// Run finite-difference gradient checks.
    Gradcheck(Common),
}

fn load(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::read(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Decouple(c) => {
            let s = pipeline::cmd_decouple(&load(&c)?)?;
            println!("decoupled={} skipped={}", s.written.len(), s.skipped.len());
        }
        Command::Bandselect(a) => print!("{}", pipeline::cmd_bandselect(&load(&a.common)?, a.k)?),
        Command::Pca(a) => print!("{}", pipeline::cmd_pca(&load(&a.common)?, a.k)?),
        Command::Split(c) => {
            let r = pipeline::cmd_split(&load(&c)?)?;
            println!(
                "train={} val={} test={} attempts={} max_deviation={:.4} balanced={}",
                r.splits[0].len(),
                r.splits[1].len(),
                r.splits[2].len(),
                r.attempts,
                r.max_deviation,
                r.balanced
            );
        }
        Command::Generate(c) => println!("generated={}", pipeline::cmd_generate(&load(&c)?)?),
        Command::Train(c) => {
            let r = pipeline::cmd_train(&load(&c)?)?;
            if let Some(last) = r.records.last() {
                println!("{}", last.line());
            }
        }
        Command::Detect(c) => println!("images={}", pipeline::cmd_detect(&load(&c)?)?),
        Command::Eval(c) => print!("{}", pipeline::cmd_eval(&load(&c)?)?.metrics_text()),
        Command::Gradcheck(c) => print!("{}", pipeline::cmd_gradcheck(&load(&c)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors are validation errors (exit 1); 2 is reserved for
    // numerical failures.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
