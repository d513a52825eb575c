//! `skedit` command line: data synthesis, the three training stages, editing,
//! evaluation and the HTTP service.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod manifest;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<skedit_core::Error> for CliError {
    fn from(e: skedit_core::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "skedit", version, about = "Sketch-guided tumor editing on image slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom records with exact tumor masks.
    SynthData(SynthDataArgs),
    /// Draw pseudo-hand-drawn sketches from the training masks.
    SynthSketches(SynthSketchesArgs),
    /// Train the sketch refiner.
    TrainRefiner(TrainRefinerArgs),
    /// Train the VAE-GAN autoencoder.
    TrainVae(TrainVaeArgs),
    /// Train the conditioned latent diffusion model.
    TrainLdm(TrainLdmArgs),
    /// Edit one slice so its tumor follows a sketch.
    Edit(EditArgs),
    /// Score edits on the held-out split.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthSketchesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, alias = "data")]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Sketches drawn per annotated slice.
    #[arg(long)]
    pub per_slice: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainRefinerArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `synth-sketches`.
    #[arg(long)]
    pub sketches: PathBuf,
    /// Model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, alias = "data")]
    pub data_root: Option<PathBuf>,
    /// Model directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainLdmArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, alias = "data")]
    pub data_root: Option<PathBuf>,
    /// Model directory holding the refiner and VAE; the LDM is written there.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Source slice (grayscale PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// Raw sketch (grayscale PNG, strokes > 0.5).
    #[arg(long)]
    pub sketch: PathBuf,
    /// Voxel spacing `sx,sy,sz` in mm.
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    /// Sampler steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip the refiner and use the sketch as drawn.
    #[arg(long)]
    pub no_refine: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, alias = "data")]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate at most this many slices.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Condition settings, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, alias = "data")]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = skedit_service::DEFAULT_PORT)]
    pub port: u16,
    /// Also write every edited slice here.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] if v.iter().all(|x| x.is_finite() && *x > 0.0) => Ok([a, b, c]),
        _ => Err(format!("expected three positive numbers sx,sy,sz, got {s:?}")),
    }
}

fn init_logging() {
    let level = std::env::var("SKEDIT_LOG")
        .ok()
        .and_then(|v| v.parse::<tracing::Level>().ok())
        .unwrap_or(tracing::Level::INFO);
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_parser() {
        assert_eq!(parse_spacing("1,0.5, 3").unwrap(), [1.0, 0.5, 3.0]);
        for bad in ["1,2", "1,2,3,4", "1,x,2", "1,0,1", "1,-1,1", "1,inf,1"] {
            assert!(parse_spacing(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn usage_errors_and_help() {
        assert_eq!(run(["skedit", "--help"]), 0);
        assert_eq!(run(["skedit"]), 1);
        assert_eq!(run(["skedit", "frobnicate"]), 1);
        assert_eq!(run(["skedit", "edit", "--sketch", "s.png", "--out", "o"]), 1);
        assert_eq!(run(["skedit", "synth-data", "--bogus"]), 1);
    }
}
