//! `layerseg` command-line driver; [`run`] is the whole program.

mod cmd_eval;
mod cmd_fit;
mod cmd_gen;
mod cmd_gradcheck;
mod cmd_render;
mod outputs;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "layerseg", version, about = "Two-layer affine motion segmentation by differentiable splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Gen(cmd_gen::GenArgs),
    /// Fit layers to an image pair or to every scene of a dataset.
    Fit(cmd_fit::FitArgs),
    /// Score fit outputs against dataset ground truth.
    Eval(cmd_eval::EvalArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(cmd_gradcheck::GradcheckArgs),
    /// Side-by-side panels: frame 1, ground truth, prediction.
    Render(cmd_render::RenderArgs),
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DEGENERATE: u8 = 4;

impl CliError {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn io(msg: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl From<layerseg::Error> for CliError {
    fn from(e: layerseg::Error) -> Self {
        use layerseg::Error as E;
        let code = match &e {
            E::Io { .. }
            | E::Decode { .. }
            | E::UnsupportedBitDepth { .. }
            | E::UnsupportedFormat { .. }
            | E::BadMagic { .. }
            | E::Truncated { .. }
            | E::Json(_) => EXIT_IO,
            E::ZeroDimensions { .. }
            | E::DimensionMismatch { .. }
            | E::InvalidConfig(_)
            | E::EmptyRegion(_)
            | E::EmptyInput(_) => EXIT_USAGE,
            E::Degenerate(_) | E::NonFinite(_) => EXIT_DEGENERATE,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Runs `f` on a dedicated pool when `--jobs` is given.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(CliError::usage("--jobs must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen::run(a),
        Command::Fit(a) => cmd_fit::run(a),
        Command::Eval(a) => cmd_eval::run(a),
        Command::Gradcheck(a) => cmd_gradcheck::run(a),
        Command::Render(a) => cmd_render::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.error);
            e.code
        }
    }
}
