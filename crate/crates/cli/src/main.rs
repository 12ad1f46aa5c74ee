//! `s2swtv`: synthesize, corrupt, denoise and score seismic gathers.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s2swtv_core::{ConvVariant, MaskMode};

#[derive(Parser)]
#[command(name = "s2swtv", version, about = "Self-supervised random-noise attenuation for seismic gathers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clean synthetic gather.
    Synth(SynthArgs),
    /// Add Gaussian or band-limited noise to a gather.
    Addnoise(AddnoiseArgs),
    /// Train on a gather (or a group of slices) and write the denoised result.
    Denoise(DenoiseArgs),
    /// Score a denoised gather.
    Eval(EvalArgs),
    /// Compare masking modes, regularizers and convolution variants.
    Ablate(AblateArgs),
    /// Render gathers as grayscale panels.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    /// JSON list of events; random events are drawn from the seed when absent.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Number of random linear events (without --events).
    #[arg(long, default_value_t = 3)]
    linear: usize,
    /// Number of random hyperbolic events (without --events).
    #[arg(long, default_value_t = 1)]
    hyperbolic: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKindArg {
    Gaussian,
    Bandpass,
}

#[derive(Args)]
struct AddnoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    sigma: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: NoiseKindArg,
    /// Pass band `low,high` in cycles per sample; estimated from the input
    /// when omitted for bandpass noise.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    band: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set wtv.gamma=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if k.is_empty() {
        return Err("empty key".into());
    }
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Args)]
struct DenoiseArgs {
    /// A grid file or a group manifest.
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Clean grid (or manifest) for a live PSNR trace and a final report.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Also write the per-element spread of the ensemble.
    #[arg(long)]
    std_out: bool,
    /// Also write the trained parameters of every slice.
    #[arg(long)]
    save_params: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    denoised: PathBuf,
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Local-similarity window (odd).
    #[arg(long, default_value_t = s2swtv_core::metrics::LS_WINDOW)]
    window: usize,
    /// Directory for the residual and local-similarity map grids.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Trace,
    Row,
    Element,
}

impl From<ModeArg> for MaskMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Trace => MaskMode::Trace,
            ModeArg::Row => MaskMode::Row,
            ModeArg::Element => MaskMode::Element,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegularizerArg {
    /// Adaptive weights.
    Wtv,
    /// Unit weights.
    Tv,
    /// No regularizer.
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConvArg {
    Standard,
    Partial,
    Mgrconv,
}

impl From<ConvArg> for ConvVariant {
    fn from(c: ConvArg) -> Self {
        match c {
            ConvArg::Standard => ConvVariant::Standard,
            ConvArg::Partial => ConvVariant::Partial,
            ConvArg::Mgrconv => ConvVariant::Mgrconv,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "trace,row,element")]
    modes: Vec<ModeArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "wtv")]
    regularizers: Vec<RegularizerArg>,
    /// Convolution variants; the configured one when absent.
    #[arg(long, value_enum, value_delimiter = ',')]
    convs: Vec<ConvArg>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Treat inputs as (noisy, denoised) pairs and add residual panels.
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() {
    if let Some(n) = std::env::var("S2SWTV_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Addnoise(a) => commands::addnoise(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Plot(a) => plot::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
