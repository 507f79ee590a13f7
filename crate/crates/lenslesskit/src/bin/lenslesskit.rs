//! Thin CLI over the library: ingest, psf, synthesize, train, reconstruct,
//! eval, bench. See `--help` on each subcommand.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lenslesskit::cli;
use lenslesskit::error::Error;

#[derive(Parser)]
#[command(
    name = "lenslesskit",
    about = "Physics-informed cyclic adversarial toolkit for multi-PSF lensless imaging",
    version
)]
struct TopLevel {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan an image directory into a train/val/test manifest.
    Ingest(IngestArgs),
    /// PSF utilities: shuffle a seed PSF into a family, or synthesize one.
    Psf(PsfArgs),
    /// Derive a lensless dataset from a manifest split.
    Synthesize(SynthesizeArgs),
    /// Run (or resume) training from a run config.
    Train(TrainArgs),
    /// Reconstruct one lensless image with a known PSF.
    Reconstruct(ReconstructArgs),
    /// Evaluate a checkpoint over a split (PSNR/SSIM report).
    Eval(EvalArgs),
    /// Convolution and PSF-shuffle runtime benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of PNG/JPEG images.
    #[arg(long)]
    dir: PathBuf,
    /// Manifest output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Working resolution recorded in the manifest.
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Split-assignment seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip undecodable files instead of aborting.
    #[arg(long)]
    skip_bad: bool,
}

#[derive(Args)]
struct PsfArgs {
    #[command(subcommand)]
    command: PsfCommand,
}

#[derive(Subcommand)]
enum PsfCommand {
    /// Permute sections of a seed PSF into a reproducible family.
    Shuffle(PsfShuffleArgs),
    /// Write a procedural caustic-style seed PSF.
    Synth(PsfSynthArgs),
}

#[derive(Args)]
struct PsfShuffleArgs {
    /// Seed PSF file (binary grid format).
    #[arg(long)]
    seed_psf: PathBuf,
    /// Section grid, e.g. 5x5.
    #[arg(long, default_value = "5x5")]
    grid: String,
    /// Number of shuffled PSFs to emit.
    #[arg(long)]
    count: usize,
    /// Base seed; PSF i uses rng-seed + i.
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
    /// Output directory (PSF binaries + JSON manifest + preview sheet).
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PsfSynthArgs {
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed_psf: PathBuf,
    /// Which split to synthesize measurements for.
    #[arg(long, default_value = "train")]
    split: String,
    /// Size of the permuted-PSF family used round-robin.
    #[arg(long, default_value_t = 4)]
    count_psfs: usize,
    /// Section grid, e.g. 5x5.
    #[arg(long, default_value = "5x5")]
    grid: String,
    /// Additive Gaussian noise level.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON, schema version 1).
    #[arg(long)]
    config: PathBuf,
    /// Continue from the latest checkpoint in the config's output dir.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Checkpoint directory (as written under <output_dir>/checkpoints/).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Lensless input PNG at the checkpoint resolution.
    #[arg(long)]
    input: PathBuf,
    /// The PSF that produced the measurement (reconstruction is non-blind:
    /// the PSF is required, never estimated).
    #[arg(long)]
    psf: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Optional ground truth; enables a metrics sidecar.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Optional contact sheet (lensless | psf | reconstruction).
    #[arg(long)]
    sheet: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// seen | unseen | single.
    #[arg(long, default_value = "seen")]
    psf_mode: String,
    /// Cap the number of evaluated images.
    #[arg(long)]
    limit: Option<usize>,
    /// Report output path (JSON; a CSV lands next to it).
    #[arg(long)]
    out: PathBuf,
    /// Optional contact sheet of the first few triplets.
    #[arg(long)]
    sheet: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated square image sizes.
    #[arg(long, default_value = "64,128,256", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Kernel side; defaults to size/4 per size.
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Optional JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_grid(s: &str) -> Result<(usize, usize), Error> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidArgument(format!("grid `{s}` is not ROWSxCOLS")))?;
    let rows = r
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad grid rows `{r}`")))?;
    let cols = c
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad grid cols `{c}`")))?;
    Ok((rows, cols))
}

fn run() -> Result<(), Error> {
    match TopLevel::parse().command {
        Command::Ingest(a) => cli::cmd_ingest(&a.dir, &a.out, a.resolution, a.seed, a.skip_bad),
        Command::Psf(p) => match p.command {
            PsfCommand::Shuffle(a) => cli::cmd_psf_shuffle(
                &a.seed_psf,
                parse_grid(&a.grid)?,
                a.count,
                a.rng_seed,
                &a.out_dir,
            ),
            PsfCommand::Synth(a) => cli::cmd_psf_synth(a.size, a.seed, &a.out),
        },
        Command::Synthesize(a) => cli::cmd_synthesize(
            &a.manifest,
            &a.seed_psf,
            &a.split,
            a.count_psfs,
            parse_grid(&a.grid)?,
            a.sigma,
            a.seed,
            &a.out_dir,
        ),
        Command::Train(a) => cli::cmd_train(&a.config, a.resume),
        Command::Reconstruct(a) => cli::cmd_reconstruct(
            &a.checkpoint,
            &a.input,
            &a.psf,
            &a.out,
            a.truth.as_deref(),
            a.sheet.as_deref(),
        ),
        Command::Eval(a) => cli::cmd_eval(
            &a.checkpoint,
            &a.split,
            &a.psf_mode,
            a.limit,
            &a.out,
            a.sheet.as_deref(),
        )
        .map(|_| ()),
        Command::Bench(a) => {
            cli::cmd_bench(&a.sizes, a.batch, a.kernel, a.repeats, a.out.as_deref()).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
