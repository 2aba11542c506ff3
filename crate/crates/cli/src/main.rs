//! `emgleam` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 pipeline-stage failure. Every run writes `<output>.run.json` holding
//! all effective parameters. `--seed` feeds every stage through
//! `seed::derive(seed, stage)`; `--threads 1` (the default) runs
//! single-threaded and bit-deterministic.

mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emgleam::receiver::Alignment;
use emgleam::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "emgleam", version, about = "Simulated screen-emanation attack pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Root seed; each stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 is sequential.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Dataset root.
    #[arg(long, global = true, env = "EMGLEAM_DATA_DIR", default_value = "emgleam-data")]
    pub data_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a ground-truth screen raster.
    Render(RenderArgs),
    /// Simulate the leak of a raster and capture it as IQ samples.
    Emanate(EmanateArgs),
    /// Reconstruct an emage from an IQ capture.
    Reconstruct(ReconstructArgs),
    /// Measure the SNR of an IQ capture.
    Snr(SnrArgs),
    /// Capture a labeled grid or security-code session into the dataset.
    Session(SessionArgs),
    /// Cut a rectangle out of an emage.
    Crop(CropArgs),
    /// Build train / validation / test splits.
    Split(SplitArgs),
    /// Train a digit classifier on a split.
    Train(TrainArgs),
    /// Compare analytic and numeric gradients of a small model.
    Gradcheck(GradcheckArgs),
    /// Read the security codes of a session, or map code-likeness over an emage.
    Attack(AttackArgs),
    /// Run the eye-chart acuity testbed.
    Testbed(TestbedArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("content").required(true).args(["eyechart", "grid", "code"])))]
pub struct RenderArgs {
    /// Eye-chart letter.
    #[arg(long)]
    pub eyechart: Option<char>,
    /// Eye-chart scale.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Digit grid with a balanced seeded plan unless --digits is given.
    #[arg(long)]
    pub grid: bool,
    #[arg(long, default_value_t = 40)]
    pub rows: usize,
    #[arg(long, default_value_t = 40)]
    pub cols: usize,
    /// Row-major digits for --grid.
    #[arg(long)]
    pub digits: Option<String>,
    /// Push message carrying this six-digit code.
    #[arg(long)]
    pub code: Option<String>,
    #[arg(long, default_value = "iphone6s")]
    pub profile: String,
    #[arg(long, default_value_t = 1.0)]
    pub contrast: f32,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmanateArgs {
    /// Raster PGM; padded with white to the visible area when smaller.
    pub input: PathBuf,
    #[arg(long, default_value = "iphone6s")]
    pub profile: String,
    /// Channel SNR in dB at unit distance, or `none`. Defaults to the profile SNR.
    #[arg(long, value_parser = parse_snr)]
    pub snr: Option<Snr>,
    #[arg(long, default_value_t = 1.0)]
    pub distance: f64,
    #[arg(long, default_value_t = 1.0)]
    pub signal_gain: f64,
    #[arg(long, default_value_t = emgleam::dataset::DEFAULT_FRAMES)]
    pub frames: usize,
    /// Refresh rate of the simulated display; defaults to the profile rate.
    #[arg(long)]
    pub f_r: Option<f64>,
    #[arg(long)]
    pub harmonic: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    pub highpass_alpha: f64,
    #[arg(long, default_value_t = emgleam::emanator::DEFAULT_SAMPLE_RATE_HZ)]
    pub sample_rate: f64,
    /// Receiver tuning error relative to the carrier, Hz.
    #[arg(long, default_value_t = 0.0)]
    pub tuning_offset: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy)]
pub enum Snr {
    None,
    Db(f64),
}

impl Snr {
    pub fn db(self) -> Option<f64> {
        match self {
            Snr::None => None,
            Snr::Db(v) => Some(v),
        }
    }
}

fn parse_snr(s: &str) -> Result<Snr, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Snr::None);
    }
    s.parse::<f64>()
        .map(Snr::Db)
        .map_err(|_| format!("expected dB or `none`, got {s:?}"))
}

fn parse_alignment(s: &str) -> Result<Alignment, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Alignment::Auto);
    }
    s.parse::<usize>()
        .map(Alignment::Fixed)
        .map_err(|_| format!("expected `auto` or a pixel offset, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub input: PathBuf,
    /// Use this profile's emage grid; otherwise one grid pixel per
    /// transmitted pixel.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Refresh rate; defaults to the capture's nominal rate.
    #[arg(long)]
    pub f_r: Option<f64>,
    /// Estimate the refresh rate from the capture, starting at --f-r.
    #[arg(long)]
    pub estimate_rate: bool,
    #[arg(long, default_value_t = emgleam::dataset::SYNC_SEARCH_PPM)]
    pub search_ppm: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    /// One-pole low-pass cutoff as a fraction of Nyquist; 1 disables it.
    #[arg(long, default_value_t = 1.0)]
    pub lowpass: f64,
    /// `auto` or a fixed flat pixel offset.
    #[arg(long, default_value = "auto", value_parser = parse_alignment)]
    pub alignment: Alignment,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SnrArgs {
    pub input: PathBuf,
    /// Signal centre; defaults to the capture centre frequency.
    #[arg(long)]
    pub center: Option<f64>,
    #[arg(long, default_value_t = emgleam::emanator::SNR_BAND_HZ)]
    pub band: f64,
    #[arg(long, default_value_t = emgleam::emanator::SNR_RESOLUTION_HZ)]
    pub resolution: f64,
    /// JSON report; the run echo goes next to it, or next to the input.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    /// Session id (letters, digits, `_`, `-`).
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value = "iphone6s")]
    pub profile: String,
    #[arg(long, default_value_t = emgleam::profile::GRID_ROWS)]
    pub rows: usize,
    #[arg(long, default_value_t = emgleam::profile::GRID_COLS)]
    pub cols: usize,
    #[arg(long, default_value_t = emgleam::dataset::DEFAULT_SCREENS)]
    pub screens: usize,
    /// Security-code session with this many codes instead of a grid session.
    #[arg(long)]
    pub codes: Option<usize>,
    #[arg(long, value_parser = parse_snr)]
    pub snr: Option<Snr>,
    /// Disable per-session distance, filter and tuning jitter.
    #[arg(long)]
    pub no_vary: bool,
    #[arg(long, default_value_t = emgleam::dataset::DEFAULT_FRAMES)]
    pub frames: usize,
    /// Keep the full emages next to the crops.
    #[arg(long)]
    pub keep_emages: bool,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub x: usize,
    #[arg(long)]
    pub y: usize,
    #[arg(long)]
    pub w: usize,
    #[arg(long)]
    pub h: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitModeArg {
    Fraction,
    Session,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Plan name for fraction mode; session mode writes training_1..k.
    #[arg(long, default_value = "split")]
    pub name: String,
    #[arg(long, value_enum, default_value = "session")]
    pub mode: SplitModeArg,
    /// Sessions in order; defaults to every session under the data dir.
    #[arg(long, value_delimiter = ',')]
    pub sessions: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = emgleam::dataset::DEFAULT_SCHEDULE)]
    pub schedule: Vec<usize>,
    #[arg(long, default_value_t = emgleam::dataset::DEFAULT_TEST_SESSIONS)]
    pub test_sessions: usize,
    #[arg(long, value_delimiter = ',', default_values_t = emgleam::dataset::DEFAULT_FRACTIONS)]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Arch {
    Lenet,
    Widened,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub split: String,
    #[arg(long, value_enum, default_value = "lenet")]
    pub arch: Arch,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Weight file; the history goes to `<output>.history.json`.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub input_h: usize,
    #[arg(long, default_value_t = 12)]
    pub input_w: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 3)]
    pub conv1: usize,
    #[arg(long, default_value_t = 4)]
    pub conv2: usize,
    #[arg(long, default_value_t = 16)]
    pub fc1: usize,
    #[arg(long, default_value_t = 12)]
    pub fc2: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 300)]
    pub coords: usize,
    /// Largest acceptable relative error; exceeding it exits with 3.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(short, long, default_value = "gradcheck.json")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["session", "emage"])))]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Code session: a directory holding manifest.json, or a session id
    /// under the data dir.
    #[arg(long)]
    pub session: Option<String>,
    /// Full-screen emage to map with the sliding window.
    #[arg(long)]
    pub emage: Option<PathBuf>,
    /// Report JSON (with a CSV sibling) or activation-map PGM.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["spec", "print_spec"])))]
pub struct TestbedArgs {
    /// Attacker-model INI file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Print the default attacker model and exit.
    #[arg(long)]
    pub print_spec: bool,
    /// Report JSON with `.csv` and `.confusion.pgm` siblings.
    #[arg(short, long, required_unless_present = "print_spec")]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.global.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if cli.global.threads > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.global.threads)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Render(a) => run::render(g, &a),
        Command::Emanate(a) => run::emanate(g, &a),
        Command::Reconstruct(a) => run::reconstruct(g, &a),
        Command::Snr(a) => run::snr(g, &a),
        Command::Session(a) => run::session(g, &a),
        Command::Crop(a) => run::crop(g, &a),
        Command::Split(a) => run::split(g, &a),
        Command::Train(a) => run::train(g, &a),
        Command::Gradcheck(a) => run::gradcheck(g, &a),
        Command::Attack(a) => run::attack(g, &a),
        Command::Testbed(a) => run::testbed(g, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Stage => 3,
            })
        }
    }
}
