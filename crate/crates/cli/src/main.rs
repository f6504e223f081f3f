use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[cfg(test)]
use commands::Failure;

/// Channel-optimized quantization and OFDM resource allocation for Gaussian latents.
#[derive(Debug, Parser)]
#[command(name = "cosq", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Design the quantizer grid and write it with a distortion table.
    BuildLibrary(BuildLibraryArgs),
    /// Design a single channel-optimized quantizer and print it as JSON.
    DesignQuantizer(DesignQuantizerArgs),
    /// Compute an allocation plan for one channel realization.
    Allocate(AllocateArgs),
    /// Run a Monte Carlo experiment.
    Simulate(SimulateArgs),
    /// AWGN bit error rate at the threshold SNR of every order and target.
    BerCheck(BerCheckArgs),
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Explicit BER targets, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["eps_lo", "eps_hi", "eps_count"])]
    pub eps: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.001)]
    pub eps_lo: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps_hi: f64,
    #[arg(long, default_value_t = 10)]
    pub eps_count: usize,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long, default_value_t = 10)]
    pub restarts: u32,
    #[arg(long, default_value_t = 200)]
    pub max_iters: u32,
    #[arg(long, default_value_t = 1e-9)]
    pub rel_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BuildLibraryArgs {
    #[arg(long, default_value_t = 8)]
    pub b_max: u32,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub design: DesignArgs,
    /// Library file to write.
    #[arg(short, long, default_value = "quantizer-library.json")]
    pub out: PathBuf,
    /// Distortion table; defaults to `distortion.csv` next to the library.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DesignQuantizerArgs {
    /// Bit depth.
    #[arg(short, long)]
    pub bits: u32,
    /// Per-bit flip probability.
    #[arg(long)]
    pub eps: f64,
    #[command(flatten)]
    pub design: DesignArgs,
}

#[derive(Debug, Args)]
pub struct ChannelArgs {
    /// `exp-pdp(<rms ns>)`, `tdl-c`, or a profile JSON file.
    #[arg(long, default_value = "exp-pdp(300)")]
    pub profile: String,
    #[arg(long, default_value_t = 0)]
    pub channel_seed: u64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 512)]
    pub n_sc: usize,
    #[arg(long, default_value_t = 30e3)]
    pub spacing_hz: f64,
    /// Average power per subcarrier; the budget is this times the subcarrier count.
    #[arg(long, default_value_t = 1.0)]
    pub power: f64,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[arg(short, long)]
    pub library: PathBuf,
    /// Latent statistics as JSON `{"means": [...], "variances": [...]}`.
    #[arg(long, conflicts_with = "source")]
    pub stats: Option<PathBuf>,
    /// Synthetic source description as JSON.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Latent count for the default synthetic source.
    #[arg(long, default_value_t = 512)]
    pub n_latents: usize,
    #[arg(long, default_value_t = 0)]
    pub source_seed: u64,
    #[command(flatten)]
    pub channel: ChannelArgs,
    #[arg(long, default_value_t = 0.4)]
    pub delta: f64,
    /// Seed for the padding bits.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long, default_value = "plan.json")]
    pub out: PathBuf,
    /// Read the written plan back and verify its invariants.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config JSON; built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set trials=10 --set source.n_latents=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(short, long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Directory for `report.csv` and `report.json`.
    #[arg(short, long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Only run the modem Monte Carlo at the library's BER targets.
    #[arg(long)]
    pub ber_check: bool,
    /// Bits per point in `--ber-check` mode.
    #[arg(long, default_value_t = 10_000_000)]
    pub bits: u64,
}

#[derive(Debug, Args)]
pub struct BerCheckArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 10_000_000)]
    pub bits: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as CSV.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::BuildLibrary(a) => commands::build_library(&a),
        Command::DesignQuantizer(a) => commands::design_quantizer(&a),
        Command::Allocate(a) => commands::allocate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::BerCheck(a) => commands::ber_check(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn negative_snr_parses() {
        let cli =
            Cli::try_parse_from(["cosq", "allocate", "-l", "lib.json", "--snr-db", "-3"]).unwrap();
        match cli.command {
            Command::Allocate(a) => assert_eq!(a.channel.snr_db, -3.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failure_codes() {
        assert_eq!(Failure::from(cosq_core::Error::NoFeasibleRate).code(), 3);
        assert_eq!(
            Failure::from(cosq_core::Error::InvalidArgument("x".into())).code(),
            2
        );
        assert_eq!(Failure::Check("x".into()).code(), 1);
    }
}
