//! `raketab`: batch pipeline for surname/geolocation race estimation.
//!
//! Every subcommand writes fixed file names into `--out-dir` plus a
//! `manifest.json` with flags, seed and SHA-256 digests of inputs and
//! outputs. Errors go to stderr as one JSON object; exit code 2 means bad
//! input, 3 means raking did not converge.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use output::CliError;

#[derive(Parser)]
#[command(name = "raketab", version, about = "BISG, raking and evaluation for surname x geolocation x race tables")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact factors from a labeled table.
    FitFactors(FitFactorsArgs),
    /// Per-cell predictions from factors and a voter file or cell counts.
    Predict(PredictArgs),
    /// Rake a prediction table to race and cell margins.
    Rake(RakeArgs),
    /// Calibration map between two race distributions.
    CalibMap(CalibMapArgs),
    /// Subsample a voter file to a target race distribution.
    Subsample(SubsampleArgs),
    /// Score predictions against a labeled table.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic population.
    Synth(SynthArgs),
    /// Race and cell margins of a table.
    Margins(MarginsArgs),
}

#[derive(Args, Serialize)]
pub struct FitFactorsArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Bisg,
    GeoOnly,
    SurnameOnly,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MappingArg {
    Canonical,
    Florida,
    NorthCarolina,
}

impl MappingArg {
    pub fn mapping(self) -> raketab_core::ingest::CategoryMapping {
        use raketab_core::ingest::CategoryMapping;
        match self {
            MappingArg::Canonical => CategoryMapping::canonical(),
            MappingArg::Florida => CategoryMapping::florida(),
            MappingArg::NorthCarolina => CategoryMapping::north_carolina(),
        }
    }
}

#[derive(Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub surname_factors: PathBuf,
    #[arg(long)]
    pub geo_factors: PathBuf,
    /// Voter file; cells are counted from its records.
    #[arg(long, conflicts_with = "cells", required_unless_present = "cells")]
    pub voters: Option<PathBuf>,
    /// Cell counts `surname,geoid,count` instead of a voter file.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "canonical")]
    pub mapping: MappingArg,
    /// Drop inactive and race-missing voters before counting.
    #[arg(long)]
    pub require_race: bool,
    #[arg(long, value_enum, default_value = "bisg")]
    pub method: MethodArg,
    /// Registered-voter race distribution used to reweight the prior.
    #[arg(long)]
    pub adjust_cps: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    RaceFirst,
    CellFirst,
}

#[derive(Args, Serialize)]
pub struct RakeArgs {
    /// Count-scale base table.
    #[arg(long)]
    pub base: PathBuf,
    /// JSON race margin (`race_counts`, or `race_distribution` scaled to the
    /// cell total).
    #[arg(long)]
    pub race_margin: PathBuf,
    /// Cell totals `surname,geoid,count`; defaults to the base's own.
    #[arg(long)]
    pub cell_margin: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value = "race-first")]
    pub order: OrderArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct CalibMapArgs {
    /// Distribution the map starts from (JSON margin file).
    #[arg(long)]
    pub source: PathBuf,
    /// Distribution the map must reach.
    #[arg(long)]
    pub target: PathBuf,
    /// Optional count-scale predictions to push through the map.
    #[arg(long)]
    pub apply: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub voters: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub mapping: MappingArg,
    /// JSON margin file with the target race distribution.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationArg {
    EstimateMinusTruth,
    TruthMinusEstimate,
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// `geoid,region` map for regional aggregates.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "estimate-minus-truth")]
    pub orientation: OrientationArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawArg {
    Expected,
    Multinomial,
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub n_surnames: usize,
    #[arg(long, default_value_t = 10)]
    pub n_geolocations: usize,
    /// Six comma-separated shares: aian,api,black,hispanic,white,other.
    #[arg(long, value_delimiter = ',', num_args = 6, default_values_t = [0.01, 0.05, 0.15, 0.2, 0.55, 0.04])]
    pub race_mix: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub dependence: f64,
    #[arg(long, default_value_t = 100_000.0)]
    pub total: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "expected")]
    pub draw: DrawArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Serialize)]
pub struct MarginsArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("RAKETAB_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| CliError::input(format!("RAKETAB_THREADS: not a thread count `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::input(format!("RAKETAB_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::FitFactors(a) => commands::fit_factors(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Rake(a) => commands::rake(&a),
        Command::CalibMap(a) => commands::calib_map(&a),
        Command::Subsample(a) => commands::subsample(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Margins(a) => commands::margins(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
