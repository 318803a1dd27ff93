//! `titrate` command line: cohort generation, single scenarios and the
//! three-scenario comparison.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (including a scenario in which every patient failed).

pub mod config;
pub mod figure;
pub mod output;

use std::ffi::OsString;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cohort::{self, Cohort};
use crate::scenario::{self, ScenarioResult, TrendReport};

pub use config::RunConfig;
use output::{CohortRow, ResultRow, SummaryRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Model(#[from] crate::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "titrate",
    version,
    about = "Basal insulin titration from closed-loop CGM data"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (0 for one per core).
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw and screen the virtual cohort and write cohort.csv.
    Cohort,
    /// Run one configured scenario over the cohort.
    Run { scenario: String },
    /// Run the long, boosted and short scenarios and report the trend.
    Compare,
}

impl Cli {
    /// Configuration file plus command-line overrides.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(n) = self.parallel {
            cfg.parallel = n;
        }
        Ok(cfg)
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn build_cohort(cfg: &RunConfig) -> Result<Cohort, CliError> {
    Ok(cohort::generate_cohort(cfg.cohort_size, &cfg.population())?)
}

pub fn write_cohort(path: &Path, cohort: &Cohort, cfg: &RunConfig) -> Result<(), CliError> {
    let y_ref = cfg.population.screening.y_ref;
    let rows: Vec<CohortRow> = cohort
        .patients
        .iter()
        .map(|p| CohortRow::new(p, y_ref))
        .collect();
    output::write_rows(path, &rows)
}

/// Runs `name` over `cohort` and writes traces, results, summary and figure
/// under `out_dir/name`.
pub fn run_and_write(
    cfg: &RunConfig,
    name: &str,
    cohort: &Cohort,
) -> Result<ScenarioResult, CliError> {
    let spec = cfg.scenario(name)?;
    let result = scenario::run_scenario(spec, &cohort.patients, &cfg.protocol())?;
    let dir = cfg.out_dir.join(&spec.name);
    let traces = dir.join("traces");
    create_dir(&traces)?;
    for run in result.runs() {
        let path = traces.join(format!("patient_{:03}.csv", run.patient.id));
        let file = std::fs::File::create(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        run.trace
            .write_csv(io::BufWriter::new(file))
            .map_err(|source| CliError::Csv { path, source })?;
    }
    let rows: Vec<ResultRow> = result.outcomes.iter().map(ResultRow::new).collect();
    output::write_rows(&dir.join("results.csv"), &rows)?;
    output::write_rows(
        &dir.join("summary.csv"),
        &[SummaryRow::new(&result, cfg.first_day_limit)],
    )?;
    write_text(
        &dir.join("figure.svg"),
        &figure::render(&result, &cfg.thresholds),
    )?;
    Ok(result)
}

fn summary_line(row: &SummaryRow) -> String {
    format!(
        "{}: {} patients, {} failed, {} hypo, {} overestimated, mean time in range {:.3}, median |dose error| {:.3}",
        row.scenario,
        row.patients,
        row.failures,
        row.hypo_count,
        row.overestimated_count,
        row.mean_time_in_range,
        row.dose_error_median_abs
    )
}

fn total_failure(result: &ScenarioResult) -> Option<CliError> {
    let s = &result.summary;
    (s.failures == s.patients)
        .then(|| CliError::Runtime(format!("scenario '{}': every patient failed", s.scenario)))
}

/// The comparison over a shared cohort; writes per-scenario outputs,
/// `summary.csv` and `verdict.txt`.
pub fn compare(
    cfg: &RunConfig,
    cohort: &Cohort,
) -> Result<(TrendReport, Vec<ScenarioResult>), CliError> {
    let names = [&cfg.compare.long, &cfg.compare.boosted, &cfg.compare.short];
    for name in names {
        cfg.scenario(name)?;
    }
    let results = names
        .iter()
        .map(|name| run_and_write(cfg, name, cohort))
        .collect::<Result<Vec<_>, _>>()?;
    let report = scenario::compare_scenarios(
        &results[0].summary,
        &results[1].summary,
        &results[2].summary,
    );
    let rows: Vec<SummaryRow> = results
        .iter()
        .map(|r| SummaryRow::new(r, cfg.first_day_limit))
        .collect();
    output::write_rows(&cfg.out_dir.join("summary.csv"), &rows)?;
    write_text(
        &cfg.out_dir.join("verdict.txt"),
        &format!("{}\n", report.verdict_line()),
    )?;
    Ok((report, results))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Cohort => {}
        Command::Run { scenario } => {
            cfg.scenario(scenario)?;
        }
        Command::Compare => {
            for name in [&cfg.compare.long, &cfg.compare.boosted, &cfg.compare.short] {
                cfg.scenario(name)?;
            }
        }
    }
    create_dir(&cfg.out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| {
        let cohort = build_cohort(&cfg)?;
        write_cohort(&cfg.out_dir.join("cohort.csv"), &cohort, &cfg)?;
        match &cli.command {
            Command::Cohort => {
                println!(
                    "cohort: {} patients from {} draws (acceptance rate {:.3})",
                    cohort.len(),
                    cohort.attempts,
                    cohort.acceptance_rate()
                );
                Ok(())
            }
            Command::Run { scenario } => {
                let result = run_and_write(&cfg, scenario, &cohort)?;
                println!(
                    "{}",
                    summary_line(&SummaryRow::new(&result, cfg.first_day_limit))
                );
                total_failure(&result).map_or(Ok(()), Err)
            }
            Command::Compare => {
                let (report, results) = compare(&cfg, &cohort)?;
                for r in &results {
                    println!("{}", summary_line(&SummaryRow::new(r, cfg.first_day_limit)));
                }
                println!("{}", report.verdict_line());
                results.iter().find_map(total_failure).map_or(Ok(()), Err)
            }
        }
    })
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
