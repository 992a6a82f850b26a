//! Runner for the verification suites and rate experiments.
//!
//! A run is fully described by an [`ExperimentConfig`]: the suites to
//! execute, the master seed, the output directory and the thread count.
//! Each suite draws its own seed from the master seed, so suites can be run
//! alone or together with identical results.

pub mod cli;
pub mod config;
pub mod report;
pub mod suites;

use std::path::PathBuf;

use vapt_core::rng::Rng;

pub use config::{ConfigError, ExperimentConfig, OutputFormat, Suite};
pub use report::{Check, SuiteReport};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{suite}: {source}")]
    Suite { suite: &'static str, source: vapt_core::Error },
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Suite { source: vapt_core::Error::Config(_), .. } => EXIT_CONFIG,
            _ => EXIT_ASSERTION,
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub reports: Vec<SuiteReport>,
    pub csv_paths: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(SuiteReport::passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_PASS
        } else {
            EXIT_ASSERTION
        }
    }
}

/// Seed handed to `suite`, derived from the master seed.
pub fn suite_seed(master: u64, suite: Suite) -> u64 {
    Rng::new(master).substream(suite.stream()).next_u64()
}

/// Runs one concrete suite on the current thread pool without writing
/// anything.
pub fn run_single(cfg: &ExperimentConfig, suite: Suite) -> Result<SuiteReport, RunError> {
    let seed = suite_seed(cfg.seed, suite);
    let result = match suite {
        Suite::Equivalence => suites::equivalence::run(&cfg.equivalence, seed),
        Suite::Gradcheck => suites::gradcheck::run(&cfg.gradcheck, seed),
        Suite::Params => suites::params::run(&cfg.params, seed),
        Suite::Voronoi => suites::voronoi::run(&cfg.voronoi, seed),
        Suite::RateNonlinear => suites::rate::run(suite.name(), &cfg.rate_nonlinear, seed),
        Suite::RateLinear => suites::rate::run(suite.name(), &cfg.rate_linear, seed),
        Suite::RateOverspecified => suites::rate::run(suite.name(), &cfg.rate_overspecified, seed),
        Suite::Noiseless => suites::rate::run(suite.name(), &cfg.noiseless, seed),
        Suite::All => unreachable!("expanded by the caller"),
    };
    result.map_err(|source| RunError::Suite { suite: suite.name(), source })
}

/// Runs every selected suite on a pool of `cfg.jobs` threads and writes
/// CSV, summary JSON and table files under `cfg.out`.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
    let echo = serde_json::to_value(cfg).expect("configuration serializes");
    let mut outcome = RunOutcome { reports: Vec::new(), csv_paths: Vec::new() };
    for suite in cfg.suite.expand() {
        log::info!("running {} (seed {})", suite.name(), suite_seed(cfg.seed, suite));
        let report = pool.install(|| run_single(cfg, suite))?;
        for c in report.failed_checks() {
            log::error!("{}: {} failed: {}", report.suite, c.name, c.detail);
        }
        outcome.csv_paths.push(report.write(&cfg.out, cfg.seed, &echo)?);
        outcome.reports.push(report);
    }
    Ok(outcome)
}
