//! Argument handling for the `vapt-lab` binary, kept in the library so the
//! whole command path can be exercised in-process.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use crate::config::{ExperimentConfig, OutputFormat, Suite};
use crate::{run_suite, EXIT_CONFIG, EXIT_PASS};

/// Verification suites and estimation-rate experiments for adaptive
/// prompt tuning.
///
/// Every flag can also be set through the environment variable shown;
/// flags and variables override the config file.
#[derive(Parser, Debug)]
#[command(name = "vapt-lab", version)]
pub struct Cli {
    #[arg(long, env = "VAPT_LAB_SUITE", value_enum)]
    pub suite: Option<Suite>,
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long, env = "VAPT_LAB_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "VAPT_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "VAPT_LAB_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "VAPT_LAB_JOBS")]
    pub jobs: Option<usize>,
    /// What to print on stdout; all three are always written to disk.
    #[arg(long, env = "VAPT_LAB_FORMAT", value_enum)]
    pub format: Option<OutputFormat>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

/// Exit code and the text destined for stdout and stderr.
#[derive(Debug, Default)]
pub struct Invocation {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Cli {
    /// Config file (or defaults) with flags and environment applied on top.
    pub fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.suite {
            cfg.suite = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(f) = self.format {
            cfg.format = f;
        }
        Ok(cfg)
    }
}

pub fn invoke<I, T>(args: I) -> Invocation
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Invocation { code: EXIT_PASS, stdout: text, ..Default::default() },
                _ => Invocation { code: EXIT_CONFIG, stderr: text, ..Default::default() },
            };
        }
    };
    let cfg = match cli.resolve() {
        Ok(c) => c,
        Err(msg) => return Invocation { code: EXIT_CONFIG, stderr: format!("error: {msg}\n"), ..Default::default() },
    };
    if cli.print_config {
        return Invocation { code: EXIT_PASS, stdout: cfg.to_toml_string(), ..Default::default() };
    }
    match run_suite(&cfg) {
        Ok(outcome) => {
            let echo = serde_json::to_value(&cfg).expect("configuration serializes");
            let mut inv = Invocation { code: outcome.exit_code(), ..Default::default() };
            for r in &outcome.reports {
                inv.stdout.push_str(&r.render(cfg.format, cfg.seed, &echo));
                for c in r.failed_checks() {
                    inv.stderr.push_str(&format!("assertion failed: {}: {} ({})\n", r.suite, c.name, c.detail));
                }
            }
            inv
        }
        Err(e) => Invocation { code: e.exit_code(), stderr: format!("error: {e}\n"), ..Default::default() },
    }
}
