//! The experiment file: one TOML document, every key optional.
//!
//! Parsing happens in two passes. The raw text is first deserialized on its
//! own so that unknown keys and type errors come back with a line and
//! column. The user's tables are then merged over the built-in defaults,
//! which lets a file override a single nested key (say
//! `rate_linear.experiment.replications`) without restating the rest of
//! the suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vapt_core::estimation::{LossKind, RateConfig, RegressionConfig};
use vapt_core::prompts::{Activation, PromptShapeConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Equivalence,
    Gradcheck,
    Params,
    Voronoi,
    RateNonlinear,
    RateLinear,
    RateOverspecified,
    Noiseless,
    All,
}

impl Suite {
    pub const CONCRETE: [Suite; 8] = [
        Suite::Equivalence,
        Suite::Gradcheck,
        Suite::Params,
        Suite::Voronoi,
        Suite::RateNonlinear,
        Suite::RateLinear,
        Suite::RateOverspecified,
        Suite::Noiseless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Gradcheck => "gradcheck",
            Suite::Params => "params",
            Suite::Voronoi => "voronoi",
            Suite::RateNonlinear => "rate-nonlinear",
            Suite::RateLinear => "rate-linear",
            Suite::RateOverspecified => "rate-overspecified",
            Suite::Noiseless => "noiseless",
            Suite::All => "all",
        }
    }

    /// Substream of the master seed owned by this suite.
    pub fn stream(self) -> u64 {
        Suite::CONCRETE.iter().position(|&s| s == self).map_or(u64::MAX, |i| i as u64)
    }

    pub fn expand(self) -> Vec<Suite> {
        if self == Suite::All {
            Suite::CONCRETE.to_vec()
        } else {
            vec![self]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceConfig {
    pub instances: usize,
    pub max_tokens: usize,
    pub max_dim: usize,
    pub heads: Vec<usize>,
    pub max_prompts: usize,
    pub tolerance: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig { instances: 100, max_tokens: 8, max_dim: 16, heads: vec![1, 2, 4], max_prompts: 4, tolerance: 1e-10 }
    }
}

/// Prompt-generator sizes, spelled out so a file may override one of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub blocks: usize,
    pub prompts: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub rank: usize,
    pub dim: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        PromptShapeConfig::vit_b().into()
    }
}

impl From<PromptShapeConfig> for ShapeConfig {
    fn from(c: PromptShapeConfig) -> Self {
        ShapeConfig {
            blocks: c.blocks,
            prompts: c.prompts,
            height: c.height,
            width: c.width,
            kernel: c.kernel,
            rank: c.rank,
            dim: c.dim,
        }
    }
}

impl From<ShapeConfig> for PromptShapeConfig {
    fn from(c: ShapeConfig) -> Self {
        PromptShapeConfig {
            blocks: c.blocks,
            prompts: c.prompts,
            height: c.height,
            width: c.width,
            kernel: c.kernel,
            rank: c.rank,
            dim: c.dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    pub heads: usize,
    pub batch: usize,
    pub activations: Vec<Activation>,
    pub layer_norm: bool,
    pub shape: ShapeConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: 20,
            step: vapt_core::grad::DEFAULT_FD_STEP,
            tolerance: 1e-5,
            heads: 2,
            batch: 2,
            activations: vec![Activation::Tanh, Activation::Identity],
            layer_norm: true,
            shape: ShapeConfig { blocks: 2, prompts: 2, height: 3, width: 3, kernel: 2, rank: 2, dim: 4 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsConfig {
    pub shape: ShapeConfig,
    /// Expected headline counts for `shape`; skipped when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_vapt: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_vpt: Option<u64>,
    /// Each grid axis is crossed with the others.
    pub grid_blocks: Vec<usize>,
    pub grid_prompts: Vec<usize>,
    /// `[height, width, kernel]` triples.
    pub grid_maps: Vec<[usize; 3]>,
    pub grid_rank: Vec<usize>,
    pub grid_dim: Vec<usize>,
}

impl Default for ParamsConfig {
    fn default() -> Self {
        ParamsConfig {
            shape: ShapeConfig::default(),
            expected_vapt: Some(29676),
            expected_vpt: Some(92160),
            grid_blocks: vec![1, 3],
            grid_prompts: vec![1, 4],
            grid_maps: vec![[3, 3, 1], [4, 5, 2], [6, 6, 3]],
            grid_rank: vec![1, 2],
            grid_dim: vec![8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoronoiConfig {
    pub pairs: usize,
    pub max_fitted: usize,
    pub max_true: usize,
    pub dim: usize,
    pub rank: usize,
    pub tolerance: f64,
}

impl Default for VoronoiConfig {
    fn default() -> Self {
        VoronoiConfig { pairs: 50, max_fitted: 6, max_true: 3, dim: 2, rank: 1, tolerance: 1e-12 }
    }
}

/// Pass criteria applied to a rate experiment. Absent entries are not
/// checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateChecks {
    /// Closed interval for the fitted log-log slope of the mean loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_window: Option<[f64; 2]>,
    /// Upper bound on the slope of the singleton-cell prompt error.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_slope_max: Option<f64>,
    /// Mean loss must fall at every step of the grid.
    pub strictly_decreasing: bool,
    /// Bound on every individual replication's loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSuiteConfig {
    pub experiment: RateConfig,
    pub checks: RateChecks,
}

impl Default for RateSuiteConfig {
    fn default() -> Self {
        RateSuiteConfig::nonlinear()
    }
}

impl RateSuiteConfig {
    pub fn nonlinear() -> Self {
        RateSuiteConfig {
            experiment: RateConfig::new("rate-nonlinear", LossKind::D1, RegressionConfig::default()),
            checks: RateChecks { slope_window: Some([-0.65, -0.35]), prompt_slope_max: Some(-0.3), ..Default::default() },
        }
    }

    pub fn linear() -> Self {
        let reg = RegressionConfig { activation: Activation::Identity, ..Default::default() };
        RateSuiteConfig {
            experiment: RateConfig::new("rate-linear", LossKind::D2, reg),
            checks: RateChecks { slope_window: Some([-0.65, -0.35]), ..Default::default() },
        }
    }

    pub fn overspecified() -> Self {
        let reg = RegressionConfig { fitted_experts: 3, ..Default::default() };
        RateSuiteConfig {
            experiment: RateConfig::new("rate-overspecified", LossKind::D1, reg),
            checks: RateChecks { slope_window: Some([-0.45, -0.10]), strictly_decreasing: true, ..Default::default() },
        }
    }

    pub fn noiseless() -> Self {
        let reg = RegressionConfig { noise_std: 0.0, ..Default::default() };
        let mut experiment = RateConfig::new("noiseless", LossKind::D1, reg);
        experiment.replications = 5;
        RateSuiteConfig { experiment, checks: RateChecks { max_loss: Some(1e-6), ..Default::default() } }
    }
}

/// Everything a run depends on. A run is reproducible from this value
/// alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub suite: Suite,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub format: OutputFormat,
    pub equivalence: EquivalenceConfig,
    pub gradcheck: GradcheckConfig,
    pub params: ParamsConfig,
    pub voronoi: VoronoiConfig,
    pub rate_nonlinear: RateSuiteConfig,
    pub rate_linear: RateSuiteConfig,
    pub rate_overspecified: RateSuiteConfig,
    pub noiseless: RateSuiteConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            suite: Suite::All,
            seed: 2024,
            out: PathBuf::from("results"),
            jobs: 0,
            format: OutputFormat::Table,
            equivalence: EquivalenceConfig::default(),
            gradcheck: GradcheckConfig::default(),
            params: ParamsConfig::default(),
            voronoi: VoronoiConfig::default(),
            rate_nonlinear: RateSuiteConfig::nonlinear(),
            rate_linear: RateSuiteConfig::linear(),
            rate_overspecified: RateSuiteConfig::overspecified(),
            noiseless: RateSuiteConfig::noiseless(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn invalid(field: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: e.to_string() }
}

impl ExperimentConfig {
    /// Parses a document; `origin` names it in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let spanned = |e: toml::de::Error| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::Parse { path: origin.to_string(), line, column, message: e.message().to_string() }
        };
        let user: toml::Table = toml::from_str(text).map_err(spanned)?;
        toml::from_str::<ExperimentConfig>(text).map_err(spanned)?;

        let mut merged = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| ConfigError::Schema { path: origin.to_string(), message: e.to_string() })?;
        merge(&mut merged, toml::Value::Table(user));
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Schema { path: origin.to_string(), message: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Canonical TOML: fixed key order, every default spelled out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.equivalence;
        if e.instances == 0 || e.max_tokens == 0 || e.heads.is_empty() || e.heads.contains(&0) {
            return Err(invalid("equivalence", "instances, max_tokens and heads must be positive"));
        }
        if let Some(&h) = e.heads.iter().find(|&&h| h > e.max_dim) {
            return Err(invalid("equivalence.heads", format!("{h} heads do not fit max_dim {}", e.max_dim)));
        }
        if !(e.tolerance > 0.0) {
            return Err(invalid("equivalence.tolerance", "must be positive"));
        }
        let g = &self.gradcheck;
        PromptShapeConfig::from(g.shape).validate().map_err(|err| invalid("gradcheck.shape", err))?;
        if g.heads == 0 || g.shape.dim % g.heads != 0 {
            return Err(invalid("gradcheck.heads", format!("{} heads must divide dim {}", g.heads, g.shape.dim)));
        }
        if g.seeds == 0 || g.batch == 0 || g.activations.is_empty() {
            return Err(invalid("gradcheck", "seeds, batch and activations must be non-empty"));
        }
        if !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return Err(invalid("gradcheck", "step and tolerance must be positive"));
        }
        let p = &self.params;
        PromptShapeConfig::from(p.shape).validate().map_err(|err| invalid("params.shape", err))?;
        if [p.grid_blocks.len(), p.grid_prompts.len(), p.grid_maps.len(), p.grid_rank.len(), p.grid_dim.len()].contains(&0) {
            return Err(invalid("params", "every grid axis needs at least one value"));
        }
        let v = &self.voronoi;
        if v.pairs == 0 || v.max_true == 0 || v.max_fitted < v.max_true || v.dim == 0 || v.rank == 0 {
            return Err(invalid("voronoi", "need pairs > 0, 0 < max_true <= max_fitted, positive dim and rank"));
        }
        for (name, r) in [
            ("rate_nonlinear", &self.rate_nonlinear),
            ("rate_linear", &self.rate_linear),
            ("rate_overspecified", &self.rate_overspecified),
            ("noiseless", &self.noiseless),
        ] {
            r.experiment.validate().map_err(|err| invalid(&format!("{name}.experiment"), err))?;
            if let Some([lo, hi]) = r.checks.slope_window {
                if !(lo <= hi) {
                    return Err(invalid(&format!("{name}.checks.slope_window"), format!("[{lo}, {hi}] is empty")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("", "t").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn emit_parse_emit_is_stable() {
        let text = ExperimentConfig::default().to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, "t").unwrap();
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn nested_override_keeps_suite_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[rate_linear.experiment.regression]\nnoise_std = 0.5\n", "t").unwrap();
        assert_eq!(cfg.rate_linear.experiment.regression.noise_std, 0.5);
        assert_eq!(cfg.rate_linear.experiment.regression.activation, Activation::Identity);
        assert_eq!(cfg.rate_linear.experiment.loss, LossKind::D2);
    }

    #[test]
    fn unknown_key_is_located() {
        let err = ExperimentConfig::from_toml_str("seed = 3\n\n[params]\nfoo = 1\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("foo"), "{msg}");
        assert!(msg.starts_with("cfg.toml:4:"), "{msg}");
    }

    #[test]
    fn type_error_is_located() {
        let err = ExperimentConfig::from_toml_str("seed = \"x\"\n", "c").unwrap_err();
        assert!(err.to_string().starts_with("c:1:"), "{err}");
    }

    #[test]
    fn semantic_error_names_the_field() {
        let err = ExperimentConfig::from_toml_str("[noiseless.experiment]\nreplications = 0\n", "c").unwrap_err();
        assert!(err.to_string().contains("noiseless.experiment"), "{err}");
    }

    #[test]
    fn line_columns() {
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
        assert_eq!(line_col("ab", 0), (1, 1));
    }
}
