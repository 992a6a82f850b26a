//! Monte Carlo convergence-rate experiments and the log-log slope readout.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::fit::{fit_least_squares, FitStatus, OptimizerConfig};
use super::model::{sample_dataset, MixingMeasure, PretrainedExpertSpec, RegressionConfig, RegressionModel};
use super::voronoi::{voronoi_assign, voronoi_assign_products, voronoi_loss_d1, voronoi_loss_d2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    D1,
    D2,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::D1 => "D1",
            LossKind::D2 => "D2",
        }
    }

    pub fn eval(self, g: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
        match self {
            LossKind::D1 => voronoi_loss_d1(g, truth),
            LossKind::D2 => voronoi_loss_d2(g, truth),
        }
    }
}

/// Serializable form of a mixing measure: `w1[j]` is `r×d`, `w2` is `d×r`,
/// both as lists of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub log_weights: Vec<f64>,
    pub w1: Vec<Vec<Vec<f64>>>,
    pub w2: Vec<Vec<f64>>,
}

fn rows_to_tensor(name: &str, rows: &[Vec<f64>]) -> Result<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{name} must be a non-empty rectangular matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(vec![rows.len(), cols], &flat).map_err(|e| Error::Config(format!("{name}: {e}")))
}

fn tensor_to_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl MeasureSpec {
    pub fn to_measure(&self) -> Result<MixingMeasure> {
        let w1 = self
            .w1
            .iter()
            .enumerate()
            .map(|(j, m)| rows_to_tensor(&format!("truth.w1[{j}]"), m))
            .collect::<Result<Vec<_>>>()?;
        MixingMeasure::new(self.log_weights.clone(), w1, rows_to_tensor("truth.w2", &self.w2)?)
            .map_err(|e| Error::Config(format!("truth: {e}")))
    }

    pub fn from_measure(g: &MixingMeasure) -> Self {
        MeasureSpec {
            log_weights: g.log_weights().to_vec(),
            w1: (0..g.atoms()).map(|j| tensor_to_rows(g.w1(j))).collect(),
            w2: tensor_to_rows(g.w2()),
        }
    }
}

/// Known experts. Absent matrices default to zero (`A0`) or are drawn
/// uniformly on `[-1, 1]` from the experiment seed (`η0`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainedConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0_mat: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a0_bias: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta0: Option<Vec<Vec<Vec<f64>>>>,
}

impl PretrainedConfig {
    pub fn build(&self, cfg: &RegressionConfig, rng: &mut Rng) -> Result<PretrainedExpertSpec> {
        let n = cfg.pretrained_experts;
        let (d, dout) = (cfg.dim, cfg.out_dim);
        let check_len = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Config(format!("pretrained.{name} lists {len} experts, config declares {n}")))
            }
        };
        let a0_mat = match &self.a0_mat {
            Some(ms) => {
                check_len("a0_mat", ms.len())?;
                ms.iter().map(|m| rows_to_tensor("pretrained.a0_mat", m)).collect::<Result<Vec<_>>>()?
            }
            None => vec![Tensor::zeros(vec![d, d]); n],
        };
        let a0_bias = match &self.a0_bias {
            Some(b) => {
                check_len("a0_bias", b.len())?;
                b.clone()
            }
            None => vec![0.0; n],
        };
        let eta0 = match &self.eta0 {
            Some(ms) => {
                check_len("eta0", ms.len())?;
                ms.iter().map(|m| rows_to_tensor("pretrained.eta0", m)).collect::<Result<Vec<_>>>()?
            }
            None => (0..n).map(|_| rng.uniform_tensor(vec![dout, d], -1.0, 1.0)).collect(),
        };
        PretrainedExpertSpec::new(a0_mat, a0_bias, eta0)
    }
}

/// The default true measure for `d = 2`, `r = 1`, `L = 2`: equal weights,
/// well separated inner rows, shared `W2 = (1, −0.8)ᵀ`.
pub fn default_truth() -> MeasureSpec {
    MeasureSpec {
        log_weights: vec![0.0, 0.0],
        w1: vec![vec![vec![1.5, 0.5]], vec![vec![-0.5, 1.5]]],
        w2: vec![vec![1.0], vec![-0.8]],
    }
}

/// One rate experiment: a fixed truth, a grid of sample sizes and a number
/// of independent replications per size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub experiment_id: String,
    pub loss: LossKind,
    pub regression: RegressionConfig,
    /// True measure; [`default_truth`] when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<MeasureSpec>,
    pub pretrained: PretrainedConfig,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    /// Standard deviation of the Gaussian perturbation of the oracle start.
    pub init_std: f64,
    pub test_inputs: usize,
    pub max_failure_fraction: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig::new("rate", LossKind::D1, RegressionConfig::default())
    }
}

impl RateConfig {
    pub fn new(experiment_id: &str, loss: LossKind, regression: RegressionConfig) -> Self {
        RateConfig {
            experiment_id: experiment_id.to_string(),
            loss,
            regression,
            truth: None,
            pretrained: PretrainedConfig::default(),
            sample_sizes: vec![200, 500, 1000, 2000, 5000, 10000],
            replications: 20,
            init_std: 1e-2,
            test_inputs: 100,
            max_failure_fraction: 0.1,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regression.validate()?;
        self.optimizer.validate()?;
        let truth = self.truth_measure()?;
        if truth.atoms() != self.regression.true_experts
            || truth.dim() != self.regression.dim
            || truth.rank() != self.regression.rank
        {
            return Err(Error::Config(format!(
                "truth has {} atoms with d={}, r={}; regression declares {} atoms with d={}, r={}",
                truth.atoms(),
                truth.dim(),
                truth.rank(),
                self.regression.true_experts,
                self.regression.dim,
                self.regression.rank
            )));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::Config("sample_sizes must be non-empty and positive".into()));
        }
        if self.sample_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sample_sizes must be strictly increasing".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be non-negative, got {}", self.init_std)));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn truth_measure(&self) -> Result<MixingMeasure> {
        self.truth.clone().unwrap_or_else(default_truth).to_measure()
    }
}

/// Outcome of one replication at one sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub experiment_id: String,
    pub n: usize,
    pub replication: usize,
    pub loss_kind: LossKind,
    pub loss: f64,
    pub fit_status: FitStatus,
    pub iterations: usize,
    /// Seed of the replication's generator, `Rng::new(seed)`.
    pub seed: u64,
    /// Largest sup-norm prompt error over singleton cells, if any.
    pub prompt_error: Option<f64>,
    /// Largest `‖ΔW1_i‖ + ‖ΔW2‖` over atoms in cells holding several atoms.
    pub overfit_param_error: Option<f64>,
    /// Root mean square of `f_Ĝ − f_G*` over the test inputs.
    pub regression_error: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope (NaN with exactly two points).
    pub slope_std_error: f64,
    pub points: usize,
}

/// Ordinary least squares of `log loss` on `log n`. Points with a
/// non-positive loss are dropped with a warning.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(n, l)| {
            let keep = n > 0.0 && l > 0.0;
            if !keep {
                log::warn!("dropping point (n={n}, loss={l}) from the log-log fit");
            }
            keep
        })
        .map(|&(n, l)| (n.ln(), l.ln()))
        .collect();
    let m = logs.len();
    if m < 3 {
        return Err(Error::Fit(format!("log-log fit needs at least 3 positive points, got {m}")));
    }
    let mf = m as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / mf;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / mf;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all sample sizes are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ssr / syy };
    let slope_std_error = (ssr / (mf - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, intercept, r_squared, slope_std_error, points: m })
}

/// Aggregate of the replications at one sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub fits: usize,
    pub failures: usize,
    pub mean_prompt_error: Option<f64>,
    pub mean_overfit_param_error: Option<f64>,
    pub mean_regression_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub experiment_id: String,
    pub loss_kind: LossKind,
    pub points: Vec<RatePoint>,
    pub slope: SlopeFit,
    pub prompt_slope: Option<SlopeFit>,
    pub overfit_param_slope: Option<SlopeFit>,
    pub regression_slope: Option<SlopeFit>,
    pub failures: usize,
    /// False when some sample size lost more than the allowed fraction of
    /// its fits.
    pub valid: bool,
}

#[derive(Clone, Debug)]
pub struct RateOutcome {
    pub records: Vec<RateRecord>,
    pub summary: RateSummary,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Oracle start: the truth, with atom 0 split evenly when more atoms are
/// fitted than exist, then perturbed coordinate-wise.
pub fn oracle_init(truth: &MixingMeasure, fitted: usize, std: f64, rng: &mut Rng) -> Result<MixingMeasure> {
    if fitted < truth.atoms() {
        return Err(Error::Config(format!("cannot fit {fitted} atoms to a {}-atom truth", truth.atoms())));
    }
    let base = truth.split_atom(0, fitted - truth.atoms() + 1)?;
    Ok(base.perturbed(std, rng))
}

fn frobenius_dist(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Shared<'a> {
    cfg: &'a RateConfig,
    model: RegressionModel,
    truth: MixingMeasure,
    test_x: Vec<Vec<f64>>,
}

fn replication(shared: &Shared<'_>, n: usize, rep: usize, seed: u64) -> Result<RateRecord> {
    let cfg = shared.cfg;
    let root = Rng::new(seed);
    let data = sample_dataset(
        &shared.truth,
        &shared.model,
        &cfg.regression.input,
        n,
        cfg.regression.noise_std,
        &mut root.substream(0),
    )?;
    let init = oracle_init(&shared.truth, cfg.regression.fitted_experts, cfg.init_std, &mut root.substream(1))?;
    let report = fit_least_squares(&data, &shared.model, &init, &cfg.optimizer, &mut root.substream(2))?;
    let g = &report.measure;
    let (loss, prompt_error, overfit_param_error, regression_error) = if report.status == FitStatus::Failed {
        (f64::NAN, None, None, f64::NAN)
    } else {
        let cells = match cfg.loss {
            LossKind::D1 => voronoi_assign(g, &shared.truth)?,
            LossKind::D2 => voronoi_assign_products(g, &shared.truth)?,
        };
        let mut prompt_error: Option<f64> = None;
        let mut overfit_param_error: Option<f64> = None;
        let dw2 = frobenius_dist(g.w2(), shared.truth.w2());
        for (j, cell) in cells.cells.iter().enumerate() {
            if cell.len() > 1 {
                for &i in cell {
                    let e = frobenius_dist(g.w1(i), shared.truth.w1(j)) + dw2;
                    overfit_param_error = Some(overfit_param_error.map_or(e, |p| p.max(e)));
                }
            }
            if let [i] = cell[..] {
                let mut sup = 0.0f64;
                for x in &shared.test_x {
                    let a = shared.model.prompt(g, i, x)?;
                    let b = shared.model.prompt(&shared.truth, j, x)?;
                    let dist = a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
                    sup = sup.max(dist);
                }
                prompt_error = Some(prompt_error.map_or(sup, |p| p.max(sup)));
            }
        }
        let mut sq = 0.0;
        for x in &shared.test_x {
            let a = shared.model.predict(g, x)?;
            let b = shared.model.predict(&shared.truth, x)?;
            sq += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        }
        let rms = (sq / shared.test_x.len().max(1) as f64).sqrt();
        (cfg.loss.eval(g, &shared.truth)?, prompt_error, overfit_param_error, rms)
    };
    Ok(RateRecord {
        experiment_id: cfg.experiment_id.clone(),
        n,
        replication: rep,
        loss_kind: cfg.loss,
        loss,
        fit_status: report.status,
        iterations: report.iterations,
        seed,
        prompt_error,
        overfit_param_error,
        regression_error,
        objective: report.objective,
    })
}

/// Seed of replication `rep` at sample size `n`, derived from the master
/// seed independently of the grid and of scheduling.
pub fn replication_seed(master: u64, n: usize, rep: usize) -> u64 {
    Rng::new(master).substream(2).substream(n as u64).substream(rep as u64).next_u64()
}

/// Runs every (sample size, replication) pair, in parallel on the current
/// rayon pool, and aggregates. Records come back sorted by `(n, rep)`.
pub fn rate_experiment(cfg: &RateConfig, master_seed: u64) -> Result<RateOutcome> {
    cfg.validate()?;
    let root = Rng::new(master_seed);
    let pretrained = cfg.pretrained.build(&cfg.regression, &mut root.substream(0))?;
    let model = RegressionModel::new(&cfg.regression, pretrained)?;
    let mut test_rng = root.substream(1);
    let test_x = (0..cfg.test_inputs).map(|_| cfg.regression.input.sample(cfg.regression.dim, &mut test_rng)).collect();
    let shared = Shared { cfg, model, truth: cfg.truth_measure()?, test_x };

    let jobs: Vec<(usize, usize)> =
        cfg.sample_sizes.iter().flat_map(|&n| (0..cfg.replications).map(move |r| (n, r))).collect();
    let records = jobs
        .par_iter()
        .map(|&(n, rep)| replication(&shared, n, rep, replication_seed(master_seed, n, rep)))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &records)?;
    Ok(RateOutcome { records, summary })
}

pub fn summarize(cfg: &RateConfig, records: &[RateRecord]) -> Result<RateSummary> {
    let mut points = Vec::new();
    let mut failures = 0;
    let mut valid = true;
    for &n in &cfg.sample_sizes {
        let at_n: Vec<&RateRecord> = records.iter().filter(|r| r.n == n).collect();
        let ok: Vec<&RateRecord> =
            at_n.iter().copied().filter(|r| r.fit_status != FitStatus::Failed && r.loss.is_finite()).collect();
        let failed = at_n.len() - ok.len();
        failures += failed;
        if failed as f64 > cfg.max_failure_fraction * at_n.len() as f64 || ok.is_empty() {
            valid = false;
        }
        let losses: Vec<f64> = ok.iter().map(|r| r.loss).collect();
        let (mean_loss, std_loss) = if losses.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&losses) };
        let prompt: Vec<f64> = ok.iter().filter_map(|r| r.prompt_error).collect();
        let overfit: Vec<f64> = ok.iter().filter_map(|r| r.overfit_param_error).collect();
        let regression: Vec<f64> = ok.iter().map(|r| r.regression_error).collect();
        points.push(RatePoint {
            n,
            mean_loss,
            std_loss,
            fits: ok.len(),
            failures: failed,
            mean_prompt_error: (!prompt.is_empty()).then(|| mean_std(&prompt).0),
            mean_overfit_param_error: (!overfit.is_empty()).then(|| mean_std(&overfit).0),
            mean_regression_error: if regression.is_empty() { f64::NAN } else { mean_std(&regression).0 },
        });
    }
    let curve = |f: &dyn Fn(&RatePoint) -> Option<f64>| -> Vec<(f64, f64)> {
        points.iter().filter_map(|p| f(p).map(|v| (p.n as f64, v))).collect()
    };
    let slope = fit_loglog_slope(&curve(&|p| Some(p.mean_loss)))?;
    let prompt_slope = fit_loglog_slope(&curve(&|p| p.mean_prompt_error)).ok();
    let overfit_param_slope = fit_loglog_slope(&curve(&|p| p.mean_overfit_param_error)).ok();
    let regression_slope = fit_loglog_slope(&curve(&|p| Some(p.mean_regression_error))).ok();
    Ok(RateSummary {
        experiment_id: cfg.experiment_id.clone(),
        loss_kind: cfg.loss,
        points,
        slope,
        prompt_slope,
        overfit_param_slope,
        regression_slope,
        failures,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Activation;

    #[test]
    fn exact_power_law_slope() {
        let pts: Vec<(f64, f64)> = [200.0, 500.0, 1e3, 2e3, 5e3, 1e4].iter().map(|&n: &f64| (n, n.powf(-0.5))).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_losses_have_zero_slope() {
        let pts = [(10.0, 2.0), (100.0, 2.0), (1000.0, 2.0)];
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!(fit.slope.abs() < 1e-15);
    }

    #[test]
    fn noisy_power_law_slope() {
        let mut rng = Rng::new(11);
        let pts: Vec<(f64, f64)> = [200.0, 500.0, 1e3, 2e3, 5e3, 1e4]
            .iter()
            .map(|&n: &f64| (n, 3.0 * n.powf(-0.5) * (1.0 + 0.01 * rng.normal())))
            .collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!((-0.52..=-0.48).contains(&fit.slope), "{}", fit.slope);
    }

    #[test]
    fn nonpositive_points_are_dropped() {
        let pts = [(10.0, 0.0), (100.0, 1.0), (1000.0, 0.1), (1e4, 0.01)];
        let fit = fit_loglog_slope(&pts).unwrap();
        assert_eq!(fit.points, 3);
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&pts[..3]).is_err());
    }

    #[test]
    fn measure_spec_roundtrip() {
        let t = default_truth().to_measure().unwrap();
        assert_eq!(MeasureSpec::from_measure(&t), default_truth());
        let bad = MeasureSpec { w2: vec![vec![1.0], vec![]], ..default_truth() };
        assert!(bad.to_measure().is_err());
    }

    #[test]
    fn config_checks() {
        let cfg = RateConfig::new("x", LossKind::D1, RegressionConfig::default());
        assert!(cfg.validate().is_ok());
        let mut c = cfg.clone();
        c.sample_sizes = vec![100, 50];
        assert!(c.validate().is_err());
        let mut c = cfg.clone();
        c.regression.true_experts = 3;
        c.regression.fitted_experts = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn small_experiment_is_deterministic_and_sorted() {
        let mut cfg = RateConfig::new("tiny", LossKind::D1, RegressionConfig { activation: Activation::Tanh, ..Default::default() });
        cfg.sample_sizes = vec![50, 100, 200];
        cfg.replications = 3;
        cfg.optimizer.max_iterations = 200;
        let a = rate_experiment(&cfg, 9).unwrap();
        let b = rate_experiment(&cfg, 9).unwrap();
        assert_eq!(a.records, b.records);
        let keys: Vec<(usize, usize)> = a.records.iter().map(|r| (r.n, r.replication)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(a.records[4].seed, replication_seed(9, 100, 1));
        assert_eq!(a.summary.points.len(), 3);
    }

    #[test]
    fn oracle_init_splits_then_perturbs() {
        let t = default_truth().to_measure().unwrap();
        let g = oracle_init(&t, 3, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(g.atoms(), 3);
        assert!((g.weight(0) + g.weight(2) - t.weight(0)).abs() < 1e-15);
        assert!(oracle_init(&t, 1, 0.0, &mut Rng::new(1)).is_err());
    }
}
