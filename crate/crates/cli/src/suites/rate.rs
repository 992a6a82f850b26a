use statrs::distribution::{ContinuousCDF, StudentsT};
use vapt_core::estimation::{rate_experiment, SlopeFit};
use vapt_core::Result;

use crate::config::RateSuiteConfig;
use crate::report::{fmt_f64, SuiteReport};

pub const CSV_COLUMNS: [&str; 8] = ["experiment_id", "n", "replication", "loss_kind", "loss", "fit_status", "iterations", "seed"];

/// Two-sided 95% interval for the slope from the t distribution.
pub fn slope_ci95(fit: &SlopeFit) -> Option<[f64; 2]> {
    let df = fit.points.checked_sub(2).filter(|&df| df > 0)? as f64;
    let t = StudentsT::new(0.0, 1.0, df).ok()?.inverse_cdf(0.975);
    let half = t * fit.slope_std_error;
    half.is_finite().then_some([fit.slope - half, fit.slope + half])
}

pub fn run(name: &str, cfg: &RateSuiteConfig, seed: u64) -> Result<SuiteReport> {
    let outcome = rate_experiment(&cfg.experiment, seed)?;
    let s = &outcome.summary;
    let mut report = SuiteReport::new(name, seed, CSV_COLUMNS.to_vec());
    for r in &outcome.records {
        report.rows.push(vec![
            r.experiment_id.clone(),
            r.n.to_string(),
            r.replication.to_string(),
            r.loss_kind.as_str().into(),
            fmt_f64(r.loss),
            r.fit_status.as_str().into(),
            r.iterations.to_string(),
            r.seed.to_string(),
        ]);
    }
    report.metric("experiment_id", &s.experiment_id);
    report.metric("loss_kind", s.loss_kind.as_str());
    report.metric("slope", s.slope.slope);
    report.metric("slope_ci95", slope_ci95(&s.slope));
    report.metric("intercept", s.slope.intercept);
    report.metric("r_squared", s.slope.r_squared);
    report.metric("slope_std_error", s.slope.slope_std_error);
    report.metric("failures", s.failures);
    report.metric("fits", outcome.records.len() - s.failures);
    report.metric("valid", s.valid);
    report.metric("prompt_slope", s.prompt_slope.map(|f| f.slope));
    report.metric("overfit_param_slope", s.overfit_param_slope.map(|f| f.slope));
    report.metric("regression_slope", s.regression_slope.map(|f| f.slope));
    report.metric("points", &s.points);

    let failed: Vec<String> = s.points.iter().filter(|p| p.failures > 0).map(|p| format!("n={}: {}", p.n, p.failures)).collect();
    report.check(
        "failed fits within budget",
        s.valid,
        format!(
            "{} failed of {} (limit {} per n){}",
            s.failures,
            outcome.records.len(),
            cfg.experiment.max_failure_fraction,
            if failed.is_empty() { String::new() } else { format!("; {}", failed.join(", ")) }
        ),
    );
    let c = &cfg.checks;
    if let Some([lo, hi]) = c.slope_window {
        let v = s.slope.slope;
        report.check(
            format!("{} slope in window", s.loss_kind.as_str()),
            (lo..=hi).contains(&v),
            format!("{v:.4} in [{lo}, {hi}]"),
        );
    }
    if let Some(max) = c.prompt_slope_max {
        let v = s.prompt_slope.map(|f| f.slope);
        report.check(
            "prompt error slope",
            v.is_some_and(|v| v <= max),
            match v {
                Some(v) => format!("{v:.4} <= {max}"),
                None => "no singleton cells".into(),
            },
        );
    }
    if c.strictly_decreasing {
        let means: Vec<f64> = s.points.iter().map(|p| p.mean_loss).collect();
        let ok = means.windows(2).all(|w| w[1] < w[0]);
        report.check(
            "mean loss strictly decreasing",
            ok,
            means.iter().map(|m| fmt_f64(*m)).collect::<Vec<_>>().join(" > "),
        );
    }
    if let Some(max) = c.max_loss {
        let worst = outcome.records.iter().map(|r| r.loss).fold(0.0f64, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
        report.check("every replication below the loss bound", worst < max, format!("max loss {} < {max}", fmt_f64(worst)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_uses_t_quantile() {
        let fit = SlopeFit { slope: -0.5, intercept: 0.0, r_squared: 1.0, slope_std_error: 0.1, points: 6 };
        let [lo, hi] = slope_ci95(&fit).unwrap();
        // t(0.975, 4) = 2.7764.
        assert!((hi - lo - 2.0 * 0.27764).abs() < 1e-4);
        assert!(slope_ci95(&SlopeFit { points: 2, ..fit }).is_none());
    }
}
