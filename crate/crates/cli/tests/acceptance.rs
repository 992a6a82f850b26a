//! Acceptance criteria for the laboratory, one printed line per criterion.
//!
//! Tolerances and windows are fixed here rather than read from the default
//! configuration, so editing a default cannot loosen a criterion.

use std::time::{Duration, Instant};

use serde_json::Value;
use vapt_lab::{run_single, run_suite, ExperimentConfig, Suite, SuiteReport};

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn metric(r: &SuiteReport, key: &str) -> f64 {
    r.metrics.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn check_passed(r: &SuiteReport, name: &str) -> bool {
    r.checks.iter().any(|c| c.name == name && c.passed)
}

fn run(cfg: &ExperimentConfig, suite: Suite) -> (SuiteReport, Duration) {
    let (r, t) = timed(|| run_single(cfg, suite));
    (r.unwrap_or_else(|e| panic!("{} did not run: {e}", suite.name())), t)
}

fn opt_slope(r: &SuiteReport, key: &str) -> String {
    r.metrics[key].as_f64().map_or("n/a".into(), |v| format!("{v:.3}"))
}

fn rate_line(r: &SuiteReport, window: [f64; 2], t: Duration) -> String {
    let ci = r.metrics["slope_ci95"].as_array().map_or("n/a".into(), |a| {
        format!("[{:.3}, {:.3}]", a[0].as_f64().unwrap_or(f64::NAN), a[1].as_f64().unwrap_or(f64::NAN))
    });
    format!(
        "slope {:.4} in [{}, {}] (95% CI {ci}, R² {:.3}), failed fits {}, prompt-error slope {}, {:.0} s",
        metric(r, "slope"),
        window[0],
        window[1],
        metric(r, "r_squared"),
        r.metrics["failures"],
        opt_slope(r, "prompt_slope"),
        t.as_secs_f64()
    )
}

fn mean_losses(r: &SuiteReport) -> Vec<f64> {
    r.metrics["points"].as_array().unwrap().iter().map(|p| p["mean_loss"].as_f64().unwrap_or(f64::NAN)).collect()
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { seed: 2024, out: dir.path().to_path_buf(), jobs: 0, ..Default::default() };
    let grid = [200, 500, 1000, 2000, 5000, 10000];
    let mut verdicts = Vec::new();

    // 1. Attention rows against their mixture-of-experts rewrite.
    let e = &cfg.equivalence;
    assert_eq!((e.instances, e.max_tokens, e.max_dim, e.max_prompts), (100, 8, 16, 4));
    assert_eq!(e.heads, vec![1, 2, 4]);
    let (r, t) = run(&cfg, Suite::Equivalence);
    let diff = metric(&r, "max_abs_diff");
    verdicts.push(Verdict {
        id: 1,
        name: "moe-attention equivalence",
        passed: diff < 1e-10 && t < Duration::from_secs(10),
        detail: format!("max_abs_diff {diff:e} < 1e-10 over 100 instances, {:.2} s", t.as_secs_f64()),
    });

    // 2. Gradients.
    let g = &cfg.gradcheck;
    assert_eq!(g.seeds, 20);
    let (r, t) = run(&cfg, Suite::Gradcheck);
    let err = metric(&r, "max_rel_err");
    let covered = ["tanh", "identity"].iter().all(|a| r.rows.iter().filter(|row| row[2] == *a).count() == 20)
        && r.rows.iter().filter(|row| row[1] == "vpt").count() == 20;
    verdicts.push(Verdict {
        id: 2,
        name: "gradient correctness",
        passed: err < 1e-5 && covered && t < Duration::from_secs(60),
        detail: format!("max relative error {err:e} < 1e-5 (vpt, vapt tanh, vapt identity; 20 seeds), {:.1} s", t.as_secs_f64()),
    });

    // 3. Parameter accounting.
    let (r, t) = run(&cfg, Suite::Params);
    let grid_configs = r.rows.len() - 1;
    let (vapt, vpt) = (metric(&r, "vapt"), metric(&r, "vpt"));
    verdicts.push(Verdict {
        id: 3,
        name: "parameter accounting",
        passed: check_passed(&r, "closed form matches enumeration on the grid")
            && check_passed(&r, "main shape matches enumeration")
            && grid_configs >= 20
            && vapt == 29676.0
            && vpt == 92160.0
            && t < Duration::from_secs(1),
        detail: format!("{grid_configs} grid configs exact; vapt {vapt} vs vpt {vpt}; {:.3} s", t.as_secs_f64()),
    });

    // 4. Voronoi losses and cells.
    assert_eq!((cfg.voronoi.pairs, cfg.voronoi.max_fitted), (50, 6));
    let (r, t) = run(&cfg, Suite::Voronoi);
    let diff = metric(&r, "max_abs_diff");
    verdicts.push(Verdict {
        id: 4,
        name: "voronoi-loss correctness",
        passed: diff < 1e-12
            && metric(&r, "self_loss") == 0.0
            && metric(&r, "doubled_atom_loss") < 1e-12
            && check_passed(&r, "cells match exhaustive scan")
            && t < Duration::from_secs(5),
        detail: format!(
            "max diff {diff:e} < 1e-12 on 50 pairs, self {:e}, doubled {:e}, {:.2} s",
            metric(&r, "self_loss"),
            metric(&r, "doubled_atom_loss"),
            t.as_secs_f64()
        ),
    });

    // 5-8. Rate experiments.
    for (suite, id, name, window, limit) in [
        (Suite::RateNonlinear, 5, "nonlinear rate (D1)", [-0.65, -0.35], 30 * 60),
        (Suite::RateLinear, 6, "linear rate (D2)", [-0.65, -0.35], 20 * 60),
        (Suite::RateOverspecified, 7, "over-specified rate (D1)", [-0.45, -0.10], 30 * 60),
    ] {
        let exp = match suite {
            Suite::RateNonlinear => &cfg.rate_nonlinear.experiment,
            Suite::RateLinear => &cfg.rate_linear.experiment,
            _ => &cfg.rate_overspecified.experiment,
        };
        assert_eq!((exp.sample_sizes.as_slice(), exp.replications), (&grid[..], 20));
        let (r, t) = run(&cfg, suite);
        let slope = metric(&r, "slope");
        let mut passed = (window[0]..=window[1]).contains(&slope)
            && r.metrics["valid"] == Value::Bool(true)
            && t < Duration::from_secs(limit);
        let mut detail = rate_line(&r, window, t);
        if suite == Suite::RateOverspecified {
            let m = mean_losses(&r);
            let decreasing = m.windows(2).all(|w| w[1] < w[0]);
            passed &= decreasing;
            let means: Vec<String> = m.iter().map(|v| format!("{v:.3}")).collect();
            detail = format!(
                "{detail}; mean D1 by n {} strictly decreasing: {decreasing}; multi-atom-cell parameter slope {}",
                means.join(" "),
                opt_slope(&r, "overfit_param_slope")
            );
        }
        verdicts.push(Verdict { id, name, passed, detail });
    }

    let (r, t) = run(&cfg, Suite::Noiseless);
    let worst = r.rows.iter().map(|row| row[4].parse::<f64>().unwrap()).fold(0.0f64, f64::max);
    verdicts.push(Verdict {
        id: 8,
        name: "noiseless consistency",
        passed: worst < 1e-6 && r.rows.len() >= grid.len() && t < Duration::from_secs(120),
        detail: format!("max D1 {worst:e} < 1e-6 over {} fits at every n, {:.0} s", r.rows.len(), t.as_secs_f64()),
    });

    // 9. Byte-identical CSV on rerun, single-threaded.
    let mut small = cfg.clone();
    small.suite = Suite::RateNonlinear;
    small.jobs = 1;
    small.rate_nonlinear.experiment.sample_sizes = vec![200, 500, 1000];
    small.rate_nonlinear.experiment.replications = 4;
    let read = |c: &ExperimentConfig| std::fs::read(&run_suite(c).unwrap().csv_paths[0]).unwrap();
    let first = read(&small);
    let second = read(&small);
    small.jobs = 2;
    let threaded = read(&small);
    verdicts.push(Verdict {
        id: 9,
        name: "determinism",
        passed: first == second && first == threaded,
        detail: format!(
            "{} CSV bytes identical on rerun: {}; identical with 2 threads: {}",
            first.len(),
            first == second,
            first == threaded
        ),
    });

    println!();
    for v in &verdicts {
        println!("criterion {} [{}] {}: {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", verdicts.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
