use vapt_core::attention::AttentionWeights;
use vapt_core::grad::{grad_check, ParamVector};
use vapt_core::prompts::{PromptShapeConfig, Sample, VaptLoss, VaptParams, VptPromptLoss};
use vapt_core::rng::Rng;
use vapt_core::Result;

use crate::config::GradcheckConfig;
use crate::report::{fmt_f64, SuiteReport};

/// Tape gradients of the static-prompt and adaptive-prompt losses against
/// the finite-difference oracle, one row per (seed, loss, activation).
pub fn run(cfg: &GradcheckConfig, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradcheck", seed, vec!["seed", "target", "activation", "params", "max_rel_err"]);
    let shape: PromptShapeConfig = cfg.shape.into();
    let tokens = shape.tokens();
    let d = shape.dim;
    let root = Rng::new(seed);
    let mut worst = 0.0f64;
    for s in 0..cfg.seeds {
        let mut rng = root.substream(s);
        let w = AttentionWeights::<f64>::random(d, cfg.heads, &mut rng)?;
        let batch: Vec<Sample> = (0..cfg.batch)
            .map(|_| Sample {
                x: rng.uniform_tensor(vec![tokens, d], -1.0, 1.0),
                target: rng.uniform_tensor(vec![tokens, d], -1.0, 1.0),
            })
            .collect();

        let vpt = VptPromptLoss { batch: &batch, weights: &w, prompts: shape.prompts };
        let p = ParamVector::flat(rng.uniform_vec(shape.prompts * d, -1.0, 1.0));
        let err = grad_check(&vpt, &p, cfg.step)?;
        worst = worst.max(err);
        report.rows.push(vec![s.to_string(), "vpt".into(), "-".into(), p.len().to_string(), fmt_f64(err)]);

        for &act in &cfg.activations {
            let mut params = VaptParams::<f64>::init(shape, act, &mut rng)?;
            params.layer_norm = cfg.layer_norm;
            // Move LayerNorm off its identity initialization so its
            // gradients are exercised too.
            for b in &mut params.blocks {
                b.ln_gain = rng.uniform_tensor(vec![d], 0.8, 1.2);
                b.ln_bias = rng.uniform_tensor(vec![d], -0.2, 0.2);
            }
            let loss = VaptLoss { batch: &batch, weights: &w, config: shape, activation: act, layer_norm: cfg.layer_norm };
            let pv = params.to_param_vector();
            let err = grad_check(&loss, &pv, cfg.step)?;
            worst = worst.max(err);
            report.rows.push(vec![s.to_string(), "vapt".into(), act.name().into(), pv.len().to_string(), fmt_f64(err)]);
        }
    }
    report.metric("max_rel_err", worst);
    report.check(
        "tape gradient matches finite differences",
        worst < cfg.tolerance,
        format!("max relative error {} < {}", fmt_f64(worst), fmt_f64(cfg.tolerance)),
    );
    Ok(report)
}
