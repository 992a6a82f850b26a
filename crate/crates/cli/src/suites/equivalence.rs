use vapt_core::attention::{head_outputs, moe_decompose, moe_eval, AttentionWeights};
use vapt_core::rng::Rng;
use vapt_core::Result;

use crate::config::EquivalenceConfig;
use crate::report::{fmt_f64, SuiteReport};

/// Random prompted-attention instances; every head row is rebuilt from its
/// mixture-of-experts form and compared with the direct computation.
pub fn run(cfg: &EquivalenceConfig, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("equivalence", seed, vec!["instance", "tokens", "dim", "heads", "prompts", "max_abs_diff"]);
    let root = Rng::new(seed);
    let mut worst = 0.0f64;
    for inst in 0..cfg.instances {
        let mut rng = root.substream(inst as u64);
        let heads = cfg.heads[rng.index(cfg.heads.len())];
        let dim = heads * (1 + rng.index(cfg.max_dim / heads));
        let tokens = 1 + rng.index(cfg.max_tokens);
        let prompts = rng.index(cfg.max_prompts + 1);
        let w = AttentionWeights::<f64>::random(dim, heads, &mut rng)?;
        let x = rng.uniform_tensor::<f64>(vec![tokens, dim], -2.0, 2.0);
        let p = rng.uniform_tensor::<f64>(vec![prompts, dim], -2.0, 2.0);
        let direct = head_outputs(&x, &p, &w)?;
        let mut diff = 0.0f64;
        for (m, h) in direct.iter().enumerate() {
            for i in 0..tokens {
                let moe = moe_eval(&moe_decompose(&x, &p, &w, m, i)?)?;
                for (a, b) in moe.data().iter().zip(h.row(i)) {
                    diff = diff.max((a - b).abs());
                }
            }
        }
        worst = worst.max(diff);
        report.rows.push(vec![
            inst.to_string(),
            tokens.to_string(),
            dim.to_string(),
            heads.to_string(),
            prompts.to_string(),
            fmt_f64(diff),
        ]);
    }
    report.metric("instances", cfg.instances);
    report.metric("max_abs_diff", worst);
    report.check(
        "moe rows equal attention rows",
        worst < cfg.tolerance,
        format!("max_abs_diff {} < {}", fmt_f64(worst), fmt_f64(cfg.tolerance)),
    );
    Ok(report)
}
