use vapt_core::prompts::{vapt_param_count, vapt_param_count_with_layer_norm, vpt_param_count, Activation, PromptShapeConfig, VaptParams};
use vapt_core::rng::Rng;
use vapt_core::Result;

use crate::config::ParamsConfig;
use crate::report::SuiteReport;

fn row(label: &str, c: &PromptShapeConfig, vapt: u64, enumerated: u64, with_ln: u64, vpt: u64) -> Vec<String> {
    let mut r = vec![label.to_string()];
    r.extend([c.blocks, c.prompts, c.height, c.width, c.kernel, c.rank, c.dim].map(|v| v.to_string()));
    r.extend([vapt, enumerated, with_ln, vpt].map(|v| v.to_string()));
    r
}

/// Closed-form parameter counts against the scalars an initialized
/// parameter set actually stores.
pub fn run(cfg: &ParamsConfig, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(
        "params",
        seed,
        vec!["config", "blocks", "prompts", "height", "width", "kernel", "rank", "dim", "vapt", "enumerated", "with_layer_norm", "vpt"],
    );
    let mut rng = Rng::new(seed);
    let mut mismatches = Vec::new();
    let mut grid = Vec::new();
    for &blocks in &cfg.grid_blocks {
        for &prompts in &cfg.grid_prompts {
            for &[height, width, kernel] in &cfg.grid_maps {
                for &rank in &cfg.grid_rank {
                    for &dim in &cfg.grid_dim {
                        grid.push(PromptShapeConfig { blocks, prompts, height, width, kernel, rank, dim });
                    }
                }
            }
        }
    }
    for (i, c) in grid.iter().enumerate() {
        let p = VaptParams::<f64>::init(*c, Activation::Tanh, &mut rng)?;
        let (vapt, enumerated) = (vapt_param_count(c), p.enumerate_scalars(false));
        let with_ln = vapt_param_count_with_layer_norm(c);
        if vapt != enumerated || with_ln != p.enumerate_scalars(true) {
            mismatches.push(format!("grid{i}"));
        }
        report.rows.push(row(&format!("grid{i}"), c, vapt, enumerated, with_ln, vpt_param_count(c)));
    }
    report.check(
        "closed form matches enumeration on the grid",
        mismatches.is_empty(),
        if mismatches.is_empty() { format!("{} configs", grid.len()) } else { format!("mismatch at {}", mismatches.join(" ")) },
    );

    let main: PromptShapeConfig = cfg.shape.into();
    let p = VaptParams::<f64>::init(main, Activation::Tanh, &mut rng)?;
    let (vapt, vpt) = (vapt_param_count(&main), vpt_param_count(&main));
    let enumerated = p.enumerate_scalars(false);
    report.rows.push(row("main", &main, vapt, enumerated, vapt_param_count_with_layer_norm(&main), vpt));
    report.metric("vapt", vapt);
    report.metric("vpt", vpt);
    report.check("main shape matches enumeration", vapt == enumerated, format!("{vapt} vs {enumerated}"));
    if let Some(e) = cfg.expected_vapt {
        report.check("vapt count", vapt == e, format!("{vapt} (expected {e})"));
    }
    if let Some(e) = cfg.expected_vpt {
        report.check("vpt count", vpt == e, format!("{vpt} (expected {e})"));
    }
    report.check("vapt uses fewer parameters than vpt", vapt < vpt, format!("{vapt} < {vpt}"));
    Ok(report)
}
