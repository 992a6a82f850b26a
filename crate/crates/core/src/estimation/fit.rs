//! Least-squares fitting of a mixing measure.
//!
//! The objective `Σ_i ‖Y_i − f_G(X_i)‖²` and its gradient are computed in
//! one hand-written pass ([`LeastSquares::value_and_grad`]); the generic
//! [`Objective`] implementation runs the same model through the tape and is
//! used to cross-check it. Minimization is iRprop⁻ (sign-based steps with
//! per-coordinate adaptive sizes) with backtracking, so the objective never
//! increases across accepted steps, and a projection onto the box `Θ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Objective;
use crate::rng::Rng;
use crate::scalar::Scalar;

use super::model::{Dataset, MixingMeasure, RegressionModel};

/// Sum of squared residuals of a dataset under a model, as a function of a
/// flat mixing measure with a fixed number of atoms.
pub struct LeastSquares<'a> {
    pub model: &'a RegressionModel,
    pub data: &'a Dataset,
    pub atoms: usize,
}

impl Objective for LeastSquares<'_> {
    fn eval<S: Scalar>(&self, params: &[S]) -> Result<S> {
        let mut total = S::zero();
        for i in 0..self.data.len() {
            let f = self.model.predict_flat(self.atoms, params, self.data.input(i))?;
            for (fo, &yo) in f.into_iter().zip(self.data.response(i)) {
                let r = fo - S::from_f64(yo);
                total += r * r;
            }
        }
        Ok(total)
    }
}

impl LeastSquares<'_> {
    /// Objective and gradient in one pass.
    pub fn value_and_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let m = self.model;
        let (d, r, dout, l) = (m.dim, m.rank, m.out_dim, self.atoms);
        let npre = m.pretrained.len();
        let k_total = npre + l;
        debug_assert_eq!(params.len(), MixingMeasure::flat_len(l, d, r));
        grad.iter_mut().for_each(|g| *g = 0.0);

        let b = &params[..l];
        let w1 = &params[l..l + l * r * d];
        let w2 = &params[l + l * r * d..];
        let (gb, rest) = grad.split_at_mut(l);
        let (gw1, gw2) = rest.split_at_mut(l * r * d);

        let bt = m.b.data();
        let c = m.c.data();
        let mut scores = vec![0.0; k_total];
        let mut experts = vec![0.0; k_total * dout];
        let mut hidden = vec![0.0; l * r];
        let mut pre_act = vec![0.0; l * r];
        let mut prompts = vec![0.0; l * d];
        let mut btx = vec![0.0; d];
        let mut f = vec![0.0; dout];
        let mut delta = vec![0.0; dout];
        let mut ct_delta = vec![0.0; d];
        let mut dp = vec![0.0; d];
        let mut total = 0.0;

        for i in 0..self.data.len() {
            let x = self.data.input(i);
            let y = self.data.response(i);
            for k in 0..npre {
                let a0 = m.pretrained.a0_mat[k].data();
                let mut q = m.pretrained.a0_bias[k];
                for u in 0..d {
                    for v in 0..d {
                        q += x[u] * a0[u * d + v] * x[v];
                    }
                }
                scores[k] = q;
                let eta = m.pretrained.eta0[k].data();
                for o in 0..dout {
                    experts[k * dout + o] = (0..d).map(|v| eta[o * d + v] * x[v]).sum();
                }
            }
            // Bᵀx, so that (B p)ᵀ x = p·(Bᵀx).
            for v in 0..d {
                btx[v] = (0..d).map(|u| bt[u * d + v] * x[u]).sum();
            }
            for j in 0..l {
                for a in 0..r {
                    let row = &w1[(j * r + a) * d..(j * r + a + 1) * d];
                    let u: f64 = row.iter().zip(x).map(|(w, xv)| w * xv).sum();
                    pre_act[j * r + a] = u;
                    hidden[j * r + a] = m.activation.apply(u);
                }
                let mut s = b[j];
                for v in 0..d {
                    let p: f64 = (0..r).map(|a| w2[v * r + a] * hidden[j * r + a]).sum();
                    prompts[j * d + v] = p;
                    s += p * btx[v];
                }
                scores[npre + j] = s;
                for o in 0..dout {
                    experts[(npre + j) * dout + o] = (0..d).map(|v| c[o * d + v] * prompts[j * d + v]).sum();
                }
            }
            let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - smax).exp();
                z += *s;
            }
            for s in scores.iter_mut() {
                *s /= z;
            }
            let gates = &scores;
            f.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..k_total {
                for o in 0..dout {
                    f[o] += gates[k] * experts[k * dout + o];
                }
            }
            let mut f_delta = 0.0;
            for o in 0..dout {
                let res = f[o] - y[o];
                total += res * res;
                delta[o] = 2.0 * res;
                f_delta += f[o] * delta[o];
            }
            for v in 0..d {
                ct_delta[v] = (0..dout).map(|o| c[o * d + v] * delta[o]).sum();
            }
            for j in 0..l {
                let g = gates[npre + j];
                let e_delta: f64 = (0..dout).map(|o| experts[(npre + j) * dout + o] * delta[o]).sum();
                let ds = g * (e_delta - f_delta);
                gb[j] += ds;
                for v in 0..d {
                    dp[v] = g * ct_delta[v] + ds * btx[v];
                }
                for a in 0..r {
                    let h = hidden[j * r + a];
                    let mut dh = 0.0;
                    for v in 0..d {
                        gw2[v * r + a] += dp[v] * h;
                        dh += w2[v * r + a] * dp[v];
                    }
                    let du = dh * m.activation.derivative(pre_act[j * r + a], h);
                    let row = &mut gw1[(j * r + a) * d..(j * r + a + 1) * d];
                    for (gw, xv) in row.iter_mut().zip(x) {
                        *gw += du * xv;
                    }
                }
            }
        }
        total
    }

    pub fn value(&self, params: &[f64]) -> f64 {
        let mut scratch = vec![0.0; params.len()];
        self.value_and_grad(params, &mut scratch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when the objective fell by less than this fraction over
    /// `patience` iterations.
    pub rel_tolerance: f64,
    pub patience: usize,
    pub initial_step: f64,
    pub max_step: f64,
    pub min_step: f64,
    pub step_growth: f64,
    pub step_shrink: f64,
    /// Every coordinate is projected into `[-box_bound, box_bound]`.
    pub box_bound: f64,
    /// Fresh random starts allowed after a non-finite objective.
    pub max_restarts: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 5000,
            rel_tolerance: 1e-10,
            patience: 50,
            initial_step: 1e-3,
            max_step: 1.0,
            min_step: 1e-14,
            step_growth: 1.2,
            step_shrink: 0.5,
            box_bound: 5.0,
            max_restarts: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.patience > 0
            && self.rel_tolerance >= 0.0
            && 0.0 < self.min_step
            && self.min_step <= self.initial_step
            && self.initial_step <= self.max_step
            && self.step_growth > 1.0
            && 0.0 < self.step_shrink
            && self.step_shrink < 1.0
            && self.box_bound > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent optimizer settings: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Relative decrease fell below tolerance, or every step size hit the floor.
    Converged,
    MaxIterations,
    /// Every start produced a non-finite objective.
    Failed,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::MaxIterations => "max_iterations",
            FitStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub measure: MixingMeasure,
    pub objective: f64,
    pub status: FitStatus,
    /// Iterations of the final start.
    pub iterations: usize,
    pub restarts: usize,
    /// Objective after every accepted step, starting value first.
    pub trace: Vec<f64>,
}

fn project(v: &mut [f64], bound: f64) {
    for x in v {
        *x = x.clamp(-bound, bound);
    }
}

struct Run {
    params: Vec<f64>,
    objective: f64,
    status: FitStatus,
    iterations: usize,
    trace: Vec<f64>,
}

fn run_rprop(obj: &LeastSquares<'_>, start: &[f64], opt: &OptimizerConfig) -> Option<Run> {
    let n = start.len();
    let mut params = start.to_vec();
    project(&mut params, opt.box_bound);
    let mut grad = vec![0.0; n];
    let mut value = obj.value_and_grad(&params, &mut grad);
    if !value.is_finite() {
        return None;
    }
    let mut trace = vec![value];
    let mut steps = vec![opt.initial_step; n];
    let mut prev_sign = vec![0.0f64; n];
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < opt.max_iterations {
        iterations += 1;
        for k in 0..n {
            let s = grad[k].signum() * (grad[k] != 0.0) as i32 as f64;
            if s * prev_sign[k] > 0.0 {
                steps[k] = (steps[k] * opt.step_growth).min(opt.max_step);
            } else if s * prev_sign[k] < 0.0 {
                steps[k] = (steps[k] * opt.step_shrink).max(opt.min_step);
            }
            prev_sign[k] = s;
            trial[k] = params[k] - s * steps[k];
        }
        project(&mut trial, opt.box_bound);
        let v = obj.value_and_grad(&trial, &mut trial_grad);
        if !v.is_finite() {
            return None;
        }
        if v <= value {
            std::mem::swap(&mut params, &mut trial);
            std::mem::swap(&mut grad, &mut trial_grad);
            value = v;
            trace.push(value);
        } else {
            // Reject and retry from the same point with smaller steps.
            for k in 0..n {
                steps[k] = (steps[k] * opt.step_shrink).max(opt.min_step);
                prev_sign[k] = 0.0;
            }
        }
        if steps.iter().all(|&s| s <= opt.min_step) || value == 0.0 {
            status = FitStatus::Converged;
            break;
        }
        if trace.len() > opt.patience {
            let past = trace[trace.len() - 1 - opt.patience];
            if past - value <= opt.rel_tolerance * past.abs() {
                status = FitStatus::Converged;
                break;
            }
        }
    }
    Some(Run { params, objective: value, status, iterations, trace })
}

/// Minimizes the least-squares objective from `init`. A non-finite
/// objective triggers a restart from a random point in the box drawn from
/// `rng`; after `max_restarts` such failures the report has status
/// [`FitStatus::Failed`] and carries the initial measure.
pub fn fit_least_squares(
    data: &Dataset,
    model: &RegressionModel,
    init: &MixingMeasure,
    opt: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    opt.validate()?;
    model.check_measure(init)?;
    if data.dim != model.dim || data.out_dim != model.out_dim {
        return Err(Error::Shape(format!(
            "dataset is {}→{}, model is {}→{}",
            data.dim, data.out_dim, model.dim, model.out_dim
        )));
    }
    let (atoms, d, r) = (init.atoms(), model.dim, model.rank);
    let obj = LeastSquares { model, data, atoms };
    let mut start = init.to_flat();
    for restarts in 0..=opt.max_restarts {
        if let Some(run) = run_rprop(&obj, &start, opt) {
            debug_assert!(run.trace.windows(2).all(|w| w[1] <= w[0]));
            return Ok(FitReport {
                measure: MixingMeasure::from_flat(atoms, d, r, &run.params)?,
                objective: run.objective,
                status: run.status,
                iterations: run.iterations,
                restarts,
                trace: run.trace,
            });
        }
        log::warn!("non-finite objective, restarting fit ({} of {})", restarts + 1, opt.max_restarts);
        start = rng.uniform_vec(start.len(), -opt.box_bound, opt.box_bound);
    }
    Ok(FitReport {
        measure: init.clone(),
        objective: f64::NAN,
        status: FitStatus::Failed,
        iterations: 0,
        restarts: opt.max_restarts,
        trace: vec![],
    })
}

/// Runs [`fit_least_squares`] from each start and keeps the lowest finite
/// objective; ties keep the earlier start.
pub fn fit_multi_start(
    data: &Dataset,
    model: &RegressionModel,
    inits: &[MixingMeasure],
    opt: &OptimizerConfig,
    rng: &mut Rng,
) -> Result<FitReport> {
    let mut best: Option<FitReport> = None;
    for init in inits {
        let rep = fit_least_squares(data, model, init, opt, rng)?;
        let better = match &best {
            None => true,
            Some(b) => rep.objective < b.objective || (!b.objective.is_finite() && rep.objective.is_finite()),
        };
        if better {
            best = Some(rep);
        }
    }
    best.ok_or_else(|| Error::Config("multi-start fit needs at least one initial measure".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::model::{sample_dataset, InputDistribution, PretrainedExpertSpec, RegressionConfig};
    use crate::estimation::voronoi::voronoi_loss_d1;
    use crate::grad::{finite_diff_grad_extended, grad, ParamVector};
    use crate::prompts::Activation;
    use crate::tensor::Tensor;

    fn setup(activation: Activation, seed: u64) -> (RegressionModel, MixingMeasure) {
        let cfg = RegressionConfig { activation, ..RegressionConfig::default() };
        let mut rng = Rng::new(seed);
        let pre = PretrainedExpertSpec::new(
            vec![rng.uniform_tensor(vec![2, 2], -0.5, 0.5)],
            vec![0.2],
            vec![rng.uniform_tensor(vec![2, 2], -1.0, 1.0)],
        )
        .unwrap();
        let truth = MixingMeasure::new(
            vec![0.0, 0.0],
            vec![
                Tensor::from_f64(vec![1, 2], &[1.5, 0.5]).unwrap(),
                Tensor::from_f64(vec![1, 2], &[-0.5, 1.5]).unwrap(),
            ],
            Tensor::from_f64(vec![2, 1], &[1.0, -0.8]).unwrap(),
        )
        .unwrap();
        (RegressionModel::new(&cfg, pre).unwrap(), truth)
    }

    #[test]
    fn hand_gradient_matches_tape_and_differences() {
        for (act, seed) in [(Activation::Tanh, 1), (Activation::Identity, 2), (Activation::Tanh, 3)] {
            let (model, truth) = setup(act, seed);
            let mut rng = Rng::new(seed + 10);
            let data = sample_dataset(&truth, &model, &InputDistribution::default(), 30, 0.1, &mut rng).unwrap();
            let g = truth.split_atom(0, 2).unwrap().perturbed(0.3, &mut rng);
            let obj = LeastSquares { model: &model, data: &data, atoms: 3 };
            let p = g.to_flat();
            let mut fast = vec![0.0; p.len()];
            let v = obj.value_and_grad(&p, &mut fast);
            let pv = ParamVector::flat(p.clone());
            let tape = grad(&obj, &pv).unwrap();
            let fd = finite_diff_grad_extended(&obj, &pv, 1e-5).unwrap();
            assert!((v - obj.eval::<f64>(&p).unwrap()).abs() < 1e-12 * v);
            for k in 0..p.len() {
                let scale = tape.values()[k].abs().max(1e-8);
                assert!((fast[k] - tape.values()[k]).abs() < 1e-11 * scale.max(1.0), "{act:?} {k}");
                assert!((fast[k] - fd.values()[k]).abs() < 1e-6 * scale, "{act:?} {k}");
            }
        }
    }

    #[test]
    fn truth_is_a_fixed_point_without_noise() {
        let (model, truth) = setup(Activation::Tanh, 4);
        let mut rng = Rng::new(4);
        let data = sample_dataset(&truth, &model, &InputDistribution::default(), 200, 0.0, &mut rng).unwrap();
        let rep = fit_least_squares(&data, &model, &truth, &OptimizerConfig::default(), &mut rng).unwrap();
        // Zero up to the rounding difference between the two evaluation paths.
        assert!(rep.trace[0] < 1e-28);
        let drift = rep.measure.to_flat().iter().zip(truth.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-12, "{drift}");
        assert_eq!(rep.status, FitStatus::Converged);
    }

    #[test]
    fn noiseless_recovery_from_small_perturbation() {
        let (model, truth) = setup(Activation::Tanh, 5);
        let mut rng = Rng::new(5);
        let data = sample_dataset(&truth, &model, &InputDistribution::default(), 500, 0.0, &mut rng).unwrap();
        let init = truth.perturbed(1e-3, &mut rng);
        let rep = fit_least_squares(&data, &model, &init, &OptimizerConfig::default(), &mut rng).unwrap();
        assert!(rep.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(rep.objective < 1e-12 * rep.trace[0].max(1.0), "{}", rep.objective);
        let d1 = voronoi_loss_d1(&rep.measure, &truth).unwrap();
        assert!(d1 < 1e-4, "{d1}");
    }

    #[test]
    fn iterates_stay_in_the_box() {
        let (model, truth) = setup(Activation::Tanh, 6);
        let mut rng = Rng::new(6);
        let data = sample_dataset(&truth, &model, &InputDistribution::default(), 100, 0.5, &mut rng).unwrap();
        let opt = OptimizerConfig { box_bound: 1.2, max_iterations: 300, ..Default::default() };
        let rep = fit_least_squares(&data, &model, &truth.perturbed(2.0, &mut rng), &opt, &mut rng).unwrap();
        assert!(rep.measure.to_flat().iter().all(|v| v.abs() <= 1.2));
    }

    #[test]
    fn multi_start_keeps_the_best() {
        let (model, truth) = setup(Activation::Tanh, 7);
        let mut rng = Rng::new(7);
        let data = sample_dataset(&truth, &model, &InputDistribution::default(), 100, 0.1, &mut rng).unwrap();
        let opt = OptimizerConfig { max_iterations: 50, ..Default::default() };
        let inits = [truth.perturbed(1.0, &mut rng), truth.clone()];
        let best = fit_multi_start(&data, &model, &inits, &opt, &mut rng).unwrap();
        let each: Vec<f64> = inits
            .iter()
            .map(|i| fit_least_squares(&data, &model, i, &opt, &mut rng).unwrap().objective)
            .collect();
        assert_eq!(best.objective, each.iter().copied().fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn bad_optimizer_config_is_rejected() {
        let opt = OptimizerConfig { step_shrink: 1.5, ..Default::default() };
        assert!(opt.validate().is_err());
    }
}
