use vapt_core::estimation::{voronoi_assign, voronoi_assign_products, voronoi_loss_d1, voronoi_loss_d2, MixingMeasure};
use vapt_core::rng::Rng;
use vapt_core::{Result, Tensor64};

use crate::config::VoronoiConfig;
use crate::report::{fmt_f64, SuiteReport};

fn random_measure(atoms: usize, d: usize, r: usize, rng: &mut Rng) -> Result<MixingMeasure> {
    MixingMeasure::new(
        rng.uniform_vec(atoms, -1.0, 1.0),
        (0..atoms).map(|_| rng.uniform_tensor(vec![r, d], -2.0, 2.0)).collect(),
        rng.uniform_tensor(vec![d, r], -2.0, 2.0),
    )
}

/// Fitted atoms scattered around randomly chosen true atoms, so cells of
/// every size occur.
fn fitted_near(truth: &MixingMeasure, atoms: usize, rng: &mut Rng) -> Result<MixingMeasure> {
    let (d, r) = (truth.dim(), truth.rank());
    let w1 = (0..atoms)
        .map(|_| {
            let j = rng.index(truth.atoms());
            let noise = rng.normal_vec(r * d, 0.3);
            let data: Vec<f64> = truth.w1(j).data().iter().zip(noise).map(|(a, e)| a + e).collect();
            Tensor64::from_f64(vec![r, d], &data)
        })
        .collect::<Result<Vec<_>>>()?;
    let w2: Vec<f64> = truth.w2().data().iter().map(|a| a + 0.3 * rng.normal()).collect();
    MixingMeasure::new(rng.uniform_vec(atoms, -1.0, 1.0), w1, Tensor64::from_f64(vec![d, r], &w2)?)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// `W2·W1_j` written out entry by entry.
fn product(g: &MixingMeasure, j: usize) -> Vec<f64> {
    let (d, r) = (g.dim(), g.rank());
    let (w1, w2) = (g.w1(j).data(), g.w2().data());
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            for k in 0..r {
                out[a * d + b] += w2[a * r + k] * w1[k * d + b];
            }
        }
    }
    out
}

/// Exhaustive scan: sort candidates by (distance, index) and keep the first.
fn brute_assign(fitted: usize, true_atoms: usize, dist: impl Fn(usize, usize) -> f64) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); true_atoms];
    for i in 0..fitted {
        let mut cand: Vec<(f64, usize)> = (0..true_atoms).map(|j| (dist(i, j), j)).collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cells[cand[0].1].push(i);
    }
    cells
}

fn straight_line_loss(g: &MixingMeasure, t: &MixingMeasure, cells: &[Vec<usize>], term: impl Fn(usize, usize, bool) -> f64) -> f64 {
    let mut total = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        let mut mass = 0.0;
        for &i in cell {
            mass += g.log_weights()[i].exp();
        }
        total += (mass - t.log_weights()[j].exp()).abs();
    }
    for (j, cell) in cells.iter().enumerate() {
        for &i in cell {
            total += g.log_weights()[i].exp() * term(i, j, cell.len() == 1);
        }
    }
    total
}

pub fn oracle_d1(g: &MixingMeasure, t: &MixingMeasure) -> (f64, Vec<Vec<usize>>) {
    let dw2 = dist(g.w2().data(), t.w2().data());
    let cells = brute_assign(g.atoms(), t.atoms(), |i, j| {
        let a = dist(g.w1(i).data(), t.w1(j).data());
        a * a + dw2 * dw2
    });
    let loss = straight_line_loss(g, t, &cells, |i, j, single| {
        let dw1 = dist(g.w1(i).data(), t.w1(j).data());
        if single {
            dw1 + dw2
        } else {
            dw1 * dw1 + dw2 * dw2
        }
    });
    (loss, cells)
}

pub fn oracle_d2(g: &MixingMeasure, t: &MixingMeasure) -> (f64, Vec<Vec<usize>>) {
    let cells = brute_assign(g.atoms(), t.atoms(), |i, j| dist(&product(g, i), &product(t, j)));
    let loss = straight_line_loss(g, t, &cells, |i, j, single| {
        let e = dist(&product(g, i), &product(t, j));
        if single {
            e
        } else {
            e * e
        }
    });
    (loss, cells)
}

/// Voronoi cells and losses against an independent recomputation.
pub fn run(cfg: &VoronoiConfig, seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport::new(
        "voronoi",
        seed,
        vec!["pair", "fitted", "true", "d1", "d1_oracle", "d2", "d2_oracle", "cells_match"],
    );
    let root = Rng::new(seed);
    let (mut worst, mut mismatched, mut self_loss, mut doubled, mut negative) = (0.0f64, 0, 0.0f64, 0.0f64, 0);
    for pair in 0..cfg.pairs {
        let mut rng = root.substream(pair as u64);
        let true_atoms = 1 + rng.index(cfg.max_true);
        let fitted = true_atoms + rng.index(cfg.max_fitted - true_atoms + 1);
        let t = random_measure(true_atoms, cfg.dim, cfg.rank, &mut rng)?;
        let g = if pair % 2 == 0 { fitted_near(&t, fitted, &mut rng)? } else { random_measure(fitted, cfg.dim, cfg.rank, &mut rng)? };

        let (d1, d2) = (voronoi_loss_d1(&g, &t)?, voronoi_loss_d2(&g, &t)?);
        let (o1, c1) = oracle_d1(&g, &t);
        let (o2, c2) = oracle_d2(&g, &t);
        let same = voronoi_assign(&g, &t)?.cells == c1 && voronoi_assign_products(&g, &t)?.cells == c2;
        worst = worst.max((d1 - o1).abs()).max((d2 - o2).abs());
        mismatched += usize::from(!same);
        negative += usize::from(d1 < 0.0 || d2 < 0.0);
        self_loss = self_loss.max(voronoi_loss_d1(&t, &t)?).max(voronoi_loss_d2(&t, &t)?);
        let split = t.split_atom(rng.index(true_atoms), 2)?;
        doubled = doubled.max(voronoi_loss_d1(&split, &t)?).max(voronoi_loss_d2(&split, &t)?);

        report.rows.push(vec![
            pair.to_string(),
            fitted.to_string(),
            true_atoms.to_string(),
            fmt_f64(d1),
            fmt_f64(o1),
            fmt_f64(d2),
            fmt_f64(o2),
            same.to_string(),
        ]);
    }
    report.metric("max_abs_diff", worst);
    report.metric("self_loss", self_loss);
    report.metric("doubled_atom_loss", doubled);
    report.check("losses match recomputation", worst < cfg.tolerance, format!("max diff {} < {}", fmt_f64(worst), fmt_f64(cfg.tolerance)));
    report.check("cells match exhaustive scan", mismatched == 0, format!("{mismatched} mismatched pairs"));
    report.check("loss of the truth against itself is zero", self_loss == 0.0, fmt_f64(self_loss));
    report.check("doubled atom is lossless", doubled < cfg.tolerance, fmt_f64(doubled));
    report.check("losses are non-negative", negative == 0, format!("{negative} negative"));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_hand_case() {
        let t = MixingMeasure::new(
            vec![0.0],
            vec![Tensor64::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap()],
            Tensor64::from_f64(vec![2, 1], &[1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let g = MixingMeasure::new(
            vec![0.0],
            vec![Tensor64::from_f64(vec![1, 2], &[1.0, 3.0]).unwrap()],
            Tensor64::from_f64(vec![2, 1], &[1.0, 4.0]).unwrap(),
        )
        .unwrap();
        // Singleton cell, equal mass: ‖ΔW1‖ + ‖ΔW2‖ = 3 + 4.
        assert_eq!(oracle_d1(&g, &t).0, 7.0);
    }
}
