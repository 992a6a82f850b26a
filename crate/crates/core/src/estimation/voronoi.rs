//! Voronoi cells of a fitted measure around the true atoms, and the two
//! Voronoi losses built on them.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::model::MixingMeasure;

/// `cells[j]` holds the fitted atoms closest to true atom `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoronoiAssignment {
    pub cells: Vec<Vec<usize>>,
}

impl VoronoiAssignment {
    pub fn cell(&self, j: usize) -> &[usize] {
        &self.cells[j]
    }

    /// True atom that fitted atom `i` was assigned to.
    pub fn owner(&self, i: usize) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(&i))
    }
}

fn sq_dist(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_shapes(g: &MixingMeasure, truth: &MixingMeasure) -> Result<()> {
    if g.dim() != truth.dim() || g.rank() != truth.rank() {
        return shape_err(format!(
            "measures disagree on shape: d={} r={} vs d={} r={}",
            g.dim(),
            g.rank(),
            truth.dim(),
            truth.rank()
        ));
    }
    Ok(())
}

/// Nearest-atom assignment under a squared distance; ties go to the
/// smallest true index.
fn assign_by(atoms: usize, true_atoms: usize, dist: impl Fn(usize, usize) -> f64) -> VoronoiAssignment {
    let mut cells = vec![Vec::new(); true_atoms];
    for i in 0..atoms {
        let mut best = 0;
        let mut best_d = dist(i, 0);
        for j in 1..true_atoms {
            let dj = dist(i, j);
            if dj < best_d {
                best = j;
                best_d = dj;
            }
        }
        cells[best].push(i);
    }
    VoronoiAssignment { cells }
}

/// Cells under the Frobenius distance between `(W1_i, W2)` and
/// `(W1*_j, W2*)`.
pub fn voronoi_assign(g: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_shapes(g, truth)?;
    let w2 = sq_dist(g.w2(), truth.w2());
    Ok(assign_by(g.atoms(), truth.atoms(), |i, j| sq_dist(g.w1(i), truth.w1(j)) + w2))
}

/// Cells under the Frobenius distance between the products `W2·W1_i` and
/// `W2*·W1*_j`, the atoms of the linear-setting measure.
pub fn voronoi_assign_products(g: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_shapes(g, truth)?;
    let p: Vec<_> = (0..g.atoms()).map(|i| g.product(i)).collect();
    let q: Vec<_> = (0..truth.atoms()).map(|j| truth.product(j)).collect();
    Ok(assign_by(g.atoms(), truth.atoms(), |i, j| sq_dist(&p[i], &q[j])))
}

/// Sum over cells of the weight-mass mismatch, plus per-atom parameter
/// discrepancies: first power for singleton cells, squared for larger ones.
fn cell_loss(
    g: &MixingMeasure,
    truth: &MixingMeasure,
    cells: &VoronoiAssignment,
    discrepancy: impl Fn(usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (j, cell) in cells.cells.iter().enumerate() {
        let mass: f64 = cell.iter().map(|&i| g.weight(i)).sum();
        total += (mass - truth.weight(j)).abs();
        for &i in cell {
            let dist = discrepancy(i, j);
            total += g.weight(i) * if cell.len() == 1 { dist } else { dist * dist };
        }
    }
    total
}

/// Voronoi loss for the nonlinear setting, with `‖ΔW1‖ + ‖ΔW2‖` per atom.
/// In cells with more than one atom the two norms are squared separately.
pub fn voronoi_loss_d1(g: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    let cells = voronoi_assign(g, truth)?;
    let dw2 = sq_dist(g.w2(), truth.w2());
    let mut total = 0.0;
    for (j, cell) in cells.cells.iter().enumerate() {
        let mass: f64 = cell.iter().map(|&i| g.weight(i)).sum();
        total += (mass - truth.weight(j)).abs();
        for &i in cell {
            let dw1 = sq_dist(g.w1(i), truth.w1(j));
            let term = if cell.len() == 1 { dw1.sqrt() + dw2.sqrt() } else { dw1 + dw2 };
            total += g.weight(i) * term;
        }
    }
    Ok(total)
}

/// Voronoi loss for the linear setting, over `‖W2·W1_i − W2*·W1*_j‖`.
pub fn voronoi_loss_d2(g: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    let cells = voronoi_assign_products(g, truth)?;
    let p: Vec<_> = (0..g.atoms()).map(|i| g.product(i)).collect();
    let q: Vec<_> = (0..truth.atoms()).map(|j| truth.product(j)).collect();
    Ok(cell_loss(g, truth, &cells, |i, j| sq_dist(&p[i], &q[j]).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn measure(b: &[f64], w1: &[[f64; 2]], w2: [f64; 2]) -> MixingMeasure {
        MixingMeasure::new(
            b.to_vec(),
            w1.iter().map(|w| Tensor::from_f64(vec![1, 2], w).unwrap()).collect(),
            Tensor::from_f64(vec![2, 1], &w2).unwrap(),
        )
        .unwrap()
    }

    fn truth() -> MixingMeasure {
        measure(&[0.0, 0.3], &[[1.5, 0.5], [-0.5, 1.5]], [1.0, -0.8])
    }

    #[test]
    fn identical_measures_have_zero_loss() {
        let t = truth();
        assert_eq!(voronoi_assign(&t, &t).unwrap().cells, vec![vec![0], vec![1]]);
        assert_eq!(voronoi_loss_d1(&t, &t).unwrap(), 0.0);
        assert_eq!(voronoi_loss_d2(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn tie_goes_to_first_true_atom() {
        let t = truth();
        let g = measure(&[0.0], &[[0.5, 1.0]], [1.0, -0.8]);
        assert_eq!(voronoi_assign(&g, &t).unwrap().cells, vec![vec![0], vec![]]);
    }

    #[test]
    fn weight_only_shift_costs_the_mass_term() {
        let b_star = 0.4;
        let t = measure(&[b_star], &[[1.0, 2.0]], [0.5, 0.5]);
        let g = measure(&[b_star + 2f64.ln()], &[[1.0, 2.0]], [0.5, 0.5]);
        let d1 = voronoi_loss_d1(&g, &t).unwrap();
        assert!((d1 - b_star.exp()).abs() < 1e-14);
    }

    #[test]
    fn doubled_atom_is_lossless() {
        let t = truth();
        let g = t.split_atom(1, 2).unwrap();
        assert_eq!(voronoi_assign(&g, &t).unwrap().cells, vec![vec![0], vec![1, 2]]);
        assert!(voronoi_loss_d1(&g, &t).unwrap() < 1e-15);
        assert!(voronoi_loss_d2(&g, &t).unwrap() < 1e-15);
    }

    #[test]
    fn d2_ignores_rescaling_inside_the_product() {
        let t = truth();
        let c = 1.7;
        let w1: Vec<[f64; 2]> = (0..2).map(|j| [t.w1(j).data()[0] * c, t.w1(j).data()[1] * c]).collect();
        let g = measure(&[0.0, 0.3], &w1, [1.0 / c, -0.8 / c]);
        assert!(voronoi_loss_d2(&g, &t).unwrap() < 1e-14);
        assert!(voronoi_loss_d1(&g, &t).unwrap() > 0.1);
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = Rng::new(2);
        for _ in 0..200 {
            let g = truth().split_atom(0, 2).unwrap().perturbed(0.5, &mut rng);
            assert!(voronoi_loss_d1(&g, &truth()).unwrap() >= 0.0);
            assert!(voronoi_loss_d2(&g, &truth()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn empty_cell_pays_full_true_mass() {
        let t = truth();
        let g = measure(&[0.0], &[[1.5, 0.5]], [1.0, -0.8]);
        let d1 = voronoi_loss_d1(&g, &t).unwrap();
        assert!((d1 - 0.3f64.exp()).abs() < 1e-15);
    }
}
