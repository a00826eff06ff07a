//! Harmonic capacity Cap(K; Omega) by obstacle solves, and the Maz'ya
//! two-sided nonnegativity criterion for V with V+ = 0.

use thiserror::Error;

use crate::form::{DiscreteForm, FormError};
use crate::mesh::{Grid, GridFunction, Mask, MeshError};
use crate::potential::PotentialField;
use crate::solver::{obstacle_solve, Obstacle, SolveError};

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("K is empty")]
    EmptyK,
    #[error("K has zero capacity")]
    ZeroCapacity,
    #[error("mazya_ratio requires V+ = 0 (node {0} has V+ > 0)")]
    PositivePartPresent(usize),
    #[error("empty K family")]
    EmptyFamily,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone)]
pub struct CapacityResult {
    /// Dirichlet energy of the capacitary minimizer.
    pub value: f64,
    /// The minimizer, for inspection; 0 <= xi <= 1 nodewise.
    pub minimizer: GridFunction,
    pub sweeps: usize,
}

pub const CAP_MAX_SWEEPS: usize = 200_000;

/// Cap(K; grid box) with Dirichlet boundary on the box.
pub fn cap(grid: &Grid, k: &Mask) -> Result<CapacityResult, CapacityError> {
    cap_in(grid, &grid.full_mask(), k)
}

/// Cap(K; Omega) where Omega is a masked sub-domain (nodes outside act as
/// Dirichlet zeros).
pub fn cap_in(grid: &Grid, domain: &Mask, k: &Mask) -> Result<CapacityResult, CapacityError> {
    if k.count() == 0 {
        return Err(CapacityError::EmptyK);
    }
    let form = DiscreteForm::laplacian(grid, domain)?;
    let obs = Obstacle::level_on_mask(grid, k, 1.0);
    let sol = obstacle_solve(&form, &obs, CAP_MAX_SWEEPS, false)?;
    let value = form.dirichlet_energy(&sol.xi)?;
    Ok(CapacityResult { value, minimizer: sol.xi, sweeps: sol.sweeps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MazyaFlag {
    /// Some ratio exceeded 1 + tol: the form cannot be nonnegative.
    CertifiedNotNonnegative,
    /// Ratios sit inside the inconclusive Maz'ya window [1/4, 1].
    ConsistentWithNonnegativity,
    /// Every ratio fell below 1/4 - tol. The theorem's sup runs over all
    /// compacts; a small finite family proves nothing.
    FamilyTooSmall,
}

#[derive(Debug, Clone)]
pub struct MazyaReport {
    /// Per-member (ratio, capacity) in family order.
    pub entries: Vec<(f64, f64)>,
    pub max_ratio: f64,
    pub flag: MazyaFlag,
    pub tol: f64,
}

pub const MAZYA_TOL: f64 = 0.05;

/// max over the family of `r(K) = (sum_K V- cellvol) / Cap(K)`, with the
/// window flags of the Maz'ya criterion. Requires V+ = 0.
pub fn mazya_ratio(
    field: &PotentialField,
    grid: &Grid,
    family: &[Mask],
) -> Result<MazyaReport, CapacityError> {
    if let Some(i) = field.vplus().iter().position(|v| *v > 0.0) {
        return Err(CapacityError::PositivePartPresent(i));
    }
    if family.is_empty() {
        return Err(CapacityError::EmptyFamily);
    }
    let cv = grid.cell_volume();
    let mut entries = Vec::with_capacity(family.len());
    let mut max_ratio = 0.0f64;
    for k in family {
        let c = cap(grid, k)?;
        if c.value <= 0.0 {
            return Err(CapacityError::ZeroCapacity);
        }
        let vminus_mass: f64 = k.iter_set().map(|i| field.vminus()[i]).sum::<f64>() * cv;
        let r = vminus_mass / c.value;
        max_ratio = max_ratio.max(r);
        entries.push((r, c.value));
    }
    let flag = if max_ratio > 1.0 + MAZYA_TOL {
        MazyaFlag::CertifiedNotNonnegative
    } else if max_ratio >= 0.25 - MAZYA_TOL {
        MazyaFlag::ConsistentWithNonnegativity
    } else {
        MazyaFlag::FamilyTooSmall
    };
    Ok(MazyaReport { entries, max_ratio, flag, tol: MAZYA_TOL })
}

/// Default K family: all dyadic sub-boxes of the extents, splitting each
/// axis in 2^level parts, down to boxes whose snapped mask still holds at
/// least 4 nodes.
pub fn dyadic_family(grid: &Grid) -> Vec<Mask> {
    let mut family = Vec::new();
    let dim = grid.dim();
    for level in 0..16u32 {
        let parts = 1usize << level;
        let total = parts.pow(dim as u32);
        let mut produced = 0usize;
        for cell in 0..total {
            let mut rem = cell;
            let mut boxdef = Vec::with_capacity(dim);
            for d in 0..dim {
                let idx = rem % parts;
                rem /= parts;
                let (a, b) = grid.extents()[d];
                let w = (b - a) / parts as f64;
                boxdef.push((a + idx as f64 * w, a + (idx + 1) as f64 * w));
            }
            if let Ok(mask) = grid.compact_mask(&boxdef) {
                if mask.count() >= 4 {
                    family.push(mask);
                    produced += 1;
                }
            }
        }
        if produced == 0 {
            break;
        }
    }
    family
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Grid;
    use crate::potential::PotentialField;
    use crate::spectral::{principal_eig, EigOpts};

    #[test]
    fn cap_1d_middle_third_exact() {
        // nodes at i/300: 1/3 and 2/3 are nodes, so Cap = 3 + 3 = 6 exactly
        let g = Grid::new(1, &[(0.0, 1.0)], &[299]).unwrap();
        let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0)]).unwrap();
        let c = cap(&g, &k).unwrap();
        assert!((c.value - 6.0).abs() < 1e-6, "cap {}", c.value);
        assert!(c.minimizer.values().iter().all(|v| *v >= -1e-12 && *v <= 1.0 + 1e-12));
    }

    #[test]
    fn cap_point_in_2d_decreases_under_refinement() {
        // points have zero capacity in 2D: Cap(h/2) < Cap(h)
        let mut prev = f64::INFINITY;
        for &n in &[15usize, 31, 63] {
            let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[n, n]).unwrap();
            let k = g.compact_mask(&[(0.49, 0.51), (0.49, 0.51)]).unwrap();
            assert_eq!(k.count(), 1);
            let c = cap(&g, &k).unwrap();
            assert!(c.value < prev, "cap did not decrease: {} vs {prev}", c.value);
            prev = c.value;
        }
    }

    #[test]
    fn cap_monotone_and_subadditive() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[63]).unwrap();
        let k1 = g.compact_mask(&[(0.3, 0.45)]).unwrap();
        let k2 = g.compact_mask(&[(0.55, 0.7)]).unwrap();
        let ku = k1.union(&k2);
        let c1 = cap(&g, &k1).unwrap().value;
        let c2 = cap(&g, &k2).unwrap().value;
        let cu = cap(&g, &ku).unwrap().value;
        let c_sub = cap(&g, &g.compact_mask(&[(0.3, 0.4)]).unwrap()).unwrap().value;
        assert!(c_sub <= c1 + 1e-8, "monotonicity");
        assert!(cu <= c1 + c2 + 1e-7, "subadditivity: {cu} vs {c1}+{c2}");
        assert!(cu >= c1.max(c2) - 1e-8, "monotonicity under union");
    }

    #[test]
    fn mazya_middle_third_hand_value() {
        // V- = c chi_[1/3,2/3]: r = (c/3)/6 = c/18
        let g = Grid::new(1, &[(0.0, 1.0)], &[299]).unwrap();
        let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0)]).unwrap();
        let c = 9.0;
        let vals: Vec<f64> = (0..g.node_count()).map(|i| if k.contains(i) { -c } else { 0.0 }).collect();
        let field = PotentialField::from_node_values(vals);
        let rep = mazya_ratio(&field, &g, std::slice::from_ref(&k)).unwrap();
        let want = c / 18.0;
        // node snapping shifts the mass by one cell at each end
        assert!((rep.max_ratio - want).abs() < 0.02 * want, "{} vs {want}", rep.max_ratio);
        assert_eq!(rep.flag, MazyaFlag::ConsistentWithNonnegativity);
    }

    #[test]
    fn mazya_zero_potential_family_too_small() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[63]).unwrap();
        let field = PotentialField::zero(&g);
        let fam = dyadic_family(&g);
        assert!(!fam.is_empty());
        let rep = mazya_ratio(&field, &g, &fam).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert_eq!(rep.flag, MazyaFlag::FamilyTooSmall);
    }

    #[test]
    fn mazya_huge_vminus_certified_with_eigen_crosscheck() {
        // c = 200 on the middle third: r ~ 200/18 > 1, and lambda_1 < 0
        let g = Grid::new(1, &[(0.0, 1.0)], &[299]).unwrap();
        let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0)]).unwrap();
        let vals: Vec<f64> = (0..g.node_count()).map(|i| if k.contains(i) { -200.0 } else { 0.0 }).collect();
        let field = PotentialField::from_node_values(vals);
        let rep = mazya_ratio(&field, &g, std::slice::from_ref(&k)).unwrap();
        assert!(rep.max_ratio > 1.0 + MAZYA_TOL, "ratio {}", rep.max_ratio);
        assert_eq!(rep.flag, MazyaFlag::CertifiedNotNonnegative);
        let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
        let eig = principal_eig(&form, &EigOpts::default()).unwrap();
        assert!(eig.value < 0.0, "cross-oracle eigenvalue {}", eig.value);
    }

    #[test]
    fn mazya_rejects_positive_part() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[15]).unwrap();
        let field = PotentialField::constant(&g, 1.0);
        let fam = dyadic_family(&g);
        assert!(matches!(
            mazya_ratio(&field, &g, &fam),
            Err(CapacityError::PositivePartPresent(_))
        ));
    }

    #[test]
    fn dyadic_family_nonempty_and_min_size() {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[31, 31]).unwrap();
        let fam = dyadic_family(&g);
        assert!(fam.len() > 5);
        assert!(fam.iter().all(|m| m.count() >= 4));
        // level-0 member covers the full interior
        assert!(fam.iter().any(|m| m.count() == g.node_count()));
    }
}
