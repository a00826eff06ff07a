//! Discrete quadratic form Q_V and weighted mass matrices.
//!
//! The stiffness part is the face-based finite-difference energy: for every
//! lattice face (including faces to the Dirichlet boundary and to nodes
//! outside the domain mask, which hold value 0) it contributes
//! `(difference quotient)^2 * cellvol`. The potential enters as a lumped
//! diagonal `(V+ - V-) * cellvol` at the nodes. All operator quantities are
//! therefore "cell-volume scaled": the matrix A satisfies
//! `qv(xi) = xi' A xi` and pairs with the lumped mass `M = cellvol * I`.

use thiserror::Error;

use crate::mesh::{Grid, GridFunction, Mask, MeshError};
use crate::potential::PotentialField;

#[derive(Debug, Error)]
pub enum FormError {
    #[error("grid mismatch between form and argument")]
    GridMismatch,
    #[error("mask is empty")]
    EmptyMask,
    #[error("negative weight entry at node {0}")]
    NegativeWeight(usize),
    #[error("test function touches a singular cell (node {0})")]
    SingularSupport(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Sparse symmetric operator representing Q_V, matrix-free.
#[derive(Debug, Clone)]
pub struct DiscreteForm {
    grid: Grid,
    /// (V+ - V-) * cellvol per node.
    pot_diag: Vec<f64>,
    mask: Mask,
    inv_h2: [f64; crate::mesh::MAX_DIM],
    cell_volume: f64,
}

impl DiscreteForm {
    /// Assemble Q_V on a domain mask. Nodes outside the mask act as
    /// Dirichlet zeros.
    pub fn assemble(grid: &Grid, field: &PotentialField, mask: &Mask) -> Result<DiscreteForm, FormError> {
        if field.len() != grid.node_count() || mask.len() != grid.node_count() {
            return Err(FormError::GridMismatch);
        }
        if mask.count() == 0 {
            return Err(FormError::EmptyMask);
        }
        let cv = grid.cell_volume();
        let pot_diag: Vec<f64> = (0..grid.node_count())
            .map(|i| (field.vplus()[i] - field.vminus()[i]) * cv)
            .collect();
        let mut inv_h2 = [0.0; crate::mesh::MAX_DIM];
        for d in 0..grid.dim() {
            inv_h2[d] = 1.0 / (grid.h()[d] * grid.h()[d]);
        }
        Ok(DiscreteForm { grid: grid.clone(), pot_diag, mask: mask.clone(), inv_h2, cell_volume: cv })
    }

    /// Pure Dirichlet Laplacian form (V = 0) on a mask.
    pub fn laplacian(grid: &Grid, mask: &Mask) -> Result<DiscreteForm, FormError> {
        let zero = PotentialField::zero(grid);
        DiscreteForm::assemble(grid, &zero, mask)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn potential_diag(&self) -> &[f64] {
        &self.pot_diag
    }

    /// Diagonal of A, for Jacobi preconditioning.
    pub fn diag(&self) -> Vec<f64> {
        let n = self.grid.node_count();
        let mut d = vec![0.0; n];
        let stiff: f64 = (0..self.grid.dim()).map(|dd| 2.0 * self.inv_h2[dd]).sum();
        for i in 0..n {
            if self.mask.contains(i) {
                d[i] = stiff * self.cell_volume + self.pot_diag[i];
            } else {
                d[i] = 1.0;
            }
        }
        d
    }

    /// Gershgorin-style scale of the operator in mass-normalized (pencil)
    /// units: `sum_d 4/h_d^2 + max |V|`.
    pub fn pencil_scale(&self) -> f64 {
        let stiff: f64 = (0..self.grid.dim()).map(|d| 4.0 * self.inv_h2[d]).sum();
        let maxv = self
            .pot_diag
            .iter()
            .enumerate()
            .filter(|(i, _)| self.mask.contains(*i))
            .fold(0.0f64, |m, (_, v)| m.max(v.abs()))
            / self.cell_volume;
        stiff + maxv
    }

    /// y = A x (cell-volume scaled). Entries off the mask are zeroed.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = &self.grid;
        let n = g.node_count();
        assert_eq!(x.len(), n);
        assert_eq!(y.len(), n);
        let dim = g.dim();
        let nd = g.n();
        let stride = {
            let mut s = [0usize; crate::mesh::MAX_DIM];
            let mut acc = 1;
            for d in 0..dim {
                s[d] = acc;
                acc *= nd[d];
            }
            s
        };
        let cv = self.cell_volume;
        for lin in 0..n {
            if !self.mask.contains(lin) {
                y[lin] = 0.0;
                continue;
            }
            let ix = g.multi_index(lin);
            let mut acc = 0.0;
            for d in 0..dim {
                let mut s = 2.0 * x[lin];
                if ix[d] > 0 {
                    let j = lin - stride[d];
                    if self.mask.contains(j) {
                        s -= x[j];
                    }
                }
                if ix[d] + 1 < nd[d] {
                    let j = lin + stride[d];
                    if self.mask.contains(j) {
                        s -= x[j];
                    }
                }
                acc += s * self.inv_h2[d];
            }
            y[lin] = acc * cv + self.pot_diag[lin] * x[lin];
        }
    }

    /// Single row of the matvec, `(A x)_i`, for Gauss-Seidel style sweeps.
    /// Returns 0 off the mask.
    pub fn apply_at(&self, x: &[f64], lin: usize) -> f64 {
        if !self.mask.contains(lin) {
            return 0.0;
        }
        let g = &self.grid;
        let ix = g.multi_index(lin);
        let mut acc = 0.0;
        let mut stride = 1usize;
        for d in 0..g.dim() {
            let mut s = 2.0 * x[lin];
            if ix[d] > 0 {
                let j = lin - stride;
                if self.mask.contains(j) {
                    s -= x[j];
                }
            }
            if ix[d] + 1 < g.n()[d] {
                let j = lin + stride;
                if self.mask.contains(j) {
                    s -= x[j];
                }
            }
            acc += s * self.inv_h2[d];
            stride *= g.n()[d];
        }
        acc * self.cell_volume + self.pot_diag[lin] * x[lin]
    }

    /// Quadratic form value `qv(xi) = a(xi, xi)` via the face sum.
    pub fn qv(&self, xi: &GridFunction) -> Result<f64, FormError> {
        self.bilinear(xi, xi)
    }

    /// Bilinear companion `a(xi, eta)`, symmetric by construction.
    pub fn bilinear(&self, xi: &GridFunction, eta: &GridFunction) -> Result<f64, FormError> {
        if xi.grid() != &self.grid || eta.grid() != &self.grid {
            return Err(FormError::GridMismatch);
        }
        let xv = xi.values();
        let ev = eta.values();
        let g = &self.grid;
        let dim = g.dim();
        let nd = g.n();
        let cv = self.cell_volume;
        let get = |v: &[f64], lin: usize| if self.mask.contains(lin) { v[lin] } else { 0.0 };
        let mut acc = 0.0f64;
        // face sum per axis: faces between node i and i+e_d, plus the two
        // boundary faces per line (value 0 outside)
        for d in 0..dim {
            let stride = {
                let mut acc2 = 1usize;
                for dd in 0..d {
                    acc2 *= nd[dd];
                }
                acc2
            };
            let ih2 = self.inv_h2[d];
            for lin in 0..g.node_count() {
                let ix = g.multi_index(lin);
                // face on the low side exists for ix[d] == 0 (boundary) and is
                // otherwise counted from the neighbor's high side
                if ix[d] == 0 {
                    let a = get(xv, lin);
                    let b = get(ev, lin);
                    acc += a * b * ih2 * cv;
                }
                // high-side face
                let (xa, ea) = (get(xv, lin), get(ev, lin));
                let (xb, eb) = if ix[d] + 1 < nd[d] {
                    (get(xv, lin + stride), get(ev, lin + stride))
                } else {
                    (0.0, 0.0)
                };
                acc += (xb - xa) * (eb - ea) * ih2 * cv;
            }
        }
        for lin in 0..g.node_count() {
            acc += self.pot_diag[lin] * get(xv, lin) * get(ev, lin);
        }
        Ok(acc)
    }

    /// Stiffness-only (V = 0) part of the form, by face sum.
    pub fn dirichlet_energy(&self, xi: &GridFunction) -> Result<f64, FormError> {
        if xi.grid() != &self.grid {
            return Err(FormError::GridMismatch);
        }
        let xv = xi.values();
        let g = &self.grid;
        let cv = self.cell_volume;
        let get = |lin: usize| if self.mask.contains(lin) { xv[lin] } else { 0.0 };
        let mut acc = 0.0f64;
        for d in 0..g.dim() {
            let stride = {
                let mut s = 1usize;
                for dd in 0..d {
                    s *= g.n()[dd];
                }
                s
            };
            let ih2 = self.inv_h2[d];
            for lin in 0..g.node_count() {
                let ix = g.multi_index(lin);
                if ix[d] == 0 {
                    let a = get(lin);
                    acc += a * a * ih2 * cv;
                }
                let a = get(lin);
                let b = if ix[d] + 1 < g.n()[d] { get(lin + stride) } else { 0.0 };
                acc += (b - a) * (b - a) * ih2 * cv;
            }
        }
        Ok(acc)
    }
}

/// Tridiagonal blocks of a 1D form (A-units): one block per contiguous run
/// of mask nodes. `off` is the constant off-diagonal `-cellvol/h^2`.
#[derive(Debug, Clone)]
pub struct TridiagBlocks {
    /// (start linear index, diagonal entries) per contiguous block.
    pub blocks: Vec<(usize, Vec<f64>)>,
    pub off: f64,
}

impl DiscreteForm {
    /// Exact tridiagonal representation; only for 1D grids.
    pub fn tridiagonal(&self) -> Option<TridiagBlocks> {
        if self.grid.dim() != 1 {
            return None;
        }
        let n = self.grid.node_count();
        let cv = self.cell_volume;
        let ih2 = self.inv_h2[0];
        let mut blocks = Vec::new();
        let mut cur: Option<(usize, Vec<f64>)> = None;
        for i in 0..n {
            if self.mask.contains(i) {
                let d = 2.0 * ih2 * cv + self.pot_diag[i];
                match &mut cur {
                    Some((_, v)) => v.push(d),
                    None => cur = Some((i, vec![d])),
                }
            } else if let Some(b) = cur.take() {
                blocks.push(b);
            }
        }
        if let Some(b) = cur.take() {
            blocks.push(b);
        }
        Some(TridiagBlocks { blocks, off: -ih2 * cv })
    }
}

/// Closed-form FD principal eigenvalue of -Delta on the grid's box:
/// `sum_d (2/h_d^2)(1 - cos(pi h_d / L_d))`.
pub fn fd_laplacian_lambda1(grid: &Grid) -> f64 {
    let mut s = 0.0;
    for d in 0..grid.dim() {
        let h = grid.h()[d];
        let l = grid.extents()[d].1 - grid.extents()[d].0;
        s += 2.0 / (h * h) * (1.0 - (std::f64::consts::PI * h / l).cos());
    }
    s
}

/// Diagonal mass matrix with weights `m_i = w(x_i) * cellvol >= 0`.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    diag: Vec<f64>,
    support: Mask,
    cell_volume: f64,
}

impl MassMatrix {
    /// Lumped mass `cellvol * I` on a mask.
    pub fn lumped(grid: &Grid, mask: &Mask) -> MassMatrix {
        let cv = grid.cell_volume();
        let diag = (0..grid.node_count())
            .map(|i| if mask.contains(i) { cv } else { 0.0 })
            .collect();
        MassMatrix { diag, support: mask.clone(), cell_volume: cv }
    }

    /// Weighted mass from a nonnegative weight function.
    pub fn weighted(grid: &Grid, w: &GridFunction) -> Result<MassMatrix, FormError> {
        if w.grid() != grid {
            return Err(FormError::GridMismatch);
        }
        let cv = grid.cell_volume();
        if let Some(i) = w.values().iter().position(|v| *v < 0.0) {
            return Err(FormError::NegativeWeight(i));
        }
        let diag: Vec<f64> = w.values().iter().map(|v| v * cv).collect();
        let bits: Vec<bool> = diag.iter().map(|v| *v > 0.0).collect();
        let support = Mask::from_bits(bits, cv);
        Ok(MassMatrix { diag, support, cell_volume: cv })
    }

    /// Indicator mass `chi_K * cellvol`.
    pub fn indicator(grid: &Grid, k: &Mask) -> MassMatrix {
        MassMatrix::lumped(grid, k)
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn support(&self) -> &Mask {
        &self.support
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn is_zero(&self) -> bool {
        self.support.count() == 0
    }

    /// xi' M xi.
    pub fn norm_sq(&self, xi: &[f64]) -> f64 {
        xi.iter().zip(&self.diag).map(|(x, m)| x * x * m).sum()
    }

    pub fn scaled(&self, t: f64) -> MassMatrix {
        assert!(t > 0.0);
        MassMatrix {
            diag: self.diag.iter().map(|m| m * t).collect(),
            support: self.support.clone(),
            cell_volume: self.cell_volume,
        }
    }
}

/// Discrete defect of the divergence-form identity
/// `Q_{V0}(xi) = int |grad xi - f xi|^2` for V0 = div F + |F|^2.
///
/// The right-hand side is evaluated per face with `(F_d xi)` face-averaged;
/// the defect is `|qv(xi) - rhs|` and decays O(h) for smooth data.
pub fn magnetic_identity_check(
    form: &DiscreteForm,
    field_components: &[GridFunction],
    singular_cells: &[usize],
    xi: &GridFunction,
) -> Result<f64, FormError> {
    let g = form.grid();
    if xi.grid() != g {
        return Err(FormError::GridMismatch);
    }
    for &c in singular_cells {
        if xi.values()[c] != 0.0 {
            return Err(FormError::SingularSupport(c));
        }
    }
    assert_eq!(field_components.len(), g.dim());
    let cv = g.cell_volume();
    let xv = xi.values();
    let get = |v: &[f64], lin: usize| if form.mask().contains(lin) { v[lin] } else { 0.0 };
    let mut rhs = 0.0f64;
    for d in 0..g.dim() {
        let fv = field_components[d].values();
        let stride = {
            let mut s = 1usize;
            for dd in 0..d {
                s *= g.n()[dd];
            }
            s
        };
        let h = g.h()[d];
        for lin in 0..g.node_count() {
            let ix = g.multi_index(lin);
            if ix[d] == 0 {
                // boundary face on the low side: xi = 0 there
                let a = get(xv, lin);
                let fa = 0.5 * get(fv, lin) * a; // face average of F xi with 0 outside
                let dq = (a - 0.0) / h;
                rhs += (dq - fa) * (dq - fa) * cv;
            }
            let a = get(xv, lin);
            let (b, fb) = if ix[d] + 1 < g.n()[d] {
                (get(xv, lin + stride), get(fv, lin + stride) * get(xv, lin + stride))
            } else {
                (0.0, 0.0)
            };
            let fa = get(fv, lin) * a;
            let dq = (b - a) / h;
            let favg = 0.5 * (fa + fb);
            rhs += (dq - favg) * (dq - favg) * cv;
        }
    }
    let lhs = form.qv(xi)?;
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Grid;
    use crate::potential::PotentialField;

    fn grid1(n: usize) -> Grid {
        Grid::new(1, &[(0.0, 1.0)], &[n]).unwrap()
    }

    #[test]
    fn qv_hat_function_hand_value() {
        // V = 0, n = 3, xi = (0,1,0): qv = (1^2 + 1^2)/0.25 = 8 over 4 faces
        let g = grid1(3);
        let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
        let xi = GridFunction::new(g.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        let q = form.qv(&xi).unwrap();
        assert!((q - 8.0).abs() < 1e-13, "qv = {q}");
    }

    #[test]
    fn qv_constant_shift() {
        let g = grid1(17);
        let xi = GridFunction::from_fn(&g, |x| (3.0 * x[0]).sin());
        let q0 = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap().qv(&xi).unwrap();
        let c = 2.75;
        let field = PotentialField::constant(&g, c);
        let qc = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap().qv(&xi).unwrap();
        let l2 = xi.l2_sq();
        assert!((qc - (q0 + c * l2)).abs() < 1e-12 * (q0.abs() + 1.0));
    }

    #[test]
    fn qv_zero_and_homogeneity() {
        let g = grid1(9);
        let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
        assert_eq!(form.qv(&GridFunction::zeros(&g)).unwrap(), 0.0);
        let xi = GridFunction::from_fn(&g, |x| x[0] * (1.0 - x[0]));
        let mut xi2 = xi.clone();
        xi2.scale(2.0);
        let q = form.qv(&xi).unwrap();
        let q2 = form.qv(&xi2).unwrap();
        assert!((q2 - 4.0 * q).abs() < 1e-12 * q.abs());
    }

    #[test]
    fn qv_fd_rayleigh_closed_form() {
        // 1D V = 0, xi = sin(pi x): qv/||xi||^2 = (2/h^2)(1 - cos(pi h))
        let n = 255;
        let g = grid1(n);
        let h = g.h()[0];
        let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
        let xi = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0]).sin());
        let q = form.qv(&xi).unwrap();
        let ray = q / xi.l2_sq();
        let exact = 2.0 / (h * h) * (1.0 - (std::f64::consts::PI * h).cos());
        assert!((ray - exact).abs() < 1e-10 * exact, "{ray} vs {exact}");
    }

    #[test]
    fn apply_matches_bilinear() {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 2.0)], &[6, 5]).unwrap();
        let field = PotentialField::constant(&g, -1.5);
        let mask = g.compact_mask(&[(0.1, 0.9), (0.2, 1.8)]).unwrap();
        let form = DiscreteForm::assemble(&g, &field, &mask).unwrap();
        let xi = GridFunction::from_fn(&g, |x| (x[0] + 0.3 * x[1]).cos());
        let eta = GridFunction::from_fn(&g, |x| x[0] * x[1]);
        // mask-restricted versions for the matvec route
        let mut ax = vec![0.0; g.node_count()];
        form.apply(xi.values(), &mut ax);
        let dot: f64 = ax
            .iter()
            .zip(eta.values())
            .enumerate()
            .map(|(i, (a, e))| if mask.contains(i) { a * e } else { 0.0 })
            .sum();
        let bi = form.bilinear(&xi, &eta).unwrap();
        assert!((dot - bi).abs() < 1e-11 * (bi.abs() + 1.0), "{dot} vs {bi}");
    }

    #[test]
    fn mask_acts_as_sub_box_form() {
        // qv on mask Omega_1 equals the form assembled on the sub-box grid
        let g = grid1(15);
        let masks = g.exhaustion(3).unwrap();
        let form = DiscreteForm::laplacian(&g, &masks[0]).unwrap();
        let xi = GridFunction::from_fn(&g, |x| {
            if x[0] > 1.0 / 3.0 && x[0] < 2.0 / 3.0 {
                (x[0] - 1.0 / 3.0) * (2.0 / 3.0 - x[0])
            } else {
                0.0
            }
        });
        // compare against hand face-sum over the masked line segment
        let q = form.qv(&xi).unwrap();
        assert!(q > 0.0);
        // function supported strictly inside the mask: full form agrees
        let qfull = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap().qv(&xi).unwrap();
        assert!((q - qfull).abs() < 1e-13 * qfull.max(1.0));
    }

    #[test]
    fn weighted_mass_variants() {
        let g = grid1(7);
        let k = g.compact_mask(&[(0.3, 0.7)]).unwrap();
        let m = MassMatrix::indicator(&g, &k);
        for i in 0..g.node_count() {
            let want = if k.contains(i) { g.cell_volume() } else { 0.0 };
            assert_eq!(m.diag()[i], want);
        }
        let ones = GridFunction::constant(&g, 1.0);
        let lumped = MassMatrix::weighted(&g, &ones).unwrap();
        assert!(lumped.diag().iter().all(|v| (*v - g.cell_volume()).abs() < 1e-16));
        // Hardy mass entries 1/(4 x^2) * h
        let w = GridFunction::from_fn(&g, |x| 1.0 / (4.0 * x[0] * x[0]));
        let hm = MassMatrix::weighted(&g, &w).unwrap();
        for i in 0..g.node_count() {
            let x = g.node_coords(i)[0];
            assert!((hm.diag()[i] - g.cell_volume() / (4.0 * x * x)).abs() < 1e-14);
        }
        let neg = GridFunction::new(g.clone(), vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(MassMatrix::weighted(&g, &neg), Err(FormError::NegativeWeight(1))));
    }

    #[test]
    fn magnetic_identity_zero_field_exact() {
        let g = grid1(31);
        let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
        let xi = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0]).sin());
        let f0 = vec![GridFunction::zeros(&g)];
        let res = magnetic_identity_check(&form, &f0, &[], &xi).unwrap();
        assert!(res < 1e-14, "residual {res}");
    }

    #[test]
    fn magnetic_identity_residual_halves() {
        // smooth F: the defect decays at least by half per refinement
        // (constant F lands at the O(h^2) superconvergent rate)
        for fgen in [
            |_: &Grid| 0.8f64,
            |_: &Grid| -1.3f64,
        ] {
            let mut res = Vec::new();
            for &n in &[255usize, 511] {
                let g = grid1(n);
                let c = fgen(&g);
                let fcomp = GridFunction::constant(&g, c);
                let field = crate::potential::divergence_form(&[fcomp.clone()], &g, &[]).unwrap();
                let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
                let xi = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0]).sin());
                let q0 = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap().qv(&xi).unwrap();
                let r = magnetic_identity_check(&form, &[fcomp], &[], &xi).unwrap();
                assert!(r <= 1e-2 * q0, "n={n}: residual {r} vs qv0 {q0}");
                res.push(r);
            }
            let ratio = res[0] / res[1];
            assert!(ratio > 1.7, "decay ratio {ratio}");
        }
        // varying F
        let mut res = Vec::new();
        for &n in &[255usize, 511] {
            let g = grid1(n);
            let fcomp = GridFunction::from_fn(&g, |x| (2.0 * x[0]).cos());
            let field = crate::potential::divergence_form(&[fcomp.clone()], &g, &[]).unwrap();
            let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
            let xi = GridFunction::from_fn(&g, |x| (std::f64::consts::PI * x[0]).sin());
            let r = magnetic_identity_check(&form, &[fcomp], &[], &xi).unwrap();
            res.push(r);
        }
        let ratio = res[0] / res[1];
        assert!(ratio > 1.7, "decay ratio {ratio}");
    }
}
