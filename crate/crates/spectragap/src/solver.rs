//! Symmetric positive-(semi)definite solves: Jacobi-preconditioned CG, the
//! Dirichlet problem -Delta u + W u = f with its L^1 estimate, the discrete
//! H^-1 norm, and the projected-SOR obstacle solver used by capacity.

use thiserror::Error;

use crate::form::{DiscreteForm, FormError, MassMatrix};
use crate::mesh::{Grid, GridFunction, Mask, MeshError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("cg did not converge in {iterations} iterations (relative residual {rel_residual:.3e})")]
    NoConvergence { iterations: usize, rel_residual: f64 },
    #[error("operator is not positive definite on the mask (p'Ap = {curvature:.3e} at iteration {iterations})")]
    Indefinite { iterations: usize, curvature: f64 },
    #[error("projected SOR exhausted its sweep budget of {0}")]
    SweepBudget(usize),
    #[error("weight must be nonnegative (node {0})")]
    NegativeWeight(usize),
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone)]
pub struct CgSolve {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Outcome of a failed CG run; the partial iterate is kept because callers
/// in the spectral module use it as a descent direction.
#[derive(Debug, Clone)]
pub struct CgFailure {
    pub partial: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    pub indefinite: bool,
}

/// Jacobi-preconditioned conjugate gradients on a masked symmetric operator.
/// `apply` must zero entries off the mask; `diag` is the operator diagonal
/// used for preconditioning.
pub fn cg_solve<F>(
    apply: F,
    diag: &[f64],
    mask: &Mask,
    b: &[f64],
    tol: f64,
    maxit: usize,
) -> Result<CgSolve, CgFailure>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| -> f64 { mask.iter_set().map(|i| a[i] * c[i]).sum() };
    let precond: Vec<f64> = diag
        .iter()
        .map(|d| if d.abs() > 1e-300 { 1.0 / d.abs() } else { 1.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    for i in 0..n {
        if !mask.contains(i) {
            r[i] = 0.0;
        }
    }
    let bnorm = dot(&r, &r).sqrt();
    if bnorm == 0.0 {
        return Ok(CgSolve { x, iterations: 0, rel_residual: 0.0 });
    }
    let mut z: Vec<f64> = (0..n).map(|i| precond[i] * r[i]).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..maxit {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(CgFailure {
                partial: x,
                iterations: it,
                rel_residual: dot(&r, &r).sqrt() / bnorm,
                indefinite: true,
            });
        }
        let alpha = rz / pap;
        for i in mask.iter_set() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(CgSolve { x, iterations: it + 1, rel_residual: rnorm / bnorm });
        }
        for i in mask.iter_set() {
            z[i] = precond[i] * r[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in mask.iter_set() {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = dot(&r, &r).sqrt() / bnorm;
    Err(CgFailure { partial: x, iterations: maxit, rel_residual: rel, indefinite: false })
}

/// Solve `A xi = b` for an assembled form.
pub fn cg_solve_form(form: &DiscreteForm, b: &[f64], tol: f64, maxit: usize) -> Result<CgSolve, CgFailure> {
    let diag = form.diag();
    cg_solve(|x, y| form.apply(x, y), &diag, form.mask(), b, tol, maxit)
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    /// sum_K W |u| cellvol
    pub lhs: f64,
    /// 2 (sum_K W cellvol)^{1/2} * ||f||_{H^-1}
    pub rhs: f64,
    /// lhs <= rhs * (1 + 0.05)
    pub holds: bool,
    pub hminus1_norm_f: f64,
}

pub const ESTIMATE_SLACK: f64 = 0.05;

/// Solve `(A0 + diag(W)) u = M f` with W >= 0 and report the discrete
/// `||W u||_{L^1(K)} <= 2 ||W||^{1/2}_{L^1(K)} ||f||_{H^-1}` check.
pub fn dirichlet_solve(
    grid: &Grid,
    w: &GridFunction,
    f: &GridFunction,
    k: &Mask,
) -> Result<(GridFunction, EstimateReport), SolveError> {
    if w.grid() != grid || f.grid() != grid {
        return Err(SolveError::ShapeMismatch);
    }
    if let Some(i) = w.values().iter().position(|v| *v < 0.0) {
        return Err(SolveError::NegativeWeight(i));
    }
    let mask = grid.full_mask();
    let cv = grid.cell_volume();
    let a0 = DiscreteForm::laplacian(grid, &mask)?;
    let wdiag: Vec<f64> = w.values().iter().map(|v| v * cv).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        a0.apply(x, y);
        for i in 0..x.len() {
            y[i] += wdiag[i] * x[i];
        }
    };
    let mut diag = a0.diag();
    for i in 0..diag.len() {
        diag[i] += wdiag[i];
    }
    let b: Vec<f64> = f.values().iter().map(|v| v * cv).collect();
    let sol = cg_solve(apply, &diag, &mask, &b, 1e-12, 50 * (grid.node_count() + 100))
        .map_err(|e| SolveError::NoConvergence { iterations: e.iterations, rel_residual: e.rel_residual })?;
    let u = GridFunction::new(grid.clone(), sol.x)?;
    let lhs: f64 = k.iter_set().map(|i| w.values()[i] * u.values()[i].abs()).sum::<f64>() * cv;
    let wk: f64 = k.iter_set().map(|i| w.values()[i]).sum::<f64>() * cv;
    let hnorm = hminus1_norm(grid, f)?;
    let rhs = 2.0 * wk.sqrt() * hnorm;
    let holds = lhs <= rhs * (1.0 + ESTIMATE_SLACK);
    Ok((u, EstimateReport { lhs, rhs, holds, hminus1_norm_f: hnorm }))
}

/// Discrete dual norm `(f' M A0^{-1} M f)^{1/2}` via one Poisson solve at
/// tolerance 1e-10.
pub fn hminus1_norm(grid: &Grid, f: &GridFunction) -> Result<f64, SolveError> {
    if f.grid() != grid {
        return Err(SolveError::ShapeMismatch);
    }
    let mask = grid.full_mask();
    let a0 = DiscreteForm::laplacian(grid, &mask)?;
    let cv = grid.cell_volume();
    let b: Vec<f64> = f.values().iter().map(|v| v * cv).collect();
    let sol = cg_solve_form(&a0, &b, 1e-10, 50 * (grid.node_count() + 100))
        .map_err(|e| SolveError::NoConvergence { iterations: e.iterations, rel_residual: e.rel_residual })?;
    let val: f64 = b.iter().zip(&sol.x).map(|(bi, yi)| bi * yi).sum();
    Ok(val.max(0.0).sqrt())
}

/// Lower obstacle: finite entries force `xi >= lower` there,
/// `f64::NEG_INFINITY` leaves a node unconstrained.
#[derive(Debug, Clone)]
pub struct Obstacle {
    lower: Vec<f64>,
}

impl Obstacle {
    pub fn level_on_mask(grid: &Grid, k: &Mask, level: f64) -> Obstacle {
        let lower = (0..grid.node_count())
            .map(|i| if k.contains(i) { level } else { f64::NEG_INFINITY })
            .collect();
        Obstacle { lower }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
}

#[derive(Debug, Clone)]
pub struct ObstacleSolve {
    pub xi: GridFunction,
    pub sweeps: usize,
    /// qv(xi) sampled once per sweep when energy recording is on.
    pub energy_trace: Vec<f64>,
}

pub const PSOR_OMEGA: f64 = 1.5;
pub const PSOR_TOL: f64 = 1e-10;

/// Projected SOR for `min xi' A xi` subject to `xi >= lower`, A positive
/// definite. Stops when the largest nodal update falls below
/// `PSOR_TOL * max(1, |xi|_inf)`.
pub fn obstacle_solve(
    form: &DiscreteForm,
    obstacle: &Obstacle,
    max_sweeps: usize,
    record_energy: bool,
) -> Result<ObstacleSolve, SolveError> {
    let grid = form.grid();
    let n = grid.node_count();
    if obstacle.lower.len() != n {
        return Err(SolveError::ShapeMismatch);
    }
    let diag = form.diag();
    let mut xi = vec![0.0f64; n];
    for i in 0..n {
        if form.mask().contains(i) && obstacle.lower[i].is_finite() {
            xi[i] = obstacle.lower[i].max(0.0);
        }
    }
    let mut trace = Vec::new();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_update = 0.0f64;
        let mut scale = 1.0f64;
        for i in 0..n {
            if !form.mask().contains(i) {
                continue;
            }
            let r = form.apply_at(&xi, i);
            let mut v = xi[i] - PSOR_OMEGA * r / diag[i];
            if v < obstacle.lower[i] {
                v = obstacle.lower[i];
            }
            let upd = (v - xi[i]).abs();
            if upd > max_update {
                max_update = upd;
            }
            xi[i] = v;
            scale = scale.max(v.abs());
        }
        if record_energy {
            let gf = GridFunction::new(grid.clone(), xi.clone())?;
            trace.push(form.qv(&gf)?);
        }
        if max_update < PSOR_TOL * scale {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(SolveError::SweepBudget(max_sweeps));
        }
    }
    Ok(ObstacleSolve { xi: GridFunction::new(grid.clone(), xi)?, sweeps, energy_trace: trace })
}

/// Complementarity diagnostics of a converged obstacle solution:
/// largest negative residual on the active set and largest absolute
/// residual off the constrained set, both relative to the diagonal scale.
pub fn complementarity_residual(form: &DiscreteForm, obstacle: &Obstacle, xi: &GridFunction) -> (f64, f64) {
    let n = form.grid().node_count();
    let diag = form.diag();
    let mut active_neg = 0.0f64;
    let mut free_abs = 0.0f64;
    let scale = xi.max_abs().max(1.0);
    for i in 0..n {
        if !form.mask().contains(i) {
            continue;
        }
        let r = form.apply_at(xi.values(), i) / (diag[i] * scale);
        let constrained = obstacle.lower[i].is_finite();
        let active = constrained && (xi.values()[i] - obstacle.lower[i]).abs() <= 1e-9 * scale;
        if active {
            active_neg = active_neg.max(-r);
        } else {
            free_abs = free_abs.max(r.abs());
        }
    }
    (active_neg, free_abs)
}

/// Lumped-mass right-hand side `M f` helper.
pub fn mass_rhs(mass: &MassMatrix, f: &GridFunction) -> Vec<f64> {
    f.values().iter().zip(mass.diag()).map(|(v, m)| v * m).collect()
}
