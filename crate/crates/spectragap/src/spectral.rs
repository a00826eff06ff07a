//! Principal eigenpairs of Q_V and bottoms of weighted pencils (Q_V, M_w).
//!
//! The principal solve is a locally optimal preconditioned descent on the
//! Rayleigh quotient (basis {x, preconditioned residual, previous step}),
//! augmented every few iterations by a shifted inverse-iteration direction
//! when the shifted operator admits a CG solve; when CG reports an
//! indefinite shift the step falls back to the pure gradient basis. This is
//! matrix-free throughout; the Ritz problems are 4x4 at most.

use thiserror::Error;

use crate::form::{DiscreteForm, FormError, MassMatrix};
use crate::mesh::{GridFunction, MeshError};
use crate::solver::cg_solve;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("eigensolver did not converge within {0} iterations")]
    Budget(usize),
    #[error("mass matrix must be positive on the form's mask (node {0})")]
    MassNotPositive(usize),
    #[error("weight is identically zero")]
    ZeroWeight,
    #[error("zero mass-norm argument")]
    ZeroMassNorm,
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone)]
pub struct SpectralResult {
    /// Pencil bottom (eigenvalue in mass-normalized units).
    pub value: f64,
    /// Eigenvector normalized so v' M v = 1.
    pub vector: GridFunction,
    /// Relative residual ||A v - value * M v|| / max(||A v||, floor).
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EigOpts {
    pub tol: f64,
    pub max_iterations: usize,
    /// Attempt a shifted inverse-iteration direction every this many steps.
    pub accel_period: usize,
    pub inner_tol: f64,
    pub inner_maxit: usize,
}

impl Default for EigOpts {
    fn default() -> Self {
        EigOpts { tol: 1e-8, max_iterations: 10_000, accel_period: 8, inner_tol: 1e-3, inner_maxit: 400 }
    }
}

impl EigOpts {
    pub fn with_tol(tol: f64) -> EigOpts {
        EigOpts { tol, ..EigOpts::default() }
    }
}

/// Smallest eigenvalue of the pencil (A, M) with M the lumped mass.
pub fn principal_eig(form: &DiscreteForm, opts: &EigOpts) -> Result<SpectralResult, SpectralError> {
    let mass = MassMatrix::lumped(form.grid(), form.mask());
    principal_eig_mass(form, &mass, opts)
}

pub fn principal_eig_mass(
    form: &DiscreteForm,
    mass: &MassMatrix,
    opts: &EigOpts,
) -> Result<SpectralResult, SpectralError> {
    for i in form.mask().iter_set() {
        if mass.diag()[i] <= 0.0 {
            return Err(SpectralError::MassNotPositive(i));
        }
    }
    if form.grid().dim() == 1 {
        // tridiagonal pencils get the certified route: Sturm bisection for
        // the bottom eigenvalue, one shifted Thomas solve for the vector
        return principal_eig_tridiag(form, mass, opts);
    }
    let n = form.grid().node_count();
    let mask = form.mask().clone();
    let mdiag = mass.diag();

    let dot = |a: &[f64], b: &[f64]| -> f64 { mask.iter_set().map(|i| a[i] * b[i]).sum() };
    let mdot = |a: &[f64], b: &[f64]| -> f64 { mask.iter_set().map(|i| a[i] * mdiag[i] * b[i]).sum() };

    // deterministic start: ones plus a tiny index hash to break symmetries
    let mut x = vec![0.0; n];
    for i in mask.iter_set() {
        let h = (i as u64).wrapping_mul(0x9E3779B97F4A7C15);
        x[i] = 1.0 + 1e-2 * ((h >> 40) as f64 / (1u64 << 24) as f64 - 0.5);
    }
    let nx = mdot(&x, &x).sqrt();
    for i in mask.iter_set() {
        x[i] /= nx;
    }

    let adiag = form.diag();
    // SPD-safe lower bound for shifts and the preconditioner:
    // rayleigh >= min_i (pot_diag_i / m_i) because the stiffness part is >= 0
    let mut sigma0 = f64::INFINITY;
    for i in mask.iter_set() {
        sigma0 = sigma0.min(form.potential_diag()[i] / mdiag[i]);
    }
    sigma0 = sigma0.min(0.0);
    let pscale = form.pencil_scale();
    sigma0 -= 1e-3 * pscale.max(1.0);
    let precond: Vec<f64> = (0..n)
        .map(|i| {
            if mask.contains(i) {
                1.0 / (adiag[i] - sigma0 * mdiag[i]).max(1e-300)
            } else {
                0.0
            }
        })
        .collect();

    let mut ax = vec![0.0; n];
    form.apply(&x, &mut ax);
    let mut lam = dot(&x, &ax);
    let mut p: Option<(Vec<f64>, Vec<f64>)> = None; // (p, Ap)
    let opscale_a = pscale * form.cell_volume();
    let mut resid = f64::INFINITY;
    let mut iterations = 0;

    for it in 0..opts.max_iterations {
        iterations = it;
        // residual r = A x - lam M x
        let mut r = vec![0.0; n];
        for i in mask.iter_set() {
            r[i] = ax[i] - lam * mdiag[i] * x[i];
        }
        let rnorm = dot(&r, &r).sqrt();
        let axnorm = dot(&ax, &ax).sqrt();
        let xnorm = dot(&x, &x).sqrt();
        let denom = axnorm.max(1e-6 * opscale_a * xnorm).max(1e-300);
        resid = rnorm / denom;
        if resid <= opts.tol {
            break;
        }

        // candidate directions
        let mut cand: Vec<Vec<f64>> = Vec::with_capacity(3);
        let mut w: Vec<f64> = vec![0.0; n];
        for i in mask.iter_set() {
            w[i] = precond[i] * r[i];
        }
        cand.push(w);
        if let Some((pv, _)) = &p {
            cand.push(pv.clone());
        }
        // shifted inverse-iteration direction (shift = current Rayleigh
        // quotient pulled down by the residual scale, so CG has a chance of
        // definiteness; an indefiniteness flag is fine, the partial iterate
        // still serves as a descent candidate)
        if it % opts.accel_period == 0 {
            let margin = (rnorm / xnorm.max(1e-300) / form.cell_volume()).max(1e-6 * pscale);
            let sigma = lam - margin;
            let shifted = |v: &[f64], out: &mut [f64]| {
                form.apply(v, out);
                for i in mask.iter_set() {
                    out[i] -= sigma * mdiag[i] * v[i];
                }
            };
            let sdiag: Vec<f64> = (0..n)
                .map(|i| if mask.contains(i) { adiag[i] - sigma * mdiag[i] } else { 1.0 })
                .collect();
            let rhs: Vec<f64> = (0..n)
                .map(|i| if mask.contains(i) { mdiag[i] * x[i] } else { 0.0 })
                .collect();
            let z = match cg_solve(shifted, &sdiag, &mask, &rhs, opts.inner_tol, opts.inner_maxit) {
                Ok(s) => s.x,
                Err(f) => f.partial,
            };
            if dot(&z, &z) > 0.0 {
                cand.push(z);
            }
        }

        // M-orthonormal basis [x, cand...] with cached A-images
        let mut basis: Vec<Vec<f64>> = vec![x.clone()];
        let mut abasis: Vec<Vec<f64>> = vec![ax.clone()];
        for c in cand {
            let mut v = c;
            let mut keep = true;
            for _pass in 0..2 {
                let before = mdot(&v, &v).sqrt();
                for b in &basis {
                    let proj = mdot(&v, b);
                    for i in mask.iter_set() {
                        v[i] -= proj * b[i];
                    }
                }
                let after = mdot(&v, &v).sqrt();
                if after <= 1e-8 * before.max(1e-300) || after == 0.0 {
                    keep = false;
                    break;
                }
            }
            if !keep {
                continue;
            }
            let nv = mdot(&v, &v).sqrt();
            for i in mask.iter_set() {
                v[i] /= nv;
            }
            let mut av = vec![0.0; n];
            form.apply(&v, &mut av);
            basis.push(v);
            abasis.push(av);
        }
        let m = basis.len();
        if m == 1 {
            break; // nothing to move along
        }
        // Ritz: smallest eigenpair of the m x m projected matrix
        let mut small = vec![vec![0.0; m]; m];
        for a in 0..m {
            for b in a..m {
                let v = dot(&basis[a], &abasis[b]);
                small[a][b] = v;
                small[b][a] = v;
            }
        }
        let (vals, vecs) = small_sym_eig(&small);
        let mut imin = 0;
        for k in 1..m {
            if vals[k] < vals[imin] {
                imin = k;
            }
        }
        let y: Vec<f64> = (0..m).map(|k| vecs[k][imin]).collect();
        // new iterate and momentum direction
        let mut xn = vec![0.0; n];
        let mut axn = vec![0.0; n];
        let mut pn = vec![0.0; n];
        let mut apn = vec![0.0; n];
        for k in 0..m {
            for i in mask.iter_set() {
                xn[i] += y[k] * basis[k][i];
                axn[i] += y[k] * abasis[k][i];
                if k > 0 {
                    pn[i] += y[k] * basis[k][i];
                    apn[i] += y[k] * abasis[k][i];
                }
            }
        }
        let nxn = mdot(&xn, &xn).sqrt();
        for i in mask.iter_set() {
            xn[i] /= nxn;
            axn[i] /= nxn;
        }
        let lam_new = dot(&xn, &axn);
        x = xn;
        ax = axn;
        lam = lam_new;
        if mdot(&pn, &pn) > 0.0 {
            p = Some((pn, apn));
        }
    }

    let converged = resid <= opts.tol;
    let vector = GridFunction::new(form.grid().clone(), x)?;
    let result = SpectralResult { value: lam, vector, residual: resid, converged, iterations };
    if !converged && resid > 1e3 * opts.tol {
        return Err(SpectralError::Budget(opts.max_iterations));
    }
    Ok(result)
}

/// Certified 1D route: the pencil (A, M) with diagonal M reduces per mask
/// block to a symmetric tridiagonal whose eigenvalue counts come from Sturm
/// sequences; bisection brackets the bottom to machine precision and one
/// shifted Thomas solve extracts the vector.
fn principal_eig_tridiag(
    form: &DiscreteForm,
    mass: &MassMatrix,
    opts: &EigOpts,
) -> Result<SpectralResult, SpectralError> {
    let tri = form.tridiagonal().expect("dim 1");
    let n = form.grid().node_count();
    let md = mass.diag();
    // per block: transformed diag d_i/m_i and offs off/sqrt(m_i m_j)
    let mut best: Option<(usize, f64)> = None; // (block index, lambda)
    let mut transformed: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (bi, (start, diag)) in tri.blocks.iter().enumerate() {
        let m = diag.len();
        let d: Vec<f64> = (0..m).map(|i| diag[i] / md[start + i]).collect();
        let e: Vec<f64> = (0..m.saturating_sub(1))
            .map(|i| tri.off / (md[start + i] * md[start + i + 1]).sqrt())
            .collect();
        let count_below = |lam: f64| -> usize {
            let mut c = 0usize;
            let mut p = d[0] - lam;
            if p < 0.0 {
                c += 1;
            }
            for i in 1..m {
                let mut pn = (d[i] - lam) - e[i - 1] * e[i - 1] / p;
                if p == 0.0 {
                    pn = (d[i] - lam) - e[i - 1].abs() / f64::MIN_POSITIVE;
                }
                if pn < 0.0 {
                    c += 1;
                }
                p = pn;
            }
            c
        };
        let scale = d.iter().fold(0.0f64, |s, v| s.max(v.abs())) + 2.0 * e.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        let (mut lo, mut hi) = (-scale - 1.0, scale + 1.0);
        for _ in 0..110 {
            let mid = 0.5 * (lo + hi);
            if count_below(mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if best.map_or(true, |(_, l)| hi < l) {
            best = Some((bi, hi));
        }
        transformed.push((*start, d, e));
    }
    let (bi, lambda) = best.expect("mask has at least one block");
    let (start, _, _) = transformed[bi].clone();
    let (_, blockdiag) = &tri.blocks[bi];
    let m = blockdiag.len();
    // shifted inverse iteration on the pencil restricted to the block:
    // (A - sigma M) x = M v, solved exactly by the Thomas algorithm
    let pscale = form.pencil_scale();
    let sigma = lambda - 1e-10 * pscale.max(1.0);
    let mut v = vec![1.0f64; m];
    let mut lam_est = lambda;
    for _pass in 0..3 {
        let dd: Vec<f64> = (0..m).map(|i| blockdiag[i] - sigma * md[start + i]).collect();
        let rhs: Vec<f64> = (0..m).map(|i| md[start + i] * v[i]).collect();
        let x = thomas(&dd, tri.off, &rhs);
        let nrm: f64 = (0..m).map(|i| x[i] * x[i] * md[start + i]).sum::<f64>().sqrt();
        if !(nrm > 0.0 && nrm.is_finite()) {
            break;
        }
        v = x.iter().map(|t| t / nrm).collect();
        // Rayleigh quotient on the block
        let mut av = vec![0.0; m];
        for i in 0..m {
            av[i] = blockdiag[i] * v[i];
            if i > 0 {
                av[i] += tri.off * v[i - 1];
            }
            if i + 1 < m {
                av[i] += tri.off * v[i + 1];
            }
        }
        lam_est = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        // residual in the convergence metric below; one extra pass refines
        let rnorm: f64 = (0..m)
            .map(|i| {
                let r = av[i] - lam_est * md[start + i] * v[i];
                r * r
            })
            .sum::<f64>()
            .sqrt();
        let axnorm: f64 = av.iter().map(|a| a * a).sum::<f64>().sqrt();
        let vnorm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let opscale_a = pscale * form.cell_volume();
        if rnorm / axnorm.max(1e-6 * opscale_a * vnorm).max(1e-300) <= opts.tol {
            break;
        }
    }
    let mut full = vec![0.0f64; n];
    // orient positive mean
    let s: f64 = v.iter().sum();
    let sgn = if s >= 0.0 { 1.0 } else { -1.0 };
    for i in 0..m {
        full[start + i] = sgn * v[i];
    }
    let vector = GridFunction::new(form.grid().clone(), full)?;
    // report against the Sturm-certified eigenvalue
    let mut av = vec![0.0; n];
    form.apply(vector.values(), &mut av);
    let dot = |a: &[f64], b: &[f64]| -> f64 { form.mask().iter_set().map(|i| a[i] * b[i]).sum() };
    let rn = {
        let mut s2 = 0.0;
        for i in form.mask().iter_set() {
            let r = av[i] - lam_est * mass.diag()[i] * vector.values()[i];
            s2 += r * r;
        }
        s2.sqrt()
    };
    let axn = dot(&av, &av).sqrt();
    let vn = dot(vector.values(), vector.values()).sqrt();
    let opscale_a = pscale * form.cell_volume();
    let residual = rn / axn.max(1e-6 * opscale_a * vn).max(1e-300);
    Ok(SpectralResult { value: lam_est, vector, residual, converged: residual <= opts.tol.max(1e-9), iterations: 3 })
}

/// Thomas solve for a tridiagonal system with constant off-diagonal;
/// diagonally dominant or positive definite inputs are stable.
fn thomas(diag: &[f64], off: f64, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag[0];
    d[0] = b[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off * c[i - 1];
        c[i] = off / m;
        d[i] = (b[i] - off * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Exact 1D solve of `A x = b` on a positive-definite tridiagonal form.
pub(crate) fn solve_spd_tridiag(form: &DiscreteForm, b: &[f64]) -> Option<Vec<f64>> {
    let tri = form.tridiagonal()?;
    let n = form.grid().node_count();
    let mut x = vec![0.0f64; n];
    for (start, diag) in &tri.blocks {
        let m = diag.len();
        let rhs: Vec<f64> = (0..m).map(|i| b[start + i]).collect();
        let sol = thomas(diag, tri.off, &rhs);
        for i in 0..m {
            x[start + i] = sol[i];
        }
    }
    Some(x)
}

/// Rayleigh quotient `qv(xi) / (xi' M xi)`.
pub fn rayleigh(form: &DiscreteForm, mass: &MassMatrix, xi: &GridFunction) -> Result<f64, SpectralError> {
    let mnorm = mass_norm_sq_masked(form, mass, xi.values());
    if mnorm <= 0.0 {
        return Err(SpectralError::ZeroMassNorm);
    }
    Ok(form.qv(xi)? / mnorm)
}

fn mass_norm_sq_masked(form: &DiscreteForm, mass: &MassMatrix, v: &[f64]) -> f64 {
    form.mask().iter_set().map(|i| v[i] * v[i] * mass.diag()[i]).sum()
}

#[derive(Debug, Clone)]
pub struct WeightedGap {
    /// mu = inf { qv(xi) : xi' M_w xi = 1 }.
    pub mu: f64,
    pub minimizer: GridFunction,
    /// The base form itself was found indefinite; mu is reported as 0.
    pub indefinite: bool,
    /// The base form has numerically vanishing bottom; mu was read off the
    /// ground state directly instead of power iteration.
    pub deflated: bool,
    pub iterations: usize,
}

/// Bottom of the weighted pencil (Q_V, M_w) for a nonnegative weight,
/// computed as 1/nu with nu the top of A^{-1} M_w by power iteration with
/// inner CG solves.
pub fn weighted_gap(form: &DiscreteForm, mass_w: &MassMatrix, opts: &EigOpts) -> Result<WeightedGap, SpectralError> {
    if mass_w.is_zero() || form.mask().iter_set().all(|i| mass_w.diag()[i] == 0.0) {
        return Err(SpectralError::ZeroWeight);
    }
    let base = principal_eig(form, opts)?;
    let pscale = form.pencil_scale();
    let defl_tol = 1e-8 * pscale;
    if base.value < -defl_tol {
        // indefinite base form: the weighted infimum is not a gap
        return Ok(WeightedGap { mu: 0.0, minimizer: base.vector, indefinite: true, deflated: false, iterations: base.iterations });
    }
    if base.value.abs() <= defl_tol {
        let w2 = mass_norm_sq_masked(form, mass_w, base.vector.values());
        if w2 > 0.0 {
            let mu = form.qv(&base.vector)? / w2;
            return Ok(WeightedGap { mu, minimizer: base.vector, indefinite: false, deflated: true, iterations: base.iterations });
        }
    }

    let n = form.grid().node_count();
    let mask = form.mask().clone();
    let dot = |a: &[f64], b: &[f64]| -> f64 { mask.iter_set().map(|i| a[i] * b[i]).sum() };
    let mut v = base.vector.values().to_vec();
    let mut nu_prev = 0.0f64;
    let mut nu = 0.0f64;
    let mut its = 0usize;
    let budget = 10_000usize;
    let mut av = vec![0.0; n];
    for step in 0..budget {
        its = step + 1;
        let rhs: Vec<f64> = (0..n)
            .map(|i| if mask.contains(i) { mass_w.diag()[i] * v[i] } else { 0.0 })
            .collect();
        if dot(&rhs, &rhs) == 0.0 {
            // weight-orthogonal iterate: restart from indicator of support
            v = (0..n)
                .map(|i| if mask.contains(i) && mass_w.diag()[i] > 0.0 { 1.0 } else { 0.0 })
                .collect();
            continue;
        }
        let y = if form.grid().dim() == 1 {
            solve_spd_tridiag(form, &rhs).expect("dim 1")
        } else {
            match crate::solver::cg_solve_form(form, &rhs, 1e-10, 40 * (n + 100)) {
                Ok(s) => s.x,
                Err(f) => {
                    if f.indefinite {
                        return Ok(WeightedGap {
                            mu: 0.0,
                            minimizer: GridFunction::new(form.grid().clone(), f.partial)?,
                            indefinite: true,
                            deflated: false,
                            iterations: its,
                        });
                    }
                    f.partial
                }
            }
        };
        form.apply(&y, &mut av);
        let ya = dot(&y, &av);
        let yw: f64 = mask.iter_set().map(|i| y[i] * mass_w.diag()[i] * y[i]).sum();
        if ya <= 0.0 {
            return Ok(WeightedGap {
                mu: 0.0,
                minimizer: GridFunction::new(form.grid().clone(), y)?,
                indefinite: true,
                deflated: false,
                iterations: its,
            });
        }
        nu = yw / ya;
        let s = ya.sqrt();
        v = y.iter().map(|t| t / s).collect();
        if step > 2 && (nu - nu_prev).abs() <= 1e-10 * nu.abs().max(1e-300) {
            break;
        }
        nu_prev = nu;
    }
    let mu = if nu > 0.0 { 1.0 / nu } else { f64::INFINITY };
    Ok(WeightedGap {
        mu,
        minimizer: GridFunction::new(form.grid().clone(), v)?,
        indefinite: false,
        deflated: false,
        iterations: its,
    })
}

/// Jacobi eigenvalue iteration for tiny dense symmetric matrices.
/// Returns (eigenvalues, eigenvector matrix by columns).
fn small_sym_eig(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = a.len();
    let mut b: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; m]; m];
    for i in 0..m {
        v[i][i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        let (mut p, mut q) = (0, 1);
        for i in 0..m {
            for j in (i + 1)..m {
                if b[i][j].abs() > off {
                    off = b[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        let scale = (0..m).map(|i| b[i][i].abs()).fold(0.0f64, f64::max);
        if off <= 1e-15 * scale.max(1e-300) {
            break;
        }
        let theta = 0.5 * (b[q][q] - b[p][p]) / b[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for i in 0..m {
            let (bip, biq) = (b[i][p], b[i][q]);
            b[i][p] = c * bip - s * biq;
            b[i][q] = s * bip + c * biq;
        }
        for j in 0..m {
            let (bpj, bqj) = (b[p][j], b[q][j]);
            b[p][j] = c * bpj - s * bqj;
            b[q][j] = s * bpj + c * bqj;
        }
        for i in 0..m {
            let (vip, viq) = (v[i][p], v[i][q]);
            v[i][p] = c * vip - s * viq;
            v[i][q] = s * vip + c * viq;
        }
    }
    let vals = (0..m).map(|i| b[i][i]).collect();
    (vals, v)
}
