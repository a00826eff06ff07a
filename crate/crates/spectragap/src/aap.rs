//! Constructive AAP machinery: positive-supersolution construction over an
//! exhaustion-and-truncation schedule, verification of the resulting lower
//! bound `Q_V(xi) >= sum (h/u) xi^2`, the discrete ground-state transform
//! identity, and the Picone improvement weight from two positive functions.

use thiserror::Error;

use crate::form::{DiscreteForm, FormError, MassMatrix};
use crate::mesh::{Grid, GridFunction, MeshError};
use crate::potential::{PotentialError, PotentialField};
use crate::solver::cg_solve;
use crate::spectral::{principal_eig, weighted_gap, EigOpts, SpectralError};

#[derive(Debug, Error)]
pub enum AapError {
    #[error("supercritical witness on the working grid (lambda_1 = {lambda:.6e}): no positive supersolution exists")]
    NotNonnegative { lambda: f64 },
    #[error("negative principal eigenvalue {lambda:.6e} at schedule step (m={m}, n={n}) contradicts the nonnegativity evidence")]
    NegativeLevel { m: usize, n: f64, lambda: f64 },
    #[error("need at least 2 exhaustion levels, got {0}")]
    TooFewLevels(usize),
    #[error("truncation schedule must be positive and nondecreasing")]
    BadTruncations,
    #[error("normalization ball captured no nodes")]
    EmptyBall,
    #[error("constructed function fails positivity at node {0}")]
    NotPositive(usize),
    #[error("h exceeds the residual at node {node}: {h} > {mu}")]
    HExceedsResidual { node: usize, h: f64, mu: f64 },
    #[error("h must be nonnegative (node {0})")]
    NegativeH(usize),
    #[error("improvement weight is identically zero (inputs proportional)")]
    VacuousWeight,
    #[error("nonpositive input values at node {0}")]
    NonPositiveInput(usize),
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Record of how a supersolution was normalized and truncated.
#[derive(Debug, Clone)]
pub struct NormalizationRecord {
    /// Box of the normalization ball B0 (contained in Omega_1).
    pub ball: Vec<(f64, f64)>,
    /// min over B0 of u, scaled to 1.
    pub min_over_ball: f64,
    /// Final negative-part truncation level.
    pub truncation: f64,
    /// sup over nodes of the suppressed tail (V- - min(V-, n_final)).
    pub suppressed_tail: f64,
    /// (m, n, lambda) per schedule step actually run.
    pub schedule: Vec<(usize, f64, f64)>,
}

/// Positive grid function with its residual vector mu = A u >= 0, the
/// discrete Riesz measure of the operator actually solved (the final
/// truncation level).
#[derive(Debug, Clone)]
pub struct Supersolution {
    pub u: GridFunction,
    /// A u, cell-volume scaled (measure units).
    pub residual: GridFunction,
    pub normalization: NormalizationRecord,
}

#[derive(Debug, Clone)]
pub struct AapOpts {
    pub eig: EigOpts,
    /// Tight tolerance for the final eigensolve feeding the residual.
    pub final_tol: f64,
    /// Early-stop threshold on the relative sup-change of u over Omega_1.
    pub stagnation_tol: f64,
    /// Abort threshold for negative level eigenvalues, relative to the
    /// pencil scale.
    pub negative_tol_rel: f64,
}

impl Default for AapOpts {
    fn default() -> Self {
        AapOpts {
            eig: EigOpts::default(),
            final_tol: 1e-10,
            stagnation_tol: 1e-4,
            negative_tol_rel: 1e-6,
        }
    }
}

/// Residual scale used by the `mu >= -1e-6 * scale` positivity contract.
pub fn residual_scale(form: &DiscreteForm, u: &GridFunction) -> f64 {
    form.pencil_scale() * form.cell_volume() * u.max_abs()
}

/// Build a positive supersolution by the exhaustion-and-truncation
/// schedule: per step, the principal eigenpair of Q on Omega_m with
/// potential V+ - min(V-, n), normalized so min over the fixed ball B0
/// inside Omega_1 equals 1.
pub fn construct_supersolution(
    field: &PotentialField,
    grid: &Grid,
    m_levels: usize,
    truncations: &[f64],
    opts: &AapOpts,
) -> Result<Supersolution, AapError> {
    if m_levels < 2 {
        return Err(AapError::TooFewLevels(m_levels));
    }
    if truncations.is_empty()
        || truncations.iter().any(|n| *n <= 0.0)
        || truncations.windows(2).any(|w| w[1] < w[0])
    {
        return Err(AapError::BadTruncations);
    }
    // nonnegativity evidence on the working grid
    let full_form = DiscreteForm::assemble(grid, field, &grid.full_mask())?;
    let eta = 1e-8 * full_form.pencil_scale();
    let base = principal_eig(&full_form, &opts.eig)?;
    if base.value < -eta && full_form.qv(&base.vector)? < 0.0 {
        return Err(AapError::NotNonnegative { lambda: base.value });
    }

    let omegas = grid.exhaustion(m_levels)?;
    // B0: centered box with half the span of Omega_1
    let ball: Vec<(f64, f64)> = (0..grid.dim())
        .map(|d| {
            let (a, b) = grid.extents()[d];
            let c = 0.5 * (a + b);
            let m = m_levels as f64;
            let omega1_half = 0.5 * (b - a) / m; // Omega_1 spans L/m centered
            (c - 0.5 * omega1_half, c + 0.5 * omega1_half)
        })
        .collect();
    let b0 = grid.compact_mask(&ball).map_err(|_| AapError::EmptyBall)?;

    // diagonal schedule over (Omega_m, n)
    let steps = m_levels.max(truncations.len());
    let mut schedule = Vec::with_capacity(steps);
    let mut u_prev: Option<GridFunction> = None;
    let mut result: Option<(GridFunction, DiscreteForm, f64)> = None;
    for s in 0..steps {
        let mi = s.min(m_levels - 1);
        let n = truncations[s.min(truncations.len() - 1)];
        let trunc = field.truncate_negative(n);
        let form = DiscreteForm::assemble(grid, &trunc, &omegas[mi])?;
        let last = s + 1 == steps;
        let mut eopts = opts.eig.clone();
        if last {
            eopts.tol = opts.final_tol;
        }
        let eig = principal_eig(&form, &eopts)?;
        let lambda = eig.value;
        if lambda < -opts.negative_tol_rel * form.pencil_scale() {
            return Err(AapError::NegativeLevel { m: mi + 1, n, lambda });
        }
        // positivity polish: one inverse-iteration application with an
        // SPD-safe shift orients and strictly positivizes the Perron vector
        let u = positivize(&form, &eig.vector, lambda, opts)?;
        // normalize: min over B0 = 1
        let minb0 = b0
            .iter_set()
            .map(|i| u.values()[i])
            .fold(f64::INFINITY, f64::min);
        if !(minb0 > 0.0) {
            return Err(AapError::NotPositive(
                b0.iter_set().find(|i| u.values()[*i] <= 0.0).unwrap_or(0),
            ));
        }
        let mut u = u;
        u.scale(1.0 / minb0);
        schedule.push((mi + 1, n, lambda));
        let stagnated = match &u_prev {
            Some(prev) => {
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for i in omegas[0].iter_set() {
                    num = num.max((u.values()[i] - prev.values()[i]).abs());
                    den = den.max(u.values()[i].abs());
                }
                num <= opts.stagnation_tol * den.max(1.0)
            }
            None => false,
        };
        u_prev = Some(u.clone());
        let final_n = n;
        if stagnated && s + 1 >= m_levels.min(steps) && !last {
            // rerun the eigensolve at the final tolerance before accepting
            let mut tight = opts.eig.clone();
            tight.tol = opts.final_tol;
            let eig2 = principal_eig(&form, &tight)?;
            let u2 = positivize(&form, &eig2.vector, eig2.value, opts)?;
            let minb = b0.iter_set().map(|i| u2.values()[i]).fold(f64::INFINITY, f64::min);
            let mut u2 = u2;
            u2.scale(1.0 / minb);
            result = Some((u2, form, final_n));
            break;
        }
        result = Some((u, form, final_n));
    }
    let (u, final_form, final_n) = result.expect("schedule ran at least once");
    // strict positivity on the final mask
    for i in final_form.mask().iter_set() {
        if u.values()[i] <= 0.0 {
            return Err(AapError::NotPositive(i));
        }
    }
    let mut mu = vec![0.0; grid.node_count()];
    final_form.apply(u.values(), &mut mu);
    let residual = GridFunction::new(grid.clone(), mu)?;
    let min_over_ball = b0.iter_set().map(|i| u.values()[i]).fold(f64::INFINITY, f64::min);
    let suppressed_tail = field
        .vminus()
        .iter()
        .map(|v| (v - final_n).max(0.0))
        .fold(0.0f64, f64::max);
    Ok(Supersolution {
        u,
        residual,
        normalization: NormalizationRecord {
            ball,
            min_over_ball,
            truncation: final_n,
            suppressed_tail,
            schedule,
        },
    })
}

/// One SPD-shifted inverse-iteration application: the inverse of an
/// irreducible M-matrix maps positive vectors to strictly positive ones,
/// which both orients the Perron vector and clears eigensolver-level
/// negative dust near the mask boundary.
fn positivize(
    form: &DiscreteForm,
    v: &GridFunction,
    lambda: f64,
    opts: &AapOpts,
) -> Result<GridFunction, AapError> {
    let n = form.grid().node_count();
    let mask = form.mask();
    let cv = form.cell_volume();
    // orient so the mean is positive
    let mean: f64 = mask.iter_set().map(|i| v.values()[i]).sum();
    let sgn = if mean >= 0.0 { 1.0 } else { -1.0 };
    let sigma = lambda - 1e-3 * form.pencil_scale().max(1.0);
    let shifted = |x: &[f64], y: &mut [f64]| {
        form.apply(x, y);
        for i in mask.iter_set() {
            y[i] -= sigma * cv * x[i];
        }
    };
    let mut diag = form.diag();
    for i in mask.iter_set() {
        diag[i] -= sigma * cv;
    }
    let rhs: Vec<f64> = (0..n)
        .map(|i| if mask.contains(i) { sgn * cv * v.values()[i] } else { 0.0 })
        .collect();
    let sol = cg_solve(shifted, &diag, mask, &rhs, 1e-12, 40 * (n + 100)).map_err(|e| {
        AapError::Spectral(SpectralError::Budget(e.iterations))
    })?;
    let mut out = sol.x;
    // M-normalize for a consistent scale before the B0 normalization
    let nrm: f64 = mask.iter_set().map(|i| out[i] * out[i] * cv).sum::<f64>().sqrt();
    for i in 0..n {
        if mask.contains(i) {
            out[i] /= nrm;
        } else {
            out[i] = 0.0;
        }
    }
    let _ = opts;
    Ok(GridFunction::new(form.grid().clone(), out)?)
}

#[derive(Debug, Clone)]
pub struct AapReport {
    /// Every battery member satisfied qv(xi) >= xi' M_w xi - slack.
    pub pointwise_ok: bool,
    /// Worst signed margin of qv(xi) - xi' M_w xi over the battery.
    pub worst_margin: f64,
    /// weighted_gap(form, M_w); +inf when w = 0.
    pub gap: f64,
    pub passed: bool,
}

pub const AAP_GAP_SLACK: f64 = 0.05;

/// Verify the AAP lower bound with weight w = h/u: battery check of
/// `qv(xi) >= sum (h_i/u_i) xi_i^2` plus `weighted_gap >= 1 - 0.05`.
/// `h` is in the same cell-integrated units as `Supersolution::residual`
/// and must not exceed it anywhere.
pub fn verify_aap(
    form: &DiscreteForm,
    sup: &Supersolution,
    h: &GridFunction,
    battery: &[GridFunction],
    opts: &AapOpts,
) -> Result<AapReport, AapError> {
    let grid = form.grid();
    if h.grid() != grid || sup.u.grid() != grid {
        return Err(AapError::ShapeMismatch);
    }
    let scale = residual_scale(form, &sup.u);
    for i in form.mask().iter_set() {
        if h.values()[i] < 0.0 {
            return Err(AapError::NegativeH(i));
        }
        if h.values()[i] > sup.residual.values()[i] + 1e-12 * scale.max(1e-300) {
            return Err(AapError::HExceedsResidual {
                node: i,
                h: h.values()[i],
                mu: sup.residual.values()[i],
            });
        }
    }
    // w in function (pencil) units: h is cell-integrated, so divide by cellvol
    let cv = grid.cell_volume();
    let wvals: Vec<f64> = (0..grid.node_count())
        .map(|i| {
            if form.mask().contains(i) && sup.u.values()[i] > 0.0 {
                (h.values()[i] / cv / sup.u.values()[i]).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let w = GridFunction::new(grid.clone(), wvals)?;
    let mw = MassMatrix::weighted(grid, &w)?;
    let mut pointwise_ok = true;
    let mut worst = f64::INFINITY;
    for xi in battery {
        let q = form.qv(xi)?;
        let m = mw.norm_sq(xi.values());
        let slack = AAP_GAP_SLACK * q.abs().max(m) + 1e-12 * scale.max(1e-300) * xi.l2_sq();
        let margin = q - m;
        worst = worst.min(margin + slack);
        if margin < -slack {
            pointwise_ok = false;
        }
    }
    if battery.is_empty() {
        worst = 0.0;
    }
    let gap = if mw.is_zero() {
        f64::INFINITY
    } else {
        weighted_gap(form, &mw, &opts.eig)?.mu
    };
    let passed = pointwise_ok && gap >= 1.0 - AAP_GAP_SLACK;
    Ok(AapReport { pointwise_ok, worst_margin: worst, gap, passed })
}

/// Discrete defect of the ground-state transform identity
/// `qv(xi) = sum (f_i/u_i) xi_i^2 + sum_faces |D xi - (xi/u) D u|^2 facevol`
/// for `f = A u` (cell-integrated units). Face values of xi/u are the mean
/// of the two nodal ratios; at Dirichlet faces the interior ratio is used
/// one-sidedly.
pub fn ground_state_transform(
    form: &DiscreteForm,
    u: &GridFunction,
    f: &GridFunction,
    xi: &GridFunction,
) -> Result<f64, AapError> {
    let grid = form.grid();
    if u.grid() != grid || f.grid() != grid || xi.grid() != grid {
        return Err(AapError::ShapeMismatch);
    }
    for i in form.mask().iter_set() {
        if u.values()[i] <= 0.0 {
            return Err(AapError::NonPositiveInput(i));
        }
    }
    let qv = form.qv(xi)?;
    let mut potential_term = 0.0f64;
    for i in form.mask().iter_set() {
        potential_term += f.values()[i] / u.values()[i] * xi.values()[i] * xi.values()[i];
    }
    // gradient-difference energy over faces
    let cv = grid.cell_volume();
    let mask = form.mask();
    let uv = u.values();
    let xv = xi.values();
    let mut grad_term = 0.0f64;
    for d in 0..grid.dim() {
        let stride = {
            let mut s = 1usize;
            for dd in 0..d {
                s *= grid.n()[dd];
            }
            s
        };
        let h = grid.h()[d];
        for lin in 0..grid.node_count() {
            let ix = grid.multi_index(lin);
            let inside = mask.contains(lin);
            // low-side boundary face
            if ix[d] == 0 && inside {
                let ratio = xv[lin] / uv[lin];
                let dxi = xv[lin] / h;
                let du = uv[lin] / h;
                grad_term += (dxi - ratio * du) * (dxi - ratio * du) * cv;
            }
            // high-side face
            let nb = if ix[d] + 1 < grid.n()[d] { Some(lin + stride) } else { None };
            match nb {
                Some(j) => {
                    let jin = mask.contains(j);
                    if !inside && !jin {
                        continue;
                    }
                    let (xa, ua) = if inside { (xv[lin], uv[lin]) } else { (0.0, 0.0) };
                    let (xb, ub) = if jin { (xv[j], uv[j]) } else { (0.0, 0.0) };
                    let ratio = if inside && jin {
                        0.5 * (xa / ua + xb / ub)
                    } else if inside {
                        xa / ua
                    } else {
                        xb / ub
                    };
                    let dxi = (xb - xa) / h;
                    let du = (ub - ua) / h;
                    grad_term += (dxi - ratio * du) * (dxi - ratio * du) * cv;
                }
                None => {
                    if inside {
                        let ratio = xv[lin] / uv[lin];
                        let dxi = -xv[lin] / h;
                        let du = -uv[lin] / h;
                        grad_term += (dxi - ratio * du) * (dxi - ratio * du) * cv;
                    }
                }
            }
        }
    }
    Ok(qv - potential_term - grad_term)
}

/// Noise floor for the Picone weight: face-ratio differences below this
/// times the local ratio magnitude are rounding dust (proportional inputs
/// produce exactly such dust) and flush to 0.
const PICONE_FLUSH: f64 = 1e-13;

/// Picone improvement weight `w = 1/4 |grad u1/u1 - grad u2/u2|^2`,
/// discretized with face-difference quotients against face-averaged values.
/// Only interior faces enter (supersolutions need not vanish on the
/// boundary); nodes next to the boundary use a 3-point one-sided
/// extrapolation of the face values where two interior faces exist.
pub fn picone_improve(u1: &GridFunction, u2: &GridFunction) -> Result<GridFunction, AapError> {
    if u1.grid() != u2.grid() {
        return Err(AapError::ShapeMismatch);
    }
    let grid = u1.grid().clone();
    for (i, (a, b)) in u1.values().iter().zip(u2.values()).enumerate() {
        if *a <= 0.0 || *b <= 0.0 {
            return Err(AapError::NonPositiveInput(i));
        }
    }
    let n = grid.node_count();
    let mut w = vec![0.0f64; n];
    for d in 0..grid.dim() {
        let stride = {
            let mut s = 1usize;
            for dd in 0..d {
                s *= grid.n()[dd];
            }
            s
        };
        let h = grid.h()[d];
        let nd = grid.n()[d];
        // face value of D u / u_bar per input, on the interior face whose
        // low node is lin
        let face_g = |v: &[f64], lin: usize| -> f64 {
            let du = (v[lin + stride] - v[lin]) / h;
            let ubar = 0.5 * (v[lin + stride] + v[lin]);
            du / ubar
        };
        let face_diff = |lin: usize| -> (f64, f64) {
            let g1 = face_g(u1.values(), lin);
            let g2 = face_g(u2.values(), lin);
            (g1 - g2, g1.abs() + g2.abs())
        };
        for lin in 0..n {
            let ix = grid.multi_index(lin);
            let has_left = ix[d] > 0;
            let has_right = ix[d] + 1 < nd;
            let (mean, gscale) = match (has_left, has_right) {
                (true, true) => {
                    let (a, sa) = face_diff(lin - stride);
                    let (b, sb) = face_diff(lin);
                    (0.5 * (a + b), sa.max(sb))
                }
                (false, true) => {
                    // extrapolate toward the low boundary from the two
                    // nearest interior faces when available
                    let (g0, s0) = face_diff(lin);
                    if ix[d] + 2 < nd {
                        let (g1, s1) = face_diff(lin + stride);
                        (1.5 * g0 - 0.5 * g1, s0.max(s1))
                    } else {
                        (g0, s0)
                    }
                }
                (true, false) => {
                    let (g0, s0) = face_diff(lin - stride);
                    if ix[d] >= 2 {
                        let (g1, s1) = face_diff(lin - 2 * stride);
                        (1.5 * g0 - 0.5 * g1, s0.max(s1))
                    } else {
                        (g0, s0)
                    }
                }
                (false, false) => (0.0, 0.0),
            };
            if mean.abs() > PICONE_FLUSH * gscale {
                w[lin] += 0.25 * mean * mean;
            }
        }
    }
    Ok(GridFunction::new(grid, w)?)
}

/// `weighted_gap(form, M_w) >= 1 - 0.05` for a Picone weight; rejects the
/// vacuous w = 0 (proportional inputs).
pub fn improvement_check(form: &DiscreteForm, w: &GridFunction, opts: &AapOpts) -> Result<(bool, f64), AapError> {
    if let Some(i) = w.values().iter().position(|v| *v < 0.0) {
        return Err(AapError::NegativeH(i));
    }
    if w.values().iter().all(|v| *v == 0.0) {
        return Err(AapError::VacuousWeight);
    }
    let mw = MassMatrix::weighted(form.grid(), w)?;
    let gap = weighted_gap(form, &mw, &opts.eig)?.mu;
    Ok((gap >= 1.0 - AAP_GAP_SLACK, gap))
}
