//! Catalog of singular potentials, cell sampling with singular-cell
//! quadrature, balance diagnostics and the oscillation probe.
//!
//! Cells are the closed boxes of half-spacing radius around interior nodes.
//! A cell is *singular* when a pole of the potential lies inside it; such
//! cells receive the cell average instead of the midpoint sample. Averages
//! of `1/|x-p|^2` poles in 3D are computed by an exact pyramid (Duffy)
//! split; other integrable singularities use adaptive dyadic subdivision
//! (depth <= 12, relative tolerance 1e-6).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::form::DiscreteForm;
use crate::mesh::{Grid, GridFunction, Mask, MeshError, MAX_DIM};

/// Sharp Hardy constant `H_N = ((N-2)/2)^2`.
pub fn hardy_constant(dim: usize) -> f64 {
    let n = dim as f64;
    ((n - 2.0) / 2.0) * ((n - 2.0) / 2.0)
}

pub const SINGULAR_QUAD_TOL: f64 = 1e-6;
pub const SINGULAR_QUAD_MAX_DEPTH: u32 = 12;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("hardy constant must be positive, got {0}")]
    NonPositiveHardy(f64),
    #[error("pole at {pole:?} lies inside a grid cell: |x|^-2 is not locally integrable in dim {dim}")]
    NonIntegrablePole { dim: usize, pole: Vec<f64> },
    #[error("dense pole series needs weights a_i >= 0 with sum <= H_N = {hn}, got sum {sum}")]
    DensePoleWeights { sum: f64, hn: f64 },
    #[error("dense pole truncation {m} exceeds series length {len}")]
    BadTruncation { m: usize, len: usize },
    #[error("sigma_alpha requires 0 < c <= H_N/4 and 2-N < alpha < 0, got c={c}, alpha={alpha}, N={dim}")]
    SigmaAlphaRange { c: f64, alpha: f64, dim: usize },
    #[error("orlicz construction requires N=3, p in (6,8) and 3/p < gamma < 1/2, got gamma={gamma}, p={p}")]
    OrliczRange { gamma: f64, p: f64 },
    #[error("bump construction requires rho exponent q > -1 and positive shift, got q={q}, shift={shift}")]
    BumpRange { q: f64, shift: f64 },
    #[error("ground function must be positive at every interior node (node {0})")]
    NonPositiveGround(usize),
    #[error("f must be nonnegative (node {0})")]
    NegativeSource(usize),
    #[error("shape mismatch")]
    ShapeMismatch,
    #[error("battery is empty (or vacuous: every member has zero weighted mass on K)")]
    VacuousBattery,
    #[error("K must be contained in U")]
    KNotInU,
    #[error("oscillation probe requires 2-N < alpha < 0, (2-N)/2 < beta < 0 for N = 3")]
    OscillationRange,
    #[error("epsilon schedule must be strictly decreasing and positive")]
    BadSchedule,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Catalog entry describing a potential; parsed from the config tree with a
/// `variant` discriminator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PotentialSpec {
    Constant { c: f64 },
    Hardy { center: Vec<f64>, c: f64 },
    Multipolar { poles: Vec<Pole> },
    DensePoleSeries { centers: Vec<Vec<f64>>, weights: Vec<f64>, truncation: usize },
    SigmaAlpha { c: f64, alpha: f64 },
    DivergenceForm { field: FieldSpec },
    FromGround { u_path: String, f_path: String },
    Orlicz { gamma: f64, p: f64 },
    Bump1d { rho_exponent: f64, shift: f64, f: f64 },
    /// V = -factor * lambda_1^h(-Delta on this grid): the grid-adapted
    /// deflation shift (factor = 1 puts the pencil bottom at zero exactly).
    LambdaShift { factor: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Pole {
    pub center: Vec<f64>,
    pub weight: f64,
}

/// Named vector fields for the divergence-form route.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldSpec {
    /// F_d(x) = coeffs[d] * x_d
    Linear { coeffs: Vec<f64> },
    /// F_d(x) = coeffs[d] * |x - centers[d]|^{-powers[d]}
    InversePower { centers: Vec<Vec<f64>>, powers: Vec<f64>, coeffs: Vec<f64> },
}

/// Cellwise samples of V split into nonnegative parts with disjoint support.
#[derive(Debug, Clone)]
pub struct PotentialField {
    vplus: Vec<f64>,
    vminus: Vec<f64>,
    singular_cells: Vec<usize>,
    /// For truncated dense-pole series: upper bound on the omitted mass,
    /// `sum_{i>m} a_i * sup_nodes |x - x_i|^{-2}`.
    tail_bound: Option<f64>,
    /// Nodes flagged by from_ground as boundary-adjacent (FD Laplacian there
    /// uses the implicit zero extension and should be masked downstream).
    flagged: Vec<usize>,
}

impl PotentialField {
    /// Build a field from explicit per-node values of V, split into the
    /// nonnegative parts.
    pub fn from_node_values(values: Vec<f64>) -> PotentialField {
        let mut vplus = Vec::with_capacity(values.len());
        let mut vminus = Vec::with_capacity(values.len());
        for v in values {
            vplus.push(v.max(0.0));
            vminus.push((-v).max(0.0));
        }
        PotentialField { vplus, vminus, singular_cells: Vec::new(), tail_bound: None, flagged: Vec::new() }
    }

    fn from_values(values: Vec<f64>) -> PotentialField {
        PotentialField::from_node_values(values)
    }

    pub fn zero(grid: &Grid) -> PotentialField {
        PotentialField::from_values(vec![0.0; grid.node_count()])
    }

    pub fn constant(grid: &Grid, c: f64) -> PotentialField {
        PotentialField::from_values(vec![c; grid.node_count()])
    }

    pub fn len(&self) -> usize {
        self.vplus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vplus.is_empty()
    }

    pub fn vplus(&self) -> &[f64] {
        &self.vplus
    }

    pub fn vminus(&self) -> &[f64] {
        &self.vminus
    }

    pub fn value(&self, i: usize) -> f64 {
        self.vplus[i] - self.vminus[i]
    }

    pub fn singular_cells(&self) -> &[usize] {
        &self.singular_cells
    }

    pub fn tail_bound(&self) -> Option<f64> {
        self.tail_bound
    }

    pub fn flagged_nodes(&self) -> &[usize] {
        &self.flagged
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.len()).fold(0.0f64, |m, i| m.max(self.vplus[i].max(self.vminus[i])))
    }

    /// V with the negative part truncated at level n: V+ - min(V-, n).
    pub fn truncate_negative(&self, n: f64) -> PotentialField {
        assert!(n >= 0.0);
        PotentialField {
            vplus: self.vplus.clone(),
            vminus: self.vminus.iter().map(|v| v.min(n)).collect(),
            singular_cells: self.singular_cells.clone(),
            tail_bound: self.tail_bound,
            flagged: self.flagged.clone(),
        }
    }

    pub fn max_vminus(&self) -> f64 {
        self.vminus.iter().fold(0.0f64, |m, v| m.max(*v))
    }
}

/// Evaluate a catalog entry on a grid. Deterministic: identical spec and
/// grid give bitwise-identical fields.
pub fn eval_catalog(spec: &PotentialSpec, grid: &Grid) -> Result<PotentialField, PotentialError> {
    match spec {
        PotentialSpec::Constant { c } => Ok(PotentialField::constant(grid, *c)),
        PotentialSpec::Hardy { center, c } => {
            if *c <= 0.0 {
                return Err(PotentialError::NonPositiveHardy(*c));
            }
            check_center_dim(center, grid)?;
            pole_field(grid, &[(center.clone(), *c)], None)
        }
        PotentialSpec::Multipolar { poles } => {
            for p in poles {
                check_center_dim(&p.center, grid)?;
            }
            let ps: Vec<(Vec<f64>, f64)> = poles.iter().map(|p| (p.center.clone(), p.weight)).collect();
            pole_field(grid, &ps, None)
        }
        PotentialSpec::DensePoleSeries { centers, weights, truncation } => {
            if weights.len() != centers.len() {
                return Err(PotentialError::ShapeMismatch);
            }
            let hn = hardy_constant(grid.dim());
            let sum: f64 = weights.iter().sum();
            if weights.iter().any(|a| *a < 0.0) || sum > hn + 1e-12 {
                return Err(PotentialError::DensePoleWeights { sum, hn });
            }
            let m = *truncation;
            if m > centers.len() {
                return Err(PotentialError::BadTruncation { m, len: centers.len() });
            }
            for c in centers {
                check_center_dim(c, grid)?;
            }
            let kept: Vec<(Vec<f64>, f64)> =
                centers[..m].iter().cloned().zip(weights[..m].iter().copied()).collect();
            // tail bound: sum_{i>m} a_i * sup over nodes of |x - x_i|^{-2}
            let mut tail = 0.0f64;
            for i in m..centers.len() {
                let mut sup: f64 = 0.0;
                for lin in 0..grid.node_count() {
                    let x = grid.node_coords(lin);
                    let mut d2 = 0.0;
                    for d in 0..grid.dim() {
                        d2 += (x[d] - centers[i][d]) * (x[d] - centers[i][d]);
                    }
                    if d2 > 0.0 {
                        sup = sup.max(1.0 / d2);
                    } else {
                        sup = f64::INFINITY;
                    }
                }
                tail += weights[i] * sup;
            }
            pole_field(grid, &kept, Some(tail))
        }
        PotentialSpec::SigmaAlpha { c, alpha } => {
            let n = grid.dim();
            let hn = hardy_constant(n);
            if !(*c > 0.0 && *c <= hn / 4.0 + 1e-15 && *alpha > 2.0 - n as f64 && *alpha < 0.0) {
                return Err(PotentialError::SigmaAlphaRange { c: *c, alpha: *alpha, dim: n });
            }
            let sc = c.sqrt();
            let al = *alpha;
            let f = move |x: &[f64]| sigma_alpha_value(sc, al, x);
            // singular at the origin only
            let sing: Vec<usize> = cells_containing_point(grid, &vec![0.0; n]);
            sampled_field(grid, &f, &sing)
        }
        PotentialSpec::DivergenceForm { field } => {
            let (components, poles) = field_samples(field, grid)?;
            divergence_form(&components, grid, &poles)
        }
        PotentialSpec::FromGround { u_path, f_path } => {
            let u = GridFunction::read_text(std::fs::File::open(u_path).map_err(MeshError::Io)?)?;
            let f = GridFunction::read_text(std::fs::File::open(f_path).map_err(MeshError::Io)?)?;
            from_ground(&u, &f)
        }
        PotentialSpec::Orlicz { gamma, p } => orlicz_supercritical(*gamma, *p, grid),
        PotentialSpec::LambdaShift { factor } => {
            let lam = crate::form::fd_laplacian_lambda1(grid);
            Ok(PotentialField::constant(grid, -factor * lam))
        }
        PotentialSpec::Bump1d { rho_exponent, shift, f } => {
            let q = *rho_exponent;
            let k = *shift;
            if q <= -1.0 || k <= 0.0 {
                return Err(PotentialError::BumpRange { q, shift: k });
            }
            if f.is_sign_negative() {
                return Err(PotentialError::NegativeSource(0));
            }
            let ff = *f;
            // w(x1) = x1^{q+2} / ((q+1)(q+2)); V = (x1^q + f) / (w + k)
            let func = move |x: &[f64]| {
                let x1 = x[0];
                let w = x1.powf(q + 2.0) / ((q + 1.0) * (q + 2.0));
                (x1.powf(q) + ff) / (w + k)
            };
            sampled_field(grid, &func, &[])
        }
    }
}

/// sigma_alpha(x) = sqrt(c) x_1 (alpha |x|^{alpha-3} cos|x|^alpha - sin(|x|^alpha) |x|^{-3})
fn sigma_alpha_value(sqrt_c: f64, alpha: f64, x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    if r2 == 0.0 {
        return f64::INFINITY;
    }
    let r = r2.sqrt();
    let ra = r.powf(alpha);
    sqrt_c * x[0] * (alpha * r.powf(alpha - 3.0) * ra.cos() - ra.sin() / (r * r2))
}

fn check_center_dim(center: &[f64], grid: &Grid) -> Result<(), PotentialError> {
    if center.len() != grid.dim() {
        return Err(PotentialError::ShapeMismatch);
    }
    Ok(())
}

/// Linear indices of interior nodes whose closed cell contains the point.
fn cells_containing_point(grid: &Grid, p: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    for lin in 0..grid.node_count() {
        let x = grid.node_coords(lin);
        let mut inside = true;
        for d in 0..grid.dim() {
            if (p[d] - x[d]).abs() > grid.h()[d] / 2.0 + 1e-14 * grid.h()[d] {
                inside = false;
                break;
            }
        }
        if inside {
            out.push(lin);
        }
    }
    out
}

/// Field of `-sum_i a_i |x - p_i|^{-2}` with Duffy cell averages at pole
/// cells (3D). In dim 1 and 2 a pole inside any closed cell is rejected:
/// the cell average does not exist there.
fn pole_field(
    grid: &Grid,
    poles: &[(Vec<f64>, f64)],
    tail: Option<f64>,
) -> Result<PotentialField, PotentialError> {
    let dim = grid.dim();
    let mut singular: Vec<usize> = Vec::new();
    for (p, _) in poles {
        let cells = cells_containing_point(grid, p);
        if !cells.is_empty() && dim < 3 {
            return Err(PotentialError::NonIntegrablePole { dim, pole: p.clone() });
        }
        singular.extend(cells);
    }
    singular.sort_unstable();
    singular.dedup();

    let nc = grid.node_count();
    let values: Vec<f64> = (0..nc)
        .into_par_iter()
        .map(|lin| {
            let x = grid.node_coords(lin);
            if singular.binary_search(&lin).is_ok() {
                // cell average: Duffy for poles inside this cell, adaptive
                // midpoint for the finite remainder
                let lo: Vec<f64> = (0..dim).map(|d| x[d] - grid.h()[d] / 2.0).collect();
                let hi: Vec<f64> = (0..dim).map(|d| x[d] + grid.h()[d] / 2.0).collect();
                let cellvol: f64 = (0..dim).map(|d| hi[d] - lo[d]).product();
                let mut acc = 0.0;
                let mut inside_idx = Vec::new();
                for (i, (p, a)) in poles.iter().enumerate() {
                    let inside = (0..dim).all(|d| p[d] >= lo[d] - 1e-14 && p[d] <= hi[d] + 1e-14);
                    if inside {
                        acc += -a * duffy_inv_r2_box_integral(&lo, &hi, p);
                        inside_idx.push(i);
                    }
                }
                // smooth remainder over this cell
                let rest = |y: &[f64]| {
                    let mut v = 0.0;
                    for (i, (p, a)) in poles.iter().enumerate() {
                        if inside_idx.contains(&i) {
                            continue;
                        }
                        let d2: f64 = (0..dim).map(|d| (y[d] - p[d]) * (y[d] - p[d])).sum();
                        v += -a / d2;
                    }
                    v
                };
                acc += adaptive_box_integral(&lo, &hi, &rest, SINGULAR_QUAD_TOL, SINGULAR_QUAD_MAX_DEPTH);
                acc / cellvol
            } else {
                let mut v = 0.0;
                for (p, a) in poles {
                    let d2: f64 = (0..dim).map(|d| (x[d] - p[d]) * (x[d] - p[d])).sum();
                    v += -a / d2;
                }
                v
            }
        })
        .collect();
    let mut field = PotentialField::from_values(values);
    field.singular_cells = singular;
    field.tail_bound = tail;
    Ok(field)
}

/// Midpoint sampling with adaptive cell averages on listed singular cells.
fn sampled_field(
    grid: &Grid,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    singular: &[usize],
) -> Result<PotentialField, PotentialError> {
    let dim = grid.dim();
    let nc = grid.node_count();
    let mut sing: Vec<usize> = singular.to_vec();
    sing.sort_unstable();
    sing.dedup();
    let values: Vec<f64> = (0..nc)
        .into_par_iter()
        .map(|lin| {
            let x = grid.node_coords(lin);
            if sing.binary_search(&lin).is_ok() {
                let lo: Vec<f64> = (0..dim).map(|d| x[d] - grid.h()[d] / 2.0).collect();
                let hi: Vec<f64> = (0..dim).map(|d| x[d] + grid.h()[d] / 2.0).collect();
                let cellvol: f64 = (0..dim).map(|d| hi[d] - lo[d]).product();
                adaptive_box_integral(&lo, &hi, f, SINGULAR_QUAD_TOL, SINGULAR_QUAD_MAX_DEPTH) / cellvol
            } else {
                f(&x[..dim])
            }
        })
        .collect();
    let mut field = PotentialField::from_values(values);
    field.singular_cells = sing;
    Ok(field)
}

/// Exact-to-tolerance integral of `1/|x-p|^2` over a 3D box containing p,
/// by the pyramid split: the radial integral collapses and each face
/// contributes `d_F * int_F |y-p|^{-2} dA`, a smooth 2D integral.
fn duffy_inv_r2_box_integral(lo: &[f64], hi: &[f64], p: &[f64]) -> f64 {
    debug_assert_eq!(lo.len(), 3);
    let mut total = 0.0;
    for d in 0..3 {
        for &side in &[lo[d], hi[d]] {
            let df = (side - p[d]).abs();
            if df < 1e-15 * (hi[d] - lo[d]) {
                continue; // degenerate pyramid
            }
            let (u, v) = match d {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            // 2D integral of 1/(df^2 + (yu-pu)^2 + (yv-pv)^2) over the face
            let fu = (lo[u] - p[u], hi[u] - p[u]);
            let fv = (lo[v] - p[v], hi[v] - p[v]);
            let g = |a: f64, b: f64| 1.0 / (df * df + a * a + b * b);
            let face = adaptive_rect_integral(fu.0, fu.1, fv.0, fv.1, &g, 1e-9, 24);
            total += df * face;
        }
    }
    total
}

const GAUSS2: f64 = 0.577_350_269_189_625_7; // 1/sqrt(3)

/// Tensor 2-point Gauss rule on an N-box. Returns NaN when any node value
/// is non-finite.
fn gauss2_box(lo: &[f64], hi: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let dim = lo.len();
    let vol: f64 = (0..dim).map(|d| hi[d] - lo[d]).product();
    let nodes = 1usize << dim;
    let mut s = 0.0;
    let mut x = vec![0.0; dim];
    for c in 0..nodes {
        for d in 0..dim {
            let cc = 0.5 * (lo[d] + hi[d]);
            let r = 0.5 * (hi[d] - lo[d]);
            x[d] = cc + if c >> d & 1 == 0 { -GAUSS2 * r } else { GAUSS2 * r };
        }
        let v = f(&x);
        if !v.is_finite() {
            return f64::NAN;
        }
        s += v;
    }
    s * vol / nodes as f64
}

struct QuadBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    depth: u32,
    value: f64,
    err: f64,
}

impl PartialEq for QuadBox {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for QuadBox {}
impl PartialOrd for QuadBox {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QuadBox {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive dyadic-subdivision integral over an N-box: Gauss-2
/// values with a midpoint-difference error indicator, always refining the
/// worst box, until the summed indicator meets the relative tolerance or
/// every active box reaches the depth cap. Boxes whose rule values are
/// non-finite (a pole at a quadrature node) refine first and contribute 0
/// at the cap.
fn adaptive_box_integral(
    lo: &[f64],
    hi: &[f64],
    f: &dyn Fn(&[f64]) -> f64,
    rel_tol: f64,
    max_depth: u32,
) -> f64 {
    use std::collections::BinaryHeap;
    let dim = lo.len();
    let eval = |lo: &[f64], hi: &[f64], depth: u32| -> QuadBox {
        let g = gauss2_box(lo, hi, f);
        let mid: Vec<f64> = (0..dim).map(|d| 0.5 * (lo[d] + hi[d])).collect();
        let vol: f64 = (0..dim).map(|d| hi[d] - lo[d]).product();
        let fm = f(&mid);
        let m = if fm.is_finite() { fm * vol } else { f64::NAN };
        let (value, err) = if g.is_finite() && m.is_finite() {
            (g, (g - m).abs())
        } else if g.is_finite() {
            (g, f64::INFINITY)
        } else if m.is_finite() {
            (m, f64::INFINITY)
        } else {
            (0.0, f64::INFINITY)
        };
        QuadBox { lo: lo.to_vec(), hi: hi.to_vec(), depth, value, err }
    };
    let root = eval(lo, hi, 0);
    let mut value_sum = root.value;
    let mut err_sum = root.err;
    let mut heap: BinaryHeap<QuadBox> = BinaryHeap::new();
    heap.push(root);
    let max_splits = 200_000usize;
    for _ in 0..max_splits {
        if err_sum <= rel_tol * value_sum.abs().max(1e-300) {
            break;
        }
        let worst = match heap.pop() {
            Some(b) if b.err > 0.0 => b,
            _ => break,
        };
        if worst.depth >= max_depth {
            // freeze: its value stands, its indicator is written off
            err_sum -= worst.err;
            if !err_sum.is_finite() {
                // re-derive after removing an infinite indicator
                err_sum = heap.iter().map(|b| b.err).sum();
            }
            continue;
        }
        err_sum -= worst.err;
        value_sum -= worst.value;
        if !err_sum.is_finite() {
            err_sum = heap.iter().map(|b| b.err).sum();
        }
        let mid: Vec<f64> = (0..dim).map(|d| 0.5 * (worst.lo[d] + worst.hi[d])).collect();
        let children = 1usize << dim;
        let mut clo = vec![0.0; dim];
        let mut chi = vec![0.0; dim];
        for c in 0..children {
            for d in 0..dim {
                if c >> d & 1 == 0 {
                    clo[d] = worst.lo[d];
                    chi[d] = mid[d];
                } else {
                    clo[d] = mid[d];
                    chi[d] = worst.hi[d];
                }
            }
            let child = eval(&clo, &chi, worst.depth + 1);
            value_sum += child.value;
            err_sum += child.err;
            heap.push(child);
        }
    }
    value_sum
}

/// Adaptive Gauss quadrature over a 2D rectangle (same global scheme).
fn adaptive_rect_integral(
    u0: f64,
    u1: f64,
    v0: f64,
    v1: f64,
    f: &dyn Fn(f64, f64) -> f64,
    rel_tol: f64,
    max_depth: u32,
) -> f64 {
    let g = move |x: &[f64]| f(x[0], x[1]);
    adaptive_box_integral(&[u0, v0], &[u1, v1], &g, rel_tol, max_depth)
}

/// V = (Delta_h u + f)/u nodewise. Boundary-adjacent nodes are flagged:
/// there the FD Laplacian sees the implicit zero extension, which is wrong
/// for a ground function that does not vanish on the boundary.
pub fn from_ground(u: &GridFunction, f: &GridFunction) -> Result<PotentialField, PotentialError> {
    if u.grid() != f.grid() {
        return Err(PotentialError::ShapeMismatch);
    }
    let grid = u.grid();
    let uv = u.values();
    if let Some(i) = uv.iter().position(|v| *v <= 0.0) {
        return Err(PotentialError::NonPositiveGround(i));
    }
    if let Some(i) = f.values().iter().position(|v| *v < 0.0) {
        return Err(PotentialError::NegativeSource(i));
    }
    let dim = grid.dim();
    let nd = grid.n();
    let mut values = vec![0.0; grid.node_count()];
    let mut flagged = Vec::new();
    for lin in 0..grid.node_count() {
        let ix = grid.multi_index(lin);
        let mut lap = 0.0;
        let mut boundary_adjacent = false;
        for d in 0..dim {
            let stride = {
                let mut s = 1usize;
                for dd in 0..d {
                    s *= nd[dd];
                }
                s
            };
            let h2 = grid.h()[d] * grid.h()[d];
            let left = if ix[d] > 0 {
                uv[lin - stride]
            } else {
                boundary_adjacent = true;
                0.0
            };
            let right = if ix[d] + 1 < nd[d] {
                uv[lin + stride]
            } else {
                boundary_adjacent = true;
                0.0
            };
            lap += (left - 2.0 * uv[lin] + right) / h2;
        }
        values[lin] = (lap + f.values()[lin]) / uv[lin];
        if boundary_adjacent {
            flagged.push(lin);
        }
    }
    let mut field = PotentialField::from_values(values);
    field.flagged = flagged;
    Ok(field)
}

/// V0 = div_h F + |F|^2 with centered differences; `poles` marks cells whose
/// closed cell contains a singular point of F.
pub fn divergence_form(
    components: &[GridFunction],
    grid: &Grid,
    poles: &[Vec<f64>],
) -> Result<PotentialField, PotentialError> {
    if components.len() != grid.dim() {
        return Err(PotentialError::ShapeMismatch);
    }
    for c in components {
        if c.grid() != grid {
            return Err(PotentialError::ShapeMismatch);
        }
    }
    let dim = grid.dim();
    let nd = grid.n();
    let mut values = vec![0.0; grid.node_count()];
    for lin in 0..grid.node_count() {
        let ix = grid.multi_index(lin);
        let mut div = 0.0;
        let mut norm2 = 0.0;
        for d in 0..dim {
            let stride = {
                let mut s = 1usize;
                for dd in 0..d {
                    s *= nd[dd];
                }
                s
            };
            let fv = components[d].values();
            let left = if ix[d] > 0 { fv[lin - stride] } else { 0.0 };
            let right = if ix[d] + 1 < nd[d] { fv[lin + stride] } else { 0.0 };
            div += (right - left) / (2.0 * grid.h()[d]);
            norm2 += fv[lin] * fv[lin];
        }
        values[lin] = div + norm2;
    }
    let mut singular = Vec::new();
    for p in poles {
        singular.extend(cells_containing_point(grid, p));
    }
    singular.sort_unstable();
    singular.dedup();
    let mut field = PotentialField::from_values(values);
    field.singular_cells = singular;
    Ok(field)
}

fn field_samples(spec: &FieldSpec, grid: &Grid) -> Result<(Vec<GridFunction>, Vec<Vec<f64>>), PotentialError> {
    let dim = grid.dim();
    match spec {
        FieldSpec::Linear { coeffs } => {
            if coeffs.len() != dim {
                return Err(PotentialError::ShapeMismatch);
            }
            let comps = (0..dim)
                .map(|d| {
                    let c = coeffs[d];
                    GridFunction::from_fn(grid, move |x| c * x[d])
                })
                .collect();
            Ok((comps, Vec::new()))
        }
        FieldSpec::InversePower { centers, powers, coeffs } => {
            if centers.len() != dim || powers.len() != dim || coeffs.len() != dim {
                return Err(PotentialError::ShapeMismatch);
            }
            for c in centers {
                check_center_dim(c, grid)?;
            }
            let mut comps = Vec::with_capacity(dim);
            for d in 0..dim {
                let center = centers[d].clone();
                let pw = powers[d];
                let c = coeffs[d];
                comps.push(GridFunction::from_fn(grid, move |x| {
                    let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                    if r2 == 0.0 {
                        0.0
                    } else {
                        c * r2.sqrt().powf(-pw)
                    }
                }));
            }
            Ok((comps, centers.clone()))
        }
    }
}

/// Supercritical construction from the Orlicz route: w = |x|^{-gamma} - 1
/// clipped at 0 outside the unit ball, V = -(max(w,0))^{p-2}.
pub fn orlicz_supercritical(gamma: f64, p: f64, grid: &Grid) -> Result<PotentialField, PotentialError> {
    if grid.dim() != 3 || !(p > 6.0 && p < 8.0) || !(gamma > 3.0 / p && gamma < 0.5) {
        return Err(PotentialError::OrliczRange { gamma, p });
    }
    let f = move |x: &[f64]| {
        let r: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r >= 1.0 {
            return 0.0;
        }
        if r == 0.0 {
            return f64::NEG_INFINITY;
        }
        let w = r.powf(-gamma) - 1.0;
        -(w.max(0.0)).powf(p - 2.0)
    };
    let sing = cells_containing_point(grid, &[0.0, 0.0, 0.0]);
    sampled_field(grid, &f, &sing)
}

/// Outcome of a strong-balance probe over a finite battery.
#[derive(Debug, Clone)]
pub struct BalanceReport {
    /// Empirical infimum of (sqrt(Q_V(xi)) + int_U |xi|) / int_K V+ |xi|.
    pub best_constant_estimate: f64,
    pub battery_size: usize,
    pub verdict: BalanceVerdict,
}

#[derive(Debug, Clone)]
pub enum BalanceVerdict {
    /// Empirical lower bound stayed above the violation threshold. Evidence
    /// only: a finite battery cannot prove the balance inequality.
    PlausiblyBalanced,
    /// A battery member drove the ratio below the threshold.
    ViolationWitness(GridFunction),
}

pub const BALANCE_VIOLATION_THRESHOLD: f64 = 1e-2;

/// Probe the strong-balance inequality `c int_K V+ |xi| <= sqrt(Q_V(xi)) +
/// int_U |xi|` over a battery. Members with zero denominator are skipped.
pub fn balance_probe(
    field: &PotentialField,
    grid: &Grid,
    k: &Mask,
    u: &Mask,
    battery: &[GridFunction],
) -> Result<BalanceReport, PotentialError> {
    if !k.is_subset_of(u) {
        return Err(PotentialError::KNotInU);
    }
    if battery.is_empty() {
        return Err(PotentialError::VacuousBattery);
    }
    let form = DiscreteForm::assemble(grid, field, &grid.full_mask())
        .map_err(|_| PotentialError::ShapeMismatch)?;
    let cv = grid.cell_volume();
    let mut best: Option<(f64, &GridFunction)> = None;
    let mut used = 0usize;
    for xi in battery {
        if xi.grid() != grid {
            return Err(PotentialError::ShapeMismatch);
        }
        let denom: f64 = k.iter_set().map(|i| field.vplus()[i] * xi.values()[i].abs()).sum::<f64>() * cv;
        if denom <= 0.0 {
            continue;
        }
        used += 1;
        let q = form.qv(xi).map_err(|_| PotentialError::ShapeMismatch)?;
        let num = q.max(0.0).sqrt() + xi.l1_on(u);
        let ratio = num / denom;
        if best.as_ref().map_or(true, |(b, _)| ratio < *b) {
            best = Some((ratio, xi));
        }
    }
    let (est, witness) = best.ok_or(PotentialError::VacuousBattery)?;
    let verdict = if est <= BALANCE_VIOLATION_THRESHOLD {
        BalanceVerdict::ViolationWitness(witness.clone())
    } else {
        BalanceVerdict::PlausiblyBalanced
    };
    Ok(BalanceReport { best_constant_estimate: est, battery_size: used, verdict })
}

/// Built-in battery: spikes (1 - k|x-x0|)+ centered in K across dyadic
/// slopes, plus seeded smooth cos^2 bumps.
pub fn spike_battery(grid: &Grid, k: &Mask, seed: u64, bumps: usize) -> Vec<GridFunction> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim();
    let mut centers: Vec<[f64; MAX_DIM]> = Vec::new();
    // centroid of K
    let mut centroid = [0.0f64; MAX_DIM];
    for lin in k.iter_set() {
        let x = grid.node_coords(lin);
        for d in 0..dim {
            centroid[d] += x[d];
        }
    }
    for d in 0..dim {
        centroid[d] /= k.count() as f64;
    }
    centers.push(centroid);
    let knodes: Vec<usize> = k.iter_set().collect();
    for _ in 0..3 {
        let lin = knodes[rng.random_range(0..knodes.len())];
        centers.push(grid.node_coords(lin));
    }
    let hmin = grid.h().iter().cloned().fold(f64::INFINITY, f64::min);
    let diam: f64 = grid
        .extents()
        .iter()
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    let mut battery = Vec::new();
    for c in &centers {
        let mut kslope = 2.0 / diam;
        while kslope <= 1.0 / hmin {
            let cc = *c;
            battery.push(GridFunction::from_fn(grid, move |x| {
                let r: f64 = x.iter().zip(&cc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (1.0 - kslope * r).max(0.0)
            }));
            kslope *= 2.0;
        }
    }
    for _ in 0..bumps {
        let lin = knodes[rng.random_range(0..knodes.len())];
        let c = grid.node_coords(lin);
        let mut widths = [0.0f64; MAX_DIM];
        for d in 0..dim {
            let (a, b) = grid.extents()[d];
            widths[d] = (b - a) * rng.random_range(0.08..0.5);
        }
        battery.push(GridFunction::from_fn(grid, move |x| {
            let mut v = 1.0;
            for d in 0..x.len() {
                let t = (x[d] - c[d]) / widths[d];
                if t.abs() >= 1.0 {
                    return 0.0;
                }
                let w = (std::f64::consts::FRAC_PI_2 * t).cos();
                v *= w * w;
            }
            v
        }));
    }
    battery
}

/// Divergence-rate fit for `int_{eps<|x|<1} |sigma_alpha w_beta|` with
/// `w_beta = |x|^beta - 1`, by grid-free radial quadrature (N = 3).
#[derive(Debug, Clone, Serialize)]
pub struct OscillationReport {
    /// (eps, I(eps)) pairs.
    pub intensities: Vec<(f64, f64)>,
    /// Fitted slope of log I against log(1/eps).
    pub slope: f64,
    /// slope >= threshold: evidence of non-integrability.
    pub divergent: bool,
    pub slope_threshold: f64,
}

pub const OSCILLATION_SLOPE_THRESHOLD: f64 = 0.05;

pub fn oscillation_probe(
    c: f64,
    alpha: f64,
    beta: f64,
    eps_schedule: &[f64],
) -> Result<OscillationReport, PotentialError> {
    let n = 3.0;
    if !(alpha > 2.0 - n && alpha < 0.0 && beta > (2.0 - n) / 2.0 && beta < 0.0 && c > 0.0) {
        return Err(PotentialError::OscillationRange);
    }
    if eps_schedule.is_empty()
        || eps_schedule.iter().any(|e| *e <= 0.0 || *e >= 1.0)
        || eps_schedule.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(PotentialError::BadSchedule);
    }
    // I(eps) = sqrt(c) * A_3 * (1/|alpha|) *
    //          int_1^{eps^alpha} |alpha t cos t - sin t| (t^{beta/alpha} - 1) t^{1/alpha - 1} dt
    let a3 = 2.0 * std::f64::consts::PI; // int_{S^2} |omega_1| dOmega
    let pref = c.sqrt() * a3 / alpha.abs();
    let integrand = |t: f64| -> f64 {
        (alpha * t * t.cos() - t.sin()).abs() * (t.powf(beta / alpha) - 1.0) * t.powf(1.0 / alpha - 1.0)
    };
    let mut points = Vec::with_capacity(eps_schedule.len());
    for &eps in eps_schedule {
        let tmax = eps.powf(alpha);
        // integrate over pi/2 panels (kinks of |.| live near tan t = alpha t)
        let mut acc = 0.0;
        let mut t0 = 1.0f64;
        let step = std::f64::consts::FRAC_PI_2;
        while t0 < tmax {
            let t1 = (t0 + step).min(tmax);
            acc += adaptive_simpson(&integrand, t0, t1, 1e-10, 28);
            t0 = t1;
        }
        points.push((eps, pref * acc));
    }
    // least squares of ln I against ln(1/eps)
    let xs: Vec<f64> = points.iter().map(|(e, _)| (1.0 / e).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, i)| i.max(1e-300).ln()).collect();
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    Ok(OscillationReport {
        intensities: points,
        slope,
        divergent: slope >= OSCILLATION_SLOPE_THRESHOLD,
        slope_threshold: OSCILLATION_SLOPE_THRESHOLD,
    })
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol * whole.abs().max(1e-300) {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(a, b, fa, fm, fb);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}
