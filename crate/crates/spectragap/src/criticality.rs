//! Classification pipeline: supercritical witness search, weighted-gap
//! computation across a refinement schedule, decay-rate extrapolation and
//! null-sequence evidence.
//!
//! A discrete problem at fixed h always has a positive weighted gap, so
//! criticality is decided by extrapolation: an h^2-decaying gap is the
//! operational meaning of the continuum's vanishing gap. Sign-straddling
//! discretizations (negative principal eigenvalue whose magnitude decays at
//! the same rate) route to Critical as well, with the sign recorded.

use serde::Serialize;
use thiserror::Error;

use crate::form::{DiscreteForm, FormError, MassMatrix};
use crate::mesh::{Grid, GridFunction, Mask, MeshError};
use crate::potential::{eval_catalog, PotentialError, PotentialSpec};
use crate::spectral::{principal_eig, weighted_gap, EigOpts, SpectralError};

#[derive(Debug, Error)]
pub enum CriticalityError {
    #[error("classification needs at least 3 refinement levels, got {0}")]
    TooFewLevels(usize),
    #[error("grids must be strictly refining (level {0} is not finer than its predecessor)")]
    NotRefining(usize),
    #[error("null_sequence requires a Critical verdict, got {0}")]
    NotCritical(String),
    #[error("eigensolver budget exhausted at level {level}: verdict is Inconclusive")]
    EigenBudget { level: usize },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Form(#[from] FormError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Compact-set descriptor resolved per grid.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSpec {
    /// Centered box with the given side fraction of the domain (default 0.5).
    Centered { fraction: f64 },
    /// Explicit box.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Closed ball.
    Ball { center: Vec<f64>, radius: f64 },
}

impl RegionSpec {
    pub fn centered_default() -> RegionSpec {
        RegionSpec::Centered { fraction: 0.5 }
    }

    pub fn resolve(&self, grid: &Grid) -> Result<Mask, MeshError> {
        match self {
            RegionSpec::Centered { fraction } => {
                let mut boxdef = Vec::with_capacity(grid.dim());
                for d in 0..grid.dim() {
                    let (a, b) = grid.extents()[d];
                    let c = 0.5 * (a + b);
                    let half = 0.5 * (b - a) * fraction;
                    boxdef.push((c - half, c + half));
                }
                grid.compact_mask(&boxdef)
            }
            RegionSpec::Box { lo, hi } => {
                let boxdef: Vec<(f64, f64)> =
                    lo.iter().zip(hi).map(|(a, b)| (*a, *b)).collect();
                grid.compact_mask(&boxdef)
            }
            RegionSpec::Ball { center, radius } => grid.ball_mask(center, *radius),
        }
    }
}

/// Weight descriptor for the gap pencil.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec {
    /// chi_K, the indicator of the K region.
    IndicatorK,
    /// t * chi_K.
    ScaledIndicatorK { t: f64 },
}

impl WeightSpec {
    pub fn mass(&self, grid: &Grid, k: &Mask) -> MassMatrix {
        match self {
            WeightSpec::IndicatorK => MassMatrix::indicator(grid, k),
            WeightSpec::ScaledIndicatorK { t } => MassMatrix::indicator(grid, k).scaled(*t),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            WeightSpec::IndicatorK => "chi_K".to_string(),
            WeightSpec::ScaledIndicatorK { t } => format!("{t} * chi_K"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VerdictTag {
    Supercritical,
    Subcritical,
    Critical,
    Inconclusive,
}

impl std::fmt::Display for VerdictTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VerdictTag::Supercritical => "Supercritical",
            VerdictTag::Subcritical => "Subcritical",
            VerdictTag::Critical => "Critical",
            VerdictTag::Inconclusive => "Inconclusive",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapSample {
    /// max_d h_d of the level's grid.
    pub h: f64,
    /// Signed gap: weighted pencil bottom, or the (negative) principal
    /// eigenvalue when a witness exists at this level.
    pub mu: f64,
    pub witness_at_level: bool,
    pub deflated: bool,
}

#[derive(Debug, Clone)]
pub struct CriticalityVerdict {
    pub tag: VerdictTag,
    /// Supercritical: xi with qv(xi) < 0 (directly re-verified).
    /// Critical: the last null-sequence member.
    pub witness: Option<GridFunction>,
    pub gap_history: Vec<GapSample>,
    /// Fitted decay rate of log |mu| against log h over the last 3 levels.
    pub fitted_rate: Option<f64>,
    pub weight: String,
    /// Minimal gap over levels (Subcritical evidence).
    pub min_gap: f64,
}

#[derive(Debug, Clone)]
pub struct NullSequenceEvidence {
    /// Per-level minimizers normalized to `sum_K |xi| cellvol = 1`.
    pub members: Vec<GridFunction>,
    pub qv_values: Vec<f64>,
    pub k_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ClassifyOpts {
    /// |mu| decay slope at or above which the gap is judged vanishing.
    pub slope_critical: f64,
    /// slope at or below which the gap is judged settled.
    pub slope_subcritical: f64,
    /// Subcritical floor, relative to the FD Laplacian scale of the finest grid.
    pub gap_threshold_rel: f64,
    /// Critical magnitude cap: |mu(finest)| <= decay_factor * lambda_scale * h^2.
    pub decay_factor: f64,
    pub eig: EigOpts,
}

impl Default for ClassifyOpts {
    fn default() -> Self {
        ClassifyOpts {
            slope_critical: 1.5,
            slope_subcritical: 0.5,
            gap_threshold_rel: 1e-3,
            decay_factor: 10.0,
            eig: EigOpts::default(),
        }
    }
}

pub use crate::form::fd_laplacian_lambda1;

/// eta threshold for certifying a negative eigenvalue as a witness, in
/// pencil units: noise floor matched to the eigensolver tolerance.
pub fn witness_eta(form: &DiscreteForm) -> f64 {
    1e-8 * form.pencil_scale()
}

#[derive(Debug, Clone)]
pub struct Witness {
    pub xi: GridFunction,
    /// Principal eigenvalue (pencil units).
    pub lambda: f64,
    /// Directly re-evaluated qv(xi), negative by certification.
    pub qv_direct: f64,
}

/// Principal-eigenvalue search for a negative direction. A witness is
/// returned only when the eigenvalue clears the eta noise floor AND the
/// direct face-sum evaluation of qv is negative, independent of the
/// eigensolver's reported value.
pub fn supercritical_witness(form: &DiscreteForm, opts: &EigOpts) -> Result<Option<Witness>, SpectralError> {
    let eig = principal_eig(form, opts)?;
    let eta = witness_eta(form);
    if eig.value >= -eta {
        return Ok(None);
    }
    let qv_direct = form.qv(&eig.vector)?;
    if qv_direct < 0.0 {
        Ok(Some(Witness { xi: eig.vector, lambda: eig.value, qv_direct }))
    } else {
        Ok(None)
    }
}

fn fit_slope_loglog(hs: &[f64], mus: &[f64]) -> Option<f64> {
    if hs.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = mus.iter().map(|m| m.abs().max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

struct Level {
    grid: Grid,
    h: f64,
    mu: f64,
    witness: Option<Witness>,
    deflated: bool,
    minimizer: GridFunction,
    k: Mask,
}

fn run_levels(
    spec: &PotentialSpec,
    grids: &[Grid],
    domain: Option<&RegionSpec>,
    kspec: &RegionSpec,
    wspec: &WeightSpec,
    opts: &ClassifyOpts,
) -> Result<Vec<Level>, CriticalityError> {
    if grids.len() < 3 {
        return Err(CriticalityError::TooFewLevels(grids.len()));
    }
    for (i, w) in grids.windows(2).enumerate() {
        let hmax_prev: f64 = w[0].h().iter().cloned().fold(0.0, f64::max);
        let hmax: f64 = w[1].h().iter().cloned().fold(0.0, f64::max);
        if hmax >= hmax_prev {
            return Err(CriticalityError::NotRefining(i + 1));
        }
    }
    let mut levels = Vec::with_capacity(grids.len());
    for (li, grid) in grids.iter().enumerate() {
        let field = eval_catalog(spec, grid)?;
        let mask = match domain {
            Some(r) => r.resolve(grid)?,
            None => grid.full_mask(),
        };
        let form = DiscreteForm::assemble(grid, &field, &mask)?;
        let k = kspec.resolve(grid)?;
        let h: f64 = grid.h().iter().cloned().fold(0.0, f64::max);
        let witness = supercritical_witness(&form, &opts.eig).map_err(|e| match e {
            SpectralError::Budget(_) => CriticalityError::EigenBudget { level: li },
            other => CriticalityError::Spectral(other),
        })?;
        if let Some(w) = witness {
            // record the negative principal eigenvalue as the signed gap
            levels.push(Level {
                grid: grid.clone(),
                h,
                mu: w.lambda,
                minimizer: w.xi.clone(),
                witness: Some(w),
                deflated: false,
                k,
            });
            continue;
        }
        let mw = wspec.mass(grid, &k);
        let wg = weighted_gap(&form, &mw, &opts.eig).map_err(|e| match e {
            SpectralError::Budget(_) => CriticalityError::EigenBudget { level: li },
            other => CriticalityError::Spectral(other),
        })?;
        levels.push(Level {
            grid: grid.clone(),
            h,
            mu: wg.mu,
            minimizer: wg.minimizer,
            witness: None,
            deflated: wg.deflated,
            k,
        });
    }
    Ok(levels)
}

/// The classification pipeline over a refinement schedule.
pub fn classify(
    spec: &PotentialSpec,
    grids: &[Grid],
    kspec: &RegionSpec,
    wspec: &WeightSpec,
    opts: &ClassifyOpts,
) -> Result<CriticalityVerdict, CriticalityError> {
    classify_in(spec, grids, None, kspec, wspec, opts)
}

/// classify on a masked sub-domain (nodes outside act as Dirichlet zeros).
pub fn classify_in(
    spec: &PotentialSpec,
    grids: &[Grid],
    domain: Option<&RegionSpec>,
    kspec: &RegionSpec,
    wspec: &WeightSpec,
    opts: &ClassifyOpts,
) -> Result<CriticalityVerdict, CriticalityError> {
    let levels = run_levels(spec, grids, domain, kspec, wspec, opts)?;
    let gap_history: Vec<GapSample> = levels
        .iter()
        .map(|l| GapSample { h: l.h, mu: l.mu, witness_at_level: l.witness.is_some(), deflated: l.deflated })
        .collect();
    let last3 = &levels[levels.len() - 3..];
    let hs: Vec<f64> = last3.iter().map(|l| l.h).collect();
    let mus: Vec<f64> = last3.iter().map(|l| l.mu).collect();
    let fitted_rate = fit_slope_loglog(&hs, &mus);
    let finest = levels.last().unwrap();
    let lambda_scale = fd_laplacian_lambda1(&finest.grid);
    let min_gap = levels.iter().map(|l| l.mu).fold(f64::INFINITY, f64::min);
    let weight = wspec.describe();

    let any_witness = levels.iter().any(|l| l.witness.is_some());
    let vanishing_magnitude = finest.mu.abs() <= opts.decay_factor * lambda_scale * finest.h * finest.h;
    let decaying = fitted_rate.map_or(false, |s| s >= opts.slope_critical);

    if any_witness {
        if levels.iter().all(|l| l.witness.is_some()) && decaying && vanishing_magnitude {
            // sign-straddling discretization of a critical operator
            return Ok(CriticalityVerdict {
                tag: VerdictTag::Critical,
                witness: Some(finest.minimizer.clone()),
                gap_history,
                fitted_rate,
                weight,
                min_gap,
            });
        }
        let w = levels
            .iter()
            .rev()
            .find_map(|l| l.witness.as_ref())
            .expect("witness exists");
        return Ok(CriticalityVerdict {
            tag: VerdictTag::Supercritical,
            witness: Some(w.xi.clone()),
            gap_history,
            fitted_rate,
            weight,
            min_gap,
        });
    }

    if levels.iter().all(|l| l.deflated) {
        return Ok(CriticalityVerdict {
            tag: VerdictTag::Critical,
            witness: Some(finest.minimizer.clone()),
            gap_history,
            fitted_rate,
            weight,
            min_gap,
        });
    }

    let above_floor = levels.iter().all(|l| l.mu >= opts.gap_threshold_rel * lambda_scale);
    let settled = fitted_rate.map_or(false, |s| s.abs() <= opts.slope_subcritical);
    if above_floor && settled {
        return Ok(CriticalityVerdict {
            tag: VerdictTag::Subcritical,
            witness: None,
            gap_history,
            fitted_rate,
            weight,
            min_gap,
        });
    }
    if decaying && vanishing_magnitude {
        return Ok(CriticalityVerdict {
            tag: VerdictTag::Critical,
            witness: Some(finest.minimizer.clone()),
            gap_history,
            fitted_rate,
            weight,
            min_gap,
        });
    }
    Ok(CriticalityVerdict {
        tag: VerdictTag::Inconclusive,
        witness: None,
        gap_history,
        fitted_rate,
        weight,
        min_gap,
    })
}

/// Per-level gap minimizers rescaled to `sum_K |xi| cellvol = 1`, with
/// their qv values: the discrete null-sequence evidence.
pub fn null_sequence(
    spec: &PotentialSpec,
    grids: &[Grid],
    kspec: &RegionSpec,
    wspec: &WeightSpec,
    verdict: &CriticalityVerdict,
    opts: &ClassifyOpts,
) -> Result<NullSequenceEvidence, CriticalityError> {
    if verdict.tag != VerdictTag::Critical {
        return Err(CriticalityError::NotCritical(verdict.tag.to_string()));
    }
    let levels = run_levels(spec, grids, None, kspec, wspec, opts)?;
    let mut members = Vec::with_capacity(levels.len());
    let mut qv_values = Vec::with_capacity(levels.len());
    let mut k_counts = Vec::with_capacity(levels.len());
    for l in levels {
        let field = eval_catalog(spec, &l.grid)?;
        let form = DiscreteForm::assemble(&l.grid, &field, &l.grid.full_mask())?;
        let mut xi = l.minimizer;
        let mass = xi.l1_on(&l.k);
        if mass > 0.0 {
            xi.scale(1.0 / mass);
        }
        qv_values.push(form.qv(&xi)?);
        k_counts.push(l.k.count());
        members.push(xi);
    }
    Ok(NullSequenceEvidence { members, qv_values, k_counts })
}
