//! Command-line driver: run pipelines from a config file and emit JSON
//! reports and plot-ready exports.

use serde::Serialize;
use thiserror::Error;

use crate::aap::{construct_supersolution, picone_improve, verify_aap, AapOpts, AAP_GAP_SLACK};
use crate::capacity::{cap_in, dyadic_family, mazya_ratio, MazyaFlag, MAZYA_TOL};
use crate::config::{ConfigError, ProbeConfig, RunConfig};
use crate::criticality::{ClassifyOpts, RegionSpec, WeightSpec};
use crate::form::DiscreteForm;
use crate::mesh::{Grid, GridFunction, Mask};
use crate::potential::{balance_probe, eval_catalog, oscillation_probe, spike_battery, BalanceVerdict};
use crate::report::{to_json_string, Report, ToolInfo};
use crate::solver::{PSOR_TOL, PSOR_OMEGA};
use crate::spectral::principal_eig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Classify,
    Eigen,
    Capacity,
    Aap,
    Improve,
    Probe,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Eigen => "eigen",
            Command::Capacity => "capacity",
            Command::Aap => "aap",
            Command::Improve => "improve",
            Command::Probe => "probe",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Numerical(_) => 2,
            RunError::Io(_) => 2,
        }
    }
}

macro_rules! numerical {
    ($e:expr) => {
        $e.map_err(|err| RunError::Numerical(err.to_string()))
    };
}

#[derive(Debug, Clone, Serialize)]
pub struct Tolerances {
    pub eig_tol: f64,
    pub psor_tol: f64,
    pub psor_omega: f64,
    pub mazya_tol: f64,
    pub gap_slack: f64,
}

impl Tolerances {
    fn current(cfg: &RunConfig) -> Tolerances {
        Tolerances {
            eig_tol: cfg.eigen.clone().unwrap_or_default().tol,
            psor_tol: PSOR_TOL,
            psor_omega: PSOR_OMEGA,
            mazya_tol: MAZYA_TOL,
            gap_slack: AAP_GAP_SLACK,
        }
    }
}

pub struct RunOutcome {
    pub report_json: String,
    pub summary: String,
}

fn resolve_domain(cfg: &RunConfig, grid: &Grid) -> Result<Mask, RunError> {
    match &cfg.domain {
        Some(r) => Ok(numerical!(r.resolve(grid))?),
        None => Ok(grid.full_mask()),
    }
}

fn emit<R: Serialize>(
    command: Command,
    cfg: &RunConfig,
    result: R,
    started: std::time::Instant,
    summary: String,
) -> Result<RunOutcome, RunError> {
    let report = Report {
        tool: ToolInfo::default(),
        command: command.name().to_string(),
        config: cfg.clone(),
        result,
        tolerances: Tolerances::current(cfg),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let json = to_json_string(&report).map_err(|e| RunError::Numerical(e.to_string()))?;
    Ok(RunOutcome { report_json: json, summary })
}

/// Execute a pipeline; the report goes to the returned outcome.
pub fn run(command: Command, cfg: &RunConfig) -> Result<RunOutcome, RunError> {
    let started = std::time::Instant::now();
    match command {
        Command::Eigen => {
            let grid = cfg.require_grid()?;
            let spec = cfg.require_potential()?;
            let field = numerical!(eval_catalog(spec, &grid))?;
            let domain = resolve_domain(cfg, &grid)?;
            let form = numerical!(DiscreteForm::assemble(&grid, &field, &domain))?;
            let eig = numerical!(principal_eig(&form, &cfg.eigen_opts()))?;
            #[derive(Serialize)]
            struct EigenResult {
                value: f64,
                residual: f64,
                iterations: usize,
                converged: bool,
            }
            let summary = format!("lambda_1 = {:.12e} (residual {:.3e})", eig.value, eig.residual);
            emit(
                command,
                cfg,
                EigenResult {
                    value: eig.value,
                    residual: eig.residual,
                    iterations: eig.iterations,
                    converged: eig.converged,
                },
                started,
                summary,
            )
        }
        Command::Classify => {
            let spec = cfg.require_potential()?;
            let ccfg = cfg.classify.clone().unwrap_or_default();
            let base = cfg.require_grid()?;
            let grids: Vec<Grid> = match &ccfg.schedule_n {
                Some(sched) => {
                    let gc = cfg.grid.as_ref().expect("grid present");
                    sched
                        .iter()
                        .map(|n| {
                            let mut g = gc.clone();
                            g.n = n.clone();
                            g.build().map_err(RunError::Config)
                        })
                        .collect::<Result<_, _>>()?
                }
                None => {
                    let mut gs = vec![base.clone()];
                    for _ in 1..ccfg.levels {
                        let next = numerical!(gs.last().unwrap().refine())?;
                        gs.push(next);
                    }
                    gs
                }
            };
            let kspec = cfg.k.clone().unwrap_or_else(RegionSpec::centered_default);
            let wspec = cfg.weight.clone().unwrap_or(WeightSpec::IndicatorK);
            let opts = ClassifyOpts {
                slope_critical: ccfg.slope_critical,
                slope_subcritical: ccfg.slope_subcritical,
                gap_threshold_rel: ccfg.gap_threshold_rel,
                decay_factor: ccfg.decay_factor,
                eig: cfg.eigen_opts(),
            };
            let verdict = numerical!(crate::criticality::classify_in(
                spec,
                &grids,
                cfg.domain.as_ref(),
                &kspec,
                &wspec,
                &opts
            ))?;
            #[derive(Serialize)]
            struct ClassifyResult {
                tag: String,
                gap_history: Vec<crate::criticality::GapSample>,
                fitted_rate: Option<f64>,
                weight: String,
                min_gap: f64,
                witness_qv: Option<f64>,
            }
            let witness_qv = match (&verdict.witness, grids.last()) {
                (Some(w), Some(g)) if w.grid() == g => {
                    let field = numerical!(eval_catalog(spec, g))?;
                    let form = numerical!(DiscreteForm::assemble(g, &field, &g.full_mask()))?;
                    Some(numerical!(form.qv(w))?)
                }
                _ => None,
            };
            let summary = format!("verdict: {}", verdict.tag);
            emit(
                command,
                cfg,
                ClassifyResult {
                    tag: verdict.tag.to_string(),
                    gap_history: verdict.gap_history.clone(),
                    fitted_rate: verdict.fitted_rate,
                    weight: verdict.weight.clone(),
                    min_gap: verdict.min_gap,
                    witness_qv,
                },
                started,
                summary,
            )
        }
        Command::Capacity => {
            let grid = cfg.require_grid()?;
            let ccfg = cfg.capacity.clone().ok_or_else(|| {
                ConfigError::Schema { key: "capacity".into(), message: "section required".into() }
            })?;
            let domain = resolve_domain(cfg, &grid)?;
            let k = numerical!(ccfg.k.resolve(&grid))?;
            let res = numerical!(cap_in(&grid, &domain, &k))?;
            if let Some(path) = &ccfg.minimizer_out {
                let f = std::fs::File::create(path)?;
                numerical!(res.minimizer.write_text(f))?;
            }
            #[derive(Serialize)]
            struct MazyaOut {
                max_ratio: f64,
                flag: MazyaFlag,
                entries: Vec<(f64, f64)>,
            }
            #[derive(Serialize)]
            struct CapacityResultOut {
                value: f64,
                sweeps: usize,
                mazya: Option<MazyaOut>,
            }
            let mazya = if ccfg.mazya {
                let spec = cfg.require_potential()?;
                let field = numerical!(eval_catalog(spec, &grid))?;
                let fam = dyadic_family(&grid);
                let rep = numerical!(mazya_ratio(&field, &grid, &fam))?;
                Some(MazyaOut { max_ratio: rep.max_ratio, flag: rep.flag, entries: rep.entries })
            } else {
                None
            };
            let summary = format!("cap = {:.12e}", res.value);
            emit(
                command,
                cfg,
                CapacityResultOut { value: res.value, sweeps: res.sweeps, mazya },
                started,
                summary,
            )
        }
        Command::Aap => {
            let grid = cfg.require_grid()?;
            let spec = cfg.require_potential()?;
            let acfg = cfg.aap.clone().ok_or_else(|| ConfigError::Schema {
                key: "aap".into(),
                message: "section required".into(),
            })?;
            let field = numerical!(eval_catalog(spec, &grid))?;
            let mut opts = AapOpts::default();
            opts.eig = cfg.eigen_opts();
            let sup = numerical!(construct_supersolution(&field, &grid, acfg.m_levels, &acfg.truncations, &opts))?;
            let trunc_field = field.truncate_negative(sup.normalization.truncation);
            let form = numerical!(DiscreteForm::assemble(&grid, &trunc_field, &grid.full_mask()))?;
            let kspec = cfg.k.clone().unwrap_or_else(RegionSpec::centered_default);
            let k = numerical!(kspec.resolve(&grid))?;
            let battery = spike_battery(&grid, &k, 42, 6);
            let rep = numerical!(verify_aap(&form, &sup, &sup.residual, &battery, &opts))?;
            if let Some(path) = &acfg.u_out {
                let f = std::fs::File::create(path)?;
                numerical!(sup.u.write_text(f))?;
                #[derive(Serialize)]
                struct Sidecar<'a> {
                    normalization_ball: &'a [(f64, f64)],
                    min_over_ball: f64,
                    residual_min: f64,
                    truncation: f64,
                    suppressed_tail: f64,
                    schedule: &'a [(usize, f64, f64)],
                }
                let sidecar = Sidecar {
                    normalization_ball: &sup.normalization.ball,
                    min_over_ball: sup.normalization.min_over_ball,
                    residual_min: sup.residual.values().iter().cloned().fold(f64::INFINITY, f64::min),
                    truncation: sup.normalization.truncation,
                    suppressed_tail: sup.normalization.suppressed_tail,
                    schedule: &sup.normalization.schedule,
                };
                crate::report::write_json_file(&sidecar, &format!("{path}.meta.json"))?;
            }
            #[derive(Serialize)]
            struct AapResult {
                schedule: Vec<(usize, f64, f64)>,
                min_u: f64,
                min_over_ball: f64,
                residual_min: f64,
                residual_scale: f64,
                truncation: f64,
                suppressed_tail: f64,
                verify_gap: f64,
                verify_pointwise_ok: bool,
                verify_passed: bool,
            }
            let min_u = sup.u.values().iter().cloned().fold(f64::INFINITY, f64::min);
            let scale = crate::aap::residual_scale(&form, &sup.u);
            let summary = format!(
                "supersolution built: min u = {:.3e}, verify gap = {:.6}",
                min_u, rep.gap
            );
            emit(
                command,
                cfg,
                AapResult {
                    schedule: sup.normalization.schedule.clone(),
                    min_u,
                    min_over_ball: sup.normalization.min_over_ball,
                    residual_min: sup.residual.values().iter().cloned().fold(f64::INFINITY, f64::min),
                    residual_scale: scale,
                    truncation: sup.normalization.truncation,
                    suppressed_tail: sup.normalization.suppressed_tail,
                    verify_gap: rep.gap,
                    verify_pointwise_ok: rep.pointwise_ok,
                    verify_passed: rep.passed,
                },
                started,
                summary,
            )
        }
        Command::Improve => {
            let grid = cfg.require_grid()?;
            let icfg = cfg.improve.clone().ok_or_else(|| ConfigError::Schema {
                key: "improve".into(),
                message: "section required".into(),
            })?;
            let load = |path: &str| -> Result<GridFunction, RunError> {
                let f = std::fs::File::open(path)?;
                Ok(numerical!(GridFunction::read_text(f))?)
            };
            let u1 = load(&icfg.u1_path)?;
            let u2 = load(&icfg.u2_path)?;
            if u1.grid() != &grid || u2.grid() != &grid {
                return Err(RunError::Numerical(
                    "improve inputs must live on the configured grid".into(),
                ));
            }
            let w = numerical!(picone_improve(&u1, &u2))?;
            let spec = cfg
                .potential
                .clone()
                .unwrap_or(crate::potential::PotentialSpec::Constant { c: 0.0 });
            let field = numerical!(eval_catalog(&spec, &grid))?;
            let form = numerical!(DiscreteForm::assemble(&grid, &field, &grid.full_mask()))?;
            let mut opts = AapOpts::default();
            opts.eig = cfg.eigen_opts();
            let (ok, gap) = numerical!(crate::aap::improvement_check(&form, &w, &opts))?;
            if let Some(path) = &icfg.w_out {
                let f = std::fs::File::create(path)?;
                numerical!(w.write_text(f))?;
            }
            #[derive(Serialize)]
            struct ImproveResult {
                gap: f64,
                passed: bool,
                w_max: f64,
            }
            let summary = format!("improvement gap = {:.6} ({})", gap, if ok { "holds" } else { "fails" });
            emit(
                command,
                cfg,
                ImproveResult { gap, passed: ok, w_max: w.max_abs() },
                started,
                summary,
            )
        }
        Command::Probe => {
            let pcfg = cfg.probe.clone().ok_or_else(|| ConfigError::Schema {
                key: "probe".into(),
                message: "section required".into(),
            })?;
            match pcfg {
                ProbeConfig::Oscillation { c, alpha, beta, eps } => {
                    let rep = numerical!(oscillation_probe(c, alpha, beta, &eps))?;
                    let summary = format!(
                        "oscillation slope = {:.4} ({})",
                        rep.slope,
                        if rep.divergent { "divergent" } else { "convergent" }
                    );
                    emit(command, cfg, rep, started, summary)
                }
                ProbeConfig::Balance { k, u, seed, bumps } => {
                    let grid = cfg.require_grid()?;
                    let spec = cfg.require_potential()?;
                    let field = numerical!(eval_catalog(spec, &grid))?;
                    let km = numerical!(k.resolve(&grid))?;
                    let um = numerical!(u.resolve(&grid))?;
                    let battery = spike_battery(&grid, &km, seed, bumps);
                    let rep = numerical!(balance_probe(&field, &grid, &km, &um, &battery))?;
                    #[derive(Serialize)]
                    struct BalanceResult {
                        best_constant_estimate: f64,
                        battery_size: usize,
                        verdict: String,
                    }
                    let verdict = match rep.verdict {
                        BalanceVerdict::PlausiblyBalanced => "plausibly-balanced".to_string(),
                        BalanceVerdict::ViolationWitness(_) => "violation-witness".to_string(),
                    };
                    let summary = format!("balance estimate = {:.4e} ({verdict})", rep.best_constant_estimate);
                    emit(
                        command,
                        cfg,
                        BalanceResult {
                            best_constant_estimate: rep.best_constant_estimate,
                            battery_size: rep.battery_size,
                            verdict,
                        },
                        started,
                        summary,
                    )
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    GridText,
    CsvProfile,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "grid-text" => Ok(ExportFormat::GridText),
            "csv-profile" => Ok(ExportFormat::CsvProfile),
            other => Err(format!("unknown format {other:?} (expected json | grid-text | csv-profile)")),
        }
    }
}

/// Re-encode a grid function; byte-identical for identical inputs.
pub fn export_grid_function(
    f: &GridFunction,
    path: &str,
    format: ExportFormat,
    axis: usize,
) -> Result<(), RunError> {
    match format {
        ExportFormat::GridText => {
            let file = std::fs::File::create(path)?;
            numerical!(f.write_text(file))?;
        }
        ExportFormat::Json => {
            #[derive(Serialize)]
            struct GfJson<'a> {
                dim: usize,
                n: &'a [usize],
                extents: Vec<Vec<f64>>,
                values: &'a [f64],
            }
            let g = f.grid();
            let o = GfJson {
                dim: g.dim(),
                n: g.n(),
                extents: g.extents().iter().map(|(a, b)| vec![*a, *b]).collect(),
                values: f.values(),
            };
            crate::report::write_json_file(&o, path)?;
        }
        ExportFormat::CsvProfile => {
            let g = f.grid();
            if axis >= g.dim() {
                return Err(RunError::Numerical(format!(
                    "axis {axis} out of range for dim {}",
                    g.dim()
                )));
            }
            let mut body = String::from("coordinate,value\n");
            // line through the center of the other axes
            let mut ix = [0usize; crate::mesh::MAX_DIM];
            for d in 0..g.dim() {
                ix[d] = g.n()[d] / 2;
            }
            for i in 0..g.n()[axis] {
                ix[axis] = i;
                let lin = g.index(&ix[..g.dim()]);
                body.push_str(&format!("{:.17e},{:.17e}\n", g.coord(axis, i), f.values()[lin]));
            }
            std::fs::write(path, body)?;
        }
    }
    Ok(())
}
