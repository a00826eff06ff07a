//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with the measured values. Tolerances are pinned here, not configured.
//!
//! Oracles: closed-form FD eigenvalues, exact Sturm bisection for 1D
//! tridiagonal pencils, a dense Schur-complement eigensolve for weighted
//! gaps, analytic capacitary potentials, and oscillation-resolving radial
//! quadrature. All oracle code lives in this file, independent of the
//! library's iterative paths.

use std::f64::consts::PI;

use spectragap::aap::{
    construct_supersolution, improvement_check, picone_improve, residual_scale, verify_aap, AapOpts,
};
use spectragap::capacity::{cap, cap_in, dyadic_family, mazya_ratio};
use spectragap::cli::{run, Command};
use spectragap::config::RunConfig;
use spectragap::criticality::{
    classify, classify_in, null_sequence, supercritical_witness, ClassifyOpts,
    RegionSpec, VerdictTag, WeightSpec,
};
use spectragap::form::{magnetic_identity_check, DiscreteForm, MassMatrix};
use spectragap::mesh::{Grid, GridFunction};
use spectragap::potential::{
    eval_catalog, hardy_constant, oscillation_probe, PotentialField, PotentialSpec,
};
use spectragap::solver::{complementarity_residual, dirichlet_solve, obstacle_solve, Obstacle};
use spectragap::spectral::{principal_eig, rayleigh, weighted_gap, EigOpts};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "[acceptance] {criterion}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion}: {detail}");
}

fn grid1(n: usize) -> Grid {
    Grid::new(1, &[(0.0, 1.0)], &[n]).unwrap()
}

/// Oracle: eigenvalue count below lambda for a symmetric tridiagonal matrix
/// with constant off-diagonal, by Sturm sequences.
fn sturm_count_below(diag: &[f64], off: f64, lambda: f64) -> usize {
    let mut count = 0usize;
    let mut d = diag[0] - lambda;
    if d < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let dn = (diag[i] - lambda) - off * off / d;
        if dn < 0.0 {
            count += 1;
        }
        d = dn;
    }
    count
}

fn sturm_lambda_min(diag: &[f64], off: f64, h: f64) -> f64 {
    let (mut lo, mut hi) = (-1e4 / (h * h), 4.0 / (h * h));
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if sturm_count_below(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn hardy_diag(n: usize, cprime: f64) -> (Vec<f64>, f64, f64) {
    let h = 1.0 / (n as f64 + 1.0);
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let x = (i as f64 + 1.0) * h;
            2.0 / (h * h) - cprime / (4.0 * x * x)
        })
        .collect();
    (diag, -1.0 / (h * h), h)
}

#[test]
fn criterion_01_1d_laplacian_spectrum() {
    let t0 = std::time::Instant::now();
    let cfg = RunConfig::from_str_with_overrides(
        r#"
[grid]
dim = 1
extents = [[0.0, 1.0]]
n = [511]

[potential]
variant = "constant"
c = 0.0
"#,
        &[],
    )
    .unwrap();
    let out = run(Command::Eigen, &cfg).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out.report_json).unwrap();
    let lam = v["result"]["value"].as_f64().unwrap();
    let rel = (lam - PI * PI).abs() / (PI * PI);
    // closed-form FD oracle documents the O(h^2) bias
    let h = 1.0 / 512.0;
    let fd = 2.0 / (h * h) * (1.0 - (PI * h).cos());
    let fd_rel = (lam - fd).abs() / fd;
    report(
        "criterion 01 (1D Laplacian spectrum, n=511)",
        rel <= 5e-4 && fd_rel <= 1e-8,
        &format!(
            "lambda_1 = {lam:.10} vs pi^2 (rel {rel:.2e}, bound 5e-4); FD oracle rel {fd_rel:.2e}; {:.2}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_2d_laplacian_spectrum() {
    let t0 = std::time::Instant::now();
    let cfg = RunConfig::from_str_with_overrides(
        r#"
[grid]
dim = 2
extents = [[0.0, 1.0], [0.0, 1.0]]
n = [127, 127]

[potential]
variant = "constant"
c = 0.0
"#,
        &[],
    )
    .unwrap();
    let out = run(Command::Eigen, &cfg).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out.report_json).unwrap();
    let lam = v["result"]["value"].as_f64().unwrap();
    let rel = (lam - 2.0 * PI * PI).abs() / (2.0 * PI * PI);
    report(
        "criterion 02 (2D Laplacian spectrum, n=127^2)",
        rel <= 5e-3,
        &format!("lambda_1 = {lam:.8} vs 2 pi^2 (rel {rel:.2e}, bound 5e-3); {:.2}s", t0.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_03a_hardy_positivity_at_80_percent() {
    let t0 = std::time::Instant::now();
    let n = 2047;
    let g = grid1(n);
    let spec = PotentialSpec::Hardy { center: vec![0.0], c: 0.8 / 4.0 };
    let field = eval_catalog(&spec, &g).unwrap();
    let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
    let eig = principal_eig(&form, &EigOpts::default()).unwrap();
    let witness = supercritical_witness(&form, &EigOpts::default()).unwrap();
    // Sturm oracle: exact eigenvalue bottom
    let (diag, off, h) = hardy_diag(n, 0.8);
    let lmin = sturm_lambda_min(&diag, off, h);
    report(
        "criterion 03a (discrete Hardy positivity, c'=0.8, n=2047)",
        eig.value >= 0.0 && witness.is_none() && lmin >= 0.0,
        &format!(
            "lambda_1 = {:.6} >= 0 (Sturm oracle {:.6}), no witness; {:.2}s",
            eig.value,
            lmin,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03b_hardy_supercritical_witness_at_120_percent() {
    // Implemented faithfully as specified: V = -1.2/(4x^2), n = 2047,
    // supercritical_witness found. The discrete operator at this resolution
    // is positive definite (Sturm oracle: lambda_min = +4.859, zero
    // eigenvalues below 0; the first negative eigenvalue appears only near
    // n ~ 9e4 because the x^{1/2 +- i nu} resonance needs nu log(1/h) > pi).
    // The criterion therefore cannot pass as stated; the machinery itself
    // does find witnesses whenever one exists, demonstrated at c' = 2.0 on
    // the same grid before the faithful assertion runs.
    let t0 = std::time::Instant::now();
    let n = 2047;
    let g = grid1(n);

    // capability demonstration: c' = 2.0 is discretely supercritical here
    let spec2 = PotentialSpec::Hardy { center: vec![0.0], c: 2.0 / 4.0 };
    let field2 = eval_catalog(&spec2, &g).unwrap();
    let form2 = DiscreteForm::assemble(&g, &field2, &g.full_mask()).unwrap();
    let w2 = supercritical_witness(&form2, &EigOpts::default()).unwrap();
    let (diag2, off, h) = hardy_diag(n, 2.0);
    let lmin2 = sturm_lambda_min(&diag2, off, h);
    assert!(lmin2 < 0.0, "oracle: c'=2.0 must be discretely supercritical");
    assert!(
        w2.as_ref().is_some_and(|w| w.qv_direct < 0.0),
        "witness search must certify the c'=2.0 well (oracle lambda_min = {lmin2:.3})"
    );

    // the faithful criterion
    let spec = PotentialSpec::Hardy { center: vec![0.0], c: 1.2 / 4.0 };
    let field = eval_catalog(&spec, &g).unwrap();
    let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
    let witness = supercritical_witness(&form, &EigOpts::default()).unwrap();
    let (diag, _, _) = hardy_diag(n, 1.2);
    let lmin = sturm_lambda_min(&diag, off, h);
    let negatives = sturm_count_below(&diag, off, 0.0);
    report(
        "criterion 03b (supercritical witness, c'=1.2, n=2047)",
        witness.is_some(),
        &format!(
            "no witness exists: Sturm oracle lambda_min = {lmin:.4} with {negatives} eigenvalues below 0 \
             (spec defect: first negative eigenvalue near n ~ 9e4; c'=2.0 witness found, qv = {:.3e}); {:.2}s",
            w2.map(|w| w.qv_direct).unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_04_3d_hardy_supercriticality() {
    let t0 = std::time::Instant::now();
    let hn = hardy_constant(3);
    let spec = PotentialSpec::Hardy { center: vec![0.0, 0.0, 0.0], c: hn + 0.25 };
    let grids: Vec<Grid> = [24usize, 34, 48]
        .iter()
        .map(|n| Grid::new(3, &[(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)], &[*n, *n, *n]).unwrap())
        .collect();
    let domain = RegionSpec::Ball { center: vec![0.0, 0.0, 0.0], radius: 1.0 };
    let verdict = classify_in(
        &spec,
        &grids,
        Some(&domain),
        &RegionSpec::centered_default(),
        &WeightSpec::IndicatorK,
        &ClassifyOpts::default(),
    )
    .unwrap();
    let witness = verdict.witness.as_ref().expect("supercritical verdict carries a witness");
    // direct re-verification on a freshly assembled form
    let g = &grids[2];
    let field = eval_catalog(&spec, g).unwrap();
    let mask = domain.resolve(g).unwrap();
    let form = DiscreteForm::assemble(g, &field, &mask).unwrap();
    let qv = form.qv(witness).unwrap();
    report(
        "criterion 04 (3D Hardy supercriticality, H3+0.25, 48^3 ball)",
        verdict.tag == VerdictTag::Supercritical && qv < 0.0,
        &format!(
            "verdict {}, re-verified qv(witness) = {qv:.6e} < 0, history {:?}; {:.1}s",
            verdict.tag,
            verdict.gap_history.iter().map(|s| s.mu).collect::<Vec<_>>(),
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_criticality_detection() {
    let t0 = std::time::Instant::now();
    let k = RegionSpec::Box { lo: vec![1.0 / 3.0], hi: vec![2.0 / 3.0] };
    let mut opts = ClassifyOpts::default();
    opts.eig = EigOpts::with_tol(1e-11);
    let spec = PotentialSpec::LambdaShift { factor: 1.0 };

    // 1D deflated shift
    let grids = vec![grid1(31), grid1(63), grid1(127)];
    let verdict = classify(&spec, &grids, &k, &WeightSpec::IndicatorK, &opts).unwrap();
    let gaps: Vec<f64> = verdict.gap_history.iter().map(|s| s.mu).collect();
    let ok_1d = verdict.tag == VerdictTag::Critical && gaps.iter().all(|m| m.abs() <= 1e-8);
    let ev = null_sequence(&spec, &grids, &k, &WeightSpec::IndicatorK, &verdict, &opts).unwrap();
    let mut norm_ok = true;
    for (i, m) in ev.members.iter().enumerate() {
        let kk = k.resolve(&grids[i]).unwrap();
        if (m.l1_on(&kk) - 1.0).abs() > 1e-12 {
            norm_ok = false;
        }
    }

    // 2D deflated shift on the unit square
    let k2 = RegionSpec::Centered { fraction: 0.5 };
    let grids2: Vec<Grid> = [15usize, 31, 63]
        .iter()
        .map(|n| Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[*n, *n]).unwrap())
        .collect();
    let verdict2 = classify(&spec, &grids2, &k2, &WeightSpec::IndicatorK, &opts).unwrap();
    let gaps2: Vec<f64> = verdict2.gap_history.iter().map(|s| s.mu).collect();
    let ok_2d = verdict2.tag == VerdictTag::Critical && gaps2.iter().all(|m| m.abs() <= 1e-8);

    // fixed continuum shift: gap magnitudes fall by 4.0 +- 0.5 per halving
    let grids3 = vec![grid1(15), grid1(31), grid1(63)];
    let verdict3 = classify(
        &PotentialSpec::Constant { c: -PI * PI },
        &grids3,
        &k,
        &WeightSpec::IndicatorK,
        &opts,
    )
    .unwrap();
    let mags: Vec<f64> = verdict3.gap_history.iter().map(|s| s.mu.abs()).collect();
    let mut ratios_ok = verdict3.tag == VerdictTag::Critical;
    let mut ratios = Vec::new();
    for w in mags.windows(2) {
        let r = w[0] / w[1];
        ratios.push(r);
        if (r - 4.0).abs() > 0.5 {
            ratios_ok = false;
        }
    }
    // oracle: leading term pi^4 h^2 / 12
    let h_fine = 1.0 / 64.0;
    let oracle = PI.powi(4) * h_fine * h_fine / 12.0;
    let oracle_ok = (mags[2] - oracle).abs() <= 0.05 * oracle;

    report(
        "criterion 05 (criticality detection)",
        ok_1d && norm_ok && ok_2d && ratios_ok && oracle_ok,
        &format!(
            "1D {} gaps {gaps:?}; 2D {} gaps {gaps2:?}; fixed-shift {} ratios {ratios:?} \
             (|mu| fine {:.3e} vs pi^4 h^2/12 = {oracle:.3e}); null-sequence normalized to 1e-12: {norm_ok}; {:.1}s",
            verdict.tag,
            verdict2.tag,
            verdict3.tag,
            mags[2],
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_capacity() {
    let t0 = std::time::Instant::now();
    // 1D: Cap([1/3,2/3];(0,1)) = 6 within node-snapping error <= 2h relative
    let n = 255;
    let g = grid1(n);
    let h = g.h()[0];
    let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0)]).unwrap();
    let c1 = cap(&g, &k).unwrap();
    let rel1 = (c1.value - 6.0).abs() / 6.0;
    // snapping oracle: the discrete value is exactly 1/x_first + 1/(1-x_last)
    let xf = (86.0) * h;
    let oracle1 = 1.0 / xf + 1.0 / (1.0 - 170.0 * h);
    let ok1 = rel1 <= 2.0 * h && (c1.value - oracle1).abs() <= 1e-6 * oracle1;

    // 3D: Cap(B_0.25; B_1) within 5% of 4 pi / 3 at 64^3
    let g3 = Grid::new(3, &[(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)], &[64, 64, 64]).unwrap();
    let domain = g3.ball_mask(&[0.0, 0.0, 0.0], 1.0).unwrap();
    let kball = g3.ball_mask(&[0.0, 0.0, 0.0], 0.25).unwrap();
    let c3 = cap_in(&g3, &domain, &kball).unwrap();
    let exact = 4.0 * PI / 3.0;
    let rel3 = (c3.value - exact).abs() / exact;
    let ok3 = rel3 <= 0.05;
    report(
        "criterion 06 (capacity)",
        ok1 && ok3,
        &format!(
            "1D cap = {:.6} vs 6 (rel {rel1:.3e}, bound {:.3e}, snapping oracle {oracle1:.6}); \
             3D cap = {:.5} vs 4pi/3 = {exact:.5} (rel {:.2}%, bound 5%); {:.1}s",
            c1.value,
            2.0 * h,
            c3.value,
            100.0 * rel3,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_mazya_window() {
    let t0 = std::time::Instant::now();
    // nonnegative side: V- = 0.2/x^2, every dyadic ratio <= 1.05
    let g = grid1(511);
    let spec = PotentialSpec::Hardy { center: vec![0.0], c: 0.8 / 4.0 };
    let field = eval_catalog(&spec, &g).unwrap();
    let fam = dyadic_family(&g);
    let rep = mazya_ratio(&field, &g, &fam).unwrap();
    let ok_a = rep.max_ratio <= 1.05;

    // supercritical variant: either some r(K) > 1 or a negative principal
    // eigenvalue. The ratios stay near c'/4 (1D capacities are hull
    // capacities), so the eigenvalue certificate decides; at n = 2^23 - 1
    // the variational bound with the log-oscillating profile
    // x^{1/2} sin(pi ln(x/a)/ln(b/a)) is negative, hence lambda_1 < 0.
    let spec_super = PotentialSpec::Hardy { center: vec![0.0], c: 1.2 / 4.0 };
    let field_s = eval_catalog(&spec_super, &g).unwrap();
    let rep_s = mazya_ratio(&field_s, &g, &fam).unwrap();
    let some_ratio_above_one = rep_s.max_ratio > 1.0;

    let nn = (1usize << 23) - 1;
    let gg = grid1(nn);
    let h = gg.h()[0];
    let field_big = eval_catalog(&spec_super, &gg).unwrap();
    let form_big = DiscreteForm::assemble(&gg, &field_big, &gg.full_mask()).unwrap();
    let a = 4.0 * h;
    let b = 0.9;
    let ll = (b / a).ln();
    let xi = GridFunction::from_fn(&gg, |x| {
        if x[0] >= a && x[0] <= b {
            x[0].sqrt() * (PI * (x[0] / a).ln() / ll).sin()
        } else {
            0.0
        }
    });
    let mass = MassMatrix::lumped(&gg, &gg.full_mask());
    let ray = rayleigh(&form_big, &mass, &xi).unwrap();
    let eigen_negative = ray < 0.0;
    report(
        "criterion 07 (Maz'ya window)",
        ok_a && (some_ratio_above_one || eigen_negative),
        &format!(
            "c'=0.8: max dyadic ratio {:.4} <= 1.05 over {} sets; c'=1.2: max ratio {:.4}, \
             variational certificate lambda_1 <= rayleigh = {ray:.4} < 0 at n=2^23-1; {:.1}s",
            rep.max_ratio,
            fam.len(),
            rep_s.max_ratio,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_dirichlet_estimate() {
    use rand::{Rng, SeedableRng};
    let t0 = std::time::Instant::now();
    let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[63, 63]).unwrap();
    let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0)]).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2026);
    let mut all_hold = true;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = GridFunction::from_fn(&g, |_| rng.random_range(0.0..40.0));
        let f = GridFunction::from_fn(&g, |_| rng.random_range(-3.0..3.0));
        let (_, rep) = dirichlet_solve(&g, &w, &f, &k).unwrap();
        if rep.rhs > 0.0 {
            worst = worst.max(rep.lhs / rep.rhs);
        }
        all_hold &= rep.holds;
    }
    report(
        "criterion 08 (Dirichlet L1 estimate, 50 random instances)",
        all_hold,
        &format!("all hold with 5% slack; worst lhs/rhs = {worst:.4}; {:.1}s", t0.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_09_picone_hardy_recovery() {
    let t0 = std::time::Instant::now();
    let g = grid1(255);
    let h = g.h()[0];
    let u1 = GridFunction::constant(&g, 1.0);
    let u2 = GridFunction::from_fn(&g, |x| x[0]);
    let w = picone_improve(&u1, &u2).unwrap();
    let mut nodewise_ok = true;
    let mut worst_rel = 0.0f64;
    for i in 1..g.node_count() {
        let x = g.node_coords(i)[0];
        let want = 1.0 / (4.0 * x * x);
        let rel = (w.values()[i] - want).abs() / want;
        worst_rel = worst_rel.max(rel / (4.0 * h * h / (x * x)));
        if rel > 4.0 * h * h / (x * x) {
            nodewise_ok = false;
        }
    }
    let g5 = grid1(511);
    let u1b = GridFunction::constant(&g5, 1.0);
    let u2b = GridFunction::from_fn(&g5, |x| x[0]);
    let wb = picone_improve(&u1b, &u2b).unwrap();
    let form = DiscreteForm::laplacian(&g5, &g5.full_mask()).unwrap();
    let (ok, gap) = improvement_check(&form, &wb, &AapOpts::default()).unwrap();
    report(
        "criterion 09 (Picone/Hardy recovery)",
        nodewise_ok && ok && gap >= 0.95,
        &format!(
            "w matches 1/(4x^2) within 4h^2/x^2 away from the first node (worst fraction {worst_rel:.3}); \
             improvement gap = {gap:.4} >= 0.95; {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_10_aap_constructor_and_verifier() {
    let t0 = std::time::Instant::now();
    let opts = AapOpts::default();

    // 1D constant well
    let g = grid1(127);
    let field = eval_catalog(&PotentialSpec::Constant { c: -5.0 }, &g).unwrap();
    let sup = construct_supersolution(&field, &g, 3, &[1.0, 10.0], &opts).unwrap();
    let form = DiscreteForm::assemble(
        &g,
        &field.truncate_negative(sup.normalization.truncation),
        &g.full_mask(),
    )
    .unwrap();
    let scale = residual_scale(&form, &sup.u);
    let min_res = sup.residual.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let pos_ok = sup.u.values().iter().all(|v| *v > 0.0);
    let norm_ok = (sup.normalization.min_over_ball - 1.0).abs() <= 1e-12;
    let res_ok = min_res >= -1e-6 * scale;
    let k = g.compact_mask(&[(0.25, 0.75)]).unwrap();
    let battery = spectragap::potential::spike_battery(&g, &k, 11, 4);
    let rep1 = verify_aap(&form, &sup, &sup.residual, &battery, &opts).unwrap();

    // 3D Hardy at the sharp constant, pole inside the box
    let g3 = Grid::new(3, &[(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)], &[48, 48, 48]).unwrap();
    let hn = hardy_constant(3);
    let spec3 = PotentialSpec::Hardy { center: vec![0.51, 0.49, 0.5], c: hn };
    let field3 = eval_catalog(&spec3, &g3).unwrap();
    let sup3 = construct_supersolution(&field3, &g3, 3, &[1.0, 10.0, 100.0], &opts).unwrap();
    let form3 = DiscreteForm::assemble(
        &g3,
        &field3.truncate_negative(sup3.normalization.truncation),
        &g3.full_mask(),
    )
    .unwrap();
    let scale3 = residual_scale(&form3, &sup3.u);
    let min_res3 = sup3.residual.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let pos3 = sup3.u.values().iter().all(|v| *v > 0.0);
    let norm3 = (sup3.normalization.min_over_ball - 1.0).abs() <= 1e-12;
    let res3 = min_res3 >= -1e-6 * scale3;
    let k3 = g3.compact_mask(&[(0.25, 0.75), (0.25, 0.75), (0.25, 0.75)]).unwrap();
    let battery3 = spectragap::potential::spike_battery(&g3, &k3, 13, 3);
    let rep3 = verify_aap(&form3, &sup3, &sup3.residual, &battery3, &opts).unwrap();

    report(
        "criterion 10 (AAP constructor + verifier)",
        pos_ok && norm_ok && res_ok && rep1.passed && rep1.gap >= 0.95
            && pos3 && norm3 && res3 && rep3.passed && rep3.gap >= 0.95,
        &format!(
            "1D: min u > 0 {pos_ok}, B0-normalized {norm_ok}, min residual {min_res:.2e} >= -1e-6*{scale:.2e}, gap {:.5}; \
             3D: positivity {pos3}, normalized {norm3}, min residual {min_res3:.2e} >= -1e-6*{scale3:.2e}, gap {:.5}; {:.1}s",
            rep1.gap,
            rep3.gap,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_11_divergence_form_identity() {
    let t0 = std::time::Instant::now();
    let mut all_ok = true;
    let mut detail = String::new();
    // 1D battery
    for (name, fgen) in [
        ("const", Box::new(|_: &[f64]| 0.8) as Box<dyn Fn(&[f64]) -> f64>),
        ("cos", Box::new(|x: &[f64]| (2.0 * x[0]).cos())),
        ("poly", Box::new(|x: &[f64]| 0.5 + x[0] * (1.0 - x[0]))),
    ] {
        let mut residuals = Vec::new();
        for &n in &[127usize, 255, 511] {
            let g = grid1(n);
            let fc = GridFunction::from_fn(&g, &fgen);
            let field = spectragap::potential::divergence_form(std::slice::from_ref(&fc), &g, &[]).unwrap();
            let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
            let xi = GridFunction::from_fn(&g, |x| (PI * x[0]).sin());
            residuals.push(magnetic_identity_check(&form, &[fc], &[], &xi).unwrap());
        }
        for w in residuals.windows(2) {
            if w[0] / w[1] < 1.7 {
                all_ok = false;
            }
        }
        let rs: Vec<String> = residuals.iter().map(|r| format!("{r:.3e}")).collect();
        detail.push_str(&format!("1D {name}: [{}]; ", rs.join(", ")));
    }
    // 2D
    let mut residuals2 = Vec::new();
    for &n in &[31usize, 63, 127] {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[n, n]).unwrap();
        let fx = GridFunction::from_fn(&g, |x| (1.5 * x[0] + 0.3 * x[1]).cos());
        let fy = GridFunction::from_fn(&g, |x| x[0] * x[1]);
        let comps = vec![fx, fy];
        let field = spectragap::potential::divergence_form(&comps, &g, &[]).unwrap();
        let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
        let xi = GridFunction::from_fn(&g, |x| (PI * x[0]).sin() * (PI * x[1]).sin());
        residuals2.push(magnetic_identity_check(&form, &comps, &[], &xi).unwrap());
    }
    for w in residuals2.windows(2) {
        if w[0] / w[1] < 1.7 {
            all_ok = false;
        }
    }
    let rs2: Vec<String> = residuals2.iter().map(|r| format!("{r:.3e}")).collect();
    detail.push_str(&format!("2D: [{}]", rs2.join(", ")));
    report(
        "criterion 11 (divergence-form identity residual halves)",
        all_ok,
        &format!("{detail}; {:.1}s", t0.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_12_oscillation_probe() {
    let t0 = std::time::Instant::now();
    let eps = [1e-2, 1e-3, 1e-4, 1e-5];
    let div = oscillation_probe(0.05, -0.9, -0.2, &eps).unwrap();
    let conv = oscillation_probe(0.05, -0.3, -0.2, &eps).unwrap();
    // independent radial-quadrature oracle with oscillation-resolving panels
    let oracle = |alpha: f64, beta: f64, e: f64| -> f64 {
        let g = |r: f64| -> f64 {
            let ra = r.powf(alpha);
            (alpha * ra * ra.cos() - ra.sin()).abs() * (r.powf(beta) - 1.0)
        };
        let mut acc = 0.0f64;
        let mut r1 = 1.0f64;
        while r1 > e {
            let ra = r1.powf(alpha);
            let r0 = ((ra + PI / 16.0).powf(1.0 / alpha)).max(e);
            let m = 0.5 * (r0 + r1);
            acc += (r1 - r0) / 6.0 * (g(r0) + 4.0 * g(m) + g(r1));
            r1 = r0;
        }
        0.05f64.sqrt() * 2.0 * PI * acc
    };
    let mut oracle_ok = true;
    for (e, i) in &div.intensities {
        let want = oracle(-0.9, -0.2, *e);
        if (i - want).abs() > 5e-3 * want {
            oracle_ok = false;
        }
    }
    report(
        "criterion 12 (oscillation probe)",
        div.divergent && div.slope > 0.05 && !conv.divergent && conv.slope.abs() < 0.03 && oracle_ok,
        &format!(
            "(-0.9,-0.2): slope {:.4} divergent; (-0.3,-0.2): slope {:.4} -> 0; oracle match {oracle_ok}; {:.1}s",
            div.slope,
            conv.slope,
            t0.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_13_invariant_suites() {
    use rand::{Rng, SeedableRng};
    let t0 = std::time::Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7_2026);
    let cases = 100;

    // (a) form symmetry: |a(xi,eta) - a(eta,xi)| tiny
    for _ in 0..cases {
        let n = rng.random_range(4..24);
        let g = grid1(n);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let field = PotentialField::from_node_values(vals);
        let form = DiscreteForm::assemble(&g, &field, &g.full_mask()).unwrap();
        let xi = GridFunction::from_fn(&g, |_| rng.random_range(-1.0..1.0));
        let eta = GridFunction::from_fn(&g, |_| rng.random_range(-1.0..1.0));
        let a = form.bilinear(&xi, &eta).unwrap();
        let b = form.bilinear(&eta, &xi).unwrap();
        let scale = form.qv(&xi).unwrap().abs() + form.qv(&eta).unwrap().abs();
        assert!((a - b).abs() <= 8.0 * f64::EPSILON * scale.max(1e-300), "symmetry");
    }

    // (b) V-monotonicity of qv
    for _ in 0..cases {
        let n = rng.random_range(4..24);
        let g = grid1(n);
        let v2: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v1: Vec<f64> = v2.iter().map(|v| v + rng.random_range(0.0..2.0)).collect();
        let f1 = DiscreteForm::assemble(&g, &PotentialField::from_node_values(v1), &g.full_mask()).unwrap();
        let f2 = DiscreteForm::assemble(&g, &PotentialField::from_node_values(v2), &g.full_mask()).unwrap();
        let xi = GridFunction::from_fn(&g, |_| rng.random_range(-1.0..1.0));
        assert!(f1.qv(&xi).unwrap() >= f2.qv(&xi).unwrap() - 1e-12, "V-monotonicity");
    }

    // (c) mask monotonicity of lambda_1 (Dirichlet bracketing)
    for _ in 0..cases {
        let n = 31;
        let g = grid1(n);
        let lo = rng.random_range(0.05..0.3);
        let hi = rng.random_range(0.7..0.95);
        let inner = g.compact_mask(&[(lo + 0.1, hi - 0.1)]).unwrap();
        let outer = g.compact_mask(&[(lo, hi)]).unwrap();
        let li = principal_eig(&DiscreteForm::laplacian(&g, &inner).unwrap(), &EigOpts::default())
            .unwrap()
            .value;
        let lo_ = principal_eig(&DiscreteForm::laplacian(&g, &outer).unwrap(), &EigOpts::default())
            .unwrap()
            .value;
        assert!(li >= lo_ - 1e-7 * lo_.abs(), "mask monotonicity: {li} vs {lo_}");
    }

    // (d) capacity monotonicity and subadditivity
    for _ in 0..cases {
        let g = grid1(63);
        let a0 = rng.random_range(0.1..0.35);
        let a1 = a0 + rng.random_range(0.08..0.2);
        let b0 = rng.random_range(0.55..0.7);
        let b1 = b0 + rng.random_range(0.08..0.25);
        let k1 = g.compact_mask(&[(a0, a1)]).unwrap();
        let k2 = g.compact_mask(&[(b0, b1.min(0.95))]).unwrap();
        let cu = cap(&g, &k1.union(&k2)).unwrap().value;
        let c1 = cap(&g, &k1).unwrap().value;
        let c2 = cap(&g, &k2).unwrap().value;
        assert!(cu <= c1 + c2 + 1e-7 * (c1 + c2), "subadditivity");
        assert!(cu >= c1.max(c2) - 1e-7 * cu, "monotonicity");
    }

    // (e) obstacle complementarity
    for _ in 0..cases {
        let g = grid1(rng.random_range(16..48));
        let lo = rng.random_range(0.2..0.45);
        let hi = lo + rng.random_range(0.1..0.3);
        let k = g.compact_mask(&[(lo, hi)]).unwrap();
        let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
        let obs = Obstacle::level_on_mask(&g, &k, 1.0);
        let sol = obstacle_solve(&form, &obs, 200_000, false).unwrap();
        let (active_neg, free_abs) = complementarity_residual(&form, &obs, &sol.xi);
        assert!(active_neg <= 1e-8 && free_abs <= 1e-8, "complementarity");
    }

    // (f) verdict weight-scaling invariance
    let grids = vec![grid1(15), grid1(31), grid1(63)];
    let k = RegionSpec::Box { lo: vec![1.0 / 3.0], hi: vec![2.0 / 3.0] };
    let base = classify(
        &PotentialSpec::Constant { c: 0.0 },
        &grids,
        &k,
        &WeightSpec::IndicatorK,
        &ClassifyOpts::default(),
    )
    .unwrap();
    for _ in 0..cases {
        let t = rng.random_range(0.05..20.0);
        let v = classify(
            &PotentialSpec::Constant { c: 0.0 },
            &grids,
            &k,
            &WeightSpec::ScaledIndicatorK { t },
            &ClassifyOpts::default(),
        )
        .unwrap();
        assert_eq!(v.tag, base.tag, "weight-scaling changed the verdict at t={t}");
        for (sa, sb) in base.gap_history.iter().zip(&v.gap_history) {
            assert!((sb.mu - sa.mu / t).abs() <= 1e-6 * sa.mu.abs(), "gap scaling at t={t}");
        }
    }

    report(
        "criterion 13 (invariant suites, 6 x 100 cases)",
        true,
        &format!(
            "form symmetry, V-monotonicity, mask monotonicity, capacity monotonicity/subadditivity, \
             obstacle complementarity, weight-scaling invariance; {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

/// Independent weighted-gap oracle used by the classify criterion: dense
/// Schur complement of the 1D tridiagonal onto K, then Sturm bisection.
#[test]
fn classify_gap_value_cross_oracle() {
    let n = 511usize;
    let h = 1.0 / (n as f64 + 1.0);
    let g = grid1(n);
    let k = g.compact_mask(&[(1.0 / 3.0, 2.0 / 3.0)]).unwrap();
    let kidx: Vec<usize> = k.iter_set().collect();
    let m = kidx.len();
    let l = kidx[0];
    let r = n - 1 - kidx[m - 1];
    let off = -1.0 / (h * h);
    // eliminating a Dirichlet-terminated path of length L attached at one
    // end adds off^2 * (T^{-1})_{LL} = off^2 h^2 L/(L+1) to that diagonal
    let corr = |len: usize| -> f64 {
        if len == 0 {
            0.0
        } else {
            off * off * (h * h) * (len as f64) / (len as f64 + 1.0)
        }
    };
    let mut diag = vec![2.0 / (h * h); m];
    diag[0] -= corr(l);
    diag[m - 1] -= corr(r);
    let mu_oracle = sturm_lambda_min(&diag, off, h);
    // library route
    let form = DiscreteForm::laplacian(&g, &g.full_mask()).unwrap();
    let mw = MassMatrix::indicator(&g, &k);
    let wg = weighted_gap(&form, &mw, &EigOpts::default()).unwrap();
    println!(
        "[oracle] weighted gap: library {:.8} vs dense Schur oracle {:.8}",
        wg.mu, mu_oracle
    );
    assert!((wg.mu - mu_oracle).abs() <= 1e-6 * mu_oracle);
    // continuum matching value sqrt(mu) tan(sqrt(mu)/6) = 3
    assert!((mu_oracle - 15.3635).abs() < 0.05);
}
