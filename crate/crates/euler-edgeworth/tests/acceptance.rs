//! Acceptance suite: every criterion below prints one pass/fail line and
//! fails the build when its stated tolerance is violated. Tolerances are
//! pinned in code; run with `cargo test --test acceptance -- --nocapture`
//! to see the measured values.

use std::sync::Arc;

use euler_edgeworth::affine::{affine_euler, affine_explicit, AffineCoeffs};
use euler_edgeworth::edgeworth::{
    hermite, simpson, studentized_coeffs, studentized_density, MarginalVDensity, PairDensity,
};
use euler_edgeworth::experiments::{
    clt_validation, density_improvement, leading_term_gaps, limit_variance, second_order_check,
    strong_error, symbol_sample, weak_error, Campaign, TestFunction,
};
use euler_edgeworth::grid::TimeGrid;
use euler_edgeworth::limitlaw::{kernel_and_c, LimitLawProfile};
use euler_edgeworth::malliavin::{
    h_coefficients, malliavin_c, malliavin_dsigma, malliavin_dx, KbarMode, VariationState,
};
use euler_edgeworth::model::{builtin_model, BuiltinKind};
use euler_edgeworth::pathsim::{sample_brownian, BrownianPath, CoupledPaths};
use euler_edgeworth::rng::CounterRng;

const SEED: u64 = 20_260_809;

fn gbm(mu: f64, sigma: f64, x0: f64) -> euler_edgeworth::model::DiffusionModel {
    builtin_model(BuiltinKind::Gbm, &[mu, sigma, x0]).unwrap()
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {id:02} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} {name} failed: {detail}");
}

/// Criterion 1: sample variance of V^n_1 for GBM(0, 0.2, 1) at n = 200,
/// m = 64, M = 1e5 within 5% of E[Sigma_1^2] C_1 = e^{0.04} 8e-4.
#[test]
fn criterion_01_limit_variance() {
    let mut campaign = Campaign::new(gbm(0.0, 0.2, 1.0), vec![200], 64, 100_000, 1.0, SEED);
    campaign.h_paths = 512;
    campaign.h_n = 64;
    campaign.h_m = 16;
    campaign.inner_draws = 16;
    let check = limit_variance(&campaign, 200).unwrap();
    let closed_form = (0.04f64).exp() * 8e-4;
    let rel = (check.var_v.value - closed_form).abs() / closed_form;
    let pred_rel = (check.predicted - closed_form).abs() / closed_form;
    report(
        1,
        "limit variance",
        rel < 0.05 && pred_rel < 0.01,
        &format!(
            "var {:.6e} vs e^{{0.04}} 8e-4 = {closed_form:.6e}, rel {rel:.4}",
            check.var_v.value
        ),
    );
}

/// Criterion 2: median over 1e4 paths of sup_t |V^n - Vbar^n| decreases
/// monotonically over n in {16, 64, 256} and the n = 256 value is at most a
/// third of the n = 16 value.
#[test]
fn criterion_02_leading_term() {
    let campaign = Campaign::new(
        gbm(0.0, 0.2, 1.0),
        vec![16, 64, 256],
        64,
        10_000,
        1.0,
        SEED,
    );
    let gaps = leading_term_gaps(&campaign).unwrap();
    let medians: Vec<f64> = gaps.iter().map(|(_, g)| *g).collect();
    let monotone = medians[1] < medians[0] && medians[2] < medians[1];
    let third = medians[2] <= medians[0] / 3.0;
    report(
        2,
        "leading term approximation",
        monotone && third,
        &format!("medians {:?}", medians.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()),
    );
}

/// Criterion 3: mean and variance of sqrt(n)(V^n_1 - Vbar^n_1) for GBM at
/// n = 256, M = 1e5 match the conditional-mean/inner-MC predictions within
/// 10%.
#[test]
fn criterion_03_second_order() {
    let mut campaign = Campaign::new(gbm(0.0, 0.2, 1.0), vec![256], 64, 100_000, 1.0, SEED);
    campaign.h_paths = 2048;
    campaign.h_n = 64;
    campaign.h_m = 16;
    campaign.inner_draws = 4000;
    let check = second_order_check(&campaign, 256).unwrap();
    let mean_rel = (check.mean.value - check.mean_predicted).abs() / check.mean_predicted.abs();
    let var_rel = (check.variance.value - check.var_predicted).abs() / check.var_predicted;
    report(
        3,
        "second-order term",
        mean_rel < 0.10 && var_rel < 0.10,
        &format!(
            "mean {:.4e} vs {:.4e} (rel {mean_rel:.3}), var {:.4e} vs {:.4e} (rel {var_rel:.3})",
            check.mean.value, check.mean_predicted, check.variance.value, check.var_predicted
        ),
    );
}

/// Criterion 4: all covariance z-scores of (M, A1, A2, W, C-hat) within +-4
/// at M = 1e5, n = 256, including the exact-zero pattern entries.
#[test]
fn criterion_04_clt_matrix() {
    let campaign = Campaign::new(gbm(0.0, 0.2, 1.0), vec![256], 64, 100_000, 1.0, SEED);
    let table = clt_validation(&campaign, 256).unwrap();
    let worst = table
        .entries
        .iter()
        .map(|e| e.z_score.abs())
        .fold(0.0f64, f64::max);
    let detail: Vec<String> = table
        .entries
        .iter()
        .map(|e| format!("{}: z={:+.2}", e.name, e.z_score))
        .collect();
    report(
        4,
        "CLT coefficient matrix",
        worst < 4.0,
        &detail.join(", "),
    );
}

/// Criterion 5: GBM strong error with p = 2 has log-log slope -0.5 +- 0.05
/// and predicted/empirical ratio 1 +- 0.1 at n = 256; the constant-diffusion
/// control has slope near -1.
#[test]
fn criterion_05_strong_error() {
    let mut campaign = Campaign::new(
        gbm(0.0, 0.2, 1.0),
        vec![16, 32, 64, 128, 256],
        1,
        100_000,
        1.0,
        SEED,
    );
    campaign.h_paths = 1024;
    campaign.h_n = 64;
    campaign.h_m = 16;
    campaign.inner_draws = 2000;
    let table = strong_error(&campaign, 2.0).unwrap();
    let slope_ok = (table.fit.slope + 0.5).abs() < 0.05;
    let ratio = table.rows.last().unwrap().ratio.unwrap();
    let ratio_ok = (ratio - 1.0).abs() < 0.1;

    let control_model = builtin_model(BuiltinKind::ConstDiff, &[0.8, 0.3, 1.0]).unwrap();
    let control = Campaign::new(control_model, vec![8, 16, 32, 64], 64, 20_000, 1.0, SEED);
    let control_table = strong_error(&control, 2.0).unwrap();
    let control_ok = (control_table.fit.slope + 1.0).abs() < 0.15;
    report(
        5,
        "strong error",
        slope_ok && ratio_ok && control_ok,
        &format!(
            "slope {:.4}, ratio(n=256) {ratio:.4}, control slope {:.4}",
            table.fit.slope, control_table.fit.slope
        ),
    );
}

/// Criterion 6: weak error of f(x) = x^2 for GBM has slope -1 +- 0.1 and the
/// predicted constant covers the empirical one within 15% relative error
/// given the Monte Carlo error bars (M = 1e6, common random numbers).
#[test]
fn criterion_06_weak_error() {
    let mut campaign = Campaign::new(
        gbm(0.0, 0.2, 1.0),
        vec![8, 16, 32, 64, 128],
        1,
        1_000_000,
        1.0,
        SEED,
    );
    campaign.h_paths = 8192;
    campaign.h_n = 64;
    campaign.h_m = 16;
    campaign.inner_draws = 64;
    let table = weak_error(&campaign, TestFunction::Square).unwrap();
    let fit = table.fit.unwrap();
    let slope_ok = (fit.slope + 1.0).abs() < 0.1;
    let pred = table.predicted.value;
    let coupling_ok = table.rows.iter().all(|r| r.coupling_ok);
    let mut covered = true;
    let mut details = vec![format!(
        "slope {:.4}, predicted {:.4e}+-{:.1e}",
        fit.slope, pred, table.predicted.stderr
    )];
    for row in &table.rows {
        let bar = 0.15 * pred.abs() + 3.0 * row.scaled.stderr + 3.0 * table.predicted.stderr;
        let gap = (row.scaled.value - pred).abs();
        covered &= gap <= bar;
        details.push(format!("n={}: {:.3e}", row.n, row.scaled.value));
    }
    report(
        6,
        "weak error",
        slope_ok && covered && coupling_ok,
        &details.join(", "),
    );
}

/// Criterion 7: corrected sup-CDF distance beats the uncorrected one for
/// every n in {50, 100, 200} at M = 1e6, and the d1 regression slope is
/// steeper (more negative) than the d0 slope.
#[test]
fn criterion_07_density_improvement() {
    let mut campaign = Campaign::new(
        gbm(0.0, 0.2, 1.0),
        vec![50, 100, 200],
        1,
        1_000_000,
        1.0,
        SEED,
    );
    campaign.h_paths = 2048;
    campaign.h_n = 64;
    campaign.h_m = 16;
    campaign.inner_draws = 10_000;
    let table = density_improvement(&campaign).unwrap();
    let all_improved = table.rows.iter().all(|r| r.improved);
    let fit0 = table.fit_d0.unwrap();
    let fit1 = table.fit_d1.unwrap();
    let steeper = fit1.slope < fit0.slope;
    let detail: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("n={}: d0={:.4e} d1={:.4e}", r.n, r.d0, r.d1))
        .collect();
    report(
        7,
        "studentized Edgeworth improvement",
        all_improved && steeper,
        &format!(
            "{}; slopes d0 {:.3} d1 {:.3}",
            detail.join(", "),
            fit0.slope,
            fit1.slope
        ),
    );
}

fn bump(cp: &CoupledPaths, r: usize, eps: f64) -> CoupledPaths {
    let mut inc = cp.path.increments().to_vec();
    inc[r] += eps;
    let path = BrownianPath::from_increments(cp.path.grid_arc(), 0, 0, inc);
    CoupledPaths::from_path(&cp.model, path).unwrap()
}

/// Criterion 8: variational-system derivatives match pathwise bump finite
/// differences: D_r X_t, D_r Sigma_t and D_t C within 1e-3 relative on
/// LinearSDE, D_tD_tC within 5e-2; and D_t C vanishes identically (1e-10)
/// for GBM.
#[test]
fn criterion_08_malliavin_gradients() {
    let model = builtin_model(BuiltinKind::LinearSde, &[0.05, -0.2, 0.4, 0.25, 1.0]).unwrap();
    let rng = CounterRng::new(SEED, 999);
    // first order at m = 512
    let grid = Arc::new(TimeGrid::new(32, 512, &[1.0]).unwrap());
    let mut worst_first: f64 = 0.0;
    let eps = 1e-5;
    for stream in 0..10u64 {
        let cp = CoupledPaths::from_path(&model, sample_brownian(&grid, SEED, stream)).unwrap();
        let vs = VariationState::compute(&cp);
        let steps = cp.grid().steps();
        for k in 0..10u64 {
            let r = (rng.normal(stream * 100 + k).abs() * 0.08 * steps as f64) as usize % (steps / 2);
            let t = steps / 2 + 1 + (r * 7919) % (steps / 2 - 2);
            let bumped = bump(&cp, r, eps);
            let slope_x = (bumped.x_ref[t] - cp.x_ref[t]) / eps;
            let slope_s = (bumped.sigma[t] - cp.sigma[t]) / eps;
            let ex = (malliavin_dx(&cp, &vs, r, t) - slope_x).abs() / slope_x.abs();
            let es = (malliavin_dsigma(&cp, &vs, r, t) - slope_s).abs() / slope_s.abs();
            worst_first = worst_first.max(ex).max(es);
        }
    }

    // D_t C bump oracle on LinearSDE
    let grid_c = Arc::new(TimeGrid::new(32, 512, &[1.0]).unwrap());
    let cp = CoupledPaths::from_path(&model, sample_brownian(&grid_c, SEED, 2)).unwrap();
    let vs = VariationState::compute(&cp);
    let p = LimitLawProfile::compute(&cp, 1.0, 8).unwrap();
    let mc = malliavin_c(&cp, &vs, &p.k_path, &p.j_path, p.t_index);
    let mut worst_dc: f64 = 0.0;
    for &r in &[800usize, 4000, 9000, 14000] {
        let b = bump(&cp, r, eps);
        let (_, c_b) = kernel_and_c(&b);
        let slope = (c_b[p.t_index] - p.c_path[p.t_index]) / eps;
        worst_dc = worst_dc.max((mc.dc[r] - slope).abs() / slope.abs());
    }

    // D_tD_tC mixed bump oracle at m = 4096
    let grid_dd = Arc::new(TimeGrid::new(32, 4096, &[1.0]).unwrap());
    let cp2 = CoupledPaths::from_path(&model, sample_brownian(&grid_dd, SEED, 3)).unwrap();
    let vs2 = VariationState::compute(&cp2);
    let (k2, c2) = kernel_and_c(&cp2);
    let t_end = cp2.grid().index_of_time(1.0).unwrap();
    let j2: Vec<f64> = (0..k2.len())
        .map(|i| {
            let x = cp2.x_ref[i];
            -k2[i] * (cp2.model.b1(x) * cp2.model.b1(x) + cp2.model.b(x) * cp2.model.b2(x))
        })
        .collect();
    let mc2 = malliavin_c(&cp2, &vs2, &k2, &j2, t_end);
    let mut worst_ddc: f64 = 0.0;
    let eps2 = 2e-4;
    for &r in &[8192usize, 20480, 45056] {
        let c00 = c2[t_end];
        let c10 = kernel_and_c(&bump(&cp2, r, eps2)).1[t_end];
        let c01 = kernel_and_c(&bump(&cp2, r - 1, eps2)).1[t_end];
        let c11 = kernel_and_c(&bump(&bump(&cp2, r, eps2), r - 1, eps2)).1[t_end];
        let second = (c11 - c10 - c01 + c00) / (eps2 * eps2);
        worst_ddc = worst_ddc.max((mc2.ddc[r] - second).abs() / second.abs());
    }

    // GBM: D_t C identically zero
    let gbm_model = gbm(0.1, 0.2, 1.0);
    let grid_g = Arc::new(TimeGrid::new(32, 64, &[1.0]).unwrap());
    let cpg = CoupledPaths::from_path(&gbm_model, sample_brownian(&grid_g, SEED, 4)).unwrap();
    let vsg = VariationState::compute(&cpg);
    let pg = LimitLawProfile::compute(&cpg, 1.0, 8).unwrap();
    let mcg = malliavin_c(&cpg, &vsg, &pg.k_path, &pg.j_path, pg.t_index);
    let worst_gbm = mcg
        .dc
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max);

    report(
        8,
        "Malliavin gradient suite",
        worst_first < 1e-3 && worst_dc < 1e-3 && worst_ddc < 5e-2 && worst_gbm < 1e-10,
        &format!(
            "first order {worst_first:.2e}, D_tC {worst_dc:.2e}, D_tD_tC {worst_ddc:.2e}, GBM D_tC {worst_gbm:.2e}"
        ),
    );
}

/// Criterion 9: per-path symbol identities H4 = H5/2, 4H6 = H7 = H8 to 1e-8
/// relative, and the Hermite values H3(0) = 0, H3(1) = -2, H5(1) = 6.
#[test]
fn criterion_09_symbol_identities() {
    let model = builtin_model(BuiltinKind::LinearSde, &[0.05, -0.2, 0.4, 0.25, 1.0]).unwrap();
    let grid = Arc::new(TimeGrid::new(32, 16, &[1.0]).unwrap());
    let mut worst: f64 = 0.0;
    for stream in 0..100u64 {
        let cp = CoupledPaths::from_path(&model, sample_brownian(&grid, SEED, stream)).unwrap();
        let p = LimitLawProfile::compute(&cp, 1.0, 64).unwrap();
        let h = h_coefficients(&cp, &p, KbarMode::PathwiseK).unwrap();
        let scale = h.h5.abs() + h.h7.abs() + 1e-300;
        worst = worst
            .max((h.h4 - 0.5 * h.h5).abs() / scale)
            .max((4.0 * h.h6 - h.h7).abs() / scale)
            .max((h.h7 - h.h8).abs() / scale);
    }
    let hermite_ok = hermite(3, 0.0).unwrap() == 0.0
        && hermite(3, 1.0).unwrap() == -2.0
        && hermite(5, 1.0).unwrap() == 6.0;
    report(
        9,
        "symbol identities",
        worst < 1e-8 && hermite_ok,
        &format!("worst relative identity deviation {worst:.2e}"),
    );
}

/// Criterion 10: every density kind integrates to 1 +- 1e-6; the n^{-1/2}
/// correction integrates to 0 +- 1e-6 (studentized) / +- 1e-4 (pair).
#[test]
fn criterion_10_density_normalization() {
    // studentized and GBM-sample pair/marginal
    let mut campaign = Campaign::new(gbm(0.0, 0.2, 1.0), vec![64], 8, 64, 1.0, SEED);
    campaign.h_paths = 256;
    campaign.h_n = 32;
    campaign.h_m = 8;
    campaign.inner_draws = 2000;
    let sample = symbol_sample(&campaign, KbarMode::PathwiseK).unwrap();
    let coeffs = studentized_coeffs(&sample).unwrap();
    let stud_total = simpson(|y| studentized_density(&coeffs, 64, y).total, -12.0, 12.0, 4001);
    let stud_corr = simpson(
        |y| studentized_density(&coeffs, 64, y).correction,
        -12.0,
        12.0,
        4001,
    );

    let pair = PairDensity::from_sample(&sample, 64).unwrap();
    assert!(pair.deterministic_c, "GBM sample has deterministic C");
    let c0 = sample[0].c_t;
    let pair_slice = pair.slice(c0).unwrap();
    let zmax = 12.0 * c0.sqrt();
    let pair_total = simpson(|z| pair_slice.eval(z).total, -zmax, zmax, 4001);
    let pair_corr = simpson(|z| pair_slice.eval(z).correction, -zmax, zmax, 4001);

    let marginal = MarginalVDensity::from_sample(&sample, 64).unwrap();
    let zmax_m = 14.0
        * sample
            .iter()
            .map(|h| (h.sigma_t * h.sigma_t * h.c_t).sqrt())
            .fold(0.0, f64::max);
    let marg_total = simpson(|z| marginal.evaluate(z).total, -zmax_m, zmax_m, 4001);
    let marg_corr = simpson(|z| marginal.evaluate(z).correction, -zmax_m, zmax_m, 4001);

    // random-C pair density on a synthetic sample exercises the KDE route
    let rng = CounterRng::new(4, 4);
    let synth: Vec<_> = (0..400)
        .map(|i| {
            let z = rng.normal(i as u64);
            let c = (0.4 + 0.08 * z).exp();
            euler_edgeworth::malliavin::SymbolCoefficients {
                h1: -0.1 * c,
                h2: 0.2,
                h3: 0.05,
                h4: 0.01 * c,
                h5: 0.02 * c,
                h6: 0.255 * c * c / 100.0,
                h7: 0.0102 * c * c,
                h8: 0.0102 * c * c,
                c_t: c,
                sigma_t: 1.0,
            }
        })
        .collect();
    let pair_r = PairDensity::from_sample(&synth, 64).unwrap();
    let (lo, hi) = pair_r.x_support();
    let zmax_r = 12.0 * hi.sqrt();
    let nx = 2001;
    let hstep = (hi - lo) / (nx - 1) as f64;
    let (mut pr_total, mut pr_corr) = (0.0, 0.0);
    for i in 0..nx {
        let x = lo + hstep * i as f64;
        let w = if i == 0 || i == nx - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let slice = pair_r.slice(x).unwrap();
        pr_total += w * simpson(|z| slice.eval(z).total, -zmax_r, zmax_r, 801);
        pr_corr += w * simpson(|z| slice.eval(z).correction, -zmax_r, zmax_r, 801);
    }
    pr_total *= hstep / 3.0;
    pr_corr *= hstep / 3.0;

    let pass = (stud_total - 1.0).abs() < 1e-6
        && stud_corr.abs() < 1e-6
        && (pair_total - 1.0).abs() < 1e-6
        && pair_corr.abs() < 1e-4
        && (marg_total - 1.0).abs() < 1e-6
        && marg_corr.abs() < 1e-6
        && (pr_total - 1.0).abs() < 1e-6
        && pr_corr.abs() < 1e-4;
    report(
        10,
        "density normalization",
        pass,
        &format!(
            "studentized {stud_total:.8}/{stud_corr:.1e}, pair {pair_total:.8}/{pair_corr:.1e}, \
             marginal {marg_total:.8}/{marg_corr:.1e}, random-C pair {pr_total:.8}/{pr_corr:.1e}"
        ),
    );
}

/// Criterion 11: explicit affine-SDE solution vs direct fine Euler on a
/// common path: the RMS gap halves (within 20%) when the fine step halves.
/// (The affine family here has additive noise; with multiplicative noise the
/// mutual gap is Milstein-limited at sqrt(h).)
#[test]
fn criterion_11_affine_oracle() {
    let rms_gap = |m: usize| {
        let grid = Arc::new(TimeGrid::new(8, m, &[]).unwrap());
        let steps = grid.steps();
        let mut sq = 0.0;
        let paths = 800u64;
        for s in 0..paths {
            let p = sample_brownian(&grid, SEED, s);
            let c: Vec<f64> = (0..steps).map(|i| 0.3 - 0.2 * grid.times()[i]).collect();
            let ct: Vec<f64> = (0..steps).map(|i| 0.1 + 0.2 * grid.times()[i]).collect();
            let d = vec![0.0; steps];
            let dtl: Vec<f64> = (0..steps).map(|i| 0.25 + 0.1 * grid.times()[i]).collect();
            let coeffs = AffineCoeffs {
                c: &c,
                c_tilde: &ct,
                d: &d,
                d_tilde: &dtl,
            };
            let exact = affine_explicit(&grid, p.increments(), &coeffs, 1.0);
            let euler = affine_euler(&grid, p.increments(), &coeffs, 1.0);
            sq += (exact[steps] - euler[steps]).powi(2);
        }
        (sq / paths as f64).sqrt()
    };
    let g1 = rms_gap(32);
    let g2 = rms_gap(64);
    let ratio = g1 / g2;
    report(
        11,
        "affine solution oracle",
        (ratio - 2.0).abs() <= 0.4,
        &format!("gap ratio {ratio:.3} (target 2 +- 0.4)"),
    );
}

/// Criterion 12: a campaign rerun with identical config and seed produces
/// byte-identical CSVs at worker counts 1 and 8.
#[test]
fn criterion_12_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{"model":{"kind":"gbm","params":[0.05,0.2,1.0]},
            "grid":{"n_list":[8,16,32],"m":4,"t_points":[1.0]},
            "mc":{"paths":500,"seed":31415},
            "experiment":{"test_functions":["square"],
                          "h_paths":64,"h_n":16,"h_m":4,"inner_draws":200}}"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_euler-edgeworth");
    let run = |workers: &str, out: &str| {
        let status = std::process::Command::new(bin)
            .args([
                "rates",
                "--config",
                config_path.to_str().unwrap(),
                "--workers",
                workers,
                "--output-dir",
            ])
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    };
    run("1", "w1");
    run("8", "w8");
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("w1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.iter().any(|n| n.ends_with(".csv")));
    let mut all_equal = true;
    for name in &names {
        let a = std::fs::read(dir.path().join("w1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("w8").join(name)).unwrap();
        all_equal &= a == b;
    }
    report(
        12,
        "determinism across worker counts",
        all_equal,
        &format!("{} files byte-identical", names.len()),
    );
}
