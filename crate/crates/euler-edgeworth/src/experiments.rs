//! Monte Carlo campaigns: strong/weak error expansions, CLT validation,
//! corrected-vs-uncorrected density comparisons, and the second-order
//! expansion checks. Every campaign is a pure function of (config, seed):
//! paths are keyed by stream index, per-path results are collected in index
//! order and reduced pairwise, so reruns are bitwise identical at any worker
//! count.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::edgeworth::{
    simpson, studentized_cdf, studentized_coeffs, DensityError, MarginalVDensity,
    StudentizedCoeffs,
};
use crate::errorproc::{aux_processes, error_process, leading_term, m_bracket};
use crate::grid::{GridError, TimeGrid};
use crate::limitlaw::{kernel_and_c, LimitLawError, LimitLawProfile};
use crate::malliavin::{
    h_coefficients, weak_symbol_integrals, KbarMode, MalliavinError, SymbolCoefficients,
    VariationState,
};
use crate::model::DiffusionModel;
use crate::pathsim::{CoupledPaths, SimError};
use crate::stats::{covariance_with_stderr, log_log_fit, normal_cdf, Estimate, LineFit};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    LimitLaw(#[from] LimitLawError),
    #[error(transparent)]
    Malliavin(#[from] MalliavinError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("{0}")]
    Invalid(String),
}

/// A reproducible Monte Carlo campaign description.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub model: DiffusionModel,
    pub n_list: Vec<usize>,
    pub m: usize,
    pub paths: usize,
    pub t: f64,
    pub seed: u64,
    /// Size, refinement and coarse count of the symbol (limit-law) sample.
    pub h_paths: usize,
    pub h_n: usize,
    pub h_m: usize,
    /// Inner Monte Carlo draws for the N-row of Theta.
    pub inner_draws: usize,
}

impl Campaign {
    pub fn new(model: DiffusionModel, n_list: Vec<usize>, m: usize, paths: usize, t: f64, seed: u64) -> Campaign {
        Campaign {
            model,
            n_list,
            m,
            paths,
            t,
            seed,
            h_paths: 1024,
            h_n: 64,
            h_m: 16,
            inner_draws: 10_000,
        }
    }

    fn grid(&self, n: usize, m: usize) -> Result<Arc<TimeGrid>, CampaignError> {
        Ok(Arc::new(TimeGrid::new(n, m, &[self.t])?))
    }

    fn h_seed(&self) -> u64 {
        // distinct deterministic seed space for the symbol sample
        self.seed ^ 0x9d2c_5680_a5a5_1e35
    }
}

/// Map path streams to per-path values in parallel; results arrive in
/// stream order regardless of scheduling.
pub fn mc_map<T, F>(paths: usize, f: F) -> Result<Vec<T>, CampaignError>
where
    T: Send,
    F: Fn(u64) -> Result<T, CampaignError> + Sync,
{
    (0..paths as u64)
        .into_par_iter()
        .map(&f)
        .collect::<Result<Vec<T>, CampaignError>>()
}

/// Draw the symbol-coefficient sample: limit-law profiles plus Malliavin
/// coefficients along `h_paths` reference paths.
pub fn symbol_sample(
    campaign: &Campaign,
    mode: KbarMode,
) -> Result<Vec<SymbolCoefficients>, CampaignError> {
    let grid = campaign.grid(campaign.h_n, campaign.h_m)?;
    let seed = campaign.h_seed();
    mc_map(campaign.h_paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, seed, stream)?;
        let profile = LimitLawProfile::compute(&cp, campaign.t, campaign.inner_draws)?;
        profile.require_nondegenerate()?;
        Ok(h_coefficients(&cp, &profile, mode)?)
    })
}

// ---------------------------------------------------------------------------
// strong error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StrongErrorRow {
    pub n: usize,
    /// E[|U_n|^p]^{1/p} with delta-method standard error.
    pub empirical: Estimate,
    /// n^{-1/2} (int |z|^p p_n^{V_n}(z) dz)^{1/p}; None for degenerate models.
    pub predicted: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StrongErrorTable {
    pub p: f64,
    pub rows: Vec<StrongErrorRow>,
    pub fit: LineFit,
}

pub fn strong_error(campaign: &Campaign, p: f64) -> Result<StrongErrorTable, CampaignError> {
    if !(p >= 1.0) {
        return Err(CampaignError::Invalid(format!("p = {p} must be >= 1")));
    }
    // the marginal density needs the symbol sample only for nondegenerate models
    let sample = match symbol_sample(campaign, KbarMode::PathwiseK) {
        Ok(s) => Some(s),
        Err(CampaignError::LimitLaw(LimitLawError::Degenerate(_)))
        | Err(CampaignError::Malliavin(MalliavinError::DegenerateVariance(_))) => None,
        Err(e) => return Err(e),
    };
    let mut rows = Vec::new();
    for &n in &campaign.n_list {
        let grid = campaign.grid(n, campaign.m)?;
        let t_index = grid
            .index_of_time(campaign.t)
            .expect("t embedded in the grid");
        let values = mc_map(campaign.paths, |stream| {
            let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
            Ok((cp.x_euler[t_index] - cp.x_ref[t_index]).abs().powf(p))
        })?;
        let moment = Estimate::from_sample(&values);
        let root = moment.value.powf(1.0 / p);
        let empirical = Estimate {
            value: root,
            stderr: root / (p * moment.value) * moment.stderr,
        };
        let predicted = sample.as_ref().map(|s| {
            let density = MarginalVDensity::from_sample(s, n).expect("nonempty sample");
            let zmax = 14.0
                * s.iter()
                    .map(|h| (h.sigma_t * h.sigma_t * h.c_t).sqrt())
                    .fold(0.0, f64::max);
            let integral = simpson(|z| z.abs().powf(p) * density.evaluate(z).total, -zmax, zmax, 2001);
            integral.powf(1.0 / p) / (n as f64).sqrt()
        });
        rows.push(StrongErrorRow {
            n,
            empirical,
            predicted,
            ratio: predicted.map(|q| empirical.value / q),
        });
    }
    let fit = fit_rows(
        &rows.iter().map(|r| (r.n, r.empirical)).collect::<Vec<_>>(),
    )?;
    Ok(StrongErrorTable { p, rows, fit })
}

fn fit_rows(rows: &[(usize, Estimate)]) -> Result<LineFit, CampaignError> {
    let ns: Vec<f64> = rows.iter().map(|(n, _)| *n as f64).collect();
    let vals: Vec<f64> = rows.iter().map(|(_, e)| e.value).collect();
    let errs: Vec<f64> = rows.iter().map(|(_, e)| e.stderr).collect();
    log_log_fit(&ns, &vals, &errs).map_err(CampaignError::Invalid)
}

/// Rate regression on an arbitrary (n, value, stderr) table.
pub fn rate_regression(ns: &[f64], values: &[f64], stderrs: &[f64]) -> Result<LineFit, CampaignError> {
    if ns.len() < 3 {
        return Err(CampaignError::Invalid(
            "rate regression needs at least 3 points".into(),
        ));
    }
    log_log_fit(ns, values, stderrs).map_err(CampaignError::Invalid)
}

// ---------------------------------------------------------------------------
// weak error
// ---------------------------------------------------------------------------

/// Test function with coded derivatives for the weak-error expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestFunction {
    Identity,
    Square,
}

impl TestFunction {
    pub fn parse(s: &str) -> Option<TestFunction> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "x" => Some(TestFunction::Identity),
            "square" | "x2" | "x^2" => Some(TestFunction::Square),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Identity => "identity",
            TestFunction::Square => "square",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => x,
            TestFunction::Square => x * x,
        }
    }

    pub fn grad(&self, x: f64) -> f64 {
        match self {
            TestFunction::Identity => 1.0,
            TestFunction::Square => 2.0 * x,
        }
    }

    pub fn hess(&self, _x: f64) -> f64 {
        match self {
            TestFunction::Identity => 0.0,
            TestFunction::Square => 2.0,
        }
    }

    pub fn third(&self, _x: f64) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct WeakErrorRow {
    pub n: usize,
    /// E[f(X^n_T) - f(X_T)] with common random numbers.
    pub empirical: Estimate,
    /// n * empirical, the finite-n estimate of the constant.
    pub scaled: Estimate,
    /// Var(difference) < min variance of either term (coupling check).
    pub coupling_ok: bool,
}

#[derive(Debug, Clone)]
pub struct WeakErrorTable {
    pub f: TestFunction,
    pub rows: Vec<WeakErrorRow>,
    /// The predicted limit constant from the pair-density expansion.
    pub predicted: Estimate,
    /// Log-log fit of |empirical| against n; absent when a value is exactly
    /// zero (martingale test functions) or there are fewer than 3 points.
    pub fit: Option<LineFit>,
    /// Set when the reference is a fine-Euler surrogate rather than a
    /// closed-form solution.
    pub surrogate_warning: bool,
}

/// Exact mean of the Euler state at time t for affine drift a(x) = a0+a1 x,
/// following the coarse freezing of the scheme, and the exact mean of the
/// limiting diffusion. Returns None when the drift is not affine.
fn affine_drift_means(
    model: &crate::model::DiffusionModel,
    n: usize,
    t: f64,
) -> Option<(f64, f64)> {
    let a0 = model.a(0.0);
    let a1 = model.a1(0.0);
    let affine = [-1.3, 0.4, 2.7]
        .iter()
        .all(|&x| (model.a(x) - a0 - a1 * x).abs() <= 1e-12 * (1.0 + a0.abs() + (a1 * x).abs()))
        && [-1.3, 2.7].iter().all(|&x| model.a2(x) == 0.0);
    if !affine {
        return None;
    }
    let dt = 1.0 / n as f64;
    let whole = (t * n as f64).floor() as usize;
    let mut mean = model.x0();
    for _ in 0..whole {
        mean += (a0 + a1 * mean) * dt;
    }
    let rest = t - whole as f64 * dt;
    if rest > 1e-12 {
        mean += (a0 + a1 * mean) * rest;
    }
    let exact = if a1.abs() > 0.0 {
        model.x0() * (a1 * t).exp() + a0 * ((a1 * t).exp() - 1.0) / a1
    } else {
        model.x0() + a0 * t
    };
    Some((mean, exact))
}

pub fn weak_error(campaign: &Campaign, f: TestFunction) -> Result<WeakErrorTable, CampaignError> {
    let exact = campaign.model.has_exact_solution();
    let m = if exact { 1 } else { campaign.m.max(256) };
    let mut rows = Vec::new();
    for &n in &campaign.n_list {
        let grid = campaign.grid(n, m)?;
        let t_index = grid.index_of_time(campaign.t).expect("t on grid");
        // Antithetic pairs with a control variate on U_T = X^n_T - X_T: for
        // affine drift E[U_T] is exactly computable, and U explains almost
        // all of the coupled difference's variance, without which the n^{-1}
        // constant stays buried in Monte Carlo noise at any feasible M.
        let cv_mean = affine_drift_means(&campaign.model, n, campaign.t).map(|(me, mx)| me - mx);
        let pairs = mc_map(campaign.paths / 2, |stream| {
            let path = crate::pathsim::sample_brownian(&grid, campaign.seed, stream);
            let twin = path.antithetic();
            let eval = |p| -> Result<(f64, f64, f64, f64), CampaignError> {
                let cp = CoupledPaths::from_path(&campaign.model, p)?;
                let fe = f.eval(cp.x_euler[t_index]);
                let fr = f.eval(cp.x_ref[t_index]);
                Ok((fe - fr, cp.x_euler[t_index] - cp.x_ref[t_index], fe, fr))
            };
            Ok((eval(path)?, eval(twin)?))
        })?;
        let mut d_all = Vec::with_capacity(campaign.paths);
        let mut u_all = Vec::with_capacity(campaign.paths);
        let (mut var_fe, mut var_fr) = (crate::stats::OnlineStats::new(), crate::stats::OnlineStats::new());
        for (a, b) in &pairs {
            d_all.push(a.0);
            d_all.push(b.0);
            u_all.push(a.1);
            u_all.push(b.1);
            var_fe.push(a.2);
            var_fe.push(b.2);
            var_fr.push(a.3);
            var_fr.push(b.3);
        }
        let raw = covariance_with_stderr(&d_all, &d_all).value;
        let coupling_ok = raw < var_fe.variance().min(var_fr.variance());
        let empirical = match cv_mean {
            Some(mu_u) => {
                let beta = covariance_with_stderr(&d_all, &u_all).value
                    / covariance_with_stderr(&u_all, &u_all).value;
                let z: Vec<f64> = pairs
                    .iter()
                    .map(|(a, b)| {
                        0.5 * ((a.0 + b.0) - beta * (a.1 + b.1)) + beta * mu_u
                    })
                    .collect();
                Estimate::from_sample(&z)
            }
            None => {
                let z: Vec<f64> = pairs.iter().map(|(a, b)| 0.5 * (a.0 + b.0)).collect();
                Estimate::from_sample(&z)
            }
        };
        rows.push(WeakErrorRow {
            n,
            empirical,
            scaled: Estimate {
                value: n as f64 * empirical.value,
                stderr: n as f64 * empirical.stderr,
            },
            coupling_ok,
        });
    }
    let predicted = weak_error_prediction(campaign, f)?;
    let abs_rows: Vec<(usize, Estimate)> = rows
        .iter()
        .map(|r| {
            (
                r.n,
                Estimate {
                    value: r.empirical.value.abs(),
                    stderr: r.empirical.stderr,
                },
            )
        })
        .collect();
    let fit = if abs_rows.len() >= 2 && abs_rows.iter().all(|(_, e)| e.value > 0.0) {
        fit_rows(&abs_rows).ok()
    } else {
        None
    };
    Ok(WeakErrorTable {
        f,
        rows,
        predicted,
        fit,
        surrogate_warning: !exact,
    })
}

/// The n^{-1} coefficient of the weak error from the pair-density split
/// p = p_1 + n^{-1/2} p_2 with F = X_T:
///
///   (1/2) E[f''(X_T) S_T]                       (Hessian against p_1)
///   + E[mu Sigma_T f'(X_T)]                     (adaptive symbol)
///   + E[f''(X_T) int K D_t Sigma_T D_t X_T dt]  (anticipative, cross)
///   + (1/2) E[f'(X_T) int K D_tD_t Sigma_T dt]
///   + (1/2) E[Sigma_T f''(X_T) int K D_tD_t X_T dt]
///   + (1/2) E[Sigma_T f'''(X_T) int K (D_t X_T)^2 dt].
///
/// The mu-term carries an odd-in-W fluctuation of order b' that dwarfs the
/// constant itself, so the expectation is taken over antithetic pairs.
pub fn weak_error_prediction(
    campaign: &Campaign,
    f: TestFunction,
) -> Result<Estimate, CampaignError> {
    let grid = campaign.grid(campaign.h_n, campaign.h_m)?;
    let seed = campaign.h_seed();
    let per_path = |cp: &CoupledPaths| -> Result<f64, CampaignError> {
        let profile = LimitLawProfile::compute(cp, campaign.t, 0)?;
        let vs = VariationState::compute(cp);
        let w = weak_symbol_integrals(cp, &vs, &profile.k_path, profile.t_index);
        let x_t = cp.x_ref[profile.t_index];
        let sig_t = cp.sigma[profile.t_index];
        Ok(0.5 * f.hess(x_t) * profile.s_t
            + profile.mu_t * sig_t * f.grad(x_t)
            + f.hess(x_t) * w.k_dsig_dx
            + 0.5 * f.grad(x_t) * w.k_ddsig
            + 0.5 * sig_t * f.hess(x_t) * w.k_ddx
            + 0.5 * sig_t * f.third(x_t) * w.k_dx2)
    };
    let values = mc_map(campaign.h_paths, |stream| {
        let path = crate::pathsim::sample_brownian(&grid, seed, stream);
        let twin = path.antithetic();
        let a = per_path(&CoupledPaths::from_path(&campaign.model, path)?)?;
        let b = per_path(&CoupledPaths::from_path(&campaign.model, twin)?)?;
        Ok(0.5 * (a + b))
    })?;
    Ok(Estimate::from_sample(&values))
}

// ---------------------------------------------------------------------------
// CLT validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CltEntry {
    pub name: &'static str,
    pub empirical: Estimate,
    pub predicted: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone)]
pub struct CltTable {
    pub n: usize,
    pub entries: Vec<CltEntry>,
}

/// Empirical covariance structure of (M^n_T, A^n(1)_T, A^n(2)_T, W_T, Chat)
/// against the u-integral predictions, including the exact-zero pattern and
/// the kernel-corrected Theta_31.
pub fn clt_validation(campaign: &Campaign, n: usize) -> Result<CltTable, CampaignError> {
    let grid = campaign.grid(n, campaign.m)?;
    struct Row {
        m: f64,
        a1: f64,
        a2: f64,
        w: f64,
        chat: f64,
        u11: f64,
        u22: f64,
        u33: f64,
        u13: f64,
        v2int: f64,
        t31: f64,
    }
    let rows = mc_map(campaign.paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
        let t_index = cp.grid().index_of_time(campaign.t).expect("t on grid");
        let (_, m_path) = leading_term(&cp);
        let (a1_path, a2_path) = aux_processes(&cp);
        let bracket = m_bracket(&cp);
        let profile = LimitLawProfile::compute(&cp, campaign.t, 0)?;
        let mut v2int = 0.0;
        let mut u22int = 0.0;
        let mut u33int = 0.0;
        for i in 0..t_index {
            let dt = cp.grid().dt(i);
            v2int += 0.5 * (profile.coeffs.v2[i] + profile.coeffs.v2[i + 1]) * dt;
            u22int += 0.5 * (profile.coeffs.u22[i] + profile.coeffs.u22[i + 1]) * dt;
            u33int += 0.5 * (profile.coeffs.u33[i] + profile.coeffs.u33[i + 1]) * dt;
        }
        Ok(Row {
            m: m_path[t_index],
            a1: a1_path[t_index],
            a2: a2_path[t_index],
            w: cp.path.w()[t_index],
            chat: (n as f64).sqrt() * (bracket[t_index] - profile.c_t),
            u11: profile.u11_int[t_index],
            u22: u22int,
            u33: u33int,
            u13: profile.u13_int[t_index],
            v2int,
            t31: profile.theta.t31,
        })
    })?;
    let col = |f: &dyn Fn(&Row) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let mean = |xs: &[f64]| crate::stats::pairwise_sum(xs) / xs.len() as f64;
    let m = col(&|r| r.m);
    let a1 = col(&|r| r.a1);
    let a2 = col(&|r| r.a2);
    let w = col(&|r| r.w);
    let chat = col(&|r| r.chat);
    let mut entries = Vec::new();
    let mut push = |name: &'static str, emp: Estimate, pred: f64| {
        entries.push(CltEntry {
            name,
            empirical: emp,
            predicted: pred,
            z_score: emp.z_score(pred),
        });
    };
    push("var(M)", covariance_with_stderr(&m, &m), mean(&col(&|r| r.u11)));
    push("var(A1)", covariance_with_stderr(&a1, &a1), mean(&col(&|r| r.u22)));
    push("var(A2)", covariance_with_stderr(&a2, &a2), mean(&col(&|r| r.u33)));
    push("cov(M,A2)", covariance_with_stderr(&m, &a2), mean(&col(&|r| r.u13)));
    push("cov(M,A1)", covariance_with_stderr(&m, &a1), 0.0);
    push("cov(A1,A2)", covariance_with_stderr(&a1, &a2), 0.0);
    push("cov(A1,W)", covariance_with_stderr(&a1, &w), mean(&col(&|r| r.v2int)));
    push("cov(M,W)", covariance_with_stderr(&m, &w), 0.0);
    push("cov(A2,W)", covariance_with_stderr(&a2, &w), 0.0);
    push(
        "cov(M,Chat)",
        covariance_with_stderr(&m, &chat),
        mean(&col(&|r| r.t31)),
    );
    Ok(CltTable { n, entries })
}

// ---------------------------------------------------------------------------
// density improvement (studentized Edgeworth vs plain normal)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DensityImprovementRow {
    pub n: usize,
    /// sup-CDF distance to the standard normal.
    pub d0: f64,
    /// sup-CDF distance to the Edgeworth-corrected distribution.
    pub d1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct DensityImprovementTable {
    pub rows: Vec<DensityImprovementRow>,
    pub coeffs: StudentizedCoeffs,
    /// Log-log fits of d0 and d1 against n; absent with fewer than 3 rows.
    pub fit_d0: Option<LineFit>,
    pub fit_d1: Option<LineFit>,
}

/// Sup distance between the empirical CDF of `sample` (sorted) and `cdf` on
/// a fixed uniform grid.
fn sup_cdf_distance(sorted: &[f64], cdf: impl Fn(f64) -> f64, grid_points: usize) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..grid_points {
        let y = -5.0 + 10.0 * i as f64 / (grid_points - 1) as f64;
        let emp = sorted.partition_point(|v| *v <= y) as f64 / sorted.len() as f64;
        d = d.max((emp - cdf(y)).abs());
    }
    d
}

pub fn density_improvement(campaign: &Campaign) -> Result<DensityImprovementTable, CampaignError> {
    let sample = symbol_sample(campaign, KbarMode::PathwiseK)?;
    let coeffs = studentized_coeffs(&sample)?;
    let mut rows = Vec::new();
    for &n in &campaign.n_list {
        let grid = campaign.grid(n, campaign.m)?;
        let t_index = grid.index_of_time(campaign.t).expect("t on grid");
        let mut ys = mc_map(campaign.paths, |stream| {
            let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
            let (k_path, c_path) = kernel_and_c(&cp);
            let _ = k_path;
            let c_t = c_path[t_index];
            let s_t = cp.sigma[t_index] * cp.sigma[t_index] * c_t;
            if s_t <= 0.0 {
                return Err(CampaignError::LimitLaw(LimitLawError::Degenerate(c_t)));
            }
            let v = (n as f64).sqrt() * (cp.x_euler[t_index] - cp.x_ref[t_index]);
            Ok(v / s_t.sqrt())
        })?;
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d0 = sup_cdf_distance(&ys, normal_cdf, 2001);
        let d1 = sup_cdf_distance(&ys, |y| studentized_cdf(&coeffs, n, y), 2001);
        rows.push(DensityImprovementRow {
            n,
            d0,
            d1,
            improved: d1 < d0,
        });
    }
    let dkw = (2.0f64.ln() / (2.0 * campaign.paths as f64)).sqrt(); // not a bound, a floor scale
    let fit = |vals: &dyn Fn(&DensityImprovementRow) -> f64| {
        if rows.len() < 3 {
            return None;
        }
        rate_regression(
            &rows.iter().map(|r| r.n as f64).collect::<Vec<_>>(),
            &rows.iter().map(|r| vals(r).max(1e-12)).collect::<Vec<_>>(),
            &rows.iter().map(|_| dkw).collect::<Vec<_>>(),
        )
        .ok()
    };
    let fit_d0 = fit(&|r| r.d0);
    let fit_d1 = fit(&|r| r.d1);
    Ok(DensityImprovementTable {
        rows,
        coeffs,
        fit_d0,
        fit_d1,
    })
}

// ---------------------------------------------------------------------------
// expansion checks (limit variance, leading term, second-order statistics)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LimitVarianceCheck {
    pub n: usize,
    pub var_v: Estimate,
    pub predicted: f64,
}

/// Sample variance of V^n_T against E[Sigma_T^2] C_T evaluated on the symbol
/// sample.
pub fn limit_variance(campaign: &Campaign, n: usize) -> Result<LimitVarianceCheck, CampaignError> {
    let grid = campaign.grid(n, campaign.m)?;
    let t_index = grid.index_of_time(campaign.t).expect("t on grid");
    let vs = mc_map(campaign.paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
        Ok((n as f64).sqrt() * (cp.x_euler[t_index] - cp.x_ref[t_index]))
    })?;
    let var_v = covariance_with_stderr(&vs, &vs);
    let grid_h = campaign.grid(campaign.h_n, campaign.h_m)?;
    let seed_h = campaign.h_seed();
    let s2c = mc_map(campaign.h_paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid_h, seed_h, stream)?;
        let t_idx = cp.grid().index_of_time(campaign.t).expect("t on grid");
        let (_, c_path) = kernel_and_c(&cp);
        Ok(cp.sigma[t_idx] * cp.sigma[t_idx] * c_path[t_idx])
    })?;
    Ok(LimitVarianceCheck {
        n,
        var_v,
        predicted: Estimate::from_sample(&s2c).value,
    })
}

/// Median over paths of sup_t |V^n_t - Vbar^n_t| for each n.
pub fn leading_term_gaps(campaign: &Campaign) -> Result<Vec<(usize, f64)>, CampaignError> {
    let mut out = Vec::new();
    for &n in &campaign.n_list {
        let grid = campaign.grid(n, campaign.m)?;
        let mut gaps = mc_map(campaign.paths, |stream| {
            let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
            let (_, v) = error_process(&cp);
            let (vbar, _) = leading_term(&cp);
            Ok(v
                .iter()
                .zip(&vbar)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max))
        })?;
        gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push((n, gaps[gaps.len() / 2]));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SecondOrderCheck {
    pub n: usize,
    pub mean: Estimate,
    pub variance: Estimate,
    pub mean_predicted: f64,
    pub var_predicted: f64,
}

/// Mean and variance of sqrt(n)(V^n_T - Vbar^n_T) against the conditional
/// mean/covariance predictions: E[Sigma mu] and E[Sigma^2 Theta_22] +
/// Var(Sigma mu) over the symbol sample.
pub fn second_order_check(campaign: &Campaign, n: usize) -> Result<SecondOrderCheck, CampaignError> {
    let grid = campaign.grid(n, campaign.m)?;
    let t_index = grid.index_of_time(campaign.t).expect("t on grid");
    let resid = mc_map(campaign.paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid, campaign.seed, stream)?;
        let (_, v) = error_process(&cp);
        let (vbar, _) = leading_term(&cp);
        Ok((n as f64).sqrt() * (v[t_index] - vbar[t_index]))
    })?;
    let mean = Estimate::from_sample(&resid);
    let variance = covariance_with_stderr(&resid, &resid);

    let grid_h = campaign.grid(campaign.h_n, campaign.h_m)?;
    let seed_h = campaign.h_seed();
    // Theta tier: inner Monte Carlo for the conditional variance of N
    let s2t22 = mc_map(campaign.h_paths, |stream| {
        let cp = CoupledPaths::simulate(&campaign.model, &grid_h, seed_h, stream)?;
        let profile = LimitLawProfile::compute(&cp, campaign.t, campaign.inner_draws)?;
        let sig = cp.sigma[profile.t_index];
        Ok(sig * sig * profile.theta.t22)
    })?;
    // mu tier: cheap per path, but E[Sigma mu] carries an odd-in-W
    // fluctuation far above the mean itself, so average antithetic pairs
    // for the mean and keep individual values for the variance
    let mu_pairs = mc_map(8 * campaign.h_paths, |stream| {
        let path = crate::pathsim::sample_brownian(&grid_h, seed_h ^ 0x00ff_00ff, stream);
        let twin = path.antithetic();
        let value = |p| -> Result<f64, CampaignError> {
            let cp = CoupledPaths::from_path(&campaign.model, p)?;
            let profile = LimitLawProfile::compute(&cp, campaign.t, 0)?;
            Ok(cp.sigma[profile.t_index] * profile.mu_t)
        };
        let a = value(path)?;
        let b = value(twin)?;
        Ok((0.5 * (a + b), a, b))
    })?;
    let pair_means: Vec<f64> = mu_pairs.iter().map(|p| p.0).collect();
    let mut individuals = Vec::with_capacity(2 * mu_pairs.len());
    for p in &mu_pairs {
        individuals.push(p.1);
        individuals.push(p.2);
    }
    let mean_predicted = Estimate::from_sample(&pair_means).value;
    let var_sig_mu = covariance_with_stderr(&individuals, &individuals).value;
    let var_predicted = Estimate::from_sample(&s2t22).value + var_sig_mu;
    Ok(SecondOrderCheck {
        n,
        mean,
        variance,
        mean_predicted,
        var_predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, BuiltinKind};

    fn gbm_campaign(paths: usize) -> Campaign {
        let model = builtin_model(BuiltinKind::Gbm, &[0.0, 0.2, 1.0]).unwrap();
        let mut c = Campaign::new(model, vec![16, 32, 64], 8, paths, 1.0, 7);
        c.h_paths = 64;
        c.h_n = 32;
        c.h_m = 8;
        c.inner_draws = 400;
        c
    }

    #[test]
    fn rate_regression_recovers_synthetic_slope() {
        let ns = [16.0, 32.0, 64.0, 128.0];
        let vals: Vec<f64> = ns.iter().map(|n: &f64| 2.0 / n.sqrt()).collect();
        let errs = vec![1e-8; 4];
        let fit = rate_regression(&ns, &vals, &errs).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-10);
        assert!(rate_regression(&ns[..2], &vals[..2], &errs[..2]).is_err());
    }

    #[test]
    fn campaigns_are_reproducible() {
        let c = gbm_campaign(200);
        let a = strong_error(&c, 2.0).unwrap();
        let b = strong_error(&c, 2.0).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.empirical.value, rb.empirical.value);
            assert_eq!(ra.predicted, rb.predicted);
        }
    }

    #[test]
    fn gbm_strong_error_scales_and_matches_prediction() {
        let mut c = gbm_campaign(4000);
        c.n_list = vec![16, 32, 64, 128];
        let table = strong_error(&c, 2.0).unwrap();
        assert!(
            (table.fit.slope + 0.5).abs() < 0.1,
            "slope {}",
            table.fit.slope
        );
        for row in &table.rows {
            let ratio = row.ratio.unwrap();
            assert!((ratio - 1.0).abs() < 0.25, "n={} ratio {ratio}", row.n);
        }
    }

    #[test]
    fn constdiff_strong_error_has_first_order_slope() {
        let model = builtin_model(BuiltinKind::ConstDiff, &[0.8, 0.3, 1.0]).unwrap();
        let mut c = Campaign::new(model, vec![8, 16, 32, 64], 64, 2000, 1.0, 11);
        c.h_paths = 8;
        let table = strong_error(&c, 2.0).unwrap();
        assert!(table.rows.iter().all(|r| r.predicted.is_none()));
        assert!(
            (table.fit.slope + 1.0).abs() < 0.15,
            "slope {}",
            table.fit.slope
        );
    }

    #[test]
    fn martingale_weak_error_is_zero() {
        // a = 0: the Euler scheme preserves the mean exactly
        let model = builtin_model(BuiltinKind::Gbm, &[0.0, 0.2, 1.0]).unwrap();
        let mut c = Campaign::new(model, vec![16, 64], 1, 20_000, 1.0, 3);
        c.h_paths = 64;
        c.h_n = 32;
        c.h_m = 8;
        c.inner_draws = 200;
        let table = weak_error(&c, TestFunction::Identity).unwrap();
        for row in &table.rows {
            // the U-control variate makes this exactly zero for f = identity
            assert!(
                row.empirical.value.abs() <= 4.0 * row.empirical.stderr + 1e-15,
                "n={}: {:?}",
                row.n,
                row.empirical
            );
            assert!(row.coupling_ok);
        }
    }

    #[test]
    fn gbm_weak_error_prediction_matches_closed_form() {
        // n E[(X^n_1)^2 - X_1^2] -> -sigma^4 x0^2 e^{sigma^2} / 2
        let sigma: f64 = 0.3;
        let model = builtin_model(BuiltinKind::Gbm, &[0.0, sigma, 1.0]).unwrap();
        let mut c = Campaign::new(model, vec![64], 1, 100, 1.0, 3);
        c.h_paths = 3000;
        c.h_n = 64;
        c.h_m = 8;
        c.inner_draws = 100;
        let pred = weak_error_prediction(&c, TestFunction::Square).unwrap();
        let target = -0.5 * sigma.powi(4) * (sigma * sigma).exp();
        assert!(
            (pred.value - target).abs() < 4.0 * pred.stderr + 0.02 * target.abs(),
            "pred {} +- {} vs {target}",
            pred.value,
            pred.stderr
        );
    }

    #[test]
    fn density_improvement_runs_and_orders() {
        let mut c = gbm_campaign(20_000);
        c.n_list = vec![32, 128];
        c.m = 1;
        c.h_paths = 256;
        c.inner_draws = 2000;
        let table = density_improvement(&c).unwrap();
        assert_eq!(table.rows.len(), 2);
        for row in &table.rows {
            assert!(row.improved, "n={}: d0={} d1={}", row.n, row.d0, row.d1);
        }
        assert!(table.rows[1].d0 < table.rows[0].d0);
    }
}
