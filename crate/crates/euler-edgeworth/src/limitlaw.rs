//! Limit-law ingredients evaluated by quadrature along the reference path:
//! the kernel K, the mixed-normal variance C, the CLT coefficient processes
//! v and u, the second-order drift A(3), the conditional mean mu of the
//! second-order term N, and the conditional covariance blocks Theta of the
//! limit triple (M, N, C-hat).
//!
//! Two ingredients here deviate deliberately from naive bookkeeping, both
//! validated against closed-form Euler moments (see the tests and the
//! `errorproc` cross-checks):
//!
//! * the A(3)/mu drift carries the compensators of the frozen-coefficient
//!   leading term, giving the integrand
//!   (1/2) a (b')^2 - (1/2) a a' - (1/4) a'' b^2 + (3/4) b^2 b' b''
//!   + (1/2) a' b b' - (1/2) b (b')^3, all divided by Sigma;
//! * the limit of C-hat = sqrt(n)(<M^n> - C) is not just the quadratic
//!   martingale A(2): the kernel of M^n reads the Euler state, which drags
//!   in the extra conditionally Gaussian component int J(s) L^1_s ds with
//!   J = -K ((b')^2 + b b''). The correction shifts Theta_31 at a size that
//!   covariance tests at 1e5 paths resolve clearly.
//!
//! dt-integrals use the trapezoid rule, dW-integrals left-point sums.

use thiserror::Error;

use crate::pathsim::CoupledPaths;
use crate::rng::CounterRng;

#[derive(Debug, Error, PartialEq)]
pub enum LimitLawError {
    #[error("evaluation time not on the fine grid: {0}")]
    TimeNotOnGrid(f64),
    #[error("degenerate model: C_T = {0:.3e} is not positive")]
    Degenerate(f64),
}

/// Pointwise CLT coefficient paths of the auxiliary triple
/// (M^n, A^n(1), A^n(2)).
#[derive(Debug, Clone)]
pub struct CltCoefficients {
    pub v2: Vec<f64>,
    pub u11: Vec<f64>,
    pub u13: Vec<f64>,
    pub u22: Vec<f64>,
    pub u33: Vec<f64>,
    /// Pointwise flag of (u - v v*) positive semidefiniteness violations.
    pub psd_violations: usize,
}

/// Conditional covariance blocks of (M, N, C-hat) given the path, ordered
/// with indices 1 = M, 2 = N, 3 = C-hat.
#[derive(Debug, Clone, Copy)]
pub struct ThetaBlocks {
    pub t11: f64,
    pub t21: f64,
    pub t31: f64,
    pub t22: f64,
    pub t32: f64,
    pub t33: f64,
    /// Smallest principal-minor determinant of the assembled matrix;
    /// negative beyond tolerance means a PSD violation.
    pub min_minor: f64,
}

impl ThetaBlocks {
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_minor >= -tol
    }
}

/// Everything the symbol and density layers need about one path.
#[derive(Debug, Clone)]
pub struct LimitLawProfile {
    pub t_index: usize,
    pub k_path: Vec<f64>,
    pub c_path: Vec<f64>,
    pub c_t: f64,
    pub s_t: f64,
    pub coeffs: CltCoefficients,
    /// Kernel-correction weight J(s) = -K(s) ((b')^2 + b b'')(X_s).
    pub j_path: Vec<f64>,
    /// Running trapezoid integrals of u11 and u13.
    pub u11_int: Vec<f64>,
    pub u13_int: Vec<f64>,
    pub a3_t: f64,
    pub mu_t: f64,
    pub theta: ThetaBlocks,
}

/// Trapezoid prefix integral of `f` against the grid times.
fn trapezoid_prefix(coupled: &CoupledPaths, f: &[f64]) -> Vec<f64> {
    let grid = coupled.grid();
    let mut out = Vec::with_capacity(f.len());
    out.push(0.0);
    let mut acc = 0.0;
    for i in 0..grid.steps() {
        acc += 0.5 * (f[i] + f[i + 1]) * grid.dt(i);
        out.push(acc);
    }
    out
}

/// The kernel K(s) = -Sigma_s^{-1} b b'(X_s) and C_t = (1/2) int_0^t K^2.
pub fn kernel_and_c(coupled: &CoupledPaths) -> (Vec<f64>, Vec<f64>) {
    let model = &coupled.model;
    let k_path: Vec<f64> = coupled
        .x_ref
        .iter()
        .zip(&coupled.sigma_inv)
        .map(|(&x, &si)| -si * model.b(x) * model.b1(x))
        .collect();
    let half_k2: Vec<f64> = k_path.iter().map(|k| 0.5 * k * k).collect();
    let c_path = trapezoid_prefix(coupled, &half_k2);
    (k_path, c_path)
}

/// The five coefficient processes of the stable CLT, pointwise on the grid.
pub fn clt_coefficients(coupled: &CoupledPaths) -> CltCoefficients {
    let model = &coupled.model;
    let steps = coupled.grid().steps();
    let mut v2 = Vec::with_capacity(steps + 1);
    let mut u11 = Vec::with_capacity(steps + 1);
    let mut u13 = Vec::with_capacity(steps + 1);
    let mut u22 = Vec::with_capacity(steps + 1);
    let mut u33 = Vec::with_capacity(steps + 1);
    let mut psd_violations = 0usize;
    for i in 0..=steps {
        let x = coupled.x_ref[i];
        let si = coupled.sigma_inv[i];
        let (a, a1, b, b1, b2) = (
            model.a(x),
            model.a1(x),
            model.b(x),
            model.b1(x),
            model.b2(x),
        );
        let w = si * b * b1;
        v2.push(si * (b * b1 * b1 - 0.5 * (a * b1 + a1 * b) - 0.25 * b * b * b2));
        u11.push(0.5 * w * w);
        u13.push(-w * w * w / 3.0);
        u33.push(w * w * w * w / 3.0);
        let bracket = b * b
            * ((b1 * b1 - a1) * (b1 * b1 - a1)
                + (b1 * b1 - 0.5 * b * b2) * (4.0 * b1 * b1 - 1.5 * b * b2 - a1))
            + (a * b1) * (a * b1)
            - a * b * b1 * (3.0 * b1 * b1 - a1 - b * b2);
        u22.push(si * si * bracket / 3.0);
        let g22 = u22[i] - v2[i] * v2[i];
        let det13 = u11[i] * u33[i] - u13[i] * u13[i];
        if g22 < -1e-12 || det13 < -1e-12 || u11[i] < 0.0 || u33[i] < 0.0 {
            psd_violations += 1;
        }
    }
    CltCoefficients {
        v2,
        u11,
        u13,
        u22,
        u33,
        psd_violations,
    }
}

/// The corrected A(3) drift and the conditional mean mu of N at time T.
pub fn a3_and_mu(
    coupled: &CoupledPaths,
    t_index: usize,
    u11_int: &[f64],
    v2: &[f64],
) -> (f64, f64) {
    let model = &coupled.model;
    let grid = coupled.grid();
    let a3_integrand: Vec<f64> = (0..=t_index)
        .map(|i| {
            let x = coupled.x_ref[i];
            let si = coupled.sigma_inv[i];
            let (a, a1, a2, b, b1, b2) = (
                model.a(x),
                model.a1(x),
                model.a2(x),
                model.b(x),
                model.b1(x),
                model.b2(x),
            );
            si * (0.5 * a * b1 * b1 - 0.5 * a * a1 - 0.25 * a2 * b * b
                + 0.75 * b * b * b1 * b2
                + 0.5 * a1 * b * b1
                - 0.5 * b * b1 * b1 * b1)
        })
        .collect();
    let mut a3 = 0.0;
    let mut dw_part = 0.0;
    let mut quad_ds = 0.0;
    let mut quad_dw = 0.0;
    for i in 0..t_index {
        let dt = grid.dt(i);
        a3 += 0.5 * (a3_integrand[i] + a3_integrand[i + 1]) * dt;
        dw_part += v2[i] * coupled.path.increments()[i];
        let x = coupled.x_ref[i];
        let g = coupled.sigma[i] * (model.a2(x) - model.b1(x) * model.b2(x));
        let gb = coupled.sigma[i] * model.b2(x);
        let x1 = coupled.x_ref[i + 1];
        let g1 = coupled.sigma[i + 1] * (model.a2(x1) - model.b1(x1) * model.b2(x1));
        quad_ds += 0.25 * (g * u11_int[i] + g1 * u11_int[i + 1]) * dt;
        quad_dw += 0.5 * gb * u11_int[i] * coupled.path.increments()[i];
    }
    let mu = dw_part + a3 + quad_ds + quad_dw;
    (a3, mu)
}

/// Number of decimated blocks for the inner Monte Carlo over the auxiliary
/// Gaussian process L given the path.
const INNER_BLOCKS: usize = 256;

/// Conditional covariance blocks of (M, N, C-hat). The M and C-hat rows come
/// from quadrature; the N row has no closed form (it mixes the Gaussian part
/// of L^2 with quadratic functionals of L^1), so it is estimated by an inner
/// Monte Carlo with `inner_draws` conditionally Gaussian draws of L.
pub fn theta_blocks(
    coupled: &CoupledPaths,
    t_index: usize,
    coeffs: &CltCoefficients,
    u11_int: &[f64],
    u13_int: &[f64],
    j_path: &[f64],
    inner_draws: usize,
    rng: &CounterRng,
) -> ThetaBlocks {
    let grid = coupled.grid();
    let model = &coupled.model;
    let t11 = u11_int[t_index];

    // quadrature blocks: Theta_31 and Theta_33 with the kernel correction
    let ju11: Vec<f64> = (0..=t_index).map(|i| j_path[i] * u11_int[i]).collect();
    let ju13: Vec<f64> = (0..=t_index).map(|i| j_path[i] * u13_int[i]).collect();
    let mut j_int = vec![0.0; t_index + 1];
    let mut u33_int = 0.0;
    for i in 0..t_index {
        j_int[i + 1] = j_int[i] + 0.5 * (j_path[i] + j_path[i + 1]) * grid.dt(i);
        u33_int += 0.5 * (coeffs.u33[i] + coeffs.u33[i + 1]) * grid.dt(i);
    }
    let j_total = j_int[t_index];
    let mut t31 = u13_int[t_index];
    let mut t33 = u33_int;
    for i in 0..t_index {
        let dt = grid.dt(i);
        t31 += 0.5 * (ju11[i] + ju11[i + 1]) * dt;
        t33 += 2.0 * 0.5 * (ju13[i] + ju13[i + 1]) * dt;
        let f0 = ju11[i] * (j_total - j_int[i]);
        let f1 = ju11[i + 1] * (j_total - j_int[i + 1]);
        t33 += 2.0 * 0.5 * (f0 + f1) * dt;
    }

    // decimated per-block data for the inner Monte Carlo
    let blocks = INNER_BLOCKS.min(t_index.max(1));
    let mut bounds = Vec::with_capacity(blocks + 1);
    for b in 0..=blocks {
        bounds.push(b * t_index / blocks);
    }
    let nb = blocks;
    let mut du11 = vec![0.0; nb];
    let mut du13 = vec![0.0; nb];
    let mut du33 = vec![0.0; nb];
    let mut dg22 = vec![0.0; nb];
    let mut dwb = vec![0.0; nb];
    let mut w_quad_ds = vec![0.0; nb];
    let mut w_quad_dw = vec![0.0; nb];
    let mut w_j = vec![0.0; nb];
    for b in 0..nb {
        for i in bounds[b]..bounds[b + 1] {
            let dt = grid.dt(i);
            du11[b] += 0.5 * (coeffs.u11[i] + coeffs.u11[i + 1]) * dt;
            du13[b] += 0.5 * (coeffs.u13[i] + coeffs.u13[i + 1]) * dt;
            du33[b] += 0.5 * (coeffs.u33[i] + coeffs.u33[i + 1]) * dt;
            let g0 = coeffs.u22[i] - coeffs.v2[i] * coeffs.v2[i];
            let g1 = coeffs.u22[i + 1] - coeffs.v2[i + 1] * coeffs.v2[i + 1];
            dg22[b] += (0.5 * (g0 + g1) * dt).max(0.0);
            dwb[b] += coupled.path.increments()[i];
            let x = coupled.x_ref[i];
            w_quad_ds[b] += coupled.sigma[i] * (model.a2(x) - model.b1(x) * model.b2(x)) * dt;
            w_quad_dw[b] += coupled.sigma[i] * model.b2(x) * coupled.path.increments()[i];
            w_j[b] += 0.5 * (j_path[i] + j_path[i + 1]) * dt;
        }
    }

    // inner draws of (L1, G2, L3) and the assembled N and C-hat samples;
    // zero draws skips the N-row (callers that only need mu and the
    // quadrature blocks)
    if inner_draws == 0 {
        return ThetaBlocks {
            t11,
            t21: 0.0,
            t31,
            t22: 0.0,
            t32: 0.0,
            t33,
            min_minor: min_principal_minor(t11, 0.0, t31, 0.0, 0.0, t33),
        };
    }
    let mut sum = [0.0f64; 4];
    let mut sum_sq = [[0.0f64; 4]; 4];
    for d in 0..inner_draws {
        let base = (d * nb * 3) as u64;
        let (mut l1, mut g2, mut l3) = (0.0f64, 0.0f64, 0.0f64);
        let (mut quad, mut quad_w, mut cj) = (0.0f64, 0.0f64, 0.0f64);
        for b in 0..nb {
            quad += w_quad_ds[b] * l1 * l1;
            quad_w += w_quad_dw[b] * l1 * l1;
            cj += w_j[b] * l1;
            let z1 = rng.normal(base + (3 * b) as u64);
            let z2 = rng.normal(base + (3 * b + 1) as u64);
            let z3 = rng.normal(base + (3 * b + 2) as u64);
            if du11[b] > 1e-300 {
                let s1 = du11[b].sqrt();
                l1 += s1 * z1;
                let c31 = du13[b] / s1;
                l3 += c31 * z1 + (du33[b] - c31 * c31).max(0.0).sqrt() * z3;
            } else {
                l3 += du33[b].max(0.0).sqrt() * z3;
            }
            g2 += dg22[b].sqrt() * z2;
        }
        let n_c = g2 + 0.5 * quad + 0.5 * quad_w;
        let chat_c = l3 + cj;
        let row = [l1, n_c, chat_c, 0.0];
        for i in 0..3 {
            sum[i] += row[i];
            for j in 0..3 {
                sum_sq[i][j] += row[i] * row[j];
            }
        }
    }
    let nd = inner_draws as f64;
    let mean = [sum[0] / nd, sum[1] / nd, sum[2] / nd];
    let cov = |i: usize, j: usize| sum_sq[i][j] / nd - mean[i] * mean[j];
    let t21 = cov(1, 0);
    let t22 = cov(1, 1);
    let t32 = cov(1, 2);

    ThetaBlocks {
        t11,
        t21,
        t31,
        t22,
        t32,
        t33,
        min_minor: min_principal_minor(t11, t21, t31, t22, t32, t33),
    }
}

fn min_principal_minor(t11: f64, t21: f64, t31: f64, t22: f64, t32: f64, t33: f64) -> f64 {
    let d1 = t11.min(t22).min(t33);
    let d2 = (t11 * t22 - t21 * t21)
        .min(t11 * t33 - t31 * t31)
        .min(t22 * t33 - t32 * t32);
    let d3 = t11 * (t22 * t33 - t32 * t32) - t21 * (t21 * t33 - t32 * t31)
        + t31 * (t21 * t32 - t22 * t31);
    d1.min(d2).min(d3)
}

impl LimitLawProfile {
    /// Evaluate every profile quantity at evaluation time `t` (which must
    /// lie on the fine grid). The inner Monte Carlo for the N-row of Theta
    /// uses a substream derived from the path's own (seed, stream).
    pub fn compute(
        coupled: &CoupledPaths,
        t: f64,
        inner_draws: usize,
    ) -> Result<LimitLawProfile, LimitLawError> {
        let t_index = coupled
            .grid()
            .index_of_time(t)
            .ok_or(LimitLawError::TimeNotOnGrid(t))?;
        let (k_path, c_path) = kernel_and_c(coupled);
        let coeffs = clt_coefficients(coupled);
        let model = &coupled.model;
        let j_path: Vec<f64> = (0..k_path.len())
            .map(|i| {
                let x = coupled.x_ref[i];
                -k_path[i] * (model.b1(x) * model.b1(x) + model.b(x) * model.b2(x))
            })
            .collect();
        let u11_int = trapezoid_prefix(coupled, &coeffs.u11);
        let u13_int = trapezoid_prefix(coupled, &coeffs.u13);
        let (a3_t, mu_t) = a3_and_mu(coupled, t_index, &u11_int, &coeffs.v2);
        let rng = CounterRng::new(coupled.path.seed(), coupled.path.stream()).substream(0x7e7a);
        let theta = theta_blocks(
            coupled, t_index, &coeffs, &u11_int, &u13_int, &j_path, inner_draws, &rng,
        );
        let c_t = c_path[t_index];
        let s_t = coupled.sigma[t_index] * coupled.sigma[t_index] * c_t;
        Ok(LimitLawProfile {
            t_index,
            k_path,
            c_path,
            c_t,
            s_t,
            coeffs,
            j_path,
            u11_int,
            u13_int,
            a3_t,
            mu_t,
            theta,
        })
    }

    /// Reject degenerate models (C_T = 0, e.g. constant diffusion).
    pub fn require_nondegenerate(&self) -> Result<(), LimitLawError> {
        if self.c_t <= 1e-300 {
            Err(LimitLawError::Degenerate(self.c_t))
        } else {
            Ok(())
        }
    }
}
