//! Edgeworth-corrected densities assembled from the random-symbol sample:
//! the studentized density
//!
//!   phi(y)(1 + n^{-1/2}(a1 y + a2 (y^2 - 1) + a3 y^3)),
//!
//! the pair density of (Z_n, C) with kernel-smoothed conditioning on C, and
//! the Monte Carlo mixture marginal for V_n. The n^{-1/2} corrections are
//! exact derivatives, so they integrate to zero; negative tail values are an
//! expansion artifact and are reported as-is, with a rectified view for
//! display.
//!
//! The correction terms are monomials (iu)^m (iv)^k of the full random
//! symbol with orders (m, k) in {(1,0), (2,0), (1,1), (3,0), (1,2), (3,1),
//! (5,0)} and coefficients (H2 + H3 z, H1 z, H5, H4, H7, H8, H6).

use thiserror::Error;

use crate::malliavin::SymbolCoefficients;
use crate::stats::{normal_cdf, normal_pdf, normal_pdf_var, pairwise_sum, Estimate};

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("hermite order {0} not supported (only 3 and 5)")]
    BadHermiteOrder(usize),
    #[error("empty coefficient sample")]
    EmptySample,
    #[error("non-finite studentized moments (degenerate C?)")]
    NonFiniteMoments,
    #[error("kernel bandwidth degenerate: {0}")]
    DegenerateBandwidth(f64),
    #[error("evaluation point x = {0} outside the estimated support")]
    OutsideSupport(f64),
}

/// Hermite polynomials H3 and H5 (probabilists' convention).
pub fn hermite(order: usize, y: f64) -> Result<f64, DensityError> {
    match order {
        3 => Ok(y * y * y - 3.0 * y),
        5 => Ok(y.powi(5) - 10.0 * y.powi(3) + 15.0 * y),
        other => Err(DensityError::BadHermiteOrder(other)),
    }
}

/// Population-level studentized coefficients with Monte Carlo stderr.
#[derive(Debug, Clone, Copy)]
pub struct StudentizedCoeffs {
    pub a1: Estimate,
    pub a2: Estimate,
    pub a3: Estimate,
}

/// Moment-combine the per-path symbol coefficients:
///   a1 = E[H2 C^{-1/2}] - 3 E[H1 C^{-1/2}] - (1/2) E[H5 C^{-3/2}] + 3 E[H6 C^{-5/2}],
///   a2 = E[H3],  a3 = E[H1 C^{-1/2}].
/// The H5 sign follows the reduction identities of the pair-density terms
/// (summing them with H4 = H5/2 forces the minus).
pub fn studentized_coeffs(sample: &[SymbolCoefficients]) -> Result<StudentizedCoeffs, DensityError> {
    if sample.is_empty() {
        return Err(DensityError::EmptySample);
    }
    let mut a1 = Vec::with_capacity(sample.len());
    let mut a2 = Vec::with_capacity(sample.len());
    let mut a3 = Vec::with_capacity(sample.len());
    for h in sample {
        let c = h.c_t;
        let h1c = h.h1 / c.sqrt();
        let h2c = h.h2 / c.sqrt();
        let h5c = h.h5 / c.powf(1.5);
        let h6c = h.h6 / c.powf(2.5);
        let v1 = h2c - 3.0 * h1c - 0.5 * h5c + 3.0 * h6c;
        if !v1.is_finite() || !h.h3.is_finite() {
            return Err(DensityError::NonFiniteMoments);
        }
        a1.push(v1);
        a2.push(h.h3);
        a3.push(h1c);
    }
    Ok(StudentizedCoeffs {
        a1: Estimate::from_sample(&a1),
        a2: Estimate::from_sample(&a2),
        a3: Estimate::from_sample(&a3),
    })
}

/// Studentized density value; `negative` flags the Edgeworth tail artifact.
#[derive(Debug, Clone, Copy)]
pub struct DensityValue {
    pub order0: f64,
    pub correction: f64,
    pub total: f64,
    pub negative: bool,
}

pub fn studentized_density(coeffs: &StudentizedCoeffs, n: usize, y: f64) -> DensityValue {
    assert!(n >= 1);
    let phi = normal_pdf(y);
    let poly = coeffs.a1.value * y
        + coeffs.a2.value * (y * y - 1.0)
        + coeffs.a3.value * y * y * y;
    let correction = phi * poly / (n as f64).sqrt();
    let total = phi + correction;
    DensityValue {
        order0: phi,
        correction,
        total,
        negative: total < 0.0,
    }
}

/// Distribution function of the corrected studentized density,
/// Phi(y) - n^{-1/2} phi(y) (a1 + a2 y + a3 (y^2 + 2)).
pub fn studentized_cdf(coeffs: &StudentizedCoeffs, n: usize, y: f64) -> f64 {
    normal_cdf(y)
        - normal_pdf(y)
            * (coeffs.a1.value + coeffs.a2.value * y + coeffs.a3.value * (y * y + 2.0))
            / (n as f64).sqrt()
}

/// Clip-and-renormalize view for display.
pub fn rectified(value: DensityValue) -> f64 {
    value.total.max(0.0)
}

// ---------------------------------------------------------------------------
// polynomial-times-Gaussian calculus for the z-derivatives
// ---------------------------------------------------------------------------

/// Polynomial p(z) paired with phi(z; 0, x): represents p(z) phi(z; 0, x).
/// (-d/dz) maps p to p(z) z / x - p'(z), exactly.
#[derive(Debug, Clone)]
struct GaussPoly {
    coeffs: Vec<f64>,
    var: f64,
}

impl GaussPoly {
    fn new(coeffs: Vec<f64>, var: f64) -> Self {
        GaussPoly { coeffs, var }
    }

    fn neg_deriv(&self) -> GaussPoly {
        let mut out = vec![0.0; self.coeffs.len() + 1];
        for (k, &c) in self.coeffs.iter().enumerate() {
            out[k + 1] += c / self.var; // z * p / x
            if k >= 1 {
                out[k - 1] -= c * k as f64; // - p'
            }
        }
        GaussPoly::new(out, self.var)
    }

    fn neg_deriv_n(&self, m: usize) -> GaussPoly {
        let mut g = self.clone();
        for _ in 0..m {
            g = g.neg_deriv();
        }
        g
    }

    fn eval(&self, z: f64) -> f64 {
        let mut p = 0.0;
        for &c in self.coeffs.iter().rev() {
            p = p * z + c;
        }
        p * normal_pdf_var(z, self.var)
    }
}

// ---------------------------------------------------------------------------
// kernel density estimation and Nadaraya-Watson regression on C
// ---------------------------------------------------------------------------

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let mean = pairwise_sum(sample) / n;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let iqr = q(0.75) - q(0.25);
    let scale = if iqr > 0.0 {
        var.sqrt().min(iqr / 1.34)
    } else {
        var.sqrt()
    };
    0.9 * scale * n.powf(-0.2)
}

fn gaussian_kernel(u: f64) -> f64 {
    normal_pdf(u)
}

/// The pair density p_n(z, x) of (Z_n, C) built from a Monte Carlo sample of
/// per-path symbol coefficients. When the sample's C is deterministic the
/// conditioning collapses and the density reduces to the z-marginal with
/// unconditional moments (the studentized form after z/sqrt(C) scaling).
#[derive(Debug, Clone)]
pub struct PairDensity {
    n: usize,
    c_sample: Vec<f64>,
    h_sample: Vec<SymbolCoefficients>,
    bandwidth: f64,
    pub deterministic_c: bool,
    c_mean: f64,
    c_min: f64,
    c_max: f64,
}

/// Monomial orders (m_j, n_j) of the seven correction terms.
pub const MONOMIAL_ORDERS: [(usize, usize); 7] =
    [(1, 0), (2, 0), (1, 1), (3, 0), (1, 2), (3, 1), (5, 0)];

impl PairDensity {
    pub fn from_sample(sample: &[SymbolCoefficients], n: usize) -> Result<PairDensity, DensityError> {
        if sample.is_empty() {
            return Err(DensityError::EmptySample);
        }
        let c_sample: Vec<f64> = sample.iter().map(|h| h.c_t).collect();
        let c_mean = pairwise_sum(&c_sample) / c_sample.len() as f64;
        let sd = (c_sample
            .iter()
            .map(|c| (c - c_mean) * (c - c_mean))
            .sum::<f64>()
            / (c_sample.len() as f64 - 1.0).max(1.0))
        .sqrt();
        let deterministic_c = sd < 1e-10 * (1.0 + c_mean.abs());
        let bandwidth = if deterministic_c {
            0.0
        } else {
            let bw = silverman_bandwidth(&c_sample);
            if !(bw > 0.0) {
                return Err(DensityError::DegenerateBandwidth(bw));
            }
            bw
        };
        let c_min = c_sample.iter().cloned().fold(f64::INFINITY, f64::min);
        let c_max = c_sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(PairDensity {
            n,
            c_sample,
            h_sample: sample.to_vec(),
            bandwidth,
            deterministic_c,
            c_mean,
            c_min,
            c_max,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Integration support in the x direction.
    pub fn x_support(&self) -> (f64, f64) {
        if self.deterministic_c {
            (self.c_mean, self.c_mean)
        } else {
            (
                (self.c_min - 6.0 * self.bandwidth).max(1e-12),
                self.c_max + 6.0 * self.bandwidth,
            )
        }
    }

    /// Kernel density estimate of p^C at x.
    pub fn kde(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in &self.c_sample {
            acc += gaussian_kernel((x - c) / self.bandwidth);
        }
        acc / (self.c_sample.len() as f64 * self.bandwidth)
    }

    /// Nadaraya-Watson estimate of E[v | C = x] for per-path values v.
    fn nw(&self, values: impl Fn(&SymbolCoefficients) -> f64, x: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for h in &self.h_sample {
            let w = gaussian_kernel((x - h.c_t) / self.bandwidth);
            num += w * values(h);
            den += w;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }

    /// Unconditional moment (deterministic-C fast path).
    fn unconditional(&self, values: impl Fn(&SymbolCoefficients) -> f64) -> f64 {
        let vals: Vec<f64> = self.h_sample.iter().map(values).collect();
        pairwise_sum(&vals) / vals.len() as f64
    }

    /// The seven z-polynomial correction pieces at conditioning value x,
    /// before the (-d_x)^{n_j} differentiation: index j -> GaussPoly in z.
    fn z_terms(&self, x: f64, conditional: bool) -> [GaussPoly; 7] {
        let moment = |f: &dyn Fn(&SymbolCoefficients) -> f64| -> f64 {
            if conditional {
                self.nw(f, x)
            } else {
                self.unconditional(f)
            }
        };
        let h1 = moment(&|h| h.h1);
        let h2 = moment(&|h| h.h2);
        let h3 = moment(&|h| h.h3);
        let h4 = moment(&|h| h.h4);
        let h5 = moment(&|h| h.h5);
        let h6 = moment(&|h| h.h6);
        let h7 = moment(&|h| h.h7);
        let h8 = moment(&|h| h.h8);
        [
            GaussPoly::new(vec![h2, h3], x).neg_deriv_n(1),
            GaussPoly::new(vec![0.0, h1], x).neg_deriv_n(2),
            GaussPoly::new(vec![h5], x).neg_deriv_n(1),
            GaussPoly::new(vec![h4], x).neg_deriv_n(3),
            GaussPoly::new(vec![h7], x).neg_deriv_n(1),
            GaussPoly::new(vec![h8], x).neg_deriv_n(3),
            GaussPoly::new(vec![h6], x).neg_deriv_n(5),
        ]
    }

    /// Precompute everything x-dependent for fast evaluation along z. The
    /// smoothed factors are expanded at x and x +/- bandwidth/2, the step
    /// used by the central finite differences in the x direction.
    pub fn slice(&self, x: f64) -> Result<PairSlice, DensityError> {
        if self.deterministic_c {
            let c = self.c_mean;
            return Ok(PairSlice {
                n: self.n,
                x: c,
                hx: 0.0,
                kde: [1.0, 1.0, 1.0],
                terms: Box::new([
                    self.z_terms(c, false),
                    self.z_terms(c, false),
                    self.z_terms(c, false),
                ]),
                deterministic_c: true,
            });
        }
        let (lo, hi) = self.x_support();
        if !(lo..=hi).contains(&x) {
            return Err(DensityError::OutsideSupport(x));
        }
        let hx = 0.5 * self.bandwidth;
        Ok(PairSlice {
            n: self.n,
            x,
            hx,
            kde: [self.kde(x - hx), self.kde(x), self.kde(x + hx)],
            terms: Box::new([
                self.z_terms(x - hx, true),
                self.z_terms(x, true),
                self.z_terms(x + hx, true),
            ]),
            deterministic_c: false,
        })
    }

    /// Evaluate the pair density at (z, x). For deterministic C the value is
    /// the z-density at the collapsed conditioning point.
    pub fn evaluate(&self, z: f64, x: f64) -> Result<DensityValue, DensityError> {
        Ok(self.slice(x)?.eval(z))
    }
}

/// One x-slice of the pair density, cheap to evaluate along z.
pub struct PairSlice {
    n: usize,
    x: f64,
    hx: f64,
    /// KDE at x - hx, x, x + hx.
    kde: [f64; 3],
    /// z-polynomial terms at the same three conditioning points.
    terms: Box<[[GaussPoly; 7]; 3]>,
    deterministic_c: bool,
}

impl PairSlice {
    pub fn eval(&self, z: f64) -> DensityValue {
        let order0 = normal_pdf_var(z, self.x) * self.kde[1];
        let mut corr = 0.0;
        for (j, &(_, nx)) in MONOMIAL_ORDERS.iter().enumerate() {
            if self.deterministic_c {
                if nx == 0 {
                    corr += self.terms[1][j].eval(z);
                }
                continue;
            }
            let t = |s: usize| self.terms[s][j].eval(z) * self.kde[s];
            corr += match nx {
                0 => t(1),
                1 => -(t(2) - t(0)) / (2.0 * self.hx),
                2 => (t(2) - 2.0 * t(1) + t(0)) / (self.hx * self.hx),
                _ => unreachable!(),
            };
        }
        let correction = corr / (self.n as f64).sqrt();
        let total = order0 + correction;
        DensityValue {
            order0,
            correction,
            total,
            negative: total < 0.0,
        }
    }

    /// The j-th correction piece alone (with its x-derivatives applied but
    /// without the n^{-1/2} factor), for the reduction-identity checks.
    pub fn correction_term(&self, j: usize, z: f64) -> f64 {
        let (_, nx) = MONOMIAL_ORDERS[j];
        if self.deterministic_c {
            return if nx == 0 { self.terms[1][j].eval(z) } else { 0.0 };
        }
        let t = |s: usize| self.terms[s][j].eval(z) * self.kde[s];
        match nx {
            0 => t(1),
            1 => -(t(2) - t(0)) / (2.0 * self.hx),
            2 => (t(2) - 2.0 * t(1) + t(0)) / (self.hx * self.hx),
            _ => unreachable!(),
        }
    }
}

/// Monte Carlo mixture marginal density of V_n = Sigma_T Z_n: for each draw
/// the conditioning variables integrate out exactly, leaving only the pure
/// (iu)-monomial corrections (orders 1, 2, 3, 5) with per-draw coefficients.
#[derive(Debug, Clone)]
pub struct MarginalVDensity {
    n: usize,
    sample: Vec<SymbolCoefficients>,
}

impl MarginalVDensity {
    pub fn from_sample(sample: &[SymbolCoefficients], n: usize) -> Result<Self, DensityError> {
        if sample.is_empty() {
            return Err(DensityError::EmptySample);
        }
        Ok(MarginalVDensity {
            n,
            sample: sample.to_vec(),
        })
    }

    /// Density of V_n at z with Monte Carlo standard error.
    pub fn evaluate(&self, z: f64) -> MarginalValue {
        let inv_sqrt_n = 1.0 / (self.n as f64).sqrt();
        let mut order0 = Vec::with_capacity(self.sample.len());
        let mut total = Vec::with_capacity(self.sample.len());
        for h in &self.sample {
            let y = h.sigma_t;
            let zeta = z / y;
            let base = GaussPoly::new(vec![1.0], h.c_t);
            let t1 = GaussPoly::new(vec![h.h2, h.h3], h.c_t).neg_deriv_n(1);
            let t2 = GaussPoly::new(vec![0.0, h.h1], h.c_t).neg_deriv_n(2);
            let t4 = GaussPoly::new(vec![h.h4], h.c_t).neg_deriv_n(3);
            let t7 = GaussPoly::new(vec![h.h6], h.c_t).neg_deriv_n(5);
            let o = base.eval(zeta) / y;
            let corr = (t1.eval(zeta) + t2.eval(zeta) + t4.eval(zeta) + t7.eval(zeta)) / y;
            order0.push(o);
            total.push(o + inv_sqrt_n * corr);
        }
        let o = Estimate::from_sample(&order0);
        let t = Estimate::from_sample(&total);
        MarginalValue {
            order0: o.value,
            correction: t.value - o.value,
            total: t.value,
            stderr: t.stderr,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MarginalValue {
    pub order0: f64,
    pub correction: f64,
    pub total: f64,
    pub stderr: f64,
}

/// Simpson integration on a uniform grid (odd point count).
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> f64 {
    let n = if points % 2 == 0 { points + 1 } else { points };
    let h = (hi - lo) / (n - 1) as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n - 1 {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}
