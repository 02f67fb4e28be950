//! Small numerical helpers shared across the crate: stable summation,
//! online moments, the standard normal distribution and weighted
//! least squares on log-log data.

/// Pairwise (cascade) summation. Deterministic for a fixed input order and
/// accurate to O(log n) rounding, independent of worker count as long as the
/// inputs arrive in index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Mean and unbiased variance via Welford's online algorithm.
#[derive(Debug, Clone, Copy, Default)]
pub struct OnlineStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl OnlineStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Summary of a Monte Carlo estimate: point value plus standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_sample(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs) / n;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&dev) / (n - 1.0).max(1.0);
        Estimate {
            value: mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// z-score of this estimate against a reference value.
    pub fn z_score(&self, reference: f64) -> f64 {
        (self.value - reference) / self.stderr
    }
}

/// Sample covariance of two columns together with the standard error of the
/// covariance estimator (moment-based, valid for large samples).
pub fn covariance_with_stderr(xs: &[f64], ys: &[f64]) -> Estimate {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let prod: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .collect();
    let cov = pairwise_sum(&prod) / n;
    let sq: Vec<f64> = prod.iter().map(|p| (p - cov) * (p - cov)).collect();
    let var_cov = pairwise_sum(&sq) / n;
    Estimate {
        value: cov * n / (n - 1.0),
        stderr: (var_cov / n).sqrt(),
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(y: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * y * y).exp()
}

/// Density of N(0, var) at z.
pub fn normal_pdf_var(z: f64, var: f64) -> f64 {
    FRAC_1_SQRT_2PI / var.sqrt() * (-0.5 * z * z / var).exp()
}

/// Standard normal distribution function, double-precision accurate.
pub fn normal_cdf(y: f64) -> f64 {
    0.5 * erfc(-y / std::f64::consts::SQRT_2)
}

/// Complementary error function, Cody's rational approximations
/// (relative error below 1e-15 across the real line).
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        const C: [f64; 9] = [
            5.64188496988670089e-1,
            8.88314979438837594e0,
            6.61191906371416295e1,
            2.98635138197400131e2,
            8.81952221241769090e2,
            1.71204761263407058e3,
            2.05107837782607147e3,
            1.23033935479799725e3,
            2.15311535474403846e-8,
        ];
        const D: [f64; 8] = [
            1.57449261107098347e1,
            1.17693950891312499e2,
            5.37181101862009858e2,
            1.62138957456669019e3,
            3.29079923573345963e3,
            4.36261909014324716e3,
            3.43936767414372164e3,
            1.23033935480374942e3,
        ];
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        exp_mxsq(y) * (xnum + C[7]) / (xden + D[7])
    } else {
        const P: [f64; 6] = [
            3.05326634961232344e-1,
            3.60344899949804439e-1,
            1.25781726111229246e-1,
            1.60837851487422766e-2,
            6.58749161529837803e-4,
            1.63153871373020978e-2,
        ];
        const Q: [f64; 5] = [
            2.56852019228982242e0,
            1.87295284992346047e0,
            5.27905102951428412e-1,
            6.05183413124413191e-2,
            2.33520497626869185e-3,
        ];
        const SQRPI: f64 = 5.6418958354775628695e-1;
        let z = 1.0 / (y * y);
        let mut xnum = P[5] * z;
        let mut xden = z;
        for i in 0..4 {
            xnum = (xnum + P[i]) * z;
            xden = (xden + Q[i]) * z;
        }
        let r = z * (xnum + P[4]) / (xden + Q[4]);
        exp_mxsq(y) * (SQRPI - r) / y
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

// exp(-y^2) evaluated as exp(-ysq^2)*exp(-(y-ysq)(y+ysq)) with ysq rounded
// to 1/16, which preserves relative accuracy for large y.
fn exp_mxsq(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.16112374387056560e0,
        1.13864154151050156e2,
        3.77485237685302021e2,
        3.20937758913846947e3,
        1.85777706184603153e-1,
    ];
    const B: [f64; 4] = [
        2.36012909523441209e1,
        2.44024637934444173e2,
        1.28261652607737228e3,
        2.84423683343917062e3,
    ];
    let z = x * x;
    let mut xnum = A[4] * z;
    let mut xden = z;
    for i in 0..3 {
        xnum = (xnum + A[i]) * z;
        xden = (xden + B[i]) * z;
    }
    x * (xnum + A[3]) / (xden + B[3])
}

/// Result of a weighted least-squares line fit.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Weighted least squares of y against x with weights 1/sigma_i^2.
pub fn weighted_least_squares(xs: &[f64], ys: &[f64], sigmas: &[f64]) -> LineFit {
    assert!(xs.len() == ys.len() && ys.len() == sigmas.len());
    assert!(xs.len() >= 2, "need at least two points for a line fit");
    let w: Vec<f64> = sigmas
        .iter()
        .map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(xs).map(|(w, x)| w * x).sum();
    let swy: f64 = w.iter().zip(ys).map(|(w, y)| w * y).sum();
    let xbar = swx / sw;
    let ybar = swy / sw;
    let sxx: f64 = w
        .iter()
        .zip(xs)
        .map(|(w, x)| w * (x - xbar) * (x - xbar))
        .sum();
    let sxy: f64 = w
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| w * (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    LineFit {
        slope,
        intercept: ybar - slope * xbar,
        slope_stderr: (1.0 / sxx).sqrt(),
    }
}

/// Fit of log(value) against log(n) with stderr weights propagated to the
/// log scale. Values must be strictly positive.
pub fn log_log_fit(ns: &[f64], values: &[f64], stderrs: &[f64]) -> Result<LineFit, String> {
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err("log-log regression requires strictly positive values".into());
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let sig: Vec<f64> = values
        .iter()
        .zip(stderrs)
        .map(|(v, s)| (s / v).max(1e-12))
        .collect();
    Ok(weighted_least_squares(&xs, &ys, &sig))
}
