//! Scalar diffusion models dX = a(X)dt + b(X)dW with the derivative
//! information the error expansion needs: a, a', a'' and b, b', b'', b'''.
//!
//! Built-in models code their derivatives analytically; user models supply
//! all derivatives explicitly and are validated by finite differences, never
//! auto-differentiated.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::grid::TimeGrid;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("{kind} expects {expected} parameters, got {got}")]
    WrongParameterCount {
        kind: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("diffusion scale must be positive, got {0}")]
    NonPositiveSigma(f64),
}

/// Built-in model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinKind {
    /// dX = mu X dt + sigma X dW, params [mu, sigma, x0].
    Gbm,
    /// dX = -theta X dt + sigma dW, params [theta, sigma, x0].
    Ou,
    /// dX = (alpha + beta X)dt + (gamma + delta X)dW, params [alpha, beta, gamma, delta, x0].
    LinearSde,
    /// dX = -theta X dt + sigma dW, params [theta, sigma, x0]; theta = 0 gives pure noise.
    ConstDiff,
}

impl BuiltinKind {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "gbm" => Ok(BuiltinKind::Gbm),
            "ou" => Ok(BuiltinKind::Ou),
            "linearsde" | "linear_sde" | "linear" => Ok(BuiltinKind::LinearSde),
            "constdiff" | "const_diff" => Ok(BuiltinKind::ConstDiff),
            other => Err(ModelError::UnknownKind(other.into())),
        }
    }
}

type Coeff = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-defined model: every coefficient and derivative supplied explicitly.
pub struct CustomModel {
    pub name: String,
    pub a: Coeff,
    pub a1: Coeff,
    pub a2: Coeff,
    pub b: Coeff,
    pub b1: Coeff,
    pub b2: Coeff,
    pub b3: Coeff,
}

#[derive(Clone)]
enum Kind {
    Gbm { mu: f64, sigma: f64 },
    Ou { theta: f64, sigma: f64 },
    LinearSde { alpha: f64, beta: f64, gamma: f64, delta: f64 },
    ConstDiff { theta: f64, sigma: f64 },
    Custom(Arc<CustomModel>),
}

/// Immutable scalar diffusion description; cheap to clone and safe to share
/// across workers.
#[derive(Clone)]
pub struct DiffusionModel {
    name: String,
    params: Vec<f64>,
    x0: f64,
    kind: Kind,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("x0", &self.x0)
            .finish()
    }
}

/// Construct a built-in model from its parameter vector.
pub fn builtin_model(kind: BuiltinKind, params: &[f64]) -> Result<DiffusionModel, ModelError> {
    let expect = |expected: usize, kind: &'static str| {
        if params.len() != expected {
            Err(ModelError::WrongParameterCount {
                kind,
                expected,
                got: params.len(),
            })
        } else {
            Ok(())
        }
    };
    match kind {
        BuiltinKind::Gbm => {
            expect(3, "gbm")?;
            let (mu, sigma, x0) = (params[0], params[1], params[2]);
            if sigma <= 0.0 {
                return Err(ModelError::NonPositiveSigma(sigma));
            }
            Ok(DiffusionModel {
                name: format!("gbm(mu={mu},sigma={sigma},x0={x0})"),
                params: params.to_vec(),
                x0,
                kind: Kind::Gbm { mu, sigma },
            })
        }
        BuiltinKind::Ou => {
            expect(3, "ou")?;
            let (theta, sigma, x0) = (params[0], params[1], params[2]);
            if sigma <= 0.0 {
                return Err(ModelError::NonPositiveSigma(sigma));
            }
            Ok(DiffusionModel {
                name: format!("ou(theta={theta},sigma={sigma},x0={x0})"),
                params: params.to_vec(),
                x0,
                kind: Kind::Ou { theta, sigma },
            })
        }
        BuiltinKind::LinearSde => {
            expect(5, "linearsde")?;
            let (alpha, beta, gamma, delta, x0) =
                (params[0], params[1], params[2], params[3], params[4]);
            if gamma == 0.0 && delta == 0.0 {
                return Err(ModelError::NonPositiveSigma(0.0));
            }
            Ok(DiffusionModel {
                name: format!("linearsde(alpha={alpha},beta={beta},gamma={gamma},delta={delta},x0={x0})"),
                params: params.to_vec(),
                x0,
                kind: Kind::LinearSde { alpha, beta, gamma, delta },
            })
        }
        BuiltinKind::ConstDiff => {
            expect(3, "constdiff")?;
            let (theta, sigma, x0) = (params[0], params[1], params[2]);
            if sigma <= 0.0 {
                return Err(ModelError::NonPositiveSigma(sigma));
            }
            Ok(DiffusionModel {
                name: format!("constdiff(theta={theta},sigma={sigma},x0={x0})"),
                params: params.to_vec(),
                x0,
                kind: Kind::ConstDiff { theta, sigma },
            })
        }
    }
}

impl DiffusionModel {
    /// Register a user model. Derivatives are taken on faith here; run
    /// [`check_derivatives`] to validate them.
    pub fn custom(model: CustomModel, x0: f64) -> DiffusionModel {
        DiffusionModel {
            name: model.name.clone(),
            params: Vec::new(),
            x0,
            kind: Kind::Custom(Arc::new(model)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    #[inline]
    pub fn a(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Gbm { mu, .. } => mu * x,
            Kind::Ou { theta, .. } | Kind::ConstDiff { theta, .. } => -theta * x,
            Kind::LinearSde { alpha, beta, .. } => alpha + beta * x,
            Kind::Custom(c) => (c.a)(x),
        }
    }

    #[inline]
    pub fn a1(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Gbm { mu, .. } => *mu,
            Kind::Ou { theta, .. } | Kind::ConstDiff { theta, .. } => -theta,
            Kind::LinearSde { beta, .. } => *beta,
            Kind::Custom(c) => (c.a1)(x),
        }
    }

    #[inline]
    pub fn a2(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Custom(c) => (c.a2)(x),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn b(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Gbm { sigma, .. } => sigma * x,
            Kind::Ou { sigma, .. } | Kind::ConstDiff { sigma, .. } => *sigma,
            Kind::LinearSde { gamma, delta, .. } => gamma + delta * x,
            Kind::Custom(c) => (c.b)(x),
        }
    }

    #[inline]
    pub fn b1(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Gbm { sigma, .. } => *sigma,
            Kind::Ou { .. } | Kind::ConstDiff { .. } => 0.0,
            Kind::LinearSde { delta, .. } => *delta,
            Kind::Custom(c) => (c.b1)(x),
        }
    }

    #[inline]
    pub fn b2(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Custom(c) => (c.b2)(x),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn b3(&self, x: f64) -> f64 {
        match &self.kind {
            Kind::Custom(c) => (c.b3)(x),
            _ => 0.0,
        }
    }

    /// Whether a closed-form pathwise solution is available.
    pub fn has_exact_solution(&self) -> bool {
        matches!(self.kind, Kind::Gbm { .. } | Kind::Ou { .. })
    }

    /// Evaluate the exact solution on the fine grid, given the Brownian path
    /// values `w` at the grid times. For OU the variation-of-constants
    /// stochastic integral is evaluated by left-point quadrature on the same
    /// grid, which agrees with fine Euler to O(1/(n m)).
    pub fn exact_path(&self, grid: &TimeGrid, w: &[f64]) -> Option<Vec<f64>> {
        let times = grid.times();
        match self.kind {
            Kind::Gbm { mu, sigma } => Some(
                times
                    .iter()
                    .zip(w)
                    .map(|(&t, &wt)| self.x0 * ((mu - 0.5 * sigma * sigma) * t + sigma * wt).exp())
                    .collect(),
            ),
            Kind::Ou { theta, sigma } => {
                let mut out = Vec::with_capacity(times.len());
                // X_t = e^{-theta t} x0 + sigma int_0^t e^{-theta(t-s)} dW_s
                let mut integral = 0.0; // e^{theta t_i} weighted sum
                out.push(self.x0);
                for i in 0..times.len() - 1 {
                    let dw = w[i + 1] - w[i];
                    integral += (theta * times[i]).exp() * dw;
                    let t = times[i + 1];
                    out.push((-theta * t).exp() * (self.x0 + sigma * integral));
                }
                Some(out)
            }
            _ => None,
        }
    }
}

/// Per-pair result of the finite-difference derivative validation.
#[derive(Debug, Clone)]
pub struct DerivativePair {
    pub pair: &'static str,
    pub max_mismatch: f64,
    pub threshold: f64,
    pub flagged: bool,
}

/// Report of [`check_derivatives`].
#[derive(Debug, Clone)]
pub struct DerivativeReport {
    pub pairs: Vec<DerivativePair>,
}

impl DerivativeReport {
    pub fn all_ok(&self) -> bool {
        self.pairs.iter().all(|p| !p.flagged)
    }
}

/// Check each coded derivative against a central difference of the function
/// below it: |(f(x+h)-f(x-h))/(2h) - f'(x)| should be O(h^2). A pair is
/// flagged when the mismatch exceeds 10 h^2 (1 + |curvature proxy|).
pub fn check_derivatives(model: &DiffusionModel, xs: &[f64], h: f64) -> DerivativeReport {
    assert!(h > 0.0, "step h must be positive");
    assert!(!xs.is_empty(), "need at least one evaluation point");
    let check = |f: &dyn Fn(f64) -> f64,
                 d: &dyn Fn(f64) -> f64,
                 curv: &dyn Fn(f64) -> f64,
                 pair: &'static str| {
        let mut max_mismatch: f64 = 0.0;
        let mut max_threshold: f64 = 0.0;
        for &x in xs {
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            max_mismatch = max_mismatch.max((fd - d(x)).abs());
            max_threshold = max_threshold.max(10.0 * h * h * (1.0 + curv(x).abs()));
        }
        DerivativePair {
            pair,
            max_mismatch,
            threshold: max_threshold,
            flagged: max_mismatch > max_threshold,
        }
    };
    let pairs = vec![
        check(&|x| model.a(x), &|x| model.a1(x), &|x| model.a2(x), "(a, a')"),
        check(&|x| model.a1(x), &|x| model.a2(x), &|x| model.a2(x), "(a', a'')"),
        check(&|x| model.b(x), &|x| model.b1(x), &|x| model.b2(x), "(b, b')"),
        check(&|x| model.b1(x), &|x| model.b2(x), &|x| model.b3(x), "(b', b'')"),
        check(&|x| model.b2(x), &|x| model.b3(x), &|x| model.b3(x), "(b'', b''')"),
    ];
    DerivativeReport { pairs }
}
