//! Coupled path simulation: one Brownian path drives the reference solution
//! X, the continuous Euler approximation X^n (coefficients frozen at the
//! coarse left endpoints), and the first-variation exponential
//!
//!   Sigma_t = exp( int_0^t b'(X) dW + int_0^t (a' - (b')^2/2)(X) ds ).
//!
//! Brownian paths are built top-down by dyadic bridge refinement with
//! counter-based normals, so a rerun at doubled m refines the same path and
//! results never depend on worker scheduling.

use std::io::{Read, Write};
use std::sync::Arc;

use thiserror::Error;

use crate::grid::TimeGrid;
use crate::model::DiffusionModel;
use crate::rng::CounterRng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state in {what} at fine step {step} (stream {stream})")]
    NonFinite {
        what: &'static str,
        step: usize,
        stream: u64,
    },
    #[error("path dump i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("path dump corrupt: {0}")]
    BadDump(String),
}

/// A Brownian path on the fine grid, reproducible from `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct BrownianPath {
    grid: Arc<TimeGrid>,
    seed: u64,
    stream: u64,
    /// W at every grid time, `w[0] = 0`.
    w: Vec<f64>,
    /// Increments over fine intervals, `increments[i] = w[i+1] - w[i]`.
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<TimeGrid> {
        Arc::clone(&self.grid)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// The antithetic twin: the same grid driven by the negated increments.
    /// Pair averages cancel odd-in-W fluctuations, which the conditional-mean
    /// estimators rely on.
    pub fn antithetic(&self) -> BrownianPath {
        BrownianPath::from_increments(
            Arc::clone(&self.grid),
            self.seed,
            self.stream,
            self.increments.iter().map(|x| -x).collect(),
        )
    }

    /// Rebuild a path object from raw increments (used by the bump oracles
    /// in tests and by the dump reader).
    pub fn from_increments(grid: Arc<TimeGrid>, seed: u64, stream: u64, increments: Vec<f64>) -> Self {
        assert_eq!(increments.len(), grid.steps());
        let mut w = Vec::with_capacity(increments.len() + 1);
        w.push(0.0);
        let mut acc = 0.0;
        for dw in &increments {
            acc += dw;
            w.push(acc);
        }
        BrownianPath {
            grid,
            seed,
            stream,
            w,
            increments,
        }
    }
}

/// Draw the Brownian path for `(seed, stream)` on `grid` by dyadic bridge
/// refinement. Counters are keyed by (level, position), so grids that differ
/// only in the refinement factor m share their coarse randomness.
pub fn sample_brownian(grid: &Arc<TimeGrid>, seed: u64, stream: u64) -> BrownianPath {
    let rng = CounterRng::new(seed, stream);
    let n = grid.n();
    let m = grid.m();
    let nf = grid.uniform_steps();

    // Uniform dyadic part, indexed 0..=nf in uniform coordinates.
    let mut wu = vec![0.0f64; nf + 1];
    let coarse_sd = (1.0 / n as f64).sqrt();
    for k in 0..n {
        let dw = coarse_sd * rng.normal(k as u64);
        wu[(k + 1) * m] = wu[k * m] + dw;
    }
    let mut stride = m;
    let mut level_base = n as u64;
    while stride > 1 {
        let half = stride / 2;
        let h = stride as f64 / nf as f64;
        let sd = (h / 4.0).sqrt();
        let splits = nf / stride;
        for j in 0..splits {
            let left = j * stride;
            let mid = left + half;
            let right = left + stride;
            wu[mid] = 0.5 * (wu[left] + wu[right]) + sd * rng.normal(level_base + j as u64);
        }
        level_base += splits as u64;
        stride = half;
    }

    // Scatter onto the final grid and bridge in the inserted T-points.
    let times = grid.times();
    let mut w = vec![f64::NAN; times.len()];
    for i in 0..=nf {
        w[grid.uniform_to_final(i)] = wu[i];
    }
    let mut counter = nf as u64 + level_base - n as u64; // continue after the last level
    for &(iu, t) in grid.inserted_points() {
        let fi = grid.index_of_time(t).expect("inserted point on grid");
        let (lt, lw) = (times[fi - 1], w[fi - 1]);
        let (rt, rw) = (times[grid.uniform_to_final(iu + 1)], wu[iu + 1]);
        debug_assert!(lw.is_finite() && rw.is_finite());
        let frac = (t - lt) / (rt - lt);
        let var = (t - lt) * (rt - t) / (rt - lt);
        w[fi] = lw + frac * (rw - lw) + var.sqrt() * rng.normal(counter);
        counter += 1;
    }

    let increments: Vec<f64> = w.windows(2).map(|p| p[1] - p[0]).collect();
    BrownianPath {
        grid: Arc::clone(grid),
        seed,
        stream,
        w,
        increments,
    }
}

/// Continuous Euler path on the fine grid: within each coarse interval the
/// drift and diffusion stay frozen at the interval's left coarse state.
pub fn euler_path(model: &DiffusionModel, path: &BrownianPath) -> Result<Vec<f64>, SimError> {
    let grid = path.grid();
    let steps = grid.steps();
    let mut x = Vec::with_capacity(steps + 1);
    let mut cur = model.x0();
    x.push(cur);
    let mut frozen_k = usize::MAX;
    let (mut a_k, mut b_k) = (0.0, 0.0);
    for i in 0..steps {
        let k = grid.coarse_of(i);
        if k != frozen_k {
            // left coarse endpoint is always a grid point already visited
            let xk = x[grid.coarse_start(k)];
            a_k = model.a(xk);
            b_k = model.b(xk);
            frozen_k = k;
        }
        cur += a_k * grid.dt(i) + b_k * path.increments()[i];
        if !cur.is_finite() {
            return Err(SimError::NonFinite {
                what: "euler path",
                step: i,
                stream: path.stream(),
            });
        }
        x.push(cur);
    }
    Ok(x)
}

/// Reference ("truth") path on the fine grid: the exact solution when the
/// model has one, otherwise a fine-grid Euler surrogate with step 1/(n m),
/// accurate to O((n m)^{-1/2}) in the strong sense.
pub fn reference_path(
    model: &DiffusionModel,
    path: &BrownianPath,
) -> Result<(Vec<f64>, bool), SimError> {
    if let Some(exact) = model.exact_path(path.grid(), path.w()) {
        return Ok((exact, true));
    }
    let grid = path.grid();
    let mut x = Vec::with_capacity(grid.steps() + 1);
    let mut cur = model.x0();
    x.push(cur);
    for i in 0..grid.steps() {
        cur += model.a(cur) * grid.dt(i) + model.b(cur) * path.increments()[i];
        if !cur.is_finite() {
            return Err(SimError::NonFinite {
                what: "reference path",
                step: i,
                stream: path.stream(),
            });
        }
        x.push(cur);
    }
    Ok((x, false))
}

/// First-variation exponential along `x_ref`, via left-point Ito sums in the
/// exponent. Returns `(sigma, sigma_inv)`; `sigma[0] = 1`.
pub fn sigma_path(
    model: &DiffusionModel,
    x_ref: &[f64],
    path: &BrownianPath,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let grid = path.grid();
    let steps = grid.steps();
    let mut sigma = Vec::with_capacity(steps + 1);
    let mut sigma_inv = Vec::with_capacity(steps + 1);
    sigma.push(1.0);
    sigma_inv.push(1.0);
    let mut expo = 0.0;
    for i in 0..steps {
        let x = x_ref[i];
        let b1 = model.b1(x);
        expo += b1 * path.increments()[i] + (model.a1(x) - 0.5 * b1 * b1) * grid.dt(i);
        if !expo.is_finite() {
            return Err(SimError::NonFinite {
                what: "sigma exponent",
                step: i,
                stream: path.stream(),
            });
        }
        let s = expo.exp();
        sigma.push(s);
        sigma_inv.push(1.0 / s);
    }
    Ok((sigma, sigma_inv))
}

/// Everything the downstream analysis needs about one simulated path.
#[derive(Debug, Clone)]
pub struct CoupledPaths {
    pub model: DiffusionModel,
    pub path: BrownianPath,
    pub x_ref: Vec<f64>,
    pub x_euler: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_inv: Vec<f64>,
    /// Whether `x_ref` came from a closed-form solution.
    pub used_exact: bool,
}

impl CoupledPaths {
    pub fn simulate(
        model: &DiffusionModel,
        grid: &Arc<TimeGrid>,
        seed: u64,
        stream: u64,
    ) -> Result<CoupledPaths, SimError> {
        let path = sample_brownian(grid, seed, stream);
        Self::from_path(model, path)
    }

    pub fn from_path(model: &DiffusionModel, path: BrownianPath) -> Result<CoupledPaths, SimError> {
        let x_euler = euler_path(model, &path)?;
        let (x_ref, used_exact) = reference_path(model, &path)?;
        let (sigma, sigma_inv) = sigma_path(model, &x_ref, &path)?;
        Ok(CoupledPaths {
            model: model.clone(),
            path,
            x_ref,
            x_euler,
            sigma,
            sigma_inv,
            used_exact,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.path.grid()
    }

    /// Euler state frozen for fine interval i: X^n at the coarse left point.
    #[inline]
    pub fn euler_frozen(&self, i: usize) -> f64 {
        self.x_euler[self.grid().coarse_start(self.grid().coarse_of(i))]
    }

    /// W_t - W_{phi(t)} at the left endpoint of fine interval i.
    #[inline]
    pub fn dw_from_coarse(&self, i: usize) -> f64 {
        let grid = self.grid();
        self.path.w()[i] - self.path.w()[grid.coarse_start(grid.coarse_of(i))]
    }
}

const DUMP_MAGIC: &[u8; 4] = b"EWP1";

/// Binary dump of raw path increments: header {magic "EWP1", n, m, count} as
/// little-endian u64 after the magic, then `count * steps` f64 increments.
pub fn write_dump<W: Write>(
    out: &mut W,
    grid: &TimeGrid,
    paths: &[BrownianPath],
) -> Result<(), SimError> {
    out.write_all(DUMP_MAGIC)?;
    for v in [grid.n() as u64, grid.m() as u64, paths.len() as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    for p in paths {
        for inc in p.increments() {
            out.write_all(&inc.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dump written by [`write_dump`]. Returns `(n, m, increment rows)`.
pub fn read_dump<R: Read>(input: &mut R) -> Result<(u64, u64, Vec<Vec<f64>>), SimError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(SimError::BadDump("bad magic".into()));
    }
    let mut buf = [0u8; 8];
    let mut header = [0u64; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut buf)?;
        *h = u64::from_le_bytes(buf);
    }
    let (n, m, count) = (header[0], header[1], header[2]);
    let steps = (n * m) as usize;
    let mut rows = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut row = Vec::with_capacity(steps);
        for _ in 0..steps {
            input.read_exact(&mut buf)?;
            row.push(f64::from_le_bytes(buf));
        }
        rows.push(row);
    }
    Ok((n, m, rows))
}
