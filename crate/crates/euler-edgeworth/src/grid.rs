//! Time discretization: the coarse Euler grid i/n refined m-fold, with the
//! requested evaluation times embedded as grid points.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("coarse step count n must be >= 1")]
    ZeroSteps,
    #[error("refinement factor m must be a power of two >= 1, got {0}")]
    BadRefinement(usize),
    #[error("evaluation time {0} outside (0, 1]")]
    TimeOutOfRange(f64),
    #[error("evaluation times must be strictly increasing")]
    UnsortedTimes,
}

/// Coarse grid `i/n` plus an `m`-fold dyadic refinement plus the evaluation
/// times `T_j`. Every coarse point and every `T_j` is a fine grid point.
#[derive(Debug, Clone)]
pub struct TimeGrid {
    n: usize,
    m: usize,
    t_points: Vec<f64>,
    /// Fine grid times, `times[0] = 0`, strictly increasing, ends at 1.
    times: Vec<f64>,
    /// Index of the coarse interval containing each fine interval.
    coarse_of: Vec<usize>,
    /// Fine index of coarse point `k/n`, length `n + 1`.
    coarse_start: Vec<usize>,
    /// Fine indices of the inserted `t_points`.
    t_indices: Vec<usize>,
    /// For each inserted point, the uniform fine interval it splits.
    inserted: Vec<(usize, f64)>,
    /// Final index of uniform point i (identity when nothing was inserted).
    uniform_map: Vec<usize>,
}

impl TimeGrid {
    pub fn new(n: usize, m: usize, t_points: &[f64]) -> Result<TimeGrid, GridError> {
        if n == 0 {
            return Err(GridError::ZeroSteps);
        }
        if m == 0 || !m.is_power_of_two() {
            return Err(GridError::BadRefinement(m));
        }
        for w in t_points.windows(2) {
            if w[1] <= w[0] {
                return Err(GridError::UnsortedTimes);
            }
        }
        let nf = n * m;
        let uniform: Vec<f64> = (0..=nf).map(|i| i as f64 / nf as f64).collect();
        let mut times = uniform.clone();
        let mut inserted = Vec::new();
        for &t in t_points {
            if !(t > 0.0 && t <= 1.0) {
                return Err(GridError::TimeOutOfRange(t));
            }
            let pos = t * nf as f64;
            let near = pos.round();
            if (pos - near).abs() < 1e-9 {
                continue; // already a uniform grid point
            }
            inserted.push((pos.floor() as usize, t));
        }
        inserted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        for &(_, t) in inserted.iter().rev() {
            let j = times.partition_point(|&x| x < t);
            times.insert(j, t);
        }
        let uniform_map: Vec<usize> = (0..=nf)
            .map(|i| i + inserted.iter().filter(|(iu, _)| *iu < i).count())
            .collect();

        let mut coarse_of = Vec::with_capacity(times.len() - 1);
        let mut coarse_start = vec![0usize; n + 1];
        for (i, &t) in times.iter().enumerate() {
            let k = ((t * n as f64) + 1e-9).floor() as usize;
            if i + 1 < times.len() {
                coarse_of.push(k.min(n - 1));
            }
            let on_coarse = (t * n as f64 - k as f64).abs() < 1e-9;
            if on_coarse && k <= n {
                coarse_start[k] = i;
            }
        }
        let t_indices = t_points
            .iter()
            .map(|&t| {
                times
                    .iter()
                    .position(|&x| (x - t).abs() < 1e-9 / nf as f64 || x == t)
                    .expect("t_point embedded by construction")
            })
            .collect();

        Ok(TimeGrid {
            n,
            m,
            t_points: t_points.to_vec(),
            times,
            coarse_of,
            coarse_start,
            t_indices,
            inserted,
            uniform_map,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t_points(&self) -> &[f64] {
        &self.t_points
    }

    /// Fine grid times including 0 and 1.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of fine intervals.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// Coarse interval index k with `times[i] in [k/n, (k+1)/n)`.
    pub fn coarse_of(&self, i: usize) -> usize {
        self.coarse_of[i]
    }

    /// Fine index of the coarse point `k/n`.
    pub fn coarse_start(&self, k: usize) -> usize {
        self.coarse_start[k]
    }

    /// The left-endpoint map: phi(times[i]) = k/n for fine interval i.
    pub fn phi(&self, i: usize) -> f64 {
        self.coarse_of[i] as f64 / self.n as f64
    }

    /// Fine indices of the evaluation times, in the order given.
    pub fn t_indices(&self) -> &[usize] {
        &self.t_indices
    }

    /// Fine index whose time equals `t`, if `t` is on the grid.
    pub fn index_of_time(&self, t: f64) -> Option<usize> {
        let j = self.times.partition_point(|&x| x < t - 1e-12);
        if j < self.times.len() && (self.times[j] - t).abs() < 1e-9 {
            Some(j)
        } else {
            None
        }
    }

    pub(crate) fn inserted_points(&self) -> &[(usize, f64)] {
        &self.inserted
    }

    /// Uniform fine step count `n * m` (without inserted points).
    pub(crate) fn uniform_steps(&self) -> usize {
        self.n * self.m
    }

    /// Final index of the i-th uniform grid point.
    pub(crate) fn uniform_to_final(&self, i: usize) -> usize {
        self.uniform_map[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_points_are_fine_points() {
        let g = TimeGrid::new(5, 4, &[0.33, 1.0]).unwrap();
        for k in 0..=5 {
            let t = k as f64 / 5.0;
            let i = g.coarse_start(k);
            assert!((g.times()[i] - t).abs() < 1e-12);
        }
        assert!(g.index_of_time(0.33).is_some());
        assert_eq!(g.index_of_time(1.0), Some(g.steps()));
    }

    #[test]
    fn times_strictly_increasing() {
        let g = TimeGrid::new(7, 8, &[0.123456, 0.5]).unwrap();
        assert_eq!(g.times()[0], 0.0);
        assert_eq!(*g.times().last().unwrap(), 1.0);
        for w in g.times().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn phi_is_left_coarse_endpoint() {
        let g = TimeGrid::new(4, 2, &[]).unwrap();
        for i in 0..g.steps() {
            let t = g.times()[i];
            let phi = g.phi(i);
            assert!(phi <= t + 1e-12 && t < phi + 0.25 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(TimeGrid::new(0, 1, &[]).unwrap_err(), GridError::ZeroSteps);
        assert_eq!(
            TimeGrid::new(4, 3, &[]).unwrap_err(),
            GridError::BadRefinement(3)
        );
        assert!(matches!(
            TimeGrid::new(4, 2, &[1.5]).unwrap_err(),
            GridError::TimeOutOfRange(_)
        ));
        assert_eq!(
            TimeGrid::new(4, 2, &[0.5, 0.25]).unwrap_err(),
            GridError::UnsortedTimes
        );
    }
}
