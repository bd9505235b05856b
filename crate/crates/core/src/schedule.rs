//! Variance-preserving noise schedule on continuous time `t in [0, 1]`.
//!
//! The discrete cumulative products `alpha_bar_k` of a scaled-linear beta
//! grid are placed at knots `t = k / n_train_steps` (with `alpha_bar = 1` at
//! `t = 0`), and `log alpha_bar` is interpolated linearly between knots.

use serde::{Deserialize, Serialize};

use crate::error::{check_time, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_train_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_start: 0.00085,
            beta_end: 0.012,
            n_train_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    /// `log_alpha_bar[k]` is the log cumulative product after `k` steps; entry 0 is 0.
    log_alpha_bar: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(ScheduleParams::default()).expect("default schedule is valid")
    }
}

impl Schedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            beta_start,
            beta_end,
            n_train_steps,
        } = params;
        if n_train_steps == 0 {
            return Err(Error::Config("schedule.n_train_steps must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!(
                "schedule betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = scaled_linear_betas(beta_start, beta_end, n_train_steps);
        let mut log_alpha_bar = Vec::with_capacity(n_train_steps + 1);
        let mut acc = 0.0;
        log_alpha_bar.push(acc);
        for b in betas {
            acc += (1.0 - b).ln();
            log_alpha_bar.push(acc);
        }
        Ok(Self {
            params,
            log_alpha_bar,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    fn log_alpha(&self, t: f64) -> f64 {
        let n = self.params.n_train_steps;
        let pos = t * n as f64;
        let k = (pos.floor() as usize).min(n - 1);
        let frac = pos - k as f64;
        let lo = self.log_alpha_bar[k];
        let hi = self.log_alpha_bar[k + 1];
        lo + frac * (hi - lo)
    }

    pub fn alpha_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha(t))
    }

    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma(t))
    }

    /// Unchecked `alpha(t)`; callers guarantee `t in [0, 1]`.
    pub(crate) fn alpha(&self, t: f64) -> f64 {
        if t == 0.0 {
            1.0
        } else {
            self.log_alpha(t).exp()
        }
    }

    /// `sigma(t) = sqrt(1 - alpha) / sqrt(alpha)`, unchecked.
    pub(crate) fn sigma(&self, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let la = self.log_alpha(t);
        // exp(-la) - 1 without cancellation for small |la|
        (-la).exp_m1().sqrt()
    }

    /// `sqrt(1 - alpha(t))`, unchecked.
    pub(crate) fn noise_scale(&self, t: f64) -> f64 {
        if t == 0.0 {
            0.0
        } else {
            (-(self.log_alpha(t).exp_m1())).sqrt()
        }
    }
}

pub fn scaled_linear_betas(beta_start: f64, beta_end: f64, n: usize) -> Vec<f64> {
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    if n == 1 {
        return vec![beta_start];
    }
    (0..n)
        .map(|i| {
            let r = a + (b - a) * i as f64 / (n - 1) as f64;
            r * r
        })
        .collect()
}

/// Strictly decreasing times in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidGrid(format!("time {t} outside [0, 1]")));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidGrid("times must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of steps between consecutive entries.
    pub fn n_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }

    pub fn last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Concatenate with a grid that starts where this one ends.
    pub fn join(&self, other: &TimeGrid) -> Result<TimeGrid> {
        if other.first() != self.last() {
            return Err(Error::InvalidGrid(format!(
                "cannot join grid ending at {} with grid starting at {}",
                self.last(),
                other.first()
            )));
        }
        let mut times = self.times.clone();
        times.extend_from_slice(&other.times[1..]);
        TimeGrid::from_times(times)
    }
}

/// `n_steps + 1` uniformly spaced decreasing times from `t_max` to `t_min`.
pub fn make_grid(n_steps: usize, t_max: f64, t_min: f64) -> Result<TimeGrid> {
    if n_steps == 0 {
        return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
    }
    if !(0.0 <= t_min && t_min < t_max && t_max <= 1.0) {
        return Err(Error::InvalidGrid(format!(
            "need 0 <= t_min < t_max <= 1, got t_min = {t_min}, t_max = {t_max}"
        )));
    }
    let span = t_max - t_min;
    let mut times: Vec<f64> = (0..=n_steps)
        .map(|i| t_max - span * i as f64 / n_steps as f64)
        .collect();
    times[n_steps] = t_min;
    TimeGrid::from_times(times)
}
