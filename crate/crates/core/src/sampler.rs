//! DDIM on rescaled samples `x_bar = x / sqrt(alpha)`: forward Euler in
//! `sigma`, in both time directions.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_time, Error, Result};
use crate::oracle::{cfg_noise, Denoiser, Prompt};
use crate::schedule::{make_grid, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_bar: Vec<f64>,
    pub t: f64,
}

impl DiffusionState {
    pub fn new(x_bar: Vec<f64>, t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(Self { x_bar, t })
    }

    /// From an unscaled noisy sample `x(t)`.
    pub fn from_noisy(model: &dyn Denoiser, x: &[f64], t: f64) -> Result<Self> {
        check_time(t)?;
        let sa = model.schedule().alpha(t).sqrt();
        Ok(Self {
            x_bar: x.iter().map(|v| v / sa).collect(),
            t,
        })
    }

    /// `x(t) = sqrt(alpha(t)) x_bar(t)`.
    pub fn noisy(&self, model: &dyn Denoiser) -> Vec<f64> {
        let sa = model.schedule().alpha(self.t).sqrt();
        self.x_bar.iter().map(|v| sa * v).collect()
    }
}

/// Visited states with the guided noise prediction made at each.
///
/// For sampling, `noise_preds[i]` is the prediction at `states[i]`; a final
/// state at `t = 0` records zeros (the prediction's limit there). For
/// inversion, `noise_preds[i]` is the prediction that produced `states[i]`,
/// and the clean starting state records zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<DiffusionState>,
    pub noise_preds: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn last(&self) -> Option<&DiffusionState> {
        self.states.last()
    }

    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

fn guided(model: &dyn Denoiser, x_bar: &[f64], t: f64, prompt: &Prompt, gamma: f64) -> Result<Vec<f64>> {
    let sa = model.schedule().alpha(t).sqrt();
    let x: Vec<f64> = x_bar.iter().map(|v| sa * v).collect();
    cfg_noise(model, &x, t, prompt, gamma)
}

/// One DDIM step from `t` to `t - tau`.
pub fn ddim_step(
    model: &dyn Denoiser,
    state: &DiffusionState,
    tau: f64,
    prompt: &Prompt,
    gamma: f64,
) -> Result<DiffusionState> {
    ddim_step_with_pred(model, state, tau, prompt, gamma).map(|(s, _)| s)
}

fn ddim_step_with_pred(
    model: &dyn Denoiser,
    state: &DiffusionState,
    tau: f64,
    prompt: &Prompt,
    gamma: f64,
) -> Result<(DiffusionState, Vec<f64>)> {
    check_dim(model.dimension(), state.x_bar.len())?;
    let next_t = state.t - tau;
    if !(tau >= 0.0) || next_t < 0.0 {
        return Err(Error::InvalidStep { t: state.t, tau });
    }
    let eps = guided(model, &state.x_bar, state.t, prompt, gamma)?;
    if tau == 0.0 {
        return Ok((state.clone(), eps));
    }
    let sched = model.schedule();
    let ds = sched.sigma(next_t) - sched.sigma(state.t);
    let x_bar = state.x_bar.iter().zip(&eps).map(|(x, e)| x + e * ds).collect();
    Ok((DiffusionState { x_bar, t: next_t }, eps))
}

/// Iterate [`ddim_step`] along a decreasing grid starting at `grid.first()`.
pub fn ddim_sample(
    model: &dyn Denoiser,
    x_bar_init: &[f64],
    grid: &TimeGrid,
    prompt: &Prompt,
    gamma: f64,
) -> Result<Trajectory> {
    if grid.n_steps() == 0 {
        return Err(Error::InvalidGrid("sampling grid needs at least one step".into()));
    }
    check_dim(model.dimension(), x_bar_init.len())?;
    let times = grid.times();
    let mut state = DiffusionState::new(x_bar_init.to_vec(), times[0])?;
    let mut traj = Trajectory::default();
    for &next in &times[1..] {
        let (new_state, eps) = ddim_step_with_pred(model, &state, state.t - next, prompt, gamma)?;
        // pin the time to the grid value exactly
        let new_state = DiffusionState { t: next, ..new_state };
        traj.states.push(state);
        traj.noise_preds.push(eps);
        state = new_state;
    }
    let last_pred = if state.t > 0.0 {
        guided(model, &state.x_bar, state.t, prompt, gamma)?
    } else {
        vec![0.0; model.dimension()]
    };
    traj.states.push(state);
    traj.noise_preds.push(last_pred);
    Ok(traj)
}

/// Placement of inversion times between 0 and the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionGrid {
    #[default]
    UniformTime,
    /// uniform steps rounded to the schedule's discrete training indices
    TrainingIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub state: DiffusionState,
    /// `(x(t) - sqrt(alpha) x0) / sqrt(1 - alpha)` at the target time
    pub noise: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Increasing inversion times `0 = t_0 < ... < t_n = t_target`.
pub fn inversion_times(model: &dyn Denoiser, t_target: f64, n_steps: usize, grid: InversionGrid) -> Result<Vec<f64>> {
    check_time(t_target)?;
    if t_target == 0.0 {
        return Ok(vec![0.0]);
    }
    if n_steps == 0 {
        return Err(Error::InvalidGrid("inversion to t > 0 needs at least one step".into()));
    }
    let mut times: Vec<f64> = make_grid(n_steps, t_target, 0.0)?.times().iter().rev().copied().collect();
    if grid == InversionGrid::TrainingIndex {
        let n = model.schedule().params().n_train_steps as f64;
        let mut snapped: Vec<f64> = vec![0.0];
        for &t in &times[1..] {
            let s = ((t * n).round() / n).max(1.0 / n).min(t_target);
            if s > *snapped.last().unwrap() {
                snapped.push(s);
            }
        }
        *snapped.last_mut().unwrap() = t_target;
        times = snapped;
    }
    Ok(times)
}

/// DDIM inversion from a clean sample at `t = 0` up to `t_target`.
///
/// Each step from `t_i` to `t_{i+1}` evaluates the guided prediction at the
/// destination noise level on the current rescaled sample,
/// `eps(sqrt(alpha(t_{i+1})) x_bar(t_i), t_{i+1})`, so the prediction is
/// never queried at `t = 0`.
pub fn ddim_invert(
    model: &dyn Denoiser,
    x0: &[f64],
    t_target: f64,
    n_steps: usize,
    prompt: &Prompt,
    gamma_inv: f64,
) -> Result<Inversion> {
    ddim_invert_with(model, x0, t_target, n_steps, prompt, gamma_inv, InversionGrid::UniformTime)
}

/// [`ddim_invert`] with an explicit placement of the inversion times.
pub fn ddim_invert_with(
    model: &dyn Denoiser,
    x0: &[f64],
    t_target: f64,
    n_steps: usize,
    prompt: &Prompt,
    gamma_inv: f64,
    grid: InversionGrid,
) -> Result<Inversion> {
    let times = inversion_times(model, t_target, n_steps, grid)?;
    ddim_invert_on(model, x0, &times, prompt, gamma_inv)
}

/// [`ddim_invert`] on explicit increasing times starting at 0.
pub fn ddim_invert_on(
    model: &dyn Denoiser,
    x0: &[f64],
    times: &[f64],
    prompt: &Prompt,
    gamma_inv: f64,
) -> Result<Inversion> {
    check_dim(model.dimension(), x0.len())?;
    if times.first() != Some(&0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("inversion times must increase from 0".into()));
    }
    let sched = model.schedule();
    let mut state = DiffusionState::new(x0.to_vec(), 0.0)?;
    let mut traj = Trajectory::default();
    let mut pred = vec![0.0; x0.len()];
    for &next in &times[1..] {
        check_time(next)?;
        let eps = guided(model, &state.x_bar, next, prompt, gamma_inv)?;
        let ds = sched.sigma(next) - sched.sigma(state.t);
        let x_bar = state.x_bar.iter().zip(&eps).map(|(x, e)| x + e * ds).collect();
        traj.states.push(state);
        traj.noise_preds.push(pred);
        state = DiffusionState { x_bar, t: next };
        pred = eps;
    }
    let noise = if state.t == 0.0 {
        vec![0.0; x0.len()]
    } else {
        let s = sched.sigma(state.t);
        state.x_bar.iter().zip(x0).map(|(xb, x)| (xb - x) / s).collect()
    };
    traj.states.push(state.clone());
    traj.noise_preds.push(pred);
    Ok(Inversion {
        state,
        noise,
        trajectory: traj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::MixtureModel;
    use crate::schedule::Schedule;
    use crate::vecops::max_abs_diff;

    fn gaussian_1d() -> MixtureModel {
        MixtureModel::single_gaussian(Schedule::default(), vec![0.5], 0.4).unwrap()
    }

    #[test]
    fn zero_tau_keeps_state() {
        let m = gaussian_1d();
        let s = DiffusionState::new(vec![1.3], 0.6).unwrap();
        assert_eq!(ddim_step(&m, &s, 0.0, &Prompt::label(0), 1.0).unwrap(), s);
    }

    #[test]
    fn rejects_bad_steps() {
        let m = gaussian_1d();
        let s = DiffusionState::new(vec![1.3], 0.2).unwrap();
        assert!(matches!(ddim_step(&m, &s, -0.1, &Prompt::label(0), 1.0), Err(Error::InvalidStep { .. })));
        assert!(matches!(ddim_step(&m, &s, 0.3, &Prompt::label(0), 1.0), Err(Error::InvalidStep { .. })));
    }

    #[test]
    fn one_step_grid_is_one_step() {
        let m = gaussian_1d();
        let grid = make_grid(1, 0.8, 0.3).unwrap();
        let traj = ddim_sample(&m, &[2.0], &grid, &Prompt::label(0), 1.0).unwrap();
        let direct = ddim_step(&m, &DiffusionState::new(vec![2.0], 0.8).unwrap(), 0.8 - 0.3, &Prompt::label(0), 1.0).unwrap();
        assert_eq!(traj.states.len(), 2);
        assert!(max_abs_diff(&traj.states[1].x_bar, &direct.x_bar) == 0.0);
    }

    #[test]
    fn noise_preds_are_conditional_predictions() {
        let m = MixtureModel::multimodal(Schedule::default(), 3, 2).unwrap();
        let grid = make_grid(12, 1.0, 1e-4).unwrap();
        let y = Prompt::label(1);
        let traj = ddim_sample(&m, &[3.0, -2.0, 1.0], &grid, &y, 1.0).unwrap();
        assert_eq!(traj.noise_preds.len(), traj.states.len());
        for (s, e) in traj.states.iter().zip(&traj.noise_preds) {
            let direct = m.predict_noise(&s.noisy(&m), s.t, &y).unwrap();
            assert_eq!(&direct, e);
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let m = gaussian_1d();
        let grid = TimeGrid::from_times(vec![0.5]).unwrap();
        assert!(matches!(ddim_sample(&m, &[0.0], &grid, &Prompt::label(0), 1.0), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn inversion_edge_cases() {
        let m = gaussian_1d();
        let inv = ddim_invert(&m, &[1.7], 0.0, 0, &Prompt::label(0), 0.0).unwrap();
        assert_eq!(inv.state.x_bar, vec![1.7]);
        assert_eq!(inv.noise, vec![0.0]);
        assert!(matches!(ddim_invert(&m, &[1.7], 0.5, 0, &Prompt::label(0), 0.0), Err(Error::InvalidGrid(_))));
        // implied noise shrinks as the target approaches zero
        let a = ddim_invert(&m, &[1.7], 1e-2, 1, &Prompt::label(0), 0.0).unwrap().noise[0].abs();
        let b = ddim_invert(&m, &[1.7], 1e-4, 1, &Prompt::label(0), 0.0).unwrap().noise[0].abs();
        assert!(b < a && b < 0.05, "{a} {b}");
    }

    #[test]
    fn training_index_grid_snaps() {
        let m = gaussian_1d();
        let times = inversion_times(&m, 0.5, 7, InversionGrid::TrainingIndex).unwrap();
        assert_eq!(times[0], 0.0);
        assert_eq!(*times.last().unwrap(), 0.5);
        for t in &times[1..times.len() - 1] {
            assert!(((t * 1000.0).round() - t * 1000.0).abs() < 1e-9);
        }
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn deterministic() {
        let m = MixtureModel::multimodal(Schedule::default(), 4, 7).unwrap();
        let grid = make_grid(30, 1.0, 1e-4).unwrap();
        let a = ddim_sample(&m, &[1.0, 2.0, 3.0, 4.0], &grid, &Prompt::label(0), 7.5).unwrap();
        let b = ddim_sample(&m, &[1.0, 2.0, 3.0, 4.0], &grid, &Prompt::label(0), 7.5).unwrap();
        assert_eq!(a, b);
    }
}
