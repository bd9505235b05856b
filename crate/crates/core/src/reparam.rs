//! The single-step denoised variable `x0(t) = x_bar(t) - sigma(t) eps(x(t))`,
//! the update it obeys, and the fixed-point residual of its noise term.

use crate::error::{check_dim, check_time, Error, Result};
use crate::oracle::{cfg_noise, Denoiser, Prompt};
use crate::sampler::{DiffusionState, Trajectory};
use crate::vecops::{max_abs_diff, norm, rms};

#[derive(Debug, Clone, PartialEq)]
pub struct X0State {
    pub x0: Vec<f64>,
    pub t: f64,
    /// The noise whose re-addition to `x0` reconstructs `x(t)`.
    pub kappa: Option<Vec<f64>>,
}

/// `x(t) = sqrt(alpha(t)) x0 + sqrt(1 - alpha(t)) eps`.
pub fn renoise(model: &dyn Denoiser, x0: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    let sched = model.schedule();
    let (sa, sn) = (sched.alpha(t).sqrt(), sched.noise_scale(t));
    x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
}

pub fn to_x0(model: &dyn Denoiser, state: &DiffusionState, prompt: &Prompt, gamma: f64) -> Result<X0State> {
    check_dim(model.dimension(), state.x_bar.len())?;
    check_time(state.t)?;
    if state.t == 0.0 {
        return Ok(X0State {
            x0: state.x_bar.clone(),
            t: 0.0,
            kappa: None,
        });
    }
    let eps = cfg_noise(model, &state.noisy(model), state.t, prompt, gamma)?;
    let sigma = model.schedule().sigma(state.t);
    let x0 = state.x_bar.iter().zip(&eps).map(|(x, e)| x - sigma * e).collect();
    Ok(X0State {
        x0,
        t: state.t,
        kappa: Some(eps),
    })
}

/// Renoise `x0` to `t - tau` with `kappa`, denoise there, and step
/// `x0 - sigma(t - tau) [eps - kappa]`. The returned state carries the new
/// prediction as its `kappa`.
pub fn x0_update(
    model: &dyn Denoiser,
    state: &X0State,
    tau: f64,
    kappa: &[f64],
    prompt: &Prompt,
    gamma: f64,
) -> Result<X0State> {
    check_dim(model.dimension(), state.x0.len())?;
    check_dim(model.dimension(), kappa.len())?;
    let next_t = state.t - tau;
    if !(tau >= 0.0) || next_t < 0.0 {
        return Err(Error::InvalidStep { t: state.t, tau });
    }
    if next_t == 0.0 {
        return Ok(X0State {
            x0: state.x0.clone(),
            t: 0.0,
            kappa: None,
        });
    }
    let x = renoise(model, &state.x0, kappa, next_t);
    let pred = cfg_noise(model, &x, next_t, prompt, gamma)?;
    let sigma = model.schedule().sigma(next_t);
    let x0 = state
        .x0
        .iter()
        .zip(pred.iter().zip(kappa))
        .map(|(x, (p, k))| x - sigma * (p - k))
        .collect();
    Ok(X0State {
        x0,
        t: next_t,
        kappa: Some(pred),
    })
}

/// Fixed-point residual of a candidate noise, in both conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// `sigma(t) * ||eps - eps_theta(...)|| / sqrt(d)`
    pub x0_space: f64,
    /// `||eps - eps_theta(...)|| / sqrt(d)`
    pub noise_space: f64,
}

pub fn residuals(
    model: &dyn Denoiser,
    x0: &[f64],
    eps: &[f64],
    t: f64,
    prompt: &Prompt,
    gamma: f64,
) -> Result<Residual> {
    check_dim(model.dimension(), x0.len())?;
    check_dim(model.dimension(), eps.len())?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t });
    }
    let pred = cfg_noise(model, &renoise(model, x0, eps, t), t, prompt, gamma)?;
    let diff: Vec<f64> = eps.iter().zip(&pred).map(|(e, p)| e - p).collect();
    let noise_space = rms(&diff);
    Ok(Residual {
        x0_space: model.schedule().sigma(t) * noise_space,
        noise_space,
    })
}

/// Per-coordinate `x0`-space RMS residual of the fixed-point equation.
pub fn fixed_point_residual(
    model: &dyn Denoiser,
    x0: &[f64],
    eps: &[f64],
    t: f64,
    prompt: &Prompt,
    gamma: f64,
) -> Result<f64> {
    residuals(model, x0, eps, t, prompt, gamma).map(|r| r.x0_space)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// `(t, deviation)` for each consecutive pair, keyed by the later time
    pub per_step: Vec<(f64, f64)>,
    pub max_deviation: f64,
}

impl EquivalenceReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

/// Checks, for each consecutive pair of a sampled trajectory, that the
/// `x0` update driven by the recorded predictions reproduces `x0` of the next
/// DDIM state.
pub fn equivalence_check(
    model: &dyn Denoiser,
    trajectory: &Trajectory,
    prompt: &Prompt,
    gamma: f64,
) -> Result<EquivalenceReport> {
    if trajectory.noise_preds.len() != trajectory.states.len() || trajectory.states.is_empty() {
        return Err(Error::MissingNoisePredictions);
    }
    let sched = model.schedule();
    let mut per_step = Vec::with_capacity(trajectory.n_steps());
    let mut max_deviation: f64 = 0.0;
    for i in 0..trajectory.n_steps() {
        let (s0, s1) = (&trajectory.states[i], &trajectory.states[i + 1]);
        let (e0, e1) = (&trajectory.noise_preds[i], &trajectory.noise_preds[i + 1]);
        let (sig0, sig1) = (sched.sigma(s0.t), sched.sigma(s1.t));
        let via_update: Vec<f64> = (0..s0.x_bar.len())
            .map(|j| {
                let x0 = s0.x_bar[j] - sig0 * e0[j];
                x0 - sig1 * (e1[j] - e0[j])
            })
            .collect();
        let via_ddim = to_x0(model, s1, prompt, gamma)?.x0;
        let dev = max_abs_diff(&via_update, &via_ddim);
        max_deviation = max_deviation.max(dev);
        per_step.push((s1.t, dev));
    }
    Ok(EquivalenceReport {
        per_step,
        max_deviation,
    })
}

pub const MIN_ODE_CHECK_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct OdePoint {
    pub t: f64,
    pub lhs_norm: f64,
    pub rhs_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeCheckReport {
    pub points: Vec<OdePoint>,
    pub max_rel_error: f64,
    pub max_lhs_norm: f64,
    pub max_rhs_norm: f64,
}

/// Norms below this are treated as exact zeros when forming relative errors.
const ODE_ZERO: f64 = 1e-8;

/// Central-difference check of `d x0 / dt = -sigma(t) d/dt eps(x(t))` at the
/// interior states of a dense trajectory. Neighbouring points `t +- h` are
/// reached by one DDIM step from each state.
pub fn ode_identity_check(
    model: &dyn Denoiser,
    trajectory: &Trajectory,
    prompt: &Prompt,
    gamma: f64,
    fd_step: f64,
) -> Result<OdeCheckReport> {
    if trajectory.n_steps() < MIN_ODE_CHECK_STEPS {
        return Err(Error::TrajectoryTooShort {
            len: trajectory.states.len(),
            min: MIN_ODE_CHECK_STEPS + 1,
        });
    }
    if trajectory.noise_preds.len() != trajectory.states.len() {
        return Err(Error::MissingNoisePredictions);
    }
    if !(fd_step > 0.0) {
        return Err(Error::InvalidStep { t: 0.0, tau: fd_step });
    }
    let sched = model.schedule();
    let h = fd_step;
    let mut points = Vec::new();
    for i in 1..trajectory.states.len() - 1 {
        let s = &trajectory.states[i];
        let eps = &trajectory.noise_preds[i];
        if s.t - h <= 0.0 || s.t + h > 1.0 {
            continue;
        }
        let sig = sched.sigma(s.t);
        let probe = |tn: f64| -> Result<(Vec<f64>, Vec<f64>)> {
            let ds = sched.sigma(tn) - sig;
            let x_bar: Vec<f64> = s.x_bar.iter().zip(eps).map(|(x, e)| x + e * ds).collect();
            let st = DiffusionState { x_bar, t: tn };
            let e = cfg_noise(model, &st.noisy(model), tn, prompt, gamma)?;
            let sn = sched.sigma(tn);
            let x0 = st.x_bar.iter().zip(&e).map(|(x, ee)| x - sn * ee).collect();
            Ok((x0, e))
        };
        let (x0p, ep) = probe(s.t + h)?;
        let (x0m, em) = probe(s.t - h)?;
        let lhs: Vec<f64> = x0p.iter().zip(&x0m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let rhs: Vec<f64> = ep.iter().zip(&em).map(|(a, b)| -sig * (a - b) / (2.0 * h)).collect();
        let (ln, rn) = (norm(&lhs), norm(&rhs));
        let scale = ln.max(rn);
        let rel_error = if scale < ODE_ZERO {
            0.0
        } else {
            norm(&crate::vecops::sub(&lhs, &rhs)) / scale
        };
        points.push(OdePoint {
            t: s.t,
            lhs_norm: ln,
            rhs_norm: rn,
            rel_error,
        });
    }
    let max_rel_error = points.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    let max_lhs_norm = points.iter().map(|p| p.lhs_norm).fold(0.0, f64::max);
    let max_rhs_norm = points.iter().map(|p| p.rhs_norm).fold(0.0, f64::max);
    Ok(OdeCheckReport {
        points,
        max_rel_error,
        max_lhs_norm,
        max_rhs_norm,
    })
}
