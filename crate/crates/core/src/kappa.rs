//! Strategies for the noise term `kappa` that, added back to `x0`, should
//! reproduce a noisy state whose one-step denoising returns `x0`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::oracle::{cfg_noise, cfg_vjp, Denoiser, MixtureModel, Prompt};
use crate::reparam::{renoise, residuals};
use crate::rng::{gaussian_vec, substream, tag, Stream};
use crate::sampler::{ddim_invert_with, InversionGrid};
use crate::schedule::TimeGrid;
use crate::vecops::{norm, norm_sq};

/// Largest time at which noise terms are solved.
pub const T_MAX: f64 = 0.98;

/// Iterates whose norm exceeds `DIVERGENCE_FACTOR * sqrt(d)` abort.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRule {
    /// `int(10 t)` steps, at least one
    TenT,
    Fixed(usize),
}

impl StepRule {
    pub fn steps(self, t: f64) -> usize {
        match self {
            // the epsilon keeps e.g. 10 * 0.3 from flooring to 2
            StepRule::TenT => ((10.0 * t + 1e-9).floor() as usize).max(1),
            StepRule::Fixed(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KappaStrategy {
    /// fresh standard Gaussian on every call
    RandomResampled,
    /// one standard Gaussian per `(dimension, seed)`
    RandomFixed { seed: u64 },
    /// Picard iteration of the fixed-point equation from a Gaussian start
    FixedPointIteration { steps: usize },
    /// backtracking descent on the squared residual from a Gaussian start
    GradientDescent { steps: usize, rate: f64 },
    /// implied noise of a DDIM inversion with guidance `gamma_inv`
    DdimInversion {
        gamma_inv: f64,
        step_rule: StepRule,
        #[serde(default)]
        grid: InversionGrid,
    },
    /// closed-form root; single-Gaussian models only
    Exact,
    /// the previous step's prediction, supplied by the distillation loop
    CachedPrediction,
}

impl KappaStrategy {
    pub fn fixed_point() -> Self {
        KappaStrategy::FixedPointIteration { steps: 10 }
    }

    pub fn gradient_descent() -> Self {
        KappaStrategy::GradientDescent { steps: 10, rate: 0.1 }
    }

    pub fn ddim_inversion(gamma_inv: f64) -> Self {
        KappaStrategy::DdimInversion {
            gamma_inv,
            step_rule: StepRule::TenT,
            grid: InversionGrid::UniformTime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KappaStrategy::FixedPointIteration { steps } | KappaStrategy::GradientDescent { steps, .. } if steps == 0 => {
                Err(Error::Config(format!("{self} needs at least one step")))
            }
            KappaStrategy::GradientDescent { rate, .. } if !(rate > 0.0) => {
                Err(Error::Config(format!("{self} needs a positive rate")))
            }
            KappaStrategy::DdimInversion {
                step_rule: StepRule::Fixed(0),
                ..
            } => Err(Error::Config("ddim-inversion needs at least one step".into())),
            _ => Ok(()),
        }
    }

    /// Does solving consume randomness?
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            KappaStrategy::RandomResampled
                | KappaStrategy::FixedPointIteration { .. }
                | KappaStrategy::GradientDescent { .. }
        )
    }
}

impl fmt::Display for KappaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KappaStrategy::RandomResampled => write!(f, "random-resampled"),
            KappaStrategy::RandomFixed { .. } => write!(f, "random-fixed"),
            KappaStrategy::FixedPointIteration { .. } => write!(f, "fixed-point"),
            KappaStrategy::GradientDescent { .. } => write!(f, "gradient-descent"),
            KappaStrategy::DdimInversion { gamma_inv, .. } => write!(f, "ddim-inversion({gamma_inv})"),
            KappaStrategy::Exact => write!(f, "exact"),
            KappaStrategy::CachedPrediction => write!(f, "cached"),
        }
    }
}

impl FromStr for KappaStrategy {
    type Err = Error;

    /// Parses the names used on the command line; `ddim-inversion` defaults
    /// to `gamma_inv = -7.5` unless written `ddim-inversion(<gamma>)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("ddim-inversion") {
            let gamma_inv = match rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
                Some(g) => g
                    .parse()
                    .map_err(|_| Error::Config(format!("bad inversion guidance in `{s}`")))?,
                None if rest.is_empty() => -7.5,
                None => return Err(Error::Config(format!("unknown strategy `{s}`"))),
            };
            return Ok(KappaStrategy::ddim_inversion(gamma_inv));
        }
        match s {
            "random-resampled" => Ok(KappaStrategy::RandomResampled),
            "random-fixed" => Ok(KappaStrategy::RandomFixed { seed: 0 }),
            "fixed-point" => Ok(KappaStrategy::fixed_point()),
            "gradient-descent" => Ok(KappaStrategy::gradient_descent()),
            "exact" => Ok(KappaStrategy::Exact),
            "cached" => Ok(KappaStrategy::CachedPrediction),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected random-resampled, random-fixed, fixed-point, gradient-descent, ddim-inversion, exact, cached)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KappaSolution {
    pub kappa: Vec<f64>,
    /// For fixed-point iteration: whether the last increment shrank.
    pub converged: Option<bool>,
    /// Squared-residual objective after each accepted descent step, starting value first.
    pub objective_trace: Vec<f64>,
}

impl KappaSolution {
    fn plain(kappa: Vec<f64>) -> Self {
        Self {
            kappa,
            converged: None,
            objective_trace: Vec::new(),
        }
    }
}

pub fn solve_kappa(
    model: &dyn Denoiser,
    x0: &[f64],
    t: f64,
    prompt: &Prompt,
    strategy: &KappaStrategy,
    gamma_fwd: f64,
    rng: &mut Stream,
) -> Result<Vec<f64>> {
    solve_kappa_detailed(model, x0, t, prompt, strategy, gamma_fwd, rng).map(|s| s.kappa)
}

pub fn solve_kappa_detailed(
    model: &dyn Denoiser,
    x0: &[f64],
    t: f64,
    prompt: &Prompt,
    strategy: &KappaStrategy,
    gamma_fwd: f64,
    rng: &mut Stream,
) -> Result<KappaSolution> {
    let d = model.dimension();
    check_dim(d, x0.len())?;
    if !(t > 0.0 && t <= T_MAX + 1e-12) {
        return Err(Error::TimeOutOfRange { t });
    }
    strategy.validate()?;
    let limit = DIVERGENCE_FACTOR * (d as f64).sqrt();
    let guard = |v: &[f64]| -> Result<()> {
        let n = norm(v);
        if n.is_finite() && n <= limit {
            Ok(())
        } else {
            Err(Error::KappaDiverged {
                strategy: strategy.to_string(),
                norm: n,
                limit,
            })
        }
    };
    match *strategy {
        KappaStrategy::RandomResampled => Ok(KappaSolution::plain(gaussian_vec(d, rng))),
        KappaStrategy::RandomFixed { seed } => Ok(KappaSolution::plain(fixed_noise(d, seed))),
        KappaStrategy::FixedPointIteration { steps } => {
            let mut eps = gaussian_vec(d, rng);
            let mut prev_inc = f64::INFINITY;
            let mut last_ratio = f64::INFINITY;
            for _ in 0..steps {
                let next = cfg_noise(model, &renoise(model, x0, &eps, t), t, prompt, gamma_fwd)?;
                guard(&next)?;
                let inc = norm(&crate::vecops::sub(&next, &eps));
                if prev_inc.is_finite() {
                    last_ratio = if prev_inc > 0.0 { inc / prev_inc } else { 0.0 };
                }
                prev_inc = inc;
                eps = next;
            }
            Ok(KappaSolution {
                kappa: eps,
                converged: Some(last_ratio < 1.0),
                objective_trace: Vec::new(),
            })
        }
        KappaStrategy::GradientDescent { steps, rate } => {
            let sn = model.schedule().noise_scale(t);
            let objective = |eps: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let x = renoise(model, x0, eps, t);
                let pred = cfg_noise(model, &x, t, prompt, gamma_fwd)?;
                let r: Vec<f64> = eps.iter().zip(&pred).map(|(e, p)| e - p).collect();
                Ok((norm_sq(&r), r, x))
            };
            let mut eps = gaussian_vec(d, rng);
            let (mut f, mut r, mut x) = objective(&eps)?;
            let mut trace = vec![f];
            let mut lr = rate;
            for _ in 0..steps {
                // grad = 2 (r - sqrt(1 - alpha) J^T r)
                let jt_r = cfg_vjp(model, &x, t, prompt, gamma_fwd, &r)?;
                let grad: Vec<f64> = r.iter().zip(&jt_r).map(|(ri, ji)| 2.0 * (ri - sn * ji)).collect();
                let mut accepted = false;
                for _ in 0..30 {
                    let cand: Vec<f64> = eps.iter().zip(&grad).map(|(e, g)| e - lr * g).collect();
                    guard(&cand)?;
                    let (fc, rc, xc) = objective(&cand)?;
                    if fc <= f {
                        eps = cand;
                        (f, r, x) = (fc, rc, xc);
                        accepted = true;
                        break;
                    }
                    lr *= 0.5;
                }
                trace.push(f);
                if !accepted {
                    break;
                }
            }
            Ok(KappaSolution {
                kappa: eps,
                converged: None,
                objective_trace: trace,
            })
        }
        KappaStrategy::DdimInversion { gamma_inv, step_rule, grid } => {
            let inv = ddim_invert_with(model, x0, t, step_rule.steps(t), prompt, gamma_inv, grid)?;
            guard(&inv.noise)?;
            Ok(KappaSolution::plain(inv.noise))
        }
        KappaStrategy::Exact => exact_kappa(model, x0, t, prompt).map(KappaSolution::plain),
        KappaStrategy::CachedPrediction => Err(Error::Unsupported(
            "cached kappa needs a previous prediction and is only available inside the distillation loop".into(),
        )),
    }
}

/// The standard Gaussian vector behind `RandomFixed { seed }`.
pub fn fixed_noise(dim: usize, seed: u64) -> Vec<f64> {
    gaussian_vec(dim, &mut substream(seed, tag(&[0x006b_6170_7061, dim as u64])))
}

/// Closed-form root `sigma(t) (x0 - mu) / s^2` for a single isotropic Gaussian.
pub fn exact_kappa(model: &dyn Denoiser, x0: &[f64], t: f64, prompt: &Prompt) -> Result<Vec<f64>> {
    check_dim(model.dimension(), x0.len())?;
    let (mean, var) = model
        .single_gaussian(prompt)
        .ok_or_else(|| Error::Unsupported("exact kappa is only available for single-Gaussian models".into()))?;
    let sigma = model.schedule().sigma(t);
    Ok(x0.iter().zip(&mean).map(|(x, m)| sigma * (x - m) / var).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyTerm {
    pub weight: f64,
    pub enabled: bool,
}

impl Default for EntropyTerm {
    fn default() -> Self {
        Self {
            weight: 0.3,
            enabled: true,
        }
    }
}

impl EntropyTerm {
    pub fn disabled() -> Self {
        Self {
            weight: 0.3,
            enabled: false,
        }
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.weight != 0.0
    }
}

/// `kappa + weight * sqrt(1 - alpha(t)) * eps_H` with fresh `eps_H`.
pub fn add_entropy(model: &dyn Denoiser, kappa: &[f64], t: f64, term: &EntropyTerm, rng: &mut Stream) -> Result<Vec<f64>> {
    crate::error::check_time(t)?;
    if term.weight < 0.0 {
        return Err(Error::Config(format!("entropy weight must be non-negative, got {}", term.weight)));
    }
    if !term.is_active() {
        return Ok(kappa.to_vec());
    }
    let scale = term.weight * model.schedule().noise_scale(t);
    let h = gaussian_vec(kappa.len(), rng);
    Ok(kappa.iter().zip(h).map(|(k, e)| k + scale * e).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub strategy: String,
    pub t: f64,
    pub mean_residual: f64,
    pub std_residual: f64,
    pub diverged_fraction: f64,
    pub mean_noise_residual: f64,
    pub std_noise_residual: f64,
    pub n_valid: usize,
}

impl SweepRow {
    /// Monte-Carlo standard error of `mean_residual`.
    pub fn standard_error(&self) -> f64 {
        if self.n_valid == 0 {
            f64::NAN
        } else {
            self.std_residual / (self.n_valid as f64).sqrt()
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Fixed-point residual statistics for every `(strategy, t)`.
///
/// All strategies and times see the same clean samples `x0` (common random
/// numbers); each `(strategy, t, sample)` gets its own randomness substream.
/// A sample models one optimization run: under `RandomFixed` it keeps one
/// noise vector for every `t`, distinct from other samples'.
pub fn residual_sweep(
    model: &MixtureModel,
    strategies: &[KappaStrategy],
    t_grid: &TimeGrid,
    prompt: &Prompt,
    gamma_fwd: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(&t) = t_grid.times().iter().find(|&&t| !(t > 0.0 && t <= T_MAX + 1e-12)) {
        return Err(Error::InvalidGrid(format!("sweep time {t} outside (0, {T_MAX}]")));
    }
    if n_samples == 0 {
        return Err(Error::Config("sweep needs at least one sample".into()));
    }
    for s in strategies {
        s.validate()?;
    }
    let x0s: Vec<Vec<f64>> = (0..n_samples)
        .map(|j| model.sample_clean(prompt, &mut substream(seed, tag(&[0, j as u64]))))
        .collect::<Result<_>>()?;
    residual_sweep_on(model, &x0s, strategies, t_grid, prompt, gamma_fwd, seed)
}

/// [`residual_sweep`] over caller-supplied clean samples.
pub fn residual_sweep_on(
    model: &dyn Denoiser,
    x0s: &[Vec<f64>],
    strategies: &[KappaStrategy],
    t_grid: &TimeGrid,
    prompt: &Prompt,
    gamma_fwd: f64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(&t) = t_grid.times().iter().find(|&&t| !(t > 0.0 && t <= T_MAX + 1e-12)) {
        return Err(Error::InvalidGrid(format!("sweep time {t} outside (0, {T_MAX}]")));
    }
    if x0s.is_empty() {
        return Err(Error::Config("sweep needs at least one sample".into()));
    }
    let n_samples = x0s.len();
    let mut rows = Vec::new();
    for (si, strategy) in strategies.iter().enumerate() {
        for (ti, &t) in t_grid.times().iter().enumerate() {
            let outcomes: Vec<Result<Option<(f64, f64)>>> = x0s
                .par_iter()
                .enumerate()
                .map(|(j, x0)| {
                    let mut rng = substream(seed, tag(&[1, si as u64, ti as u64, j as u64]));
                    // each sample stands for its own optimization run, so it
                    // gets its own fixed noise, shared across all times
                    let strategy = match *strategy {
                        KappaStrategy::RandomFixed { seed: fs } => &KappaStrategy::RandomFixed {
                            seed: tag(&[fs, j as u64]),
                        },
                        _ => strategy,
                    };
                    match solve_kappa(model, x0, t, prompt, strategy, gamma_fwd, &mut rng) {
                        Ok(k) => {
                            let r = residuals(model, x0, &k, t, prompt, gamma_fwd)?;
                            if r.x0_space.is_finite() {
                                Ok(Some((r.x0_space, r.noise_space)))
                            } else {
                                Ok(None)
                            }
                        }
                        Err(Error::KappaDiverged { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect();
            let mut x0_res = Vec::with_capacity(n_samples);
            let mut noise_res = Vec::with_capacity(n_samples);
            let mut diverged = 0usize;
            for o in outcomes {
                match o? {
                    Some((a, b)) => {
                        x0_res.push(a);
                        noise_res.push(b);
                    }
                    None => diverged += 1,
                }
            }
            let (mean, std) = mean_std(&x0_res);
            let (nmean, nstd) = mean_std(&noise_res);
            rows.push(SweepRow {
                strategy: strategy.to_string(),
                t,
                mean_residual: mean,
                std_residual: std,
                diverged_fraction: diverged as f64 / n_samples as f64,
                mean_noise_residual: nmean,
                std_noise_residual: nstd,
                n_valid: x0_res.len(),
            });
        }
    }
    Ok(rows)
}
