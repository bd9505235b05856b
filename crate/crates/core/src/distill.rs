//! Guidance-driven optimization of a canvas: SDS, SDI and the ISM-style
//! variant, all built on one shared guidance kernel.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kappa::{add_entropy, solve_kappa, EntropyTerm, KappaStrategy, T_MAX};
use crate::oracle::{cfg_noise, Denoiser, Prompt, ANGLE_BUCKETS};
use crate::renderer::{CameraAngle, Canvas, Renderer};
use crate::reparam::{fixed_point_residual, renoise};
use crate::rng::{gaussian_vec, substream, tag, uniform, Stream};
use crate::vecops::{all_finite, norm, norm_sq, rms};
use rand::Rng;

/// Lowest time any step is evaluated at.
pub const T_MIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sds,
    Sdi,
    Ism,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(Mode::Sds),
            "sdi" => Ok(Mode::Sdi),
            "ism" => Ok(Mode::Ism),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected sds, sdi, ism)"))),
        }
    }
}

/// What is subtracted from the prediction inside the guidance bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseTerm {
    /// the injected noise itself
    Full,
    /// the prediction at the inversion endpoint `t + tau`
    Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TSchedule {
    UniformRandom { lo: f64, hi: f64 },
    /// `t_i = t_hi - (t_hi - t_lo) i / n_iters`
    LinearAnneal { t_hi: f64, t_lo: f64 },
    /// Walk a decreasing grid: iteration `i` runs at `times[i + 1]` with
    /// `tau = times[i] - times[i + 1]`.
    Grid { times: Vec<f64> },
}

impl TSchedule {
    pub fn uniform() -> Self {
        TSchedule::UniformRandom { lo: T_MIN, hi: T_MAX }
    }

    pub fn anneal() -> Self {
        TSchedule::LinearAnneal { t_hi: 1.0, t_lo: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauRule {
    Uniform { max: f64 },
    Fixed(f64),
}

impl Default for TauRule {
    fn default() -> Self {
        TauRule::Uniform { max: 1.0 / 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub mode: Mode,
    pub gamma_fwd: f64,
    pub gamma_inv: f64,
    pub kappa_strategy: KappaStrategy,
    pub entropy: EntropyTerm,
    pub noise_term: NoiseTerm,
    pub t_schedule: TSchedule,
    pub tau_rule: TauRule,
}

impl GuidanceConfig {
    pub fn sds(gamma: f64) -> Self {
        Self {
            mode: Mode::Sds,
            gamma_fwd: gamma,
            gamma_inv: 0.0,
            kappa_strategy: KappaStrategy::RandomResampled,
            entropy: EntropyTerm::disabled(),
            noise_term: NoiseTerm::Full,
            t_schedule: TSchedule::uniform(),
            tau_rule: TauRule::default(),
        }
    }

    pub fn sdi() -> Self {
        Self::sdi_with(7.5, -7.5)
    }

    pub fn sdi_with(gamma_fwd: f64, gamma_inv: f64) -> Self {
        Self {
            mode: Mode::Sdi,
            gamma_fwd,
            gamma_inv,
            kappa_strategy: KappaStrategy::ddim_inversion(gamma_inv),
            entropy: EntropyTerm::default(),
            noise_term: NoiseTerm::Full,
            t_schedule: TSchedule::anneal(),
            tau_rule: TauRule::default(),
        }
    }

    pub fn ism(gamma_fwd: f64) -> Self {
        Self {
            mode: Mode::Ism,
            ..Self::sdi_with(gamma_fwd, 0.0)
        }
        .normalized()
    }

    pub fn for_mode(mode: Mode, gamma_fwd: f64, gamma_inv: f64) -> Self {
        match mode {
            Mode::Sds => Self::sds(gamma_fwd),
            Mode::Sdi => Self::sdi_with(gamma_fwd, gamma_inv),
            Mode::Ism => Self::ism(gamma_fwd),
        }
    }

    /// Applies the invariants each mode forces.
    pub fn normalized(mut self) -> Self {
        match self.mode {
            Mode::Sds => {
                self.kappa_strategy = KappaStrategy::RandomResampled;
                self.noise_term = NoiseTerm::Full;
                self.entropy.enabled = false;
            }
            Mode::Ism => {
                self.gamma_inv = 0.0;
                self.kappa_strategy = match self.kappa_strategy {
                    KappaStrategy::DdimInversion { step_rule, grid, .. } => KappaStrategy::DdimInversion {
                        gamma_inv: 0.0,
                        step_rule,
                        grid,
                    },
                    _ => KappaStrategy::ddim_inversion(0.0),
                };
                self.noise_term = NoiseTerm::Interval;
                self.entropy.enabled = false;
            }
            Mode::Sdi => {
                if let KappaStrategy::DdimInversion { step_rule, grid, .. } = self.kappa_strategy {
                    self.kappa_strategy = KappaStrategy::DdimInversion {
                        gamma_inv: self.gamma_inv,
                        step_rule,
                        grid,
                    };
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma_fwd.is_finite() || !self.gamma_inv.is_finite() {
            return Err(Error::Config("guidance scales must be finite".into()));
        }
        if self.entropy.weight < 0.0 {
            return Err(Error::Config(format!("entropy weight must be non-negative, got {}", self.entropy.weight)));
        }
        match self.tau_rule {
            TauRule::Uniform { max } if !(0.0..T_MAX).contains(&max) => {
                return Err(Error::Config(format!("tau upper bound {max} outside [0, {T_MAX})")))
            }
            TauRule::Fixed(tau) if !(0.0..T_MAX).contains(&tau) => {
                return Err(Error::Config(format!("fixed tau {tau} outside [0, {T_MAX})")))
            }
            _ => {}
        }
        match &self.t_schedule {
            TSchedule::UniformRandom { lo, hi } if !(0.0 < *lo && lo <= hi && *hi < 1.0) => {
                Err(Error::Config(format!("uniform t range [{lo}, {hi}] must satisfy 0 < lo <= hi < 1")))
            }
            TSchedule::LinearAnneal { t_hi, t_lo } if !(0.0 < *t_lo && t_lo <= t_hi && *t_hi <= 1.0) => {
                Err(Error::Config(format!("anneal range {t_hi} -> {t_lo} must satisfy 0 < t_lo <= t_hi <= 1")))
            }
            TSchedule::Grid { times } if times.len() < 2 => Err(Error::InvalidGrid("grid schedule needs two times".into())),
            _ => self.kappa_strategy.validate(),
        }
    }
}

/// Output of one guidance evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// gradient with respect to the canvas parameters
    pub gradient: Vec<f64>,
    /// view-space bracket `sigma(t) [prediction - noise_term]`
    pub guidance: Vec<f64>,
    /// CFG prediction at level `t`
    pub prediction: Vec<f64>,
    /// noise used to renoise the rendering
    pub noise: Vec<f64>,
}

/// Prompt seen by the denoiser for a view.
pub fn view_prompt(renderer: &Renderer, prompt: &Prompt, angle: CameraAngle) -> Prompt {
    match renderer {
        Renderer::Tomographic => (*prompt).with_view(angle.radians()),
        Renderer::Identity { .. } => *prompt,
    }
}

#[allow(clippy::too_many_arguments)]
fn guidance_kernel(
    model: &dyn Denoiser,
    renderer: &Renderer,
    canvas: &Canvas,
    angle: CameraAngle,
    g: &[f64],
    t: f64,
    prompt: &Prompt,
    gamma: f64,
    noise: Vec<f64>,
    noise_term: Option<&[f64]>,
) -> Result<StepOutcome> {
    let x = renoise(model, g, &noise, t);
    let prediction = cfg_noise(model, &x, t, prompt, gamma)?;
    let sigma = model.schedule().sigma(t);
    let sub = noise_term.unwrap_or(&noise);
    let guidance: Vec<f64> = prediction.iter().zip(sub).map(|(p, n)| sigma * (p - n)).collect();
    let gradient = renderer.pullback(canvas, angle, &guidance)?;
    Ok(StepOutcome {
        gradient,
        guidance,
        prediction,
        noise,
    })
}

fn render_checked(model: &dyn Denoiser, renderer: &Renderer, canvas: &Canvas, angle: CameraAngle) -> Result<Vec<f64>> {
    let g = renderer.render(canvas, angle)?;
    check_dim(model.dimension(), g.len())?;
    Ok(g)
}

/// `sigma(t) [eps_cfg(x(t)) - eps]` with fresh `eps`, pulled back to the canvas.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    model: &dyn Denoiser,
    renderer: &Renderer,
    canvas: &Canvas,
    angle: CameraAngle,
    t: f64,
    prompt: &Prompt,
    gamma: f64,
    rng: &mut Stream,
) -> Result<StepOutcome> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t });
    }
    let vp = view_prompt(renderer, prompt, angle);
    let g = render_checked(model, renderer, canvas, angle)?;
    let eps = gaussian_vec(g.len(), rng);
    guidance_kernel(model, renderer, canvas, angle, &g, t, &vp, gamma, eps, None)
}

/// Guidance with the noise term solved at `t + tau` by the configured strategy.
///
/// `cached` supplies the previous prediction when the strategy is
/// [`KappaStrategy::CachedPrediction`]; a missing cache falls back to a
/// Gaussian draw.
#[allow(clippy::too_many_arguments)]
pub fn sdi_step(
    model: &dyn Denoiser,
    renderer: &Renderer,
    canvas: &Canvas,
    angle: CameraAngle,
    t: f64,
    tau: f64,
    prompt: &Prompt,
    config: &GuidanceConfig,
    cached: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<StepOutcome> {
    let level = t + tau;
    if !(t > 0.0 && tau >= 0.0 && level <= T_MAX + 1e-12) {
        return Err(Error::InvalidStep { t, tau });
    }
    let vp = view_prompt(renderer, prompt, angle);
    let g = render_checked(model, renderer, canvas, angle)?;
    let kappa = match (&config.kappa_strategy, cached) {
        (KappaStrategy::CachedPrediction, Some(k)) => {
            check_dim(g.len(), k.len())?;
            k.to_vec()
        }
        (KappaStrategy::CachedPrediction, None) => gaussian_vec(g.len(), rng),
        (s, _) => solve_kappa(model, &g, level, &vp, s, config.gamma_fwd, rng)?,
    };
    let interval = match config.noise_term {
        NoiseTerm::Full => None,
        NoiseTerm::Interval => {
            let x_end = renoise(model, &g, &kappa, level);
            Some(cfg_noise(model, &x_end, level, &vp, config.gamma_inv)?)
        }
    };
    let noise = add_entropy(model, &kappa, t, &config.entropy, rng)?;
    guidance_kernel(model, renderer, canvas, angle, &g, t, &vp, config.gamma_fwd, noise, interval.as_deref())
}

/// Dispatches on the mode; SDS ignores `tau` and `cached`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_step(
    model: &dyn Denoiser,
    renderer: &Renderer,
    canvas: &Canvas,
    angle: CameraAngle,
    t: f64,
    tau: f64,
    prompt: &Prompt,
    config: &GuidanceConfig,
    cached: Option<&[f64]>,
    rng: &mut Stream,
) -> Result<StepOutcome> {
    match config.mode {
        Mode::Sds => sds_step(model, renderer, canvas, angle, t, prompt, config.gamma_fwd, rng),
        Mode::Sdi | Mode::Ism => sdi_step(model, renderer, canvas, angle, t, tau, prompt, config, cached, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            _ => Err(Error::Config(format!("unknown optimizer `{s}` (expected sgd, adam)"))),
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, dim: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; dim], vec![0.0; dim]),
        };
        Self { kind, m, v, step: 0 }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            Optimizer::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
            Optimizer::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub n_iters: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Reference image for the per-iteration reconstruction error.
    pub target: Option<Vec<f64>>,
    /// Seed for the cache of [`KappaStrategy::CachedPrediction`].
    pub initial_kappa: Option<Vec<f64>>,
    /// Evaluate the fixed-point residual of each step's noise (one extra
    /// denoiser call per step).
    pub record_residuals: bool,
    /// Keep a copy of the canvas after every iteration.
    pub keep_snapshots: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            n_iters: 2000,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd,
            target: None,
            initial_kappa: None,
            record_residuals: true,
            keep_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub t: f64,
    pub tau: f64,
    pub angle_bucket: usize,
    /// norm of the canvas gradient
    pub guidance_norm: f64,
    /// fixed-point residual of the step's noise at `t + tau` (`NaN` if not recorded)
    pub residual: f64,
    /// the same residual evaluated at `t`, for sensitivity to the level choice
    pub residual_at_t: f64,
    /// RMS of the view-space guidance bracket
    pub loss_proxy: f64,
    /// relative error against the target (`NaN` without one)
    pub reconstruction_error: f64,
    /// the noise solver diverged and the step was skipped
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iterations: Vec<IterationRecord>,
    pub canvas: Canvas,
    /// canvas data after each iteration, when requested
    pub snapshots: Vec<Vec<f64>>,
}

impl RunRecord {
    pub fn final_error(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.reconstruction_error).filter(|e| !e.is_nan())
    }
}

/// `||image(canvas) - target|| / ||target||`, where the image is the squashed
/// grid for tomographic canvases and the rendering otherwise.
pub fn relative_error(renderer: &Renderer, canvas: &Canvas, target: &[f64]) -> Result<f64> {
    let image = match renderer {
        Renderer::Tomographic => canvas.squashed(),
        Renderer::Identity { .. } => renderer.render(canvas, CameraAngle::new(0.0))?,
    };
    check_dim(image.len(), target.len())?;
    let diff: f64 = image.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((diff / norm_sq(target)).sqrt())
}

fn pick_time(schedule: &TSchedule, i: usize, n_iters: usize, rng: &mut Stream) -> Result<(f64, Option<f64>)> {
    Ok(match schedule {
        TSchedule::UniformRandom { lo, hi } => (uniform(*lo, *hi, rng), None),
        TSchedule::LinearAnneal { t_hi, t_lo } => (t_hi - (t_hi - t_lo) * i as f64 / n_iters as f64, None),
        TSchedule::Grid { times } => {
            let (Some(&a), Some(&b)) = (times.get(i), times.get(i + 1)) else {
                return Err(Error::InvalidGrid(format!("grid schedule has {} steps, iteration {i} requested", times.len() - 1)));
            };
            (b, Some(a - b))
        }
    })
}

/// Runs `opts.n_iters` guidance steps from `init`.
///
/// Each iteration draws, from its own substream, the time (per schedule), a
/// uniform angle bucket, and `tau`; times are clamped so that
/// `t + tau <= T_MAX`.
pub fn run_distillation(
    model: &dyn Denoiser,
    renderer: &Renderer,
    init: Canvas,
    prompt: &Prompt,
    config: &GuidanceConfig,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunRecord> {
    if opts.n_iters == 0 {
        return Err(Error::Config("n_iters must be at least 1".into()));
    }
    if !(opts.learning_rate > 0.0) || !opts.learning_rate.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opts.learning_rate)));
    }
    let config = config.clone().normalized();
    config.validate()?;
    if let TSchedule::Grid { times } = &config.t_schedule {
        if times.len() < opts.n_iters + 1 {
            return Err(Error::InvalidGrid(format!(
                "grid schedule has {} steps but {} iterations were requested",
                times.len() - 1,
                opts.n_iters
            )));
        }
    }
    let mut canvas = init;
    let mut opt = OptimizerState::new(opts.optimizer, canvas.data().len());
    let mut cache = opts.initial_kappa.clone();
    let mut records = Vec::with_capacity(opts.n_iters);
    let mut snapshots = Vec::new();
    for i in 0..opts.n_iters {
        let mut rng = substream(seed, tag(&[2, i as u64]));
        let (t_raw, grid_tau) = pick_time(&config.t_schedule, i, opts.n_iters, &mut rng)?;
        let bucket = rng.random_range(0..ANGLE_BUCKETS);
        let angle = CameraAngle::bucket(bucket, ANGLE_BUCKETS);
        let tau = match (grid_tau, config.tau_rule) {
            (Some(tau), _) => tau,
            (None, TauRule::Fixed(tau)) => tau,
            (None, TauRule::Uniform { max }) => uniform(0.0, max, &mut rng),
        };
        let t = match (&config.t_schedule, config.mode) {
            (TSchedule::Grid { .. }, _) => t_raw,
            (_, Mode::Sds) => t_raw.clamp(T_MIN, T_MAX),
            _ => t_raw.min(T_MAX - tau).max(T_MIN.min(T_MAX - tau)),
        };
        let cached = match config.kappa_strategy {
            KappaStrategy::CachedPrediction => cache.as_deref(),
            _ => None,
        };
        let step = guidance_step(model, renderer, &canvas, angle, t, tau, prompt, &config, cached, &mut rng);
        let step = match step {
            Ok(s) => s,
            Err(Error::KappaDiverged { .. }) => {
                records.push(IterationRecord {
                    iteration: i,
                    t,
                    tau,
                    angle_bucket: bucket,
                    guidance_norm: f64::NAN,
                    residual: f64::NAN,
                    residual_at_t: f64::NAN,
                    loss_proxy: f64::NAN,
                    reconstruction_error: error_or_nan(renderer, &canvas, opts.target.as_deref())?,
                    skipped: true,
                });
                if opts.keep_snapshots {
                    snapshots.push(canvas.data().to_vec());
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let (residual, residual_at_t) = if opts.record_residuals {
            let g = renderer.render(&canvas, angle)?;
            let vp = view_prompt(renderer, prompt, angle);
            let at_t = fixed_point_residual(model, &g, &step.noise, t, &vp, config.gamma_fwd)?;
            let at_level = if config.mode == Mode::Sds || tau == 0.0 {
                at_t
            } else {
                fixed_point_residual(model, &g, &step.noise, t + tau, &vp, config.gamma_fwd)?
            };
            (at_level, at_t)
        } else {
            (f64::NAN, f64::NAN)
        };
        opt.apply(canvas.data_mut(), &step.gradient, opts.learning_rate);
        let guidance_norm = norm(&step.gradient);
        if !all_finite(canvas.data()) {
            return Err(Error::NonFinite {
                iteration: i,
                detail: format!(
                    "t={t}, tau={tau}, bucket={bucket}, gradient norm {guidance_norm:e}, guidance rms {:e}, noise norm {:e}",
                    rms(&step.guidance),
                    norm(&step.noise)
                ),
            });
        }
        records.push(IterationRecord {
            iteration: i,
            t,
            tau,
            angle_bucket: bucket,
            guidance_norm,
            residual,
            residual_at_t,
            loss_proxy: rms(&step.guidance),
            reconstruction_error: error_or_nan(renderer, &canvas, opts.target.as_deref())?,
            skipped: false,
        });
        if opts.keep_snapshots {
            snapshots.push(canvas.data().to_vec());
        }
        cache = Some(step.prediction);
    }
    Ok(RunRecord {
        iterations: records,
        canvas,
        snapshots,
    })
}

fn error_or_nan(renderer: &Renderer, canvas: &Canvas, target: Option<&[f64]>) -> Result<f64> {
    target.map_or(Ok(f64::NAN), |t| relative_error(renderer, canvas, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub label: String,
    /// per-coordinate variance of the canvas gradient, averaged over coordinates
    pub mean_variance: f64,
    pub max_variance: f64,
    /// per-coordinate variance of the injected noise, averaged over coordinates
    pub noise_variance: f64,
    /// per-coordinate variance of the view-space guidance bracket
    pub guidance_variance: Vec<f64>,
}

/// Per-coordinate variance of `v` across draws, returned per coordinate.
fn coordinate_variance(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.len() as f64;
    let d = draws[0].len();
    (0..d)
        .map(|j| {
            // shifted by the first draw so identical draws give exactly zero
            let (s1, s2) = draws.iter().fold((0.0, 0.0), |(a, b), v| {
                let dv = v[j] - draws[0][j];
                (a + dv, b + dv * dv)
            });
            ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0)
        })
        .collect()
}

/// Spread of the guidance across randomness draws at a fixed canvas, angle, `t` and `tau`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_variance_probe(
    model: &dyn Denoiser,
    renderer: &Renderer,
    canvas: &Canvas,
    angle: CameraAngle,
    t: f64,
    tau: f64,
    prompt: &Prompt,
    configs: &[(String, GuidanceConfig)],
    n_draws: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if n_draws < 2 {
        return Err(Error::Config("variance probe needs at least two draws".into()));
    }
    configs
        .iter()
        .enumerate()
        .map(|(ci, (label, config))| {
            let config = config.clone().normalized();
            config.validate()?;
            let mut grads = Vec::with_capacity(n_draws);
            let mut noises = Vec::with_capacity(n_draws);
            let mut brackets = Vec::with_capacity(n_draws);
            for k in 0..n_draws {
                let mut rng = substream(seed, tag(&[3, ci as u64, k as u64]));
                let s = guidance_step(model, renderer, canvas, angle, t, tau, prompt, &config, None, &mut rng)?;
                grads.push(s.gradient);
                noises.push(s.noise);
                brackets.push(s.guidance);
            }
            let gv = coordinate_variance(&grads);
            let nv = coordinate_variance(&noises);
            Ok(VarianceRow {
                label: label.clone(),
                mean_variance: gv.iter().sum::<f64>() / gv.len() as f64,
                max_variance: gv.iter().cloned().fold(0.0, f64::max),
                noise_variance: nv.iter().sum::<f64>() / nv.len() as f64,
                guidance_variance: coordinate_variance(&brackets),
            })
        })
        .collect()
}
