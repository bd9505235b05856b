//! Analytic denoiser: exact posterior-mean noise prediction for a
//! prompt-conditioned isotropic Gaussian mixture, plus classifier-free
//! guidance.

mod mixture;
mod view;

pub use mixture::{Component, MixtureModel};
pub use view::{ViewComponent, ViewConditionedMixture, ANGLE_BUCKETS};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptTag {
    /// The unconditional prompt; marginalizes over every label.
    Null,
    Label(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prompt {
    pub tag: PromptTag,
    /// Camera angle in radians for view-conditioned models.
    pub view: Option<f64>,
}

impl Prompt {
    pub fn null() -> Self {
        Self {
            tag: PromptTag::Null,
            view: None,
        }
    }

    pub fn label(label: u32) -> Self {
        Self {
            tag: PromptTag::Label(label),
            view: None,
        }
    }

    pub fn with_view(self, angle: f64) -> Self {
        Self {
            view: Some(angle),
            ..self
        }
    }

    pub fn is_null(&self) -> bool {
        self.tag == PromptTag::Null
    }

    /// Same view, no label.
    pub fn unconditional(&self) -> Self {
        Self {
            tag: PromptTag::Null,
            view: self.view,
        }
    }
}

/// A noise predictor `eps(x, t, prompt)` tied to a schedule.
pub trait Denoiser: Send + Sync {
    fn schedule(&self) -> &Schedule;

    fn dimension(&self) -> usize;

    /// Single-branch noise prediction (no guidance). Undefined at `t = 0`.
    fn predict_noise(&self, x: &[f64], t: f64, prompt: &Prompt) -> Result<Vec<f64>>;

    /// Transpose-Jacobian of [`Denoiser::predict_noise`] in `x`, applied to `cotangent`.
    fn noise_vjp(&self, x: &[f64], t: f64, prompt: &Prompt, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// `(mean, variance)` when the prompt's distribution is one isotropic
    /// Gaussian and guidance cannot change it.
    fn single_gaussian(&self, _prompt: &Prompt) -> Option<(Vec<f64>, f64)> {
        None
    }
}

/// Guided prediction `eps(x, null) + gamma * (eps(x, y) - eps(x, null))`.
///
/// `gamma = 0` and `gamma = 1` return the corresponding branch exactly.
pub fn cfg_noise(
    model: &dyn Denoiser,
    x: &[f64],
    t: f64,
    prompt: &Prompt,
    gamma: f64,
) -> Result<Vec<f64>> {
    if prompt.is_null() {
        if gamma != 0.0 {
            return Err(Error::NullPromptGuidance { gamma });
        }
        return model.predict_noise(x, t, prompt);
    }
    if gamma == 1.0 {
        return model.predict_noise(x, t, prompt);
    }
    let uncond = model.predict_noise(x, t, &prompt.unconditional())?;
    if gamma == 0.0 {
        return Ok(uncond);
    }
    let cond = model.predict_noise(x, t, prompt)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + gamma * (c - u))
        .collect())
}

/// Transpose-Jacobian of [`cfg_noise`].
pub fn cfg_vjp(
    model: &dyn Denoiser,
    x: &[f64],
    t: f64,
    prompt: &Prompt,
    gamma: f64,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    if prompt.is_null() {
        if gamma != 0.0 {
            return Err(Error::NullPromptGuidance { gamma });
        }
        return model.noise_vjp(x, t, prompt, cotangent);
    }
    if gamma == 1.0 {
        return model.noise_vjp(x, t, prompt, cotangent);
    }
    let uncond = model.noise_vjp(x, t, &prompt.unconditional(), cotangent)?;
    if gamma == 0.0 {
        return Ok(uncond);
    }
    let cond = model.noise_vjp(x, t, prompt, cotangent)?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + gamma * (c - u))
        .collect())
}

/// One mixture entry as seen by a particular prompt (and view).
pub(crate) struct Entry<'a> {
    pub log_weight: f64,
    pub mean: &'a [f64],
    pub variance: f64,
}

/// Per-component quantities of the noised mixture at one query point.
pub(crate) struct Responsibilities {
    /// normalized responsibilities
    pub resp: Vec<f64>,
    /// `(x - sqrt(alpha) mu_k) / v_k`
    pub scaled_residual: Vec<Vec<f64>>,
    /// noisy marginal variances `alpha s_k^2 + 1 - alpha`
    pub marginal_var: Vec<f64>,
    pub log_density: f64,
}

pub(crate) fn responsibilities(entries: &[Entry<'_>], x: &[f64], alpha: f64, one_minus_alpha: f64) -> Responsibilities {
    let d = x.len() as f64;
    let sa = alpha.sqrt();
    let mut logits = Vec::with_capacity(entries.len());
    let mut scaled_residual = Vec::with_capacity(entries.len());
    let mut marginal_var = Vec::with_capacity(entries.len());
    for e in entries {
        let v = alpha * e.variance + one_minus_alpha;
        let r: Vec<f64> = x.iter().zip(e.mean).map(|(xi, mi)| xi - sa * mi).collect();
        let sq: f64 = r.iter().map(|z| z * z).sum();
        logits.push(e.log_weight - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * sq / v);
        scaled_residual.push(r.into_iter().map(|z| z / v).collect());
        marginal_var.push(v);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_density = max + sum.ln();
    let resp = logits.iter().map(|l| (l - log_density).exp()).collect();
    Responsibilities {
        resp,
        scaled_residual,
        marginal_var,
        log_density,
    }
}

pub(crate) fn mixture_posterior_mean(entries: &[Entry<'_>], x: &[f64], alpha: f64, one_minus_alpha: f64) -> Vec<f64> {
    let r = responsibilities(entries, x, alpha, one_minus_alpha);
    let sa = alpha.sqrt();
    let mut out = vec![0.0; x.len()];
    for (k, e) in entries.iter().enumerate() {
        let gain = sa * e.variance / r.marginal_var[k];
        let w = r.resp[k];
        for (i, o) in out.iter_mut().enumerate() {
            // mu_k + gain * (x - sqrt(alpha) mu_k)
            *o += w * (e.mean[i] + gain * r.marginal_var[k] * r.scaled_residual[k][i]);
        }
    }
    out
}

/// `sqrt(1 - alpha) * sum_k r_k (x - sqrt(alpha) mu_k) / v_k`, the
/// cancellation-free form of `(x - sqrt(alpha) E[x0|x]) / sqrt(1 - alpha)`.
pub(crate) fn mixture_noise(entries: &[Entry<'_>], x: &[f64], alpha: f64, one_minus_alpha: f64) -> Vec<f64> {
    let r = responsibilities(entries, x, alpha, one_minus_alpha);
    let s = one_minus_alpha.sqrt();
    let mut out = vec![0.0; x.len()];
    for (k, u) in r.scaled_residual.iter().enumerate() {
        let w = r.resp[k] * s;
        for (o, ui) in out.iter_mut().zip(u) {
            *o += w * ui;
        }
    }
    out
}

/// The noise Jacobian is `sqrt(1-a) [ (sum r_k / v_k) I - sum r_k u_k (u_k - u_bar)^T ]`
/// (symmetric), applied here to `w`.
pub(crate) fn mixture_noise_vjp(
    entries: &[Entry<'_>],
    x: &[f64],
    alpha: f64,
    one_minus_alpha: f64,
    w: &[f64],
) -> Vec<f64> {
    let r = responsibilities(entries, x, alpha, one_minus_alpha);
    let s = one_minus_alpha.sqrt();
    let dim = x.len();
    let mut u_bar = vec![0.0; dim];
    let mut diag = 0.0;
    for (k, u) in r.scaled_residual.iter().enumerate() {
        diag += r.resp[k] / r.marginal_var[k];
        for (b, ui) in u_bar.iter_mut().zip(u) {
            *b += r.resp[k] * ui;
        }
    }
    let mut out: Vec<f64> = w.iter().map(|wi| diag * wi).collect();
    for (k, u) in r.scaled_residual.iter().enumerate() {
        let uw: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
        let c = r.resp[k] * uw;
        for ((o, ui), bi) in out.iter_mut().zip(u).zip(&u_bar) {
            *o -= c * (ui - bi);
        }
    }
    out.iter_mut().for_each(|o| *o *= s);
    out
}
