use std::collections::BTreeMap;

use rand::Rng;

use super::{mixture_noise, mixture_noise_vjp, mixture_posterior_mean, responsibilities, Denoiser, Entry, Prompt, PromptTag};
use crate::error::{check_dim, check_time, Error, Result};
use crate::rng::{gaussian_vec, Stream};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// isotropic variance `s^2`
    pub variance: f64,
    pub label: u32,
}

/// Gaussian mixture whose weights sum to one within each prompt label. The
/// null prompt puts a uniform prior over labels.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    schedule: Schedule,
    dimension: usize,
    components: Vec<Component>,
    n_labels: usize,
}

impl MixtureModel {
    pub fn new(schedule: Schedule, components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidModel("mixture needs at least one component".into()))?;
        let dimension = first.mean.len();
        if dimension == 0 {
            return Err(Error::InvalidModel("mixture dimension must be positive".into()));
        }
        let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dimension {
                return Err(Error::InvalidModel(format!(
                    "component {k} has mean of length {}, expected {dimension}",
                    c.mean.len()
                )));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} has non-positive variance {}", c.variance)));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} has non-positive weight {}", c.weight)));
            }
            *totals.entry(c.label).or_default() += c.weight;
        }
        for (label, total) in &totals {
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("weights of label {label} sum to {total}, expected 1")));
            }
        }
        Ok(Self {
            schedule,
            dimension,
            components,
            n_labels: totals.len(),
        })
    }

    pub fn single_gaussian(schedule: Schedule, mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(
            schedule,
            vec![Component {
                weight: 1.0,
                mean,
                variance,
                label: 0,
            }],
        )
    }

    /// Four components in `dim` dimensions split across two labels, each label
    /// bimodal. Means are drawn once from `N(0, 1.5^2)` with the given seed.
    pub fn multimodal(schedule: Schedule, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed);
        let weights = [0.6, 0.4, 0.5, 0.5];
        let components = weights
            .iter()
            .enumerate()
            .map(|(k, &weight)| Component {
                weight,
                mean: gaussian_vec(dim, &mut rng).into_iter().map(|z| 1.5 * z).collect(),
                variance: 0.09,
                label: (k / 2) as u32,
            })
            .collect();
        Self::new(schedule, components)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn entries(&self, prompt: &Prompt) -> Result<Vec<Entry<'_>>> {
        let entries: Vec<Entry<'_>> = match prompt.tag {
            PromptTag::Null => {
                let prior = -(self.n_labels as f64).ln();
                self.components
                    .iter()
                    .map(|c| Entry {
                        log_weight: c.weight.ln() + prior,
                        mean: &c.mean,
                        variance: c.variance,
                    })
                    .collect()
            }
            PromptTag::Label(l) => self
                .components
                .iter()
                .filter(|c| c.label == l)
                .map(|c| Entry {
                    log_weight: c.weight.ln(),
                    mean: &c.mean,
                    variance: c.variance,
                })
                .collect(),
        };
        if entries.is_empty() {
            return Err(Error::InvalidModel(format!("no components for prompt {:?}", prompt.tag)));
        }
        Ok(entries)
    }

    fn levels(&self, x: &[f64], t: f64) -> Result<(f64, f64)> {
        check_dim(self.dimension, x.len())?;
        check_time(t)?;
        let s = self.schedule.noise_scale(t);
        Ok((self.schedule.alpha(t), s * s))
    }

    /// `E[x0 | x(t) = x, prompt]`.
    pub fn posterior_mean(&self, x: &[f64], t: f64, prompt: &Prompt) -> Result<Vec<f64>> {
        let (a, oma) = self.levels(x, t)?;
        Ok(mixture_posterior_mean(&self.entries(prompt)?, x, a, oma))
    }

    /// `log p_t(x | prompt)` of the noised mixture.
    pub fn log_density(&self, x: &[f64], t: f64, prompt: &Prompt) -> Result<f64> {
        let (a, oma) = self.levels(x, t)?;
        Ok(responsibilities(&self.entries(prompt)?, x, a, oma).log_density)
    }

    fn pick<'a>(&'a self, prompt: &Prompt, rng: &mut Stream) -> Result<&'a Component> {
        let pool: Vec<(&Component, f64)> = match prompt.tag {
            PromptTag::Null => self.components.iter().map(|c| (c, c.weight / self.n_labels as f64)).collect(),
            PromptTag::Label(l) => self.components.iter().filter(|c| c.label == l).map(|c| (c, c.weight)).collect(),
        };
        if pool.is_empty() {
            return Err(Error::InvalidModel(format!("no components for prompt {:?}", prompt.tag)));
        }
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        for (c, w) in &pool {
            if u < *w {
                return Ok(c);
            }
            u -= w;
        }
        Ok(pool[pool.len() - 1].0)
    }

    /// Draw a clean sample `x0 ~ p(x0 | prompt)`.
    pub fn sample_clean(&self, prompt: &Prompt, rng: &mut Stream) -> Result<Vec<f64>> {
        let c = self.pick(prompt, rng)?;
        let s = c.variance.sqrt();
        let z = gaussian_vec(self.dimension, rng);
        Ok(c.mean.iter().zip(z).map(|(m, z)| m + s * z).collect())
    }

    /// Draw `x(t) = sqrt(alpha) x0 + sqrt(1 - alpha) eps` from the noised marginal.
    pub fn sample_noisy(&self, t: f64, prompt: &Prompt, rng: &mut Stream) -> Result<Vec<f64>> {
        check_time(t)?;
        let x0 = self.sample_clean(prompt, rng)?;
        let eps = gaussian_vec(self.dimension, rng);
        let (sa, sn) = (self.schedule.alpha(t).sqrt(), self.schedule.noise_scale(t));
        Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect())
    }

    /// Mean and per-coordinate second moment of `p(x0 | prompt)`.
    pub fn moments(&self, prompt: &Prompt) -> Result<(Vec<f64>, Vec<f64>)> {
        let entries = self.entries(prompt)?;
        let mut mean = vec![0.0; self.dimension];
        let mut second = vec![0.0; self.dimension];
        for e in &entries {
            let w = e.log_weight.exp();
            for i in 0..self.dimension {
                mean[i] += w * e.mean[i];
                second[i] += w * (e.mean[i] * e.mean[i] + e.variance);
            }
        }
        Ok((mean, second))
    }
}

impl Denoiser for MixtureModel {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn predict_noise(&self, x: &[f64], t: f64, prompt: &Prompt) -> Result<Vec<f64>> {
        let (a, oma) = self.levels(x, t)?;
        if t == 0.0 {
            return Err(Error::ZeroNoiseLevel);
        }
        Ok(mixture_noise(&self.entries(prompt)?, x, a, oma))
    }

    fn noise_vjp(&self, x: &[f64], t: f64, prompt: &Prompt, cotangent: &[f64]) -> Result<Vec<f64>> {
        let (a, oma) = self.levels(x, t)?;
        check_dim(self.dimension, cotangent.len())?;
        if t == 0.0 {
            return Err(Error::ZeroNoiseLevel);
        }
        Ok(mixture_noise_vjp(&self.entries(prompt)?, x, a, oma, cotangent))
    }

    fn single_gaussian(&self, _prompt: &Prompt) -> Option<(Vec<f64>, f64)> {
        match self.components.as_slice() {
            [c] => Some((c.mean.clone(), c.variance)),
            _ => None,
        }
    }
}
