use std::collections::BTreeMap;
use std::f64::consts::TAU;

use super::{mixture_noise, mixture_noise_vjp, mixture_posterior_mean, Denoiser, Entry, Prompt, PromptTag};
use crate::error::{check_dim, check_time, Error, Result};
use crate::renderer::{template_projection_table, Template};
use crate::schedule::Schedule;

/// Number of discrete camera-angle buckets the projection tables are cached at.
pub const ANGLE_BUCKETS: usize = 360;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewComponent {
    pub weight: f64,
    pub template: Template,
    pub variance: f64,
    pub label: u32,
}

/// Mixture over 1D views whose component means are template projections at
/// the prompt's camera angle.
#[derive(Debug, Clone)]
pub struct ViewConditionedMixture {
    schedule: Schedule,
    side: usize,
    components: Vec<ViewComponent>,
    /// `tables[k][bucket]` is component `k`'s mean at that bucket
    tables: Vec<Vec<Vec<f64>>>,
    n_labels: usize,
}

impl ViewConditionedMixture {
    pub fn new(schedule: Schedule, side: usize, components: Vec<ViewComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("view mixture needs at least one component".into()));
        }
        let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
        for (k, c) in components.iter().enumerate() {
            if !(c.variance > 0.0) || !(c.weight > 0.0) {
                return Err(Error::InvalidModel(format!("component {k} needs positive weight and variance")));
            }
            *totals.entry(c.label).or_default() += c.weight;
        }
        if let Some((l, w)) = totals.iter().find(|(_, w)| (**w - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidModel(format!("weights of label {l} sum to {w}, expected 1")));
        }
        let mut cache: BTreeMap<Template, Vec<Vec<f64>>> = BTreeMap::new();
        let mut tables = Vec::with_capacity(components.len());
        for c in &components {
            if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(c.template) {
                e.insert(template_projection_table(c.template, side, ANGLE_BUCKETS)?);
            }
            tables.push(cache[&c.template].clone());
        }
        Ok(Self {
            schedule,
            side,
            n_labels: totals.len(),
            components,
            tables,
        })
    }

    /// One unit-weight component per template, labelled by its index in `templates`.
    pub fn one_per_template(schedule: Schedule, side: usize, templates: &[Template], variance: f64) -> Result<Self> {
        let comps = templates
            .iter()
            .enumerate()
            .map(|(i, &template)| ViewComponent {
                weight: 1.0,
                template,
                variance,
                label: i as u32,
            })
            .collect();
        Self::new(schedule, side, comps)
    }

    pub fn components(&self) -> &[ViewComponent] {
        &self.components
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Label of the first component built from `template`.
    pub fn label_of(&self, template: Template) -> Option<u32> {
        self.components.iter().find(|c| c.template == template).map(|c| c.label)
    }

    pub fn bucket_of(angle: f64) -> usize {
        let b = (angle.rem_euclid(TAU) / TAU * ANGLE_BUCKETS as f64).round() as usize;
        b % ANGLE_BUCKETS
    }

    fn entries(&self, prompt: &Prompt) -> Result<Vec<Entry<'_>>> {
        let bucket = Self::bucket_of(prompt.view.unwrap_or(0.0));
        let prior = match prompt.tag {
            PromptTag::Null => -(self.n_labels as f64).ln(),
            PromptTag::Label(_) => 0.0,
        };
        let entries: Vec<Entry<'_>> = self
            .components
            .iter()
            .zip(&self.tables)
            .filter(|(c, _)| match prompt.tag {
                PromptTag::Null => true,
                PromptTag::Label(l) => c.label == l,
            })
            .map(|(c, table)| Entry {
                log_weight: c.weight.ln() + prior,
                mean: &table[bucket],
                variance: c.variance,
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::InvalidModel(format!("no components for prompt {:?}", prompt.tag)));
        }
        Ok(entries)
    }

    fn levels(&self, x: &[f64], t: f64) -> Result<(f64, f64)> {
        check_dim(self.side, x.len())?;
        check_time(t)?;
        let s = self.schedule.noise_scale(t);
        Ok((self.schedule.alpha(t), s * s))
    }

    pub fn posterior_mean(&self, x: &[f64], t: f64, prompt: &Prompt) -> Result<Vec<f64>> {
        let (a, oma) = self.levels(x, t)?;
        Ok(mixture_posterior_mean(&self.entries(prompt)?, x, a, oma))
    }

    /// Mean projection of the given component at a view.
    pub fn component_mean(&self, k: usize, angle: f64) -> &[f64] {
        &self.tables[k][Self::bucket_of(angle)]
    }
}

impl Denoiser for ViewConditionedMixture {
    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn dimension(&self) -> usize {
        self.side
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
        check_dim(self.side, cotangent.len())?;
        if t == 0.0 {
            return Err(Error::ZeroNoiseLevel);
        }
        Ok(mixture_noise_vjp(&self.entries(prompt)?, x, a, oma, cotangent))
    }

    fn single_gaussian(&self, prompt: &Prompt) -> Option<(Vec<f64>, f64)> {
        match self.components.as_slice() {
            [c] => Some((self.component_mean(0, prompt.view.unwrap_or(0.0)).to_vec(), c.variance)),
            _ => None,
        }
    }
}
