//! File-based experiment configuration.
//!
//! Configs are TOML. Every key is checked against the known schema before
//! deserializing, so all misspellings are reported together.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{Mode, NoiseTerm, Optimizer};
use crate::error::{Error, Result};
use crate::kappa::KappaStrategy;
use crate::oracle::{Component, MixtureModel, Prompt, ViewConditionedMixture};
use crate::renderer::Template;
use crate::sampler::InversionGrid;
use crate::schedule::{Schedule, ScheduleParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Equivalence,
    ResidualSweep,
    CfgInversionSweep,
    InversionSteps,
    OdeCheck,
    DistillCompare,
    #[serde(rename = "roundtrip-2d")]
    Roundtrip2d,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Equivalence,
        ExperimentKind::ResidualSweep,
        ExperimentKind::CfgInversionSweep,
        ExperimentKind::InversionSteps,
        ExperimentKind::OdeCheck,
        ExperimentKind::DistillCompare,
        ExperimentKind::Roundtrip2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Equivalence => "equivalence",
            ExperimentKind::ResidualSweep => "residual-sweep",
            ExperimentKind::CfgInversionSweep => "cfg-inversion-sweep",
            ExperimentKind::InversionSteps => "inversion-steps",
            ExperimentKind::OdeCheck => "ode-check",
            ExperimentKind::DistillCompare => "distill-compare",
            ExperimentKind::Roundtrip2d => "roundtrip-2d",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// four components over two labels with random means
    Multimodal,
    SingleGaussian,
    /// explicit `components`
    Mixture,
    /// view-conditioned mixture, one component per template
    Templates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dimension: usize,
    /// seed for the multimodal means
    pub seed: u64,
    /// single-Gaussian mean; empty means the origin
    pub mean: Vec<f64>,
    pub variance: f64,
    /// prompt label (ignored by the templates model, which prompts with the distillation template)
    pub label: u32,
    pub components: Vec<ComponentSpec>,
    pub templates: Vec<Template>,
    pub side: usize,
    pub template_variance: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Multimodal,
            dimension: 8,
            seed: 3,
            mean: Vec::new(),
            variance: 1.0,
            label: 0,
            components: Vec::new(),
            templates: Template::ALL.to_vec(),
            side: 64,
            template_variance: 0.0025,
        }
    }
}

impl ModelSpec {
    pub fn single_gaussian(mean: Vec<f64>, variance: f64) -> Self {
        Self {
            kind: ModelKind::SingleGaussian,
            dimension: mean.len(),
            mean,
            variance,
            ..Self::default()
        }
    }

    /// Builds the flat-vector model; the templates kind is built with [`ModelSpec::view_model`].
    pub fn mixture(&self, schedule: &Schedule) -> Result<MixtureModel> {
        match self.kind {
            ModelKind::Multimodal => MixtureModel::multimodal(schedule.clone(), self.dimension, self.seed),
            ModelKind::SingleGaussian => {
                let mean = if self.mean.is_empty() {
                    vec![0.0; self.dimension]
                } else {
                    self.mean.clone()
                };
                MixtureModel::single_gaussian(schedule.clone(), mean, self.variance)
            }
            ModelKind::Mixture => MixtureModel::new(
                schedule.clone(),
                self.components
                    .iter()
                    .map(|c| Component {
                        weight: c.weight,
                        mean: c.mean.clone(),
                        variance: c.variance,
                        label: c.label,
                    })
                    .collect(),
            ),
            ModelKind::Templates => Err(Error::Config(
                "model.kind = \"templates\" is a view model; this experiment needs a vector model".into(),
            )),
        }
    }

    pub fn view_model(&self, schedule: &Schedule) -> Result<ViewConditionedMixture> {
        if self.kind != ModelKind::Templates {
            return Err(Error::Config("tomographic distillation needs model.kind = \"templates\"".into()));
        }
        ViewConditionedMixture::one_per_template(schedule.clone(), self.side, &self.templates, self.template_variance)
    }

    pub fn prompt(&self) -> Prompt {
        Prompt::label(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    pub gamma: f64,
    pub gamma_inv: f64,
    pub entropy: bool,
    pub entropy_weight: f64,
    pub noise_term: NoiseTerm,
    pub tau_max: f64,
    /// `uniform-time` or `training-index` placement of inversion steps
    pub inversion_grid: InversionGrid,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            gamma: 7.5,
            gamma_inv: -7.5,
            entropy: true,
            entropy_weight: 0.3,
            noise_term: NoiseTerm::Full,
            tau_max: 1.0 / 30.0,
            inversion_grid: InversionGrid::UniformTime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub strategies: Vec<String>,
    pub t_min: f64,
    pub t_max: f64,
    pub t_points: usize,
    pub samples: usize,
    /// seed of the `random-fixed` noise
    pub fixed_seed: u64,
    /// `[gamma_inv, gamma_fwd]` pairs for the CFG-inversion sweep
    pub cfg_pairs: Vec<[f64; 2]>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            strategies: ["random-resampled", "random-fixed", "fixed-point", "gradient-descent", "ddim-inversion"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            t_min: 0.2,
            t_max: 0.98,
            t_points: 10,
            samples: 256,
            fixed_seed: 7,
            cfg_pairs: default_cfg_pairs(),
        }
    }
}

fn default_cfg_pairs() -> Vec<[f64; 2]> {
    vec![[7.5, 7.5], [0.0, 0.0], [0.0, 7.5], [-7.5, 7.5]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquivalenceSpec {
    pub trajectories: usize,
    pub steps: usize,
    pub dim_min: usize,
    pub dim_max: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub tolerance: f64,
    pub cached_seeds: usize,
    pub cached_tolerance: f64,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            trajectories: 100,
            steps: 30,
            dim_min: 2,
            dim_max: 8,
            t_max: 0.98,
            t_min: 0.02,
            tolerance: 1e-10,
            cached_seeds: 20,
            cached_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdeSpec {
    pub steps: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// lowest accepted observed convergence order under halving
    pub min_order: f64,
}

impl Default for OdeSpec {
    fn default() -> Self {
        Self {
            steps: 500,
            fd_step: 1e-4,
            tolerance: 1e-3,
            min_order: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSpec {
    pub steps: Vec<usize>,
}

impl Default for InversionSpec {
    fn default() -> Self {
        Self {
            steps: vec![1, 2, 5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundtripSpec {
    /// DDIM steps used to generate the clean inputs
    pub generate_steps: usize,
    pub generate_gamma: f64,
    /// inversion and regeneration steps
    pub steps: usize,
    pub samples: usize,
    /// `[gamma_inv, gamma_fwd]` pairs
    pub pairs: Vec<[f64; 2]>,
}

impl Default for RoundtripSpec {
    fn default() -> Self {
        Self {
            generate_steps: 30,
            generate_gamma: 7.5,
            steps: 50,
            samples: 64,
            pairs: default_cfg_pairs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RendererKind {
    Identity,
    Tomo,
}

impl FromStr for RendererKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(RendererKind::Identity),
            "tomo" => Ok(RendererKind::Tomo),
            _ => Err(Error::Config(format!("unknown renderer `{s}` (expected identity, tomo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSpec {
    pub renderer: RendererKind,
    pub template: Template,
    pub modes: Vec<Mode>,
    pub iters: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// sigmoid squash for the identity renderer
    pub squash: bool,
    pub t_lo: f64,
    pub record_residuals: bool,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            renderer: RendererKind::Tomo,
            template: Template::Disk,
            modes: vec![Mode::Sds, Mode::Sdi],
            iters: 2000,
            lr: 1e-2,
            optimizer: Optimizer::Sgd,
            squash: true,
            t_lo: 0.2,
            record_residuals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ReportSpec {
    pub svg: bool,
    /// adds measured wall-clock columns, which makes outputs non-reproducible
    pub wall_time: bool,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub output: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub equivalence: EquivalenceSpec,
    #[serde(default)]
    pub ode: OdeSpec,
    #[serde(default)]
    pub inversion: InversionSpec,
    #[serde(default)]
    pub roundtrip: RoundtripSpec,
    #[serde(default)]
    pub distill: DistillSpec,
    #[serde(default)]
    pub report: ReportSpec,
}

impl ExperimentConfig {
    /// Defaults suited to each experiment (model choice differs per suite).
    pub fn default_for(experiment: ExperimentKind, seed: u64) -> Self {
        let mut model = ModelSpec::default();
        match experiment {
            ExperimentKind::OdeCheck => model = ModelSpec::single_gaussian(vec![0.5], 0.25),
            ExperimentKind::Roundtrip2d => model.dimension = 2,
            ExperimentKind::DistillCompare => model.kind = ModelKind::Templates,
            _ => {}
        }
        Self {
            experiment,
            seed,
            output: PathBuf::from(format!("out/{experiment}")),
            schedule: ScheduleParams::default(),
            model,
            guidance: GuidanceSpec::default(),
            sweep: SweepSpec::default(),
            equivalence: EquivalenceSpec::default(),
            ode: OdeSpec::default(),
            inversion: InversionSpec::default(),
            roundtrip: RoundtripSpec::default(),
            distill: DistillSpec::default(),
            report: ReportSpec::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let mut problems = unknown_keys(&table);
        for required in ["experiment", "seed"] {
            if !table.contains_key(required) {
                problems.push(format!("missing required key `{required}`"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!("invalid config:\n  {}", problems.join("\n  "))));
        }
        let kind: ExperimentKind = match table.get("experiment") {
            Some(toml::Value::String(s)) => s.parse()?,
            _ => return Err(Error::Config("`experiment` must be a string".into())),
        };
        // layer the file over the experiment's own defaults
        let seed = table.get("seed").and_then(|v| v.as_integer()).unwrap_or(0) as u64;
        let mut merged = toml::Table::try_from(Self::default_for(kind, seed))
            .map_err(|e| Error::Config(format!("internal config error: {e}")))?;
        merge(&mut merged, table);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML rendering; the manifest hash is taken over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule)
    }

    /// Sweep strategies with `ddim-inversion` bound to the configured inversion guidance.
    pub fn strategies(&self) -> Result<Vec<KappaStrategy>> {
        self.sweep
            .strategies
            .iter()
            .map(|s| {
                let parsed: KappaStrategy = s.parse()?;
                Ok(match parsed {
                    KappaStrategy::RandomFixed { .. } => KappaStrategy::RandomFixed {
                        seed: self.sweep.fixed_seed,
                    },
                    KappaStrategy::DdimInversion { gamma_inv, step_rule, .. } => KappaStrategy::DdimInversion {
                        gamma_inv: if s.trim() == "ddim-inversion" { self.guidance.gamma_inv } else { gamma_inv },
                        step_rule,
                        grid: self.guidance.inversion_grid,
                    },
                    other => other,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.schedule() {
            problems.push(e.to_string());
        }
        for s in &self.sweep.strategies {
            match s.parse::<KappaStrategy>() {
                Ok(KappaStrategy::CachedPrediction) => {
                    problems.push("sweep.strategies: `cached` only exists inside distillation runs".into())
                }
                Ok(_) => {}
                Err(e) => problems.push(format!("sweep.strategies: {e}")),
            }
        }
        let s = &self.sweep;
        if !(s.t_min > 0.0 && s.t_min <= s.t_max && s.t_max <= crate::kappa::T_MAX) {
            problems.push(format!("sweep: need 0 < t_min <= t_max <= 0.98, got [{}, {}]", s.t_min, s.t_max));
        }
        if s.t_points == 0 || s.samples == 0 {
            problems.push("sweep: t_points and samples must be positive".into());
        }
        let e = &self.equivalence;
        if e.dim_min == 0 || e.dim_min > e.dim_max || e.steps == 0 {
            problems.push("equivalence: need steps >= 1 and 1 <= dim_min <= dim_max".into());
        }
        if self.inversion.steps.contains(&0) {
            problems.push("inversion.steps: step counts must be positive".into());
        }
        if self.distill.iters == 0 || !(self.distill.lr > 0.0) {
            problems.push("distill: iters and lr must be positive".into());
        }
        if self.guidance.entropy_weight < 0.0 {
            problems.push("guidance.entropy_weight must be non-negative".into());
        }
        if self.experiment == ExperimentKind::DistillCompare
            && self.distill.renderer == RendererKind::Tomo
            && !self.model.templates.contains(&self.distill.template)
        {
            problems.push(format!("distill.template `{}` is not among model.templates", self.distill.template));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid config:\n  {}", problems.join("\n  "))))
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Known keys: derived from the serialized defaults, plus array-of-table items.
fn schema() -> toml::Table {
    let mut t = toml::Table::try_from(ExperimentConfig::default_for(ExperimentKind::Equivalence, 0)).expect("serializes");
    if let Some(toml::Value::Table(model)) = t.get_mut("model") {
        let comp = toml::Table::try_from(ComponentSpec {
            weight: 1.0,
            mean: vec![],
            variance: 1.0,
            label: 0,
        })
        .expect("serializes");
        model.insert("components".into(), toml::Value::Array(vec![toml::Value::Table(comp)]));
    }
    t
}

/// Every key path in `table` that the schema does not know, in file order.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    walk(table, &schema(), "", &mut out);
    out
}

fn walk(table: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    let known: BTreeSet<&String> = schema.keys().collect();
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if !known.contains(k) {
            out.push(format!("unknown key `{path}`"));
            continue;
        }
        match (v, &schema[k]) {
            (toml::Value::Table(sub), toml::Value::Table(ssub)) => walk(sub, ssub, &path, out),
            (toml::Value::Array(items), toml::Value::Array(sitems)) => {
                if let Some(toml::Value::Table(item_schema)) = sitems.first() {
                    for (i, item) in items.iter().enumerate() {
                        if let toml::Value::Table(sub) = item {
                            walk(sub, item_schema, &format!("{path}[{i}]"), out);
                        }
                    }
                }
            }
            _ => {}
        }
    }
}
