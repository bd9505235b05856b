use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use distill_core::distill::{Mode, Optimizer};
use distill_core::harness::config::RendererKind;
use distill_core::harness::experiments::run_table;
use distill_core::harness::report::{fmt_f64, Table};
use distill_core::harness::{emit_report, run_experiment, ExperimentConfig, ExperimentKind, ReportBundle};
use distill_core::rng::{substream, tag};
use distill_core::sampler::{ddim_invert_with, ddim_sample, DiffusionState};
use distill_core::{make_grid, Denoiser, Error, Template, Trajectory};

use crate::Common;

pub enum Outcome {
    Pass,
    Fail,
}

/// 2 for anything the user can fix by changing inputs, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::KappaDiverged { .. }) => 1,
        Some(_) => 2,
        None => 2,
    }
}

fn load(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.experiment != kind {
                return Err(Error::Config(format!(
                    "{} configures experiment `{}`, but this command runs `{kind}`",
                    path.display(),
                    cfg.experiment
                ))
                .into());
            }
            cfg
        }
        None => ExperimentConfig::default_for(kind, 0),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.svg {
        cfg.report.svg = true;
    }
    Ok(cfg)
}

/// Loads without pinning the experiment; used by commands that are not suites.
fn load_any(common: &Common, fallback: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(fallback, 0),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn validated(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn finish(bundle: &ReportBundle, out: &Path, svg: bool) -> Result<Outcome> {
    emit_report(bundle, out, svg)?;
    print_bundle(bundle, out);
    Ok(match bundle.passed() {
        Some(false) => Outcome::Fail,
        _ => Outcome::Pass,
    })
}

fn print_bundle(bundle: &ReportBundle, out: &Path) {
    for line in &bundle.summary {
        println!("{line}");
    }
    for c in &bundle.checks {
        println!(
            "{} [{}] {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            if c.hard { "hard" } else { "soft" },
            c.name,
            c.detail
        );
    }
    println!("wrote {}", out.display());
}

fn trajectory_table(traj: &Trajectory) -> Table {
    let d = traj.states.first().map_or(0, |s| s.x_bar.len());
    let mut headers = vec!["step".to_string(), "t".to_string()];
    headers.extend((0..d).map(|i| format!("x_bar_{i}")));
    let mut table = Table {
        name: "trajectory".into(),
        headers,
        rows: Vec::new(),
    };
    for (i, s) in traj.states.iter().enumerate() {
        let mut row = vec![i.to_string(), fmt_f64(s.t)];
        row.extend(s.x_bar.iter().map(|v| fmt_f64(*v)));
        table.rows.push(row);
    }
    table
}

fn write_table(table: &Table, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, table.to_csv_bytes()?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{v}` in vector")).into()))
        .collect()
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 30)]
    steps: usize,
    /// guidance scale (default: the config's guidance.gamma)
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    label: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    t_max: f64,
    #[arg(long, default_value_t = 0.0)]
    t_min: f64,
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

pub fn sample(a: SampleArgs) -> Result<Outcome> {
    let mut cfg = load_any(&a.common, ExperimentKind::Equivalence)?;
    if let Some(l) = a.label {
        cfg.model.label = l;
    }
    let cfg = validated(cfg)?;
    let model = cfg.model.mixture(&cfg.schedule()?)?;
    let grid = make_grid(a.steps, a.t_max, a.t_min)?;
    let gamma = a.gamma.unwrap_or(cfg.guidance.gamma);
    let x = distill_core::rng::gaussian_vec(model.dimension(), &mut substream(cfg.seed, tag(&[30])));
    let start = DiffusionState::from_noisy(&model, &x, grid.first())?;
    let traj = ddim_sample(&model, &start.x_bar, &grid, &cfg.model.prompt(), gamma)?;
    write_table(&trajectory_table(&traj), &a.out)?;
    let end = traj.last().expect("non-empty trajectory");
    let coords: Vec<String> = end.x_bar.iter().map(|v| format!("{v:.6}")).collect();
    println!("sampled {} steps; final x = [{}]", a.steps, coords.join(", "));
    println!("wrote {}", a.out.display());
    Ok(Outcome::Pass)
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    t_target: f64,
    /// inversion guidance (default: the config's guidance.gamma_inv)
    #[arg(long, allow_hyphen_values = true)]
    gamma_inv: Option<f64>,
    #[arg(long)]
    label: Option<u32>,
    /// comma-separated clean point; drawn from the model when omitted
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long, default_value = "inversion.csv")]
    out: PathBuf,
}

pub fn invert(a: InvertArgs) -> Result<Outcome> {
    let mut cfg = load_any(&a.common, ExperimentKind::Equivalence)?;
    if let Some(l) = a.label {
        cfg.model.label = l;
    }
    let cfg = validated(cfg)?;
    let model = cfg.model.mixture(&cfg.schedule()?)?;
    let prompt = cfg.model.prompt();
    let x0 = match &a.x0 {
        Some(s) => parse_vector(s)?,
        None => model.sample_clean(&prompt, &mut substream(cfg.seed, tag(&[31])))?,
    };
    let gamma_inv = a.gamma_inv.unwrap_or(cfg.guidance.gamma_inv);
    let inv = ddim_invert_with(&model, &x0, a.t_target, a.steps, &prompt, gamma_inv, cfg.guidance.inversion_grid)?;
    write_table(&trajectory_table(&inv.trajectory), &a.out)?;
    let noise: Vec<String> = inv.noise.iter().map(|v| format!("{v:.6}")).collect();
    println!("inverted to t = {} in {} steps; implied noise = [{}]", a.t_target, a.steps, noise.join(", "));
    println!("wrote {}", a.out.display());
    Ok(Outcome::Pass)
}

#[derive(Args, Debug)]
pub struct ResidualsArgs {
    #[command(flatten)]
    common: Common,
    /// comma-separated: random-resampled, random-fixed, fixed-point, gradient-descent, ddim-inversion, exact
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    t_points: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma_inv: Option<f64>,
    /// main CSV; sibling tables and the manifest go next to it
    #[arg(long, default_value = "residuals.csv")]
    out: PathBuf,
}

pub fn residuals(a: ResidualsArgs) -> Result<Outcome> {
    let mut cfg = load(&a.common, ExperimentKind::ResidualSweep)?;
    if let Some(s) = a.strategies {
        cfg.sweep.strategies = s;
    }
    if let Some(v) = a.t_min {
        cfg.sweep.t_min = v;
    }
    if let Some(v) = a.t_max {
        cfg.sweep.t_max = v;
    }
    if let Some(v) = a.t_points {
        cfg.sweep.t_points = v;
    }
    if let Some(v) = a.samples {
        cfg.sweep.samples = v;
    }
    if let Some(v) = a.gamma {
        cfg.guidance.gamma = v;
    }
    if let Some(v) = a.gamma_inv {
        cfg.guidance.gamma_inv = v;
    }
    let mut bundle = run_experiment(&cfg)?;
    // the main table goes exactly where --out says; the rest land beside it
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("residuals").to_string();
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    for t in &mut bundle.tables {
        t.name = if t.name == "residuals" {
            stem.clone()
        } else {
            t.name.replacen("residuals", &stem, 1)
        };
    }
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    finish(&bundle, &dir, cfg.report.svg)
}

#[derive(Args, Debug)]
pub struct EquivalenceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn equivalence(a: EquivalenceArgs) -> Result<Outcome> {
    let mut cfg = load(&a.common, ExperimentKind::Equivalence)?;
    if let Some(v) = a.trajectories {
        cfg.equivalence.trajectories = v;
    }
    if let Some(v) = a.steps {
        cfg.equivalence.steps = v;
    }
    if let Some(v) = a.gamma {
        cfg.guidance.gamma = v;
    }
    let out = a.out.unwrap_or_else(|| cfg.output.clone());
    let bundle = run_experiment(&cfg)?;
    finish(&bundle, &out, cfg.report.svg)
}

#[derive(Args, Debug)]
pub struct OdeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    fd_step: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn ode_check(a: OdeArgs) -> Result<Outcome> {
    let mut cfg = load(&a.common, ExperimentKind::OdeCheck)?;
    if let Some(v) = a.steps {
        cfg.ode.steps = v;
    }
    if let Some(v) = a.fd_step {
        cfg.ode.fd_step = v;
    }
    if let Some(v) = a.tolerance {
        cfg.ode.tolerance = v;
    }
    let out = a.out.unwrap_or_else(|| cfg.output.clone());
    let bundle = run_experiment(&cfg)?;
    finish(&bundle, &out, cfg.report.svg)
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "sdi")]
    mode: String,
    #[arg(long)]
    renderer: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd (default) or adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma_inv: Option<f64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

pub fn distill(a: DistillArgs) -> Result<Outcome> {
    let mut cfg = load(&a.common, ExperimentKind::DistillCompare)?;
    let mode: Mode = a.mode.parse()?;
    cfg.distill.modes = vec![mode];
    if let Some(r) = &a.renderer {
        cfg.distill.renderer = r.parse()?;
        if cfg.distill.renderer == RendererKind::Identity && a.common.config.is_none() {
            cfg.model = distill_core::harness::config::ModelSpec::default();
        }
    }
    if let Some(t) = &a.template {
        cfg.distill.template = t.parse::<Template>()?;
    }
    if let Some(v) = a.iters {
        cfg.distill.iters = v;
    }
    if let Some(v) = a.lr {
        cfg.distill.lr = v;
    }
    if let Some(o) = &a.optimizer {
        cfg.distill.optimizer = o.parse::<Optimizer>()?;
    }
    if let Some(v) = a.gamma {
        cfg.guidance.gamma = v;
    }
    if let Some(v) = a.gamma_inv {
        cfg.guidance.gamma_inv = v;
    }
    let cfg = validated(cfg)?;
    let runs = distill_core::harness::experiments::distill_runs(&cfg)?;
    let (_, record) = runs.into_iter().next().context("no run produced")?;
    let mut bundle = ReportBundle::new(&cfg);
    bundle.tables.push(run_table("run", &record));
    bundle.canvases.push(("canvas".into(), record.canvas.clone()));
    let skipped = record.iterations.iter().filter(|r| r.skipped).count();
    let err = record.final_error().unwrap_or(f64::NAN);
    bundle.summary.push(format!(
        "mode={} renderer={:?} iters={} final_error={} skipped={skipped}",
        a.mode,
        cfg.distill.renderer,
        record.iterations.len(),
        fmt_f64(err)
    ));
    finish(&bundle, &a.out, cfg.report.svg)
}

#[derive(Args, Debug)]
pub struct SuiteArgs {
    #[command(flatten)]
    common: Common,
    /// experiment to run with its defaults when no config is given
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn suite(a: SuiteArgs) -> Result<Outcome> {
    let mut cfg = match (&a.common.config, &a.name) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::default_for(name.parse()?, 0),
        (Some(_), Some(_)) => return Err(Error::Config("pass either --config or --name, not both".into()).into()),
        (None, None) => bail!(Error::Config("suite needs --config or --name".into())),
    };
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if a.common.svg {
        cfg.report.svg = true;
    }
    let out = a.out.unwrap_or_else(|| cfg.output.clone());
    let bundle = run_experiment(&cfg)?;
    finish(&bundle, &out, cfg.report.svg)
}
