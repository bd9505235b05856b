//! The named experiment suites.

use std::time::Instant;

use rayon::prelude::*;

use super::config::{ExperimentConfig, ExperimentKind, RendererKind};
use super::report::{fmt_f64, ReportBundle, Table};
use super::svg::Chart;
use crate::distill::{run_distillation, GuidanceConfig, Mode, RunOptions, RunRecord, TSchedule, TauRule};
use crate::error::{Error, Result};
use crate::kappa::{residual_sweep, KappaStrategy, StepRule, SweepRow};
use crate::oracle::{Denoiser, MixtureModel, Prompt};
use crate::renderer::{Canvas, CanvasShape, Renderer};
use crate::reparam::{equivalence_check, ode_identity_check, to_x0};
use crate::rng::{gaussian_vec, substream, tag};
use crate::sampler::{ddim_invert_with, ddim_sample, DiffusionState};
use crate::schedule::{make_grid, TimeGrid};
use crate::vecops::{max_abs_diff, rms};
use rand::Rng;

/// Runs one named suite. Outputs depend only on the config (wall-clock
/// columns excepted, which are off unless `report.wall_time` is set).
pub fn run_experiment(config: &ExperimentConfig) -> Result<ReportBundle> {
    config.validate()?;
    let mut bundle = ReportBundle::new(config);
    match config.experiment {
        ExperimentKind::Equivalence => equivalence(config, &mut bundle)?,
        ExperimentKind::ResidualSweep => residual_sweep_suite(config, &mut bundle)?,
        ExperimentKind::CfgInversionSweep => cfg_inversion_sweep(config, &mut bundle)?,
        ExperimentKind::InversionSteps => inversion_steps(config, &mut bundle)?,
        ExperimentKind::OdeCheck => ode_check(config, &mut bundle)?,
        ExperimentKind::DistillCompare => distill_compare(config, &mut bundle)?,
        ExperimentKind::Roundtrip2d => roundtrip_2d(config, &mut bundle)?,
    }
    Ok(bundle)
}

fn sci_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn f(v: f64) -> String {
    fmt_f64(v)
}

/// Filename-safe form of a strategy label.
fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect::<String>()
        .trim_end_matches('_')
        .to_string()
}

/// `points` times from `t_max` down to `t_min`.
pub fn sweep_grid(t_max: f64, t_min: f64, points: usize) -> Result<TimeGrid> {
    if points <= 1 || t_max == t_min {
        return TimeGrid::from_times(vec![t_max]);
    }
    make_grid(points - 1, t_max, t_min)
}

/// Initial rescaled state at `t` from a standard Gaussian `x(t)`.
fn gaussian_start(model: &dyn Denoiser, t: f64, rng: &mut crate::rng::Stream) -> Result<DiffusionState> {
    let x = gaussian_vec(model.dimension(), rng);
    DiffusionState::from_noisy(model, &x, t)
}

fn equivalence(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let e = &config.equivalence;
    let grid = make_grid(e.steps, e.t_max, e.t_min)?;
    let gamma = config.guidance.gamma;
    let rows: Vec<(usize, u32, f64)> = (0..e.trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(config.seed, tag(&[10, i as u64]));
            let dim = rng.random_range(e.dim_min..=e.dim_max);
            let label = rng.random_range(0..2u32);
            let model = MixtureModel::multimodal(sched.clone(), dim, rng.random())?;
            let start = gaussian_start(&model, grid.first(), &mut rng)?;
            let prompt = Prompt::label(label);
            let traj = ddim_sample(&model, &start.x_bar, &grid, &prompt, gamma)?;
            Ok((dim, label, equivalence_check(&model, &traj, &prompt, gamma)?.max_deviation))
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("equivalence", &["trajectory", "dimension", "label", "max_deviation", "pass"]);
    for (i, &(d, l, dev)) in rows.iter().enumerate() {
        table.push(vec![i.to_string(), d.to_string(), l.to_string(), f(dev), (dev <= e.tolerance).to_string()]);
    }
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    bundle.check(
        "reparametrization",
        true,
        worst <= e.tolerance,
        format!("max deviation {worst:e} over {} trajectories (tolerance {:e})", rows.len(), e.tolerance),
    );
    bundle.tables.push(table);

    let model = config.model.mixture(&sched)?;
    let prompt = config.model.prompt();
    let cached: Vec<f64> = (0..e.cached_seeds)
        .into_par_iter()
        .map(|s| cached_kappa_deviation(&model, &grid, &prompt, gamma, tag(&[config.seed, 11, s as u64])))
        .collect::<Result<_>>()?;
    let mut table = Table::new("cached_kappa", &["run", "sup_deviation", "pass"]);
    for (s, &dev) in cached.iter().enumerate() {
        table.push(vec![s.to_string(), f(dev), (dev <= e.cached_tolerance).to_string()]);
    }
    let worst = cached.iter().cloned().fold(0.0, f64::max);
    bundle.check(
        "cached_kappa",
        true,
        worst <= e.cached_tolerance,
        format!("sup deviation {worst:e} over {} runs (tolerance {:e})", cached.len(), e.cached_tolerance),
    );
    bundle.tables.push(table);
    bundle.summary.extend(bundle.checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>());
    Ok(())
}

/// Runs identity-renderer SDI with the noise cached from the previous
/// prediction and `tau` pinned to the grid, and returns the sup-norm gap to
/// the single-step denoised images of the DDIM trajectory from the same start.
pub fn cached_kappa_deviation(model: &MixtureModel, grid: &TimeGrid, prompt: &Prompt, gamma: f64, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, 0);
    let start = gaussian_start(model, grid.first(), &mut rng)?;
    let traj = ddim_sample(model, &start.x_bar, grid, prompt, gamma)?;
    let init = to_x0(model, &start, prompt, gamma)?;
    let mut cfg = GuidanceConfig::sdi_with(gamma, 0.0);
    cfg.kappa_strategy = KappaStrategy::CachedPrediction;
    cfg.entropy.enabled = false;
    cfg.t_schedule = TSchedule::Grid {
        times: grid.times().to_vec(),
    };
    let opts = RunOptions {
        n_iters: grid.n_steps(),
        learning_rate: 1.0,
        initial_kappa: init.kappa,
        record_residuals: false,
        keep_snapshots: true,
        ..RunOptions::default()
    };
    let canvas = Canvas::new(CanvasShape::Flat(model.dimension()), init.x0)?;
    let run = run_distillation(model, &Renderer::Identity { squash: false }, canvas, prompt, &cfg, &opts, seed)?;
    let mut worst: f64 = 0.0;
    for (i, snap) in run.snapshots.iter().enumerate() {
        let reference = to_x0(model, &traj.states[i + 1], prompt, gamma)?;
        worst = worst.max(max_abs_diff(snap, &reference.x0));
    }
    Ok(worst)
}

fn sweep_table(name: &str, rows: &[SweepRow]) -> Table {
    let mut t = Table::new(name, &["strategy", "t", "mean_residual", "std_residual", "diverged_fraction"]);
    for r in rows {
        t.push(vec![r.strategy.clone(), f(r.t), f(r.mean_residual), f(r.std_residual), f(r.diverged_fraction)]);
    }
    t
}

fn curve_tables(prefix: &str, rows: &[SweepRow], chart: &mut Chart, bundle: &mut ReportBundle) {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.strategy.as_str()) {
            labels.push(&r.strategy);
        }
    }
    for label in labels {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.strategy == label).collect();
        let mut t = Table::new(format!("{prefix}_{}", slug(label)), &["t", "mean_residual", "std_residual"]);
        for r in &mine {
            t.push(vec![f(r.t), f(r.mean_residual), f(r.std_residual)]);
        }
        chart.add(label, mine.iter().map(|r| (r.t, r.mean_residual)).collect());
        bundle.tables.push(t);
    }
}

/// Max over `t` of `|mean_a - mean_b| / sqrt(se_a^2 + se_b^2)`.
pub fn worst_z(a: &[&SweepRow], b: &[&SweepRow]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let se = (x.standard_error().powi(2) + y.standard_error().powi(2)).sqrt();
            let d = (x.mean_residual - y.mean_residual).abs();
            if se > 0.0 {
                d / se
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

fn residual_sweep_suite(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let model = config.model.mixture(&sched)?;
    let s = &config.sweep;
    let grid = sweep_grid(s.t_max, s.t_min, s.t_points)?;
    let strategies = config.strategies()?;
    let prompt = config.model.prompt();
    let rows = residual_sweep(&model, &strategies, &grid, &prompt, config.guidance.gamma, s.samples, config.seed)?;
    bundle.tables.push(sweep_table("residuals", &rows));
    let mut raw = Table::new(
        "residuals_raw",
        &["strategy", "t", "mean_noise_residual", "std_noise_residual", "n_valid"],
    );
    for r in &rows {
        raw.push(vec![r.strategy.clone(), f(r.t), f(r.mean_noise_residual), f(r.std_noise_residual), r.n_valid.to_string()]);
    }
    bundle.tables.push(raw);
    let mut chart = Chart::new("residuals", "Fixed-point residual by strategy", "t", "mean residual").log_y();
    curve_tables("residuals", &rows, &mut chart, bundle);
    bundle.charts.push(chart);

    let by = |p: fn(&KappaStrategy) -> bool| -> Vec<&SweepRow> {
        strategies
            .iter()
            .position(p)
            .map(|i| rows[i * grid.len()..(i + 1) * grid.len()].iter().collect())
            .unwrap_or_default()
    };
    let resampled = by(|s| matches!(s, KappaStrategy::RandomResampled));
    let fixed = by(|s| matches!(s, KappaStrategy::RandomFixed { .. }));
    let inversion = by(|s| matches!(s, KappaStrategy::DdimInversion { .. }));
    let exact = by(|s| matches!(s, KappaStrategy::Exact));
    if !resampled.is_empty() && !fixed.is_empty() {
        let z = worst_z(&resampled, &fixed);
        bundle.check("resampled_equals_fixed", false, z <= 2.0, format!("worst |z| = {z:.3} (limit 2)"));
    }
    if !resampled.is_empty() && !inversion.is_empty() {
        let ok = resampled
            .iter()
            .zip(&inversion)
            .filter(|(r, _)| r.t >= 0.2 - 1e-12)
            .all(|(r, i)| i.mean_residual < r.mean_residual);
        bundle.check("inversion_below_random", false, ok, "ddim-inversion mean residual below random-resampled for t >= 0.2".into());
    }
    if !exact.is_empty() {
        let worst = exact.iter().map(|r| r.mean_residual.abs().max(r.std_residual)).fold(0.0, f64::max);
        bundle.check("exact_is_zero", true, worst <= 1e-10, format!("exact-kappa residual {worst:e}"));
    }
    summarize_sweep(&rows, bundle);
    Ok(())
}

fn summarize_sweep(rows: &[SweepRow], bundle: &mut ReportBundle) {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.strategy.as_str()) {
            labels.push(&r.strategy);
        }
    }
    for l in labels {
        let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.strategy == l).collect();
        let mean = mine.iter().map(|r| r.mean_residual).sum::<f64>() / mine.len() as f64;
        let div = mine.iter().map(|r| r.diverged_fraction).fold(0.0, f64::max);
        bundle.summary.push(format!("{l}: mean residual {mean:.4e}, max diverged fraction {div:.3}"));
    }
}

fn pair_label(gi: f64, gf: f64) -> String {
    format!("inv{gi}_fwd{gf}")
}

fn cfg_inversion_sweep(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let model = config.model.mixture(&sched)?;
    let s = &config.sweep;
    let grid = sweep_grid(s.t_max, s.t_min, s.t_points)?;
    let prompt = config.model.prompt();
    let mut all = Vec::new();
    let mut averages = Vec::new();
    for &[gi, gf] in &s.cfg_pairs {
        let mut rows = residual_sweep(&model, &[KappaStrategy::ddim_inversion(gi)], &grid, &prompt, gf, s.samples, config.seed)?;
        for r in &mut rows {
            r.strategy = pair_label(gi, gf);
        }
        averages.push(rows.iter().map(|r| r.mean_residual).sum::<f64>() / rows.len() as f64);
        all.extend(rows);
    }
    bundle.tables.push(sweep_table("cfg_inversion", &all));
    let mut chart = Chart::new("cfg_inversion", "Residual by inversion/forward guidance", "t", "mean residual").log_y();
    curve_tables("cfg_inversion", &all, &mut chart, bundle);
    bundle.charts.push(chart);
    let mut summary = Table::new("cfg_inversion_summary", &["strategy", "gamma_inv", "gamma_fwd", "mean_residual"]);
    for (&[gi, gf], avg) in s.cfg_pairs.iter().zip(&averages) {
        summary.push(vec![pair_label(gi, gf), f(gi), f(gf), f(*avg)]);
        bundle.summary.push(format!("{}: time-averaged residual {avg:.4e}", pair_label(gi, gf)));
    }
    bundle.tables.push(summary);
    if let Some(k) = s.cfg_pairs.iter().position(|&[gi, gf]| gi == gf && gf > 1.0) {
        let largest = averages.iter().enumerate().all(|(j, a)| j == k || *a < averages[k]);
        bundle.check(
            "same_sign_inversion_worst",
            false,
            largest,
            format!("{} has the largest time-averaged residual", pair_label(s.cfg_pairs[k][0], s.cfg_pairs[k][1])),
        );
    }
    Ok(())
}

/// Denoiser evaluations per inversion: one per branch per step.
fn inversion_nfe(n: usize, gamma_inv: f64) -> usize {
    n * if gamma_inv == 0.0 || gamma_inv == 1.0 { 1 } else { 2 }
}

fn inversion_steps(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let model = config.model.mixture(&sched)?;
    let s = &config.sweep;
    let grid = sweep_grid(s.t_max, s.t_min, s.t_points)?;
    let prompt = config.model.prompt();
    let gi = config.guidance.gamma_inv;
    let mut headers = vec!["n_steps", "mean_residual", "std_residual", "nfe"];
    if config.report.wall_time {
        headers.push("wall_time_s");
    }
    let mut summary = Table::new("inversion_steps", &headers);
    let mut chart = Chart::new("inversion_steps", "Residual by inversion step count", "t", "mean residual").log_y();
    let mut means = Vec::new();
    for &n in &config.inversion.steps {
        let strategy = KappaStrategy::DdimInversion {
            gamma_inv: gi,
            step_rule: StepRule::Fixed(n),
            grid: config.guidance.inversion_grid,
        };
        let started = Instant::now();
        let mut rows = residual_sweep(&model, &[strategy], &grid, &prompt, config.guidance.gamma, s.samples, config.seed)?;
        let elapsed = started.elapsed().as_secs_f64();
        for r in &mut rows {
            r.strategy = format!("n{n}");
        }
        let mean = rows.iter().map(|r| r.mean_residual).sum::<f64>() / rows.len() as f64;
        let std = rows.iter().map(|r| r.std_residual).sum::<f64>() / rows.len() as f64;
        means.push(mean);
        let mut row = vec![n.to_string(), f(mean), f(std), inversion_nfe(n, gi).to_string()];
        if config.report.wall_time {
            row.push(f(elapsed));
        }
        summary.push(row);
        curve_tables("inversion_steps", &rows, &mut chart, bundle);
        bundle.summary.push(format!("n = {n}: time-averaged residual {mean:.4e}"));
    }
    bundle.tables.insert(0, summary);
    bundle.charts.push(chart);
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    bundle.check("residual_non_increasing", false, monotone, format!("time-averaged residuals {}", sci_list(&means)));
    Ok(())
}

fn ode_check(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let model = config.model.mixture(&sched)?;
    let prompt = config.model.prompt();
    let o = &config.ode;
    let e = &config.equivalence;
    let grid = make_grid(o.steps, e.t_max, e.t_min)?;
    let gamma = config.guidance.gamma;
    let start = gaussian_start(&model, grid.first(), &mut substream(config.seed, 12))?;
    let traj = ddim_sample(&model, &start.x_bar, &grid, &prompt, gamma)?;
    let full = ode_identity_check(&model, &traj, &prompt, gamma, o.fd_step)?;
    let half = ode_identity_check(&model, &traj, &prompt, gamma, o.fd_step / 2.0)?;
    let mut table = Table::new("ode_check", &["t", "lhs_norm", "rhs_norm", "rel_error"]);
    for p in &full.points {
        table.push(vec![f(p.t), f(p.lhs_norm), f(p.rhs_norm), f(p.rel_error)]);
    }
    bundle.tables.push(table);
    let order = (full.max_rel_error / half.max_rel_error).log2();
    let mut conv = Table::new("ode_convergence", &["fd_step", "max_rel_error"]);
    conv.push(vec![f(o.fd_step), f(full.max_rel_error)]);
    conv.push(vec![f(o.fd_step / 2.0), f(half.max_rel_error)]);
    bundle.tables.push(conv);
    let mut chart = Chart::new("ode_check", "Finite-difference ODE identity", "t", "relative error").log_y();
    chart.add(&format!("h = {}", o.fd_step), full.points.iter().map(|p| (p.t, p.rel_error)).collect());
    chart.add(&format!("h = {}", o.fd_step / 2.0), half.points.iter().map(|p| (p.t, p.rel_error)).collect());
    bundle.charts.push(chart);
    bundle.check(
        "ode_identity",
        true,
        full.max_rel_error <= o.tolerance,
        format!("max relative error {:e} at h = {} (tolerance {:e})", full.max_rel_error, o.fd_step, o.tolerance),
    );
    bundle.check(
        "ode_convergence",
        true,
        order >= o.min_order,
        format!("observed order {order:.3} under halving (minimum {})", o.min_order),
    );
    bundle.summary.extend(bundle.checks.iter().map(|c| format!("{}: {}", c.name, c.detail)).collect::<Vec<_>>());
    Ok(())
}

fn roundtrip_2d(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let sched = config.schedule()?;
    let model = config.model.mixture(&sched)?;
    let prompt = config.model.prompt();
    let r = &config.roundtrip;
    let gen_grid = make_grid(r.generate_steps, 1.0, 0.0)?;
    let grid = make_grid(r.steps, 1.0, 0.0)?;
    let cleans: Vec<Vec<f64>> = (0..r.samples)
        .into_par_iter()
        .map(|j| {
            let start = gaussian_start(&model, 1.0, &mut substream(config.seed, tag(&[13, j as u64])))?;
            let traj = ddim_sample(&model, &start.x_bar, &gen_grid, &prompt, r.generate_gamma)?;
            Ok(traj.last().expect("non-empty").x_bar.clone())
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new("roundtrip", &["strategy", "gamma_inv", "gamma_fwd", "mean_error", "std_error"]);
    let mut means = Vec::new();
    for &[gi, gf] in &r.pairs {
        let errs: Vec<f64> = cleans
            .par_iter()
            .map(|x0| {
                let inv = ddim_invert_with(&model, x0, 1.0, r.steps, &prompt, gi, config.guidance.inversion_grid)?;
                let back = ddim_sample(&model, &inv.state.x_bar, &grid, &prompt, gf)?;
                let end = &back.last().expect("non-empty").x_bar;
                Ok(rms(&crate::vecops::sub(end, x0)))
            })
            .collect::<Result<_>>()?;
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        table.push(vec![pair_label(gi, gf), f(gi), f(gf), f(mean), f(std)]);
        bundle.summary.push(format!("{}: mean roundtrip error {mean:.4e}", pair_label(gi, gf)));
        means.push(mean);
    }
    bundle.tables.push(table);
    if let Some(k) = r.pairs.iter().position(|&p| p == [0.0, 0.0]) {
        let best = means.iter().enumerate().all(|(j, m)| j == k || means[k] < *m);
        let listed: Vec<String> = r.pairs.iter().zip(&means).map(|(&[gi, gf], m)| format!("{} {m:.4e}", pair_label(gi, gf))).collect();
        bundle.check("unguided_roundtrip_best", false, best, format!("mean errors {}", listed.join(", ")));
    }
    Ok(())
}

/// Guidance config for a distillation mode under the experiment's guidance block.
pub fn distill_guidance(config: &ExperimentConfig, mode: Mode) -> GuidanceConfig {
    let g = &config.guidance;
    let mut c = GuidanceConfig::for_mode(mode, g.gamma, g.gamma_inv);
    c.tau_rule = TauRule::Uniform { max: g.tau_max };
    if let KappaStrategy::DdimInversion { ref mut grid, .. } = c.kappa_strategy {
        *grid = g.inversion_grid;
    }
    if mode == Mode::Sdi {
        c.entropy.enabled = g.entropy;
        c.entropy.weight = g.entropy_weight;
        c.noise_term = g.noise_term;
        c.t_schedule = TSchedule::LinearAnneal {
            t_hi: 1.0,
            t_lo: config.distill.t_lo,
        };
    }
    if mode == Mode::Ism {
        c.t_schedule = TSchedule::LinearAnneal {
            t_hi: 1.0,
            t_lo: config.distill.t_lo,
        };
    }
    c.normalized()
}

/// One distillation run per configured mode, in the order given.
pub fn distill_runs(config: &ExperimentConfig) -> Result<Vec<(Mode, RunRecord)>> {
    let sched = config.schedule()?;
    let d = &config.distill;
    let run_one = |mi: usize, mode: Mode| -> Result<(Mode, RunRecord)> {
        let guidance = distill_guidance(config, mode);
        let seed = tag(&[config.seed, 20, mi as u64]);
        let mut opts = RunOptions {
            n_iters: d.iters,
            learning_rate: d.lr,
            optimizer: d.optimizer,
            record_residuals: d.record_residuals,
            ..RunOptions::default()
        };
        let record = match d.renderer {
            RendererKind::Tomo => {
                let model = config.model.view_model(&sched)?;
                let label = model
                    .label_of(d.template)
                    .ok_or_else(|| Error::Config(format!("template `{}` is not in the model", d.template)))?;
                opts.target = Some(d.template.grid(config.model.side));
                let init = Canvas::zeros(CanvasShape::Square(config.model.side))?;
                run_distillation(&model, &Renderer::Tomographic, init, &Prompt::label(label), &guidance, &opts, seed)?
            }
            RendererKind::Identity => {
                let model = config.model.mixture(&sched)?;
                let prompt = config.model.prompt();
                let renderer = Renderer::Identity { squash: d.squash };
                opts.target = Some(model.moments(&prompt)?.0);
                let init = Canvas::zeros(CanvasShape::Flat(model.dimension()))?;
                run_distillation(&model, &renderer, init, &prompt, &guidance, &opts, seed)?
            }
        };
        Ok((mode, record))
    };
    d.modes.par_iter().enumerate().map(|(mi, &m)| run_one(mi, m)).collect()
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Sds => "sds",
        Mode::Sdi => "sdi",
        Mode::Ism => "ism",
    }
}

pub fn run_table(name: &str, record: &RunRecord) -> Table {
    let mut t = Table::new(
        name,
        &[
            "iteration",
            "t",
            "tau",
            "angle_bucket",
            "guidance_norm",
            "residual",
            "residual_at_t",
            "loss_proxy",
            "reconstruction_error",
            "skipped",
        ],
    );
    for r in &record.iterations {
        t.push(vec![
            r.iteration.to_string(),
            f(r.t),
            f(r.tau),
            r.angle_bucket.to_string(),
            f(r.guidance_norm),
            f(r.residual),
            f(r.residual_at_t),
            f(r.loss_proxy),
            f(r.reconstruction_error),
            r.skipped.to_string(),
        ]);
    }
    t
}

fn distill_compare(config: &ExperimentConfig, bundle: &mut ReportBundle) -> Result<()> {
    let runs = distill_runs(config)?;
    let mut summary = Table::new("distill_summary", &["mode", "final_error", "mean_residual", "skipped_steps"]);
    let mut chart = Chart::new("distill_error", "Reconstruction error", "iteration", "relative error");
    for (mode, rec) in &runs {
        let name = mode_name(*mode);
        bundle.tables.push(run_table(&format!("run_{name}"), rec));
        let finite: Vec<f64> = rec.iterations.iter().map(|r| r.residual).filter(|r| r.is_finite()).collect();
        let mean_res = if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let skipped = rec.iterations.iter().filter(|r| r.skipped).count();
        let err = rec.final_error().unwrap_or(f64::NAN);
        summary.push(vec![name.into(), f(err), f(mean_res), skipped.to_string()]);
        chart.add(name, rec.iterations.iter().map(|r| (r.iteration as f64, r.reconstruction_error)).collect());
        bundle.canvases.push((format!("canvas_{name}"), rec.canvas.clone()));
        bundle.summary.push(format!("{name}: final relative error {err:.4}, {skipped} skipped steps"));
    }
    bundle.tables.insert(0, summary);
    bundle.charts.push(chart);
    let err_of = |m: Mode| runs.iter().find(|(mm, _)| *mm == m).and_then(|(_, r)| r.final_error());
    if let (Some(sdi), Some(sds)) = (err_of(Mode::Sdi), err_of(Mode::Sds)) {
        bundle.check("sdi_below_sds", false, sdi < sds, format!("sdi {sdi:.4} vs sds {sds:.4}"));
        bundle.check("sdi_threshold", false, sdi <= 0.15, format!("sdi {sdi:.4} (threshold 0.15)"));
    }
    Ok(())
}
