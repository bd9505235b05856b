//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Hard criteria fail the target; soft and threshold criteria are measured
//! and reported only. Every tolerance is pinned below.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use distill_core::distill::{
    guidance_variance_probe, sdi_step, sds_step, GuidanceConfig, Mode, Optimizer, RunOptions,
};
use distill_core::harness::experiments::distill_runs;
use distill_core::harness::{emit_report, run_experiment, ExperimentConfig, ExperimentKind, ReportBundle};
use distill_core::kappa::{exact_kappa, KappaStrategy};
use distill_core::renderer::{project_linear, project_linear_adjoint};
use distill_core::reparam::{fixed_point_residual, x0_update, X0State};
use distill_core::rng::{gaussian_vec, substream, tag, uniform};
use distill_core::{
    CameraAngle, Canvas, CanvasShape, MixtureModel, Prompt, Renderer, Schedule, Template, ViewConditionedMixture,
};

const SEED: u64 = 2024;

const REPARAM_TOL: f64 = 1e-10;
const REPARAM_BUDGET_S: f64 = 10.0;
const SDS_CONFIGS: usize = 1000;
const CACHED_TOL: f64 = 1e-8;
const EXACT_TOL: f64 = 1e-10;
const EXACT_PAIRS: usize = 50;
const ODE_TOL: f64 = 1e-3;
const ADJOINT_TOL: f64 = 1e-10;
const ADJOINT_PAIRS: usize = 100;
const FD_TOL: f64 = 1e-4;
const FD_GRIDS: usize = 20;
const VARIANCE_T: f64 = 0.5;
const VARIANCE_DRAWS: usize = 64;
const DISTILL_THRESHOLD: f64 = 0.15;
const DISTILL_BUDGET_S: f64 = 300.0;

#[derive(Clone, Copy)]
enum Kind {
    Hard,
    Soft,
    Threshold,
}

struct Ledger {
    hard_failures: Vec<String>,
}

impl Ledger {
    fn record(&mut self, id: u32, kind: Kind, name: &str, passed: bool, detail: String) {
        let k = match kind {
            Kind::Hard => "HARD",
            Kind::Soft => "SOFT",
            Kind::Threshold => "THRESHOLD",
        };
        println!("AC{id:02} [{k}] {} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        if !passed && matches!(kind, Kind::Hard) {
            self.hard_failures.push(format!("AC{id:02} {name}"));
        }
    }

    fn note(&self, text: String) {
        println!("     {text}");
    }
}

fn defaults(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::default_for(kind, SEED)
}

fn check<'a>(bundle: &'a ReportBundle, name: &str) -> &'a distill_core::harness::report::Check {
    bundle
        .checks
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("suite did not report `{name}`"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn reparametrization(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::Equivalence);
    assert_eq!((cfg.equivalence.trajectories, cfg.equivalence.steps), (100, 30));
    assert!(cfg.equivalence.tolerance <= REPARAM_TOL);
    let start = Instant::now();
    let bundle = run_experiment(&cfg).expect("equivalence suite");
    let elapsed = start.elapsed().as_secs_f64();
    let c = check(&bundle, "reparametrization");
    l.record(
        1,
        Kind::Hard,
        "reparametrization identity",
        c.passed && elapsed < REPARAM_BUDGET_S,
        format!("{}; {elapsed:.2}s (budget {REPARAM_BUDGET_S}s)", c.detail),
    );
}

/// Random model, renderer, canvas and level; SDI with resampled noise and no
/// entropy must reproduce SDS to the bit when both read the same stream.
fn sds_reduction(l: &mut Ledger) {
    let sched = Schedule::default();
    let view = ViewConditionedMixture::one_per_template(sched.clone(), 8, &Template::ALL, 0.01).unwrap();
    let mut mismatches = 0;
    for i in 0..SDS_CONFIGS {
        let mut r = substream(SEED, tag(&[100, i as u64]));
        let gamma = uniform(-10.0, 10.0, &mut r);
        let t = uniform(0.02, 0.9, &mut r);
        let tau = uniform(0.0, 0.98 - t, &mut r).min(0.97 - t).max(0.0);
        let angle = CameraAngle::new(uniform(0.0, std::f64::consts::TAU, &mut r));
        let mut cfg = GuidanceConfig::sdi_with(gamma, -gamma);
        cfg.kappa_strategy = KappaStrategy::RandomResampled;
        cfg.entropy.enabled = false;
        let stream_seed = tag(&[101, i as u64]);
        let (a, b) = if i % 2 == 0 {
            let dim = 2 + (i / 2) % 7;
            let m = MixtureModel::multimodal(sched.clone(), dim, i as u64).unwrap();
            let canvas = Canvas::new(CanvasShape::Flat(dim), gaussian_vec(dim, &mut r)).unwrap();
            let renderer = Renderer::Identity { squash: i % 4 == 0 };
            let p = Prompt::label((i / 2 % m.n_labels()) as u32);
            (
                sds_step(&m, &renderer, &canvas, angle, t, &p, gamma, &mut substream(stream_seed, 0)).unwrap(),
                sdi_step(&m, &renderer, &canvas, angle, t, tau, &p, &cfg, None, &mut substream(stream_seed, 0)).unwrap(),
            )
        } else {
            let canvas = Canvas::new(CanvasShape::Square(8), gaussian_vec(64, &mut r)).unwrap();
            let p = Prompt::label((i % 4) as u32);
            let renderer = Renderer::Tomographic;
            (
                sds_step(&view, &renderer, &canvas, angle, t, &p, gamma, &mut substream(stream_seed, 0)).unwrap(),
                sdi_step(&view, &renderer, &canvas, angle, t, tau, &p, &cfg, None, &mut substream(stream_seed, 0)).unwrap(),
            )
        };
        let same = a
            .gradient
            .iter()
            .zip(&b.gradient)
            .chain(a.guidance.iter().zip(&b.guidance))
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same || a.gradient.len() != b.gradient.len() {
            mismatches += 1;
        }
    }
    l.record(
        2,
        Kind::Hard,
        "SDS reduction",
        mismatches == 0,
        format!("{mismatches} of {SDS_CONFIGS} random configurations differ bitwise"),
    );
}

fn cached_kappa(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::Equivalence);
    assert_eq!(cfg.equivalence.cached_seeds, 20);
    assert!(cfg.equivalence.cached_tolerance <= CACHED_TOL);
    let bundle = run_experiment(&cfg).expect("equivalence suite");
    let c = check(&bundle, "cached_kappa");
    l.record(3, Kind::Hard, "cached noise equals DDIM", c.passed, c.detail.clone());
}

/// The closed-form quantities are recomputed here from the Gaussian
/// posterior, independently of the library's oracle.
fn exact_fixed_point(l: &mut Ledger) {
    let (mu, s2) = (0.5, 0.25);
    let sched = Schedule::default();
    let m = MixtureModel::single_gaussian(sched.clone(), vec![mu], s2).unwrap();
    let p = Prompt::label(0);
    let gamma = 7.5;
    let (mut worst_res, mut worst_step, mut worst_kappa) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..EXACT_PAIRS {
        let mut r = substream(SEED, tag(&[200, i as u64]));
        let t = uniform(0.05, 0.98, &mut r);
        let tau = uniform(0.01, t - 0.01, &mut r);
        let x0 = mu + s2.sqrt() * gaussian_vec(1, &mut r)[0] * 1.5;
        let (sg, sg_next) = (sched.sigma_at(t).unwrap(), sched.sigma_at(t - tau).unwrap());

        let kappa = exact_kappa(&m, &[x0], t, &p).unwrap();
        worst_kappa = worst_kappa.max((kappa[0] - sg * (x0 - mu) / s2).abs());
        worst_res = worst_res.max(fixed_point_residual(&m, &[x0], &kappa, t, &p, gamma).unwrap());

        // DDIM in rescaled coordinates; x0(t) = mu + (x_bar - mu) s2 / (s2 + sigma^2)
        let x_bar = x0 + sg * kappa[0];
        let eps = sg * (x_bar - mu) / (s2 + sg * sg);
        let x_bar_next = x_bar + eps * (sg_next - sg);
        let x0_next = mu + (x_bar_next - mu) * s2 / (s2 + sg_next * sg_next);

        let state = X0State {
            x0: vec![x0],
            t,
            kappa: Some(kappa.clone()),
        };
        let stepped = x0_update(&m, &state, tau, &kappa, &p, gamma).unwrap();
        worst_step = worst_step.max((stepped.x0[0] - x0_next).abs());
    }
    l.record(
        4,
        Kind::Hard,
        "exact fixed point",
        worst_res <= EXACT_TOL && worst_step <= EXACT_TOL && worst_kappa <= EXACT_TOL,
        format!(
            "over {EXACT_PAIRS} (t, tau) pairs: residual {worst_res:.2e}, x0 update vs DDIM {worst_step:.2e}, kappa vs closed form {worst_kappa:.2e} (tolerance {EXACT_TOL:e})"
        ),
    );
}

fn ode_identity(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::OdeCheck);
    assert_eq!(cfg.ode.steps, 500);
    assert_eq!(cfg.ode.fd_step, 1e-4);
    assert!(cfg.ode.tolerance <= ODE_TOL);
    let bundle = run_experiment(&cfg).expect("ode suite");
    let id = check(&bundle, "ode_identity");
    let conv = check(&bundle, "ode_convergence");
    l.record(
        5,
        Kind::Hard,
        "ODE identity",
        id.passed && conv.passed,
        format!("{}; {}", id.detail, conv.detail),
    );
}

fn renderer_adjoint(l: &mut Ledger) {
    let mut worst_dot = 0.0f64;
    for i in 0..ADJOINT_PAIRS {
        let mut r = substream(SEED, tag(&[300, i as u64]));
        let n = 4 + i % 29;
        let angle = CameraAngle::new(uniform(0.0, std::f64::consts::TAU, &mut r));
        let x = gaussian_vec(n * n, &mut r);
        let y = gaussian_vec(n, &mut r);
        let lhs = dot(&project_linear(&x, n, angle).unwrap(), &y);
        let rhs = dot(&x, &project_linear_adjoint(n, angle, &y).unwrap());
        worst_dot = worst_dot.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    // directional central differences of <w, render(c)> through the sigmoid
    let mut worst_fd = 0.0f64;
    for i in 0..FD_GRIDS {
        let mut r = substream(SEED, tag(&[301, i as u64]));
        let n = 8 + 4 * (i % 5);
        let angle = CameraAngle::new(uniform(0.0, std::f64::consts::TAU, &mut r));
        let c = Canvas::new(CanvasShape::Square(n), gaussian_vec(n * n, &mut r)).unwrap();
        let w = gaussian_vec(n, &mut r);
        let d = gaussian_vec(n * n, &mut r);
        let renderer = Renderer::Tomographic;
        let grad = renderer.pullback(&c, angle, &w).unwrap();
        let h = 1e-5;
        let shifted = |sign: f64| {
            let data = c.data().iter().zip(&d).map(|(v, e)| v + sign * h * e).collect();
            let cc = Canvas::new(CanvasShape::Square(n), data).unwrap();
            dot(&w, &renderer.render(&cc, angle).unwrap())
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let an = dot(&grad, &d);
        worst_fd = worst_fd.max((fd - an).abs() / an.abs().max(1e-12));
    }
    l.record(
        6,
        Kind::Hard,
        "renderer adjoint",
        worst_dot <= ADJOINT_TOL && worst_fd <= FD_TOL,
        format!(
            "dot-product relative gap {worst_dot:.2e} over {ADJOINT_PAIRS} pairs (tolerance {ADJOINT_TOL:e}); finite-difference gradient {worst_fd:.2e} over {FD_GRIDS} grids (tolerance {FD_TOL:e})"
        ),
    );
}

fn residual_sweep(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::ResidualSweep);
    assert_eq!((cfg.sweep.t_points, cfg.sweep.samples), (10, 256));
    let bundle = run_experiment(&cfg).expect("residual sweep");
    let same = check(&bundle, "resampled_equals_fixed");
    l.record(7, Kind::Hard, "resampled and fixed noise agree", same.passed, same.detail.clone());
    let order = check(&bundle, "inversion_below_random");
    l.record(8, Kind::Soft, "inversion below random noise", order.passed, order.detail.clone());
    for line in &bundle.summary {
        l.note(line.clone());
    }
}

fn cfg_inversion(l: &mut Ledger) {
    let bundle = run_experiment(&defaults(ExperimentKind::CfgInversionSweep)).expect("cfg inversion sweep");
    let c = check(&bundle, "same_sign_inversion_worst");
    l.record(9, Kind::Soft, "same-sign inversion guidance is worst", c.passed, c.detail.clone());
}

fn roundtrip(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::Roundtrip2d);
    assert_eq!((cfg.model.dimension, cfg.roundtrip.steps), (2, 50));
    let bundle = run_experiment(&cfg).expect("roundtrip");
    let c = check(&bundle, "unguided_roundtrip_best");
    l.record(10, Kind::Soft, "unguided roundtrip is best", c.passed, c.detail.clone());
}

fn guidance_variance(l: &mut Ledger) {
    let m = MixtureModel::multimodal(Schedule::default(), 8, 3).unwrap();
    let p = Prompt::label(0);
    let canvas = Canvas::new(CanvasShape::Flat(8), m.sample_clean(&p, &mut substream(SEED, tag(&[400]))).unwrap()).unwrap();
    let sdi = GuidanceConfig::sdi();
    assert_eq!(sdi.entropy.weight, 0.3);
    let configs = vec![("sds".to_string(), GuidanceConfig::sds(7.5)), ("sdi".to_string(), sdi)];
    let rows = guidance_variance_probe(
        &m,
        &Renderer::Identity { squash: false },
        &canvas,
        CameraAngle::new(0.0),
        VARIANCE_T,
        1.0 / 30.0,
        &p,
        &configs,
        VARIANCE_DRAWS,
        SEED,
    )
    .unwrap();
    let (sds, sdi) = (&rows[0].guidance_variance, &rows[1].guidance_variance);
    let below = sds.iter().zip(sdi).filter(|(a, b)| b < a).count();
    let ratio = sdi.iter().zip(sds).map(|(b, a)| b / a).fold(0.0, f64::max);
    l.record(
        11,
        Kind::Hard,
        "guidance variance",
        below == sds.len(),
        format!(
            "SDI below SDS on {below}/{} coordinates, worst ratio {ratio:.3e}; mean variance sdi {:.3e} vs sds {:.3e}",
            sds.len(),
            rows[1].mean_variance,
            rows[0].mean_variance
        ),
    );
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn tomographic(l: &mut Ledger) {
    let cfg = defaults(ExperimentKind::DistillCompare);
    let g = &cfg.distill;
    assert_eq!((g.iters, g.lr, g.template, cfg.model.side), (2000, 1e-2, Template::Disk, 64));
    assert_eq!((cfg.guidance.gamma, cfg.guidance.gamma_inv), (7.5, -7.5));
    let start = Instant::now();
    let runs = single_threaded(|| distill_runs(&cfg)).expect("distillation");
    let elapsed = start.elapsed().as_secs_f64();
    let err = |runs: &[(Mode, distill_core::distill::RunRecord)], m: Mode| {
        runs.iter().find(|(mm, _)| *mm == m).and_then(|(_, r)| r.final_error()).unwrap_or(f64::NAN)
    };
    let (sdi, sds) = (err(&runs, Mode::Sdi), err(&runs, Mode::Sds));
    l.record(
        12,
        Kind::Threshold,
        "tomographic distillation",
        sdi <= DISTILL_THRESHOLD && sdi < sds && elapsed < DISTILL_BUDGET_S,
        format!(
            "sdi {sdi:.4} vs sds {sds:.4} (threshold {DISTILL_THRESHOLD}); {elapsed:.1}s single-threaded (budget {DISTILL_BUDGET_S}s)"
        ),
    );

    // informational: the same budget under Adam, and the exact-noise reference
    let mut adam = cfg.clone();
    adam.distill.optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let runs = distill_runs(&adam).expect("adam distillation");
    l.note(format!(
        "with Adam at the same lr and budget: sdi {:.4} vs sds {:.4}",
        err(&runs, Mode::Sdi),
        err(&runs, Mode::Sds)
    ));
    let single = ViewConditionedMixture::one_per_template(Schedule::default(), 64, &[Template::Disk], cfg.model.template_variance).unwrap();
    let mut exact = GuidanceConfig::sdi();
    exact.kappa_strategy = KappaStrategy::Exact;
    exact.entropy.enabled = false;
    let opts = RunOptions {
        n_iters: g.iters,
        learning_rate: g.lr,
        optimizer: adam.distill.optimizer,
        target: Some(Template::Disk.grid(64)),
        record_residuals: false,
        ..RunOptions::default()
    };
    let rec = distill_core::distill::run_distillation(
        &single,
        &Renderer::Tomographic,
        Canvas::zeros(CanvasShape::Square(64)).unwrap(),
        &Prompt::label(0),
        &exact,
        &opts,
        tag(&[SEED, 500]),
    )
    .expect("exact reference");
    l.note(format!(
        "exact-noise reference run (single-template oracle, Adam): final error {:.4}",
        rec.final_error().unwrap_or(f64::NAN)
    ));
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap());
    }
    out
}

fn determinism(l: &mut Ledger) {
    let mut differing = Vec::new();
    let mut files = 0;
    for kind in ExperimentKind::ALL {
        let mut cfg = defaults(kind);
        cfg.report.svg = true;
        let trees: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let bundle = run_experiment(&cfg).expect("suite");
                emit_report(&bundle, dir.path(), true).unwrap();
                read_tree(dir.path())
            })
            .collect();
        files += trees[0].len();
        if trees[0] != trees[1] {
            differing.push(kind.name());
        }
    }
    l.record(
        13,
        Kind::Hard,
        "determinism",
        differing.is_empty(),
        format!(
            "{} suites, {files} files compared byte for byte; differing: {}",
            ExperimentKind::ALL.len(),
            if differing.is_empty() { "none".into() } else { differing.join(", ") }
        ),
    );
}

fn main() -> ExitCode {
    // honour `cargo test -- --list` and filters as a no-op
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut l = Ledger { hard_failures: Vec::new() };
    reparametrization(&mut l);
    sds_reduction(&mut l);
    cached_kappa(&mut l);
    exact_fixed_point(&mut l);
    ode_identity(&mut l);
    renderer_adjoint(&mut l);
    residual_sweep(&mut l);
    cfg_inversion(&mut l);
    roundtrip(&mut l);
    guidance_variance(&mut l);
    tomographic(&mut l);
    determinism(&mut l);
    if l.hard_failures.is_empty() {
        println!("acceptance: all hard criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: hard failures: {}", l.hard_failures.join(", "));
        ExitCode::FAILURE
    }
}
