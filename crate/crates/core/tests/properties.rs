use distill_core::distill::{relative_error, run_distillation, GuidanceConfig, Mode, RunOptions};
use distill_core::kappa::{residual_sweep, solve_kappa_detailed, KappaStrategy};
use distill_core::oracle::cfg_noise;
use distill_core::reparam::{equivalence_check, fixed_point_residual};
use distill_core::rng::{gaussian_vec, stream, substream};
use distill_core::sampler::{ddim_invert, ddim_sample};
use distill_core::{make_grid, Canvas, TimeGrid, CanvasShape, Denoiser, MixtureModel, Prompt, Renderer, Schedule};
use proptest::prelude::*;

fn multimodal(dim: usize, seed: u64) -> MixtureModel {
    MixtureModel::multimodal(Schedule::default(), dim, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = Schedule::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(s.alpha_at(lo).unwrap() >= s.alpha_at(hi).unwrap());
        prop_assert!(s.sigma_at(lo).unwrap() <= s.sigma_at(hi).unwrap());
        let al = s.alpha_at(hi).unwrap();
        let sg = s.sigma_at(hi).unwrap();
        prop_assert!((sg * sg - (1.0 - al) / al).abs() <= 1e-9 * (1.0 + sg * sg));
    }

    #[test]
    fn cfg_is_affine_in_gamma(seed in 0u64..1000, t in 0.02f64..0.98, g in -10.0f64..10.0) {
        let m = multimodal(4, seed % 7);
        let x = gaussian_vec(4, &mut stream(seed));
        let p = Prompt::label(1);
        let e0 = cfg_noise(&m, &x, t, &p, 0.0).unwrap();
        let e1 = cfg_noise(&m, &x, t, &p, 1.0).unwrap();
        let eg = cfg_noise(&m, &x, t, &p, g).unwrap();
        for i in 0..4 {
            let want = e0[i] + g * (e1[i] - e0[i]);
            prop_assert!((eg[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn reparametrized_trajectory_matches(seed in 0u64..500, steps in 2usize..40, g in -8.0f64..8.0) {
        let m = multimodal(3, 5);
        let p = Prompt::label((seed % 2) as u32);
        let x = gaussian_vec(3, &mut stream(seed));
        let grid = make_grid(steps, 0.98, 0.02).unwrap();
        let traj = ddim_sample(&m, &x, &grid, &p, g).unwrap();
        prop_assert!(equivalence_check(&m, &traj, &p, g).unwrap().max_deviation <= 1e-10);
    }

    #[test]
    fn residual_is_nonnegative(seed in 0u64..500, t in 0.05f64..0.95) {
        let m = multimodal(4, 3);
        let p = Prompt::label(0);
        let mut r = stream(seed);
        let x0 = m.sample_clean(&p, &mut r).unwrap();
        let eps = gaussian_vec(4, &mut r);
        prop_assert!(fixed_point_residual(&m, &x0, &eps, t, &p, 7.5).unwrap() >= 0.0);
    }

    #[test]
    fn gradient_descent_never_increases_the_objective(seed in 0u64..500, t in 0.1f64..0.98) {
        let m = multimodal(8, 3);
        let p = Prompt::label((seed % 2) as u32);
        let x0 = m.sample_clean(&p, &mut substream(seed, 1)).unwrap();
        let sol = solve_kappa_detailed(&m, &x0, t, &p, &KappaStrategy::gradient_descent(), 7.5, &mut substream(seed, 2)).unwrap();
        prop_assert!(!sol.objective_trace.is_empty());
        for w in sol.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "trace {:?}", sol.objective_trace);
        }
    }

    #[test]
    fn inversion_residual_is_finite(seed in 0u64..200, t in 0.2f64..0.98) {
        let m = multimodal(8, 3);
        let p = Prompt::label(1);
        let x0 = m.sample_clean(&p, &mut stream(seed)).unwrap();
        let k = solve_kappa_detailed(&m, &x0, t, &p, &KappaStrategy::ddim_inversion(-7.5), 7.5, &mut stream(seed)).unwrap();
        prop_assert!(k.kappa.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn sample_moments_match_the_mixture() {
    let m = multimodal(4, 3);
    let p = Prompt::label(1);
    let (mean, second) = m.moments(&p).unwrap();
    let n = 20_000;
    let mut r = stream(5);
    let mut acc_m = [0.0; 4];
    let mut acc_s = [0.0; 4];
    for _ in 0..n {
        let x = m.sample_clean(&p, &mut r).unwrap();
        for i in 0..4 {
            acc_m[i] += x[i] / n as f64;
            acc_s[i] += x[i] * x[i] / n as f64;
        }
    }
    for i in 0..4 {
        let sd = (second[i] - mean[i] * mean[i]).sqrt();
        // 5 standard errors
        assert!((acc_m[i] - mean[i]).abs() < 5.0 * sd / (n as f64).sqrt(), "mean {i}");
        assert!((acc_s[i] - second[i]).abs() < 0.05 * second[i].max(0.1), "second moment {i}");
    }
}

#[test]
fn unguided_roundtrip_error_shrinks_with_steps() {
    let m = multimodal(2, 3);
    let p = Prompt::label(0);
    let cleans: Vec<Vec<f64>> = (0..16).map(|j| m.sample_clean(&p, &mut substream(9, j)).unwrap()).collect();
    let err = |n: usize| {
        let grid = make_grid(n, 1.0, 0.0).unwrap();
        cleans
            .iter()
            .map(|x0| {
                let inv = ddim_invert(&m, x0, 1.0, n, &p, 0.0).unwrap();
                let back = ddim_sample(&m, &inv.state.x_bar, &grid, &p, 0.0).unwrap();
                let end = &back.last().unwrap().x_bar;
                end.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / cleans.len() as f64
    };
    let errs: Vec<f64> = [10, 20, 50, 100].iter().map(|&n| err(n)).collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
}

/// With a single Gaussian both directions are linear in `y = x_bar - mu`: the
/// inversion step to `sigma'` scales `y` by `1 + a` and the sampling step back
/// by `1 - a`, with `a = sigma' (sigma' - sigma) / (s2 + sigma'^2)`.
#[test]
fn roundtrip_matches_the_analytic_product() {
    let (mu, s2) = (0.3, 0.5);
    let m = MixtureModel::single_gaussian(Schedule::default(), vec![mu], s2).unwrap();
    let p = Prompt::label(0);
    let x0 = 1.7;
    let mut full_gaps = Vec::new();
    for (t, n, bound) in [(1.0, 50, None), (1.0, 100, None), (1.0, 200, None), (0.1, 50, None), (0.005, 50, Some(1e-6))] {
        let inv = ddim_invert(&m, &[x0], t, n, &p, 0.0).unwrap();
        let times = inv.trajectory.times();
        let sig: Vec<f64> = times.iter().map(|&u| m.schedule().sigma_at(u).unwrap()).collect();
        let factor: f64 = sig
            .windows(2)
            .map(|w| {
                let a = w[1] * (w[1] - w[0]) / (s2 + w[1] * w[1]);
                1.0 - a * a
            })
            .product();
        let back_grid = TimeGrid::from_times(times.iter().rev().cloned().collect()).unwrap();
        let back = ddim_sample(&m, &inv.state.x_bar, &back_grid, &p, 0.0).unwrap();
        let got = back.last().unwrap().x_bar[0];
        let want = mu + (x0 - mu) * factor;
        assert!((got - want).abs() <= 1e-12, "t={t}: {got} vs analytic {want}");
        if t == 1.0 {
            full_gaps.push((got - x0).abs());
        }
        if let Some(b) = bound {
            assert!((got - x0).abs() <= b, "t={t}: roundtrip gap {}", (got - x0).abs());
        }
    }
    // the full-horizon gap is a first-order discretization error
    for w in full_gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..2.5).contains(&ratio), "{full_gaps:?}");
    }
}

#[test]
fn sweeps_and_runs_are_reproducible() {
    let m = multimodal(8, 3);
    let strategies = [KappaStrategy::RandomResampled, KappaStrategy::ddim_inversion(-7.5)];
    let a = residual_sweep(&m, &strategies, &make_grid(1, 0.7, 0.3).unwrap(), &Prompt::label(0), 7.5, 16, 3).unwrap();
    let b = residual_sweep(&m, &strategies, &make_grid(1, 0.7, 0.3).unwrap(), &Prompt::label(0), 7.5, 16, 3).unwrap();
    assert_eq!(a, b);

    let run = || {
        let opts = RunOptions {
            n_iters: 30,
            target: Some(m.moments(&Prompt::label(0)).unwrap().0),
            ..RunOptions::default()
        };
        let init = Canvas::zeros(CanvasShape::Flat(8)).unwrap();
        let cfg = GuidanceConfig::for_mode(Mode::Sdi, 7.5, -7.5);
        run_distillation(&m, &Renderer::Identity { squash: false }, init, &Prompt::label(0), &cfg, &opts, 8).unwrap()
    };
    let (r1, r2) = (run(), run());
    assert_eq!(r1.canvas.data(), r2.canvas.data());
    let target = m.moments(&Prompt::label(0)).unwrap().0;
    let e = relative_error(&Renderer::Identity { squash: false }, &r1.canvas, &target).unwrap();
    assert_eq!(Some(e), r1.final_error());
    assert_eq!(m.dimension(), 8);
}
