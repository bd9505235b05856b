use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use distill_core::kappa::{solve_kappa, KappaStrategy};
use distill_core::renderer::{project, project_adjoint};
use distill_core::rng::{gaussian_vec, substream, tag};
use distill_core::sampler::{ddim_step, DiffusionState};
use distill_core::{cfg_noise, CameraAngle, Canvas, CanvasShape, Denoiser, MixtureModel, Prompt, Schedule, Template};

fn model() -> MixtureModel {
    MixtureModel::multimodal(Schedule::default(), 8, 3).unwrap()
}

fn oracle(c: &mut Criterion) {
    let m = model();
    let x = gaussian_vec(8, &mut substream(1, tag(&[0])));
    let p = Prompt::label(0);
    c.bench_function("mixture_noise_d8", |b| b.iter(|| m.predict_noise(black_box(&x), 0.5, &p).unwrap()));
    c.bench_function("cfg_noise_d8", |b| b.iter(|| cfg_noise(&m, black_box(&x), 0.5, &p, 7.5).unwrap()));
    let state = DiffusionState::from_noisy(&m, &x, 0.5).unwrap();
    c.bench_function("ddim_step_d8", |b| b.iter(|| ddim_step(&m, black_box(&state), 0.02, &p, 7.5).unwrap()));
}

fn renderer(c: &mut Criterion) {
    let canvas = Canvas::new(CanvasShape::Square(64), Template::Disk.grid(64)).unwrap();
    let angle = CameraAngle::new(0.7);
    let cot = vec![1.0; 64];
    c.bench_function("project_64", |b| b.iter(|| project(black_box(&canvas), angle).unwrap()));
    c.bench_function("project_adjoint_64", |b| b.iter(|| project_adjoint(black_box(&canvas), angle, &cot).unwrap()));
}

fn kappa(c: &mut Criterion) {
    let m = model();
    let p = Prompt::label(0);
    let x0 = m.sample_clean(&p, &mut substream(2, tag(&[0]))).unwrap();
    let mut group = c.benchmark_group("solve_kappa_d8");
    for strategy in [
        KappaStrategy::fixed_point(),
        KappaStrategy::gradient_descent(),
        KappaStrategy::ddim_inversion(-7.5),
    ] {
        group.bench_function(strategy.to_string(), |b| {
            let mut rng = substream(3, tag(&[1]));
            b.iter(|| solve_kappa(&m, black_box(&x0), 0.6, &p, &strategy, 7.5, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, oracle, renderer, kappa);
criterion_main!(benches);
