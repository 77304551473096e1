use bilevel_core::conv::{conv_adjoint, conv_forward, ConvSpec};
use bilevel_core::hypergradient::{inexact_hypergradient, HypergradConfig};
use bilevel_core::linear_solver::{cg_solve, SpdOperator};
use bilevel_core::lower_solver::{solve, LowerProblem, SolverConfig};
use bilevel_core::problems::{make_denoising, synth_images, ProblemInstance};
use bilevel_core::regularizers::{Crr, Icnn, Potential, PotentialKind};
use bilevel_core::{CostCounter, Image, Regularizer, Rng, Shape, ThetaParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng as _, SeedableRng};
use std::hint::black_box;

fn tasks(n: usize, side: usize, rng: &mut Rng) -> Vec<ProblemInstance> {
    let images = synth_images(n, side, rng).unwrap();
    make_denoising(&images, 25.0 / 255.0, rng).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    let mut rng = Rng::seed_from_u64(0);
    for side in [32usize, 64] {
        let spec = ConvSpec::new(4, 8, 5);
        let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Image::from_vec(Shape::new(4, side, side), (0..4 * side * side).map(|_| rng.random()).collect()).unwrap();
        let u = conv_forward(&spec, &w, &x);
        group.bench_with_input(BenchmarkId::new("forward_4to8_k5", side), &side, |b, _| {
            b.iter(|| conv_forward(&spec, black_box(&w), black_box(&x)))
        });
        group.bench_with_input(BenchmarkId::new("adjoint_8to4_k5", side), &side, |b, _| {
            b.iter(|| conv_adjoint(&spec, black_box(&w), black_box(&u)))
        });
    }
    group.finish();
}

fn regularizers() -> Vec<(&'static str, Box<dyn Regularizer>)> {
    vec![
        ("crr", Box::new(Crr::desk_default(Potential::new(PotentialKind::Huber, 10.0)))),
        ("icnn", Box::new(Icnn::desk_default())),
    ]
}

fn setup(reg: &dyn Regularizer, rng: &mut Rng) -> (Vec<ProblemInstance>, ThetaParams) {
    let train = tasks(8, 32, rng);
    let mut theta = reg.init_params(train[0].shape(), rng).unwrap();
    reg.project(&mut theta, train[0].shape()).unwrap();
    (train, theta)
}

fn lower_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("lower_solve");
    group.sample_size(10);
    for (name, reg) in regularizers() {
        let mut rng = Rng::seed_from_u64(1);
        let (train, theta) = setup(reg.as_ref(), &mut rng);
        let inst = &train[0];
        for eps in [1e-2, 1e-4] {
            group.bench_with_input(BenchmarkId::new(name, eps), &eps, |b, &eps| {
                b.iter(|| {
                    let p = LowerProblem::new(inst, reg.as_ref(), &theta);
                    solve(p, inst.y(), eps, &SolverConfig::default(), &CostCounter::new()).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn adjoint_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("cg");
    group.sample_size(10);
    let reg = Crr::desk_default(Potential::new(PotentialKind::Huber, 10.0));
    let mut rng = Rng::seed_from_u64(2);
    let (train, theta) = setup(&reg, &mut rng);
    let inst = &train[0];
    let p = LowerProblem::new(inst, &reg, &theta);
    let x = solve(p, inst.y(), 1e-6, &SolverConfig::default(), &CostCounter::new()).unwrap().x_tilde;
    let rhs: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = LowerProblem::new(inst, &reg, &theta);
    let op = SpdOperator::new(x.len(), |v| Ok(p.hvp(&x, &x.like(v.to_vec())?)?.into_vec()));
    group.bench_function("crr_hessian_1e-8", |b| b.iter(|| cg_solve(&op, black_box(&rhs), 1e-8, 2_000, &CostCounter::new()).unwrap()));
    group.finish();
}

fn hypergradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("hypergradient");
    group.sample_size(10);
    for (name, reg) in regularizers() {
        let mut rng = Rng::seed_from_u64(3);
        let (train, theta) = setup(reg.as_ref(), &mut rng);
        let weights = vec![1.0; train.len()];
        group.bench_function(BenchmarkId::new(name, "batch8_eps1e-2"), |b| {
            b.iter(|| {
                inexact_hypergradient(&train, &weights, reg.as_ref(), &theta, 1e-2, &HypergradConfig::default(), None, &CostCounter::new())
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, lower_solve, adjoint_solve, hypergradient);
criterion_main!(benches);
