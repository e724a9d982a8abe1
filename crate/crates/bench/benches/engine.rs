use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DVector;
use std::hint::black_box;
use twoscale::ode::{faster_field, integrate, slower_field};
use twoscale::{run_two_timescale, OracleSolution, RunConfig};
use twoscale_bench::{chain3, oracle, random, schedule};

fn engine(c: &mut Criterion) {
    let mut g = c.benchmark_group("engine");
    let pair = schedule();
    for (name, p) in [("chain3", chain3()), ("random50_d8", random(50, 8, 1))] {
        let cfg = RunConfig::new(10_000, 0).thinning(10_000);
        g.bench_function(format!("{name}/10k_steps"), |b| {
            b.iter(|| run_two_timescale(black_box(&p), &pair, &cfg).unwrap())
        });
    }
    let p = chain3();
    let cfg = RunConfig::new(10_000, 0).thinning(1).lambda(oracle(&p).lambda).record_noise(true);
    g.bench_function("chain3/10k_steps_dense_log", |b| b.iter(|| run_two_timescale(&p, &pair, &cfg).unwrap()));
    g.finish();
}

fn oracle_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("oracle");
    for (name, p) in [("chain3", chain3()), ("random20_d5", random(20, 5, 2)), ("random200_d20", random(200, 20, 3))] {
        g.bench_function(name, |b| {
            b.iter(|| OracleSolution::solve(p.mdp(), p.target(), p.behavior(), black_box(p.features())).unwrap())
        });
    }
    g.finish();
}

fn rk4(c: &mut Criterion) {
    let mut g = c.benchmark_group("rk4");
    let sol = oracle(&random(20, 5, 2));
    let slow = slower_field(&sol);
    let fast = faster_field(&sol, &DVector::zeros(5));
    let x0 = vec![1.0; 5];
    g.bench_function("slow_field/10k_steps", |b| {
        b.iter_batched(|| x0.clone(), |x| integrate(&slow, &x, 10.0, 1e-3).unwrap(), BatchSize::SmallInput)
    });
    g.bench_function("fast_field/10k_steps", |b| {
        b.iter_batched(|| x0.clone(), |x| integrate(&fast, &x, 10.0, 1e-3).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, engine, oracle_solve, rk4);
criterion_main!(benches);
