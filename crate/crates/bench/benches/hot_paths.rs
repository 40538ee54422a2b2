//! Microbenchmarks for the hot paths of a run: growing the RBF factorization,
//! scoring candidates, and driving a full simulated-time trial.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use sot_core::aux::select_candidates;
use sot_core::harness::{run_trial, ExperimentSpec};
use sot_core::problem::lookup;
use sot_core::rbf::RbfSurrogate;
use sot_core::strategy::Mode;

fn random_points(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen::<f64>()).collect()).collect()
}

fn bench_rbf_growth(c: &mut Criterion) {
    let mut group = c.benchmark_group("rbf_incremental_growth");
    for n in [50usize, 150, 300] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let mut rng = ChaCha20Rng::seed_from_u64(1);
            let pts = random_points(&mut rng, n, 10);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            b.iter(|| {
                let mut model = RbfSurrogate::cubic_linear(10);
                for (p, v) in pts.iter().zip(&vals) {
                    model
                        .add_points(std::slice::from_ref(p), std::slice::from_ref(v))
                        .unwrap();
                }
                model.num_points()
            });
        });
    }
    group.finish();
}

fn bench_rbf_predict(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let pts = random_points(&mut rng, 300, 10);
    let vals: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
    let mut model = RbfSurrogate::cubic_linear(10);
    model.add_points(&pts, &vals).unwrap();
    let query: Vec<f64> = (0..10).map(|_| rng.gen()).collect();
    c.bench_function("rbf_predict_n300", |b| {
        b.iter(|| model.predict(&query).unwrap())
    });
}

fn bench_candidate_selection(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let omega = random_points(&mut rng, 1000, 10);
    let vals: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let evaluated = random_points(&mut rng, 200, 10);
    c.bench_function("merit_selection_1000x200", |b| {
        b.iter(|| select_candidates(&omega, &vals, &evaluated, &[0.3, 0.5, 0.8, 0.95], 1, 0.0025))
    });
}

fn bench_sim_trial(c: &mut Criterion) {
    let mut spec = ExperimentSpec::new(
        lookup("sphere", 5).unwrap(),
        Mode::Async { workers: 4 },
        60,
        1e9,
    );
    spec.alpha = Some(2.84);
    spec.num_cand = Some(100);
    c.bench_function("simulated_trial_60_evals", |b| {
        b.iter(|| run_trial(&spec, 0).unwrap())
    });
}

criterion_group!(
    benches,
    bench_rbf_growth,
    bench_rbf_predict,
    bench_candidate_selection,
    bench_sim_trial
);
criterion_main!(benches);
