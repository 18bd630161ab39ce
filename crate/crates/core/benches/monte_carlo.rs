use criterion::{criterion_group, criterion_main, Criterion};
use delay_mfg::det_solvers::PicardOptions;
use delay_mfg::experiments::{rate_scan, Equilibrium, Execution};
use delay_mfg::ScalarModel;

fn equilibrium() -> Equilibrium {
    let spec = ScalarModel {
        input: 1.0,
        input_population: 0.5,
        sigma: 0.5,
        state_weight: 1.0,
        control_weight: 1.0,
        terminal_weight: 1.0,
        a: 1.0,
        delta: 0.125,
        theta: 0.125,
        ..Default::default()
    }
    .spec(0.0625)
    .unwrap();
    Equilibrium::case1(&spec, &PicardOptions::default()).unwrap()
}

fn sweep(c: &mut Criterion) {
    let eq = equilibrium();
    let mut group = c.benchmark_group("rate_scan");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| b.iter(|| rate_scan(&eq, &[4, 8, 16], 64, 7, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
