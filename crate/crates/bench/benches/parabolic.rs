use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rwalk_bench::free_group_model;
use rwalk_core::green::PassageOptions;
use rwalk_core::parabolic::{
    build_section, displacement_and_eigenpair, first_return_kernel, induced_powers,
};

fn kernels(c: &mut Criterion) {
    let model = free_group_model();
    let r = 0.9 * model.radius;
    let spec = model.adapted.spec();
    let mut g = c.benchmark_group("first_return");
    g.sample_size(10);
    for eta in [0.0, 1.0, 2.0] {
        let section = build_section(&spec, 0, eta).unwrap();
        g.bench_function(format!("kernel_eta{eta}"), |b| {
            b.iter(|| {
                first_return_kernel(&model, black_box(r), &section, &PassageOptions::default())
                    .unwrap()
            })
        });
    }
    let section = build_section(&spec, 0, 1.0).unwrap();
    let k = first_return_kernel(&model, r, &section, &PassageOptions::default()).unwrap();
    g.bench_function("eigenpair_eta1", |b| {
        b.iter(|| displacement_and_eigenpair(black_box(&k)).unwrap())
    });
    g.bench_function("induced_1024_eta1", |b| {
        b.iter(|| induced_powers(black_box(&k), 1024).unwrap())
    });
    g.finish();
}

fn radius(c: &mut Criterion) {
    let model = free_group_model();
    let mut g = c.benchmark_group("excursion_system");
    g.bench_function("solve_w", |b| {
        b.iter(|| model.solve(black_box(0.9 * model.radius)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, kernels, radius);
criterion_main!(benches);
