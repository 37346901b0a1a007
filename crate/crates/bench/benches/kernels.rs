use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use trajopt::baselines::{GpConfig, GpState};
use trajopt::dataset::generate_offline;
use trajopt::model::{init_model, HeadKind, InputScaling, ModelConfig, ModelState};
use trajopt::seed::rng_from;
use trajopt::sortsample::{build_traj_dataset, default_hyperparams, SortSampleParams, Strategy};
use trajopt::train::{batch_loss_and_grad, make_batches};
use trajopt::TaskSpec;

fn kernels(c: &mut Criterion) {
    let task = TaskSpec::branin();
    let ds = generate_offline(&task, 5000, 0.1, 1).unwrap();
    let (k, tau) = default_hyperparams(ds.values(), ds.f_star());
    let params = SortSampleParams { k, tau, n_bins: 32, length: 64, strategy: Strategy::ReweightSorted, seed: 2 };

    c.bench_function("build_400_trajectories", |b| {
        b.iter(|| build_traj_dataset(black_box(&ds), 400, &params, ds.f_star()).unwrap())
    });

    let trajs = build_traj_dataset(&ds, 400, &params, ds.f_star()).unwrap();
    let mut cfg = ModelConfig::new(HeadKind::Continuous { dim: 2 }, 4, 2, 32, 64);
    cfg.embed_dim = 32;
    cfg.scaling = InputScaling::fit(&trajs);
    let model: ModelState<f32> = init_model(cfg, 3).unwrap();
    let batches = make_batches(&trajs, 32, 64, Some(1), 4).unwrap();
    c.bench_function("loss_and_grad_64_windows_e32_l2", |b| {
        b.iter(|| batch_loss_and_grad(black_box(&model), &trajs, &batches[0]).unwrap())
    });

    let mut rng = rng_from(5);
    let xs: Vec<Vec<f64>> = (0..200).map(|_| task.sample_uniform(&mut rng)).collect();
    let unit: Vec<Vec<f64>> = xs.iter().map(|p| vec![(p[0] + 5.0) / 15.0, p[1] / 15.0]).collect();
    let ys: Vec<f64> = xs.iter().map(|p| task.evaluate(p).unwrap()).collect();
    c.bench_function("gp_fit_200", |b| {
        b.iter(|| GpState::fit(black_box(unit.clone()), ys.clone(), &GpConfig::default()).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
