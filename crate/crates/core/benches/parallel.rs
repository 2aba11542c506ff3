use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use emgleam::classifier::{self, CnnModel, ModelSpec, Samples, TrainConfig};
use emgleam::emanator::{capture_clean, emanate, finish, ChannelModel};
use emgleam::profile::profile;
use emgleam::raster::Renderer;
use emgleam::receiver::{reconstruct, ReconParams};
use emgleam::Exec;

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", Exec::Parallel));
    }
    m
}

fn capture_chain(c: &mut Criterion) {
    let p = profile("galaxy_a3").unwrap();
    let raster = Renderer::default()
        .security_message("204816", p.timing.visible(), p.cell)
        .unwrap();
    let leak = emanate(&raster, &p.timing, &p.leak, 2).unwrap();
    let params = ReconParams::new(p.emage.width, p.emage.height, p.timing.f_r);
    let mut g = c.benchmark_group("capture_reconstruct");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let clean = capture_clean(&leak, &p.frontend(), exec).unwrap();
                let rec = finish(&clean, &ChannelModel::with_snr(25.0, 1), exec).unwrap();
                reconstruct(&rec, &params, exec).unwrap()
            })
        });
    }
    g.finish();
}

fn training_epoch(c: &mut Criterion) {
    let (h, w) = (24, 13);
    let mut data = Samples::new(h, w);
    for i in 0..512 {
        let px: Vec<f32> = (0..h * w).map(|k| ((k * 7 + i * 13) % 29) as f32 / 29.0).collect();
        data.push(&px, i % 10).unwrap();
    }
    let init = CnnModel::init(ModelSpec::lenet_fit(h, w, 10), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 64,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| classifier::train(&init, &data, &data, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, capture_chain, training_epoch);
criterion_main!(benches);
