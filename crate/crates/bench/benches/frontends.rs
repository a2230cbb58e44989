use criterion::{black_box, criterion_group, criterion_main, Criterion};
use distvad::beamform::{srp_phat, ArrayGeometry, SrpConfig};
use distvad::pipeline::FrontendKind;
use distvad::spectral::{stft, StftConfig};
use distvad::trainer::{loss_and_grads, InvariantConfig, LabelledSegment};
use distvad::segeval::FrameLabels;
use distvad_bench::{model, scene};

fn frontends(c: &mut Criterion) {
    let x = scene(2.0);
    let mut g = c.benchmark_group("frontend_2s_8ch");
    g.sample_size(10);
    g.bench_function("raw_stft", |b| b.iter(|| stft(black_box(&x), &StftConfig::default()).unwrap()));
    for kind in [
        FrontendKind::Stft,
        FrontendKind::Sacc,
        FrontendKind::Analytic,
        FrontendKind::Ecsacc,
        FrontendKind::Icsacc,
        FrontendKind::Mvdr,
    ] {
        let m = model(kind);
        g.bench_function(format!("{kind:?}").to_lowercase(), |b| b.iter(|| m.features(black_box(&x)).unwrap()));
    }
    g.finish();
}

fn localisation(c: &mut Criterion) {
    let x = scene(1.0);
    let y = stft(&x, &StftConfig::default()).unwrap();
    let geom = ArrayGeometry::uca(8, 0.1).unwrap();
    let mut g = c.benchmark_group("srp_phat_1s");
    g.sample_size(10);
    g.bench_function("360", |b| b.iter(|| srp_phat(black_box(&y), &geom, &SrpConfig::default()).unwrap()));
    g.finish();
}

fn training(c: &mut Criterion) {
    let seg = LabelledSegment {
        signal: scene(2.0),
        labels: FrameLabels::new(vec![1; 200], 100.0),
    };
    let m = model(FrontendKind::Sacc);
    let mut g = c.benchmark_group("train_step_sacc");
    g.sample_size(10);
    g.bench_function("ce", |b| b.iter(|| loss_and_grads(&m, std::slice::from_ref(&seg), None, &[0]).unwrap()));
    let ic = InvariantConfig::default();
    g.bench_function("dual", |b| b.iter(|| loss_and_grads(&m, std::slice::from_ref(&seg), Some(&ic), &[0]).unwrap()));
    g.finish();
}

criterion_group!(benches, frontends, localisation, training);
criterion_main!(benches);
