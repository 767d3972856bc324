use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mixadapt_bench::{detections, image, rng, targets};
use mixadapt_core::detector::{backward, forward, DetectionLossConfig, DetectorConfig, ToyDetectorParams};
use mixadapt_core::mixing::{combine_labels, compose, plan_mix};
use mixadapt_core::nms::nms;
use mixadapt_core::MixStrategy;
use std::hint::black_box;

fn bench_nms(c: &mut Criterion) {
    let mut g = c.benchmark_group("nms");
    for n in [16, 64, 256] {
        let dets = detections(&mut rng(1), n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &dets, |b, d| {
            b.iter(|| nms(black_box(d), 0.5, 0.25, |x| x.c_det))
        });
    }
    g.finish();
}

fn bench_mixing(c: &mut Criterion) {
    let mut r = rng(2);
    let t = detections(&mut r, 12);
    let s = detections(&mut r, 12);
    let (xs, xt) = (image(&mut r, 64), image(&mut r, 64));
    let mut g = c.benchmark_group("mixing");
    for strategy in [MixStrategy::FourDivision, MixStrategy::TwoRegionMix, MixStrategy::CutMixRandom] {
        g.bench_function(format!("plan_combine_compose/{}", strategy.name()), |b| {
            let mut pr = rng(3);
            b.iter(|| {
                let plan = plan_mix(black_box(&t), strategy, 64, 64, |d| d.c_comb, &mut pr);
                let labels = combine_labels(&t, &s, &plan);
                (compose(&xs, &xt, &plan.mask).unwrap(), labels)
            })
        });
    }
    g.finish();
}

fn bench_detector(c: &mut Criterion) {
    let mut r = rng(4);
    let cfg = DetectorConfig::default();
    let p = ToyDetectorParams::init(cfg, &mut r).unwrap();
    let img = image(&mut r, 64);
    let tg = targets(&mut r, 3);
    let loss_cfg = DetectionLossConfig::for_grid(cfg.grid);
    let mut g = c.benchmark_group("detector");
    g.bench_function("forward", |b| b.iter(|| forward(black_box(&p), black_box(&img)).unwrap()));
    g.bench_function("backward", |b| b.iter(|| backward(black_box(&p), &img, &tg, &loss_cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_nms, bench_mixing, bench_detector);
criterion_main!(benches);
