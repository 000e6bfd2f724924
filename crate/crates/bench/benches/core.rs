use candle_core::DType;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellprompt::dpm::{tokenize, DpmConfig};
use cellprompt::matching::{hungarian, match_within_radius, CostMatrix};
use cellprompt::metrics::{evaluate, Prediction};
use cellprompt::model::{Model, ModelConfig};
use cellprompt::{CategoryRegistry, Point};

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)))
        .collect()
}

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (rows, cols) in [(50, 100), (100, 900), (300, 900)] {
        let values = (0..rows * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        let cost = CostMatrix::new(rows, cols, values).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let reg = CategoryRegistry::presets();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = reg.num_classes(0);
    let gts: Vec<(Point, usize)> = random_points(&mut rng, 200)
        .into_iter()
        .map(|p| (p, rng.gen_range(0..k)))
        .collect();
    let preds: Vec<Prediction> = gts
        .iter()
        .map(|(p, _)| Prediction {
            u: p.u + rng.gen_range(-4.0..4.0),
            v: p.v + rng.gen_range(-4.0..4.0),
            class: rng.gen_range(0..k),
            confidence: 0.9,
        })
        .collect();
    c.bench_function("evaluate/200", |b| b.iter(|| evaluate(black_box(&preds), &gts, &reg, 0).unwrap()));
    let pp: Vec<Point> = preds.iter().map(Prediction::point).collect();
    let gp: Vec<Point> = gts.iter().map(|g| g.0).collect();
    c.bench_function("match_within_radius/200", |b| b.iter(|| match_within_radius(black_box(&pp), &gp, 6.0)));
}

fn bench_tokenizer(c: &mut Criterion) {
    let text = "X X X X X X X X X X X X X X X X epithelial";
    c.bench_function("tokenize/77", |b| b.iter(|| tokenize(black_box(text), 77)));
}

fn bench_forward(c: &mut Criterion) {
    let reg = CategoryRegistry::presets();
    let cfg = ModelConfig {
        dim: 64,
        heads: 4,
        ffn_dim: 128,
        num_queries: 100,
        backbone_channels: [16, 32, 64, 128],
        ..ModelConfig::default()
    };
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, dpm) in [
        ("dpm=feature", DpmConfig::default()),
        ("dpm=off", DpmConfig { mode: cellprompt::dpm::DpmMode::Off, ..DpmConfig::default() }),
    ] {
        let model = Model::new(&cfg, &dpm, &reg, 0, DType::F32).unwrap();
        let img = RgbImage::from_fn(96, 96, |x, y| image::Rgb([(x * 2) as u8, (y * 2) as u8, 120]));
        let x = model.image_tensor(&img).unwrap();
        group.bench_function(name, |b| b.iter(|| model.forward(black_box(&x), 0, None).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_hungarian, bench_evaluate, bench_tokenizer, bench_forward);
criterion_main!(benches);
