use covsegnet_bench::feature_map;
use covsegnet_core::kernels::{self, ConvGeom};
use covsegnet_core::losses::{self, LossConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3");
    g.sample_size(20);
    let cases: [(&str, Vec<usize>, usize); 3] = [
        ("2d_4x16x64x64", vec![4, 16, 64, 64], 16),
        ("2d_1x64x32x32", vec![1, 64, 32, 32], 64),
        ("3d_1x8x8x32x32", vec![1, 8, 8, 32, 32], 8),
    ];
    for (name, shape, c_out) in cases {
        let x = feature_map(&shape, 1);
        let mut wshape = vec![c_out, shape[1]];
        wshape.extend(vec![3; shape.len() - 2]);
        let w = feature_map(&wshape, 2);
        let b = feature_map(&[c_out], 3);
        let y = kernels::conv_forward(&x, &w, &b, ConvGeom::SAME3).unwrap();
        g.bench_with_input(BenchmarkId::new("forward", name), &(), |bch, _| {
            bch.iter(|| kernels::conv_forward(&x, &w, &b, ConvGeom::SAME3).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("backward", name), &(), |bch, _| {
            bch.iter(|| kernels::conv_backward(&x, &w, ConvGeom::SAME3, &y).unwrap())
        });
    }
    g.finish();
}

fn pooling(c: &mut Criterion) {
    let x = feature_map(&[4, 32, 64, 64], 4);
    c.bench_function("max_pool2_4x32x64x64", |b| b.iter(|| kernels::max_pool_forward(&x, 2).unwrap()));
    c.bench_function("upsample2_4x32x64x64", |b| b.iter(|| kernels::upsample_forward(&x, 2).unwrap()));
}

fn loss(c: &mut Criterion) {
    let p = feature_map(&[4, 1, 128, 128], 5).map(|v| 1.0 / (1.0 + (-v).exp()));
    let gt = feature_map(&[4, 1, 128, 128], 6).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let cfg = LossConfig::default();
    c.bench_function("focal_tversky_with_grad_4x128x128", |b| {
        b.iter(|| losses::focal_tversky_with_grad(&p, &gt, &cfg).unwrap())
    });
}

criterion_group!(benches, conv, pooling, loss);
criterion_main!(benches);
