use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use radiomap_nn::model::unet_si;
use radiomap_nn::ops::{conv2d_backward, conv2d_forward, ConvGeometry};
use radiomap_nn::{with_mode, ExecMode, Model, Tensor};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn conv_layer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[16, 16, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[32, 16, 3, 3], -0.1, 0.1, &mut rng);
    let b = Tensor::zeros(&[32]);
    let g = ConvGeometry::same(3, 1, 32);
    let gy = Tensor::uniform(&[16, 32, 32, 32], -1.0, 1.0, &mut rng);

    let mut group = c.benchmark_group("conv3x3_16x16x32x32");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new("forward", name), &mode, |bch, &m| {
            bch.iter(|| with_mode(m, || conv2d_forward(&x, &w, Some(&b), g).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("backward", name), &mode, |bch, &m| {
            bch.iter(|| with_mode(m, || conv2d_backward(&x, &w, &gy, g, true).unwrap()))
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let spec = unet_si(37, &[1, 3, 5], 0.125, 2).unwrap();
    let model = Model::init(spec, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(&[8, 2, 32, 32], 0.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("unet_si_37_forward_8x32x32");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bch, &m| {
            bch.iter(|| with_mode(m, || model.forward(&x).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv_layer, model_forward);
criterion_main!(benches);
