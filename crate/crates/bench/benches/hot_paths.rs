use criterion::{criterion_group, criterion_main, Criterion};

use mlfpn_core::config::{BackboneConfig, NetworkConfig};
use mlfpn_core::head::soft_nms_linear;
use mlfpn_core::mlfpn::{se_attention, tum_forward};
use mlfpn_core::params::Model;
use mlfpn_core::rng::Rng;
use mlfpn_core::tensor::{conv2d, ConvParams, Tensor4};
use mlfpn_core::verify::random_nms_instance;

fn small_net() -> (NetworkConfig, BackboneConfig) {
    let net = NetworkConfig {
        input_size: 320,
        num_tums: 1,
        tum_channels: 32,
        base_compress_shallow: 32,
        base_compress_deep: 32,
        se_reduction: 16,
        num_classes: 21,
        seed: 11,
    };
    let bb = BackboneConfig {
        shallow_channels: 32,
        deep_channels: 64,
        stem_depth: 1,
        ..BackboneConfig::for_network(&net)
    };
    (net, bb)
}

fn rand_tensor(rng: &mut Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
    let data = (0..n * c * h * w).map(|_| rng.uniform(1.0)).collect();
    Tensor4::from_vec(n, c, h, w, data).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::from_seed(3);
    let x = rand_tensor(&mut rng, 1, 32, 40, 40);
    let weight: Vec<f32> = (0..64 * 32 * 9).map(|_| rng.uniform(0.05)).collect();
    let weights = Tensor4::from_vec(64, 32, 3, 3, weight).unwrap();
    let params = ConvParams::new(weights, vec![0.0; 64], 1, 1).unwrap();
    c.bench_function("conv3x3_32to64_40x40", |b| {
        b.iter(|| conv2d(&x, &params).unwrap())
    });
}

fn bench_tum(c: &mut Criterion) {
    let (net, bb) = small_net();
    let model = Model::init(&net, &bb).unwrap();
    let mut rng = Rng::from_seed(4);
    let x = rand_tensor(&mut rng, 1, 2 * net.tum_channels, 40, 40);
    c.bench_function("tum_forward_c32_40x40", |b| {
        b.iter(|| tum_forward(&x, &model.tums[0]).unwrap())
    });
}

fn bench_se(c: &mut Criterion) {
    let (net, bb) = small_net();
    let model = Model::init(&net, &bb).unwrap();
    let mut rng = Rng::from_seed(5);
    let x = rand_tensor(&mut rng, 1, net.aggregated_channels(), 40, 40);
    c.bench_function("se_attention_c32_40x40", |b| {
        b.iter(|| se_attention(&x, &model.sfam[0]).unwrap())
    });
}

fn bench_nms(c: &mut Criterion) {
    let mut rng = Rng::from_seed(6);
    let mut cands = random_nms_instance(&mut rng, 64);
    while cands.len() < 200 {
        cands.extend(random_nms_instance(&mut rng, 64));
    }
    cands.truncate(200);
    c.bench_function("soft_nms_200_boxes", |b| {
        b.iter(|| soft_nms_linear(&cands, 0.3, 0.01, 200))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_tum, bench_se, bench_nms
}
criterion_main!(benches);
