use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdqat_core::constraints::ConstraintSet;
use pdqat_core::data::{gen_synthetic, SyntheticKind};
use pdqat_core::layers::Mode;
use pdqat_core::optim::AdamState;
use pdqat_core::quantize::{quantize_activations, quantize_weights, QuantSpec};
use pdqat_core::shadow::{ModelSpec, ShadowModel};
use pdqat_core::tensor::Tensor;
use pdqat_core::trainer::{primal_epoch, DualState, TrainRunConfig};

fn quantizer_benches(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let weights = Tensor::from_vec((0..4096).map(|_| rng.gen_range(-2.0..2.0f32)).collect());
    let acts = Tensor::from_vec((0..4096).map(|_| rng.gen_range(-0.2..1.2f32)).collect());
    let mut group = c.benchmark_group("quantize_4096");
    for k in [1u32, 2, 8] {
        group.bench_with_input(BenchmarkId::new("weights", k), &k, |b, &k| {
            b.iter(|| quantize_weights(black_box(&weights), k).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("activations", k), &k, |b, &k| {
            b.iter(|| quantize_activations(black_box(&acts), k).unwrap())
        });
    }
    group.finish();
}

fn model() -> ShadowModel<f32> {
    let spec = ModelSpec::dense_stack(2, &[32, 32, 32], 2);
    let quant = QuantSpec::from_bits(&[0, 2, 2, 0], 2).unwrap();
    ShadowModel::build(spec, quant, 3).unwrap()
}

fn forward_pair_bench(c: &mut Criterion) {
    let mut m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::new(
        vec![64, 2],
        (0..128).map(|_| rng.gen_range(-1.0..1.0f32)).collect(),
    )
    .unwrap();
    c.bench_function("forward_pair_b64", |b| {
        b.iter(|| {
            m.forward_pair(black_box(&x), Mode::Train, false, true)
                .unwrap()
        })
    });
}

fn primal_epoch_bench(c: &mut Criterion) {
    let data = gen_synthetic(SyntheticKind::Blobs, 500, 2, 0.5, 4).unwrap();
    let config = TrainRunConfig {
        epochs: 1,
        batch_size: 64,
        early_stop: false,
        ..Default::default()
    };
    c.bench_function("primal_epoch_1000_samples", |b| {
        b.iter(|| {
            let mut m = model();
            let constraints = ConstraintSet::from_quant_spec(&m.quant).unwrap();
            let duals = DualState::with_initial(&m.interior_ids(), 0.5, 1.0, 0.01);
            let mut adam = AdamState::default();
            primal_epoch(&mut m, &duals, &constraints, &config, &mut adam, &data, 1).unwrap()
        })
    });
}

criterion_group!(
    benches,
    quantizer_benches,
    forward_pair_bench,
    primal_epoch_bench
);
criterion_main!(benches);
