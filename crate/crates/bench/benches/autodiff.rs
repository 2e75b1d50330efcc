use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use ttalab_core::attack::{sample_task, task_gradients, AttackConfig};
use ttalab_core::data::{make_blobs, DataConfig};
use ttalab_core::nn::{pretrain, BnMode, PretrainConfig};
use ttalab_core::rng::sub_stream;
use ttalab_core::tensor::Tensor;
use ttalab_core::trigger::{Geometry, TriggerSpec};

fn bench_forward_backward(c: &mut Criterion) {
    let data_cfg = DataConfig {
        classes: 3,
        dim: 16,
        n_per_class: 200,
        separation: 6.0,
        severity: 3,
        seed: 5,
    };
    let (clean, shifted) = make_blobs(&data_cfg).unwrap();
    let (model, _) = pretrain(&clean, &PretrainConfig::default()).unwrap();
    let coupled = model.with_bn_mode(BnMode::BatchStats);

    let mut group = c.benchmark_group("mlp_entropy_grad");
    for batch_size in [50usize, 200] {
        let batch = shifted.x.slice_rows(0, batch_size);
        group.bench_with_input(
            BenchmarkId::from_parameter(batch_size),
            &batch,
            |b, batch| {
                b.iter(|| {
                    let mut tape = ttalab_core::tape::Tape::new();
                    let input = tape.leaf(black_box(batch.clone()));
                    let graph = coupled.build_forward(&mut tape, input).unwrap();
                    let loss = ttalab_core::nn::loss_entropy(&mut tape, graph.logits).unwrap();
                    tape.backward(loss).unwrap()
                })
            },
        );
    }
    group.finish();

    let trigger = TriggerSpec::patch(Geometry::square_for(16), 0.15, 1.0);
    let attack_cfg = AttackConfig::default();
    let deltas = Tensor::zeros(vec![shifted.len(), 16]);
    c.bench_function("task_gradients_600_samples", |b| {
        b.iter(|| {
            let mut rng = sub_stream(9, "bench-task");
            let task = sample_task(
                &shifted,
                &trigger,
                attack_cfg.victim_ratio,
                attack_cfg.support_ratio,
                &mut rng,
            )
            .unwrap();
            task_gradients(&coupled, &task, black_box(&deltas), 0, None).unwrap()
        })
    });
}

criterion_group!(benches, bench_forward_backward);
criterion_main!(benches);
