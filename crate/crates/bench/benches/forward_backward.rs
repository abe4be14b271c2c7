use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segflow_core::augmentation::{synthesize_next_frame, SynthesisParams};
use segflow_core::losses::{epe_loss_grad, weighted_seg_loss_grad, Reduction};
use segflow_core::{FramePair, Mask, ModelConfig, SegFlowModel, Tensor};

fn frame(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(&[3, 64, 64], (0..3 * 64 * 64).map(|_| rng.random::<f64>()).collect())
}

fn model(channels: &[usize], fusion: bool) -> SegFlowModel {
    SegFlowModel::new(ModelConfig {
        encoder_channels: channels.to_vec(),
        flow_channels: channels.to_vec(),
        fusion_enabled: fusion,
        ..ModelConfig::default()
    })
    .expect("valid config")
}

fn bench_model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pair = FramePair::new(frame(&mut rng), frame(&mut rng));
    let mask = Mask::from_fn(64, 64, |y, x| (20..40).contains(&y) && (16..44).contains(&x));
    let flow = Tensor::full(&[2, 64, 64], 1.5);

    let mut group = c.benchmark_group("model_64x64");
    for (name, channels) in [("small", [8, 12, 16, 24, 32]), ("default", [16, 32, 64, 96, 128])] {
        for fusion in [true, false] {
            let m = model(&channels, fusion);
            let tag = if fusion { "fused" } else { "unfused" };
            group.bench_function(format!("{name}/{tag}/forward"), |b| b.iter(|| m.forward(black_box(&pair)).unwrap()));
            group.bench_function(format!("{name}/{tag}/forward_backward"), |b| {
                b.iter(|| {
                    let pass = m.forward_graph(&pair.frame_t, &pair.frame_t1).unwrap();
                    let (_, ds) = weighted_seg_loss_grad(pass.graph.value(pass.seg_logits), &mask, Reduction::Sum).unwrap();
                    let (_, df) = epe_loss_grad(pass.graph.value(pass.flow_pred), &flow, None, Reduction::Mean).unwrap();
                    m.backward(&pass, Some(ds), Some(df))
                })
            });
        }
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = frame(&mut rng);
    let mask = Mask::from_fn(64, 64, |y, x| (20..40).contains(&y) && (16..44).contains(&x));
    let params = SynthesisParams {
        object_displacement: (2.3, -1.7),
        object_rotation: 0.05,
        exclude_occluded: false,
    };
    c.bench_function("synthesize_next_frame_64x64", |b| b.iter(|| synthesize_next_frame(black_box(&f), &mask, &params).unwrap()));
}

criterion_group!(benches, bench_model, bench_synthesis);
criterion_main!(benches);
