use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mifuse_core::data::{synthetic_dataset, SynthConfig};
use mifuse_core::mine::{correlated_gaussian, fit, MineFitConfig, NegativeSampling};
use mifuse_core::model::{batch_objective, Example, ModelConfig, ModelParams};
use mifuse_core::train::{Adam, AdamConfig};
use mifuse_core::{Graph, Parameters};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch() -> Vec<Example> {
    let ds = synthetic_dataset(&SynthConfig::default()).unwrap();
    ds.train.iter().take(8).map(Example::from_record).collect()
}

fn forward_backward(c: &mut Criterion) {
    let examples = batch();
    let refs: Vec<&Example> = examples.iter().collect();
    let params =
        ModelParams::init(&ModelConfig::new(16, 16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    c.bench_function("forward_batch8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g).unwrap();
            batch_objective(&mut g, &vars, &refs, 0.25, NegativeSampling::Shift).unwrap()
        })
    });
    c.bench_function("forward_backward_batch8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g).unwrap();
            let (_, loss) =
                batch_objective(&mut g, &vars, &refs, 0.25, NegativeSampling::Shift).unwrap();
            g.backward(loss.total).unwrap();
            g
        })
    });
}

fn training_step(c: &mut Criterion) {
    let examples = batch();
    let refs: Vec<&Example> = examples.iter().collect();
    let params =
        ModelParams::init(&ModelConfig::new(16, 16), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    c.bench_function("adam_step_batch8", |b| {
        b.iter_batched(
            || {
                let adam = Adam::new(
                    AdamConfig::default(),
                    params.named().into_iter().map(|(_, t)| t),
                );
                (params.clone(), adam)
            },
            |(mut p, mut adam)| {
                let mut g = Graph::new();
                let vars = p.bind(&mut g).unwrap();
                let (_, loss) =
                    batch_objective(&mut g, &vars, &refs, 0.25, NegativeSampling::Shift).unwrap();
                g.backward(loss.total).unwrap();
                let grads: Vec<_> = vars.leaves().into_iter().map(|v| g.grad(v)).collect();
                adam.step(p.tensors_mut(), &grads, 1e-4).unwrap();
                p
            },
            BatchSize::SmallInput,
        )
    });
}

fn mine_steps(c: &mut Criterion) {
    let (x, z) = correlated_gaussian(2000, 0.8, 0).unwrap();
    let cfg = MineFitConfig {
        steps: 10,
        eval_shifts: 1,
        ..MineFitConfig::default()
    };
    c.bench_function("mine_fit_10_steps", |b| {
        b.iter(|| fit(&x, &z, &cfg).unwrap().estimate)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward_backward, training_step, mine_steps
}
criterion_main!(benches);
