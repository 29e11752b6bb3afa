use criterion::{criterion_group, criterion_main, Criterion};
use dmamba::model::{forward, init_params, predict};
use dmamba::nn::{Mode, Parameters};
use dmamba::rl::batch::{Sampler, StateNorm};
use dmamba::rl::{action_loss, gen_dataset, AdamW, EnvSpec, Policy, TrainConfig};
use dmamba::rng::{stream, Stream};
use dmamba::Tape;

fn train_step(c: &mut Criterion) {
    let spec = EnvSpec::DenseChain { n: 6, horizon: 10 };
    let ds = gen_dataset(
        &spec,
        Policy::Epsilon(0.3),
        200,
        0,
        &mut stream(0, Stream::Generate),
    )
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.model.state_dim = spec.state_dim();
    let mut params = init_params(&cfg.model, &mut stream(0, Stream::Init)).unwrap();
    let sampler = Sampler::new(&ds, StateNorm::identity(cfg.model.state_dim), 1.0).unwrap();
    let mut rng = stream(0, Stream::Data);
    let batch = sampler
        .sample(cfg.model.context_length, cfg.batch_size, &mut rng)
        .unwrap();
    let mut opt = AdamW::new(cfg.optimizer());

    let mut g = c.benchmark_group("desk_model");
    g.sample_size(10);
    g.bench_function("train_update_b64_k10", |b| {
        b.iter(|| {
            let mut grads = Vec::new();
            {
                let tape = Tape::new();
                let pred =
                    forward(&tape, &batch, &params, &cfg.model, Mode::Train, &mut rng).unwrap();
                action_loss(pred, &batch.actions, &batch.mask, cfg.loss_kind())
                    .unwrap()
                    .backward()
                    .unwrap();
                params.visit("", &mut |_, t| {
                    grads.push(tape.param_grad(t).unwrap_or_else(|| vec![0.0; t.numel()]))
                });
            }
            opt.step(&mut params, &mut grads, 1e-4).unwrap()
        })
    });
    let one = sampler
        .sample(cfg.model.context_length, 1, &mut rng)
        .unwrap();
    g.bench_function("predict_b1_k10", |b| {
        b.iter(|| predict(&one, &params, &cfg.model).unwrap())
    });
    g.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
