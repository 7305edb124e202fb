use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use schemapro::compose::AblationConfig;
use schemapro::eval::{evaluate_task, DecodeOptions, Setting};
use schemapro::experiment::{Experiment, ExperimentConfig, ModelShape, PromptShape};
use schemapro::harness::{mean_loss, train, Mode, TrainConfig};
use schemapro::ingest::Split;
use schemapro::par::Exec;
use schemapro::synth;

fn experiment() -> Experiment {
    let suite = synth::generate(&synth::SynthConfig {
        train_per_task: 64,
        test_per_task: 32,
        seed: 0,
    });
    let mut data = BTreeMap::new();
    for (t, r) in suite.train {
        data.insert((t, Split::Train), r);
    }
    for (t, r) in suite.test {
        data.insert((t, Split::Test), r);
    }
    let cfg = ExperimentConfig {
        taxonomy: Default::default(),
        schemas: Default::default(),
        datasets: Default::default(),
        templates: None,
        model: ModelShape::default(),
        prompts: PromptShape::default(),
        pretrain: "toy".into(),
        fewshot: "toy_fewshot".into(),
        finetune: "toy".into(),
        ablation: AblationConfig::FULL,
        mode: Mode::Schemapro,
        seeds: vec![0],
        cap: 700_000,
        k: 32,
        max_vocab: 1000,
        out: None,
    };
    Experiment::assemble(cfg, suite.registry, suite.taxonomy, BTreeMap::new(), data).unwrap()
}

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_all(c: &mut Criterion) {
    let exp = experiment();
    let mut ckpt = exp.init_checkpoint(0, AblationConfig::FULL).unwrap();
    let tokenizer = ckpt.tokenizer.clone();
    let encoder = exp.encoder(&tokenizer, AblationConfig::FULL);
    let records = exp.train_records("a1").unwrap().to_vec();
    let examples = encoder.training_examples(&mut ckpt.table, &records, 0).unwrap();
    encoder.ensure_groups(&mut ckpt.table, "b1").unwrap();

    let mut group = c.benchmark_group("loss_64_examples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| mean_loss(&ckpt.model, &ckpt.table, &examples, exec).unwrap()));
    }
    group.finish();

    let cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::toy()
    }
    .with_steps(1);
    let mut group = c.benchmark_group("train_step_batch_16");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter_batched(
                || ckpt.clone(),
                |mut ck| train(&mut ck, &examples, &cfg, exec).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();

    let test = exp.eval_records("b1").unwrap();
    let mut group = c.benchmark_group("rank_options_32_examples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                evaluate_task(&ckpt, &encoder, "b1", test, Setting::ZeroShot, None, DecodeOptions::default(), 0, exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
