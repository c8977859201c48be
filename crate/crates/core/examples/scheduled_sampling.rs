//! Teacher-forced warm start followed by sampling over decoding steps, with
//! the per-step golden fraction the sampler actually used.

use seqlab::data::{gen_task, BatchStream, TaskConfig, TaskKind};
use seqlab::decode::DecodeConfig;
use seqlab::experiment::evaluate;
use seqlab::model::{Model, ModelConfig};
use seqlab::optim::{Adam, OptimConfig};
use seqlab::sampler::{Sampler, SamplerConfig, SamplingMode, Trainer};
use seqlab::schedules::{JointMethod, JointSpec, ScheduleSpec};

fn main() -> seqlab::Result<()> {
    let task = TaskConfig {
        kind: TaskKind::Reverse,
        vocab_size: 20,
        min_len: 3,
        max_len: 12,
        count: 2200,
        ..TaskConfig::default()
    };
    let mut corpus = gen_task(&task)?;
    let held_out = corpus.split_off(200);
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        hidden_size: 32,
        filter_size: 64,
        max_positions: 32,
        ..ModelConfig::default()
    };
    let dec = DecodeConfig {
        beam_size: 1,
        max_length: 24,
        ..DecodeConfig::default()
    };

    let strategies = [
        (
            "teacher forcing",
            SamplerConfig {
                mode: SamplingMode::TeacherForcing,
                ..SamplerConfig::default()
            },
        ),
        (
            "exponential decay",
            SamplerConfig {
                mode: SamplingMode::DecodingSteps,
                schedule: ScheduleSpec::exponential(0.9),
                ..SamplerConfig::default()
            },
        ),
        (
            "composite",
            SamplerConfig {
                mode: SamplingMode::Joint,
                joint: JointSpec::new(JointMethod::Composite, ScheduleSpec::sigmoid(100.0), ScheduleSpec::exponential(0.9)),
                ..SamplerConfig::default()
            },
        ),
    ];
    for (name, sampler) in strategies {
        let mut model = Model::<f32>::new(cfg.clone(), 0)?;
        let mut batches = BatchStream::new(&corpus.pairs, 400, 1)?;
        let sampler = Sampler::new(SamplerConfig {
            warm_start_steps: 500,
            ..sampler
        })?;
        let mut trainer = Trainer::new(sampler, Adam::new(OptimConfig::default(), &model.params), 2);
        let recs = trainer.train(&mut model, &mut || batches.next_batch(), 900, |_| Ok(()))?;
        let tail = &recs[recs.len() - 50..];
        let golden = tail.iter().map(|r| r.golden_fraction).sum::<f64>() / tail.len() as f64;
        let acc = evaluate(&model, &held_out.pairs, &dec, 400)?.token_accuracy;
        println!(
            "{name:<18} final mode {:<15} golden fraction {golden:.3}  held-out accuracy {acc:.4}",
            tail[0].mode
        );
    }
    Ok(())
}
