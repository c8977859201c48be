//! Precision per decoding step with golden prefixes vs. the model's own
//! prefixes on the noisy mapping task, and an error table usable as an
//! empirical sampling schedule.

use seqlab::data::{gen_task, BatchStream, TaskConfig, TaskKind};
use seqlab::decode::DecodeConfig;
use seqlab::experiment::gap_curve;
use seqlab::metrics::{error_table_from_precision, spearman};
use seqlab::model::{Model, ModelConfig};
use seqlab::optim::{Adam, OptimConfig};
use seqlab::sampler::{Sampler, SamplerConfig, SamplingMode, Trainer};
use seqlab::schedules::ScheduleSpec;

fn main() -> seqlab::Result<()> {
    let task = TaskConfig {
        kind: TaskKind::NoisyMap,
        vocab_size: 30,
        min_len: 8,
        max_len: 24,
        count: 4300,
        ..TaskConfig::default()
    };
    let mut corpus = gen_task(&task)?;
    let held_out = corpus.split_off(300);
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        hidden_size: 32,
        filter_size: 64,
        max_positions: 48,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 0)?;
    let mut batches = BatchStream::new(&corpus.pairs, 600, 1)?;
    let sampler = Sampler::new(SamplerConfig {
        mode: SamplingMode::TeacherForcing,
        ..SamplerConfig::default()
    })?;
    let mut trainer = Trainer::new(sampler, Adam::new(OptimConfig::default(), &model.params), 2);
    trainer.train(&mut model, &mut || batches.next_batch(), 600, |_| Ok(()))?;

    let dec = DecodeConfig {
        beam_size: 1,
        max_length: 40,
        ..DecodeConfig::default()
    };
    let g = gap_curve(&model, &held_out.pairs, &dec, 1200, 3)?;
    let (train, infer) = (g.training.with_min_count(20), g.inference.with_min_count(20));
    println!("step training inference");
    for i in 0..train.len() {
        println!("{:>4} {:>8.3} {:>9.3}", train.steps[i], train.values[i], infer.values[i]);
    }
    let steps: Vec<f64> = train.steps.iter().map(|&s| s as f64).collect();
    println!(
        "rank correlation with step: training {:+.2}, inference {:+.2}",
        spearman(&steps, &train.values),
        spearman(&steps, &infer.values)
    );

    let (rates, _) = error_table_from_precision(&g.inference, 32)?;
    let prior = ScheduleSpec::empirical(rates).build()?;
    println!(
        "empirical golden probability at t = 0, 10, 20: {:.3} {:.3} {:.3}",
        prior.eval(0),
        prior.eval(10),
        prior.eval(20)
    );
    Ok(())
}
