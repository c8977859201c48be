//! Teacher-forced training on the copy task, then greedy and beam decoding.

use seqlab::data::{gen_task, BatchStream, TaskConfig, TaskKind};
use seqlab::decode::{decode_pairs, DecodeConfig};
use seqlab::experiment::evaluate;
use seqlab::model::{Model, ModelConfig};
use seqlab::optim::{Adam, OptimConfig};
use seqlab::sampler::{Sampler, SamplerConfig, SamplingMode, Trainer};

fn main() -> seqlab::Result<()> {
    env_logger::init();
    let task = TaskConfig {
        kind: TaskKind::Copy,
        vocab_size: 20,
        min_len: 3,
        max_len: 10,
        count: 2200,
        ..TaskConfig::default()
    };
    let mut corpus = gen_task(&task)?;
    let held_out = corpus.split_off(200);
    let cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        hidden_size: 32,
        filter_size: 64,
        num_heads: 4,
        max_positions: 32,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(cfg, 0)?;
    let mut batches = BatchStream::new(&corpus.pairs, 400, 1)?;
    let sampler = Sampler::new(SamplerConfig {
        mode: SamplingMode::TeacherForcing,
        ..SamplerConfig::default()
    })?;
    let mut trainer = Trainer::new(sampler, Adam::new(OptimConfig::default(), &model.params), 2);
    trainer.train(&mut model, &mut || batches.next_batch(), 800, |r| {
        if r.step % 100 == 0 {
            println!("step {:>4} loss {:.3}", r.step, r.loss);
        }
        Ok(())
    })?;

    for beam_size in [1, 4] {
        let dec = DecodeConfig {
            beam_size,
            max_length: 24,
            ..DecodeConfig::default()
        };
        let report = evaluate(&model, &held_out.pairs, &dec, 400)?;
        println!("\nbeam {beam_size}\n{}", report.summary());
    }
    let dec = DecodeConfig {
        beam_size: 4,
        max_length: 24,
        ..DecodeConfig::default()
    };
    let first = &held_out.pairs[..1];
    let hyp = &decode_pairs(&model, first, &dec, 400)?[0];
    println!("source     {}", corpus.vocab.decode(&first[0].src));
    println!("hypothesis {} (score {:.3})", corpus.vocab.decode(&hyp.tokens), hyp.score);
    Ok(())
}
