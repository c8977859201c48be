//! Per-step precision, accumulated errors and BLEU-lite on a hand-made corpus.

use seqlab::metrics::{
    accumulated_error_curve, corpus_bleu_lite, fuzzy_precision_per_step, strict_precision_per_step, token_accuracy, WindowKind,
};

fn main() -> seqlab::Result<()> {
    let refs = vec![vec![5, 6, 7, 8, 9], vec![5, 5, 6, 6], vec![9, 8, 7]];
    // the first hypothesis drops a token, so everything after it shifts left
    let hyps = vec![vec![5, 7, 8, 9], vec![5, 5, 6, 6], vec![9, 8, 8]];

    let strict = strict_precision_per_step(&hyps, &refs)?;
    let fuzzy = fuzzy_precision_per_step(&hyps, &refs, 3, WindowKind::Centered)?;
    let accum = accumulated_error_curve(&hyps, &refs, 3)?;
    println!("step strict fuzzy accumulated");
    for i in 0..strict.len() {
        println!(
            "{:>4} {:>6.3} {:>5.3} {:>11.3}",
            strict.steps[i], strict.values[i], fuzzy.values[i], accum.values[i]
        );
    }
    println!("token accuracy {:.3}", token_accuracy(&hyps, &refs)?);
    println!("bleu-lite      {:.3}", corpus_bleu_lite(&hyps, &refs, 4)?);
    Ok(())
}
