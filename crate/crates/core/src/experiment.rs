//! Training-vs-inference gap curves and evaluation reports.

use crate::data::{batches_in_order, Pair};
use crate::decode::{decode_pairs, DecodeConfig};
use crate::error::Result;
use crate::metrics::{self, StepCurve, WindowKind};
use crate::model::{Graph, Model};
use crate::tensor::Real;

/// Teacher-forced argmax prediction at every target position of every pair,
/// end token excluded, in corpus order.
pub fn teacher_forced_predictions<T: Real>(model: &Model<T>, pairs: &[Pair], batch_tokens: usize) -> Result<Vec<Vec<usize>>> {
    let v = model.config.vocab_size;
    let mut out = vec![Vec::new(); pairs.len()];
    for b in batches_in_order(pairs, batch_tokens)? {
        let mut g = Graph::frozen(model);
        let enc = g.encode(&b.src, &b.src_mask, b.size, None)?;
        let inputs = g.embed_target(&b.dec_inputs(), b.size)?;
        let logits = g.decode_logits(inputs, &enc, &b.dec_mask(), None)?;
        let data = g.tape.value(logits).data();
        let n = b.dec_len();
        for (r, &i) in b.index.iter().enumerate() {
            out[i] = (0..pairs[i].tgt.len())
                .map(|p| {
                    let row = &data[(r * n + p) * v..(r * n + p + 1) * v];
                    let mut best = 0;
                    for (j, x) in row.iter().enumerate() {
                        if *x > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
        }
    }
    Ok(out)
}

fn references(pairs: &[Pair]) -> Vec<Vec<usize>> {
    pairs.iter().map(|p| p.tgt.clone()).collect()
}

/// Precision per decoding step with golden prefixes (strict matching) and
/// with the model's own prefixes (fuzzy matching), and their difference.
#[derive(Clone, Debug)]
pub struct GapCurves {
    pub training: StepCurve,
    pub inference: StepCurve,
    /// `training - inference`
    pub gap: StepCurve,
}

pub fn gap_curve<T: Real>(
    model: &Model<T>,
    pairs: &[Pair],
    decode: &DecodeConfig,
    batch_tokens: usize,
    window: usize,
) -> Result<GapCurves> {
    let refs = references(pairs);
    let tf = teacher_forced_predictions(model, pairs, batch_tokens)?;
    let training = metrics::strict_precision_per_step(&tf, &refs)?;
    let hyps: Vec<Vec<usize>> = decode_pairs(model, pairs, decode, batch_tokens)?
        .into_iter()
        .map(|h| h.tokens)
        .collect();
    let inference = metrics::fuzzy_precision_per_step(&hyps, &refs, window, WindowKind::Centered)?;
    let gap = training.minus(&inference);
    Ok(GapCurves { training, inference, gap })
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub pairs: usize,
    pub token_accuracy: f64,
    pub bleu: f64,
    pub strict: StepCurve,
    pub fuzzy: StepCurve,
    pub accumulated_errors: StepCurve,
    /// Hypotheses that hit `max_length` without an end token.
    pub unfinished: usize,
    pub hypotheses: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let last = self.accumulated_errors.values.last().copied().unwrap_or(0.0);
        format!(
            "pairs            {}\ntoken accuracy   {:.4}\nbleu-lite        {:.4}\nunfinished       {}\nsteps measured   {}\naccum. errors    {:.3}\n",
            self.pairs,
            self.token_accuracy,
            self.bleu,
            self.unfinished,
            self.strict.len(),
            last
        )
    }
}

/// Decodes `pairs` and scores the hypotheses against the targets.
pub fn evaluate<T: Real>(model: &Model<T>, pairs: &[Pair], decode: &DecodeConfig, batch_tokens: usize) -> Result<EvalReport> {
    let refs = references(pairs);
    let decoded = decode_pairs(model, pairs, decode, batch_tokens)?;
    let unfinished = decoded.iter().filter(|h| !h.finished).count();
    let hyps: Vec<Vec<usize>> = decoded.into_iter().map(|h| h.tokens).collect();
    Ok(EvalReport {
        pairs: pairs.len(),
        token_accuracy: metrics::token_accuracy(&hyps, &refs)?,
        bleu: metrics::corpus_bleu_lite(&hyps, &refs, 4)?,
        strict: metrics::strict_precision_per_step(&hyps, &refs)?,
        fuzzy: metrics::fuzzy_precision_per_step(&hyps, &refs, 3, WindowKind::Centered)?,
        accumulated_errors: metrics::accumulated_error_curve(&hyps, &refs, 3)?,
        unfinished,
        hypotheses: hyps,
    })
}
