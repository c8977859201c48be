//! Per-step precision, accumulated errors and a small corpus BLEU.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Pair, NULL};
use crate::decode::{decode_pairs, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Real;

/// A series indexed by decoding step, with the number of samples behind
/// each value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepCurve {
    pub steps: Vec<usize>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl StepCurve {
    pub const CSV_HEADER: &'static str = "step,value,count";

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for ((t, v), c) in self.steps.iter().zip(&self.values).zip(&self.counts) {
            s.push_str(&format!("{t},{v},{c}\n"));
        }
        s
    }

    /// Keeps steps with at least `min_count` samples.
    pub fn with_min_count(&self, min_count: usize) -> StepCurve {
        let mut out = StepCurve::default();
        for i in 0..self.len() {
            if self.counts[i] >= min_count {
                out.steps.push(self.steps[i]);
                out.values.push(self.values[i]);
                out.counts.push(self.counts[i]);
            }
        }
        out
    }

    /// Pointwise `self - other` on shared steps.
    pub fn minus(&self, other: &StepCurve) -> StepCurve {
        let mut out = StepCurve::default();
        for i in 0..self.len() {
            if let Ok(j) = other.steps.binary_search(&self.steps[i]) {
                out.steps.push(self.steps[i]);
                out.values.push(self.values[i] - other.values[j]);
                out.counts.push(self.counts[i].min(other.counts[j]));
            }
        }
        out
    }
}

/// Where the matching window sits relative to step `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// `t - w/2 ..= t + w/2`
    #[default]
    Centered,
    /// `t - (w-1) ..= t`
    Trailing,
}

fn check_pairs(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if refs.is_empty() {
        return Err(Error::contract("no sentence pairs to measure"));
    }
    Ok(())
}

/// Hypothesis truncated or padded with [`NULL`] to `len`.
fn fit(h: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = h.iter().copied().take(len).collect();
    out.resize(len, NULL);
    out
}

fn per_step(hyps: &[Vec<usize>], refs: &[Vec<usize>], hit: impl Fn(&[usize], &[usize], usize) -> bool) -> Result<StepCurve> {
    check_pairs(hyps, refs)?;
    let max = refs.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; max];
    let mut counts = vec![0usize; max];
    for (h, r) in hyps.iter().zip(refs) {
        let h = fit(h, r.len());
        for t in 0..r.len() {
            counts[t] += 1;
            hits[t] += hit(&h, r, t) as usize;
        }
    }
    Ok(StepCurve {
        steps: (0..max).collect(),
        values: hits.iter().zip(&counts).map(|(&a, &c)| a as f64 / c as f64).collect(),
        counts,
    })
}

/// Fraction of pairs whose token at step `t` equals the reference token.
pub fn strict_precision_per_step(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<StepCurve> {
    per_step(hyps, refs, |h, r, t| h[t] != NULL && h[t] == r[t])
}

/// Fraction of pairs whose token at step `t` appears in the reference
/// window around `t`. `window` must be odd for centered windows.
pub fn fuzzy_precision_per_step(hyps: &[Vec<usize>], refs: &[Vec<usize>], window: usize, kind: WindowKind) -> Result<StepCurve> {
    if window == 0 || (kind == WindowKind::Centered && window % 2 == 0) {
        return Err(Error::config(format!("window {window} must be odd and positive")));
    }
    per_step(hyps, refs, |h, r, t| {
        let (lo, hi) = match kind {
            WindowKind::Centered => (t.saturating_sub(window / 2), (t + window / 2).min(r.len() - 1)),
            WindowKind::Trailing => (t.saturating_sub(window - 1), t),
        };
        h[t] != NULL && r[lo..=hi].contains(&h[t])
    })
}

/// Running sum of per-step fuzzy error rates.
pub fn accumulated_error_curve(hyps: &[Vec<usize>], refs: &[Vec<usize>], window: usize) -> Result<StepCurve> {
    let mut c = fuzzy_precision_per_step(hyps, refs, window, WindowKind::Centered)?;
    let mut acc = 0.0;
    for v in c.values.iter_mut() {
        acc += 1.0 - *v;
        *v = acc;
    }
    Ok(c)
}

/// Error rates for steps `0..max_t` from a precision curve. Steps without
/// samples are filled by linear interpolation between their nearest
/// measured neighbours (flat beyond the ends).
pub fn error_table_from_precision(precision: &StepCurve, max_t: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut rates = vec![f64::NAN; max_t];
    let mut counts = vec![0; max_t];
    for i in 0..precision.len() {
        let t = precision.steps[i];
        if t < max_t && precision.counts[i] > 0 {
            rates[t] = 1.0 - precision.values[i];
            counts[t] = precision.counts[i];
        }
    }
    let known: Vec<usize> = (0..max_t).filter(|&t| counts[t] > 0).collect();
    if known.is_empty() {
        return Err(Error::contract("no decoding step has samples"));
    }
    for t in 0..max_t {
        if counts[t] > 0 {
            continue;
        }
        let after = known.iter().position(|&k| k > t);
        rates[t] = match after {
            Some(0) => rates[known[0]],
            None => rates[*known.last().unwrap()],
            Some(j) => {
                let (a, b) = (known[j - 1], known[j]);
                let w = (t - a) as f64 / (b - a) as f64;
                rates[a] * (1.0 - w) + rates[b] * w
            }
        };
    }
    Ok((rates, counts))
}

/// Decodes `pairs`, measures fuzzy precision (window 3) against the target
/// tokens and returns per-step error rates and sample counts for steps
/// `0..max_t`, ready for an empirical schedule.
pub fn empirical_error_table<T: Real>(
    model: &Model<T>,
    pairs: &[Pair],
    decode: &DecodeConfig,
    batch_tokens: usize,
    max_t: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let hyps: Vec<Vec<usize>> = decode_pairs(model, pairs, decode, batch_tokens)?
        .into_iter()
        .map(|h| h.tokens)
        .collect();
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    let p = fuzzy_precision_per_step(&hyps, &refs, 3, WindowKind::Centered)?;
    error_table_from_precision(&p, max_t)
}

/// Fraction of reference tokens reproduced at the same position.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        total += r.len();
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::contract("references contain no tokens"));
    }
    Ok(hit as f64 / total as f64)
}

fn ngram_counts(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for g in s.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over token ids: clipped n-gram precisions up to `max_n`
/// (add-one smoothed for `n ≥ 2`), geometric mean, brevity penalty. A small
/// stand-in for toy tasks; not comparable with standard BLEU scripts.
pub fn corpus_bleu_lite(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        log::warn!("BLEU on an empty hypothesis corpus is 0");
        return Ok(0.0);
    }
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched += c.min(rc.get(g).copied().unwrap_or(0));
                total += c;
            }
        }
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 5;
    const B: usize = 6;
    const C: usize = 7;
    const D: usize = 8;

    #[test]
    fn hand_examples() {
        let r = vec![vec![A, B, C, D]];
        let h = vec![vec![B, A, C, D]];
        assert_eq!(strict_precision_per_step(&h, &r).unwrap().values, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            fuzzy_precision_per_step(&h, &r, 3, WindowKind::Centered).unwrap().values,
            vec![1.0; 4]
        );
        assert_eq!(strict_precision_per_step(&r, &r).unwrap().values, vec![1.0; 4]);
        let other = vec![vec![9, 10, 11, 12]];
        assert_eq!(strict_precision_per_step(&other, &r).unwrap().values, vec![0.0; 4]);
        assert!(strict_precision_per_step(&[], &[]).is_err());
    }

    #[test]
    fn long_hypotheses_are_truncated_and_short_ones_padded() {
        let r = vec![vec![A, B]];
        let long = vec![vec![A, B, C, D, A]];
        let c = fuzzy_precision_per_step(&long, &r, 3, WindowKind::Centered).unwrap();
        assert_eq!(c.steps, vec![0, 1]);
        assert_eq!(c.values, vec![1.0, 1.0]);
        let short = vec![vec![A]];
        assert_eq!(
            fuzzy_precision_per_step(&short, &r, 3, WindowKind::Centered).unwrap().values,
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn trailing_window() {
        let r = vec![vec![A, B, C]];
        let h = vec![vec![B, C, A]];
        // centered: B in {A,B}; C in {A,B,C}; A in {B,C}
        assert_eq!(
            fuzzy_precision_per_step(&h, &r, 3, WindowKind::Centered).unwrap().values,
            vec![1.0, 1.0, 0.0]
        );
        // trailing: B in {A}; C in {A,B}; A in {A,B,C}
        assert_eq!(
            fuzzy_precision_per_step(&h, &r, 3, WindowKind::Trailing).unwrap().values,
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn accumulated_errors_examples() {
        let r = vec![vec![A, B, C, D]; 2];
        assert_eq!(accumulated_error_curve(&r, &r, 3).unwrap().values, vec![0.0; 4]);
        // one of two hypotheses wrong everywhere: error rate 0.5 per step
        let h = vec![vec![A, B, C, D], vec![9, 9, 9, 9]];
        let c = accumulated_error_curve(&h, &r, 3).unwrap();
        assert_eq!(c.values, vec![0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn error_table_interpolates_gaps() {
        let p = StepCurve {
            steps: vec![0, 1, 2, 3, 4],
            values: vec![1.0, 0.8, 0.0, 0.4, 0.5],
            counts: vec![3, 3, 0, 2, 1],
        };
        let (rates, counts) = error_table_from_precision(&p, 7).unwrap();
        let want = [0.0, 0.2, 0.4, 0.6, 0.5, 0.5, 0.5];
        for (a, b) in rates.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(counts, vec![3, 3, 0, 2, 1, 0, 0]);
    }

    #[test]
    fn bleu_examples() {
        let r = vec![vec![A, B, C, D]];
        assert!((corpus_bleu_lite(&r, &r, 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(corpus_bleu_lite(&[vec![]], &r, 4).unwrap(), 0.0);
        // p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1)
        let h = vec![vec![A, B, C, 9]];
        let want = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((corpus_bleu_lite(&h, &r, 4).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.658_037_006_476_246_2).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 2.0]) - 0.894_427_190_999_915_9).abs() < 1e-12);
    }

    #[test]
    fn untrained_model_errs_everywhere() {
        use crate::data::{gen_task, TaskConfig, TaskKind};
        use crate::model::ModelConfig;
        let task = TaskConfig {
            kind: TaskKind::NoisyMap,
            vocab_size: 30,
            min_len: 4,
            max_len: 10,
            count: 40,
            ..Default::default()
        };
        let corpus = gen_task(&task).unwrap();
        let cfg = ModelConfig {
            vocab_size: corpus.vocab.len(),
            hidden_size: 16,
            filter_size: 32,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            ..Default::default()
        };
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let dec = DecodeConfig {
            beam_size: 1,
            max_length: 24,
            ..Default::default()
        };
        let (rates, counts) = empirical_error_table(&model, &corpus.pairs, &dec, 128, 10).unwrap();
        assert_eq!(counts[0], 40);
        for r in &rates {
            assert!(*r > 0.8 && *r <= 1.0, "{rates:?}");
        }
    }

    #[test]
    fn table_round_trips_through_empirical_schedule() {
        use crate::schedules::ScheduleSpec;
        let p = StepCurve {
            steps: vec![0, 1, 2, 3],
            values: vec![0.9, 0.7, 0.0, 0.2],
            counts: vec![5, 5, 0, 5],
        };
        let (rates, _) = error_table_from_precision(&p, 4).unwrap();
        let s = ScheduleSpec::empirical(rates.clone()).build().unwrap();
        for (t, r) in rates.iter().enumerate() {
            assert!((s.eval(t as u64) - (1.0 - r)).abs() < 1e-12);
        }
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        prop::collection::vec(
            (prop::collection::vec(5usize..9, 0..8), prop::collection::vec(5usize..9, 1..8)),
            1..6,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn window_one_is_strict((h, r) in corpus()) {
            let s = strict_precision_per_step(&h, &r).unwrap();
            let f = fuzzy_precision_per_step(&h, &r, 1, WindowKind::Centered).unwrap();
            prop_assert_eq!(s, f);
        }

        #[test]
        fn fuzzy_dominates_strict((h, r) in corpus()) {
            let s = strict_precision_per_step(&h, &r).unwrap();
            let f = fuzzy_precision_per_step(&h, &r, 3, WindowKind::Centered).unwrap();
            for (a, b) in s.values.iter().zip(&f.values) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn accumulated_is_running_error_sum((h, r) in corpus()) {
            let f = fuzzy_precision_per_step(&h, &r, 3, WindowKind::Centered).unwrap();
            let acc = accumulated_error_curve(&h, &r, 3).unwrap();
            let mut run = 0.0;
            for (i, v) in f.values.iter().enumerate() {
                run += 1.0 - v;
                prop_assert_eq!(acc.values[i], run);
                if i > 0 {
                    prop_assert!(acc.values[i] >= acc.values[i - 1]);
                }
            }
        }

        #[test]
        fn bleu_in_unit_interval((h, r) in corpus()) {
            let b = corpus_bleu_lite(&h, &r, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
