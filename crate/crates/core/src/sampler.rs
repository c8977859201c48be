//! Two-pass scheduled-sampling training.
//!
//! A first decoder pass on golden inputs produces a prediction at every
//! position. Each decoder input is then independently kept golden or
//! replaced by the prediction made one position earlier, with the golden
//! probability given by the configured schedule. The loss comes from a
//! second pass over these mixed inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Encoded, Graph, Model, StepRngs};
use crate::optim::Adam;
use crate::rng::{self, StreamRng};
use crate::schedules::{Joint, JointSpec, Schedule, ScheduleSpec};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Golden inputs only; the second pass is skipped.
    TeacherForcing,
    /// Golden probability `f(i)` over training steps.
    TrainingSteps,
    /// Golden probability `g(t)` over decoding steps.
    #[default]
    DecodingSteps,
    /// Golden probability `h(i, t)`.
    Joint,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::TeacherForcing => "teacher_forcing",
            SamplingMode::TrainingSteps => "training_steps",
            SamplingMode::DecodingSteps => "decoding_steps",
            SamplingMode::Joint => "joint",
        }
    }
}

/// What stands in for a predicted token in the second pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// Probability-weighted sum of target embeddings.
    #[default]
    SoftMix,
    /// Embedding of the most likely token.
    ArgmaxEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    /// Used by `training_steps` and `decoding_steps`.
    pub schedule: ScheduleSpec,
    /// Used by `joint`.
    pub joint: JointSpec,
    pub prediction: Prediction,
    /// Steps of pure teacher forcing before sampling starts. The training
    /// step `i` seen by schedules counts from the end of this phase.
    pub warm_start_steps: u64,
    /// Let the second-pass loss reach the first pass through the predictions.
    pub grad_through_predictions: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::DecodingSteps,
            schedule: ScheduleSpec::exponential(0.99),
            joint: JointSpec::default(),
            prediction: Prediction::SoftMix,
            warm_start_steps: 0,
            grad_through_predictions: false,
        }
    }
}

enum Law {
    Golden,
    Train(Schedule),
    Decode(Schedule),
    Joint(Joint),
}

/// Validated sampler.
pub struct Sampler {
    pub config: SamplerConfig,
    law: Law,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        let law = match config.mode {
            SamplingMode::TeacherForcing => Law::Golden,
            SamplingMode::TrainingSteps => Law::Train(config.schedule.build()?),
            SamplingMode::DecodingSteps => Law::Decode(config.schedule.build()?),
            SamplingMode::Joint => Law::Joint(config.joint.build()?),
        };
        Ok(Self { config, law })
    }

    pub fn in_warm_start(&self, train_step: u64) -> bool {
        matches!(self.law, Law::Golden) || train_step < self.config.warm_start_steps
    }

    /// Golden probability at global training step `train_step` for the
    /// token produced at decoding step `dec_step`.
    pub fn golden_prob(&self, train_step: u64, dec_step: u64) -> f64 {
        if self.in_warm_start(train_step) {
            return 1.0;
        }
        let i = train_step - self.config.warm_start_steps;
        match &self.law {
            Law::Golden => 1.0,
            Law::Train(f) => f.eval(i),
            Law::Decode(g) => g.eval(dec_step),
            Law::Joint(h) => h.eval(i, dec_step),
        }
    }

    /// Per-position golden flags for decoder inputs `[B, n]`, plus the
    /// probabilities used. Input position `p ≥ 1` carries the token from
    /// decoding step `p - 1`; position 0 is the begin sentinel and always
    /// golden. Every position draws, so the stream does not depend on padding.
    pub fn selection_mask(&self, train_step: u64, batch: usize, n: usize, rng: &mut StreamRng) -> (Vec<bool>, Vec<f64>) {
        let probs: Vec<f64> = (0..n)
            .map(|p| if p == 0 { 1.0 } else { self.golden_prob(train_step, p as u64 - 1) })
            .collect();
        let mut mask = Vec::with_capacity(batch * n);
        let mut used = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            for (p, &q) in probs.iter().enumerate() {
                let u: f64 = rng.gen();
                mask.push(p == 0 || u < q);
                used.push(q);
            }
        }
        (mask, used)
    }
}

/// Decoder inputs of the second pass with their selection diagnostics.
#[derive(Clone, Debug)]
pub struct MixedDecoderInputs {
    /// Raw embeddings `[B, n, H]`.
    pub embeddings: Var,
    pub golden: Vec<bool>,
    pub probs: Vec<f64>,
    /// Non-pad input positions after the sentinel: the ones statistics use.
    pub counted: Vec<bool>,
}

impl MixedDecoderInputs {
    pub fn golden_fraction(&self) -> f64 {
        let (g, c) = self
            .golden
            .iter()
            .zip(&self.counted)
            .filter(|(_, &c)| c)
            .fold((0usize, 0usize), |(g, c), (&x, _)| (g + x as usize, c + 1));
        if c == 0 {
            1.0
        } else {
            g as f64 / c as f64
        }
    }

    pub fn mean_p(&self) -> f64 {
        let (s, c) = self
            .probs
            .iter()
            .zip(&self.counted)
            .filter(|(_, &c)| c)
            .fold((0.0, 0usize), |(s, c), (&p, _)| (s + p, c + 1));
        if c == 0 {
            1.0
        } else {
            s / c as f64
        }
    }
}

impl<T: Real> Graph<'_, T> {
    /// First decoder pass on golden inputs; returns one prediction
    /// embedding per position, `[B, n, H]`.
    pub fn first_pass_predictions(
        &mut self,
        enc: &Encoded,
        batch: &Batch,
        prediction: Prediction,
        grad_through: bool,
        rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let inputs = self.embed_target(&batch.dec_inputs(), batch.size)?;
        let logits = self.decode_logits(inputs, enc, &batch.dec_mask(), rng)?;
        let pred = match prediction {
            Prediction::SoftMix => {
                let probs = self.tape.softmax(logits, 2)?;
                let table = self.tgt_embedding();
                self.tape.matmul(probs, table)?
            }
            Prediction::ArgmaxEmbedding => {
                let ids = self.tape.value(logits).argmax_rows();
                self.embed_target(&ids, batch.size)?
            }
        };
        Ok(if grad_through { pred } else { self.tape.detach(pred) })
    }

    /// Loss of the second pass over mixed inputs.
    pub fn two_pass_loss(
        &mut self,
        sampler: &Sampler,
        batch: &Batch,
        train_step: u64,
        rngs: Option<&mut StepRngs>,
        mask_rng: &mut StreamRng,
    ) -> Result<(Var, MixedDecoderInputs)> {
        let (enc_rng, dec_rng, first_rng) = match rngs {
            Some(r) => (Some(&mut r.encoder), Some(&mut r.decoder), Some(&mut r.first_pass)),
            None => (None, None, None),
        };
        let cfg = &sampler.config;
        let enc = self.encode(&batch.src, &batch.src_mask, batch.size, enc_rng)?;
        let pred = self.first_pass_predictions(&enc, batch, cfg.prediction, cfg.grad_through_predictions, first_rng)?;
        let n = batch.dec_len();
        let (golden, probs) = sampler.selection_mask(train_step, batch.size, n, mask_rng);
        let table = self.tgt_embedding();
        let mixed = self.tape.mix_embeddings(table, &batch.dec_inputs(), pred, &golden)?;
        let mixed = self.tape.reshape(mixed, &[batch.size, n, self.model().config.hidden_size])?;
        let logits = self.decode_logits(mixed, &enc, &batch.dec_mask(), dec_rng)?;
        let loss = self.loss(logits, batch)?;
        let counted = batch.dec_mask().iter().enumerate().map(|(i, &ok)| ok && i % n != 0).collect();
        Ok((
            loss,
            MixedDecoderInputs {
                embeddings: mixed,
                golden,
                probs,
                counted,
            },
        ))
    }
}

/// One line of the step log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub golden_fraction: f64,
    pub mean_p: f64,
    pub mode: &'static str,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,loss,golden_fraction,mean_p,mode";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.golden_fraction, self.mean_p, self.mode)
    }
}

/// Owns the optimizer state and the step counter of a training run.
pub struct Trainer<T: Real> {
    pub sampler: Sampler,
    pub adam: Adam<T>,
    /// Seed of the dropout and selection streams.
    pub seed: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(sampler: Sampler, adam: Adam<T>, seed: u64) -> Self {
        Self { sampler, adam, seed }
    }

    /// Global index of the next step.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Computes the loss and gradients for `batch` at the current step and
    /// applies one update.
    pub fn train_step(&mut self, model: &mut Model<T>, batch: &Batch) -> Result<StepRecord> {
        let step = self.adam.step;
        let mut rngs = StepRngs::for_step(self.seed, step);
        let warm = self.sampler.in_warm_start(step);
        let (loss, grads, golden_fraction, mean_p) = {
            let mut g = Graph::new(model);
            let (loss, gf, mp) = if warm {
                (g.teacher_forcing_loss(batch, Some(&mut rngs)), 1.0, 1.0)
            } else {
                let mut mask_rng = rng::stream_at(self.seed, "sampler", step);
                match g.two_pass_loss(&self.sampler, batch, step, Some(&mut rngs), &mut mask_rng) {
                    Ok((l, mix)) => (Ok(l), mix.golden_fraction(), mix.mean_p()),
                    Err(e) => (Err(e), 1.0, 1.0),
                }
            };
            let loss = match loss {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            (value, g.backward(loss)?, gf, mp)
        };
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        let hidden = model.config.hidden_size;
        self.adam.update(&mut model.params, hidden, &grads)?;
        Ok(StepRecord {
            step,
            loss,
            golden_fraction,
            mean_p,
            mode: if warm {
                SamplingMode::TeacherForcing.name()
            } else {
                self.sampler.config.mode.name()
            },
        })
    }

    /// Runs until the global step reaches `until`, drawing batches from `data`.
    pub fn train(
        &mut self,
        model: &mut Model<T>,
        data: &mut dyn FnMut() -> Result<Batch>,
        until: u64,
        mut log: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.adam.step < until {
            let batch = data()?;
            let rec = self.train_step(model, &batch)?;
            log(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}
