//! The commands behind the `seqlab` binary, usable from code as well.
//!
//! Every command writes its resolved configuration to
//! `<output_dir>/config.toml`; running again from that file reproduces the
//! outputs.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{Precision, RunConfig};
use crate::data::{gen_task, load_tsv_corpus, load_tsv_with_vocab, BatchStream, Pair, Vocab};
use crate::decode::decode_pairs;
use crate::error::{Error, Result};
use crate::experiment::{self, EvalReport, GapCurves};
use crate::model::Model;
use crate::optim::Adam;
use crate::sampler::{Sampler, StepRecord, Trainer};
use crate::schedules::{dump_curves, dump_joint_grid, JointMethod};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::Real;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_STEM: &str = "final";

/// Training and evaluation pairs with their shared vocabulary.
#[derive(Clone, Debug)]
pub struct Data {
    pub vocab: Vocab,
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
}

/// Loads or generates the data and fixes `model.vocab_size` to match it.
pub fn prepare(mut cfg: RunConfig) -> Result<(RunConfig, Data)> {
    let d = &cfg.data;
    let data = match &d.train_tsv {
        Some(path) => {
            let mut train = load_tsv_corpus(path)?;
            let eval = match &d.eval_tsv {
                Some(e) => load_tsv_with_vocab(e, &train.vocab)?,
                None => {
                    if d.eval_count >= train.len() {
                        return Err(Error::config(format!(
                            "eval_count {} leaves no training pairs out of {}",
                            d.eval_count,
                            train.len()
                        )));
                    }
                    train.split_off(d.eval_count)
                }
            };
            Data {
                vocab: train.vocab,
                train: train.pairs,
                eval: eval.pairs,
            }
        }
        None => {
            let mut task = d.task.clone();
            task.seed = cfg.data_seed();
            task.count += d.eval_count;
            let mut all = gen_task(&task)?;
            let eval = all.split_off(d.eval_count);
            Data {
                vocab: all.vocab,
                train: all.pairs,
                eval: eval.pairs,
            }
        }
    };
    if data.train.is_empty() || data.eval.is_empty() {
        return Err(Error::EmptyCorpus("training or evaluation split is empty".into()));
    }
    if cfg.model.vocab_size != data.vocab.len() {
        log::info!("model.vocab_size set to {} to match the data", data.vocab.len());
        cfg.model.vocab_size = data.vocab.len();
    }
    let longest = data
        .train
        .iter()
        .chain(&data.eval)
        .map(|p| (p.src.len() + 1).max(p.tgt.len() + 1))
        .max()
        .unwrap();
    if longest > cfg.model.max_positions {
        return Err(Error::Length {
            len: longest,
            max: cfg.model.max_positions,
        });
    }
    cfg.validate()?;
    Ok((cfg, data))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn echo_config(cfg: &RunConfig) -> Result<PathBuf> {
    let path = out_dir(cfg)?.join("config.toml");
    fs::write(&path, cfg.to_toml())?;
    Ok(path)
}

/// Writes schedule curves and joint grids as CSV; returns the files written.
pub fn schedule_dump(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let s = &cfg.schedule_dump;
    let mut files = vec![echo_config(cfg)?];
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        files.push(p);
        Ok(())
    };
    if !s.training.is_empty() {
        let t = dump_curves(&s.training, s.max_training_step, s.training_stride)?;
        write("schedules_training.csv", t.values_csv())?;
        write("schedules_training_accumulated.csv", t.accumulated_csv())?;
    }
    if !s.decoding.is_empty() {
        let t = dump_curves(&s.decoding, s.max_decoding_step, 1)?;
        write("schedules_decoding.csv", t.values_csv())?;
        write("schedules_decoding_accumulated.csv", t.accumulated_csv())?;
    }
    for (method, name) in [
        (JointMethod::Product, "product"),
        (JointMethod::ArithmeticMean, "arithmetic_mean"),
        (JointMethod::Composite, "composite"),
        (JointMethod::CompositeAlt, "composite_alt"),
    ] {
        let g = dump_joint_grid(&s.joint(method), s.grid_max_i, s.grid_max_t, s.grid_i_stride)?;
        write(&format!("joint_{name}.csv"), g.to_csv())?;
    }
    Ok(files)
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(CHECKPOINT_DIR)
}

/// Path of the checkpoint written at the end of training.
pub fn final_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{FINAL_STEM}.ckpt"))
}

/// Writes `<stem>.ckpt` (weights and optimizer state) and `<stem>.toml`.
fn save_checkpoint<T: Real>(dir: &Path, stem: &str, model: &Model<T>, adam: &Adam<T>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut ck = model.params.to_checkpoint();
    adam.write_state(&model.params.names, &mut ck);
    let path = dir.join(format!("{stem}.ckpt"));
    // write then rename, so an interrupted save never replaces a good file
    let tmp = dir.join(format!("{stem}.ckpt.partial"));
    ck.save(&tmp)?;
    fs::rename(&tmp, &path)?;
    fs::write(dir.join(format!("{stem}.toml")), model.config.to_toml())?;
    fs::write(dir.join("latest"), stem)?;
    Ok(path)
}

fn split_checkpoint_path(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    Ok((dir, stem.to_string()))
}

/// Loads the model stored at `path` (a `.ckpt` file with its `.toml` beside it).
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let (dir, stem) = split_checkpoint_path(path)?;
    Model::load(&dir, &stem)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_step: u64,
    /// Loss of the last step run by this call (`NaN` if none ran).
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Trains to `train.total_steps`. With `resume`, continues from the latest
/// checkpoint in the output directory, keeping step numbering, batches and
/// random streams aligned with an uninterrupted run.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, resume),
        Precision::F64 => train_as::<f64>(cfg, resume),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let (cfg, data) = prepare(cfg.clone())?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg)?;
    fs::write(dir.join("vocab.txt"), data.vocab.tokens().join("\n") + "\n")?;
    let ck_dir = checkpoint_dir(&cfg);
    let sampler = Sampler::new(cfg.sampler.clone())?;
    let (mut model, adam) = if resume {
        let stem = fs::read_to_string(ck_dir.join("latest"))
            .map_err(|e| Error::Checkpoint(format!("nothing to resume in {}: {e}", ck_dir.display())))?;
        let stem = stem.trim();
        let model = Model::<T>::load(&ck_dir, stem)?;
        if model.config != cfg.model {
            return Err(Error::Checkpoint("checkpoint model config differs from the run config".into()));
        }
        let ck = Checkpoint::load(&ck_dir.join(format!("{stem}.ckpt")))?;
        let adam = Adam::read_state(cfg.optim.clone(), &model.params, &ck)?;
        log::info!("resuming from {stem} at step {}", adam.step);
        (model, adam)
    } else {
        let model = Model::<T>::new(cfg.model.clone(), cfg.init_seed())?;
        let adam = Adam::new(cfg.optim.clone(), &model.params);
        (model, adam)
    };
    let start = adam.step;
    let mut trainer = Trainer::new(sampler, adam, cfg.train_seed());
    let mut stream = BatchStream::new(&data.train, cfg.data.batch_tokens, cfg.batch_seed())?;
    stream.skip_batches(start)?;

    let log_path = dir.join("steps.csv");
    let mut log_file = if resume && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{}", StepRecord::CSV_HEADER)?;
        f
    };

    let total = cfg.train.total_steps;
    let mut records = Vec::new();
    while trainer.step() < total {
        let next = ((trainer.step() / cfg.train.checkpoint_every + 1) * cfg.train.checkpoint_every).min(total);
        let log_every = cfg.train.log_every;
        let result = trainer.train(&mut model, &mut || stream.next_batch(), next, |r| {
            if r.step % log_every == 0 || r.step + 1 == total {
                writeln!(log_file, "{}", r.csv_row())?;
                log::info!("step {} loss {:.4} golden {:.3}", r.step, r.loss, r.golden_fraction);
            }
            Ok(())
        });
        match result {
            Ok(r) => records.extend(r),
            Err(e) => {
                log_file.flush()?;
                if let Error::Diverged { step, loss } = &e {
                    let last = fs::read_to_string(ck_dir.join("latest")).unwrap_or_else(|_| "none".into());
                    log::error!("diverged at step {step} (loss {loss}); last good checkpoint: {}", last.trim());
                }
                return Err(e);
            }
        }
        let stem = format!("step_{:08}", trainer.step());
        save_checkpoint(&ck_dir, &stem, &model, &trainer.adam)?;
    }
    log_file.flush()?;
    let final_path = save_checkpoint(&ck_dir, FINAL_STEM, &model, &trainer.adam)?;
    log::info!("final checkpoint {} at step {}", final_path.display(), trainer.step());
    Ok(TrainOutcome {
        final_step: trainer.step(),
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        checkpoint: final_path,
        records,
    })
}

fn with_model<R>(cfg: &RunConfig, checkpoint: &Path, f: impl FnOnce(&Data, &ModelAny) -> Result<R>) -> Result<R> {
    let (_, data) = prepare(cfg.clone())?;
    let model = match cfg.train.precision {
        Precision::F32 => ModelAny::F32(load_model(checkpoint)?),
        Precision::F64 => ModelAny::F64(load_model(checkpoint)?),
    };
    if model.vocab_size() != data.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} entries, data has {}",
            model.vocab_size(),
            data.vocab.len()
        )));
    }
    f(&data, &model)
}

/// A loaded model in either precision.
pub enum ModelAny {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl ModelAny {
    fn vocab_size(&self) -> usize {
        match self {
            ModelAny::F32(m) => m.config.vocab_size,
            ModelAny::F64(m) => m.config.vocab_size,
        }
    }
}

macro_rules! dispatch {
    ($m:expr, $v:ident => $body:expr) => {
        match $m {
            ModelAny::F32($v) => $body,
            ModelAny::F64($v) => $body,
        }
    };
}

/// Writes `gap_training.csv`, `gap_inference.csv` and `gap.csv` for the
/// evaluation split.
pub fn gap_curve(cfg: &RunConfig, checkpoint: &Path) -> Result<GapCurves> {
    echo_config(cfg)?;
    let curves = with_model(
        cfg,
        checkpoint,
        |data, m| dispatch!(m, m => experiment::gap_curve(m, &data.eval, &cfg.decode, cfg.data.batch_tokens, cfg.eval.window)),
    )?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("gap_training.csv"), curves.training.to_csv())?;
    fs::write(dir.join("gap_inference.csv"), curves.inference.to_csv())?;
    fs::write(dir.join("gap.csv"), curves.gap.to_csv())?;
    Ok(curves)
}

/// Scores the evaluation split; writes per-step curves, the hypotheses and a
/// summary.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    echo_config(cfg)?;
    let (report, vocab) = with_model(cfg, checkpoint, |data, m| {
        let r = dispatch!(m, m => experiment::evaluate(m, &data.eval, &cfg.decode, cfg.data.batch_tokens))?;
        Ok((r, data.vocab.clone()))
    })?;
    let dir = out_dir(cfg)?;
    fs::write(dir.join("eval_strict.csv"), report.strict.to_csv())?;
    fs::write(dir.join("eval_fuzzy.csv"), report.fuzzy.to_csv())?;
    fs::write(dir.join("eval_accumulated.csv"), report.accumulated_errors.to_csv())?;
    let hyps: String = report.hypotheses.iter().map(|h| vocab.decode(h) + "\n").collect();
    fs::write(dir.join("eval_hypotheses.txt"), hyps)?;
    fs::write(dir.join("eval_summary.txt"), report.summary())?;
    Ok(report)
}

/// Decodes whitespace-tokenized source lines; returns one output line each.
pub fn decode_lines(cfg: &RunConfig, checkpoint: &Path, lines: &[String]) -> Result<Vec<String>> {
    with_model(cfg, checkpoint, |data, m| {
        let pairs: Vec<Pair> = lines
            .iter()
            .map(|l| Pair {
                src: data.vocab.encode(l),
                tgt: Vec::new(),
            })
            .collect();
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let hyps = dispatch!(m, m => decode_pairs(m, &pairs, &cfg.decode, cfg.data.batch_tokens))?;
        Ok(hyps.iter().map(|h| data.vocab.decode(&h.tokens)).collect())
    })
}
