//! Post-norm encoder-decoder transformer with sinusoidal positions.
//!
//! Training and checking run through [`Graph`], which records every
//! primitive on a tape. Inference uses the cached incremental path in
//! [`infer`], which computes the same values without a tape.

pub mod infer;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub filter_size: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    pub share_embeddings: bool,
    pub share_softmax_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            hidden_size: 64,
            filter_size: 128,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_positions: 128,
            share_embeddings: true,
            share_softmax_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("filter_size", self.filter_size),
            ("num_heads", self.num_heads),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Index of a tensor in [`ModelParams::tensors`].
pub type ParamId = usize;

#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub attn: AttnIds,
    pub ln1: NormIds,
    pub ffn: FfnIds,
    pub ln2: NormIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub self_attn: AttnIds,
    pub ln1: NormIds,
    pub cross_attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub ln3: NormIds,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Which tensor plays which role. Tied roles point at the same id.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    /// `[H, V]` projection; `None` when tied to the target embedding.
    pub out_proj: Option<ParamId>,
    pub enc: Vec<EncLayer>,
    pub dec: Vec<DecLayer>,
}

impl Layout {
    fn build(cfg: &ModelConfig, mut add: impl FnMut(String, Vec<usize>, Init) -> ParamId) -> Self {
        let (v, h, f) = (cfg.vocab_size, cfg.hidden_size, cfg.filter_size);
        let src_embed = add("embed.src".into(), vec![v, h], Init::Uniform);
        let tgt_embed = if cfg.share_embeddings {
            src_embed
        } else {
            add("embed.tgt".into(), vec![v, h], Init::Uniform)
        };
        let out_proj = (!cfg.share_softmax_weights).then(|| add("out_proj".into(), vec![h, v], Init::Uniform));
        let attn = |p: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId| AttnIds {
            wq: add(format!("{p}.wq"), vec![h, h], Init::Uniform),
            bq: add(format!("{p}.bq"), vec![h], Init::Zeros),
            wk: add(format!("{p}.wk"), vec![h, h], Init::Uniform),
            bk: add(format!("{p}.bk"), vec![h], Init::Zeros),
            wv: add(format!("{p}.wv"), vec![h, h], Init::Uniform),
            bv: add(format!("{p}.bv"), vec![h], Init::Zeros),
            wo: add(format!("{p}.wo"), vec![h, h], Init::Uniform),
            bo: add(format!("{p}.bo"), vec![h], Init::Zeros),
        };
        let ffn = |p: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId| FfnIds {
            w1: add(format!("{p}.w1"), vec![h, f], Init::Uniform),
            b1: add(format!("{p}.b1"), vec![f], Init::Zeros),
            w2: add(format!("{p}.w2"), vec![f, h], Init::Uniform),
            b2: add(format!("{p}.b2"), vec![h], Init::Zeros),
        };
        let norm = |p: &str, add: &mut dyn FnMut(String, Vec<usize>, Init) -> ParamId| NormIds {
            gain: add(format!("{p}.gain"), vec![h], Init::Ones),
            bias: add(format!("{p}.bias"), vec![h], Init::Zeros),
        };
        let enc = (0..cfg.num_encoder_layers)
            .map(|l| EncLayer {
                attn: attn(&format!("enc.{l}.self_attn"), &mut add),
                ln1: norm(&format!("enc.{l}.ln1"), &mut add),
                ffn: ffn(&format!("enc.{l}.ffn"), &mut add),
                ln2: norm(&format!("enc.{l}.ln2"), &mut add),
            })
            .collect();
        let dec = (0..cfg.num_decoder_layers)
            .map(|l| DecLayer {
                self_attn: attn(&format!("dec.{l}.self_attn"), &mut add),
                ln1: norm(&format!("dec.{l}.ln1"), &mut add),
                cross_attn: attn(&format!("dec.{l}.cross_attn"), &mut add),
                ln2: norm(&format!("dec.{l}.ln2"), &mut add),
                ffn: ffn(&format!("dec.{l}.ffn"), &mut add),
                ln3: norm(&format!("dec.{l}.ln3"), &mut add),
            })
            .collect();
        Self {
            src_embed,
            tgt_embed,
            out_proj,
            enc,
            dec,
        }
    }
}

/// Sinusoidal position table `[max_positions, H]`.
pub fn sinusoid_table<T: Real>(max_positions: usize, hidden: usize) -> Tensor<T> {
    Tensor::from_fn(&[max_positions, hidden], |idx| {
        let (pos, j) = (idx / hidden, idx % hidden);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / hidden as f64);
        let angle = pos as f64 / rate;
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// All weights of one model. Tied weights are stored once.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    /// Fixed, not trained.
    pub positions: Tensor<T>,
    pub(crate) layout: Layout,
}

impl<T: Real> ModelParams<T> {
    /// Fresh weights: uniform in ±1/√H for matrices, zero biases, unit gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init");
        let bound = 1.0 / (cfg.hidden_size as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let layout = Layout::build(cfg, |name, shape, init| {
            let t = match init {
                Init::Uniform => Tensor::from_fn(&shape, |_| T::of(r.gen_range(-bound..bound))),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, T::one()),
            };
            names.push(name);
            tensors.push(t);
            tensors.len() - 1
        });
        Ok(Self {
            names,
            tensors,
            positions: sinusoid_table(cfg.max_positions, cfg.hidden_size),
            layout,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.push(format!("param.{n}"), t);
        }
        ck
    }

    /// Reads weights written by [`ModelParams::to_checkpoint`].
    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut out = Self::init(cfg, 0)?;
        for (n, t) in out.names.iter().zip(out.tensors.iter_mut()) {
            let loaded: Tensor<T> = ck.require(&format!("param.{n}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{n}` has shape {:?}, config expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(out)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tgt_embedding(&self) -> &Tensor<T> {
        &self.tensors[self.layout.tgt_embed]
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Writes `<stem>.ckpt` and `<stem>.toml` (the model config).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.params.to_checkpoint().save(&dir.join(format!("{stem}.ckpt")))?;
        std::fs::write(dir.join(format!("{stem}.toml")), self.config.to_toml())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg_path = dir.join(format!("{stem}.toml"));
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
        let config = ModelConfig::from_toml(&text)?;
        let ck = Checkpoint::load(&dir.join(format!("{stem}.ckpt")))?;
        let params = ModelParams::from_checkpoint(&config, &ck)?;
        Ok(Self { config, params })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::Length {
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }
}

/// Encoder output plus what the decoder needs to attend over it.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, m, H]`
    pub states: Var,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

/// Dropout streams for one training step.
pub struct StepRngs {
    pub encoder: StreamRng,
    pub decoder: StreamRng,
    pub first_pass: StreamRng,
}

impl StepRngs {
    pub fn for_step(seed: u64, step: u64) -> Self {
        Self {
            encoder: rng::stream_at(seed, "dropout.encoder", step),
            decoder: rng::stream_at(seed, "dropout.decoder", step),
            first_pass: rng::stream_at(seed, "dropout.first_pass", step),
        }
    }
}

fn self_mask(mask: &[bool], batch: usize, len: usize, causal: bool) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * len * len);
    for b in 0..batch {
        for q in 0..len {
            for k in 0..len {
                out.push(mask[b * len + k] && (!causal || k <= q));
            }
        }
    }
    out
}

fn cross_mask(src_mask: &[bool], batch: usize, q_len: usize, k_len: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(batch * q_len * k_len);
    for b in 0..batch {
        for _ in 0..q_len {
            out.extend_from_slice(&src_mask[b * k_len..(b + 1) * k_len]);
        }
    }
    out
}

/// One recorded forward computation over a model.
///
/// Parameters are copied onto the tape on first use. With
/// [`Graph::new`] they are trainable leaves; with [`Graph::frozen`] they
/// are constants.
pub struct Graph<'m, T: Real> {
    pub tape: Tape<T>,
    model: &'m Model<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m, T: Real> Graph<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.tensors.len()],
            trainable: true,
        }
    }

    pub fn frozen(model: &'m Model<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(model)
        }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let value = self.model.params.tensors[id].clone();
        let v = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id] = Some(v);
        v
    }

    /// Per-parameter gradients (`None` for parameters never touched).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|v| v.and_then(|v| grads.get(v))).collect()
    }

    /// Backward from `loss`, returning per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let g = self.tape.backward(loss)?;
        Ok(self.param_grads(&g))
    }

    pub fn tgt_embedding(&mut self) -> Var {
        self.param(self.model.params.layout.tgt_embed)
    }

    /// Raw (unscaled) target embeddings `[B, n, H]` of `ids`.
    pub fn embed_target(&mut self, ids: &[usize], batch: usize) -> Result<Var> {
        let table = self.tgt_embedding();
        let e = self.tape.embedding(table, ids)?;
        self.tape.reshape(e, &[batch, ids.len() / batch, self.model.config.hidden_size])
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    fn dropout(&mut self, x: Var, rng: &mut Option<&mut StreamRng>) -> Var {
        match rng {
            Some(r) => self.tape.dropout(x, self.model.config.dropout, *r),
            None => x,
        }
    }

    fn norm(&mut self, x: Var, ids: &NormIds) -> Result<Var> {
        let (g, b) = (self.param(ids.gain), self.param(ids.bias));
        self.tape.layer_norm(x, g, b, T::of(LN_EPS))
    }

    /// Scales raw embeddings `[B, n, H]` by √H, adds positions, applies dropout.
    fn input_layer(&mut self, raw: Var, rng: &mut Option<&mut StreamRng>) -> Result<Var> {
        let shape = self.tape.shape(raw).to_vec();
        let (n, h) = (shape[1], shape[2]);
        self.model.check_len(n)?;
        let x = self.tape.scale(raw, T::of((h as f64).sqrt()));
        let pe = Tensor::new(vec![n, h], self.model.params.positions.data()[..n * h].to_vec())?;
        let pe = self.tape.constant(pe);
        let x = self.tape.add(x, pe)?;
        Ok(self.dropout(x, rng))
    }

    /// Multi-head attention of `x [B, q, H]` over `mem [B, k, H]`.
    fn attention(&mut self, ids: &AttnIds, x: Var, mem: Var, allowed: &[bool]) -> Result<Var> {
        let model = self.model;
        let cfg = &model.config;
        let (heads, d, h) = (cfg.num_heads, cfg.head_dim(), cfg.hidden_size);
        let xs = self.tape.shape(x).to_vec();
        let ms = self.tape.shape(mem).to_vec();
        let (b, q, k) = (xs[0], xs[1], ms[1]);
        let split = |g: &mut Self, v: Var, len: usize| -> Result<Var> {
            let v = g.tape.reshape(v, &[b, len, heads, d])?;
            g.tape.permute(v, &[0, 2, 1, 3])
        };
        let qv = self.linear(x, ids.wq, ids.bq)?;
        let qv = split(self, qv, q)?;
        let kv = self.linear(mem, ids.wk, ids.bk)?;
        let kv = split(self, kv, k)?;
        let vv = self.linear(mem, ids.wv, ids.bv)?;
        let vv = split(self, vv, k)?;
        let s = self.tape.matmul_nt(qv, kv)?;
        let s = self.tape.scale(s, T::of(1.0 / (d as f64).sqrt()));
        let p = self.tape.attention_softmax(s, allowed)?;
        let c = self.tape.matmul(p, vv)?;
        let c = self.tape.permute(c, &[0, 2, 1, 3])?;
        let c = self.tape.reshape(c, &[b, q, h])?;
        self.linear(c, ids.wo, ids.bo)
    }

    fn ffn(&mut self, ids: &FfnIds, x: Var) -> Result<Var> {
        let y = self.linear(x, ids.w1, ids.b1)?;
        let y = self.tape.relu(y);
        self.linear(y, ids.w2, ids.b2)
    }

    /// Post-norm residual block: `LN(x + dropout(y))`.
    fn residual(&mut self, x: Var, y: Var, ln: &NormIds, rng: &mut Option<&mut StreamRng>) -> Result<Var> {
        let y = self.dropout(y, rng);
        let s = self.tape.add(x, y)?;
        self.norm(s, ln)
    }

    /// Encodes `src [B·m]` with padding mask `src_mask`.
    pub fn encode(&mut self, src: &[usize], src_mask: &[bool], batch: usize, mut rng: Option<&mut StreamRng>) -> Result<Encoded> {
        let model = self.model;
        let cfg = &model.config;
        if batch == 0 || src.len() % batch != 0 || src_mask.len() != src.len() {
            return Err(Error::contract("source ids, mask and batch size disagree"));
        }
        let m = src.len() / batch;
        self.model.check_len(m)?;
        let table = self.param(self.model.params.layout.src_embed);
        let e = self.tape.embedding(table, src)?;
        let e = self.tape.reshape(e, &[batch, m, cfg.hidden_size])?;
        let mut x = self.input_layer(e, &mut rng)?;
        let allowed = self_mask(src_mask, batch, m, false);
        let layers = &model.params.layout.enc;
        for layer in layers {
            let a = self.attention(&layer.attn, x, x, &allowed)?;
            x = self.residual(x, a, &layer.ln1, &mut rng)?;
            let f = self.ffn(&layer.ffn, x)?;
            x = self.residual(x, f, &layer.ln2, &mut rng)?;
        }
        Ok(Encoded {
            states: x,
            batch,
            len: m,
            mask: src_mask.to_vec(),
        })
    }

    /// Final decoder states `[B, n, H]` for raw input embeddings `[B, n, H]`.
    pub fn decode_hidden(&mut self, inputs: Var, enc: &Encoded, dec_mask: &[bool], mut rng: Option<&mut StreamRng>) -> Result<Var> {
        let shape = self.tape.shape(inputs).to_vec();
        let h = self.model.config.hidden_size;
        if shape.len() != 3 || shape[0] != enc.batch || shape[2] != h {
            let es = self.tape.shape(enc.states).to_vec();
            return Err(Error::shape("decode", &shape, &es));
        }
        let (b, n) = (shape[0], shape[1]);
        if dec_mask.len() != b * n {
            return Err(Error::shape("decode mask", &shape, &[dec_mask.len()]));
        }
        let model = self.model;
        let mut y = self.input_layer(inputs, &mut rng)?;
        let self_allowed = self_mask(dec_mask, b, n, true);
        let cross_allowed = cross_mask(&enc.mask, b, n, enc.len);
        let layers = &model.params.layout.dec;
        for layer in layers {
            let a = self.attention(&layer.self_attn, y, y, &self_allowed)?;
            y = self.residual(y, a, &layer.ln1, &mut rng)?;
            let c = self.attention(&layer.cross_attn, y, enc.states, &cross_allowed)?;
            y = self.residual(y, c, &layer.ln2, &mut rng)?;
            let f = self.ffn(&layer.ffn, y)?;
            y = self.residual(y, f, &layer.ln3, &mut rng)?;
        }
        Ok(y)
    }

    /// Output logits `[B, n, V]` from decoder states.
    pub fn project(&mut self, hidden: Var) -> Result<Var> {
        match self.model.params.layout.out_proj {
            None => {
                let e = self.tgt_embedding();
                self.tape.matmul_nt(hidden, e)
            }
            Some(w) => {
                let w = self.param(w);
                self.tape.matmul(hidden, w)
            }
        }
    }

    /// Next-token logits `[B, n, V]` for raw decoder input embeddings.
    pub fn decode_logits(&mut self, inputs: Var, enc: &Encoded, dec_mask: &[bool], rng: Option<&mut StreamRng>) -> Result<Var> {
        let y = self.decode_hidden(inputs, enc, dec_mask, rng)?;
        self.project(y)
    }

    /// Label-smoothed cross-entropy of `logits [B, n, V]` against the batch labels.
    pub fn loss(&mut self, logits: Var, batch: &Batch) -> Result<Var> {
        let v = self.model.config.vocab_size;
        let flat = self.tape.reshape(logits, &[batch.size * batch.dec_len(), v])?;
        let ls = T::of(self.model.config.label_smoothing);
        self.tape.cross_entropy(flat, &batch.labels(), &batch.label_mask(), ls)
    }

    /// Teacher-forced loss with golden decoder inputs. Dropout is active
    /// only when `rngs` is given.
    pub fn teacher_forcing_loss(&mut self, batch: &Batch, rngs: Option<&mut StepRngs>) -> Result<Var> {
        let (enc_rng, dec_rng) = match rngs {
            Some(r) => (Some(&mut r.encoder), Some(&mut r.decoder)),
            None => (None, None),
        };
        let enc = self.encode(&batch.src, &batch.src_mask, batch.size, enc_rng)?;
        let inputs = self.embed_target(&batch.dec_inputs(), batch.size)?;
        let logits = self.decode_logits(inputs, &enc, &batch.dec_mask(), dec_rng)?;
        self.loss(logits, batch)
    }
}
