//! Tape-free incremental decoding.
//!
//! Self-attention keys and values are cached per hypothesis and the
//! cross-attention projections of the encoder output are computed once.
//! Every reduction runs in the same order as on the tape, so a step here
//! reproduces the matching row of a full teacher-forced forward.

use super::{AttnIds, Graph, Model, NormIds, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Real, Tensor};

/// Encoder output prepared for decoding.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
    /// Per decoder layer, cross-attention keys and values `[B, m, H]`.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

/// One partial hypothesis: the source row it belongs to and its cache.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    pub source: usize,
    /// Number of tokens fed so far.
    pub pos: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

pub struct Decoder<'m, T: Real> {
    model: &'m Model<T>,
    /// Output projection laid out `[H, V]`.
    out_w: Vec<T>,
}

fn linear<T: Real>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::zero(); rows * n];
    kernels::gemm_nn(rows, k, n, x, w.data(), &mut y);
    for row in y.chunks_exact_mut(n) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v = *v + bb;
        }
    }
    y
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        let p = &model.params;
        let out_w = match p.layout.out_proj {
            Some(id) => p.tensors[id].data().to_vec(),
            None => {
                let e = &p.tensors[p.layout.tgt_embed];
                kernels::transpose(e.shape()[0], e.shape()[1], e.data())
            }
        };
        Self { model, out_w }
    }

    pub fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn t(&self, id: usize) -> &'m Tensor<T> {
        &self.model.params.tensors[id]
    }

    /// Runs the encoder on `src [B·m]` and projects cross-attention keys and values.
    pub fn encode(&self, src: &[usize], src_mask: &[bool], batch: usize) -> Result<Memory<T>> {
        let mut g = Graph::frozen(self.model);
        let enc = g.encode(src, src_mask, batch, None)?;
        let states = g.tape.value(enc.states).data();
        let rows = batch * enc.len;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for layer in &self.model.params.layout.dec {
            let a = &layer.cross_attn;
            keys.push(linear(states, rows, self.t(a.wk), self.t(a.bk)));
            values.push(linear(states, rows, self.t(a.wv), self.t(a.bv)));
        }
        Ok(Memory {
            batch,
            len: enc.len,
            mask: src_mask.to_vec(),
            keys,
            values,
        })
    }

    /// Empty hypothesis for source row `source`.
    pub fn start(&self, source: usize) -> DecoderState<T> {
        let n = self.model.params.layout.dec.len();
        DecoderState {
            source,
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn norm(&self, x: &mut [T], ids: &NormIds) {
        let h = self.model.config.hidden_size;
        let (g, b) = (self.t(ids.gain).data(), self.t(ids.bias).data());
        let mut scratch = vec![T::zero(); h];
        for row in x.chunks_exact_mut(h) {
            let input = row.to_vec();
            kernels::layer_norm_row(&input, g, b, T::of(LN_EPS), row, &mut scratch);
        }
    }

    /// Attention of one query row over `len` cached keys/values `[len, H]`
    /// (row stride `H`), restricted to `allowed`.
    fn attend(&self, q: &[T], keys: &[T], values: &[T], allowed: &[bool], out: &mut [T]) {
        let cfg = &self.model.config;
        let (heads, d, h) = (cfg.num_heads, cfg.head_dim(), cfg.hidden_size);
        let len = allowed.len();
        let scale = T::of(1.0 / (d as f64).sqrt());
        let mut scores = vec![T::zero(); len];
        let mut probs = vec![T::zero(); len];
        for hd in 0..heads {
            let qh = &q[hd * d..(hd + 1) * d];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &keys[j * h + hd * d..j * h + (hd + 1) * d];
                let mut acc = T::zero();
                for (&a, &b) in qh.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            kernels::masked_softmax_row(&scores, allowed, &mut probs);
            let oh = &mut out[hd * d..(hd + 1) * d];
            oh.fill(T::zero());
            for (j, &p) in probs.iter().enumerate() {
                let vj = &values[j * h + hd * d..j * h + (hd + 1) * d];
                for (o, &v) in oh.iter_mut().zip(vj) {
                    *o += p * v;
                }
            }
        }
    }

    fn self_attention(&self, layer: usize, ids: &AttnIds, x: &[T], states: &mut [DecoderState<T>]) -> Vec<T> {
        let h = self.model.config.hidden_size;
        let rows = states.len();
        let q = linear(x, rows, self.t(ids.wq), self.t(ids.bq));
        let k = linear(x, rows, self.t(ids.wk), self.t(ids.bk));
        let v = linear(x, rows, self.t(ids.wv), self.t(ids.bv));
        let mut ctx = vec![T::zero(); rows * h];
        for (r, st) in states.iter_mut().enumerate() {
            st.keys[layer].extend_from_slice(&k[r * h..(r + 1) * h]);
            st.values[layer].extend_from_slice(&v[r * h..(r + 1) * h]);
            let allowed = vec![true; st.pos + 1];
            self.attend(
                &q[r * h..(r + 1) * h],
                &st.keys[layer],
                &st.values[layer],
                &allowed,
                &mut ctx[r * h..(r + 1) * h],
            );
        }
        linear(&ctx, rows, self.t(ids.wo), self.t(ids.bo))
    }

    fn cross_attention(&self, layer: usize, ids: &AttnIds, x: &[T], mem: &Memory<T>, states: &[DecoderState<T>]) -> Vec<T> {
        let h = self.model.config.hidden_size;
        let (rows, m) = (states.len(), mem.len);
        let q = linear(x, rows, self.t(ids.wq), self.t(ids.bq));
        let mut ctx = vec![T::zero(); rows * h];
        for (r, st) in states.iter().enumerate() {
            let span = st.source * m * h..(st.source + 1) * m * h;
            let allowed = &mem.mask[st.source * m..(st.source + 1) * m];
            self.attend(
                &q[r * h..(r + 1) * h],
                &mem.keys[layer][span.clone()],
                &mem.values[layer][span],
                allowed,
                &mut ctx[r * h..(r + 1) * h],
            );
        }
        linear(&ctx, rows, self.t(ids.wo), self.t(ids.bo))
    }

    /// Feeds `tokens[r]` to `states[r]` and returns next-token
    /// log-probabilities, flat `[R, V]`.
    pub fn step(&self, mem: &Memory<T>, states: &mut [DecoderState<T>], tokens: &[usize]) -> Result<Vec<T>> {
        let cfg = &self.model.config;
        let (h, vsz) = (cfg.hidden_size, cfg.vocab_size);
        let rows = states.len();
        if tokens.len() != rows {
            return Err(Error::shape("decoder step", &[rows], &[tokens.len()]));
        }
        if let Some(st) = states.iter().find(|s| s.source >= mem.batch) {
            return Err(Error::contract(format!("state refers to source {} of {}", st.source, mem.batch)));
        }
        if let Some(st) = states.iter().find(|s| s.pos >= cfg.max_positions) {
            return Err(Error::Length {
                len: st.pos + 1,
                max: cfg.max_positions,
            });
        }
        let p = &self.model.params;
        let table = p.tensors[p.layout.tgt_embed].data();
        let scale = T::of((h as f64).sqrt());
        let mut x = vec![T::zero(); rows * h];
        for (r, (&tok, st)) in tokens.iter().zip(states.iter()).enumerate() {
            if tok >= vsz {
                return Err(Error::contract(format!("token id {tok} >= vocab size {vsz}")));
            }
            let pe = &p.positions.data()[st.pos * h..(st.pos + 1) * h];
            for j in 0..h {
                x[r * h + j] = table[tok * h + j] * scale + pe[j];
            }
        }
        for (l, layer) in p.layout.dec.iter().enumerate() {
            let a = self.self_attention(l, &layer.self_attn, &x, states);
            x.iter_mut().zip(&a).for_each(|(v, &d)| *v = *v + d);
            self.norm(&mut x, &layer.ln1);
            let c = self.cross_attention(l, &layer.cross_attn, &x, mem, states);
            x.iter_mut().zip(&c).for_each(|(v, &d)| *v = *v + d);
            self.norm(&mut x, &layer.ln2);
            let mut f = linear(&x, rows, self.t(layer.ffn.w1), self.t(layer.ffn.b1));
            f.iter_mut().for_each(|v| *v = v.max(T::zero()));
            let f = linear(&f, rows, self.t(layer.ffn.w2), self.t(layer.ffn.b2));
            x.iter_mut().zip(&f).for_each(|(v, &d)| *v = *v + d);
            self.norm(&mut x, &layer.ln3);
        }
        for st in states.iter_mut() {
            st.pos += 1;
        }
        let mut logits = vec![T::zero(); rows * vsz];
        kernels::gemm_nn(rows, h, vsz, &x, &self.out_w, &mut logits);
        for row in logits.chunks_exact_mut(vsz) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|z| *z = *z - lse);
        }
        Ok(logits)
    }
}
