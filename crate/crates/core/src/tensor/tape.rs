use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, MatmulPlan};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of an elementwise binary op lines up with the left.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// Right operand repeats over the leading dimensions of the left.
    Suffix,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    AttnSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Rc<Vec<usize>>,
    },
    MixEmbedding {
        table: Var,
        ids: Rc<Vec<usize>>,
        pred: Var,
        golden: Rc<Vec<bool>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        valid: Rc<Vec<bool>>,
        smoothing: T,
        count: usize,
        probs: Vec<T>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Node ids are assigned in
/// creation order, so every node's parents precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, or `None` when no path connects it to the root.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of a node, zero-filled when it does not influence the root.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn suffix_bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Bcast::Suffix)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// `a[..,M,K] · b[K,N]` or batched `a[..,M,K] · b[..,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..,M,K] · b[..,N,K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b), trans_b)?;
        let mut out = vec![T::zero(); plan.out_len()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor {
            shape: plan.out_shape.clone(),
            data: out,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, plan }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Bcast)> {
        let bcast = suffix_bcast(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = match bcast {
            Bcast::Same => av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Suffix => {
                let n = bv.len();
                let mut out = Vec::with_capacity(av.len());
                for row in av.data.chunks_exact(n) {
                    out.extend(row.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)));
                }
                out
            }
        };
        Ok((
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            bcast,
        ))
    }

    /// Elementwise sum; `b` may match `a` or a suffix of its shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b, bcast }, rg))
    }

    /// Elementwise product; `b` may match `a` or a suffix of its shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| x * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|&x| x.max(T::zero())).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let av = self.value(a);
        if !av.all_finite() {
            return Err(Error::Numeric("softmax input".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); av.len()];
        let mut lane = vec![T::zero(); len];
        let mut lane_out = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    lane[j] = av.data[base + j * inner];
                }
                kernels::softmax_lane(&lane, &mut lane_out);
                for j in 0..len {
                    out[base + j * inner] = lane_out[j];
                }
            }
        }
        let value = Tensor { shape, data: out };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Softmax over the key axis of attention scores `[B, heads, Q, K]`,
    /// restricted to keys where `allowed[b, q, k]` holds. Rows without any
    /// allowed key produce all-zero weights.
    pub fn attention_softmax(&mut self, scores: Var, allowed: &[bool]) -> Result<Var> {
        let shape = self.shape(scores).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("attention_softmax", &shape, &[0, 0, 0, 0]));
        }
        let (b, h, q, k) = (shape[0], shape[1], shape[2], shape[3]);
        if allowed.len() != b * q * k {
            return Err(Error::shape("attention_softmax mask", &shape, &[allowed.len()]));
        }
        let sv = &self.nodes[scores.0].value.data;
        let mut out = vec![T::zero(); sv.len()];
        for bi in 0..b {
            for hi in 0..h {
                for qi in 0..q {
                    let row = ((bi * h + hi) * q + qi) * k;
                    let mrow = &allowed[(bi * q + qi) * k..(bi * q + qi + 1) * k];
                    kernels::masked_softmax_row(&sv[row..row + k], mrow, &mut out[row..row + k]);
                }
            }
        }
        let value = Tensor { shape, data: out };
        let rg = self.rg(scores);
        Ok(self.push(value, Op::AttnSoftmax { a: scores }, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().unwrap();
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[gain.0].value.data;
        let bv = &self.nodes[bias.0].value.data;
        let rows = xv.len() / h;
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let span = r * h..(r + 1) * h;
            rstd[r] = kernels::layer_norm_row(&xv[span.clone()], gv, bv, eps, &mut out[span.clone()], &mut xhat[span]);
        }
        let value = Tensor { shape, data: out };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Rows of `table[V, H]` selected by `ids`; output `[ids.len(), H]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(Error::shape("embedding", &tshape, &[0, 0]));
        }
        let (v, h) = (tshape[0], tshape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("token id {bad} >= vocab size {v}")));
        }
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&tv[i * h..(i + 1) * h]);
        }
        let value = Tensor {
            shape: vec![ids.len(), h],
            data,
        };
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            rg,
        ))
    }

    /// Decoder inputs mixing golden and predicted embeddings.
    ///
    /// `ids` and `golden` are `[B·n]`, `pred` is `[B, n, H]` holding the
    /// prediction made at each position. Output row `(b, t)` is
    /// `table[ids[b,t]]` where `golden[b,t]`, otherwise `pred[b, t-1]`: the
    /// prediction emitted at position `t-1` is consumed at position `t`.
    /// Position 0 of every row must be golden. Output shape `[B·n, H]`.
    pub fn mix_embeddings(&mut self, table: Var, ids: &[usize], pred: Var, golden: &[bool]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        let pshape = self.shape(pred).to_vec();
        if tshape.len() != 2 || pshape.len() != 3 || pshape[2] != tshape[1] {
            return Err(Error::shape("mix_embeddings", &tshape, &pshape));
        }
        let (steps, h) = (pshape[1], tshape[1]);
        let n = pshape[0] * steps;
        if ids.len() != n || golden.len() != n {
            return Err(Error::shape("mix_embeddings ids", &pshape, &[ids.len(), golden.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tshape[0]) {
            return Err(Error::contract(format!("token id {bad} >= vocab size {}", tshape[0])));
        }
        let tv = &self.nodes[table.0].value.data;
        let pv = &self.nodes[pred.0].value.data;
        let mut data = Vec::with_capacity(n * h);
        for r in 0..n {
            if golden[r] {
                data.extend_from_slice(&tv[ids[r] * h..(ids[r] + 1) * h]);
            } else {
                if r % steps == 0 {
                    return Err(Error::contract("position 0 must be golden"));
                }
                data.extend_from_slice(&pv[(r - 1) * h..r * h]);
            }
        }
        let value = Tensor { shape: vec![n, h], data };
        let rg = self.rg(table) || self.rg(pred);
        Ok(self.push(
            value,
            Op::MixEmbedding {
                table,
                ids: Rc::new(ids.to_vec()),
                pred,
                golden: Rc::new(golden.to_vec()),
            },
            rg,
        ))
    }

    /// Label-smoothed cross-entropy of `logits[N, V]`, averaged over rows
    /// with `valid[r]`. The smoothing mass is spread uniformly over all `V`
    /// classes, so the target distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || valid.len() != shape[0] {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::contract("label smoothing must lie in [0, 1)"));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().zip(valid).filter(|(_, &ok)| ok).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(Error::contract(format!("target {bad} >= vocab size {v}")));
        }
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::contract("cross-entropy over zero non-pad positions is undefined"));
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let uni = smoothing / T::of(v as f64);
        let hit = T::one() - smoothing;
        for r in 0..shape[0] {
            if !valid[r] {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            let mut loss = hit * (lse - row[targets[r]]);
            if smoothing > T::zero() {
                let mean_logit = row.iter().copied().sum::<T>();
                loss += uni * (T::of(v as f64) * lse - mean_logit);
            }
            total += loss;
            for (p, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let value = Tensor::scalar(total / T::of(count as f64));
        if !value.all_finite() {
            return Err(Error::Numeric("cross-entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                valid: Rc::new(valid.to_vec()),
                smoothing,
                count,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout with keep-probability `1-p`. Returns `a` unchanged
    /// when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let av = &self.nodes[a.0].value;
        let mask: Vec<T> = (0..av.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Dropout { a, mask }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(&self.nodes[a.0].value.data, &shape, perm);
        let value = Tensor { shape: out_shape, data };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Reverse sweep from a scalar root. Gradients are kept for leaves only;
    /// contributions from multiple uses accumulate additively.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value.data;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (a, b) = (*a, *b);
                let mut ga = self.rg(a).then(|| grads[a.0].take().unwrap_or_else(|| vec![T::zero(); len(a)]));
                let mut gb = if self.rg(b) && b != a {
                    Some(grads[b.0].take().unwrap_or_else(|| vec![T::zero(); len(b)]))
                } else {
                    None
                };
                if a == b && self.rg(b) {
                    // x·x: both contributions land in the same buffer
                    let mut tmp = vec![T::zero(); len(b)];
                    plan.backward(val(a), val(b), g, ga.as_deref_mut(), Some(&mut tmp));
                    if let Some(ga) = ga.as_mut() {
                        for (x, y) in ga.iter_mut().zip(tmp) {
                            *x += y;
                        }
                    }
                } else {
                    plan.backward(val(a), val(b), g, ga.as_deref_mut(), gb.as_deref_mut());
                }
                if let Some(ga) = ga {
                    grads[a.0] = Some(ga);
                }
                if let Some(gb) = gb {
                    grads[b.0] = Some(gb);
                }
            }
            Op::Add { a, b, bcast } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], len(*a), |ga| {
                        for (x, &y) in ga.iter_mut().zip(g) {
                            *x += y;
                        }
                    });
                }
                if self.rg(*b) {
                    let n = len(*b);
                    accumulate(&mut grads[b.0], n, |gb| match bcast {
                        Bcast::Same => {
                            for (x, &y) in gb.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        Bcast::Suffix => {
                            for row in g.chunks_exact(n) {
                                for (x, &y) in gb.iter_mut().zip(row) {
                                    *x += y;
                                }
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b, bcast } => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], av.len(), |ga| {
                        for (i, x) in ga.iter_mut().enumerate() {
                            let bi = match bcast {
                                Bcast::Same => i,
                                Bcast::Suffix => i % n,
                            };
                            *x += g[i] * bv[bi];
                        }
                    });
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], n, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            let bi = match bcast {
                                Bcast::Same => i,
                                Bcast::Suffix => i % n,
                            };
                            gb[bi] += gi * av[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                accumulate(&mut grads[a.0], len(*a), |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *c;
                    }
                });
            }
            Op::Relu { a } => {
                let av = val(*a);
                accumulate(&mut grads[a.0], av.len(), |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax { a, outer, len: l, inner } => {
                let y = &node.value.data;
                let (outer, l, inner) = (*outer, *l, *inner);
                accumulate(&mut grads[a.0], y.len(), |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * l * inner + i;
                            let mut dot = T::zero();
                            for j in 0..l {
                                dot += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..l {
                                let idx = base + j * inner;
                                ga[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::AttnSoftmax { a } => {
                let y = &node.value.data;
                let k = *node.value.shape.last().unwrap();
                accumulate(&mut grads[a.0], y.len(), |ga| {
                    for ((yr, gr), gar) in y.chunks_exact(k).zip(g.chunks_exact(k)).zip(ga.chunks_exact_mut(k)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..k {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let h = len(*gain);
                let gv = val(*gain);
                let hn = T::of(h as f64);
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], xhat.len(), |gx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * h..(r + 1) * h];
                            let xr = &xhat[r * h..(r + 1) * h];
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..h {
                                let d = gr[j] * gv[j];
                                m1 += d;
                                m2 += d * xr[j];
                            }
                            m1 /= hn;
                            m2 /= hn;
                            for j in 0..h {
                                gx[r * h + j] += rs * (gr[j] * gv[j] - m1 - xr[j] * m2);
                            }
                        }
                    });
                }
                if self.rg(*gain) {
                    accumulate(&mut grads[gain.0], h, |gg| {
                        for (gr, xr) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                            for j in 0..h {
                                gg[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if self.rg(*bias) {
                    accumulate(&mut grads[bias.0], h, |gb| {
                        for gr in g.chunks_exact(h) {
                            for j in 0..h {
                                gb[j] += gr[j];
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let h = self.shape(*table)[1];
                accumulate(&mut grads[table.0], len(*table), |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[i * h + j] += g[r * h + j];
                        }
                    }
                });
            }
            Op::MixEmbedding {
                table, ids, pred, golden, ..
            } => {
                let h = self.shape(*table)[1];
                if self.rg(*table) {
                    accumulate(&mut grads[table.0], len(*table), |gt| {
                        for (r, &i) in ids.iter().enumerate() {
                            if golden[r] {
                                for j in 0..h {
                                    gt[i * h + j] += g[r * h + j];
                                }
                            }
                        }
                    });
                }
                if self.rg(*pred) {
                    accumulate(&mut grads[pred.0], len(*pred), |gp| {
                        for r in 0..ids.len() {
                            if !golden[r] {
                                for j in 0..h {
                                    gp[(r - 1) * h + j] += g[r * h + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                smoothing,
                count,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::of(*count as f64);
                let uni = *smoothing / T::of(v as f64);
                let hit = T::one() - *smoothing;
                accumulate(&mut grads[logits.0], probs.len(), |gl| {
                    for r in 0..targets.len() {
                        if !valid[r] {
                            continue;
                        }
                        for j in 0..v {
                            let mut q = uni;
                            if j == targets[r] {
                                q += hit;
                            }
                            gl[r * v + j] += scale * (probs[r * v + j] - q);
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                accumulate(&mut grads[a.0], mask.len(), |ga| {
                    for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                });
            }
            Op::Reshape { a } => {
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &node.value.shape, &inv);
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for (x, y) in ga.iter_mut().zip(back) {
                        *x += y;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        accumulate(&mut grads[p.0], len(p), |gp| {
                            for o in 0..outer {
                                for j in 0..plen {
                                    gp[o * plen + j] += g[o * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += plen;
                }
            }
            Op::Sum { a } => {
                accumulate(&mut grads[a.0], len(*a), |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
        }
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    if rank == 0 || data.is_empty() {
        out.extend_from_slice(data);
        return out;
    }
    let (last, last_stride) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0;
    loop {
        out.extend((0..last).map(|j| data[base + j * last_stride]));
        // advance the outer odometer, keeping `base` in step
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= idx[d] * src_strides[d];
            idx[d] = 0;
        }
    }
}
