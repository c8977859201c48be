//! Inner loops. All reductions run in a fixed order so results are
//! bit-reproducible.

use super::Real;
use crate::error::{Error, Result};

const MR: usize = 4;
const NR: usize = 16;

/// `c[m,n] += a[m,k] · b[k,n]`
///
/// Each output element is summed over `k` in order into a zeroed
/// accumulator and then added to `c`, whatever tile it falls in.
pub(crate) fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in (0..m).step_by(MR) {
        let mr = (m - i).min(MR);
        for j in (0..n).step_by(NR) {
            if mr == MR && n - j >= NR {
                tile_full(k, n, &a[i * k..(i + MR) * k], &b[j..], &mut c[i * n + j..]);
            } else {
                tile_edge(k, n, mr, (n - j).min(NR), &a[i * k..(i + mr) * k], &b[j..], &mut c[i * n + j..]);
            }
        }
    }
}

#[inline(always)]
fn tile_full<T: Real>(k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let brow: &[T; NR] = b[p * n..p * n + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let av = a[r * k + p];
            for (x, &bv) in row.iter_mut().zip(brow) {
                *x = av.mul_add(bv, *x);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        for (cv, &x) in c[r * n..r * n + NR].iter_mut().zip(row) {
            *cv += x;
        }
    }
}

fn tile_edge<T: Real>(k: usize, n: usize, mr: usize, nr: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let brow = &b[p * n..p * n + nr];
        for (r, row) in acc.iter_mut().enumerate().take(mr) {
            let av = a[r * k + p];
            for (x, &bv) in row.iter_mut().zip(brow) {
                *x = av.mul_add(bv, *x);
            }
        }
    }
    for (r, row) in acc.iter().enumerate().take(mr) {
        for (cv, &x) in c[r * n..r * n + nr].iter_mut().zip(row) {
            *cv += x;
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(m, k, a);
    gemm_nn(k, m, n, &at, b, c);
}

pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Shape bookkeeping for a (possibly batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` carries its own batch dimensions (otherwise it is shared).
    pub b_batched: bool,
    pub trans_b: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        let err = || Error::shape(if trans_b { "matmul_nt" } else { "matmul" }, a, b);
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let b_batched = !b_lead.is_empty();
        if b_batched && a_lead != b_lead {
            return Err(err());
        }
        let batch = a_lead.iter().product();
        let mut out_shape = a_lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch,
            m,
            k,
            n,
            b_batched,
            trans_b,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn b_len(&self) -> usize {
        self.k * self.n
    }

    pub fn forward<T: Real>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            // shared right operand: fold the batch into the row dimension
            let rows = self.batch * m;
            if self.trans_b {
                gemm_nt(rows, k, n, a, b, out);
            } else {
                gemm_nn(rows, k, n, a, b, out);
            }
            return;
        }
        for s in 0..self.batch {
            let a_s = &a[s * m * k..(s + 1) * m * k];
            let b_s = &b[s * self.b_len()..(s + 1) * self.b_len()];
            let o_s = &mut out[s * m * n..(s + 1) * m * n];
            if self.trans_b {
                gemm_nt(m, k, n, a_s, b_s, o_s);
            } else {
                gemm_nn(m, k, n, a_s, b_s, o_s);
            }
        }
    }

    /// Accumulates `∂a += g·bᵀ` and `∂b += aᵀ·g` (layouts adjusted for `trans_b`).
    pub fn backward<T: Real>(&self, a: &[T], b: &[T], g: &[T], ga: Option<&mut [T]>, gb: Option<&mut [T]>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (batch, rows) = if self.b_batched { (self.batch, m) } else { (1, self.batch * m) };
        let bl = self.b_len();
        if let Some(ga) = ga {
            for s in 0..batch {
                let g_s = &g[s * rows * n..(s + 1) * rows * n];
                let b_s = &b[s * bl..(s + 1) * bl];
                let ga_s = &mut ga[s * rows * k..(s + 1) * rows * k];
                if self.trans_b {
                    // g[rows,n] · b[n,k]
                    gemm_nn(rows, n, k, g_s, b_s, ga_s);
                } else {
                    // g[rows,n] · b[k,n]ᵀ
                    gemm_nt(rows, n, k, g_s, b_s, ga_s);
                }
            }
        }
        if let Some(gb) = gb {
            for s in 0..batch {
                let g_s = &g[s * rows * n..(s + 1) * rows * n];
                let a_s = &a[s * rows * k..(s + 1) * rows * k];
                let gb_s = &mut gb[s * bl..(s + 1) * bl];
                if self.trans_b {
                    // gb[n,k] += gᵀ[n,rows] · a[rows,k]
                    gemm_tn(rows, n, k, g_s, a_s, gb_s);
                } else {
                    // gb[k,n] += aᵀ[k,rows] · g[rows,n]
                    gemm_tn(rows, k, n, a_s, g_s, gb_s);
                }
            }
        }
    }
}

/// Numerically stable softmax of one contiguous row (or strided lane).
pub(crate) fn softmax_lane<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Softmax over the entries of `x` where `allowed` holds; the rest (and the
/// whole row, when nothing is allowed) are written as zero.
pub(crate) fn masked_softmax_row<T: Real>(x: &[T], allowed: &[bool], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (&v, &ok) in x.iter().zip(allowed) {
        if ok && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        out.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for ((o, &v), &ok) in out.iter_mut().zip(x).zip(allowed) {
        *o = if ok { (v - max).exp() } else { T::zero() };
        sum += *o;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Normalizes one row; writes the output and the normalized input, returns
/// the reciprocal standard deviation.
pub(crate) fn layer_norm_row<T: Real>(x: &[T], gain: &[T], bias: &[T], eps: T, out: &mut [T], xhat: &mut [T]) -> T {
    let hn = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / hn;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
    let rs = T::one() / (var + eps).sqrt();
    for j in 0..x.len() {
        let xh = (x[j] - mean) * rs;
        xhat[j] = xh;
        out[j] = xh * gain[j] + bias[j];
    }
    rs
}

/// `log Σ exp(x)`
pub(crate) fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
