//! Implicit attention of an S6 scan, the Δ-weighted patched hidden state,
//! and the enhanced attention built on it.
//!
//! All sequence-indexed quantities are in the scan direction's own order.
//! A [`NeighborhoodSpec`] maps each sequence index to the grid cell it came
//! from so that spatial neighborhoods can be taken on the 2-D patch grid.
//!
//! Per channel `e`, the contribution of token `j` to output `i` is
//!
//! ```text
//! α_e[i, j, m] = C(i)_m · Π_{k=j+1..i} Ā(k)[e, m] · B̄(j)[e, m]     (j ≤ i)
//! ```
//!
//! and the S6 output satisfies `o(i)[e] = Σ_j Σ_m α_e[i, j, m] · u(j)[e]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{invert, ScanKind, ScanOrder, ScanTrace};
use crate::tensor::Tensor;

/// `p×p` spatial neighborhoods on a `rows×cols` grid, truncated at borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborhoodSpec {
    pub p: usize,
    pub rows: usize,
    pub cols: usize,
    /// Scan order that produced the sequence indices.
    pub order: ScanKind,
}

impl NeighborhoodSpec {
    pub fn new(p: usize, rows: usize, cols: usize, order: ScanKind) -> Result<Self> {
        if p == 0 || p % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "neighborhood size {p} must be odd and ≥ 1"
            )));
        }
        Ok(Self {
            p,
            rows,
            cols,
            order,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// For each sequence index, the sequence indices of its grid neighbors
    /// (itself included), sorted ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let order = ScanOrder::new(self.order, self.rows, self.cols);
        let perm = order.permutation();
        let pos = invert(&perm);
        let r = self.p / 2;
        (0..self.tokens())
            .map(|s| {
                let (row, col) = order.cell_of(&perm, s);
                let mut out = Vec::with_capacity(self.p * self.p);
                for rr in row.saturating_sub(r)..=(row + r).min(self.rows - 1) {
                    for cc in col.saturating_sub(r)..=(col + r).min(self.cols - 1) {
                        out.push(pos[rr * self.cols + cc]);
                    }
                }
                out.sort_unstable();
                out
            })
            .collect()
    }

    fn check(&self, m: usize) -> Result<()> {
        if m != self.tokens() {
            return Err(Error::shape(
                "neighborhood",
                format!("sequence of {m} vs grid {}x{}", self.rows, self.cols),
            ));
        }
        Ok(())
    }
}

/// Box neighborhood of `(i, j)` in an `h×w` matrix, truncated, row-major order.
pub fn box_neighbors(i: usize, j: usize, h: usize, w: usize, p: usize) -> Vec<(usize, usize)> {
    let r = p / 2;
    let mut out = Vec::with_capacity(p * p);
    for a in i.saturating_sub(r)..=(i + r).min(h - 1) {
        for b in j.saturating_sub(r)..=(j + r).min(w - 1) {
            out.push((a, b));
        }
    }
    out
}

fn trace_dims(trace: &ScanTrace) -> Result<(usize, usize, usize)> {
    let first = trace
        .steps
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trace".into()))?;
    let (e, n) = first.a_bar.dims2("trace")?;
    Ok((trace.len(), e, n))
}

/// Hidden states from the closed-form sum
/// `h(t) = Σ_{j≤t} (Π_{k=j+1..t} Ā(k)) ⊙ B̄(j) ⊙ u(j)`. Returns `M×E×N`.
pub fn unrolled_hidden_state(trace: &ScanTrace, u: &Tensor) -> Result<Tensor> {
    let (m, e, n) = trace_dims(trace)?;
    if u.shape() != [m, e] {
        return Err(Error::shape(
            "unrolled_hidden_state",
            format!("u {:?} vs trace {m}x{e}", u.shape()),
        ));
    }
    let mut out = vec![0.0; m * e * n];
    for t in 0..m {
        for ch in 0..e {
            for k in 0..n {
                let idx = ch * n + k;
                let mut decay = 1.0;
                let mut acc = 0.0;
                for j in (0..=t).rev() {
                    acc += decay * trace.steps[j].b_bar.data()[idx] * u.data()[j * e + ch];
                    decay *= trace.steps[j].a_bar.data()[idx];
                }
                out[(t * e + ch) * n + k] = acc;
            }
        }
    }
    Tensor::new([m, e, n], out)
}

/// Implicit attention, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrices {
    /// `E×M×M`, `Σ_m alpha`
    pub alpha_tilde: Tensor,
    /// `E×M×M×N`
    pub alpha: Tensor,
}

impl AttentionMatrices {
    /// `o(i)[e] = Σ_j α̃_e[i, j] u(j)[e]`; `u` is `M×E`.
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        apply_scores(&self.alpha_tilde, u)
    }
}

fn apply_scores(scores: &Tensor, u: &Tensor) -> Result<Tensor> {
    let (e, m, _) = scores.dims3("attention apply")?;
    if u.shape() != [m, e] {
        return Err(Error::shape(
            "attention apply",
            format!("u {:?} vs {e}x{m}", u.shape()),
        ));
    }
    let mut out = vec![0.0; m * e];
    for ch in 0..e {
        for i in 0..m {
            let row = &scores.data()[(ch * m + i) * m..(ch * m + i + 1) * m];
            out[i * e + ch] = (0..m).map(|j| row[j] * u.data()[j * e + ch]).sum();
        }
    }
    Tensor::new([m, e], out)
}

fn reduce_last(t: &Vec<f64>, n: usize, shape: [usize; 3]) -> Tensor {
    Tensor::new(shape, t.chunks(n).map(|c| c.iter().sum()).collect()).unwrap()
}

pub fn implicit_attention(trace: &ScanTrace) -> Result<AttentionMatrices> {
    let (m, e, n) = trace_dims(trace)?;
    let mut alpha = vec![0.0; e * m * m * n];
    for ch in 0..e {
        for k in 0..n {
            let idx = ch * n + k;
            for i in 0..m {
                let c = trace.steps[i].c.data()[k];
                let mut decay = 1.0;
                for j in (0..=i).rev() {
                    alpha[((ch * m + i) * m + j) * n + k] =
                        c * decay * trace.steps[j].b_bar.data()[idx];
                    decay *= trace.steps[j].a_bar.data()[idx];
                }
            }
        }
    }
    Ok(AttentionMatrices {
        alpha_tilde: reduce_last(&alpha, n, [e, m, m]),
        alpha: Tensor::new([e, m, m, n], alpha)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchedStateSeq {
    /// `M×E×N`
    pub h_p: Tensor,
    /// Per token, `(neighbor index, w_k)` for every contributing neighbor.
    pub weights: Vec<Vec<(usize, f64)>>,
}

/// Channel mean of Δ per token; the weight each token carries as a neighbor.
pub fn delta_weights(deltas: &Tensor) -> Result<Vec<f64>> {
    Ok(deltas.mean_last()?.into_data())
}

/// `h_p(τ) = Σ_{k ∈ N(τ)} w_k h(k)` with `w_k = mean_E Δ(k)`.
pub fn patched_state(
    h: &Tensor,
    deltas: &Tensor,
    spec: &NeighborhoodSpec,
) -> Result<PatchedStateSeq> {
    let (m, e, n) = h.dims3("patched_state")?;
    spec.check(m)?;
    if deltas.shape() != [m, e] {
        return Err(Error::shape(
            "patched_state",
            format!("deltas {:?} vs {m}x{e}", deltas.shape()),
        ));
    }
    let w = delta_weights(deltas)?;
    let width = e * n;
    let mut out = vec![0.0; m * width];
    let mut weights = Vec::with_capacity(m);
    for (t, nb) in spec.neighbors().into_iter().enumerate() {
        let dst = &mut out[t * width..(t + 1) * width];
        for &k in &nb {
            for (d, s) in dst.iter_mut().zip(&h.data()[k * width..(k + 1) * width]) {
                *d += w[k] * s;
            }
        }
        weights.push(nb.into_iter().map(|k| (k, w[k])).collect());
    }
    Ok(PatchedStateSeq {
        h_p: Tensor::new([m, e, n], out)?,
        weights,
    })
}

/// `o_p(i)[e] = Σ_m C(i)_m h_p(i)[e, m]`, the output read from patched states.
pub fn patched_output(trace: &ScanTrace, h_p: &Tensor) -> Result<Tensor> {
    let (m, e, n) = trace_dims(trace)?;
    if h_p.shape() != [m, e, n] {
        return Err(Error::shape("patched_output", format!("{:?}", h_p.shape())));
    }
    let mut out = vec![0.0; m * e];
    for i in 0..m {
        let c = trace.steps[i].c.data();
        for ch in 0..e {
            out[i * e + ch] = (0..n)
                .map(|k| c[k] * h_p.data()[(i * e + ch) * n + k])
                .sum();
        }
    }
    Tensor::new([m, e], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedAttention {
    /// `E×M×M×N`
    pub alpha_p: Tensor,
    /// `E×M×M`
    pub alpha_p_tilde: Tensor,
}

impl EnhancedAttention {
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        apply_scores(&self.alpha_p_tilde, u)
    }

    /// Channel mean `M×M×N`; the per-pair contrastive embedding.
    pub fn embedding(&self) -> Result<Tensor> {
        let (e, m, _, n) = match self.alpha_p.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => unreachable!(),
        };
        let plane = m * m * n;
        let mut out = vec![0.0; plane];
        for ch in 0..e {
            for (o, v) in out
                .iter_mut()
                .zip(&self.alpha_p.data()[ch * plane..(ch + 1) * plane])
            {
                *o += v / e as f64;
            }
        }
        Tensor::new([m, m, n], out)
    }
}

/// Attention of the patched output `o_p(i) = C(i) h_p(i)`:
/// `α_p[e, i, j, m] = Σ_{k ∈ N(i), k ≥ j} w_k C(i)_m Π_{l=j+1..k} Ā(l) B̄(j)`.
pub fn enhanced_attention(
    trace: &ScanTrace,
    deltas: &Tensor,
    spec: &NeighborhoodSpec,
) -> Result<EnhancedAttention> {
    let (m, e, n) = trace_dims(trace)?;
    spec.check(m)?;
    if deltas.shape() != [m, e] {
        return Err(Error::shape(
            "enhanced_attention",
            format!("deltas {:?}", deltas.shape()),
        ));
    }
    let w = delta_weights(deltas)?;
    let neighbors = spec.neighbors();
    let mut alpha = vec![0.0; e * m * m * n];
    let mut col = vec![0.0; m];
    for ch in 0..e {
        for kk in 0..n {
            let idx = ch * n + kk;
            for (i, nb) in neighbors.iter().enumerate() {
                let c = trace.steps[i].c.data()[kk];
                col.iter_mut().for_each(|v| *v = 0.0);
                for &k in nb {
                    let mut decay = 1.0;
                    for j in (0..=k).rev() {
                        col[j] += w[k] * decay * trace.steps[j].b_bar.data()[idx];
                        decay *= trace.steps[j].a_bar.data()[idx];
                    }
                }
                for j in 0..m {
                    alpha[((ch * m + i) * m + j) * n + kk] = c * col[j];
                }
            }
        }
    }
    Ok(EnhancedAttention {
        alpha_p_tilde: reduce_last(&alpha, n, [e, m, m]),
        alpha_p: Tensor::new([e, m, m, n], alpha)?,
    })
}

/// How neighbors are weighted when forming the patched state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_k` is the channel mean of `Δ(k)`.
    #[default]
    Delta,
    /// `w_k = 1`; the plain neighborhood sum, kept for ablations.
    Uniform,
}

/// Inputs of the fused embedding kernel, straight from the S6 projections.
pub struct EmbeddingInputs<'a> {
    /// `M×E`, softplus output
    pub delta: &'a Tensor,
    /// `M×N`
    pub b: &'a Tensor,
    /// `M×N`
    pub c: &'a Tensor,
    /// `E×N`
    pub a: &'a Tensor,
    pub neighbors: &'a [Vec<usize>],
    pub weighting: Weighting,
}

/// Saved forward state for [`embedding_backward`].
pub struct EmbeddingCache {
    m: usize,
    e: usize,
    n: usize,
    /// cumulative log-decay `L[e][t*N+m] = Σ_{l≤t} A[e,m] Δ[l,e]`
    log_decay: Vec<Vec<f64>>,
    /// channel-mean kernel `T̄[k, j, m]`, zero for `j > k`
    t_bar: Vec<f64>,
    /// `S[i, j, m] = Σ_{k∈N(i)} w_k T̄[k, j, m]`
    s: Vec<f64>,
    w: Vec<f64>,
}

/// Channel-mean enhanced attention `λ: M×M×N` computed directly from the
/// projections; equals [`EnhancedAttention::embedding`] on the same scan.
pub fn embedding_forward(x: &EmbeddingInputs<'_>) -> Result<(Tensor, EmbeddingCache)> {
    let (m, e) = x.delta.dims2("embedding")?;
    let n = x.a.dim(1);
    if x.b.shape() != [m, n]
        || x.c.shape() != [m, n]
        || x.a.shape() != [e, n]
        || x.neighbors.len() != m
    {
        return Err(Error::shape("embedding", "projection shapes disagree"));
    }
    let (dd, bd, cd, ad) = (x.delta.data(), x.b.data(), x.c.data(), x.a.data());
    let w: Vec<f64> = match x.weighting {
        Weighting::Delta => dd
            .chunks(e)
            .map(|r| r.iter().sum::<f64>() / e as f64)
            .collect(),
        Weighting::Uniform => vec![1.0; m],
    };

    let mut log_decay = vec![vec![0.0; m * n]; e];
    for (ch, ld) in log_decay.iter_mut().enumerate() {
        for k in 0..n {
            let mut acc = 0.0;
            for t in 0..m {
                acc += ad[ch * n + k] * dd[t * e + ch];
                ld[t * n + k] = acc;
            }
        }
    }
    let mut t_bar = vec![0.0; m * m * n];
    let inv_e = 1.0 / e as f64;
    for (ch, ld) in log_decay.iter().enumerate() {
        for k in 0..m {
            for j in 0..=k {
                let base = (k * m + j) * n;
                for q in 0..n {
                    let v = (ld[k * n + q] - ld[j * n + q]).exp() * dd[j * e + ch] * bd[j * n + q];
                    t_bar[base + q] += v * inv_e;
                }
            }
        }
    }
    let mut s = vec![0.0; m * m * n];
    for (i, nb) in x.neighbors.iter().enumerate() {
        let row = &mut s[i * m * n..(i + 1) * m * n];
        for &k in nb {
            let src = &t_bar[k * m * n..(k * m + k + 1) * n];
            for (d, v) in row.iter_mut().zip(src) {
                *d += w[k] * v;
            }
        }
    }
    let mut lambda = s.clone();
    for i in 0..m {
        for j in 0..m {
            for q in 0..n {
                lambda[(i * m + j) * n + q] *= cd[i * n + q];
            }
        }
    }
    Ok((
        Tensor::new([m, m, n], lambda)?,
        EmbeddingCache {
            m,
            e,
            n,
            log_decay,
            t_bar,
            s,
            w,
        },
    ))
}

/// Adjoints of [`embedding_forward`] with respect to `(delta, b, c)`.
pub fn embedding_backward(
    x: &EmbeddingInputs<'_>,
    cache: &EmbeddingCache,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let EmbeddingCache { m, e, n, .. } = *cache;
    let (dd, bd, cd, ad) = (x.delta.data(), x.b.data(), x.c.data(), x.a.data());
    let g = grad.data();
    if g.len() != m * m * n {
        return Err(Error::shape(
            "embedding backward",
            format!("{:?}", grad.shape()),
        ));
    }
    let mut gd = vec![0.0; m * e];
    let mut gb = vec![0.0; m * n];
    let mut gc = vec![0.0; m * n];

    // λ = C ⊙ S
    let mut gs = vec![0.0; m * m * n];
    for i in 0..m {
        for j in 0..m {
            for q in 0..n {
                let at = (i * m + j) * n + q;
                gc[i * n + q] += g[at] * cache.s[at];
                gs[at] = g[at] * cd[i * n + q];
            }
        }
    }
    // S[i] = Σ_{k∈N(i)} w_k T̄[k]: scatter to R[k] = Σ_{i: k∈N(i)} gS[i]
    let mut r = vec![0.0; m * m * n];
    let mut gw = vec![0.0; m];
    for (i, nb) in x.neighbors.iter().enumerate() {
        let gsi = &gs[i * m * n..(i + 1) * m * n];
        for &k in nb {
            let len = (k + 1) * n;
            let tk = &cache.t_bar[k * m * n..k * m * n + len];
            gw[k] += gsi[..len].iter().zip(tk).map(|(a, b)| a * b).sum::<f64>();
            for (d, v) in r[k * m * n..k * m * n + len].iter_mut().zip(&gsi[..len]) {
                *d += v;
            }
        }
    }
    let weight_grads = if x.weighting == Weighting::Delta {
        &gw[..]
    } else {
        &[]
    };
    for (k, gwk) in weight_grads.iter().enumerate() {
        for ch in 0..e {
            gd[k * e + ch] += gwk / e as f64;
        }
    }
    // T̄ = mean_e exp(L[k] − L[j]) Δ[j, e] B[j]; adjoint of T̄[k] is w_k R[k].
    let inv_e = 1.0 / e as f64;
    let mut gl = vec![0.0; m * n];
    for (ch, ld) in cache.log_decay.iter().enumerate() {
        gl.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..m {
            for j in 0..=k {
                let base = (k * m + j) * n;
                for q in 0..n {
                    let gt = cache.w[k] * r[base + q] * inv_e;
                    if gt == 0.0 {
                        continue;
                    }
                    let decay = (ld[k * n + q] - ld[j * n + q]).exp();
                    let q_val = gt * decay;
                    let tv = q_val * dd[j * e + ch] * bd[j * n + q];
                    gl[k * n + q] += tv;
                    gl[j * n + q] -= tv;
                    gd[j * e + ch] += q_val * bd[j * n + q];
                    gb[j * n + q] += q_val * dd[j * e + ch];
                }
            }
        }
        // L[t] = Σ_{l≤t} A Δ[l]  ⇒  ∂/∂Δ[l] = A · Σ_{t≥l} gL[t]
        for q in 0..n {
            let mut suffix = 0.0;
            for l in (0..m).rev() {
                suffix += gl[l * n + q];
                gd[l * e + ch] += ad[ch * n + q] * suffix;
            }
        }
    }
    Ok((
        Tensor::new([m, e], gd)?,
        Tensor::new([m, n], gb)?,
        Tensor::new([m, n], gc)?,
    ))
}
