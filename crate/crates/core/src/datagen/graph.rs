//! Differentiable forward of the toy model for one sample, recorded on a
//! [`GradTape`]. Model weights are constants; only the input patches carry a
//! gradient. Every S6 scan also emits its enhanced-attention embedding, which
//! feeds the contrastive loss.

use std::sync::Arc;

use crate::attn::{embedding_backward, embedding_forward, EmbeddingInputs, Weighting};
use crate::error::{Error, Result};
use crate::ssm::{
    gather_rows, invert, scan_backward, scan_states, CausalConv, Linear, ScanOrder, ToyVmmModel,
};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

use super::loss::{
    contrastive_loss_grad, output_loss, output_loss_grad, select_pos_neg, ContrastiveSelection,
    Positives, Similarity,
};

/// Per-run settings shared by every sample graph.
pub(crate) struct LossContext {
    /// Per scan direction: sequence-index neighborhoods on the patch grid.
    pub neighbors: Vec<Arc<Vec<Vec<usize>>>>,
    pub perms: Vec<Vec<usize>>,
    pub p: usize,
    pub positives: Positives,
    pub tau: f64,
    pub similarity: Similarity,
    pub stride: usize,
    pub weighting: Weighting,
    /// Weight of this sample's output loss, `1/B`.
    pub output_weight: f64,
}

/// Loss value split by term for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub output: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.contrastive + self.output
    }
}

impl std::ops::AddAssign for LossBreakdown {
    fn add_assign(&mut self, o: Self) {
        self.contrastive += o.contrastive;
        self.output += o.output;
    }
}

fn linear(tape: &mut GradTape, x: Var, l: &Linear) -> Result<Var> {
    let value = l.apply(tape.value(x))?;
    let w = l.weight.clone();
    tape.custom(
        &[x],
        value,
        Box::new(move |g, p, _| {
            let (n, k) = w.dims2("linear")?;
            let rows = p[0].len() / k;
            Ok(vec![g
                .reshape([rows, n])?
                .matmul(&w)?
                .into_reshape(p[0].shape().to_vec())?])
        }),
    )
}

fn conv(tape: &mut GradTape, x: Var, c: &CausalConv) -> Result<Var> {
    let value = c.apply(tape.value(x))?;
    let c = c.clone();
    tape.custom(
        &[x],
        value,
        Box::new(move |g, p, _| Ok(vec![c.backward(p[0], g)?.0])),
    )
}

/// Row gather `out[s] = x[idx[s]]`; `idx` must be a permutation.
fn permute(tape: &mut GradTape, x: Var, idx: &[usize]) -> Result<Var> {
    let (_, e) = tape.value(x).dims2("permute")?;
    let value = gather_rows(tape.value(x).data(), e, idx);
    let inv = invert(idx);
    tape.custom(
        &[x],
        value,
        Box::new(move |g, _, _| Ok(vec![gather_rows(g.data(), e, &inv)])),
    )
}

fn mean_rows(tape: &mut GradTape, x: Var) -> Result<Var> {
    let (m, e) = tape.value(x).dims2("mean_rows")?;
    let value = tape
        .value(x)
        .sum_axis0()?
        .scale(1.0 / m as f64)
        .into_reshape([1, e])?;
    tape.custom(
        &[x],
        value,
        Box::new(move |g, _, _| {
            let row: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
            Tensor::new([m, e], row.repeat(m)).map(|t| vec![t])
        }),
    )
}

/// S6 recurrence over `(u, Δ, B, C)` with constant `A`.
fn scan(tape: &mut GradTape, u: Var, delta: Var, b: Var, c: Var, a: &Tensor) -> Result<Var> {
    let (m, e) = tape.value(u).dims2("scan")?;
    let n = a.dim(1);
    let (o, hs) = scan_states(
        tape.value(u).data(),
        a.data(),
        tape.value(delta).data(),
        tape.value(b).data(),
        tape.value(c).data(),
        m,
        e,
        n,
    );
    let a = a.clone();
    tape.custom(
        &[u, delta, b, c],
        Tensor::new([m, e], o)?,
        Box::new(move |g, p, _| {
            let (gu, gd, gb, gc) = scan_backward(
                p[0].data(),
                a.data(),
                p[1].data(),
                p[2].data(),
                p[3].data(),
                &hs,
                g.data(),
                (m, e, n),
            );
            Ok(vec![
                Tensor::new([m, e], gu)?,
                Tensor::new([m, e], gd)?,
                Tensor::new([m, n], gb)?,
                Tensor::new([m, n], gc)?,
            ])
        }),
    )
}

fn embedding(
    tape: &mut GradTape,
    (delta, b, c): (Var, Var, Var),
    a: &Tensor,
    neighbors: &Arc<Vec<Vec<usize>>>,
    weighting: Weighting,
) -> Result<Var> {
    let inputs = EmbeddingInputs {
        delta: tape.value(delta),
        b: tape.value(b),
        c: tape.value(c),
        a,
        neighbors,
        weighting,
    };
    let (lambda, cache) = embedding_forward(&inputs)?;
    let (a, neighbors) = (a.clone(), Arc::clone(neighbors));
    tape.custom(
        &[delta, b, c],
        lambda,
        Box::new(move |g, p, _| {
            let inputs = EmbeddingInputs {
                delta: p[0],
                b: p[1],
                c: p[2],
                a: &a,
                neighbors: &neighbors,
                weighting,
            };
            let (gd, gb, gc) = embedding_backward(&inputs, &cache, g)?;
            Ok(vec![gd, gb, gc])
        }),
    )
}

/// Sum of per-anchor InfoNCE losses over the `M×M` embedding of one scan.
///
/// Anchors whose embedding is structurally zero (`j` past every neighbor of
/// `i`) carry no signal and are skipped, as are anchors left without
/// negatives when a fixed positive count covers a truncated neighborhood.
/// With `frozen`, exactly those selections are scored instead; otherwise the
/// ones used are appended to `record` when given.
fn contrastive(
    tape: &mut GradTape,
    lambda: Var,
    (layer, nb): (usize, &[Vec<usize>]),
    ctx: &LossContext,
    frozen: Option<&[ContrastiveSelection]>,
    record: Option<&mut Vec<ContrastiveSelection>>,
) -> Result<Var> {
    let emb = tape.value(lambda);
    let m = emb.dim(0);
    let mut grad = vec![0.0; emb.len()];
    let mut total = 0.0;
    match frozen {
        Some(plan) => {
            for sel in plan {
                total += contrastive_loss_grad(emb, sel, ctx.tau, ctx.similarity, 1.0, &mut grad)?;
            }
        }
        None => {
            let mut record = record;
            for i in (0..m).step_by(ctx.stride) {
                let reach = nb[i].last().copied().unwrap_or(0);
                for j in (0..=reach.min(m - 1)).step_by(ctx.stride) {
                    let sel = select_pos_neg(emb, layer, (i, j), ctx.p, ctx.positives)?;
                    if sel.negatives.is_empty() || sel.positives.is_empty() {
                        continue;
                    }
                    total +=
                        contrastive_loss_grad(emb, &sel, ctx.tau, ctx.similarity, 1.0, &mut grad)?;
                    if let Some(r) = record.as_deref_mut() {
                        r.push(sel);
                    }
                }
            }
        }
    }
    let grad = Tensor::new(emb.shape().to_vec(), grad)?;
    tape.custom(
        &[lambda],
        Tensor::scalar(total),
        Box::new(move |g, _, _| Ok(vec![grad.scale(g.data()[0])])),
    )
}

fn output(tape: &mut GradTape, logits: Var, target: &Tensor, weight: f64) -> Result<Var> {
    let value = output_loss(tape.value(logits), target)? * weight;
    let target = target.clone();
    tape.custom(
        &[logits],
        Tensor::scalar(value),
        Box::new(move |g, p, _| {
            Ok(vec![
                output_loss_grad(p[0], &target)?.scale(weight * g.data()[0])
            ])
        }),
    )
}

/// How one sample's anchors get their positives and negatives.
#[derive(Clone, Copy)]
pub(crate) enum Selection<'a> {
    Fresh,
    /// Fresh, and keep what was chosen, one list per (layer, direction).
    Record,
    Replay(&'a [Vec<ContrastiveSelection>]),
}

/// `L^C + L^O/B` for one sample and its gradient with respect to `patches`,
/// plus the recorded selections when asked for.
pub(crate) fn sample_loss_grad(
    model: &ToyVmmModel,
    patches: &Tensor,
    target: &Tensor,
    ctx: &LossContext,
    selection: Selection<'_>,
) -> Result<(LossBreakdown, Tensor, Vec<Vec<ContrastiveSelection>>)> {
    let scans = model.blocks.iter().map(|b| b.s6.len()).sum::<usize>();
    if let Selection::Replay(plan) = selection {
        if plan.len() != scans {
            return Err(Error::InvalidArgument(format!(
                "selection plan covers {} scans, model has {scans}",
                plan.len()
            )));
        }
    }
    let mut recorded = Vec::new();
    let mut tape = GradTape::begin();
    let input = tape.leaf(patches.clone());
    let mut x = linear(&mut tape, input, &model.embed)?;
    let mut contrastive_terms = Vec::new();
    for (layer, block) in model.blocks.iter().enumerate() {
        let gate = linear(&mut tape, x, &block.gate_proj)?;
        let gate = tape.silu(gate)?;
        let v = linear(&mut tape, x, &block.in_proj)?;
        let u = conv(&mut tape, v, &block.conv)?;
        let factor = block.merge.factor(block.orders.len());
        let mut merged: Option<Var> = None;
        for (d, s6) in block.s6.iter().enumerate() {
            let us = permute(&mut tape, u, &ctx.perms[d])?;
            let dl = linear(&mut tape, us, &s6.delta_proj)?;
            let delta = tape.softplus(dl)?;
            let b = linear(&mut tape, us, &s6.w_b)?;
            let c = linear(&mut tape, us, &s6.w_c)?;
            let o = scan(&mut tape, us, delta, b, c, &s6.a)?;
            let o = permute(&mut tape, o, &invert(&ctx.perms[d]))?;
            let o = if factor == 1.0 {
                o
            } else {
                tape.scale(o, factor)?
            };
            merged = Some(match merged {
                Some(acc) => tape.add(acc, o)?,
                None => o,
            });
            let lambda = embedding(
                &mut tape,
                (delta, b, c),
                &s6.a,
                &ctx.neighbors[d],
                ctx.weighting,
            )?;
            let term = contrastive_terms.len();
            let frozen = match selection {
                Selection::Replay(plan) => Some(plan[term].as_slice()),
                _ => None,
            };
            let mut used = Vec::new();
            let record = matches!(selection, Selection::Record).then_some(&mut used);
            contrastive_terms.push(contrastive(
                &mut tape,
                lambda,
                (layer, &ctx.neighbors[d]),
                ctx,
                frozen,
                record,
            )?);
            if matches!(selection, Selection::Record) {
                recorded.push(used);
            }
        }
        let merged =
            merged.ok_or_else(|| Error::InvalidArgument("block without scan directions".into()))?;
        let y = tape.mul(merged, gate)?;
        x = match &block.out_proj {
            Some(p) => linear(&mut tape, y, p)?,
            None => y,
        };
    }
    let pooled = mean_rows(&mut tape, x)?;
    let logits = linear(&mut tape, pooled, &model.head)?;
    let lo = output(&mut tape, logits, target, ctx.output_weight)?;

    let mut parts = LossBreakdown {
        contrastive: 0.0,
        output: tape.value(lo).data()[0],
    };
    let mut total = lo;
    for t in contrastive_terms {
        parts.contrastive += tape.value(t).data()[0];
        total = tape.add(total, t)?;
    }
    let grad = tape.backward(total, &[input])?.remove(0);
    Ok((parts, grad, recorded))
}

impl LossContext {
    pub(crate) fn perms_for(model: &ToyVmmModel) -> Vec<Vec<usize>> {
        let (rows, cols) = model.layout();
        model
            .config
            .scan_orders
            .iter()
            .map(|k| ScanOrder::new(*k, rows, cols).permutation())
            .collect()
    }
}
