//! Positive/negative selection and the two generation losses.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attn::box_neighbors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How many neighbors count as positives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PositivesRepr", into = "PositivesRepr")]
pub enum Positives {
    /// Half the neighborhood, `⌊|N(i,j)|/2⌋`, evaluated per anchor.
    Auto,
    Count(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PositivesRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<PositivesRepr> for Positives {
    type Error = String;

    fn try_from(r: PositivesRepr) -> std::result::Result<Self, String> {
        match r {
            PositivesRepr::Count(0) => Err("positives must be at least 1".into()),
            PositivesRepr::Count(n) => Ok(Positives::Count(n)),
            PositivesRepr::Word(w) if w == "auto" => Ok(Positives::Auto),
            PositivesRepr::Word(w) => {
                Err(format!("positives must be a count or \"auto\", got {w:?}"))
            }
        }
    }
}

impl From<Positives> for PositivesRepr {
    fn from(p: Positives) -> Self {
        match p {
            Positives::Auto => PositivesRepr::Word("auto".into()),
            Positives::Count(n) => PositivesRepr::Count(n),
        }
    }
}

impl Positives {
    /// Positive count for a neighborhood of `size` cells (anchor included).
    pub fn resolve(self, size: usize) -> usize {
        let n = match self {
            Positives::Auto => size / 2,
            Positives::Count(n) => n,
        };
        n.min(size.saturating_sub(1))
    }
}

/// What feeds the InfoNCE exponent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// `λ_a · λ_x / τ`, the literal formula. Unbounded: its scale follows the
    /// embeddings' magnitude.
    #[default]
    Dot,
    /// `cos(λ_a, λ_x) / τ`, bounded by `1/τ` and invariant to the
    /// embeddings' scale. A zero-norm neighbor scores 0.
    Cosine,
}

impl Similarity {
    /// Score and its partials with respect to `a` and `v`.
    fn eval(self, a: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        match self {
            Similarity::Dot => (dot(a, v), v.to_vec(), a.to_vec()),
            Similarity::Cosine => {
                let (na, nv) = (dot(a, a).sqrt(), dot(v, v).sqrt());
                if na == 0.0 || nv == 0.0 {
                    return (0.0, vec![0.0; a.len()], vec![0.0; a.len()]);
                }
                let c = dot(a, v) / (na * nv);
                let da = a
                    .iter()
                    .zip(v)
                    .map(|(x, y)| y / (na * nv) - c * x / (na * na))
                    .collect();
                let dv = a
                    .iter()
                    .zip(v)
                    .map(|(x, y)| x / (na * nv) - c * y / (nv * nv))
                    .collect();
                (c, da, dv)
            }
        }
    }
}

/// Anchor `(layer, i, j)` and its ranked neighbors, as `(row, col)` cells of
/// the embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveSelection {
    pub anchor: (usize, usize, usize),
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

fn at(emb: &[f64], w: usize, n: usize, (i, j): (usize, usize)) -> &[f64] {
    let o = (i * w + j) * n;
    &emb[o..o + n]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn emb_dims(emb: &Tensor) -> Result<(usize, usize, usize)> {
    emb.dims3("contrastive embedding")
}

/// Ranks the `p×p` box around `anchor` (itself excluded) by cosine similarity
/// to the anchor's vector in `emb: H×W×N`; the top `n` become positives.
/// Ties keep row-major order. A neighbor with zero norm scores 0.
pub fn select_pos_neg(
    emb: &Tensor,
    layer: usize,
    anchor: (usize, usize),
    p: usize,
    n: Positives,
) -> Result<ContrastiveSelection> {
    let (h, w, dim) = emb_dims(emb)?;
    if anchor.0 >= h || anchor.1 >= w {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor:?} outside {h}×{w}"
        )));
    }
    if p % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "neighborhood size {p} must be odd"
        )));
    }
    let data = emb.data();
    let a = at(data, w, dim, anchor);
    let a_norm = dot(a, a).sqrt();
    if a_norm == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero embedding at layer {layer} anchor {anchor:?}"
        )));
    }
    let cells = box_neighbors(anchor.0, anchor.1, h, w, p);
    let keep = n.resolve(cells.len());
    let mut ranked: Vec<((usize, usize), f64)> = cells
        .into_iter()
        .filter(|&c| c != anchor)
        .map(|c| {
            let v = at(data, w, dim, c);
            let norm = dot(v, v).sqrt();
            let cos = if norm == 0.0 {
                0.0
            } else {
                dot(a, v) / (a_norm * norm)
            };
            (c, cos)
        })
        .collect();
    // Stable sort keeps row-major order among equal scores.
    ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal));
    let mut cells: Vec<(usize, usize)> = ranked.into_iter().map(|(c, _)| c).collect();
    let negatives = cells.split_off(keep);
    Ok(ContrastiveSelection {
        anchor: (layer, anchor.0, anchor.1),
        positives: cells,
        negatives,
    })
}

fn check_selection(sel: &ContrastiveSelection) -> Result<()> {
    if sel.positives.is_empty() || sel.negatives.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "anchor {:?} has {} positives and {} negatives; both must be nonempty",
            sel.anchor,
            sel.positives.len(),
            sel.negatives.len()
        )));
    }
    Ok(())
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let hi = v.clone().fold(f64::NEG_INFINITY, f64::max);
    hi + v.map(|x| (x - hi).exp()).sum::<f64>().ln()
}

/// InfoNCE of one anchor on raw dot products:
/// `−log Σ₊ e^{λ*·λ₊/τ} / (Σ₊ e^{λ*·λ₊/τ} + Σ₋ e^{λ*·λ₋/τ})`.
pub fn contrastive_loss(
    emb: &Tensor,
    sel: &ContrastiveSelection,
    tau: f64,
    sim: Similarity,
) -> Result<f64> {
    check_selection(sel)?;
    let (_, w, dim) = emb_dims(emb)?;
    let data = emb.data();
    let a = at(data, w, dim, (sel.anchor.1, sel.anchor.2));
    let logit = |c: &(usize, usize)| sim.eval(a, at(data, w, dim, *c)).0 / tau;
    let pos = sel.positives.iter().map(logit);
    let all = sel.positives.iter().chain(&sel.negatives).map(logit);
    Ok(log_sum_exp(all) - log_sum_exp(pos))
}

/// Adds `scale · ∂loss/∂emb` for one anchor into `grad` and returns the loss.
pub(crate) fn contrastive_loss_grad(
    emb: &Tensor,
    sel: &ContrastiveSelection,
    tau: f64,
    sim: Similarity,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_selection(sel)?;
    let (_, w, dim) = emb_dims(emb)?;
    let data = emb.data();
    let anchor = (sel.anchor.1, sel.anchor.2);
    let a = at(data, w, dim, anchor);
    let cells: Vec<(usize, usize)> = sel
        .positives
        .iter()
        .chain(&sel.negatives)
        .copied()
        .collect();
    let scored: Vec<_> = cells
        .iter()
        .map(|c| sim.eval(a, at(data, w, dim, *c)))
        .collect();
    let logits: Vec<f64> = scored.iter().map(|(s, _, _)| s / tau).collect();
    let p = sel.positives.len();
    let lse_all = log_sum_exp(logits.iter().copied());
    let lse_pos = log_sum_exp(logits[..p].iter().copied());
    // ∂L/∂s_x = softmax_all(x) − [x ∈ pos] softmax_pos(x)
    let mut ga = vec![0.0; dim];
    for (idx, ((c, s), (_, da, dv))) in cells.iter().zip(&logits).zip(&scored).enumerate() {
        let mut g = (s - lse_all).exp();
        if idx < p {
            g -= (s - lse_pos).exp();
        }
        let g = g * scale / tau;
        let o = (c.0 * w + c.1) * dim;
        for q in 0..dim {
            ga[q] += g * da[q];
            grad[o + q] += g * dv[q];
        }
    }
    let o = (anchor.0 * w + anchor.1) * dim;
    for q in 0..dim {
        grad[o + q] += ga[q];
    }
    Ok(lse_all - lse_pos)
}

/// Numerically stable softmax of each row of `logits: B×K`.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k.max(1)).take(b) {
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row
            .iter_mut()
            .map(|v| {
                *v = (*v - hi).exp();
                *v
            })
            .sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new([b, k], out)
}

/// Mean absolute error between `softmax(logits)` and probability targets.
pub fn output_loss(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "output_loss",
            format!(
                "logits {:?} vs targets {:?}",
                logits.shape(),
                targets.shape()
            ),
        ));
    }
    Ok(softmax_rows(logits)?.sub(targets)?.map(f64::abs).mean())
}

/// Gradient of [`output_loss`] with respect to the logits.
pub(crate) fn output_loss_grad(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let s = softmax_rows(logits)?;
    let (b, k) = s.dims2("output_loss")?;
    let denom = (b * k) as f64;
    let mut g = vec![0.0; b * k];
    for r in 0..b {
        let sr = &s.data()[r * k..(r + 1) * k];
        let tr = &targets.data()[r * k..(r + 1) * k];
        let gs: Vec<f64> = sr
            .iter()
            .zip(tr)
            .map(|(s, t)| sign(s - t) / denom)
            .collect();
        let inner: f64 = gs.iter().zip(sr).map(|(a, b)| a * b).sum();
        for c in 0..k {
            g[r * k + c] = sr[c] * (gs[c] - inner);
        }
    }
    Tensor::new([b, k], g)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tape::fd;

    fn emb(h: usize, w: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        Tensor::from_fn([h, w, n], |idx| f(idx / (w * n), (idx / n) % w, idx % n))
    }

    #[test]
    fn positives_resolve() {
        assert_eq!(Positives::Auto.resolve(25), 12);
        assert_eq!(Positives::Auto.resolve(9), 4);
        assert_eq!(Positives::Count(12).resolve(9), 8);
        assert_eq!(Positives::Count(3).resolve(25), 3);
    }

    #[test]
    fn positives_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            n: Positives,
        }
        let a: W = toml::from_str("n = \"auto\"").unwrap();
        assert_eq!(a.n, Positives::Auto);
        let b: W = toml::from_str("n = 12").unwrap();
        assert_eq!(b.n, Positives::Count(12));
        assert!(toml::from_str::<W>("n = \"many\"").is_err());
        assert!(toml::from_str::<W>("n = 0").is_err());
        assert_eq!(toml::to_string(&a).unwrap().trim(), "n = \"auto\"");
    }

    #[test]
    fn identical_neighbors_follow_row_major_order() {
        let e = emb(5, 5, 2, |_, _, _| 1.0);
        let s = select_pos_neg(&e, 0, (2, 2), 3, Positives::Count(3)).unwrap();
        assert_eq!(s.positives, vec![(1, 1), (1, 2), (1, 3)]);
        assert_eq!(s.negatives, vec![(2, 1), (2, 3), (3, 1), (3, 2), (3, 3)]);
    }

    #[test]
    fn matching_neighbor_ranks_first() {
        // anchor along axis 0, one neighbor parallel to it, the rest along axis 1
        let e = emb(3, 3, 2, |i, j, q| match ((i, j), q) {
            ((1, 1), 0) | ((2, 0), 0) => 1.0,
            ((1, 1), _) | ((2, 0), _) => 0.0,
            (_, 1) => 1.0,
            _ => 0.0,
        });
        let s = select_pos_neg(&e, 1, (1, 1), 3, Positives::Auto).unwrap();
        assert_eq!(s.anchor, (1, 1, 1));
        assert_eq!(s.positives[0], (2, 0));
        assert_eq!(s.positives.len(), 4);
    }

    #[test]
    fn ranking_matches_exhaustive_oracle() {
        let mut rng = SeededRng::new(3);
        let e = rng.normal_tensor([9, 9, 4], 1.0);
        let s = select_pos_neg(&e, 0, (4, 4), 5, Positives::Count(12)).unwrap();
        // Oracle: count, for each neighbor, how many others beat it.
        let v = |i: usize, j: usize| &e.data()[(i * 9 + j) * 4..(i * 9 + j) * 4 + 4];
        let cos = |x: &[f64], y: &[f64]| dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
        let a = v(4, 4);
        let mut cells = Vec::new();
        for i in 2..7 {
            for j in 2..7 {
                if (i, j) != (4, 4) {
                    cells.push((i, j));
                }
            }
        }
        for &c in &cells {
            let better = cells
                .iter()
                .filter(|&&d| cos(a, v(d.0, d.1)) > cos(a, v(c.0, c.1)))
                .count();
            assert_eq!(s.positives.contains(&c), better < 12, "{c:?}");
        }
        assert_eq!(s.positives.len() + s.negatives.len(), 24);
    }

    #[test]
    fn zero_anchor_is_an_error() {
        let e = emb(3, 3, 2, |i, j, _| if (i, j) == (0, 0) { 0.0 } else { 1.0 });
        assert!(matches!(
            select_pos_neg(&e, 0, (0, 0), 3, Positives::Auto),
            Err(Error::Degenerate(_))
        ));
        assert!(select_pos_neg(&e, 0, (3, 0), 3, Positives::Auto).is_err());
    }

    #[test]
    fn equal_dots_give_log_ratio() {
        let e = emb(3, 3, 2, |_, _, _| 0.5);
        let s = select_pos_neg(&e, 0, (1, 1), 3, Positives::Count(3)).unwrap();
        let l = contrastive_loss(&e, &s, 0.7, Similarity::Dot).unwrap();
        assert!((l - (8.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_loss() {
        // 1-D embeddings on a 1×6 strip: anchor at column 0 with value 1.
        let vals = [1.0, 0.5, -0.25, 2.0, 0.1, -1.0];
        let e = Tensor::new([1, 6, 1], vals.to_vec()).unwrap();
        let sel = ContrastiveSelection {
            anchor: (0, 0, 0),
            positives: vec![(0, 1), (0, 3)],
            negatives: vec![(0, 2), (0, 4), (0, 5)],
        };
        let tau = 0.5;
        // exp(1.0) + exp(4.0) over that plus exp(-0.5) + exp(0.2) + exp(-2.0)
        let p = 1.0f64.exp() + 4.0f64.exp();
        let want = -(p / (p + (-0.5f64).exp() + 0.2f64.exp() + (-2.0f64).exp())).ln();
        assert!((contrastive_loss(&e, &sel, tau, Similarity::Dot).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.03367957816504135).abs() < 1e-12);
    }

    #[test]
    fn large_positive_dot_drives_loss_to_zero() {
        let e = Tensor::new([1, 3, 1], vec![1.0, 1e3, 1.0]).unwrap();
        let sel = ContrastiveSelection {
            anchor: (0, 0, 0),
            positives: vec![(0, 1)],
            negatives: vec![(0, 2)],
        };
        assert!(contrastive_loss(&e, &sel, 1.0, Similarity::Dot).unwrap() < 1e-300);
        let empty = ContrastiveSelection {
            negatives: vec![],
            ..sel
        };
        assert!(contrastive_loss(&e, &empty, 1.0, Similarity::Dot).is_err());
    }

    #[test]
    fn loss_decreases_when_a_positive_dot_grows() {
        let mut rng = SeededRng::new(4);
        let e = rng.normal_tensor([5, 5, 3], 1.0);
        let s = select_pos_neg(&e, 0, (2, 2), 5, Positives::Auto).unwrap();
        let base = contrastive_loss(&e, &s, 1.0, Similarity::Dot).unwrap();
        for &(i, j) in &s.positives {
            let mut d = e.data().to_vec();
            let a: Vec<f64> = d[(2 * 5 + 2) * 3..(2 * 5 + 2) * 3 + 3].to_vec();
            for q in 0..3 {
                d[(i * 5 + j) * 3 + q] += 0.1 * a[q];
            }
            let l = contrastive_loss(
                &Tensor::new([5, 5, 3], d).unwrap(),
                &s,
                1.0,
                Similarity::Dot,
            )
            .unwrap();
            assert!(l < base);
        }
        assert!(base >= 0.0);
    }

    #[test]
    fn contrastive_grad_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let e = rng.normal_tensor([4, 4, 3], 1.0);
        let s = select_pos_neg(&e, 0, (1, 2), 3, Positives::Auto).unwrap();
        for sim in [Similarity::Dot, Similarity::Cosine] {
            let mut g = vec![0.0; e.len()];
            contrastive_loss_grad(&e, &s, 0.8, sim, 1.0, &mut g).unwrap();
            let num = fd::gradient(&e, 1e-6, |x| contrastive_loss(x, &s, 0.8, sim).unwrap());
            let g = Tensor::new([4, 4, 3], g).unwrap();
            assert!(fd::max_rel_err(&g, &num, 1e-6) < 1e-6, "{sim:?}");
        }
    }

    #[test]
    fn cosine_loss_ignores_embedding_scale() {
        let mut rng = SeededRng::new(9);
        let e = rng.normal_tensor([5, 5, 4], 1.0);
        let s = select_pos_neg(&e, 0, (2, 2), 3, Positives::Auto).unwrap();
        let base = contrastive_loss(&e, &s, 0.5, Similarity::Cosine).unwrap();
        let scaled = contrastive_loss(&e.scale(1e6), &s, 0.5, Similarity::Cosine).unwrap();
        assert!((base - scaled).abs() < 1e-12);
        let dot = contrastive_loss(&e.scale(1e6), &s, 0.5, Similarity::Dot).unwrap();
        assert!(
            dot > 1e3 * base.max(1e-9) || dot < base,
            "dot products follow the scale"
        );
    }

    #[test]
    fn output_loss_cases() {
        let t = Tensor::new([1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        let exact = t.map(f64::ln);
        assert!(output_loss(&exact, &t).unwrap() < 1e-15);
        // softmax([0, 1, 2]) = [0.09003057, 0.24472847, 0.66524096]
        let z = Tensor::new([1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let want = ((0.2 - 0.09003057317038046f64).abs()
            + (0.3 - 0.24472847105479764f64).abs()
            + (0.5 - 0.6652409557748219f64).abs())
            / 3.0;
        assert!((output_loss(&z, &t).unwrap() - want).abs() < 1e-12);
        assert!(output_loss(&z, &Tensor::zeros([1, 2])).is_err());
    }

    #[test]
    fn output_loss_is_row_permutation_invariant() {
        let mut rng = SeededRng::new(6);
        let z = rng.normal_tensor([3, 4], 1.0);
        let t = rng.uniform_tensor([3, 4], 0.0, 1.0);
        let swap = |x: &Tensor| {
            let d = x.data();
            Tensor::new([3, 4], [&d[8..12], &d[0..4], &d[4..8]].concat()).unwrap()
        };
        let a = output_loss(&z, &t).unwrap();
        let b = output_loss(&swap(&z), &swap(&t)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn output_grad_matches_finite_differences() {
        let mut rng = SeededRng::new(7);
        let z = rng.normal_tensor([2, 5], 1.0);
        let t = rng.uniform_tensor([2, 5], 0.0, 0.4);
        let g = output_loss_grad(&z, &t).unwrap();
        let num = fd::gradient(&z, 1e-6, |x| output_loss(x, &t).unwrap());
        assert!(fd::max_rel_err(&g, &num, 1e-8) < 1e-6);
    }
}
