use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{
    scan_projected, Linear, Projections, S6Params, ScanHook, ScanKind, ScanOrder, ScanTrace, Site,
};

/// Depthwise causal 1-D convolution with zero left-padding.
///
/// `taps` is `E×W`; the last tap multiplies the current token.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalConv {
    pub taps: Tensor,
}

impl CausalConv {
    pub fn init(rng: &mut SeededRng, channels: usize, width: usize) -> Self {
        Self {
            taps: rng.normal_tensor([channels, width], 1.0 / (width as f64).sqrt()),
        }
    }

    /// Width-1 unit kernel; the convolution becomes the identity.
    pub fn identity(channels: usize) -> Self {
        Self {
            taps: Tensor::full([channels, 1], 1.0),
        }
    }

    pub fn width(&self) -> usize {
        self.taps.dim(1)
    }

    /// `x: M×E → M×E`
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (m, e) = x.dims2("conv1d")?;
        let (ce, w) = self.taps.dims2("conv1d")?;
        if ce != e {
            return Err(Error::shape(
                "conv1d",
                format!("taps {:?} vs input {:?}", self.taps.shape(), x.shape()),
            ));
        }
        let (xd, td) = (x.data(), self.taps.data());
        let mut out = vec![0.0; m * e];
        for t in 0..m {
            for k in 0..w {
                // tap k reads token t − (w − 1 − k)
                let Some(src) = (t + k).checked_sub(w - 1) else {
                    continue;
                };
                for ch in 0..e {
                    out[t * e + ch] += td[ch * w + k] * xd[src * e + ch];
                }
            }
        }
        Tensor::new([m, e], out)
    }

    /// Adjoint of [`apply`](Self::apply) with respect to its input and taps.
    pub fn backward(&self, x: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let (m, e) = x.dims2("conv1d")?;
        let w = self.width();
        let (xd, td, gd) = (x.data(), self.taps.data(), g.data());
        let mut gx = vec![0.0; m * e];
        let mut gt = vec![0.0; e * w];
        for t in 0..m {
            for k in 0..w {
                let Some(src) = (t + k).checked_sub(w - 1) else {
                    continue;
                };
                for ch in 0..e {
                    gx[src * e + ch] += td[ch * w + k] * gd[t * e + ch];
                    gt[ch * w + k] += xd[src * e + ch] * gd[t * e + ch];
                }
            }
        }
        Ok((Tensor::new([m, e], gx)?, Tensor::new([e, w], gt)?))
    }
}

/// How per-direction scan outputs are combined before gating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMerge {
    #[default]
    Sum,
    Mean,
}

impl DirectionMerge {
    pub fn factor(self, directions: usize) -> f64 {
        match self {
            DirectionMerge::Sum => 1.0,
            DirectionMerge::Mean => 1.0 / directions as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub gate_proj: Linear,
    pub in_proj: Linear,
    pub conv: CausalConv,
    /// One S6 layer per scan direction, same order as `orders`.
    pub s6: Vec<S6Params>,
    pub orders: Vec<ScanKind>,
    pub merge: DirectionMerge,
    pub out_proj: Option<Linear>,
}

impl MambaBlockParams {
    pub fn init(
        rng: &mut SeededRng,
        channels: usize,
        state: usize,
        conv_width: usize,
        orders: &[ScanKind],
        out_proj: bool,
    ) -> Self {
        Self {
            gate_proj: Linear::init(rng, channels, channels, false),
            in_proj: Linear::init(rng, channels, channels, false),
            conv: CausalConv::init(rng, channels, conv_width),
            s6: orders
                .iter()
                .map(|_| S6Params::init(rng, channels, state))
                .collect(),
            orders: orders.to_vec(),
            merge: DirectionMerge::Sum,
            out_proj: out_proj.then(|| Linear::init(rng, channels, channels, false)),
        }
    }

    pub fn channels(&self) -> usize {
        self.in_proj.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.s6.len() != self.orders.len() || self.s6.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} S6 layers for {} scan orders",
                self.s6.len(),
                self.orders.len()
            )));
        }
        let e = self.channels();
        for s in &self.s6 {
            s.validate()?;
            if s.channels() != e {
                return Err(Error::shape("MambaBlockParams", "S6 channel count"));
            }
        }
        if self.conv.taps.dim(0) != e || self.gate_proj.out_dim() != e {
            return Err(Error::shape("MambaBlockParams", "conv/gate channel count"));
        }
        Ok(())
    }
}

/// What a block forward keeps for attention analysis and generation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Post-conv S6 input, `M×E` in row-major grid order.
    pub u: Tensor,
    /// One trace per direction, in that direction's sequence order.
    pub scans: Vec<ScanTrace>,
}

/// Mamba block on `x: M×E` laid out row-major on a `rows×cols` grid.
pub fn mamba_block_forward(
    x: &Tensor,
    params: &MambaBlockParams,
    layout: (usize, usize),
) -> Result<Tensor> {
    let mut hook = super::NoHook;
    Ok(block_forward_hooked(x, params, layout, 0, &mut hook, false)?.0)
}

pub(crate) fn block_forward_hooked(
    x: &Tensor,
    params: &MambaBlockParams,
    (rows, cols): (usize, usize),
    layer: usize,
    hook: &mut dyn ScanHook,
    keep_trace: bool,
) -> Result<(Tensor, Option<BlockTrace>)> {
    let (m, e) = x.dims2("mamba_block")?;
    if m != rows * cols {
        return Err(Error::shape(
            "mamba_block",
            format!("M = {m} vs grid {rows}x{cols}"),
        ));
    }
    let gate = params.gate_proj.apply(x)?.silu();
    let u = params.conv.apply(&params.in_proj.apply(x)?)?;
    let mut merged = vec![0.0; m * e];
    let mut scans = Vec::new();
    let factor = params.merge.factor(params.orders.len());
    for (direction, (kind, s6)) in params.orders.iter().zip(&params.s6).enumerate() {
        let order = ScanOrder::new(*kind, rows, cols);
        let us = order.flatten_grid(&u)?;
        let proj = Projections::compute(&us, s6, &us)?;
        let (o, trace) = scan_projected(
            &us,
            &s6.a,
            &proj,
            keep_trace,
            hook,
            Site { layer, direction },
        )?;
        let o = order.unflatten_grid(&o)?;
        for (acc, v) in merged.iter_mut().zip(o.data()) {
            *acc += factor * v;
        }
        scans.extend(trace);
    }
    let gated = Tensor::new([m, e], merged)?.mul(&gate)?;
    let y = match &params.out_proj {
        Some(p) => p.apply(&gated)?,
        None => gated,
    };
    Ok((y, keep_trace.then_some(BlockTrace { u, scans })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::s6_scan;
    use crate::tensor::silu;

    fn block(seed: u64, orders: &[ScanKind]) -> MambaBlockParams {
        MambaBlockParams::init(&mut SeededRng::new(seed), 4, 2, 3, orders, true)
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = SeededRng::new(1);
        let conv = CausalConv::init(&mut rng, 3, 4);
        let x = rng.normal_tensor([6, 3], 1.0);
        let y = conv.apply(&x).unwrap();
        for t in 0..6 {
            for ch in 0..3 {
                let mut want = 0.0;
                for lag in 0..4 {
                    if t >= lag {
                        want += conv.taps.data()[ch * 4 + (3 - lag)] * x.data()[(t - lag) * 3 + ch];
                    }
                }
                assert!((y.data()[t * 3 + ch] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut rng = SeededRng::new(2);
        let conv = CausalConv::init(&mut rng, 2, 3);
        let mut x = rng.normal_tensor([5, 2], 1.0);
        let before = conv.apply(&x).unwrap();
        let mut d = x.clone().into_data();
        d[4 * 2] += 10.0;
        x = Tensor::new([5, 2], d).unwrap();
        let after = conv.apply(&x).unwrap();
        assert_eq!(&before.data()[..8], &after.data()[..8]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = block(3, &[ScanKind::RowMajorForward, ScanKind::RowMajorBackward]);
        let y = mamba_block_forward(&Tensor::zeros([6, 4]), &p, (2, 3)).unwrap();
        assert_eq!(y, Tensor::zeros([6, 4]));
    }

    #[test]
    fn delta_conv_single_direction_reduces_to_gated_scan() {
        let mut p = block(4, &[ScanKind::RowMajorForward]);
        p.conv = CausalConv::identity(4);
        p.out_proj = None;
        let x = SeededRng::new(4).normal_tensor([6, 4], 1.0);
        let y = mamba_block_forward(&x, &p, (2, 3)).unwrap();
        let u = p.in_proj.apply(&x).unwrap();
        let (o, _) = s6_scan(&u, &p.s6[0], &u, false).unwrap();
        let g = p.gate_proj.apply(&x).unwrap().silu();
        let want = o.mul(&g).unwrap();
        assert!(y.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn two_directions_match_scalar_composition() {
        let orders = [ScanKind::RowMajorForward, ScanKind::ColumnMajorBackward];
        let p = block(5, &orders);
        let (rows, cols) = (2, 3);
        let x = SeededRng::new(5).normal_tensor([6, 4], 1.0);
        let y = mamba_block_forward(&x, &p, (rows, cols)).unwrap();

        // Scalar reimplementation: explicit per-cell loops, no shared helpers
        // beyond the parameter tensors.
        let (m, e, n) = (6, 4, 2);
        let lin = |w: &Tensor, v: &[f64], row: usize| -> f64 {
            let k = v.len();
            (0..k).map(|j| w.data()[row * k + j] * v[j]).sum()
        };
        let xrow = |t: usize| &x.data()[t * e..(t + 1) * e];
        let v: Vec<Vec<f64>> = (0..m)
            .map(|t| (0..e).map(|c| lin(&p.in_proj.weight, xrow(t), c)).collect())
            .collect();
        let w = p.conv.width();
        let u: Vec<Vec<f64>> = (0..m)
            .map(|t| {
                (0..e)
                    .map(|c| {
                        (0..w)
                            .filter(|&k| t + k + 1 >= w)
                            .map(|k| p.conv.taps.data()[c * w + k] * v[t + k + 1 - w][c])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let mut merged = vec![vec![0.0; e]; m];
        for (d, kind) in orders.iter().enumerate() {
            let s6 = &p.s6[d];
            let seq: Vec<usize> = match kind {
                ScanKind::RowMajorForward => (0..m).collect(),
                ScanKind::ColumnMajorBackward => {
                    let mut s: Vec<usize> = (0..cols)
                        .flat_map(|c| (0..rows).map(move |r| r * cols + c))
                        .collect();
                    s.reverse();
                    s
                }
                _ => unreachable!(),
            };
            let mut h = vec![vec![0.0; n]; e];
            for &cell in &seq {
                let ut = &u[cell];
                for c in 0..e {
                    let pre = lin(&s6.delta_proj.weight, ut, c)
                        + s6.delta_proj.bias.as_ref().unwrap().data()[c];
                    let delta = (1.0 + pre.exp()).ln();
                    let mut o = 0.0;
                    for k in 0..n {
                        let ab = (s6.a.data()[c * n + k] * delta).exp();
                        let bb = lin(&s6.w_b.weight, ut, k) * delta;
                        h[c][k] = ab * h[c][k] + bb * ut[c];
                        o += lin(&s6.w_c.weight, ut, k) * h[c][k];
                    }
                    merged[cell][c] += o;
                }
            }
        }
        for t in 0..m {
            let gated: Vec<f64> = (0..e)
                .map(|c| merged[t][c] * silu(lin(&p.gate_proj.weight, xrow(t), c)))
                .collect();
            for c in 0..e {
                let want = lin(&p.out_proj.as_ref().unwrap().weight, &gated, c);
                assert!((y.data()[t * e + c] - want).abs() < 1e-12, "t={t} c={c}");
            }
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let p = block(6, &[ScanKind::RowMajorForward]);
        assert!(mamba_block_forward(&Tensor::zeros([5, 4]), &p, (2, 3)).is_err());
    }
}
