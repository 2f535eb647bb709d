//! Selective state-space layers and the toy vision model built from them.

mod block;
pub mod checkpoint;
mod model;
mod order;
mod scan;

pub use block::{mamba_block_forward, BlockTrace, CausalConv, DirectionMerge, MambaBlockParams};
pub use model::{patchify, unpatchify, vmm_forward, ModelConfig, SampleForward, ToyVmmModel};
pub use order::{invert, ScanKind, ScanOrder};
pub use scan::{
    discretize, s6_scan, s6_step, scan_projected, ActKind, NoHook, Projections, S6Params,
    S6StepTensors, ScanHook, ScanTrace, Site,
};

pub(crate) use order::gather_rows;
pub(crate) use scan::{scan_backward, scan_states};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Affine map over the last axis. `weight` is `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Gaussian weights with std `1/√in`; zero bias when requested.
    pub fn init(rng: &mut SeededRng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: rng.normal_tensor([out_dim, in_dim], 1.0 / (in_dim as f64).sqrt()),
            bias: bias.then(|| Tensor::zeros([out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        linear_apply(x, &self.weight, self.bias.as_ref())
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let w = self.weight.data();
        (0..o)
            .map(|r| {
                let b = self.bias.as_ref().map_or(0.0, |b| b.data()[r]);
                b + w[r * i..(r + 1) * i]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// `x[.., k] · wᵀ + bias` for `w: n×k`.
pub fn linear_apply(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, k) = w.dims2("linear")?;
    let Some((&last, lead)) = x.shape().split_last() else {
        return Err(Error::shape("linear", "rank-0 input"));
    };
    if last != k {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs out {n}", b.shape()),
            ));
        }
    }
    let rows = x.len() / k.max(1);
    let y = x.reshape([rows, k])?.matmul_t(w)?;
    let mut data = y.into_data();
    if let Some(b) = bias {
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let mut shape = lead.to_vec();
    shape.push(n);
    Tensor::new(shape, data)
}
