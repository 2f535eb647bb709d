use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::block::block_forward_hooked;
use super::{BlockTrace, DirectionMerge, Linear, MambaBlockParams, NoHook, ScanHook, ScanKind};

/// Architecture of the toy vision model. Defaults: 4×4 patches on an 8×8 grid,
/// `E = 16`, `N = 4`, two blocks, ten classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub state_dim: usize,
    pub blocks: usize,
    pub classes: usize,
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub in_channels: usize,
    pub conv_width: usize,
    pub scan_orders: Vec<ScanKind>,
    pub merge: DirectionMerge,
    pub out_proj: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            state_dim: 4,
            blocks: 2,
            classes: 10,
            patch: 4,
            rows: 8,
            cols: 8,
            in_channels: 3,
            conv_width: 4,
            scan_orders: vec![ScanKind::RowMajorForward, ScanKind::RowMajorBackward],
            merge: DirectionMerge::Sum,
            out_proj: true,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (
            self.rows * self.patch,
            self.cols * self.patch,
            self.in_channels,
        )
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("blocks", self.blocks),
            ("patch", self.patch),
            ("rows", self.rows),
            ("cols", self.cols),
            ("in_channels", self.in_channels),
            ("conv_width", self.conv_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be at least 2".into()));
        }
        if self.scan_orders.is_empty() {
            return Err(Error::Config("model.scan_orders must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVmmModel {
    pub config: ModelConfig,
    /// patch features → E, with bias
    pub embed: Linear,
    pub blocks: Vec<MambaBlockParams>,
    /// E → classes, with bias
    pub head: Linear,
}

/// Output of one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub logits: Vec<f64>,
    /// Output of every block, `M×E`.
    pub layer_outputs: Vec<Tensor>,
    /// Present when traces were requested.
    pub traces: Vec<BlockTrace>,
}

impl ToyVmmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let e = config.embed_dim;
        let embed = Linear::init(&mut rng, config.patch_features(), e, true);
        let blocks = (0..config.blocks)
            .map(|_| {
                let mut b = MambaBlockParams::init(
                    &mut rng,
                    e,
                    config.state_dim,
                    config.conv_width,
                    &config.scan_orders,
                    config.out_proj,
                );
                b.merge = config.merge;
                b
            })
            .collect();
        let head = Linear::init(&mut rng, e, config.classes, true);
        Ok(Self {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.embed.in_dim() != self.config.patch_features()
            || self.embed.out_dim() != self.config.embed_dim
        {
            return Err(Error::shape("ToyVmmModel", "embedding dims"));
        }
        if self.head.in_dim() != self.config.embed_dim || self.head.out_dim() != self.config.classes
        {
            return Err(Error::shape("ToyVmmModel", "head dims"));
        }
        if self.blocks.len() != self.config.blocks {
            return Err(Error::InvalidArgument(
                "block count differs from config".into(),
            ));
        }
        self.blocks.iter().try_for_each(MambaBlockParams::validate)
    }

    pub fn layout(&self) -> (usize, usize) {
        (self.config.rows, self.config.cols)
    }

    /// Block `layer` alone on its `M×E` input.
    pub fn forward_block(
        &self,
        layer: usize,
        x: &Tensor,
        hook: &mut dyn ScanHook,
    ) -> Result<Tensor> {
        let block = self.blocks.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "block {layer} of a {}-block model",
                self.blocks.len()
            ))
        })?;
        Ok(block_forward_hooked(x, block, self.layout(), layer, hook, false)?.0)
    }

    /// Forward of one sample given its `M×P` patch matrix.
    pub fn forward_sample(
        &self,
        patches: &Tensor,
        hook: &mut dyn ScanHook,
        keep_traces: bool,
    ) -> Result<SampleForward> {
        let mut x = self.embed.apply(patches)?;
        let mut layer_outputs = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::new();
        for (layer, block) in self.blocks.iter().enumerate() {
            let (y, trace) =
                block_forward_hooked(&x, block, self.layout(), layer, hook, keep_traces)?;
            traces.extend(trace);
            layer_outputs.push(y.clone());
            x = y;
        }
        let pooled = x.sum_axis0()?.scale(1.0 / x.dim(0) as f64);
        let logits = self.head.apply_vec(pooled.data());
        Ok(SampleForward {
            logits,
            layer_outputs,
            traces,
        })
    }
}

/// Splits `B×H×W×C` images into `B` patch matrices of shape `M×(p·p·C)`,
/// tokens in row-major grid order, features ordered (row, col, channel).
pub fn patchify(images: &Tensor, config: &ModelConfig) -> Result<Vec<Tensor>> {
    let [b, h, w, c] = images.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected B×H×W×C, got {:?}", images.shape()),
        ));
    };
    let (b, h, w, c) = (*b, *h, *w, *c);
    let p = config.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}×{w} not divisible by patch {p}"),
        ));
    }
    if (h / p, w / p, c) != (config.rows, config.cols, config.in_channels) {
        return Err(Error::shape(
            "patchify",
            format!(
                "image {h}×{w}×{c} vs grid {}×{} of {p}-patches with {} channels",
                config.rows, config.cols, config.in_channels
            ),
        ));
    }
    let data = images.data();
    let feat = p * p * c;
    let (gr, gc) = (h / p, w / p);
    Ok((0..b)
        .map(|s| {
            let mut out = Vec::with_capacity(gr * gc * feat);
            for r in 0..gr {
                for q in 0..gc {
                    for pr in 0..p {
                        let row = r * p + pr;
                        let start = ((s * h + row) * w + q * p) * c;
                        out.extend_from_slice(&data[start..start + p * c]);
                    }
                }
            }
            Tensor::new([gr * gc, feat], out).unwrap()
        })
        .collect())
}

/// Inverse of [`patchify`]: `B` patch matrices back to `B×H×W×C` images.
pub fn unpatchify(patches: &[Tensor], config: &ModelConfig) -> Result<Tensor> {
    let (h, w, c) = config.image_dims();
    let p = config.patch;
    let feat = config.patch_features();
    let mut out = vec![0.0; patches.len() * h * w * c];
    for (s, pm) in patches.iter().enumerate() {
        if pm.shape() != [config.tokens(), feat] {
            return Err(Error::shape(
                "unpatchify",
                format!("{:?} vs {}x{feat}", pm.shape(), config.tokens()),
            ));
        }
        let src = pm.data();
        let mut at = 0;
        for r in 0..config.rows {
            for q in 0..config.cols {
                for pr in 0..p {
                    let start = ((s * h + r * p + pr) * w + q * p) * c;
                    out[start..start + p * c].copy_from_slice(&src[at..at + p * c]);
                    at += p * c;
                }
            }
        }
    }
    Tensor::new([patches.len(), h, w, c], out)
}

/// Batched forward: `B×H×W×C` images to `B×classes` logits.
pub fn vmm_forward(images: &Tensor, model: &ToyVmmModel) -> Result<Tensor> {
    let patches = patchify(images, &model.config)?;
    let rows = patches
        .par_iter()
        .map(|p| {
            model
                .forward_sample(p, &mut NoHook, false)
                .map(|f| f.logits)
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = model.config.classes;
    Tensor::new([rows.len(), classes], rows.concat())
}
