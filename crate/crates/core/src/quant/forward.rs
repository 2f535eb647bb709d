//! Fake-quantized inference of the toy model and its error report.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::ssm::{patchify, ActKind, ScanHook, Site, ToyVmmModel};
use crate::tensor::Tensor;

use super::{
    dequantize, detect_outliers, maybe_refresh, quantize_activation_step, quantize_symmetric,
    scale_for, CalibrationResult, OutlierState, QuantConfig,
};

/// Per-output-channel symmetric weight codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedWeights {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows×cols`.
    pub codes: Vec<i8>,
    /// `S^W_r`, one per row.
    pub scales: Vec<f64>,
}

impl QuantizedWeights {
    pub fn dequantize(&self) -> Tensor {
        let data = self
            .codes
            .chunks(self.cols.max(1))
            .zip(&self.scales)
            .flat_map(|(row, &s)| dequantize(row, s))
            .collect();
        Tensor::new([self.rows, self.cols], data).expect("weight shape")
    }
}

/// Quantizes each row of `w: out×in` with its own scale.
pub fn quantize_weights(w: &Tensor, bits: u32) -> Result<QuantizedWeights> {
    let (rows, cols) = w.dims2("quantize_weights")?;
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for row in w.data().chunks(cols.max(1)).take(rows) {
        let s = scale_for(row, bits);
        codes.extend(quantize_symmetric(row, s, bits)?);
        scales.push(s);
    }
    Ok(QuantizedWeights {
        rows,
        cols,
        codes,
        scales,
    })
}

/// Copy of `model` whose projection weights and conv taps went through
/// per-row quantize/dequantize. Biases and `A` stay in full precision.
pub fn fake_quant_model(model: &ToyVmmModel, bits: u32) -> Result<ToyVmmModel> {
    let mut q = model.clone();
    for (name, t) in q.named_tensors_mut() {
        if name.ends_with(".weight") || name.ends_with(".taps") {
            *t = quantize_weights(t, bits)?.dequantize();
        }
    }
    Ok(q)
}

/// How S6 activations are quantized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActivationScheme {
    /// Per-step inlier scale plus the dynamic outlier detector.
    #[default]
    Dynamic,
    /// One calibrated scale per activation tensor, no outlier handling.
    StaticPerTensor,
}

/// Transient outliers injected into S6 activations for stress tests: each
/// channel of each step is multiplied by `magnitude` with probability `rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpikeSpec {
    pub rate: f64,
    pub magnitude: f64,
    pub seed: u64,
}

impl SpikeSpec {
    fn apply(
        &self,
        sample: usize,
        site: Site,
        kind: ActKind,
        t: usize,
        act: &mut [f64],
        channels: usize,
    ) {
        let stream = ((((sample as u64) << 20 | site.layer as u64) << 8 | site.direction as u64)
            << 2
            | kind as u64)
            << 24
            | t as u64;
        let mut rng = SeededRng::new(self.seed).fork(stream);
        let n = act.len() / channels;
        for ch in 0..channels {
            if rng.bernoulli(self.rate) {
                act[ch * n..(ch + 1) * n]
                    .iter_mut()
                    .for_each(|v| *v *= self.magnitude);
            }
        }
    }
}

/// Per-step outlier-list sizes, summed over samples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Timeline {
    /// Size carried into the step after the refresh check.
    pub carried: Vec<usize>,
    /// Size after detection.
    pub listed: Vec<usize>,
}

impl Timeline {
    fn record(&mut self, t: usize, carried: usize, listed: usize) {
        if self.carried.len() <= t {
            self.carried.resize(t + 1, 0);
            self.listed.resize(t + 1, 0);
        }
        self.carried[t] += carried;
        self.listed[t] += listed;
    }
}

struct SpikeHook {
    spikes: Option<SpikeSpec>,
    sample: usize,
    channels: usize,
}

impl ScanHook for SpikeHook {
    fn on_activation(&mut self, site: Site, kind: ActKind, t: usize, act: &mut [f64]) {
        if let Some(s) = &self.spikes {
            s.apply(self.sample, site, kind, t, act, self.channels);
        }
    }
}

struct QuantHook<'a> {
    spikes: SpikeHook,
    calib: &'a CalibrationResult,
    config: &'a QuantConfig,
    scheme: ActivationScheme,
    states: BTreeMap<(Site, ActKind), OutlierState>,
    timeline: BTreeMap<(Site, ActKind), Timeline>,
    error: Option<Error>,
}

impl QuantHook<'_> {
    fn quantize(&mut self, site: Site, kind: ActKind, t: usize, act: &mut [f64]) -> Result<()> {
        let cal = self.calib.get(site, kind)?;
        let e = self.spikes.channels;
        let bits = self.config.b_a_inlier;
        match self.scheme {
            ActivationScheme::StaticPerTensor => {
                let s = cal.static_scale(bits);
                let back = dequantize(&quantize_symmetric(act, s, bits)?, s);
                act.copy_from_slice(&back);
            }
            ActivationScheme::Dynamic => {
                let s_i = *cal.inlier_scales.get(t).ok_or_else(|| {
                    Error::shape(
                        "quantized_forward",
                        format!(
                            "step {t} beyond {} calibrated steps",
                            cal.inlier_scales.len()
                        ),
                    )
                })?;
                let state = self.states.entry((site, kind)).or_default();
                maybe_refresh(state, t, self.config.n_refresh);
                let carried = state.o_list.len();
                detect_outliers(act, e, cal.theta, s_i, bits, state);
                let q = quantize_activation_step(act, e, s_i, state, self.config)?;
                act.copy_from_slice(&q.dequantize());
                self.timeline.entry((site, kind)).or_default().record(
                    t,
                    carried,
                    state.o_list.len(),
                );
            }
        }
        Ok(())
    }
}

impl ScanHook for QuantHook<'_> {
    fn on_activation(&mut self, site: Site, kind: ActKind, t: usize, act: &mut [f64]) {
        self.spikes.on_activation(site, kind, t, act);
        if self.error.is_none() {
            if let Err(e) = self.quantize(site, kind, t, act) {
                self.error = Some(e);
            }
        }
    }
}

/// Quantized and full-precision results on the same inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantReport {
    /// `B×classes`
    pub logits: Tensor,
    pub fp_logits: Tensor,
    /// Mean squared difference of each block's output against full precision,
    /// with quantization error carried through the earlier blocks.
    pub layer_mse: Vec<f64>,
    /// The same with each quantized block fed its full-precision input, so
    /// every entry measures that block's own quantization error.
    pub layer_mse_isolated: Vec<f64>,
    /// Mean square of each block's full-precision output, for scale.
    pub layer_power: Vec<f64>,
    /// Fraction of samples whose argmax class matches full precision.
    pub agreement: f64,
    pub timeline: BTreeMap<(Site, ActKind), Timeline>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Runs `images` through the full-precision model and the fake-quantized one.
///
/// Both passes see the same injected spikes, if any. With `config.bypass`
/// the second pass is also full precision.
pub fn quantized_forward(
    model: &ToyVmmModel,
    images: &Tensor,
    calib: &CalibrationResult,
    config: &QuantConfig,
    scheme: ActivationScheme,
    spikes: Option<SpikeSpec>,
) -> Result<QuantReport> {
    config.validate()?;
    if !config.bypass && calib.config.b_a_inlier != config.b_a_inlier {
        return Err(Error::Config(format!(
            "calibration was fitted for {}-bit inliers, config asks for {}",
            calib.config.b_a_inlier, config.b_a_inlier
        )));
    }
    let qmodel = if config.bypass {
        model.clone()
    } else {
        fake_quant_model(model, config.b_w)?
    };
    let patches = patchify(images, &model.config)?;
    let e = model.config.embed_dim;
    let runs = patches
        .par_iter()
        .enumerate()
        .map(|(sample, p)| {
            let spike_hook = || SpikeHook {
                spikes,
                sample,
                channels: e,
            };
            let fp = model.forward_sample(p, &mut spike_hook(), false)?;
            if config.bypass {
                let q = qmodel.forward_sample(p, &mut spike_hook(), false)?;
                let isolated = q.layer_outputs.clone();
                return Ok((fp, q, isolated, BTreeMap::new()));
            }
            let quant_hook = || QuantHook {
                spikes: spike_hook(),
                calib,
                config,
                scheme,
                states: BTreeMap::new(),
                timeline: BTreeMap::new(),
                error: None,
            };
            let mut hook = quant_hook();
            let q = qmodel.forward_sample(p, &mut hook, false)?;
            if let Some(err) = hook.error {
                return Err(err);
            }
            // Each block again, fed the full-precision input it would see.
            let mut isolated = Vec::with_capacity(fp.layer_outputs.len());
            let mut input = model.embed.apply(p)?;
            for (layer, fp_out) in fp.layer_outputs.iter().enumerate() {
                let mut h = quant_hook();
                isolated.push(qmodel.forward_block(layer, &input, &mut h)?);
                if let Some(err) = h.error {
                    return Err(err);
                }
                input = fp_out.clone();
            }
            Ok((fp, q, isolated, hook.timeline))
        })
        .collect::<Result<Vec<_>>>()?;

    let b = runs.len();
    let layers = model.blocks.len();
    let mut layer_mse = vec![0.0; layers];
    let mut layer_power = vec![0.0; layers];
    let mut layer_mse_isolated = vec![0.0; layers];
    let mut agree = 0usize;
    let mut logits = Vec::new();
    let mut fp_logits = Vec::new();
    let mut timeline: BTreeMap<(Site, ActKind), Timeline> = BTreeMap::new();
    for (fp, q, isolated, tl) in runs {
        for (l, ((a, c), iso)) in fp
            .layer_outputs
            .iter()
            .zip(&q.layer_outputs)
            .zip(&isolated)
            .enumerate()
        {
            layer_mse[l] += a.sub(c)?.map(|v| v * v).mean() / b as f64;
            layer_mse_isolated[l] += a.sub(iso)?.map(|v| v * v).mean() / b as f64;
            layer_power[l] += a.map(|v| v * v).mean() / b as f64;
        }
        agree += usize::from(argmax(&fp.logits) == argmax(&q.logits));
        logits.extend(q.logits);
        fp_logits.extend(fp.logits);
        for (key, t) in tl {
            let acc = timeline.entry(key).or_default();
            for (step, (&c, &l)) in t.carried.iter().zip(&t.listed).enumerate() {
                acc.record(step, c, l);
            }
        }
    }
    let classes = model.config.classes;
    Ok(QuantReport {
        logits: Tensor::new([b, classes], logits)?,
        fp_logits: Tensor::new([b, classes], fp_logits)?,
        layer_mse,
        layer_mse_isolated,
        layer_power,
        agreement: if b == 0 { 1.0 } else { agree as f64 / b as f64 },
        timeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{calibrate, RefreshPeriod};
    use crate::ssm::ModelConfig;

    fn setup(seed: u64) -> (ToyVmmModel, Tensor, Tensor) {
        let cfg = ModelConfig {
            embed_dim: 8,
            state_dim: 2,
            rows: 4,
            cols: 4,
            patch: 2,
            classes: 4,
            ..ModelConfig::default()
        };
        let model = ToyVmmModel::new(cfg, seed).unwrap();
        let (h, w, c) = model.config.image_dims();
        let mut rng = SeededRng::new(seed);
        (
            model,
            rng.normal_tensor([4, h, w, c], 1.0),
            rng.normal_tensor([3, h, w, c], 1.0),
        )
    }

    #[test]
    fn weight_codes_and_bounds() {
        let mut rng = SeededRng::new(1);
        let w = rng.normal_tensor([8, 8], 1.0);
        let q = quantize_weights(&w, 4).unwrap();
        assert!(q.codes.iter().all(|c| (-7..=7).contains(c)));
        let back = q.dequantize();
        for r in 0..8 {
            for c in 0..8 {
                assert!(
                    (back.data()[r * 8 + c] - w.data()[r * 8 + c]).abs()
                        <= q.scales[r] / 2.0 + 1e-15
                );
            }
        }
        let mut z = w.clone().into_data();
        z[..8].iter_mut().for_each(|v| *v = 0.0);
        let tripled: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, v)| if i / 8 == 1 { v * 3.0 } else { *v })
            .collect();
        let qz = quantize_weights(&Tensor::new([8, 8], z).unwrap(), 4).unwrap();
        let qt = quantize_weights(&Tensor::new([8, 8], tripled).unwrap(), 4).unwrap();
        assert!(qz.codes[..8].iter().all(|&c| c == 0));
        assert_eq!(qz.scales[0], 1.0);
        assert_eq!(qz.codes, qt.codes);
        assert!((qt.scales[1] - 3.0 * qz.scales[1]).abs() < 1e-15);
    }

    #[test]
    fn bypass_reproduces_full_precision() {
        let (model, calib_imgs, eval) = setup(2);
        let cfg = QuantConfig {
            bypass: true,
            ..QuantConfig::default()
        };
        let cal = calibrate(&model, &calib_imgs, &QuantConfig::default()).unwrap();
        let r =
            quantized_forward(&model, &eval, &cal, &cfg, ActivationScheme::Dynamic, None).unwrap();
        assert_eq!(r.logits, r.fp_logits);
        assert_eq!(r.agreement, 1.0);
        assert!(r.layer_mse.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn deterministic_and_bits_checked() {
        let (model, calib_imgs, eval) = setup(3);
        let cfg = QuantConfig::default();
        let cal = calibrate(&model, &calib_imgs, &cfg).unwrap();
        let spikes = Some(SpikeSpec {
            rate: 0.05,
            magnitude: 30.0,
            seed: 9,
        });
        let a = quantized_forward(&model, &eval, &cal, &cfg, ActivationScheme::Dynamic, spikes)
            .unwrap();
        let b = quantized_forward(&model, &eval, &cal, &cfg, ActivationScheme::Dynamic, spikes)
            .unwrap();
        assert_eq!(a, b);
        let w4a8 = QuantConfig {
            b_a_inlier: 7,
            ..cfg
        };
        assert!(matches!(
            quantized_forward(&model, &eval, &cal, &w4a8, ActivationScheme::Dynamic, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn timeline_resets_at_refresh_boundaries() {
        let (model, calib_imgs, eval) = setup(4);
        let cfg = QuantConfig {
            n_refresh: RefreshPeriod::Every(5),
            ..QuantConfig::default()
        };
        let cal = calibrate(&model, &calib_imgs, &cfg).unwrap();
        let spikes = Some(SpikeSpec {
            rate: 0.1,
            magnitude: 50.0,
            seed: 1,
        });
        let r = quantized_forward(&model, &eval, &cal, &cfg, ActivationScheme::Dynamic, spikes)
            .unwrap();
        let mut saw_carry = false;
        for tl in r.timeline.values() {
            assert_eq!(tl.carried.len(), 16);
            for (t, &c) in tl.carried.iter().enumerate() {
                if t % 5 == 0 {
                    assert_eq!(c, 0);
                } else {
                    saw_carry |= c > 0;
                }
            }
        }
        assert!(saw_carry);
    }

    #[test]
    fn dynamic_beats_static_under_spikes() {
        let (model, calib_imgs, eval) = setup(5);
        let cfg = QuantConfig::default();
        let cal = calibrate(&model, &calib_imgs, &cfg).unwrap();
        let spikes = Some(SpikeSpec {
            rate: 0.05,
            magnitude: 40.0,
            seed: 2,
        });
        let d = quantized_forward(&model, &eval, &cal, &cfg, ActivationScheme::Dynamic, spikes)
            .unwrap();
        let s = quantized_forward(
            &model,
            &eval,
            &cal,
            &cfg,
            ActivationScheme::StaticPerTensor,
            spikes,
        )
        .unwrap();
        for (a, b) in d.layer_mse.iter().zip(&s.layer_mse) {
            assert!(a < b, "{a} vs {b}");
        }
    }
}
