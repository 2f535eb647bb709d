//! Runtime outlier detection for one activation stream.

use crate::error::{Error, Result};

use super::{
    dequantize, quantize_symmetric, scale_for, scale_from_max, QuantConfig, RefreshPeriod,
};

/// Outlier channels carried across time-steps of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OutlierState {
    /// Sorted, duplicate-free channel indices.
    pub o_list: Vec<usize>,
    pub steps_since_refresh: usize,
}

impl OutlierState {
    pub fn contains(&self, ch: usize) -> bool {
        self.o_list.binary_search(&ch).is_ok()
    }

    fn insert(&mut self, ch: usize) {
        if let Err(pos) = self.o_list.binary_search(&ch) {
            self.o_list.insert(pos, ch);
        }
    }
}

/// Clears the list at the start of every `period`-th step (`t = 0, n, 2n, …`).
pub fn maybe_refresh(state: &mut OutlierState, t: usize, period: RefreshPeriod) {
    match period {
        RefreshPeriod::Every(n) => {
            let n = n.max(1);
            if t % n == 0 {
                state.o_list.clear();
            }
            state.steps_since_refresh = t % n;
        }
        RefreshPeriod::Never => {
            if t == 0 {
                state.o_list.clear();
            }
            state.steps_since_refresh = 0;
        }
    }
}

fn channel_max(x: &[f64], e: usize, ch: usize) -> f64 {
    let n = x.len() / e;
    x[ch * n..(ch + 1) * n]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Updates `state` for the step whose `E×N` activation is `x`.
///
/// `S^D` is fitted over the channels not yet listed. Only when it exceeds the
/// calibrated `S^I(t)` does the detector scan every channel and append those
/// whose max magnitude is above `θ`. Returns whether the scan ran.
pub fn detect_outliers(
    x: &[f64],
    channels: usize,
    theta: f64,
    inlier_scale: f64,
    bits: u32,
    state: &mut OutlierState,
) -> bool {
    let unlisted_max = (0..channels)
        .filter(|&ch| !state.contains(ch))
        .map(|ch| channel_max(x, channels, ch))
        .fold(0.0, f64::max);
    if scale_from_max(unlisted_max, bits) <= inlier_scale || unlisted_max == 0.0 {
        return false;
    }
    for ch in 0..channels {
        if !state.contains(ch) && channel_max(x, channels, ch) > theta {
            state.insert(ch);
        }
    }
    true
}

/// One activation tensor split into an inlier plane and outlier channels.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivationStep {
    pub channels: usize,
    /// `E×N` codes at `b_a_inlier`; outlier channels are zero.
    pub inlier_codes: Vec<i8>,
    pub inlier_scale: f64,
    pub outlier_channels: Vec<usize>,
    /// One `N`-vector of codes per outlier channel at `b_a_outlier`.
    pub outlier_codes: Vec<Vec<i8>>,
    pub outlier_scales: Vec<f64>,
}

impl QuantizedActivationStep {
    pub fn dequantize(&self) -> Vec<f64> {
        let mut out = dequantize(&self.inlier_codes, self.inlier_scale);
        let n = out.len() / self.channels;
        for ((&ch, codes), &s) in self
            .outlier_channels
            .iter()
            .zip(&self.outlier_codes)
            .zip(&self.outlier_scales)
        {
            out[ch * n..(ch + 1) * n].copy_from_slice(&dequantize(codes, s));
        }
        out
    }
}

/// Quantizes `x: E×N` given the already-updated `state`.
pub fn quantize_activation_step(
    x: &[f64],
    channels: usize,
    inlier_scale: f64,
    state: &OutlierState,
    config: &QuantConfig,
) -> Result<QuantizedActivationStep> {
    if channels == 0 || x.len() % channels != 0 {
        return Err(Error::shape(
            "quantize_activation_step",
            format!("{} values for {channels} channels", x.len()),
        ));
    }
    if let Some(&bad) = state.o_list.iter().find(|&&c| c >= channels) {
        return Err(Error::InvalidArgument(format!(
            "outlier channel {bad} out of range"
        )));
    }
    let n = x.len() / channels;
    let mut inlier_codes = quantize_symmetric(x, inlier_scale, config.b_a_inlier)?;
    let mut outlier_codes = Vec::with_capacity(state.o_list.len());
    let mut outlier_scales = Vec::with_capacity(state.o_list.len());
    for &ch in &state.o_list {
        let row = &x[ch * n..(ch + 1) * n];
        let s = scale_for(row, config.b_a_outlier);
        outlier_codes.push(quantize_symmetric(row, s, config.b_a_outlier)?);
        outlier_scales.push(s);
        inlier_codes[ch * n..(ch + 1) * n]
            .iter_mut()
            .for_each(|c| *c = 0);
    }
    Ok(QuantizedActivationStep {
        channels,
        inlier_codes,
        inlier_scale,
        outlier_channels: state.o_list.clone(),
        outlier_codes,
        outlier_scales,
    })
}
