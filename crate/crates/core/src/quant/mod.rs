//! Symmetric fake quantization, calibration of per-time-step inlier scales,
//! and the runtime outlier detector.
//!
//! Activations are the `E×N` tensors seen by a [`ScanHook`](crate::ssm::ScanHook)
//! at each time-step; a *channel* is one of the `E` rows. Inliers share one
//! scale per tensor per step at `b_a_inlier` bits; channels flagged as outliers
//! get their own scale at `b_a_outlier` bits.

mod calib;
mod detect;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calib::{calibrate, quantile, CalibrationManifest, CalibrationResult, KindCalibration};
pub use detect::{
    detect_outliers, maybe_refresh, quantize_activation_step, OutlierState, QuantizedActivationStep,
};
pub use forward::{
    fake_quant_model, quantize_weights, quantized_forward, ActivationScheme, QuantReport,
    QuantizedWeights, SpikeSpec, Timeline,
};

/// How often the outlier list is cleared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RefreshRepr", into = "RefreshRepr")]
pub enum RefreshPeriod {
    Every(usize),
    /// The list only grows within a sequence.
    Never,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RefreshRepr {
    Steps(usize),
    Word(String),
}

impl TryFrom<RefreshRepr> for RefreshPeriod {
    type Error = String;

    fn try_from(r: RefreshRepr) -> std::result::Result<Self, String> {
        match r {
            RefreshRepr::Steps(0) => Err("n_refresh must be at least 1".into()),
            RefreshRepr::Steps(n) => Ok(RefreshPeriod::Every(n)),
            RefreshRepr::Word(w) if w == "never" => Ok(RefreshPeriod::Never),
            RefreshRepr::Word(w) => Err(format!(
                "n_refresh must be a step count or \"never\", got {w:?}"
            )),
        }
    }
}

impl From<RefreshPeriod> for RefreshRepr {
    fn from(p: RefreshPeriod) -> Self {
        match p {
            RefreshPeriod::Every(n) => RefreshRepr::Steps(n),
            RefreshPeriod::Never => RefreshRepr::Word("never".into()),
        }
    }
}

impl std::fmt::Display for RefreshPeriod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RefreshPeriod::Every(n) => write!(f, "{n}"),
            RefreshPeriod::Never => f.write_str("never"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub b_w: u32,
    pub b_a_inlier: u32,
    pub b_a_outlier: u32,
    pub n_refresh: RefreshPeriod,
    /// `ρ`: the threshold is the `1 − ρ` quantile of calibration channel maxima.
    pub outlier_quantile: f64,
    /// Skip all quantization; the forward pass is full precision.
    pub bypass: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            b_w: 4,
            b_a_inlier: 4,
            b_a_outlier: 8,
            n_refresh: RefreshPeriod::Every(10),
            outlier_quantile: 0.01,
            bypass: false,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("b_w", self.b_w),
            ("b_a_inlier", self.b_a_inlier),
            ("b_a_outlier", self.b_a_outlier),
        ] {
            if !(2..=8).contains(&b) {
                return Err(Error::Config(format!(
                    "quant.{name} must be in 2..=8, got {b}"
                )));
            }
        }
        if self.b_a_inlier > self.b_a_outlier {
            return Err(Error::Config(format!(
                "quant.b_a_inlier ({}) must not exceed quant.b_a_outlier ({})",
                self.b_a_inlier, self.b_a_outlier
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_quantile) {
            return Err(Error::Config(format!(
                "quant.outlier_quantile must be in [0, 1), got {}",
                self.outlier_quantile
            )));
        }
        Ok(())
    }
}

/// Largest code magnitude at `bits`: `2^{b−1} − 1`.
pub fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width {bits} outside 2..=8"
        )));
    }
    Ok(())
}

/// `clip(round(x/s), −qmax, qmax)` with half-away-from-zero rounding.
pub fn quantize_symmetric(x: &[f64], scale: f64, bits: u32) -> Result<Vec<i8>> {
    check_bits(bits)?;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let q = qmax(bits) as f64;
    Ok(x.iter()
        .map(|v| (v / scale).round().clamp(-q, q) as i8)
        .collect())
}

pub fn dequantize(codes: &[i8], scale: f64) -> Vec<f64> {
    codes.iter().map(|&c| c as f64 * scale).collect()
}

/// `max|x| / qmax`, or the sentinel 1 for an all-zero (or empty) tensor.
pub fn scale_for(x: &[f64], bits: u32) -> f64 {
    scale_from_max(x.iter().fold(0.0f64, |m, v| m.max(v.abs())), bits)
}

pub(crate) fn scale_from_max(max_abs: f64, bits: u32) -> f64 {
    if max_abs > 0.0 {
        max_abs / qmax(bits) as f64
    } else {
        1.0
    }
}

/// Quantize then dequantize with a freshly fitted scale.
pub fn fake_quant(x: &[f64], bits: u32) -> Result<Vec<f64>> {
    let s = scale_for(x, bits);
    Ok(dequantize(&quantize_symmetric(x, s, bits)?, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn eq5_examples() {
        assert_eq!(quantize_symmetric(&[0.0; 4], 0.3, 4).unwrap(), vec![0; 4]);
        assert_eq!(
            quantize_symmetric(&[-100.0, 100.0], 1.0, 4).unwrap(),
            vec![-7, 7]
        );
        assert_eq!(
            quantize_symmetric(&[-7.0, 3.5, 7.0], 1.0, 4).unwrap(),
            vec![-7, 4, 7]
        );
        assert_eq!(
            quantize_symmetric(&[-2.5, -0.5, 0.5], 1.0, 8).unwrap(),
            vec![-3, -1, 1]
        );
        assert!(quantize_symmetric(&[1.0], 0.0, 4).is_err());
        assert!(quantize_symmetric(&[1.0], 1.0, 9).is_err());
    }

    #[test]
    fn scale_examples() {
        assert_eq!(scale_for(&[1.0, -7.0], 4), 1.0);
        assert_eq!(scale_for(&[127.0, 3.0], 8), 1.0);
        assert_eq!(scale_for(&[0.0, 0.0], 4), 1.0);
        let mut rng = SeededRng::new(1);
        let x: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        assert_eq!(scale_for(&x2, 4), 2.0 * scale_for(&x, 4));
        let c = quantize_symmetric(&x, scale_for(&x, 4), 4).unwrap();
        assert_eq!(quantize_symmetric(&x2, scale_for(&x2, 4), 4).unwrap(), c);
    }

    #[test]
    fn round_trip_within_half_step() {
        let mut rng = SeededRng::new(2);
        for _ in 0..1000 {
            let s = rng.uniform(0.01, 3.0);
            let b = 2 + rng.index(7) as u32;
            let lim = qmax(b) as f64 * s;
            let x = rng.uniform(-lim, lim);
            let back = dequantize(&quantize_symmetric(&[x], s, b).unwrap(), s)[0];
            assert!((back - x).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn refresh_period_serde() {
        #[derive(Serialize, Deserialize)]
        struct W {
            r: RefreshPeriod,
        }
        assert_eq!(
            toml::from_str::<W>("r = 10").unwrap().r,
            RefreshPeriod::Every(10)
        );
        assert_eq!(
            toml::from_str::<W>("r = \"never\"").unwrap().r,
            RefreshPeriod::Never
        );
        assert!(toml::from_str::<W>("r = 0").is_err());
        assert!(toml::from_str::<W>("r = \"sometimes\"").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(QuantConfig::default().validate().is_ok());
        assert!(QuantConfig {
            b_a_inlier: 8,
            ..Default::default()
        }
        .validate()
        .is_ok());
        assert!(QuantConfig {
            b_a_inlier: 8,
            b_a_outlier: 6,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(QuantConfig {
            b_w: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(QuantConfig {
            outlier_quantile: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
