//! Offline calibration: per-step channel maxima → threshold `θ` → inlier
//! scales `S^I(t)` over the channels at or below `θ`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{is_plain_file_name, read_tensor, write_atomic, write_tensor};
use crate::ssm::{patchify, ActKind, ScanHook, Site, ToyVmmModel};
use crate::tensor::Tensor;

use super::{scale_from_max, QuantConfig};

/// Calibration of one activation kind at one scan site.
#[derive(Clone, Debug, PartialEq)]
pub struct KindCalibration {
    pub theta: f64,
    /// `S^I(t)`, one per time-step.
    pub inlier_scales: Vec<f64>,
    /// `M×E`: max magnitude of each channel at each step, pooled over samples.
    pub channel_max: Tensor,
}

impl KindCalibration {
    /// Recomputes `θ` and `S^I` from `channel_max`.
    pub fn from_stats(channel_max: Tensor, rho: f64, bits: u32) -> Result<Self> {
        let (m, e) = channel_max.dims2("calibration stats")?;
        if m == 0 || e == 0 {
            return Err(Error::InvalidArgument(
                "empty calibration statistics".into(),
            ));
        }
        let theta = quantile(channel_max.data(), 1.0 - rho);
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::Degenerate(format!(
                "outlier threshold {theta} from all-zero activations"
            )));
        }
        let inlier_scales = channel_max
            .data()
            .chunks(e)
            .map(|row| {
                scale_from_max(
                    row.iter()
                        .copied()
                        .filter(|&v| v <= theta)
                        .fold(0.0, f64::max),
                    bits,
                )
            })
            .collect();
        Ok(Self {
            theta,
            inlier_scales,
            channel_max,
        })
    }

    /// Scale of one tensor covering every calibration activation.
    pub fn static_scale(&self, bits: u32) -> f64 {
        scale_from_max(self.channel_max.max_abs(), bits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub config: QuantConfig,
    pub entries: BTreeMap<(Site, ActKind), KindCalibration>,
}

/// Linear-interpolated quantile (`q ∈ [0, 1]`) of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Records per-step channel maxima of every activation it sees.
#[derive(Default)]
pub(crate) struct StatsRecorder {
    /// `(site, kind)` → per-step rows of `E` channel maxima
    pub stats: BTreeMap<(Site, ActKind), Vec<Vec<f64>>>,
    pub channels: usize,
}

impl ScanHook for StatsRecorder {
    fn on_activation(&mut self, site: Site, kind: ActKind, t: usize, act: &mut [f64]) {
        let e = self.channels;
        let n = act.len() / e;
        let rows = self.stats.entry((site, kind)).or_default();
        if rows.len() <= t {
            rows.resize(t + 1, vec![0.0; e]);
        }
        for (ch, slot) in rows[t].iter_mut().enumerate() {
            let m = act[ch * n..(ch + 1) * n]
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            *slot = slot.max(m);
        }
    }
}

/// Runs the model over `images` (`B×H×W×C`) and fits `θ` and `S^I(t)` for
/// every scan site and activation kind.
pub fn calibrate(
    model: &ToyVmmModel,
    images: &Tensor,
    config: &QuantConfig,
) -> Result<CalibrationResult> {
    config.validate()?;
    let patches = patchify(images, &model.config)?;
    if patches.is_empty() {
        return Err(Error::InvalidArgument("calibration batch is empty".into()));
    }
    let e = model.config.embed_dim;
    let recorders = patches
        .par_iter()
        .map(|p| {
            let mut rec = StatsRecorder {
                channels: e,
                ..Default::default()
            };
            model.forward_sample(p, &mut rec, false)?;
            Ok(rec.stats)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pooled: BTreeMap<(Site, ActKind), Vec<Vec<f64>>> = BTreeMap::new();
    for stats in recorders {
        for (key, rows) in stats {
            match pooled.get_mut(&key) {
                None => {
                    pooled.insert(key, rows);
                }
                Some(acc) => {
                    for (a, r) in acc.iter_mut().zip(rows) {
                        a.iter_mut().zip(r).for_each(|(x, y)| *x = x.max(y));
                    }
                }
            }
        }
    }
    let entries = pooled
        .into_iter()
        .map(|(key, rows)| {
            let m = rows.len();
            let stats = Tensor::new([m, e], rows.concat())?;
            Ok((
                key,
                KindCalibration::from_stats(stats, config.outlier_quantile, config.b_a_inlier)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(CalibrationResult {
        config: config.clone(),
        entries,
    })
}

const FORMAT: &str = "ssmq-calibration";
pub const CALIBRATION_MANIFEST: &str = "calibration.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationManifest {
    pub format: String,
    pub version: u32,
    pub quant: QuantConfig,
    pub entries: Vec<CalibrationEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationEntry {
    pub layer: usize,
    pub direction: usize,
    pub kind: ActKind,
    pub theta: f64,
    pub scales_file: String,
    pub stats_file: String,
}

impl CalibrationManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)
            .map_err(|e| Error::format("calibration manifest", e.to_string()))?;
        if m.format != FORMAT || m.version != 1 {
            return Err(Error::format(
                "calibration manifest",
                format!("unsupported format {} v{}", m.format, m.version),
            ));
        }
        m.quant.validate()?;
        for e in &m.entries {
            if !(e.theta.is_finite() && e.theta > 0.0) {
                return Err(Error::format(
                    "calibration manifest",
                    format!("bad theta {}", e.theta),
                ));
            }
            for f in [&e.scales_file, &e.stats_file] {
                if !is_plain_file_name(f) {
                    return Err(Error::format(
                        "calibration manifest",
                        format!("bad file name `{f}`"),
                    ));
                }
            }
        }
        Ok(m)
    }
}

impl CalibrationResult {
    pub fn get(&self, site: Site, kind: ActKind) -> Result<&KindCalibration> {
        self.entries.get(&(site, kind)).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no calibration for layer {} direction {} {}",
                site.layer,
                site.direction,
                kind.name()
            ))
        })
    }

    pub fn manifest(&self) -> CalibrationManifest {
        let entries = self
            .entries
            .iter()
            .map(|(&(site, kind), c)| {
                let stem = format!("l{}.d{}.{}", site.layer, site.direction, kind.name());
                CalibrationEntry {
                    layer: site.layer,
                    direction: site.direction,
                    kind,
                    theta: c.theta,
                    scales_file: format!("{stem}.scales.bin"),
                    stats_file: format!("{stem}.channel_max.bin"),
                }
            })
            .collect();
        CalibrationManifest {
            format: FORMAT.into(),
            version: 1,
            quant: self.config.clone(),
            entries,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for (entry, cal) in manifest.entries.iter().zip(self.entries.values()) {
            let scales = Tensor::new([cal.inlier_scales.len()], cal.inlier_scales.clone())?;
            write_tensor(&dir.join(&entry.scales_file), &scales)?;
            write_tensor(&dir.join(&entry.stats_file), &cal.channel_max)?;
        }
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(CALIBRATION_MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CALIBRATION_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = CalibrationManifest::parse(&text)?;
        let mut entries = BTreeMap::new();
        for e in &manifest.entries {
            let scales = read_tensor(&dir.join(&e.scales_file))?;
            let channel_max = read_tensor(&dir.join(&e.stats_file))?;
            let (m, _) = channel_max.dims2("calibration stats")?;
            if scales.shape() != [m] || scales.data().iter().any(|&s| s <= 0.0) {
                return Err(Error::format(
                    e.scales_file.clone(),
                    format!(
                        "expected {m} positive scales, got shape {:?}",
                        scales.shape()
                    ),
                ));
            }
            let key = (
                Site {
                    layer: e.layer,
                    direction: e.direction,
                },
                e.kind,
            );
            let cal = KindCalibration {
                theta: e.theta,
                inlier_scales: scales.into_data(),
                channel_max,
            };
            if entries.insert(key, cal).is_some() {
                return Err(Error::format(
                    "calibration manifest",
                    format!("duplicate entry {key:?}"),
                ));
            }
        }
        Ok(Self {
            config: manifest.quant,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::ssm::ModelConfig;

    #[test]
    fn quantile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.9) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn constant_activations_give_constant_scales() {
        let stats = Tensor::full([5, 3], 2.0);
        let c = KindCalibration::from_stats(stats, 0.01, 4).unwrap();
        assert!(c.inlier_scales.iter().all(|&s| s == 2.0 / 7.0));
        assert_eq!(c.theta, 2.0);
    }

    #[test]
    fn spiked_channel_is_excluded() {
        let mut rng = SeededRng::new(3);
        let mut stats = rng.uniform_tensor([64, 16], 0.5, 1.0).into_data();
        for t in 0..64 {
            stats[t * 16 + 5] *= 100.0;
        }
        // One channel in sixteen is spiked, so ρ = 1/16 puts θ between the two groups.
        let c =
            KindCalibration::from_stats(Tensor::new([64, 16], stats.clone()).unwrap(), 0.0625, 4)
                .unwrap();
        assert!(c.theta > 1.0 && c.theta < 50.0);
        for t in 0..64 {
            let others = (0..16)
                .filter(|&ch| ch != 5)
                .map(|ch| stats[t * 16 + ch])
                .fold(0.0, f64::max);
            assert!((c.inlier_scales[t] - others / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rho_zero_keeps_every_channel() {
        let stats = SeededRng::new(4).uniform_tensor([8, 4], 0.0, 3.0);
        let c = KindCalibration::from_stats(stats.clone(), 0.0, 8).unwrap();
        assert_eq!(c.theta, stats.max_abs());
        for (t, row) in stats.data().chunks(4).enumerate() {
            assert_eq!(
                c.inlier_scales[t],
                row.iter().copied().fold(0.0, f64::max) / 127.0
            );
        }
    }

    fn small_model() -> ToyVmmModel {
        let cfg = ModelConfig {
            embed_dim: 4,
            state_dim: 2,
            rows: 2,
            cols: 3,
            patch: 2,
            classes: 3,
            ..ModelConfig::default()
        };
        ToyVmmModel::new(cfg, 7).unwrap()
    }

    #[test]
    fn calibration_covers_every_site_and_round_trips() {
        let model = small_model();
        let (h, w, c) = model.config.image_dims();
        let imgs = SeededRng::new(5).normal_tensor([3, h, w, c], 1.0);
        let cal = calibrate(&model, &imgs, &QuantConfig::default()).unwrap();
        assert_eq!(cal.entries.len(), 2 * 2 * 2);
        assert!(cal
            .entries
            .values()
            .all(|k| k.inlier_scales.len() == 6 && k.theta > 0.0));
        let dir = tempfile::tempdir().unwrap();
        cal.save(dir.path()).unwrap();
        assert_eq!(CalibrationResult::load(dir.path()).unwrap(), cal);
        assert_eq!(
            cal,
            calibrate(&model, &imgs, &QuantConfig::default()).unwrap()
        );
        assert!(calibrate(
            &model,
            &Tensor::zeros([0, h, w, c]),
            &QuantConfig::default()
        )
        .is_err());
    }

    #[test]
    fn manifest_rejects_bad_entries() {
        let model = small_model();
        let (h, w, c) = model.config.image_dims();
        let cal = calibrate(
            &model,
            &SeededRng::new(6).normal_tensor([1, h, w, c], 1.0),
            &QuantConfig::default(),
        )
        .unwrap();
        let text = toml::to_string(&cal.manifest()).unwrap();
        assert!(CalibrationManifest::parse(&text).is_ok());
        assert!(
            CalibrationManifest::parse(&text.replacen("l0.d0.input.scales.bin", "../x", 1))
                .is_err()
        );
        assert!(
            CalibrationManifest::parse(&text.replacen("version = 1", "version = 2", 1)).is_err()
        );
        assert!(CalibrationManifest::parse(&format!("extra = 1\n{text}")).is_err());
    }
}
