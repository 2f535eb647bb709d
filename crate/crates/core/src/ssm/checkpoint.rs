//! Model checkpoints: a directory of tensor files plus `manifest.toml`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{is_plain_file_name, read_tensor, write_atomic, write_tensor};
use crate::tensor::Tensor;

use super::{Linear, ModelConfig, ToyVmmModel};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "ssmq-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text)
            .map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
        if m.format != FORMAT || m.version != 1 {
            return Err(Error::format(
                "checkpoint manifest",
                format!("unsupported format {} v{}", m.format, m.version),
            ));
        }
        for t in &m.tensors {
            if !is_plain_file_name(&t.file) {
                return Err(Error::format(
                    "checkpoint manifest",
                    format!("bad tensor file name `{}`", t.file),
                ));
            }
        }
        m.model.validate()?;
        Ok(m)
    }
}

fn linear_entries<'a>(prefix: &str, l: &'a Linear, out: &mut Vec<(String, &'a Tensor)>) {
    out.push((format!("{prefix}.weight"), &l.weight));
    if let Some(b) = &l.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn linear_entries_mut<'a>(
    prefix: &str,
    l: &'a mut Linear,
    out: &mut Vec<(String, &'a mut Tensor)>,
) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    if let Some(b) = &mut l.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

impl ToyVmmModel {
    /// Every parameter tensor with a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        linear_entries("embed", &self.embed, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            linear_entries(&format!("{p}.gate_proj"), &b.gate_proj, &mut out);
            linear_entries(&format!("{p}.in_proj"), &b.in_proj, &mut out);
            out.push((format!("{p}.conv.taps"), &b.conv.taps));
            for (d, s) in b.s6.iter().enumerate() {
                let q = format!("{p}.s6.{d}");
                out.push((format!("{q}.a"), &s.a));
                linear_entries(&format!("{q}.w_b"), &s.w_b, &mut out);
                linear_entries(&format!("{q}.w_c"), &s.w_c, &mut out);
                linear_entries(&format!("{q}.delta_proj"), &s.delta_proj, &mut out);
            }
            if let Some(o) = &b.out_proj {
                linear_entries(&format!("{p}.out_proj"), o, &mut out);
            }
        }
        linear_entries("head", &self.head, &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        linear_entries_mut("embed", &mut self.embed, &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            linear_entries_mut(&format!("{p}.gate_proj"), &mut b.gate_proj, &mut out);
            linear_entries_mut(&format!("{p}.in_proj"), &mut b.in_proj, &mut out);
            out.push((format!("{p}.conv.taps"), &mut b.conv.taps));
            for (d, s) in b.s6.iter_mut().enumerate() {
                let q = format!("{p}.s6.{d}");
                out.push((format!("{q}.a"), &mut s.a));
                linear_entries_mut(&format!("{q}.w_b"), &mut s.w_b, &mut out);
                linear_entries_mut(&format!("{q}.w_c"), &mut s.w_c, &mut out);
                linear_entries_mut(&format!("{q}.delta_proj"), &mut s.delta_proj, &mut out);
            }
            if let Some(o) = &mut b.out_proj {
                linear_entries_mut(&format!("{p}.out_proj"), o, &mut out);
            }
        }
        linear_entries_mut("head", &mut self.head, &mut out);
        out
    }

    pub fn save(&self, dir: &Path, seed: Option<u64>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.bin");
            write_tensor(&dir.join(&file), t)?;
            tensors.push(TensorEntry {
                name,
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: 1,
            seed,
            model: self.config.clone(),
            tensors,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = CheckpointManifest::parse(&text)?;
        let mut model = ToyVmmModel::new(manifest.model.clone(), 0)?;
        let mut slots = model.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::format(
                "checkpoint manifest",
                format!(
                    "{} tensors listed, architecture has {}",
                    manifest.tensors.len(),
                    slots.len()
                ),
            ));
        }
        for entry in &manifest.tensors {
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| {
                    Error::format(
                        "checkpoint manifest",
                        format!("unknown tensor {}", entry.name),
                    )
                })?;
            let t = read_tensor(&dir.join(&entry.file))?;
            if t.shape() != slot.1.shape() || t.shape() != entry.shape.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "{}: file {:?}, expected {:?}",
                        entry.name,
                        t.shape(),
                        slot.1.shape()
                    ),
                ));
            }
            *slot.1 = t;
        }
        drop(slots);
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyVmmModel::new(ModelConfig::default(), 5).unwrap();
        model.save(dir.path(), Some(5)).unwrap();
        let back = ToyVmmModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.contains("row-major-backward"));
    }

    #[test]
    fn manifest_rejects_path_traversal_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        ToyVmmModel::new(ModelConfig::default(), 1)
            .unwrap()
            .save(dir.path(), None)
            .unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let bad = text.replacen("file = \"embed.weight.bin\"", "file = \"../etc/passwd\"", 1);
        assert!(CheckpointManifest::parse(&bad).is_err());
        let extra = format!("bogus = 1\n{text}");
        assert!(CheckpointManifest::parse(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        ToyVmmModel::new(ModelConfig::default(), 1)
            .unwrap()
            .save(dir.path(), None)
            .unwrap();
        write_tensor(&dir.path().join("head.bias.bin"), &Tensor::zeros([3])).unwrap();
        assert!(ToyVmmModel::load(dir.path()).is_err());
    }
}
