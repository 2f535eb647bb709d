//! Run configuration: one TOML document with a mandatory top-level `seed`
//! and the sections `[model]`, `[gen]`, `[quant]` and `[gemm]`. Unknown keys
//! are rejected; missing keys take the defaults of each section's type.

use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::gemm::{BenchConfig, RefreshAblation};
use crate::quant::QuantConfig;
use crate::ssm::ModelConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "OURO_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemmConfig {
    pub bench: BenchConfig,
    pub ablation: RefreshAblation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub gemm: GemmConfig,
}

/// Where the effective seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Config,
    Env,
}

impl RunConfig {
    /// Toy-model profile with the given seed.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            model: ModelConfig::default(),
            gen: GenConfig::desk(),
            quant: QuantConfig::default(),
            gemm: GemmConfig::default(),
        }
    }

    /// Parses and validates a config document.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses a document after applying `section.key=value` overrides. Values
    /// are TOML literals; anything that does not parse as one is taken as a
    /// bare string, so `--set quant.n_refresh=never` works unquoted.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            if msg.contains("missing field `seed`") {
                Error::Config("`seed` is mandatory: add a top-level `seed = <integer>`".into())
            } else {
                Error::Config(e.to_string().trim_end().to_string())
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen.validate()?;
        self.quant.validate()?;
        self.gemm.bench.validate()?;
        self.gemm.ablation.validate()
    }

    /// Applies an `OURO_SEED` value, if any, and reports the seed's source.
    pub fn apply_seed_override(&mut self, env: Option<&str>) -> Result<SeedSource> {
        match env {
            None => Ok(SeedSource::Config),
            Some(v) => {
                self.seed = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?;
                Ok(SeedSource::Env)
            }
        }
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{item}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty split");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{item}`: `{k}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
