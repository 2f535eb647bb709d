use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ssmq_core::config::{SeedSource, SEED_ENV};
use ssmq_core::io::{read_tensor, write_atomic, write_tensor};
use ssmq_core::metrics::run_id;
use ssmq_core::ssm::ToyVmmModel;
use ssmq_core::{Error, MetricsRecord, Result, RunConfig, Tensor};

use crate::ConfigArgs;

pub const IMAGES: &str = "images.bin";
pub const TARGETS: &str = "targets.bin";
pub const MODEL_DIR: &str = "model";

/// A resolved config plus what the run needs to label its outputs.
pub struct Run {
    pub cfg: RunConfig,
    pub seed_source: SeedSource,
    pub id: String,
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load(args: &ConfigArgs) -> Result<Run> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut cfg = RunConfig::parse_with_overrides(&text, &args.overrides).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", args.config.display())),
        other => other,
    })?;
    let seed_source = cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    let id = run_id(&cfg.to_toml()?);
    Ok(Run {
        cfg,
        seed_source,
        id,
    })
}

impl Run {
    pub fn record(&self, stage: &str) -> MetricsRecord {
        MetricsRecord::new(&self.id, stage)
    }

    /// Model from a checkpoint directory, which must match `[model]`.
    pub fn load_model(&self, dir: &Path) -> Result<ToyVmmModel> {
        let model = ToyVmmModel::load(dir)?;
        if model.config != self.cfg.model {
            return Err(Error::Config(format!(
                "[model] section does not match the checkpoint in {}",
                dir.display()
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    run: &'a str,
    seed: u64,
    seed_source: SeedSource,
    results: &'a toml::Table,
    config: &'a RunConfig,
}

/// An output directory. Every file lands through a temp-and-rename.
pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| io_err(path, e))?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn tensor(&self, name: &str, t: &Tensor) -> Result<()> {
        write_tensor(&self.path(name), t)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<()> {
        write_atomic(&self.path(name), text.as_bytes())
    }

    /// `manifest.toml` with the resolved config and results, `config.toml`
    /// with the resolved config alone (a rerun input), and `metrics.txt`.
    pub fn finish(
        &self,
        command: &str,
        run: &Run,
        results: &toml::Table,
        records: &[MetricsRecord],
    ) -> Result<()> {
        let manifest = Manifest {
            command,
            run: &run.id,
            seed: run.cfg.seed,
            seed_source: run.seed_source,
            results,
            config: &run.cfg,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        self.text("config.toml", &run.cfg.to_toml()?)?;
        self.text("metrics.txt", &lines(records))?;
        self.text("manifest.toml", &text)
    }
}

pub fn lines(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| format!("{r}\n")).collect()
}

pub fn print(records: &[MetricsRecord]) {
    print!("{}", lines(records));
}

pub fn read_images(path: &Path) -> Result<Tensor> {
    let t = read_tensor(path)?;
    if t.shape().len() != 4 {
        return Err(Error::Format {
            what: path.display().to_string(),
            detail: format!("expected B×H×W×C images, got shape {:?}", t.shape()),
        });
    }
    Ok(t)
}

/// Builds a results table from `(key, value)` pairs.
pub fn table<I, V>(items: I) -> toml::Table
where
    I: IntoIterator<Item = (&'static str, V)>,
    V: Into<toml::Value>,
{
    items
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.into()))
        .collect()
}
