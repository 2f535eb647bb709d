use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use ssmq_core::datagen::generate_with;
use ssmq_core::quant::{
    calibrate, quantized_forward, ActivationScheme, CalibrationResult, SpikeSpec,
};
use ssmq_core::ssm::ToyVmmModel;
use ssmq_core::{Error, Result};

use crate::common::{self, table, OutDir, IMAGES, MODEL_DIR, TARGETS};
use crate::ConfigArgs;

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for images, targets, model checkpoint and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Also write `iteration,loss` lines to this file.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Use this checkpoint instead of building the model from the seed.
    #[arg(long)]
    model: Option<PathBuf>,
}

pub fn gen(a: GenArgs) -> Result<()> {
    let run = common::load(&a.cfg)?;
    let model = match &a.model {
        Some(dir) => run.load_model(dir)?,
        None => ToyVmmModel::new(run.cfg.model.clone(), run.cfg.seed)?,
    };
    let out = OutDir::create(&a.out)?;
    let mut log = String::new();
    let batch = generate_with(&model, &run.cfg.gen, run.cfg.seed, |it, loss| {
        let _ = writeln!(log, "{it},{loss}");
    })?;
    let final_total = batch.final_loss.total();
    let _ = writeln!(log, "{},{final_total}", batch.loss_history.len());

    out.tensor(IMAGES, &batch.images)?;
    out.tensor(TARGETS, &batch.targets)?;
    model.save(&out.path(MODEL_DIR), Some(run.cfg.seed))?;
    if let Some(path) = &a.loss_log {
        ssmq_core::io::write_atomic(path, log.as_bytes())?;
    }
    let initial = batch.loss_history.first().copied().unwrap_or(final_total);
    let results = table([
        (
            "iterations",
            toml::Value::from(batch.loss_history.len() as i64),
        ),
        ("initial_loss", initial.into()),
        ("final_loss", final_total.into()),
        ("final_contrastive", batch.final_loss.contrastive.into()),
        ("final_output", batch.final_loss.output.into()),
    ]);
    let records = vec![run
        .record("gen")
        .with("iterations", batch.loss_history.len())
        .with("initial_loss", initial)
        .with("final_loss", final_total)
        .with("contrastive", batch.final_loss.contrastive)
        .with("output", batch.final_loss.output)];
    out.finish("gen", &run, &results, &records)?;
    common::print(&records);
    Ok(())
}

#[derive(Args)]
pub struct CalibArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by `gen`.
    #[arg(long)]
    batch: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to calibrate (default: the batch's own model).
    #[arg(long)]
    model: Option<PathBuf>,
}

pub fn calib(a: CalibArgs) -> Result<()> {
    let run = common::load(&a.cfg)?;
    let model = run.load_model(&a.model.unwrap_or_else(|| a.batch.join(MODEL_DIR)))?;
    let images = common::read_images(&a.batch.join(IMAGES))?;
    let cal = calibrate(&model, &images, &run.cfg.quant)?;
    let out = OutDir::create(&a.out)?;
    cal.save(&a.out)?;
    let records: Vec<_> = cal
        .entries
        .iter()
        .map(|((site, kind), c)| {
            run.record("calib")
                .with("layer", site.layer)
                .with("direction", site.direction)
                .with("kind", kind.name())
                .with("theta", c.theta)
                .with("steps", c.inlier_scales.len())
        })
        .collect();
    let results = table([
        ("entries", toml::Value::from(cal.entries.len() as i64)),
        ("samples", (images.shape()[0] as i64).into()),
    ]);
    out.finish("calib", &run, &results, &records)?;
    common::print(&records);
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    /// Per-step inlier scales with the outlier detector.
    Dynamic,
    /// One calibrated scale per activation tensor.
    Static,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory written by `calib`.
    #[arg(long)]
    calib: PathBuf,
    /// Directory written by `gen`; supplies the model and default inputs.
    #[arg(long)]
    batch: PathBuf,
    /// Evaluation images (default: the batch's synthetic images).
    #[arg(long)]
    inputs: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Scheme::Dynamic)]
    scheme: Scheme,
    /// Inject transient spikes at this per-channel, per-step rate.
    #[arg(long)]
    spike_rate: Option<f64>,
    #[arg(long, default_value_t = 20.0)]
    spike_magnitude: f64,
    /// Write manifest and metrics here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn quant_eval(a: EvalArgs) -> Result<()> {
    let run = common::load(&a.cfg)?;
    let q = &run.cfg.quant;
    let model = run.load_model(&a.model.clone().unwrap_or_else(|| a.batch.join(MODEL_DIR)))?;
    let cal = CalibrationResult::load(&a.calib)?;
    if !q.bypass
        && (cal.config.b_a_inlier != q.b_a_inlier || cal.config.b_a_outlier != q.b_a_outlier)
    {
        return Err(Error::Config(format!(
            "calibration in {} was fitted for {}/{}-bit inlier/outlier activations, config asks for {}/{}",
            a.calib.display(),
            cal.config.b_a_inlier,
            cal.config.b_a_outlier,
            q.b_a_inlier,
            q.b_a_outlier
        )));
    }
    let images = match &a.inputs {
        Some(p) => common::read_images(p)?,
        None => common::read_images(&a.batch.join(IMAGES))?,
    };
    let spikes = match a.spike_rate {
        Some(rate) if !(0.0..=1.0).contains(&rate) => {
            return Err(Error::InvalidArgument(format!(
                "--spike-rate {rate} outside [0, 1]"
            )))
        }
        Some(rate) => Some(SpikeSpec {
            rate,
            magnitude: a.spike_magnitude,
            seed: run.cfg.seed,
        }),
        None => None,
    };
    let scheme = match a.scheme {
        Scheme::Dynamic => ActivationScheme::Dynamic,
        Scheme::Static => ActivationScheme::StaticPerTensor,
    };
    let report = quantized_forward(&model, &images, &cal, q, scheme, spikes)?;

    let mut records = Vec::new();
    for layer in 0..report.layer_mse.len() {
        records.push(
            run.record("quant-eval")
                .with("layer", layer)
                .with("mse", report.layer_mse[layer])
                .with("mse_isolated", report.layer_mse_isolated[layer])
                .with("power", report.layer_power[layer]),
        );
    }
    for ((site, kind), tl) in &report.timeline {
        records.push(
            run.record("timeline")
                .with("layer", site.layer)
                .with("direction", site.direction)
                .with("kind", kind.name())
                .with("carried", join(&tl.carried))
                .with("listed", join(&tl.listed)),
        );
    }
    let samples = report.logits.shape()[0];
    records.push(
        run.record("agreement")
            .with("samples", samples)
            .with("b_w", q.b_w)
            .with("b_a_inlier", q.b_a_inlier)
            .with("b_a_outlier", q.b_a_outlier)
            .with("agreement", report.agreement),
    );
    if let Some(dir) = &a.out {
        let out = OutDir::create(dir)?;
        let results = table([
            ("agreement", toml::Value::from(report.agreement)),
            ("samples", (samples as i64).into()),
            ("layer_mse", report.layer_mse.clone().into()),
        ]);
        out.tensor("logits.bin", &report.logits)?;
        out.finish("quant-eval", &run, &results, &records)?;
    }
    common::print(&records);
    Ok(())
}
