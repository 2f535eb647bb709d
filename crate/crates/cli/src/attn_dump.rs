use std::path::PathBuf;

use clap::Args;

use ssmq_core::attn::{
    delta_weights, enhanced_attention, implicit_attention, patched_output, patched_state,
    NeighborhoodSpec,
};
use ssmq_core::datagen::init_noise_batch;
use ssmq_core::ssm::{patchify, NoHook, ScanOrder, ToyVmmModel};
use ssmq_core::{Error, Result, SeededRng, Tensor};

use crate::common::{self, table, OutDir, IMAGES, MODEL_DIR};
use crate::ConfigArgs;

#[derive(Args)]
pub struct DumpArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Directory written by `gen` (default: seeded noise through a seeded model).
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 0)]
    layer: usize,
}

/// Per direction `d`, all in that direction's sequence order:
/// `d{d}.alpha_tilde.bin` (E×M×M), `d{d}.alpha_p_tilde.bin` (E×M×M),
/// `d{d}.delta_mean.bin` (M), `d{d}.u.bin` (M×E) and `d{d}.o_p.bin` (M×E),
/// with `o_p[i, e] = Σ_j alpha_p_tilde[e, i, j] u[j, e]`.
pub fn run(a: DumpArgs) -> Result<()> {
    let run = common::load(&a.cfg)?;
    let (model, images) = match &a.batch {
        Some(dir) => (
            run.load_model(&a.model.clone().unwrap_or_else(|| dir.join(MODEL_DIR)))?,
            common::read_images(&dir.join(IMAGES))?,
        ),
        None => {
            let model = match &a.model {
                Some(dir) => run.load_model(dir)?,
                None => ToyVmmModel::new(run.cfg.model.clone(), run.cfg.seed)?,
            };
            let mut rng = SeededRng::new(run.cfg.seed).fork(1);
            let images = init_noise_batch(&mut rng, a.sample + 1, model.config.image_dims());
            (model, images)
        }
    };
    let patches = patchify(&images, &model.config)?;
    let p = patches.get(a.sample).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "--sample {} but the batch has {} images",
            a.sample,
            patches.len()
        ))
    })?;
    let fwd = model.forward_sample(p, &mut NoHook, true)?;
    let trace = fwd.traces.get(a.layer).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "--layer {} but the model has {} blocks",
            a.layer,
            fwd.traces.len()
        ))
    })?;
    let (rows, cols) = model.layout();
    let out = OutDir::create(&a.out)?;
    let mut records = Vec::new();
    for (d, (scan, &kind)) in trace
        .scans
        .iter()
        .zip(&model.config.scan_orders)
        .enumerate()
    {
        let u = ScanOrder::new(kind, rows, cols).flatten_grid(&trace.u)?;
        let deltas = scan.deltas();
        let spec = NeighborhoodSpec::new(run.cfg.gen.neighborhood, rows, cols, kind)?;
        let (m, e) = (scan.len(), deltas.shape()[1]);
        let n = scan.hidden.first().map_or(0, |h| h.len() / e.max(1));
        let h = Tensor::new(
            [m, e, n],
            scan.hidden
                .iter()
                .flat_map(|h| h.data().iter().copied())
                .collect(),
        )?;
        let o_p = patched_output(scan, &patched_state(&h, &deltas, &spec)?.h_p)?;
        let enhanced = enhanced_attention(scan, &deltas, &spec)?;
        let recon = enhanced.apply(&u)?;
        let err = recon
            .data()
            .iter()
            .zip(o_p.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);

        out.tensor(
            &format!("d{d}.alpha_tilde.bin"),
            &implicit_attention(scan)?.alpha_tilde,
        )?;
        out.tensor(&format!("d{d}.alpha_p_tilde.bin"), &enhanced.alpha_p_tilde)?;
        out.tensor(
            &format!("d{d}.delta_mean.bin"),
            &Tensor::new([m], delta_weights(&deltas)?)?,
        )?;
        out.tensor(&format!("d{d}.u.bin"), &u)?;
        out.tensor(&format!("d{d}.o_p.bin"), &o_p)?;
        records.push(
            run.record("attn-dump")
                .with("layer", a.layer)
                .with("direction", d)
                .with("order", kind.name())
                .with("tokens", m)
                .with("recon_max_abs", err),
        );
    }
    let results = table([
        ("sample", toml::Value::from(a.sample as i64)),
        ("layer", (a.layer as i64).into()),
        ("directions", (trace.scans.len() as i64).into()),
    ]);
    out.finish("attn-dump", &run, &results, &records)?;
    common::print(&records);
    Ok(())
}
