use std::path::PathBuf;

use clap::Args;

use ssmq_core::gemm::{ablate_refresh, bench_gemm, best_period};
use ssmq_core::Result;

use crate::common::{self, table, OutDir};
use crate::ConfigArgs;

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Square sizes to time, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Also sweep the outlier refresh period on a streamed workload.
    #[arg(long)]
    refresh_sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Prints `size,path,median_ns` lines, then the sweep if requested.
pub fn run(a: BenchArgs) -> Result<()> {
    let mut run = common::load(&a.cfg)?;
    let bench = &mut run.cfg.gemm.bench;
    if let Some(s) = a.sizes {
        bench.sizes = s;
    }
    if let Some(f) = a.outlier_fraction {
        bench.outlier_fraction = f;
    }
    if let Some(t) = a.trials {
        bench.trials = t;
    }
    run.cfg.validate()?;
    let records = bench_gemm(&run.cfg.gemm.bench, run.cfg.seed)?;
    for r in &records {
        println!("{r}");
    }
    let mut metrics: Vec<_> = records
        .iter()
        .map(|r| {
            run.record("gemm-bench")
                .with("size", r.size)
                .with("path", r.path)
                .with("median_ns", r.median_ns)
        })
        .collect();
    let mut results = table([("records", toml::Value::from(records.len() as i64))]);
    if a.refresh_sweep {
        let costs = ablate_refresh(&run.cfg.gemm.ablation, run.cfg.seed)?;
        for c in &costs {
            println!("{c}");
            metrics.push(
                run.record("refresh-sweep")
                    .with("n_refresh", c.period)
                    .with("ns_per_step", c.ns_per_step)
                    .with("mean_outliers", c.mean_outliers),
            );
        }
        if let Some(best) = best_period(&costs) {
            println!("best n_refresh={best}");
            results.insert("best_n_refresh".into(), best.to_string().into());
        }
    }
    if let Some(dir) = &a.out {
        OutDir::create(dir)?.finish("gemm-bench", &run, &results, &metrics)?;
    }
    Ok(())
}
