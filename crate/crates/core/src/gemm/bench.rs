//! Wall-clock benchmarks: hybrid vs f64 GEMM, and the cost of the outlier
//! list refresh period on a streamed workload.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{detect_outliers, maybe_refresh, OutlierState, RefreshPeriod};
use crate::rng::SeededRng;
use crate::tensor::matmul_into;

use super::{
    hybrid_gemm_prepared, quantize_hybrid, GemmTiles, OutlierBuffer, OutlierPanel,
    PackedInt4Matrix, PreparedWeights,
};

/// `x · wᵀ` in f64 for `x: T×K`, `w: R×K`; parallel over row blocks.
pub fn reference_gemm(x: &[f64], w: &[f64], t: usize, r: usize, k: usize) -> Vec<f64> {
    let mut wt = vec![0.0; k * r];
    for (j, row) in w.chunks_exact(k.max(1)).enumerate().take(r) {
        for (p, &v) in row.iter().enumerate() {
            wt[p * r + j] = v;
        }
    }
    let mut out = vec![0.0; t * r];
    if r == 0 {
        return out;
    }
    const BLOCK: usize = 16;
    out.par_chunks_mut(BLOCK * r)
        .enumerate()
        .for_each(|(b, o)| {
            let rows = o.len() / r;
            matmul_into(
                &x[b * BLOCK * k..(b * BLOCK + rows) * k],
                &wt,
                o,
                rows,
                k,
                r,
            );
        });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchPath {
    Hybrid,
    Reference,
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchPath::Hybrid => "hybrid",
            BenchPath::Reference => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    /// Square problem size `n` (an `n×n` by `n×n` product).
    pub size: usize,
    pub path: BenchPath,
    pub median_ns: u64,
    pub samples: Vec<u64>,
}

impl fmt::Display for BenchRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.size, self.path, self.median_ns)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Fraction of the `K` channels routed through the outlier path.
    pub outlier_fraction: f64,
    pub trials: usize,
    pub tiles: GemmTiles,
    /// Round the hybrid output to binary16, as a half-precision epilogue
    /// would. Off by default: outputs stay f64.
    pub f16_output: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![128, 256, 512, 1024],
            outlier_fraction: 0.01,
            trials: 3,
            tiles: GemmTiles::default(),
            f16_output: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::Config(
                "gemm.bench.sizes must be a non-empty list of positive sizes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "gemm.bench.outlier_fraction {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config("gemm.bench.trials must be positive".into()));
        }
        self.tiles.validate()
    }
}

fn median(samples: &[u64]) -> u64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    s[s.len() / 2]
}

fn time_ns(f: impl FnOnce()) -> u64 {
    let start = Instant::now();
    f();
    start.elapsed().as_nanos() as u64
}

/// Random square instance: packed weights with row scales, a packed inlier
/// plane and an outlier buffer covering `fraction` of the channels.
fn instance(
    rng: &mut SeededRng,
    n: usize,
    fraction: f64,
) -> Result<(PackedInt4Matrix, Vec<f64>, PackedInt4Matrix, OutlierBuffer)> {
    let w: Vec<i8> = (0..n * n).map(|_| rng.index(15) as i8 - 7).collect();
    let sw: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 0.1)).collect();
    let o_list = rng.sample_indices(n, (fraction * n as f64).round() as usize);
    let mut x: Vec<i8> = (0..n * n).map(|_| rng.index(15) as i8 - 7).collect();
    let c = o_list.len();
    let mut cols = vec![0i8; n * c];
    for t in 0..n {
        for (j, &ch) in o_list.iter().enumerate() {
            x[t * n + ch] = 0;
            cols[t * c + j] = (rng.index(255) as i32 - 127) as i8;
        }
    }
    let so: Vec<f64> = (0..c).map(|_| rng.uniform(0.05, 0.5)).collect();
    Ok((
        PackedInt4Matrix::pack(n, n, &w)?,
        sw,
        PackedInt4Matrix::pack(n, n, &x)?,
        OutlierBuffer::new(n, o_list, cols, so)?,
    ))
}

/// Median wall-clock of the full hybrid call (weight decode, outlier gather,
/// both integer products, fused dequantization) against the f64 product of
/// the already-dequantized operands. Two records per size.
pub fn bench_gemm(config: &BenchConfig, seed: u64) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut records = Vec::with_capacity(2 * config.sizes.len());
    let si = 1.0 / 7.0;
    for &n in &config.sizes {
        let (w, sw, xi, buf) = instance(&mut rng, n, config.outlier_fraction)?;
        let wq = w.unpack();
        let wd: Vec<f64> = wq
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 * sw[i / n])
            .collect();
        let mut xd: Vec<f64> = xi.unpack().iter().map(|&q| q as f64 * si).collect();
        let c = buf.len();
        for t in 0..n {
            for (j, &ch) in buf.channel_indices().iter().enumerate() {
                xd[t * n + ch] = buf.columns()[t * c + j] as f64 * buf.scales()[j];
            }
        }
        let (mut hy, mut re) = (Vec::new(), Vec::new());
        for _ in 0..config.trials {
            let mut err = None;
            hy.push(time_ns(|| {
                match PreparedWeights::new(&w, &sw).and_then(|p| {
                    let panel = OutlierPanel::gather(&p, buf.channel_indices())?;
                    let mut r = hybrid_gemm_prepared(&p, &panel, &xi, si, &buf, config.tiles)?;
                    if config.f16_output {
                        r.round_output_f16();
                    }
                    Ok(r)
                }) {
                    Ok(r) => {
                        black_box(r);
                    }
                    Err(e) => err = Some(e),
                }
            }));
            if let Some(e) = err {
                return Err(e);
            }
            re.push(time_ns(|| {
                black_box(reference_gemm(&xd, &wd, n, n, n));
            }));
        }
        records.push(BenchRecord {
            size: n,
            path: BenchPath::Hybrid,
            median_ns: median(&hy),
            samples: hy,
        });
        records.push(BenchRecord {
            size: n,
            path: BenchPath::Reference,
            median_ns: median(&re),
            samples: re,
        });
    }
    Ok(records)
}

/// Streamed workload for the refresh-period sweep: `steps` activations of
/// `tokens×channels`, a fixed set of persistent outlier channels, and
/// transient spikes that start with probability `transient_rate` per step and
/// last `transient_len` steps. The defaults model one S6 step: a single
/// token's wide hidden state contracted into a narrow `N`-sized output, where
/// detection and panel upkeep are a visible share of the work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefreshAblation {
    pub channels: usize,
    pub out_features: usize,
    pub tokens: usize,
    pub steps: usize,
    pub persistent: usize,
    pub transient_rate: f64,
    pub transient_len: usize,
    pub trials: usize,
    pub periods: Vec<RefreshPeriod>,
}

impl Default for RefreshAblation {
    fn default() -> Self {
        Self {
            channels: 512,
            out_features: 16,
            tokens: 1,
            steps: 256,
            persistent: 16,
            transient_rate: 0.25,
            transient_len: 4,
            trials: 15,
            periods: vec![
                RefreshPeriod::Every(1),
                RefreshPeriod::Every(5),
                RefreshPeriod::Every(10),
                RefreshPeriod::Every(20),
                RefreshPeriod::Never,
            ],
        }
    }
}

impl RefreshAblation {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.out_features == 0
            || self.tokens == 0
            || self.steps == 0
            || self.trials == 0
        {
            return Err(Error::Config(
                "gemm.ablation sizes and trials must be positive".into(),
            ));
        }
        if self.persistent >= self.channels {
            return Err(Error::Config(
                "gemm.ablation.persistent must leave inlier channels".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.transient_rate) {
            return Err(Error::Config(format!(
                "gemm.ablation.transient_rate {} outside [0, 1]",
                self.transient_rate
            )));
        }
        if self.periods.is_empty() {
            return Err(Error::Config(
                "gemm.ablation.periods must not be empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefreshCost {
    pub period: RefreshPeriod,
    /// Median over trials of the mean wall-clock per step.
    pub ns_per_step: f64,
    pub mean_outliers: f64,
    pub scans: usize,
    pub panel_rebuilds: usize,
}

impl fmt::Display for RefreshCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n_refresh={} ns_per_step={:.0} mean_outliers={:.2} scans={} panel_rebuilds={}",
            self.period, self.ns_per_step, self.mean_outliers, self.scans, self.panel_rebuilds
        )
    }
}

struct Stream {
    /// Per step, `channels×tokens` for the detector.
    by_channel: Vec<Vec<f64>>,
    /// Per step, `tokens×channels` for the product.
    by_token: Vec<Vec<f64>>,
}

const INLIER_MAX: f64 = 1.0;
const THETA: f64 = 2.0;

fn stream(cfg: &RefreshAblation, rng: &mut SeededRng) -> Stream {
    let (k, t) = (cfg.channels, cfg.tokens);
    let persistent = rng.sample_indices(k, cfg.persistent);
    let mut live: Vec<(usize, usize, f64)> = Vec::new();
    let mut by_channel = Vec::with_capacity(cfg.steps);
    let mut by_token = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if rng.bernoulli(cfg.transient_rate) {
            let ch = loop {
                let c = rng.index(k);
                if persistent.binary_search(&c).is_err() {
                    break c;
                }
            };
            live.push((ch, cfg.transient_len, rng.uniform(8.0, 30.0)));
        }
        let mut x: Vec<f64> = (0..k * t)
            .map(|_| rng.uniform(-INLIER_MAX, INLIER_MAX))
            .collect();
        let spikes = persistent
            .iter()
            .map(|&c| (c, 20.0))
            .chain(live.iter().map(|&(c, _, m)| (c, m)));
        for (ch, mag) in spikes {
            for v in &mut x[ch * t..(ch + 1) * t] {
                *v *= mag;
            }
        }
        live.iter_mut().for_each(|l| l.1 -= 1);
        live.retain(|l| l.1 > 0);
        let mut xt = vec![0.0; k * t];
        for ch in 0..k {
            for tok in 0..t {
                xt[tok * k + ch] = x[ch * t + tok];
            }
        }
        by_channel.push(x);
        by_token.push(xt);
    }
    Stream {
        by_channel,
        by_token,
    }
}

struct RunStats {
    ns: u64,
    outliers: usize,
    scans: usize,
    rebuilds: usize,
}

fn run_period(
    cfg: &RefreshAblation,
    s: &Stream,
    w: &PreparedWeights,
    period: RefreshPeriod,
) -> Result<RunStats> {
    let si = INLIER_MAX / 7.0;
    let mut state = OutlierState::default();
    let mut panel = OutlierPanel::default();
    let (mut outliers, mut scans, mut rebuilds) = (0, 0, 0);
    let start = Instant::now();
    for step in 0..cfg.steps {
        maybe_refresh(&mut state, step, period);
        if detect_outliers(&s.by_channel[step], cfg.channels, THETA, si, 4, &mut state) {
            scans += 1;
        }
        if panel.indices() != state.o_list {
            panel = OutlierPanel::gather(w, &state.o_list)?;
            rebuilds += 1;
        }
        let (xi, buf) = quantize_hybrid(
            &s.by_token[step],
            cfg.tokens,
            cfg.channels,
            &state.o_list,
            si,
        )?;
        black_box(hybrid_gemm_prepared(
            w,
            &panel,
            &xi,
            si,
            &buf,
            GemmTiles::default(),
        )?);
        outliers += state.o_list.len();
    }
    Ok(RunStats {
        ns: start.elapsed().as_nanos() as u64,
        outliers,
        scans,
        rebuilds,
    })
}

/// Times the detect, extract and multiply pipeline over one seeded stream for
/// every refresh period. Periods are interleaved within each trial, in a
/// rotating order, so drift in machine load spreads evenly.
pub fn ablate_refresh(cfg: &RefreshAblation, seed: u64) -> Result<Vec<RefreshCost>> {
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let s = stream(cfg, &mut rng.fork(1));
    let codes: Vec<i8> = (0..cfg.out_features * cfg.channels)
        .map(|_| rng.index(15) as i8 - 7)
        .collect();
    let scales: Vec<f64> = (0..cfg.out_features)
        .map(|_| rng.uniform(0.01, 0.1))
        .collect();
    let w = PreparedWeights::new(
        &PackedInt4Matrix::pack(cfg.out_features, cfg.channels, &codes)?,
        &scales,
    )?;
    let p = cfg.periods.len();
    let mut samples = vec![Vec::with_capacity(cfg.trials); p];
    let mut stats: Vec<Option<RunStats>> = (0..p).map(|_| None).collect();
    // One untimed pass warms caches and the allocator.
    run_period(cfg, &s, &w, cfg.periods[0])?;
    for trial in 0..cfg.trials {
        for i in 0..p {
            let idx = (i + trial) % p;
            let run = run_period(cfg, &s, &w, cfg.periods[idx])?;
            samples[idx].push(run.ns);
            stats[idx] = Some(run);
        }
    }
    Ok(cfg
        .periods
        .iter()
        .zip(samples)
        .zip(stats)
        .map(|((&period, ns), st)| {
            let st = st.expect("every period ran");
            RefreshCost {
                period,
                ns_per_step: median(&ns) as f64 / cfg.steps as f64,
                mean_outliers: st.outliers as f64 / cfg.steps as f64,
                scans: st.scans,
                panel_rebuilds: st.rebuilds,
            }
        })
        .collect())
}

/// The cheapest period of a sweep.
pub fn best_period(costs: &[RefreshCost]) -> Option<RefreshPeriod> {
    costs
        .iter()
        .min_by(|a, b| a.ns_per_step.total_cmp(&b.ns_per_step))
        .map(|c| c.period)
}
