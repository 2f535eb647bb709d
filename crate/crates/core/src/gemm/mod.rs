//! Integer back end for mixed-precision activations.
//!
//! Activations arrive as `T×K` matrices, tokens by channels. Inlier channels
//! are 4-bit codes packed two per byte; outlier channels are copied out as
//! 8-bit columns with one scale each and zeroed in the inlier plane. Weights
//! are `R×K` 4-bit codes with one scale per row, so every product is
//! `x · wᵀ` and lands in a `T×R` output.
//!
//! Products accumulate in `i32`. The inner dimension is bounded by
//! [`MAX_INNER_I4`] and [`MAX_INNER_I4XI8`], which makes overflow impossible.

mod bench;
mod pack;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{qmax, quantize_symmetric, scale_for};

pub use bench::{
    ablate_refresh, bench_gemm, best_period, reference_gemm, BenchConfig, BenchPath, BenchRecord,
    RefreshAblation, RefreshCost,
};
pub use pack::{OutlierBuffer, PackedInt4Matrix};

/// Largest inner dimension whose 4×4-bit dot products fit an `i32`.
pub const MAX_INNER_I4: usize = i32::MAX as usize / (7 * 7);
/// Same bound for 4×8-bit products.
pub const MAX_INNER_I4XI8: usize = i32::MAX as usize / (7 * 127);

/// Cache blocking of the integer kernels. Any positive sizes give the same
/// bits; only speed changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemmTiles {
    /// Output rows (tokens) per parallel task.
    pub rows: usize,
    /// Output columns (weight rows) per block.
    pub cols: usize,
    /// Inner-dimension block.
    pub depth: usize,
}

impl Default for GemmTiles {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 64,
            depth: 512,
        }
    }
}

impl GemmTiles {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.depth == 0 {
            return Err(Error::Config("gemm tile sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Integer accumulators of both paths and the fused real output, all `T×R`.
///
/// `acc_outlier` is the plain integer sum over outlier channels. With one
/// scale per outlier channel the output weights each channel's products by
/// its own scale, so `output` is recomputed from the operands, not from
/// `acc_outlier` alone, unless the outlier scales agree.
#[derive(Clone, Debug, PartialEq)]
pub struct GemmResult {
    pub rows: usize,
    pub cols: usize,
    pub acc_inlier: Vec<i32>,
    pub acc_outlier: Vec<i32>,
    pub output: Vec<f64>,
}

impl GemmResult {
    /// Rounds the output to the nearest binary16 value, as a half-precision
    /// epilogue would store it.
    pub fn round_output_f16(&mut self) {
        for v in &mut self.output {
            *v = half::f16::from_f64(*v).to_f64();
        }
    }
}

/// Weights decoded once to 16-bit lanes, plus their row scales. Serving code
/// keeps one of these per layer; the packed form is the storage format.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWeights {
    rows: usize,
    cols: usize,
    codes: Vec<i16>,
    scales: Vec<f64>,
}

impl PreparedWeights {
    pub fn new(w: &PackedInt4Matrix, scales: &[f64]) -> Result<Self> {
        if scales.len() != w.rows() {
            return Err(Error::shape(
                "hybrid gemm",
                format!("{} weight scales for {} rows", scales.len(), w.rows()),
            ));
        }
        if let Some(s) = scales.iter().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("weight scale {s}")));
        }
        Ok(Self {
            rows: w.rows(),
            cols: w.cols(),
            codes: w.decode_i16(),
            scales: scales.to_vec(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// Weight columns of the outlier channels, gathered into a dense block with
/// one row of `R` codes per channel so the outlier product streams over
/// outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutlierPanel {
    indices: Vec<usize>,
    codes: Vec<i16>,
}

impl OutlierPanel {
    pub fn gather(w: &PreparedWeights, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= w.cols) {
            return Err(Error::InvalidArgument(format!(
                "outlier channel {bad} outside {} columns",
                w.cols
            )));
        }
        let mut codes = vec![0i16; w.rows * indices.len()];
        for (dst, &i) in codes.chunks_exact_mut(w.rows.max(1)).zip(indices) {
            for (r, d) in dst.iter_mut().enumerate() {
                *d = w.codes[r * w.cols + i];
            }
        }
        Ok(Self {
            indices: indices.to_vec(),
            codes,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Zeroes the `o_list` columns of a `rows×cols` code matrix and copies them,
/// in index order, into an [`OutlierBuffer`] with the given scales.
pub fn extract_outliers(
    codes: &[i8],
    rows: usize,
    cols: usize,
    o_list: &[usize],
    scales: &[f64],
) -> Result<(Vec<i8>, OutlierBuffer)> {
    if codes.len() != rows * cols {
        return Err(Error::shape(
            "extract_outliers",
            format!("{} codes for {rows}×{cols}", codes.len()),
        ));
    }
    if let Some(&bad) = o_list.iter().find(|&&i| i >= cols) {
        return Err(Error::InvalidArgument(format!(
            "outlier channel {bad} outside {cols} columns"
        )));
    }
    let c = o_list.len();
    let mut inlier = codes.to_vec();
    let mut columns = vec![0i8; rows * c];
    for t in 0..rows {
        for (j, &ch) in o_list.iter().enumerate() {
            columns[t * c + j] = codes[t * cols + ch];
            inlier[t * cols + ch] = 0;
        }
    }
    Ok((
        inlier,
        OutlierBuffer::new(rows, o_list.to_vec(), columns, scales.to_vec())?,
    ))
}

/// Quantizes a real `T×K` activation: inliers to 4-bit codes at
/// `inlier_scale`, each `o_list` channel to 8-bit codes at its own scale.
pub fn quantize_hybrid(
    x: &[f64],
    rows: usize,
    cols: usize,
    o_list: &[usize],
    inlier_scale: f64,
) -> Result<(PackedInt4Matrix, OutlierBuffer)> {
    if x.len() != rows * cols {
        return Err(Error::shape(
            "quantize_hybrid",
            format!("{} values for {rows}×{cols}", x.len()),
        ));
    }
    if let Some(&bad) = o_list.iter().find(|&&i| i >= cols) {
        return Err(Error::InvalidArgument(format!(
            "outlier channel {bad} outside {cols} columns"
        )));
    }
    let mut inlier = quantize_symmetric(x, inlier_scale, 4)?;
    let c = o_list.len();
    let mut columns = vec![0i8; rows * c];
    let mut scales = Vec::with_capacity(c);
    let mut col = vec![0.0; rows];
    for (j, &ch) in o_list.iter().enumerate() {
        for (t, v) in col.iter_mut().enumerate() {
            *v = x[t * cols + ch];
            inlier[t * cols + ch] = 0;
        }
        let s = scale_for(&col, 8);
        for (t, q) in quantize_symmetric(&col, s, 8)?.into_iter().enumerate() {
            columns[t * c + j] = q;
        }
        scales.push(s);
    }
    Ok((
        PackedInt4Matrix::pack(rows, cols, &inlier)?,
        OutlierBuffer::new(rows, o_list.to_vec(), columns, scales)?,
    ))
}

#[inline]
fn dot_i16(a: &[i16], b: &[i16]) -> i32 {
    a.iter().zip(b).map(|(&x, &y)| x as i32 * y as i32).sum()
}

fn dot_i16_x4_portable(a: &[i16], b: [&[i16]; 4]) -> [i32; 4] {
    b.map(|row| dot_i16(a, row))
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2")]
    unsafe fn hsum(v: __m256i) -> i32 {
        let s = _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256::<1>(v));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0b01_00_11_10>(s));
        let s = _mm_add_epi32(s, _mm_shuffle_epi32::<0b10_11_00_01>(s));
        _mm_cvtsi128_si32(s)
    }

    /// One row of `a` against four rows of `b` with 16-lane `vpmaddwd`.
    ///
    /// # Safety
    /// The CPU must support AVX2, and every `b` row must be at least as long
    /// as `a`.
    #[target_feature(enable = "avx2")]
    pub unsafe fn dot_i16_x4(a: &[i16], b: [&[i16]; 4]) -> [i32; 4] {
        let n = a.len();
        let mut acc = [_mm256_setzero_si256(); 4];
        let mut i = 0;
        while i + 16 <= n {
            let x = _mm256_loadu_si256(a.as_ptr().add(i).cast());
            for (o, row) in acc.iter_mut().zip(&b) {
                let y = _mm256_loadu_si256(row.as_ptr().add(i).cast());
                *o = _mm256_add_epi32(*o, _mm256_madd_epi16(x, y));
            }
            i += 16;
        }
        let mut out = [hsum(acc[0]), hsum(acc[1]), hsum(acc[2]), hsum(acc[3])];
        for (o, row) in out.iter_mut().zip(&b) {
            *o += super::dot_i16(&a[i..], &row[i..n]);
        }
        out
    }
}

type Dot4 = fn(&[i16], [&[i16]; 4]) -> [i32; 4];

fn pick_dot4() -> Dot4 {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 was detected, and `int_gemm` passes equal-length rows.
            return |a, b| unsafe { simd::dot_i16_x4(a, b) };
        }
    }
    dot_i16_x4_portable
}

/// `out[t][r] = Σ_k a[t][k] · b[r][k]` over `i16` lanes, tiled and parallel
/// over row blocks. Integer sums make the result independent of tiling.
fn int_gemm(a: &[i16], b: &[i16], (t, r, k): (usize, usize, usize), tiles: GemmTiles) -> Vec<i32> {
    let mut out = vec![0i32; t * r];
    if k == 0 || r == 0 {
        return out;
    }
    let dot4 = pick_dot4();
    out.par_chunks_mut(tiles.rows * r)
        .enumerate()
        .for_each(|(blk, acc)| {
            let t0 = blk * tiles.rows;
            let tn = acc.len() / r;
            for r0 in (0..r).step_by(tiles.cols) {
                let r1 = (r0 + tiles.cols).min(r);
                for k0 in (0..k).step_by(tiles.depth) {
                    let k1 = (k0 + tiles.depth).min(k);
                    let brow = |j: usize| &b[j * k + k0..j * k + k1];
                    for ti in 0..tn {
                        let arow = &a[(t0 + ti) * k + k0..(t0 + ti) * k + k1];
                        let orow = &mut acc[ti * r..(ti + 1) * r];
                        let mut rj = r0;
                        while rj + 4 <= r1 {
                            let d =
                                dot4(arow, [brow(rj), brow(rj + 1), brow(rj + 2), brow(rj + 3)]);
                            for (o, v) in orow[rj..rj + 4].iter_mut().zip(d) {
                                *o += v;
                            }
                            rj += 4;
                        }
                        for j in rj..r1 {
                            orow[j] += dot_i16(arow, brow(j));
                        }
                    }
                }
            }
        });
    out
}

fn check_inner(k: usize, bound: usize) -> Result<()> {
    if k > bound {
        return Err(Error::InvalidArgument(format!(
            "inner dimension {k} exceeds the overflow-safe bound {bound}"
        )));
    }
    Ok(())
}

/// Exact `x · wᵀ` of two packed 4-bit matrices, `T×R` accumulators.
pub fn gemm_i4(w: &PackedInt4Matrix, x: &PackedInt4Matrix) -> Result<Vec<i32>> {
    gemm_i4_tiled(w, x, GemmTiles::default())
}

pub fn gemm_i4_tiled(
    w: &PackedInt4Matrix,
    x: &PackedInt4Matrix,
    tiles: GemmTiles,
) -> Result<Vec<i32>> {
    tiles.validate()?;
    if w.cols() != x.cols() {
        return Err(Error::shape(
            "gemm_i4",
            format!("inner dims {} vs {}", x.cols(), w.cols()),
        ));
    }
    check_inner(w.cols(), MAX_INNER_I4)?;
    Ok(int_gemm(
        &x.decode_i16(),
        &w.decode_i16(),
        (x.rows(), w.rows(), w.cols()),
        tiles,
    ))
}

/// Exact product of the outlier columns with the matching weight columns.
/// An empty buffer yields zero accumulators.
pub fn gemm_i4xi8(w: &PackedInt4Matrix, outliers: &OutlierBuffer) -> Result<Vec<i32>> {
    let prepared = PreparedWeights::new(w, &vec![1.0; w.rows()])?;
    let panel = OutlierPanel::gather(&prepared, outliers.channel_indices())?;
    check_inner(panel.indices.len(), MAX_INNER_I4XI8)?;
    let r = w.rows();
    let mut acc = vec![0i32; outliers.rows() * r];
    acc.par_chunks_mut(r.max(1))
        .enumerate()
        .for_each(|(ti, ao)| outlier_row(&panel, outliers, ti, ao, None));
    Ok(acc)
}

/// Adds token `ti`'s outlier products into `ao` and, when given, their
/// per-channel dequantized values into `real`.
fn outlier_row(
    panel: &OutlierPanel,
    buf: &OutlierBuffer,
    ti: usize,
    ao: &mut [i32],
    real: Option<&mut [f64]>,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 was detected.
            return unsafe { outlier_row_avx2(panel, buf, ti, ao, real) };
        }
    }
    outlier_row_body(panel, buf, ti, ao, real)
}

/// The same loop compiled with AVX2 enabled so it vectorizes four lanes
/// wide. No FMA: rounding matches the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn outlier_row_avx2(
    panel: &OutlierPanel,
    buf: &OutlierBuffer,
    ti: usize,
    ao: &mut [i32],
    real: Option<&mut [f64]>,
) {
    outlier_row_body(panel, buf, ti, ao, real)
}

#[inline(always)]
fn outlier_row_body(
    panel: &OutlierPanel,
    buf: &OutlierBuffer,
    ti: usize,
    ao: &mut [i32],
    mut real: Option<&mut [f64]>,
) {
    let (c, r) = (buf.len(), ao.len());
    let row = &buf.columns()[ti * c..(ti + 1) * c];
    for (j, (&q, &s)) in row.iter().zip(buf.scales()).enumerate() {
        if q == 0 {
            continue;
        }
        let p = &panel.codes[j * r..(j + 1) * r];
        let qi = q as i32;
        for (a, &pv) in ao.iter_mut().zip(p) {
            *a += qi * pv as i32;
        }
        if let Some(real) = real.as_deref_mut() {
            let xs = s * q as f64;
            for (o, &pv) in real.iter_mut().zip(p) {
                *o += xs * pv as f64;
            }
        }
    }
}

/// Fused hybrid product: both integer paths, then one dequantize-and-sum per
/// output element,
/// `out[t][r] = S^W_r · (S^I · acc_in[t][r] + Σ_j S^O_j · x_o[t][j] · w[r][o_j])`.
pub fn hybrid_gemm(
    w: &PackedInt4Matrix,
    w_scales: &[f64],
    x_inlier: &PackedInt4Matrix,
    inlier_scale: f64,
    outliers: &OutlierBuffer,
) -> Result<GemmResult> {
    let prepared = PreparedWeights::new(w, w_scales)?;
    let panel = OutlierPanel::gather(&prepared, outliers.channel_indices())?;
    hybrid_gemm_prepared(
        &prepared,
        &panel,
        x_inlier,
        inlier_scale,
        outliers,
        GemmTiles::default(),
    )
}

/// [`hybrid_gemm`] against weights and an outlier panel prepared earlier.
/// The panel must have been gathered for the buffer's channels.
pub fn hybrid_gemm_prepared(
    w: &PreparedWeights,
    panel: &OutlierPanel,
    x_inlier: &PackedInt4Matrix,
    inlier_scale: f64,
    outliers: &OutlierBuffer,
    tiles: GemmTiles,
) -> Result<GemmResult> {
    tiles.validate()?;
    let (t, k, r) = (x_inlier.rows(), w.cols, w.rows);
    if x_inlier.cols() != k {
        return Err(Error::shape(
            "hybrid gemm",
            format!("activation has {} channels, weights {k}", x_inlier.cols()),
        ));
    }
    if outliers.rows() != t {
        return Err(Error::shape(
            "hybrid gemm",
            format!(
                "outlier buffer has {} rows, activation {t}",
                outliers.rows()
            ),
        ));
    }
    if panel.indices != outliers.channel_indices() {
        return Err(Error::InvalidArgument(
            "outlier panel was gathered for other channels".into(),
        ));
    }
    if !inlier_scale.is_finite() {
        return Err(Error::NonFinite(format!("inlier scale {inlier_scale}")));
    }
    check_inner(k, MAX_INNER_I4)?;
    check_inner(panel.indices.len(), MAX_INNER_I4XI8)?;

    let acc_inlier = int_gemm(&x_inlier.decode_i16(), &w.codes, (t, r, k), tiles);
    let mut acc_outlier = vec![0i32; t * r];
    let mut output = vec![0.0; t * r];
    acc_outlier
        .par_chunks_mut(r.max(1))
        .zip(output.par_chunks_mut(r.max(1)))
        .enumerate()
        .for_each(|(ti, (ao, out))| {
            outlier_row(panel, outliers, ti, ao, Some(out));
            let ai = &acc_inlier[ti * r..(ti + 1) * r];
            for ((o, &a), &sw) in out.iter_mut().zip(ai).zip(&w.scales) {
                *o = sw * (inlier_scale * a as f64 + *o);
            }
        });
    Ok(GemmResult {
        rows: t,
        cols: r,
        acc_inlier,
        acc_outlier,
        output,
    })
}

/// Per-row symmetric 4-bit quantization of an `R×K` weight matrix.
pub fn quantize_weights_i4(
    w: &[f64],
    rows: usize,
    cols: usize,
) -> Result<(PackedInt4Matrix, Vec<f64>)> {
    if w.len() != rows * cols {
        return Err(Error::shape(
            "quantize_weights_i4",
            format!("{} values for {rows}×{cols}", w.len()),
        ));
    }
    let mut codes = Vec::with_capacity(w.len());
    let mut scales = Vec::with_capacity(rows);
    for row in w.chunks(cols.max(1)).take(rows) {
        let s = scale_for(row, 4);
        codes.extend(quantize_symmetric(row, s, 4)?);
        scales.push(s);
    }
    debug_assert_eq!(qmax(4), 7);
    Ok((PackedInt4Matrix::pack(rows, cols, &codes)?, scales))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn codes(rng: &mut SeededRng, n: usize, q: i32) -> Vec<i8> {
        (0..n)
            .map(|_| (rng.index((2 * q + 1) as usize) as i32 - q) as i8)
            .collect()
    }

    fn oracle(x: &[i8], w: &[i8], t: usize, r: usize, k: usize) -> Vec<i32> {
        let mut out = vec![0i32; t * r];
        for i in 0..t {
            for j in 0..r {
                for p in 0..k {
                    out[i * r + j] += x[i * k + p] as i32 * w[j * k + p] as i32;
                }
            }
        }
        out
    }

    #[test]
    fn identity_weight_returns_activation() {
        let mut rng = SeededRng::new(1);
        let x = codes(&mut rng, 5 * 6, 7);
        let eye: Vec<i8> = (0..36).map(|i| (i % 7 == 0) as i8).collect();
        let acc = gemm_i4(
            &PackedInt4Matrix::pack(6, 6, &eye).unwrap(),
            &PackedInt4Matrix::pack(5, 6, &x).unwrap(),
        )
        .unwrap();
        assert_eq!(acc, x.iter().map(|&v| v as i32).collect::<Vec<_>>());
    }

    #[test]
    fn gemm_i4_matches_triple_loop_for_any_tiling() {
        let mut rng = SeededRng::new(2);
        let (t, r, k) = (32, 32, 32);
        let x = codes(&mut rng, t * k, 7);
        let w = codes(&mut rng, r * k, 7);
        let (px, pw) = (
            PackedInt4Matrix::pack(t, k, &x).unwrap(),
            PackedInt4Matrix::pack(r, k, &w).unwrap(),
        );
        let want = oracle(&x, &w, t, r, k);
        assert_eq!(gemm_i4(&pw, &px).unwrap(), want);
        let odd = GemmTiles {
            rows: 3,
            cols: 5,
            depth: 7,
        };
        assert_eq!(gemm_i4_tiled(&pw, &px, odd).unwrap(), want);
        assert_eq!(
            gemm_i4(&PackedInt4Matrix::zeros(r, k), &px).unwrap(),
            vec![0; t * r]
        );
    }

    #[test]
    fn single_outlier_column_is_rank_one() {
        let mut rng = SeededRng::new(3);
        let w = codes(&mut rng, 4 * 6, 7);
        let pw = PackedInt4Matrix::pack(4, 6, &w).unwrap();
        let col: Vec<i8> = vec![100, -127, 3];
        let buf = OutlierBuffer::new(3, vec![2], col.clone(), vec![0.5]).unwrap();
        let acc = gemm_i4xi8(&pw, &buf).unwrap();
        for t in 0..3 {
            for r in 0..4 {
                assert_eq!(acc[t * 4 + r], col[t] as i32 * w[r * 6 + 2] as i32);
            }
        }
        let zero = OutlierBuffer::new(3, vec![1, 4], vec![0; 6], vec![1.0, 1.0]).unwrap();
        assert!(gemm_i4xi8(&pw, &zero).unwrap().iter().all(|&v| v == 0));
        assert!(gemm_i4xi8(&pw, &OutlierBuffer::empty(3))
            .unwrap()
            .iter()
            .all(|&v| v == 0));
    }

    #[test]
    fn extraction_reassembles_and_decomposes() {
        let mut rng = SeededRng::new(4);
        let (t, k, r) = (7, 9, 5);
        let o_list = vec![1, 4, 8];
        let mut x = codes(&mut rng, t * k, 7);
        for i in 0..t {
            for &c in &o_list {
                x[i * k + c] = (rng.index(255) as i32 - 127) as i8;
            }
        }
        let w = codes(&mut rng, r * k, 7);
        let (inl, buf) = extract_outliers(&x, t, k, &o_list, &[1.0; 3]).unwrap();
        let mut back = inl.clone();
        for i in 0..t {
            for (j, &c) in o_list.iter().enumerate() {
                assert_eq!(inl[i * k + c], 0);
                back[i * k + c] = buf.columns()[i * 3 + j];
            }
        }
        assert_eq!(back, x);
        let pw = PackedInt4Matrix::pack(r, k, &w).unwrap();
        let a = gemm_i4(&pw, &PackedInt4Matrix::pack(t, k, &inl).unwrap()).unwrap();
        let b = gemm_i4xi8(&pw, &buf).unwrap();
        let sum: Vec<i32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(sum, oracle(&x, &w, t, r, k));

        let (same, empty) = extract_outliers(&x, t, k, &[], &[]).unwrap();
        assert_eq!(same, x);
        assert!(empty.is_empty());
        let all: Vec<usize> = (0..k).collect();
        let (zeroed, _) = extract_outliers(&x, t, k, &all, &vec![1.0; k]).unwrap();
        assert!(zeroed.iter().all(|&v| v == 0));
        assert!(extract_outliers(&x, t, k, &[k], &[1.0]).is_err());
    }

    #[test]
    fn fused_output_matches_dequantized_reference() {
        let mut rng = SeededRng::new(5);
        let (t, k, r) = (6, 10, 4);
        let xr: Vec<f64> = (0..t * k)
            .map(|i| {
                if i % k == 3 {
                    rng.uniform(-40.0, 40.0)
                } else {
                    rng.uniform(-1.0, 1.0)
                }
            })
            .collect();
        let wr: Vec<f64> = (0..r * k).map(|_| rng.normal()).collect();
        let (pw, sw) = quantize_weights_i4(&wr, r, k).unwrap();
        let si = 1.0 / 7.0;
        let (xi, buf) = quantize_hybrid(&xr, t, k, &[3], si).unwrap();
        let res = hybrid_gemm(&pw, &sw, &xi, si, &buf).unwrap();

        let wq = pw.unpack();
        let mut xd: Vec<f64> = xi.unpack().iter().map(|&q| q as f64 * si).collect();
        for i in 0..t {
            xd[i * k + 3] = buf.columns()[i] as f64 * buf.scales()[0];
        }
        let wd: Vec<f64> = (0..r * k).map(|i| wq[i] as f64 * sw[i / k]).collect();
        let want = reference_gemm(&xd, &wd, t, r, k);
        for (a, b) in res.output.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }

        let none = hybrid_gemm(&pw, &sw, &xi, si, &OutlierBuffer::empty(t)).unwrap();
        let acc = gemm_i4(&pw, &xi).unwrap();
        for (i, v) in none.output.iter().enumerate() {
            assert_eq!(*v, sw[i % r] * (si * acc[i] as f64));
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let w = PackedInt4Matrix::zeros(3, 4);
        assert!(gemm_i4(&w, &PackedInt4Matrix::zeros(2, 5)).is_err());
        assert!(hybrid_gemm(
            &w,
            &[1.0; 2],
            &PackedInt4Matrix::zeros(2, 4),
            1.0,
            &OutlierBuffer::empty(2)
        )
        .is_err());
        assert!(hybrid_gemm(
            &w,
            &[1.0; 3],
            &PackedInt4Matrix::zeros(2, 4),
            1.0,
            &OutlierBuffer::empty(3)
        )
        .is_err());
        assert!(GemmTiles {
            rows: 0,
            ..GemmTiles::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn overflow_bounds_are_safe() {
        assert!(MAX_INNER_I4 as i64 * 49 <= i32::MAX as i64);
        assert!(MAX_INNER_I4XI8 as i64 * 7 * 127 <= i32::MAX as i64);
    }

    #[test]
    fn f16_epilogue_rounds_to_half_precision() {
        let mut r = GemmResult {
            rows: 1,
            cols: 3,
            acc_inlier: vec![0; 3],
            acc_outlier: vec![0; 3],
            output: vec![1.0 + 1e-4, 65504.0, 1e6],
        };
        r.round_output_f16();
        assert_eq!(r.output, vec![1.0, 65504.0, f64::INFINITY]);
    }
}
