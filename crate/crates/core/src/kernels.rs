//! Lookup-free dequantization and fused dequantize-GEMV.
//!
//! Both decode paths read states straight out of the packed words with the
//! [`LayoutSpec`] shift list and weight mask. No codebook is built and no
//! table is indexed by code data. The clustered path first widens each 8-bit
//! code with `round(q * alpha + beta)` and then applies the same shifts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coding::LayoutSpec;
use crate::error::{CcqError, Result};
use crate::family::{Family, GroupGeometry};
use crate::packing::{pack_tensor, PackedTensor};
use crate::quantizer::{ClusterParams, QuantizedTensor};
use crate::tensor::Matrix;

/// Everything a group decode needs besides its payload.
#[derive(Clone, Debug, PartialEq)]
pub struct DequantContext {
    pub layout: LayoutSpec,
    pub zero_point: u32,
    pub super_scale: f32,
    /// `(s_code, zp_code)` for the clustered family.
    pub cluster: Option<ClusterParams>,
}

impl DequantContext {
    /// Context for output channel `row` of a packed tensor.
    pub fn for_row(p: &PackedTensor, row: usize) -> Self {
        Self {
            layout: p.header.layout.clone(),
            zero_point: p.header.zero_point,
            super_scale: p.super_scales[row],
            cluster: p.cluster.get(row).copied(),
        }
    }
}

#[inline]
fn load_word(payload: &[u8], index: usize, word_bits: u32) -> u32 {
    if word_bits == 8 {
        payload[index] as u32
    } else {
        u16::from_le_bytes([payload[2 * index], payload[2 * index + 1]]) as u32
    }
}

/// Decodes one group without code cluster.
///
/// With an embedded scale the last word supplies `s = (word & s_mask) * s_super`;
/// otherwise `side_scale` must hold the side-band quantized scale. Every
/// output is `((word >> shift) & w_mask) - zp) * s`. `out.len()` is the group size.
pub fn dequant_group_plain(
    payload: &[u8],
    side_scale: Option<u16>,
    ctx: &DequantContext,
    out: &mut [f32],
) -> Result<()> {
    let layout = &ctx.layout;
    if layout.uses_cluster {
        return Err(CcqError::Config("clustered layout needs dequant_group_cluster".into()));
    }
    let per_word = layout.weight_shifts.len();
    let words = out.len().div_ceil(per_word);
    if payload.len() * 8 != words * layout.word_bits as usize {
        return Err(CcqError::Shape(format!(
            "{} payload bytes for a group of {}",
            payload.len(),
            out.len()
        )));
    }
    let s_uint = match side_scale {
        Some(q) => q as u32,
        None => load_word(payload, words - 1, layout.word_bits),
    };
    let s = (s_uint & layout.scale_mask) as f32 * ctx.super_scale;
    let zp = ctx.zero_point as i32;
    for (w, chunk) in out.chunks_mut(per_word).enumerate() {
        let q = load_word(payload, w, layout.word_bits);
        for (d, &shift) in chunk.iter_mut().zip(&layout.weight_shifts) {
            *d = (((q >> shift) & layout.weight_mask) as i32 - zp) as f32 * s;
        }
    }
    Ok(())
}

/// Decodes one group with code cluster.
///
/// `s = ((s_q >> s_shift) & s_mask) * s_super`; each byte `q` widens to
/// `round(q * s_code + zp_code)` and is then split with the shift list.
pub fn dequant_group_cluster(
    payload: &[u8],
    s_q: u8,
    s_shift: u32,
    ctx: &DequantContext,
    out: &mut [f32],
) -> Result<()> {
    let layout = &ctx.layout;
    let params = match (layout.uses_cluster, ctx.cluster) {
        (true, Some(p)) => p,
        _ => {
            return Err(CcqError::Config(
                "dequant_group_cluster needs a clustered layout and cluster parameters".into(),
            ))
        }
    };
    let per_word = layout.weight_shifts.len();
    if payload.len() != out.len().div_ceil(per_word) {
        return Err(CcqError::Shape(format!(
            "{} clustered codes for a group of {}",
            payload.len(),
            out.len()
        )));
    }
    let code_limit = layout.weight_mask << layout.weight_shifts[0];
    let s = ((s_q as u32 >> s_shift) & layout.scale_mask) as f32 * ctx.super_scale;
    let zp = ctx.zero_point as i32;
    for (&q, chunk) in payload.iter().zip(out.chunks_mut(per_word)) {
        let code = match params.expand(q) {
            Some(c) if c <= (code_limit | (code_limit - 1)) => c,
            other => {
                return Err(CcqError::Invariant(format!(
                    "clustered code {q} widens to {other:?}, outside the code space"
                )))
            }
        };
        for (d, &shift) in chunk.iter_mut().zip(&layout.weight_shifts) {
            *d = (((code >> shift) & layout.weight_mask) as i32 - zp) as f32 * s;
        }
    }
    Ok(())
}

/// Side-band quantized scale of `group`, read from the LSB-first stream.
#[inline]
fn side_scale(p: &PackedTensor, group: usize) -> u16 {
    let bits = p.header.scale_bits as usize;
    let mut q = 0u16;
    for b in 0..bits {
        let pos = group * bits + b;
        q |= (((p.scales[pos / 8] >> (pos % 8)) & 1) as u16) << b;
    }
    q
}

/// Decodes group `group` of a packed tensor into `out`.
fn decode_group(
    p: &PackedTensor,
    geom: &GroupGeometry,
    group: usize,
    ctx: &DequantContext,
    out: &mut [f32],
) -> Result<()> {
    let payload = p.group_payload(group);
    if ctx.layout.uses_cluster {
        let s_shift = ctx.layout.scale_shifts[group % ctx.layout.scale_shifts.len()];
        dequant_group_cluster(payload, p.scales[group / 2], s_shift, ctx, out)
    } else if geom.embedded_scale {
        dequant_group_plain(payload, None, ctx, out)
    } else {
        dequant_group_plain(payload, Some(side_scale(p, group)), ctx, out)
    }
}

fn check_packed(p: &PackedTensor) -> Result<GroupGeometry> {
    let geom = p.header.geometry()?;
    let groups = p.header.group_count();
    let side = if geom.embedded_scale {
        0
    } else {
        (groups * p.header.scale_bits as usize).div_ceil(8)
    };
    if p.codes.len() != groups * geom.payload_bytes()
        || p.scales.len() != side
        || p.super_scales.len() != p.rows()
        || (p.header.family.uses_cluster() && p.cluster.len() != p.rows())
    {
        return Err(CcqError::Shape("packed sections do not match the header".into()));
    }
    Ok(geom)
}

/// Dequantizes every group of a packed tensor.
pub fn dequantize_tensor(p: &PackedTensor) -> Result<Matrix> {
    let geom = check_packed(p)?;
    let (rows, cols) = (p.rows(), p.cols());
    let per_row = p.groups_per_row();
    let g = geom.group_size;
    let mut data = vec![0.0f32; rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols)
            .enumerate()
            .try_for_each(|(r, row)| {
                let ctx = DequantContext::for_row(p, r);
                for (k, out) in row.chunks_mut(g).enumerate() {
                    decode_group(p, &geom, r * per_row + k, &ctx, out)?;
                }
                Ok::<_, CcqError>(())
            })?;
    }
    Matrix::new(rows, cols, data)
}

/// Fused `y = W x`: groups are decoded on the fly into a group-sized scratch
/// buffer and never materialized as a full matrix. Accumulates in `f64`.
pub fn gemv(p: &PackedTensor, x: &[f32]) -> Result<Vec<f32>> {
    Ok(gemv_batch(p, &[x])?.pop().expect("one input, one output"))
}

/// Fused product against `M` vectors, decoding each group once.
pub fn gemv_batch(p: &PackedTensor, xs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let geom = check_packed(p)?;
    let cols = p.cols();
    if let Some(x) = xs.iter().find(|x| x.len() != cols) {
        return Err(CcqError::Shape(format!(
            "vector of length {} against {cols} columns",
            x.len()
        )));
    }
    let per_row = p.groups_per_row();
    let g = geom.group_size;
    let m = xs.len();
    let per_row_out: Vec<Vec<f32>> = (0..p.rows())
        .into_par_iter()
        .map(|r| {
            let ctx = DequantContext::for_row(p, r);
            let mut buf = vec![0.0f32; g];
            let mut acc = vec![0.0f64; m];
            for k in 0..per_row {
                decode_group(p, &geom, r * per_row + k, &ctx, &mut buf)?;
                let base = k * g;
                for (a, x) in acc.iter_mut().zip(xs) {
                    let xg = &x[base..base + g];
                    for (&w, &v) in buf.iter().zip(xg) {
                        *a += w as f64 * v as f64;
                    }
                }
            }
            Ok(acc.into_iter().map(|a| a as f32).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..m)
        .map(|i| per_row_out.iter().map(|row| row[i]).collect())
        .collect())
}

/// Reference path: dequantize the whole matrix, then a dense product.
pub fn dequant_then_dense(p: &PackedTensor, xs: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
    let w = dequantize_tensor(p)?;
    xs.iter().map(|x| w.matvec(x)).collect()
}

/// Builds a valid packed tensor from uniformly random codes and scales.
///
/// GEMV cost and correctness do not depend on how codes were chosen, so the
/// benchmark uses these instead of running the quantizer on large shapes.
pub fn synthetic_packed(family: Family, rows: usize, cols: usize, group_size: usize, seed: u64) -> Result<PackedTensor> {
    let geom = GroupGeometry::new(family, group_size)?;
    if !cols.is_multiple_of(group_size) {
        return Err(CcqError::Shape(format!(
            "{cols} columns are not a multiple of group size {group_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = rows * cols / group_size;
    let layout = family.layout();
    let q_max = (1u32 << family.scale_bits()) - 1;
    let code_limit = 1u32 << family.code_bits();
    let super_scales: Vec<f32> = (0..rows).map(|_| rng.random_range(0.001f32..0.01)).collect();
    let q_scales: Vec<u16> = (0..groups).map(|_| rng.random_range(0..=q_max) as u16).collect();
    let (cluster, clustered_codes, codes) = if family.uses_cluster() {
        let params: Vec<ClusterParams> = (0..rows)
            .map(|_| {
                let beta = rng.random_range(0..4096u32) as f32;
                let span = rng.random_range(255.0f32..(code_limit as f32 - 1.0 - beta));
                ClusterParams {
                    code_scale: span / 255.0,
                    code_zero_point: beta,
                }
            })
            .collect();
        let per_row = cols / group_size * geom.words;
        let q: Vec<u8> = (0..groups * geom.words).map(|_| rng.random()).collect();
        let codes = q
            .iter()
            .enumerate()
            .map(|(i, &v)| params[i / per_row].expand(v).expect("valid cluster") as u16)
            .collect();
        (Some(params), Some(q), codes)
    } else {
        let tail_keep = layout.weight_mask << layout.weight_shifts[0];
        let codes = (0..groups * geom.words)
            .map(|i| {
                let c = rng.random_range(0..code_limit);
                if geom.embedded_scale && i % geom.words == geom.words - 1 {
                    (c & tail_keep) as u16
                } else {
                    c as u16
                }
            })
            .collect();
        (None, None, codes)
    };
    pack_tensor(&QuantizedTensor {
        rows,
        cols,
        family,
        group_size,
        codes,
        q_scales,
        super_scales,
        cluster,
        clustered_codes,
    })
}

/// Weight bytes a fused kernel reads: code payload, side-band scales, and per-channel reals.
pub fn packed_weight_bytes(p: &PackedTensor) -> u64 {
    (p.codes.len() + p.scales.len() + p.super_scales.len() * 4 + p.cluster.len() * 8) as u64
}

pub const VARIANT_DENSE: &str = "dense_f32";
pub const VARIANT_DEQUANT_DENSE: &str = "dequant_then_dense";
pub const VARIANT_FUSED: &str = "ccq_fused";

/// One line of the GEMV benchmark report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub variant: String,
    pub median_ms: f64,
    pub bytes_read: u64,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub family: Family,
    pub group_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

/// Weight-shaped problem sizes used by the benchmark, `rows x cols`.
pub const BENCH_SHAPES: [(usize, usize); 4] = [(4096, 4096), (4096, 1024), (8192, 8192), (8192, 1024)];
pub const BENCH_M: [usize; 2] = [1, 4];

fn median_ms(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    Ok(times[times.len() / 2])
}

/// Times dense `f32`, dequantize-then-dense, and fused GEMV for each shape and `M`.
///
/// `bytes_read` counts weight bytes only: the dense matrix, the packed
/// container sections, or both for the dequantize-then-dense path (which
/// reads back the matrix it materialized).
pub fn bench_gemv(shapes: &[(usize, usize)], m_sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut report = Vec::new();
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let packed = synthetic_packed(opts.family, rows, cols, opts.group_size, opts.seed + i as u64)?;
        let dense = dequantize_tensor(&packed)?;
        let dense_bytes = (rows * cols * 4) as u64;
        let ccq_bytes = packed_weight_bytes(&packed);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
        for &m in m_sizes {
            let xs: Vec<Vec<f32>> = (0..m)
                .map(|_| (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let xr: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
            let shape = format!("{rows}x{cols}");
            let dense_ms = median_ms(opts.repeats, || {
                for x in &xr {
                    std::hint::black_box(dense.matvec(x)?);
                }
                Ok(())
            })?;
            let deq_ms = median_ms(opts.repeats, || {
                std::hint::black_box(dequant_then_dense(&packed, &xr)?);
                Ok(())
            })?;
            let fused_ms = median_ms(opts.repeats, || {
                std::hint::black_box(gemv_batch(&packed, &xr)?);
                Ok(())
            })?;
            for (variant, ms, bytes) in [
                (VARIANT_DENSE, dense_ms, dense_bytes),
                (VARIANT_DEQUANT_DENSE, deq_ms, ccq_bytes + dense_bytes),
                (VARIANT_FUSED, fused_ms, ccq_bytes),
            ] {
                report.push(BenchRow {
                    shape: shape.clone(),
                    m,
                    variant: variant.to_string(),
                    median_ms: ms,
                    bytes_read: bytes,
                });
            }
        }
    }
    Ok(report)
}

pub fn report_to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CcqError::Io(std::io::Error::other(e)))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CcqError::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn report_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| CcqError::format(0, format!("bad bench csv: {e}"))))
        .collect()
}
