//! Reconstruction error and storage accounting.

use serde::Serialize;

use crate::error::{CcqError, Result};
use crate::family::{Family, GroupGeometry};
use crate::packing::{encode_container, measured_bpw, PackedTensor};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub mse: f64,
    pub max_abs: f64,
    /// `||W - W_hat||_F / ||W||_F`, defined as 0 when `W = 0`.
    pub rel_frobenius: f64,
    /// Squared error of each contiguous group of `group_size` elements.
    pub per_group_error: Vec<f64>,
}

pub fn error_report(original: &Matrix, reconstructed: &Matrix, group_size: usize) -> Result<ErrorReport> {
    if original.shape() != reconstructed.shape() {
        return Err(CcqError::Shape(format!(
            "{:?} vs {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    if group_size == 0 || !original.len().is_multiple_of(group_size) {
        return Err(CcqError::Shape(format!(
            "{} elements do not split into groups of {group_size}",
            original.len()
        )));
    }
    let sq: Vec<f64> = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .collect();
    let per_group_error: Vec<f64> = sq.chunks(group_size).map(|c| c.iter().sum()).collect();
    let total: f64 = per_group_error.iter().sum();
    let norm: f64 = original.data().iter().map(|&a| (a as f64).powi(2)).sum();
    let max_abs = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .fold(0.0f64, |m, (&a, &b)| m.max((a as f64 - b as f64).abs()));
    Ok(ErrorReport {
        mse: if sq.is_empty() { 0.0 } else { total / sq.len() as f64 },
        max_abs,
        rel_frobenius: if norm == 0.0 { 0.0 } else { (total / norm).sqrt() },
        per_group_error,
    })
}

/// Closed-form bits per weight for a family and group size.
///
/// When the scale is embedded (`g = 1 mod N`) this is `T * ceil(g / N) / g`;
/// otherwise `T * (g / N) / g + scale_bits / g`. Here `T` is the stored width of
/// one word: 8 for `(4,3,2)`, 16 for the hybrid word, and 8 for clustered codes.
pub fn closed_form_bpw(family: Family, group_size: usize) -> Result<f64> {
    let geom = GroupGeometry::new(family, group_size)?;
    let t = family.storage_bits() as f64;
    let n = family.weights_per_word();
    let g = group_size as f64;
    Ok(if geom.embedded_scale {
        t * group_size.div_ceil(n) as f64 / g
    } else {
        t * group_size.div_ceil(n) as f64 / g + family.scale_bits() as f64 / g
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressionSummary {
    pub bpw: f64,
    /// Per-channel reals expressed as extra bits per weight.
    pub overhead_bpw: f64,
    pub code_bytes: u64,
    pub scale_bytes: u64,
    pub channel_bytes: u64,
    pub header_bytes: u64,
    pub total_bytes: u64,
    pub original_bytes: u64,
    /// `(code_bytes + scale_bytes) / original_bytes`.
    pub payload_ratio: f64,
    /// `total_bytes / original_bytes`.
    pub total_ratio: f64,
    /// `1 - payload_ratio`.
    pub payload_saving: f64,
}

/// Storage breakdown of a packed tensor against an original size in bytes.
pub fn compression_summary(p: &PackedTensor, original_bytes: u64) -> Result<CompressionSummary> {
    let bpw = measured_bpw(p);
    let total = encode_container(p)?.len() as u64;
    let code_bytes = p.codes.len() as u64;
    let scale_bytes = p.scales.len() as u64;
    let channel_bytes = (p.super_scales.len() * 4 + p.cluster.len() * 8) as u64;
    let payload = code_bytes + scale_bytes;
    let ratio = |n: u64| {
        if original_bytes == 0 {
            0.0
        } else {
            n as f64 / original_bytes as f64
        }
    };
    Ok(CompressionSummary {
        bpw: bpw.value(),
        overhead_bpw: bpw.overhead(),
        code_bytes,
        scale_bytes,
        channel_bytes,
        // padding between sections is counted with the header
        header_bytes: total - payload - channel_bytes,
        total_bytes: total,
        original_bytes,
        payload_ratio: ratio(payload),
        total_ratio: ratio(total),
        payload_saving: 1.0 - ratio(payload),
    })
}
