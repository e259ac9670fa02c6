//! Group-wise convolutional code quantization.
//!
//! Each group of `g` weights along an output channel gets one real scale. The
//! group is cut into subvectors of `N` weights (or, for the hybrid family, a
//! 3-weight and a 4-weight subvector per 16-bit word) and every subvector is
//! replaced by the code whose decoded states, centered on the zero point and
//! multiplied by the scale, are closest in squared error. Scale and codes are
//! then refined alternately with the closed-form least-squares scale.
//!
//! After group quantization the per-group scales of a channel are quantized
//! against a channel super scale, and for the clustered family the raw 15-bit
//! codes of a channel are mapped affinely onto 256 reconstructable codes.
//! The final reconstruction is always computed with the same `f32` arithmetic
//! the kernels use, so the two sides agree bit for bit.

use rayon::prelude::*;

use crate::coding::{decode_states_into, EncodingConfig};
use crate::error::{CcqError, Result};
use crate::family::{Family, GroupGeometry, Slot, DEFAULT_GROUP_SIZE};
use crate::packing::quantize_scales;
use crate::tensor::Matrix;

pub const DEFAULT_ROUNDS: usize = 2;

/// Scale and zero point of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupQuantParams {
    pub scale: f64,
    pub zero_point: u32,
}

/// Per-channel affine map from 8-bit clustered codes to full codes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// `alpha`
    pub code_scale: f32,
    /// `beta`
    pub code_zero_point: f32,
}

impl ClusterParams {
    /// `round(q * alpha + beta)`, rounding half away from zero.
    ///
    /// Returns `None` when the result is negative or not finite.
    #[inline]
    pub fn expand(&self, q: u8) -> Option<u32> {
        let r = (q as f32 * self.code_scale + self.code_zero_point).round();
        if r.is_finite() && r >= 0.0 && r <= u32::MAX as f32 {
            Some(r as u32)
        } else {
            None
        }
    }

    /// Checks that every clustered code expands into `[0, 2^total_bits)`.
    pub fn validate(&self, total_bits: u32) -> Result<()> {
        if !(self.code_scale.is_finite() && self.code_scale > 0.0) {
            return Err(CcqError::Invariant(format!(
                "code scale {} must be positive",
                self.code_scale
            )));
        }
        let limit = 1u32 << total_bits;
        // expand is monotone in q for a positive scale
        match (self.expand(0), self.expand(255)) {
            (Some(_), Some(hi)) if hi < limit => Ok(()),
            _ => Err(CcqError::Invariant(format!(
                "cluster ({}, {}) reconstructs codes outside [0, {limit})",
                self.code_scale, self.code_zero_point
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantizerOptions {
    pub family: Family,
    pub group_size: usize,
    pub refinement_rounds: usize,
}

impl QuantizerOptions {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            group_size: DEFAULT_GROUP_SIZE,
            refinement_rounds: DEFAULT_ROUNDS,
        }
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.refinement_rounds = rounds;
        self
    }
}

/// Logical result of quantizing a matrix.
///
/// `codes` holds `geometry().words` code words per group, groups in row-major
/// order. For the plain families these are the stored words without the
/// embedded scale bits; for the clustered family they are the expanded 15-bit
/// codes `round(q * alpha + beta)` of `clustered_codes`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub family: Family,
    pub group_size: usize,
    pub codes: Vec<u16>,
    pub q_scales: Vec<u16>,
    pub super_scales: Vec<f32>,
    pub cluster: Option<Vec<ClusterParams>>,
    pub clustered_codes: Option<Vec<u8>>,
}

impl QuantizedTensor {
    pub fn geometry(&self) -> GroupGeometry {
        GroupGeometry::new(self.family, self.group_size).expect("validated at construction")
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    pub fn zero_point(&self) -> u32 {
        self.family.zero_point()
    }

    /// Dequantized scale of group `i`: `q_scale * super_scale` in `f32`.
    pub fn group_scale(&self, i: usize) -> f32 {
        self.q_scales[i] as f32 * self.super_scales[i / self.groups_per_row().max(1)]
    }

    pub fn group_words(&self, i: usize) -> &[u16] {
        let w = self.geometry().words;
        &self.codes[i * w..(i + 1) * w]
    }

    /// Checks lengths and value ranges; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let geom = GroupGeometry::new(self.family, self.group_size)?;
        if !self.cols.is_multiple_of(self.group_size) {
            return Err(CcqError::Shape(format!(
                "{} columns are not a multiple of group size {}",
                self.cols, self.group_size
            )));
        }
        let groups = self.group_count();
        let check_len = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(CcqError::Shape(format!("{name}: expected {want} entries, got {got}")))
            }
        };
        check_len("codes", self.codes.len(), groups * geom.words)?;
        check_len("q_scales", self.q_scales.len(), groups)?;
        check_len("super_scales", self.super_scales.len(), self.rows)?;
        let scale_limit = 1u32 << self.family.scale_bits();
        if let Some(q) = self.q_scales.iter().find(|&&q| q as u32 >= scale_limit) {
            return Err(CcqError::Domain(format!(
                "quantized scale {q} does not fit {} bits",
                self.family.scale_bits()
            )));
        }
        if let Some(s) = self.super_scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(CcqError::Domain(format!("super scale {s} is not a finite non-negative value")));
        }
        let code_limit = 1u32 << self.family.code_bits();
        if let Some(c) = self.codes.iter().find(|&&c| c as u32 >= code_limit) {
            return Err(CcqError::Domain(format!(
                "code {c:#x} does not fit {} bits",
                self.family.code_bits()
            )));
        }
        if geom.embedded_scale {
            let layout = self.family.layout();
            let first = layout.weight_mask << layout.weight_shifts[0];
            let redundant = !first & ((1u32 << self.family.code_bits()) - 1);
            for g in 0..groups {
                let tail = self.codes[g * geom.words + geom.words - 1] as u32;
                if tail & redundant != 0 {
                    return Err(CcqError::Domain(format!(
                        "group {g}: tail code {tail:#x} sets bits past its single valid state"
                    )));
                }
            }
        }
        match (self.family.uses_cluster(), &self.cluster, &self.clustered_codes) {
            (false, None, None) => Ok(()),
            (true, Some(params), Some(q)) => {
                check_len("cluster", params.len(), self.rows)?;
                check_len("clustered_codes", q.len(), self.codes.len())?;
                let per_row = self.groups_per_row() * geom.words;
                for (r, p) in params.iter().enumerate() {
                    p.validate(self.family.code_bits())?;
                    for i in r * per_row..(r + 1) * per_row {
                        if p.expand(q[i]) != Some(self.codes[i] as u32) {
                            return Err(CcqError::Invariant(format!(
                                "code {i} is not the expansion of its clustered code"
                            )));
                        }
                    }
                }
                Ok(())
            }
            _ => Err(CcqError::Invariant(format!(
                "cluster data presence does not match family {}",
                self.family
            ))),
        }
    }

    /// Quantizer-side reconstruction, decoding codes through [`decode_states_into`].
    pub fn reconstruct(&self) -> Matrix {
        let geom = self.geometry();
        let slots = geom.slots();
        let mut out = Matrix::zeros(self.rows, self.cols);
        let data = out.data_mut();
        for g in 0..self.group_count() {
            let dst = &mut data[g * self.group_size..(g + 1) * self.group_size];
            reconstruct_group(
                self.group_words(g),
                &slots,
                self.zero_point(),
                self.group_scale(g),
                dst,
            );
        }
        out
    }

    /// Squared reconstruction error of every group against `original`.
    pub fn group_errors(&self, original: &Matrix) -> Result<Vec<f64>> {
        if original.shape() != (self.rows, self.cols) {
            return Err(CcqError::Shape(format!(
                "original is {:?}, quantized tensor is {}x{}",
                original.shape(),
                self.rows,
                self.cols
            )));
        }
        let slots = self.geometry().slots();
        Ok((0..self.group_count())
            .map(|g| {
                let group = &original.data()[g * self.group_size..(g + 1) * self.group_size];
                reconstruction_error(
                    group,
                    &slots,
                    self.group_words(g),
                    self.zero_point(),
                    self.group_scale(g),
                )
            })
            .collect())
    }
}

/// Absmax initializer: `max|w| / (2^(L-1) - 1)`, zero for an all-zero group.
pub fn init_group_scale(group: &[f32], state_bits: u32) -> f64 {
    let absmax = group.iter().fold(0.0f64, |m, &w| m.max((w as f64).abs()));
    let levels = ((1u64 << (state_bits - 1)) - 1).max(1) as f64;
    absmax / levels
}

#[inline]
fn sq_error(x: f32, state: u8, zero_point: u32, scale: f64) -> f64 {
    let d = x as f64 - (state as f64 - zero_point as f64) * scale;
    d * d
}

/// Per-position squared error of every state, `table[j * 2^L + s]`.
fn error_table(subvector: &[f32], state_bits: u32, zero_point: u32, scale: f64) -> Vec<f64> {
    let n_states = 1usize << state_bits;
    let mut table = Vec::with_capacity(subvector.len() * n_states);
    for &x in subvector {
        table.extend((0..n_states).map(|s| sq_error(x, s as u8, zero_point, scale)));
    }
    table
}

/// Exhaustive search for the code minimizing squared error on `subvector`.
///
/// Ties go to the smallest code. `subvector.len()` must equal `N`.
pub fn search_codes(subvector: &[f32], scale: f64, zero_point: u32, config: &EncodingConfig) -> u32 {
    assert_eq!(
        subvector.len(),
        config.states(),
        "subvector length must equal the number of states"
    );
    search_codes_padded(subvector, scale, zero_point, config)
}

/// [`search_codes`] for a subvector shorter than `N`.
///
/// Missing trailing positions are padding: they contribute no error and their
/// transition bits are left at zero.
pub fn search_codes_padded(
    subvector: &[f32],
    scale: f64,
    zero_point: u32,
    config: &EncodingConfig,
) -> u32 {
    let valid = subvector.len();
    assert!(valid <= config.states(), "subvector longer than the code");
    if valid == 0 {
        return 0;
    }
    let table = error_table(subvector, config.state_bits(), zero_point, scale);
    BranchAndBound::new(&table, config, valid).run()
}

/// Depth-first enumeration of codes in increasing order with pruning.
///
/// Partial sums are accumulated left to right exactly as a full evaluation
/// would, and squared errors are non-negative, so a prefix whose partial sum
/// already exceeds the best complete error cannot win. The result is
/// therefore identical to a plain sweep over all `2^T` codes.
struct BranchAndBound<'a> {
    table: &'a [f64],
    n_states: usize,
    valid: usize,
    state_mask: u32,
    overlap_mask: u32,
    transition_bits: u32,
    /// Trailing zero bits appended after the last valid state.
    pad_bits: u32,
    total_bits: u32,
    state_bits: u32,
    best: f64,
    best_code: u32,
}

impl<'a> BranchAndBound<'a> {
    fn new(table: &'a [f64], config: &EncodingConfig, valid: usize) -> Self {
        let s = config.transition_bits();
        let overlap = config.state_bits() - s;
        Self {
            table,
            n_states: 1 << config.state_bits(),
            valid,
            state_mask: config.state_mask(),
            overlap_mask: (1 << overlap) - 1,
            transition_bits: s,
            pad_bits: (config.states() - valid) as u32 * s,
            total_bits: config.total_bits(),
            state_bits: config.state_bits(),
            best: f64::INFINITY,
            best_code: u32::MAX,
        }
    }

    #[inline]
    fn err(&self, j: usize, state: u32) -> f64 {
        self.table[j * self.n_states + state as usize]
    }

    /// Greedy path used as the initial bound.
    fn greedy(&mut self) {
        let mut state = (0..self.n_states as u32)
            .min_by(|&a, &b| self.err(0, a).total_cmp(&self.err(0, b)))
            .unwrap();
        let mut code = state;
        let mut sum = self.err(0, state);
        for j in 1..self.valid {
            let base = (state & self.overlap_mask) << self.transition_bits;
            let t = (0..1u32 << self.transition_bits)
                .min_by(|&a, &b| self.err(j, base | a).total_cmp(&self.err(j, base | b)))
                .unwrap();
            state = base | t;
            code = (code << self.transition_bits) | t;
            sum += self.err(j, state);
        }
        self.best = sum;
        self.best_code = code << self.pad_bits;
    }

    fn run(mut self) -> u32 {
        self.greedy();
        for s0 in 0..self.n_states as u32 {
            let p = self.err(0, s0);
            if self.prune(p, s0, 1) {
                continue;
            }
            self.descend(1, s0, p, s0);
        }
        self.best_code
    }

    /// True when no code under `prefix` (with `depth` states placed) can beat the best.
    #[inline]
    fn prune(&self, partial: f64, prefix: u32, depth: usize) -> bool {
        if partial > self.best {
            return true;
        }
        if partial == self.best {
            let used = self.state_bits + (depth as u32 - 1) * self.transition_bits;
            let smallest = prefix << (self.total_bits - used);
            return smallest >= self.best_code;
        }
        false
    }

    fn descend(&mut self, depth: usize, prev: u32, partial: f64, prefix: u32) {
        if depth == self.valid {
            let code = prefix << self.pad_bits;
            if partial < self.best || (partial == self.best && code < self.best_code) {
                self.best = partial;
                self.best_code = code;
            }
            return;
        }
        let base = (prev & self.overlap_mask) << self.transition_bits;
        for t in 0..1u32 << self.transition_bits {
            let state = (base | t) & self.state_mask;
            let p = partial + self.err(depth, state);
            let next = (prefix << self.transition_bits) | t;
            if self.prune(p, next, depth + 1) {
                continue;
            }
            self.descend(depth + 1, state, p, next);
        }
    }
}

/// Least-squares scale `sum(w q) / sum(q^2)` for fixed centered codes.
///
/// Returns `prior` when every centered code is zero. The result is clamped at
/// zero so group scales stay non-negative.
pub fn optimize_scale(group: &[f32], centered_codes: &[i32], prior: f64) -> f64 {
    debug_assert_eq!(group.len(), centered_codes.len());
    let (num, den) = group
        .iter()
        .zip(centered_codes)
        .fold((0.0f64, 0.0f64), |(n, d), (&w, &q)| {
            let q = q as f64;
            (n + w as f64 * q, d + q * q)
        });
    if den == 0.0 {
        prior
    } else {
        (num / den).max(0.0)
    }
}

/// Codes and real scale of one group before scale quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCodes {
    pub words: Vec<u16>,
    pub scale: f64,
    /// Squared error at `scale` over the real (non-padding) positions.
    pub error: f64,
}

fn search_group(group: &[f32], slots: &[Slot], words: usize, zero_point: u32, scale: f64) -> Vec<u16> {
    let mut out = vec![0u16; words];
    for slot in slots.iter().filter(|s| s.valid > 0) {
        let sub = &group[slot.start..slot.start + slot.valid];
        let code = search_codes_padded(sub, scale, zero_point, &slot.segment.config);
        out[slot.word] |= (code << slot.segment.offset) as u16;
    }
    out
}

/// Visits `(position, state)` for every real position of a group.
fn for_each_state(words: &[u16], slots: &[Slot], mut f: impl FnMut(usize, u8)) {
    let mut states = [0u8; 16];
    for slot in slots.iter().filter(|s| s.valid > 0) {
        let cfg = &slot.segment.config;
        let code = (words[slot.word] as u32 >> slot.segment.offset) & (cfg.code_count() - 1);
        decode_states_into(code, cfg, &mut states[..cfg.states()]);
        for (j, &s) in states[..slot.valid].iter().enumerate() {
            f(slot.start + j, s);
        }
    }
}

fn group_error(group: &[f32], slots: &[Slot], words: &[u16], zero_point: u32, scale: f64) -> f64 {
    let mut err = vec![0.0f64; group.len()];
    for_each_state(words, slots, |i, s| err[i] = sq_error(group[i], s, zero_point, scale));
    err.iter().sum()
}

fn centered_codes(words: &[u16], slots: &[Slot], len: usize, zero_point: u32) -> Vec<i32> {
    let mut out = vec![0i32; len];
    for_each_state(words, slots, |i, s| out[i] = s as i32 - zero_point as i32);
    out
}

/// `(state - zp) * scale` in `f32`, the same arithmetic as the kernels.
#[inline]
pub(crate) fn dequant_value(state: u32, zero_point: u32, scale: f32) -> f32 {
    (state as i32 - zero_point as i32) as f32 * scale
}

fn reconstruct_group(words: &[u16], slots: &[Slot], zero_point: u32, scale: f32, out: &mut [f32]) {
    for_each_state(words, slots, |i, s| out[i] = dequant_value(s as u32, zero_point, scale));
}

fn reconstruction_error(group: &[f32], slots: &[Slot], words: &[u16], zero_point: u32, scale: f32) -> f64 {
    let mut recon = vec![0.0f32; group.len()];
    reconstruct_group(words, slots, zero_point, scale, &mut recon);
    group
        .iter()
        .zip(&recon)
        .map(|(&w, &r)| {
            let d = w as f64 - r as f64;
            d * d
        })
        .sum()
}

/// Keeps the lower-error candidate; ties keep the incumbent.
fn keep_best(best: &mut GroupCodes, candidate: GroupCodes) -> bool {
    if candidate.error < best.error {
        *best = candidate;
        true
    } else {
        false
    }
}

/// Quantizes one group: absmax initial scale, exhaustive code search, then
/// `rounds` of least-squares scale update followed by a fresh search.
///
/// The returned error never exceeds the error after the initial search.
pub fn quantize_group(group: &[f32], family: Family, rounds: usize) -> Result<GroupCodes> {
    let geom = GroupGeometry::new(family, group.len())?;
    let slots = geom.slots();
    Ok(quantize_group_with(group, &geom, &slots, rounds))
}

fn quantize_group_with(group: &[f32], geom: &GroupGeometry, slots: &[Slot], rounds: usize) -> GroupCodes {
    let family = geom.family;
    let zp = family.zero_point();
    let scale = init_group_scale(group, family.state_bits());
    if scale == 0.0 {
        return GroupCodes {
            words: vec![0; geom.words],
            scale: 0.0,
            error: 0.0,
        };
    }
    let words = search_group(group, slots, geom.words, zp, scale);
    let error = group_error(group, slots, &words, zp, scale);
    let mut best = GroupCodes { words, scale, error };
    let mut current = best.clone();
    for _ in 0..rounds {
        let centered = centered_codes(&current.words, slots, group.len(), zp);
        let scale = optimize_scale(group, &centered, current.scale);
        if scale == current.scale {
            break;
        }
        let words = search_group(group, slots, geom.words, zp, scale);
        let error = group_error(group, slots, &words, zp, scale);
        current = GroupCodes { words, scale, error };
        if !keep_best(&mut best, current.clone()) {
            break;
        }
    }
    best
}

/// Affine clustering of one channel's codes onto 8 bits.
///
/// `beta = min`, `alpha = (max - min) / 255` (1 when all codes are equal), and
/// each code maps to `round((c - beta) / alpha)` clamped to `[0, 255]`. This is
/// the naive mapping; [`quantize_tensor`] follows it with a re-search over the
/// 256 reconstructable codes.
pub fn cluster_channel(channel_codes: &[u32], total_bits: u32) -> Result<(ClusterParams, Vec<u8>)> {
    if let Some(c) = channel_codes.iter().find(|&&c| c >= 1 << total_bits) {
        return Err(CcqError::Domain(format!("code {c:#x} does not fit {total_bits} bits")));
    }
    let (min, max) = match (channel_codes.iter().min(), channel_codes.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => (0, 0),
    };
    let beta = min as f32;
    let alpha = if max == min {
        1.0
    } else {
        (max - min) as f32 / 255.0
    };
    let params = ClusterParams {
        code_scale: alpha,
        code_zero_point: beta,
    };
    let q = channel_codes
        .iter()
        .map(|&c| ((c as f32 - beta) / alpha).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok((params, q))
}

/// The 256 reconstructable state vectors of one clustered channel.
struct ClusterTable {
    config: EncodingConfig,
    codes: Vec<u32>,
    states: Vec<u8>,
}

impl ClusterTable {
    fn new(params: &ClusterParams, config: EncodingConfig) -> Result<Self> {
        params.validate(config.total_bits())?;
        let n = config.states();
        let mut codes = Vec::with_capacity(256);
        let mut states = vec![0u8; 256 * n];
        for q in 0..=255u8 {
            let code = params.expand(q).expect("validated");
            decode_states_into(code, &config, &mut states[q as usize * n..(q as usize + 1) * n]);
            codes.push(code);
        }
        Ok(Self { config, codes, states })
    }

    /// Smallest `q` whose expansion minimizes squared error on `subvector`.
    fn search(&self, subvector: &[f32], scale: f64, zero_point: u32) -> u8 {
        if subvector.is_empty() {
            return 0;
        }
        let n = self.config.states();
        let n_states = 1usize << self.config.state_bits();
        let table = error_table(subvector, self.config.state_bits(), zero_point, scale);
        let mut best = f64::INFINITY;
        let mut best_q = 0u8;
        for q in 0..256usize {
            let row = &self.states[q * n..q * n + subvector.len()];
            let mut e = 0.0;
            for (j, &s) in row.iter().enumerate() {
                e += table[j * n_states + s as usize];
            }
            if e < best {
                best = e;
                best_q = q as u8;
            }
        }
        best_q
    }
}

/// Clustered group: 8-bit codes per word plus their expansions.
#[derive(Clone, Debug, PartialEq)]
struct ClusteredGroup {
    q: Vec<u8>,
    codes: GroupCodes,
}

fn cluster_search_group(
    group: &[f32],
    slots: &[Slot],
    table: &ClusterTable,
    zero_point: u32,
    scale: f64,
) -> ClusteredGroup {
    let q: Vec<u8> = slots
        .iter()
        .map(|slot| table.search(&group[slot.start..slot.start + slot.valid], scale, zero_point))
        .collect();
    let words: Vec<u16> = q.iter().map(|&q| table.codes[q as usize] as u16).collect();
    let error = group_error(group, slots, &words, zero_point, scale);
    ClusteredGroup {
        q,
        codes: GroupCodes { words, scale, error },
    }
}

/// Re-fits a group to the 256 codes reachable from its channel's cluster,
/// refining the scale with the same alternation as [`quantize_group`].
fn cluster_refine_group(
    group: &[f32],
    slots: &[Slot],
    table: &ClusterTable,
    zero_point: u32,
    scale: f64,
    rounds: usize,
) -> ClusteredGroup {
    let mut best = cluster_search_group(group, slots, table, zero_point, scale);
    if scale == 0.0 {
        return best;
    }
    let mut current = best.clone();
    for _ in 0..rounds {
        let centered = centered_codes(&current.codes.words, slots, group.len(), zero_point);
        let scale = optimize_scale(group, &centered, current.codes.scale);
        if scale == current.codes.scale {
            break;
        }
        current = cluster_search_group(group, slots, table, zero_point, scale);
        if current.codes.error < best.codes.error {
            best = current.clone();
        } else {
            break;
        }
    }
    best
}

struct RowResult {
    codes: Vec<u16>,
    q_scales: Vec<u16>,
    super_scale: f32,
    cluster: Option<(ClusterParams, Vec<u8>)>,
}

/// Quantizes a matrix group by group along each output channel (row).
///
/// Rows are processed in parallel; the result does not depend on scheduling.
pub fn quantize_tensor(matrix: &Matrix, options: &QuantizerOptions) -> Result<QuantizedTensor> {
    let geom = GroupGeometry::new(options.family, options.group_size)?;
    let (rows, cols) = matrix.shape();
    if cols % options.group_size != 0 {
        return Err(CcqError::Shape(format!(
            "{rows}x{cols} matrix: {cols} columns are not a multiple of group size {}; \
             groups may not straddle output channels",
            options.group_size
        )));
    }
    if let Some(i) = matrix.data().iter().position(|v| !v.is_finite()) {
        return Err(CcqError::Domain(format!("weight {i} is not finite")));
    }
    let slots = geom.slots();
    let results: Vec<RowResult> = (0..rows)
        .into_par_iter()
        .map(|r| quantize_row(matrix.row(r), &geom, &slots, options.refinement_rounds))
        .collect::<Result<_>>()?;

    let mut out = QuantizedTensor {
        rows,
        cols,
        family: options.family,
        group_size: options.group_size,
        codes: Vec::with_capacity(rows * (cols / options.group_size) * geom.words),
        q_scales: Vec::with_capacity(rows * (cols / options.group_size)),
        super_scales: Vec::with_capacity(rows),
        cluster: options.family.uses_cluster().then(Vec::new),
        clustered_codes: options.family.uses_cluster().then(Vec::new),
    };
    for r in results {
        out.codes.extend(r.codes);
        out.q_scales.extend(r.q_scales);
        out.super_scales.push(r.super_scale);
        if let Some((params, q)) = r.cluster {
            out.cluster.as_mut().expect("clustered family").push(params);
            out.clustered_codes.as_mut().expect("clustered family").extend(q);
        }
    }
    Ok(out)
}

fn quantize_row(row: &[f32], geom: &GroupGeometry, slots: &[Slot], rounds: usize) -> Result<RowResult> {
    let family = geom.family;
    let zp = family.zero_point();
    let g = geom.group_size;
    let groups: Vec<&[f32]> = row.chunks_exact(g).collect();
    let mut stage: Vec<GroupCodes> = groups
        .iter()
        .map(|group| quantize_group_with(group, geom, slots, rounds))
        .collect();

    let table = if family.uses_cluster() {
        let config = family.configs()[0];
        let raw: Vec<u32> = stage
            .iter()
            .flat_map(|gc| gc.words.iter().map(|&w| w as u32))
            .collect();
        let (params, _) = cluster_channel(&raw, config.total_bits())?;
        let table = ClusterTable::new(&params, config)?;
        for (group, gc) in groups.iter().zip(stage.iter_mut()) {
            *gc = cluster_refine_group(group, slots, &table, zp, gc.scale, rounds).codes;
        }
        Some((params, table))
    } else {
        None
    };

    let scales: Vec<f32> = stage.iter().map(|gc| gc.scale as f32).collect();
    let (super_scale, _) = quantize_scales(&scales, family.scale_bits())?;
    let q_max = (1u32 << family.scale_bits()) - 1;

    let mut codes = Vec::with_capacity(groups.len() * geom.words);
    let mut q_scales = Vec::with_capacity(groups.len());
    let mut clustered = Vec::new();
    for (group, gc) in groups.iter().zip(&stage) {
        // Choose between the two neighbouring quantized scales, re-searching
        // codes at each; the lower final error wins, ties to the smaller q.
        let ratio = gc.scale / super_scale as f64;
        let lo = (ratio.floor().max(0.0) as u32).min(q_max);
        let hi = (ratio.ceil().max(0.0) as u32).min(q_max);
        let mut best: Option<(f64, u16, Vec<u16>, Vec<u8>)> = None;
        for q in if lo == hi { vec![lo] } else { vec![lo, hi] } {
            let s = q as f32 * super_scale;
            let (words, qs) = match &table {
                Some((_, t)) => {
                    let c = cluster_search_group(group, slots, t, zp, s as f64);
                    (c.codes.words, c.q)
                }
                None => (search_group(group, slots, geom.words, zp, s as f64), Vec::new()),
            };
            let err = reconstruction_error(group, slots, &words, zp, s);
            if best.as_ref().is_none_or(|b| err < b.0) {
                best = Some((err, q as u16, words, qs));
            }
        }
        let (_, q, words, qs) = best.expect("at least one candidate");
        q_scales.push(q);
        codes.extend(words);
        clustered.extend(qs);
    }
    Ok(RowResult {
        codes,
        q_scales,
        super_scale,
        cluster: table.map(|(params, _)| (params, clustered)),
    })
}

/// Min-max round-to-nearest baseline: per group `lo = min`, step
/// `(max - min) / (2^bits - 1)`, reconstruction `lo + round((w - lo) / step) * step`.
pub fn rtn_quantize(matrix: &Matrix, bits: u32, group_size: usize) -> Result<Matrix> {
    if bits != 2 && bits != 4 {
        return Err(CcqError::Config(format!("RTN supports 2 or 4 bits, got {bits}")));
    }
    if group_size == 0 || !matrix.cols().is_multiple_of(group_size) {
        return Err(CcqError::Shape(format!(
            "{} columns are not a multiple of group size {group_size}",
            matrix.cols()
        )));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let mut out = matrix.clone();
    for group in out.data_mut().chunks_exact_mut(group_size) {
        let lo = group.iter().fold(f64::INFINITY, |m, &w| m.min(w as f64));
        let hi = group.iter().fold(f64::NEG_INFINITY, |m, &w| m.max(w as f64));
        let step = (hi - lo) / levels;
        if step == 0.0 {
            continue;
        }
        for w in group.iter_mut() {
            let q = ((*w as f64 - lo) / step).round().clamp(0.0, levels);
            *w = (lo + q * step) as f32;
        }
    }
    Ok(out)
}
