//! Convolutional code configurations, codebooks, and bit-shift state decoding.
//!
//! A configuration `(L, N, S)` describes a run of `N` states of `L` bits each,
//! where every state after the first contributes only `S` fresh bits and shares
//! its high `L - S` bits with the low `L - S` bits of its predecessor. The whole
//! run therefore fits in `T = L + (N - 1) * S` bits.
//!
//! Bit order is MSB-first with overlapping windows: state `j` occupies bits
//! `[T - 1 - j*S, T - L - j*S]` of the code. This is the only ordering that
//! reproduces the shift lists of the supported layouts (e.g. `[4, 2, 0]` for
//! `(4, 3, 2)`), since the source material never states it outright.
//!
//! The [`Codebook`] materializes all `2^T` rows and exists for tests and
//! oracles. Production decoding goes through [`decode_states`] and the
//! [`LayoutSpec`] shift lists, which never allocate a table.

use serde::{Deserialize, Serialize};

use crate::error::{CcqError, Result};

/// Largest supported code width; codes must fit a 16-bit storage word.
pub const MAX_TOTAL_BITS: u32 = 16;
/// Largest supported state width.
pub const MAX_STATE_BITS: u32 = 8;

/// The `(L, N, S)` triplet of a convolutional code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 3]", into = "[u32; 3]")]
pub struct EncodingConfig {
    state_bits: u32,
    states: u32,
    transition_bits: u32,
}

impl EncodingConfig {
    pub fn new(state_bits: u32, states: u32, transition_bits: u32) -> Result<Self> {
        if transition_bits < 1 || transition_bits > state_bits || state_bits > MAX_STATE_BITS {
            return Err(CcqError::Config(format!(
                "({state_bits},{states},{transition_bits}) needs 1 <= S <= L <= {MAX_STATE_BITS}"
            )));
        }
        if states < 1 {
            return Err(CcqError::Config("a code needs at least one state".into()));
        }
        let total = state_bits as u64 + (states as u64 - 1) * transition_bits as u64;
        if total > MAX_TOTAL_BITS as u64 {
            return Err(CcqError::Config(format!(
                "({state_bits},{states},{transition_bits}) needs {total} bits, more than {MAX_TOTAL_BITS}"
            )));
        }
        Ok(Self {
            state_bits,
            states,
            transition_bits,
        })
    }

    /// `L`, bits per state.
    pub fn state_bits(&self) -> u32 {
        self.state_bits
    }

    /// `N`, states per code.
    pub fn states(&self) -> usize {
        self.states as usize
    }

    /// `S`, fresh bits contributed by each state after the first.
    pub fn transition_bits(&self) -> u32 {
        self.transition_bits
    }

    /// `T = L + (N - 1) * S`.
    pub fn total_bits(&self) -> u32 {
        total_bits(self)
    }

    pub fn code_count(&self) -> u32 {
        1 << self.total_bits()
    }

    pub fn state_mask(&self) -> u32 {
        (1 << self.state_bits) - 1
    }

    /// Right shift that brings state `j` down to the low bits of a code.
    pub fn state_shift(&self, j: usize) -> u32 {
        self.total_bits() - self.state_bits - j as u32 * self.transition_bits
    }

    /// Extracts state `j` from `code` by shift and mask.
    #[inline]
    pub fn state_at(&self, code: u32, j: usize) -> u8 {
        ((code >> self.state_shift(j)) & self.state_mask()) as u8
    }
}

impl TryFrom<[u32; 3]> for EncodingConfig {
    type Error = CcqError;

    fn try_from(v: [u32; 3]) -> Result<Self> {
        EncodingConfig::new(v[0], v[1], v[2])
    }
}

impl From<EncodingConfig> for [u32; 3] {
    fn from(c: EncodingConfig) -> Self {
        [c.state_bits, c.states, c.transition_bits]
    }
}

impl std::fmt::Display for EncodingConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(L={}, N={}, S={})",
            self.state_bits, self.states, self.transition_bits
        )
    }
}

pub fn total_bits(config: &EncodingConfig) -> u32 {
    config.state_bits + (config.states - 1) * config.transition_bits
}

/// Several configurations sharing one storage word, first part in the high bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HybridSchedule {
    parts: Vec<EncodingConfig>,
    word_bits: u32,
}

impl HybridSchedule {
    pub fn new(parts: Vec<EncodingConfig>, word_bits: u32) -> Result<Self> {
        if parts.is_empty() {
            return Err(CcqError::Config("hybrid schedule needs at least one part".into()));
        }
        if word_bits != 8 && word_bits != 16 {
            return Err(CcqError::Config(format!(
                "storage word must be 8 or 16 bits, got {word_bits}"
            )));
        }
        let sum: u32 = parts.iter().map(|p| p.total_bits()).sum();
        if sum != word_bits {
            return Err(CcqError::Config(format!(
                "hybrid parts use {sum} bits but the word has {word_bits}"
            )));
        }
        let l = parts[0].state_bits();
        if parts.iter().any(|p| p.state_bits() != l) {
            return Err(CcqError::Config(
                "all hybrid parts must share the same state width".into(),
            ));
        }
        Ok(Self { parts, word_bits })
    }

    pub fn parts(&self) -> &[EncodingConfig] {
        &self.parts
    }

    pub fn word_bits(&self) -> u32 {
        self.word_bits
    }

    /// Bit offset of the lowest bit of each part inside the word.
    pub fn part_offsets(&self) -> Vec<u32> {
        let mut remaining = self.word_bits;
        self.parts
            .iter()
            .map(|p| {
                remaining -= p.total_bits();
                remaining
            })
            .collect()
    }

    pub fn states_per_word(&self) -> usize {
        self.parts.iter().map(|p| p.states()).sum()
    }
}

/// Either a single configuration or a hybrid schedule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scheme {
    Single(EncodingConfig),
    Hybrid(HybridSchedule),
}

/// Every decodable state sequence of a configuration, row `k` being code `k`.
#[derive(Clone, Debug)]
pub struct Codebook {
    config: EncodingConfig,
    rows: Vec<u8>,
}

impl Codebook {
    pub fn config(&self) -> EncodingConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.config.states()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, code: usize) -> &[u8] {
        let n = self.config.states();
        &self.rows[code * n..(code + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.rows.chunks_exact(self.config.states())
    }
}

/// Builds the codebook by walking the state transition graph.
///
/// Paths are enumerated depth-first: every initial state, then every choice of
/// `S` fresh bits at each step. Enumeration order is lexicographic in the state
/// sequence, which is the same as increasing code index.
pub fn build_codebook(config: EncodingConfig) -> Codebook {
    let n = config.states();
    let mask = config.state_mask();
    let fresh = 1u32 << config.transition_bits();
    let mut rows = Vec::with_capacity(config.code_count() as usize * n);
    let mut path = vec![0u8; n];

    fn walk(
        depth: usize,
        path: &mut [u8],
        rows: &mut Vec<u8>,
        mask: u32,
        fresh: u32,
        shift: u32,
    ) {
        if depth == path.len() {
            rows.extend_from_slice(path);
            return;
        }
        let prev = path[depth - 1] as u32;
        for t in 0..fresh {
            path[depth] = (((prev << shift) | t) & mask) as u8;
            walk(depth + 1, path, rows, mask, fresh, shift);
        }
    }

    for s0 in 0..=mask {
        path[0] = s0 as u8;
        walk(1, &mut path, &mut rows, mask, fresh, config.transition_bits());
    }
    Codebook { config, rows }
}

/// Decodes a code into its `N` states using only shifts and masks.
pub fn decode_states(code: u32, config: &EncodingConfig) -> Result<Vec<u8>> {
    if code >= config.code_count() {
        return Err(CcqError::Domain(format!(
            "code {code:#x} does not fit {} bits",
            config.total_bits()
        )));
    }
    let mut out = vec![0u8; config.states()];
    decode_states_into(code, config, &mut out);
    Ok(out)
}

/// Unchecked variant of [`decode_states`] writing into a caller buffer.
#[inline]
pub fn decode_states_into(code: u32, config: &EncodingConfig, out: &mut [u8]) {
    debug_assert!(code < config.code_count());
    for (j, s) in out.iter_mut().enumerate().take(config.states()) {
        *s = config.state_at(code, j);
    }
}

/// Inverse of [`decode_states`].
pub fn states_to_code(states: &[u8], config: &EncodingConfig) -> Result<u32> {
    if states.len() != config.states() {
        return Err(CcqError::Domain(format!(
            "expected {} states, got {}",
            config.states(),
            states.len()
        )));
    }
    let mask = config.state_mask();
    let s = config.transition_bits();
    let overlap = config.state_bits() - s;
    let fresh_mask = (1u32 << s) - 1;
    let mut code = 0u32;
    for (j, &state) in states.iter().enumerate() {
        let state = state as u32;
        if state > mask {
            return Err(CcqError::Domain(format!(
                "state {state} does not fit {} bits",
                config.state_bits()
            )));
        }
        if j == 0 {
            code = state;
            continue;
        }
        let prev = states[j - 1] as u32;
        if prev & ((1 << overlap) - 1) != state >> s {
            return Err(CcqError::Transition(format!(
                "state {j} ({state:#b}) does not continue state {} ({prev:#b})",
                j - 1
            )));
        }
        code = (code << s) | (state & fresh_mask);
    }
    Ok(code)
}

/// Shift and mask schedule used by the dequantization kernels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub weight_shifts: Vec<u32>,
    pub weight_mask: u32,
    pub scale_mask: u32,
    /// Nibble shifts for side-band scales; empty unless `uses_cluster`.
    pub scale_shifts: Vec<u32>,
    pub uses_cluster: bool,
    /// Width of one stored word in the packed payload.
    pub word_bits: u32,
}

impl LayoutSpec {
    pub fn states_per_word(&self) -> usize {
        self.weight_shifts.len()
    }
}

/// Returns the dequantization layout for one of the three supported schemes:
/// `(4,3,2)`, the `(3,3,2)+(3,4,2)` 16-bit hybrid, and `(6,4,3)` with code cluster.
pub fn layout_for(scheme: &Scheme) -> Result<LayoutSpec> {
    match scheme {
        Scheme::Single(c) if [c.state_bits, c.states, c.transition_bits] == [4, 3, 2] => {
            Ok(LayoutSpec {
                weight_shifts: (0..c.states()).map(|j| c.state_shift(j)).collect(),
                weight_mask: c.state_mask(),
                // low bits of the tail code that no state reads
                scale_mask: (1 << (c.total_bits() - c.state_bits())) - 1,
                scale_shifts: Vec::new(),
                uses_cluster: false,
                word_bits: c.total_bits(),
            })
        }
        Scheme::Single(c) if [c.state_bits, c.states, c.transition_bits] == [6, 4, 3] => {
            Ok(LayoutSpec {
                weight_shifts: (0..c.states()).map(|j| c.state_shift(j)).collect(),
                weight_mask: c.state_mask(),
                scale_mask: 0xF,
                scale_shifts: vec![0, 4],
                uses_cluster: true,
                word_bits: 8,
            })
        }
        Scheme::Hybrid(h)
            if h.word_bits() == 16
                && h.parts().len() == 2
                && <[u32; 3]>::from(h.parts()[0]) == [3, 3, 2]
                && <[u32; 3]>::from(h.parts()[1]) == [3, 4, 2] =>
        {
            let mut shifts = Vec::with_capacity(h.states_per_word());
            for (part, offset) in h.parts().iter().zip(h.part_offsets()) {
                shifts.extend((0..part.states()).map(|j| offset + part.state_shift(j)));
            }
            let l = h.parts()[0].state_bits();
            Ok(LayoutSpec {
                weight_shifts: shifts,
                weight_mask: (1 << l) - 1,
                scale_mask: (1 << (h.word_bits() - l)) - 1,
                scale_shifts: Vec::new(),
                uses_cluster: false,
                word_bits: h.word_bits(),
            })
        }
        other => Err(CcqError::Config(format!(
            "no dequantization layout for {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l: u32, n: u32, s: u32) -> EncodingConfig {
        EncodingConfig::new(l, n, s).unwrap()
    }

    #[test]
    fn total_bits_examples() {
        assert_eq!(cfg(2, 3, 1).total_bits(), 4);
        assert_eq!(cfg(4, 3, 2).total_bits(), 8);
        assert_eq!(cfg(6, 1, 3).total_bits(), 6);
        assert_eq!(cfg(6, 4, 3).total_bits(), 15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(EncodingConfig::new(4, 3, 0).is_err());
        assert!(EncodingConfig::new(3, 3, 4).is_err());
        assert!(EncodingConfig::new(9, 1, 1).is_err());
        assert!(EncodingConfig::new(4, 0, 2).is_err());
        assert!(matches!(
            EncodingConfig::new(8, 4, 3),
            Err(CcqError::Config(_))
        ));
    }

    #[test]
    fn two_bit_three_state_codebook() {
        let book = build_codebook(cfg(2, 3, 1));
        assert_eq!(book.len(), 16);
        assert_eq!(book.row(2), &[0b00, 0b01, 0b10]);
        assert_eq!(decode_states(2, &cfg(2, 3, 1)).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn single_state_rows_are_identity() {
        let c = cfg(4, 1, 2);
        let book = build_codebook(c);
        for k in 0..16 {
            assert_eq!(book.row(k), &[k as u8]);
        }
    }

    #[test]
    fn all_ones_code_decodes_to_max_states() {
        assert_eq!(decode_states(0xFF, &cfg(4, 3, 2)).unwrap(), vec![15, 15, 15]);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        assert!(matches!(
            decode_states(256, &cfg(4, 3, 2)),
            Err(CcqError::Domain(_))
        ));
    }

    #[test]
    fn states_to_code_examples() {
        assert_eq!(states_to_code(&[0, 1, 2], &cfg(2, 3, 1)).unwrap(), 2);
        assert_eq!(states_to_code(&[9], &cfg(4, 1, 2)).unwrap(), 9);
        assert!(matches!(
            states_to_code(&[0, 3, 0], &cfg(2, 3, 1)),
            Err(CcqError::Transition(_))
        ));
        assert!(states_to_code(&[0, 1], &cfg(2, 3, 1)).is_err());
        assert!(states_to_code(&[4, 0, 0], &cfg(2, 3, 1)).is_err());
    }

    #[test]
    fn transition_rule_holds_in_every_row() {
        for c in [cfg(2, 3, 1), cfg(4, 3, 2), cfg(3, 4, 2), cfg(6, 4, 3)] {
            let overlap = c.state_bits() - c.transition_bits();
            let low = (1u8 << overlap) - 1;
            for row in build_codebook(c).rows() {
                for w in row.windows(2) {
                    assert_eq!(w[0] & low, w[1] >> c.transition_bits());
                }
            }
        }
    }

    #[test]
    fn layout_rows() {
        let l = layout_for(&Scheme::Single(cfg(4, 3, 2))).unwrap();
        assert_eq!(l.weight_shifts, vec![4, 2, 0]);
        assert_eq!((l.weight_mask, l.scale_mask), (0xF, 0xF));
        assert!(!l.uses_cluster);

        let h = HybridSchedule::new(vec![cfg(3, 3, 2), cfg(3, 4, 2)], 16).unwrap();
        assert_eq!(h.part_offsets(), vec![9, 0]);
        let l = layout_for(&Scheme::Hybrid(h)).unwrap();
        assert_eq!(l.weight_shifts, vec![13, 11, 9, 6, 4, 2, 0]);
        assert_eq!((l.weight_mask, l.scale_mask), (0x7, 0x1FFF));

        let l = layout_for(&Scheme::Single(cfg(6, 4, 3))).unwrap();
        assert_eq!(l.weight_shifts, vec![9, 6, 3, 0]);
        assert_eq!((l.weight_mask, l.scale_mask), (0x3F, 0xF));
        assert!(l.uses_cluster);

        assert!(matches!(
            layout_for(&Scheme::Single(cfg(2, 3, 1))),
            Err(CcqError::Config(_))
        ));
    }

    #[test]
    fn hybrid_schedule_validation() {
        assert!(HybridSchedule::new(vec![cfg(3, 3, 2), cfg(3, 3, 2)], 16).is_err());
        assert!(HybridSchedule::new(vec![cfg(3, 3, 2), cfg(4, 3, 2)], 16).is_err());
        assert!(HybridSchedule::new(vec![cfg(4, 3, 2)], 8).is_ok());
    }

    #[test]
    fn layout_fields_cover_code_word() {
        // Union of extracted fields covers the word; overlaps equal (N-1)(L-S).
        let cases = [
            (layout_for(&Scheme::Single(cfg(4, 3, 2))).unwrap(), 8u32, 4u32),
            (
                layout_for(&Scheme::Hybrid(
                    HybridSchedule::new(vec![cfg(3, 3, 2), cfg(3, 4, 2)], 16).unwrap(),
                ))
                .unwrap(),
                16,
                2 + 3,
            ),
            (layout_for(&Scheme::Single(cfg(6, 4, 3))).unwrap(), 15, 9),
        ];
        for (layout, width, overlap) in cases {
            let bits = layout.weight_mask.count_ones();
            let mut cover = 0u32;
            let mut total = 0u32;
            for &s in &layout.weight_shifts {
                cover |= layout.weight_mask << s;
                total += bits;
            }
            assert_eq!(cover, (1u32 << width) - 1);
            assert_eq!(total - width, overlap);
        }
    }
}
