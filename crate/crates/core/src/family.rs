//! The three code families and how a group of weights maps onto storage words.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coding::{layout_for, EncodingConfig, HybridSchedule, LayoutSpec, Scheme};
use crate::error::{CcqError, Result};

pub const DEFAULT_GROUP_SIZE: usize = 64;

/// A code family, named by its bits-per-weight at group size 64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// `(4,3,2)` codes in bytes, group scale in the tail byte.
    #[serde(rename = "2.75")]
    Bpw275,
    /// `(3,3,2)+(3,4,2)` hybrid in 16-bit words, group scale in the tail word.
    #[serde(rename = "2.5")]
    Bpw25,
    /// `(6,4,3)` codes clustered to 8 bits per output channel, side-band scales.
    #[serde(rename = "2.06")]
    Bpw206,
}

/// One convolutional code inside a storage word.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub config: EncodingConfig,
    /// Bit offset of the segment's lowest bit within the (unclustered) code word.
    pub offset: u32,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Bpw275, Family::Bpw25, Family::Bpw206];

    pub fn label(&self) -> &'static str {
        match self {
            Family::Bpw275 => "2.75",
            Family::Bpw25 => "2.5",
            Family::Bpw206 => "2.06",
        }
    }

    pub fn scheme(&self) -> Scheme {
        let c = |l, n, s| EncodingConfig::new(l, n, s).expect("built-in config is valid");
        match self {
            Family::Bpw275 => Scheme::Single(c(4, 3, 2)),
            Family::Bpw25 => Scheme::Hybrid(
                HybridSchedule::new(vec![c(3, 3, 2), c(3, 4, 2)], 16)
                    .expect("built-in schedule is valid"),
            ),
            Family::Bpw206 => Scheme::Single(c(6, 4, 3)),
        }
    }

    pub fn configs(&self) -> Vec<EncodingConfig> {
        match self.scheme() {
            Scheme::Single(c) => vec![c],
            Scheme::Hybrid(h) => h.parts().to_vec(),
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        match self.scheme() {
            Scheme::Single(config) => vec![Segment { config, offset: 0 }],
            Scheme::Hybrid(h) => h
                .parts()
                .iter()
                .zip(h.part_offsets())
                .map(|(&config, offset)| Segment { config, offset })
                .collect(),
        }
    }

    pub fn layout(&self) -> LayoutSpec {
        layout_for(&self.scheme()).expect("built-in family has a layout")
    }

    /// `L`, shared by every segment of the family.
    pub fn state_bits(&self) -> u32 {
        match self {
            Family::Bpw275 => 4,
            Family::Bpw25 => 3,
            Family::Bpw206 => 6,
        }
    }

    /// Weight zero point, `2^(L-1)`.
    pub fn zero_point(&self) -> u32 {
        1 << (self.state_bits() - 1)
    }

    /// Width of a quantized group scale.
    pub fn scale_bits(&self) -> u32 {
        match self {
            Family::Bpw275 | Family::Bpw206 => 4,
            Family::Bpw25 => 13,
        }
    }

    pub fn weights_per_word(&self) -> usize {
        match self {
            Family::Bpw275 => 3,
            Family::Bpw25 => 7,
            Family::Bpw206 => 4,
        }
    }

    /// Width of one word in the packed payload.
    pub fn storage_bits(&self) -> u32 {
        match self {
            Family::Bpw275 | Family::Bpw206 => 8,
            Family::Bpw25 => 16,
        }
    }

    /// Width of an unclustered code word.
    pub fn code_bits(&self) -> u32 {
        match self {
            Family::Bpw275 => 8,
            Family::Bpw25 => 16,
            Family::Bpw206 => 15,
        }
    }

    pub fn uses_cluster(&self) -> bool {
        matches!(self, Family::Bpw206)
    }

    pub fn geometry(&self, group_size: usize) -> Result<GroupGeometry> {
        GroupGeometry::new(*self, group_size)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Family {
    type Err = CcqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "2.75" => Ok(Family::Bpw275),
            "2.5" | "2.50" => Ok(Family::Bpw25),
            "2.06" | "2.0625" => Ok(Family::Bpw206),
            other => Err(CcqError::Config(format!(
                "unknown family {other:?}; expected 2.75, 2.5 or 2.06"
            ))),
        }
    }
}

/// A run of up to `N` consecutive group positions covered by one segment code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub word: usize,
    pub segment: Segment,
    /// First group position covered.
    pub start: usize,
    /// Number of real (non-padding) positions, `0..=N`.
    pub valid: usize,
}

/// How a group of `group_size` weights is laid out for one family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupGeometry {
    pub family: Family,
    pub group_size: usize,
    /// Storage words per group, the last one possibly partial.
    pub words: usize,
    /// Weights in the partial last word; 0 when every word is full.
    pub tail_weights: usize,
    /// The quantized scale lives in the redundant low bits of the last word.
    pub embedded_scale: bool,
}

impl GroupGeometry {
    pub fn new(family: Family, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(CcqError::Config("group size must be positive".into()));
        }
        let per_word = family.weights_per_word();
        let tail = group_size % per_word;
        if tail > 1 {
            return Err(CcqError::Config(format!(
                "group size {group_size} leaves {tail} weights in the last word of family {family}; \
                 only g = 0 or 1 (mod {per_word}) is supported"
            )));
        }
        Ok(Self {
            family,
            group_size,
            words: group_size.div_ceil(per_word),
            tail_weights: tail,
            embedded_scale: tail == 1 && !family.uses_cluster(),
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.words * self.family.storage_bits() as usize / 8
    }

    /// Scale bits stored outside the code payload.
    pub fn side_scale_bits(&self) -> u32 {
        if self.embedded_scale {
            0
        } else {
            self.family.scale_bits()
        }
    }

    /// Code payload plus quantized scale, in bits.
    pub fn bits_per_group(&self) -> u64 {
        self.payload_bytes() as u64 * 8 + self.side_scale_bits() as u64
    }

    pub fn slots(&self) -> Vec<Slot> {
        let segments = self.family.segments();
        let mut slots = Vec::with_capacity(self.words * segments.len());
        let mut pos = 0usize;
        for word in 0..self.words {
            for &segment in &segments {
                let n = segment.config.states();
                let valid = self.group_size.saturating_sub(pos).min(n);
                slots.push(Slot {
                    word,
                    segment,
                    start: pos,
                    valid,
                });
                pos += n;
            }
        }
        slots
    }
}
