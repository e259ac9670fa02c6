//! Bit-exact packed layouts and the `.ccq` container.
//!
//! Group payloads at `g = 64`:
//!
//! | family | payload | scale |
//! |--------|---------|-------|
//! | 2.75   | 22 code bytes; byte 21 = last state (high nibble) + 4-bit scale (low nibble) | embedded |
//! | 2.5    | 10 LE `u16` words; word 9 = last state (top 3 bits) + 13-bit scale | embedded |
//! | 2.06   | 16 clustered code bytes | side-band nibbles |
//!
//! Side-band scales form an LSB-first bit stream: with 4-bit scales, group
//! `2k` sits in the low nibble and group `2k + 1` in the high nibble of byte `k`.
//!
//! The container is `b"CCQ\0"`, a `u32` version, a `u32` header length, a JSON
//! header, zero padding to an 8-byte boundary, then 8-byte-aligned sections.
//! Section offsets in the header are relative to the start of the data area.
//! `FORMAT.md` at the repository root has the full description.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coding::{EncodingConfig, LayoutSpec};
use crate::error::{CcqError, Result};
use crate::family::{Family, GroupGeometry};
use crate::quantizer::{ClusterParams, QuantizedTensor};

pub const MAGIC: [u8; 4] = *b"CCQ\0";
pub const VERSION: u32 = 1;
const ALIGN: usize = 8;
/// Magic, version, header length.
const PREAMBLE: usize = 12;

pub const SECTION_CODES: &str = "codes";
pub const SECTION_SCALES: &str = "scales";
pub const SECTION_SUPER: &str = "super_scales";
pub const SECTION_CLUSTER: &str = "cluster";

/// Quantizes non-negative group scales against one super scale.
///
/// `super = max / (2^bits - 1)` (1.0 when every scale is zero) and
/// `q = round(scale / super)` clamped to the code range.
pub fn quantize_scales(channel_scales: &[f32], scale_bits: u32) -> Result<(f32, Vec<u16>)> {
    if scale_bits != 4 && scale_bits != 13 {
        return Err(CcqError::Config(format!(
            "scale width must be 4 or 13 bits, got {scale_bits}"
        )));
    }
    if let Some(s) = channel_scales.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(CcqError::Domain(format!("scale {s} is negative or not finite")));
    }
    let q_max = ((1u32 << scale_bits) - 1) as f32;
    let max = channel_scales.iter().fold(0.0f32, |m, &s| m.max(s));
    let super_scale = if max == 0.0 { 1.0 } else { max / q_max };
    let q = channel_scales
        .iter()
        .map(|&s| (s / super_scale).round().clamp(0.0, q_max) as u16)
        .collect();
    Ok((super_scale, q))
}

/// One group's packed bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedGroup {
    pub family: Family,
    pub payload: Vec<u8>,
}

/// Packs one group's stored words, embedding `q_scale` when the geometry has
/// room for it. For the clustered family the words are the 8-bit clustered codes.
pub fn pack_group(words: &[u16], q_scale: Option<u16>, geom: &GroupGeometry) -> Result<PackedGroup> {
    let family = geom.family;
    if words.len() != geom.words {
        return Err(CcqError::Encoding(format!(
            "family {family} at g={} packs {} words, got {}",
            geom.group_size,
            geom.words,
            words.len()
        )));
    }
    let word_limit = 1u32 << family.storage_bits();
    if let Some(w) = words.iter().find(|&&w| w as u32 >= word_limit) {
        return Err(CcqError::Encoding(format!(
            "word {w:#x} does not fit {} bits",
            family.storage_bits()
        )));
    }
    let mut words = words.to_vec();
    match (geom.embedded_scale, q_scale) {
        (true, Some(q)) => {
            let mask = family.layout().scale_mask as u16;
            if q & !mask != 0 {
                return Err(CcqError::Encoding(format!(
                    "quantized scale {q:#x} overflows mask {mask:#x}"
                )));
            }
            let tail = words.last_mut().expect("groups have at least one word");
            if *tail & mask != 0 {
                return Err(CcqError::Encoding(format!(
                    "tail code {tail:#x} overlaps the embedded scale bits"
                )));
            }
            *tail |= q;
        }
        (true, None) => {
            return Err(CcqError::Encoding(
                "this layout embeds the group scale; q_scale is required".into(),
            ))
        }
        (false, Some(_)) => {
            return Err(CcqError::Encoding(
                "this layout stores scales side-band; q_scale must be None".into(),
            ))
        }
        (false, None) => {}
    }
    let payload = match family.storage_bits() {
        8 => words.iter().map(|&w| w as u8).collect(),
        _ => words.iter().flat_map(|w| w.to_le_bytes()).collect(),
    };
    Ok(PackedGroup { family, payload })
}

/// Reads the stored words of a packed group, splitting off the embedded scale
/// with the layout's masks and shifts.
pub fn read_words(payload: &[u8], storage_bits: u32) -> Vec<u16> {
    match storage_bits {
        8 => payload.iter().map(|&b| b as u16).collect(),
        _ => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect(),
    }
}

/// Inverse of [`pack_group`].
pub fn unpack_group(packed: &PackedGroup, geom: &GroupGeometry) -> Result<(Vec<u16>, Option<u16>)> {
    if packed.family != geom.family {
        return Err(CcqError::Encoding(format!(
            "packed group is family {}, geometry is {}",
            packed.family, geom.family
        )));
    }
    if packed.payload.len() != geom.payload_bytes() {
        return Err(CcqError::Encoding(format!(
            "expected {} payload bytes, got {}",
            geom.payload_bytes(),
            packed.payload.len()
        )));
    }
    let mut words = read_words(&packed.payload, geom.family.storage_bits());
    if !geom.embedded_scale {
        return Ok((words, None));
    }
    let layout = geom.family.layout();
    let tail = words.last_mut().expect("groups have at least one word");
    let shift = layout.weight_shifts[0];
    let q = *tail as u32 & layout.scale_mask;
    *tail = ((((*tail as u32) >> shift) & layout.weight_mask) << shift) as u16;
    Ok((words, Some(q as u16)))
}

/// LSB-first bit stream of `bits`-wide values.
pub fn pack_scale_stream(q_scales: &[u16], bits: u32) -> Result<Vec<u8>> {
    let mut out = vec![0u8; (q_scales.len() * bits as usize).div_ceil(8)];
    for (i, &q) in q_scales.iter().enumerate() {
        if (q as u32) >> bits != 0 {
            return Err(CcqError::Encoding(format!(
                "scale {q:#x} does not fit {bits} bits"
            )));
        }
        for b in 0..bits as usize {
            if (q >> b) & 1 == 1 {
                let pos = i * bits as usize + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    Ok(out)
}

pub fn unpack_scale_stream(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u16>> {
    let needed = (count * bits as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(CcqError::Encoding(format!(
            "{count} scales of {bits} bits need {needed} bytes, got {}",
            bytes.len()
        )));
    }
    Ok((0..count)
        .map(|i| {
            (0..bits as usize).fold(0u16, |acc, b| {
                let pos = i * bits as usize + b;
                acc | ((((bytes[pos / 8] >> (pos % 8)) & 1) as u16) << b)
            })
        })
        .collect())
}

/// Two 4-bit scales per byte: even group in the low nibble, odd in the high.
pub fn pack_cluster_scales(q_scales: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(q_scales.len().div_ceil(2));
    for pair in q_scales.chunks(2) {
        if let Some(q) = pair.iter().find(|&&q| q > 0xF) {
            return Err(CcqError::Encoding(format!("scale {q:#x} does not fit 4 bits")));
        }
        let hi = pair.get(1).copied().unwrap_or(0);
        out.push(pair[0] | (hi << 4));
    }
    Ok(out)
}

pub fn unpack_cluster_scales(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() < count.div_ceil(2) {
        return Err(CcqError::Encoding(format!(
            "{count} nibbles need {} bytes, got {}",
            count.div_ceil(2),
            bytes.len()
        )));
    }
    Ok((0..count).map(|i| (bytes[i / 2] >> ((i % 2) * 4)) & 0xF).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    /// Byte offset from the start of the data area.
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

/// JSON header of a `.ccq` container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub rows: usize,
    pub cols: usize,
    pub family: Family,
    pub group_size: usize,
    pub configs: Vec<EncodingConfig>,
    pub state_bits: u32,
    pub zero_point: u32,
    pub scale_bits: u32,
    pub scale_embedded: bool,
    pub layout: LayoutSpec,
    /// Refinement rounds used to produce the codes, when known.
    #[serde(default)]
    pub refinement_rounds: Option<usize>,
    #[serde(default)]
    pub sections: Vec<SectionEntry>,
}

impl ContainerHeader {
    fn for_tensor(rows: usize, cols: usize, geom: &GroupGeometry) -> Self {
        let family = geom.family;
        Self {
            rows,
            cols,
            family,
            group_size: geom.group_size,
            configs: family.configs(),
            state_bits: family.state_bits(),
            zero_point: family.zero_point(),
            scale_bits: family.scale_bits(),
            scale_embedded: geom.embedded_scale,
            layout: family.layout(),
            refinement_rounds: None,
            sections: Vec::new(),
        }
    }

    pub fn geometry(&self) -> Result<GroupGeometry> {
        GroupGeometry::new(self.family, self.group_size)
    }

    pub fn group_count(&self) -> usize {
        if self.group_size == 0 {
            0
        } else {
            self.rows * (self.cols / self.group_size)
        }
    }

    pub fn weight_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Serialized form of a [`QuantizedTensor`]: header plus raw section contents.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    pub header: ContainerHeader,
    /// Concatenated group payloads, `payload_bytes()` per group.
    pub codes: Vec<u8>,
    /// Side-band scale stream; empty when scales are embedded.
    pub scales: Vec<u8>,
    pub super_scales: Vec<f32>,
    /// Per-row cluster parameters; empty unless the family clusters.
    pub cluster: Vec<ClusterParams>,
}

impl PackedTensor {
    pub fn geometry(&self) -> GroupGeometry {
        self.header.geometry().expect("validated header")
    }

    pub fn rows(&self) -> usize {
        self.header.rows
    }

    pub fn cols(&self) -> usize {
        self.header.cols
    }

    pub fn groups_per_row(&self) -> usize {
        self.header.cols / self.header.group_size
    }

    pub fn group_payload(&self, group: usize) -> &[u8] {
        let n = self.geometry().payload_bytes();
        &self.codes[group * n..(group + 1) * n]
    }

    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.header.refinement_rounds = Some(rounds);
        self
    }

    fn section_bytes(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = vec![(SECTION_CODES, self.codes.clone())];
        if !self.header.scale_embedded {
            out.push((SECTION_SCALES, self.scales.clone()));
        }
        out.push((
            SECTION_SUPER,
            self.super_scales.iter().flat_map(|s| s.to_le_bytes()).collect(),
        ));
        if self.header.family.uses_cluster() {
            out.push((
                SECTION_CLUSTER,
                self.cluster
                    .iter()
                    .flat_map(|p| {
                        let mut b = p.code_scale.to_le_bytes().to_vec();
                        b.extend_from_slice(&p.code_zero_point.to_le_bytes());
                        b
                    })
                    .collect(),
            ));
        }
        out
    }

    /// Sections whose stored checksum does not match their contents.
    pub fn checksum_mismatches(&self) -> Vec<String> {
        self.section_bytes()
            .into_iter()
            .filter(|(name, bytes)| {
                self.header
                    .sections
                    .iter()
                    .find(|s| s.name == *name)
                    .is_none_or(|s| s.sha256 != sha256_hex(bytes))
            })
            .map(|(name, _)| name.to_string())
            .collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn pack_tensor(t: &QuantizedTensor) -> Result<PackedTensor> {
    t.validate()?;
    let geom = t.geometry();
    let groups = t.group_count();
    let mut codes = Vec::with_capacity(groups * geom.payload_bytes());
    let stored: &[u16] = &t.codes;
    let clustered: Option<Vec<u16>> = t
        .clustered_codes
        .as_ref()
        .map(|q| q.iter().map(|&v| v as u16).collect());
    let words = clustered.as_deref().unwrap_or(stored);
    for g in 0..groups {
        let w = &words[g * geom.words..(g + 1) * geom.words];
        let q = geom.embedded_scale.then(|| t.q_scales[g]);
        codes.extend(pack_group(w, q, &geom)?.payload);
    }
    let scales = if geom.embedded_scale {
        Vec::new()
    } else {
        pack_scale_stream(&t.q_scales, t.family.scale_bits())?
    };
    Ok(PackedTensor {
        header: ContainerHeader::for_tensor(t.rows, t.cols, &geom),
        codes,
        scales,
        super_scales: t.super_scales.clone(),
        cluster: t.cluster.clone().unwrap_or_default(),
    })
}

pub fn unpack_tensor(p: &PackedTensor) -> Result<QuantizedTensor> {
    let geom = p.header.geometry()?;
    let family = p.header.family;
    let groups = p.header.group_count();
    if p.codes.len() != groups * geom.payload_bytes() {
        return Err(CcqError::Shape(format!(
            "code section has {} bytes, {groups} groups need {}",
            p.codes.len(),
            groups * geom.payload_bytes()
        )));
    }
    let mut words = Vec::with_capacity(groups * geom.words);
    let mut q_scales = Vec::with_capacity(groups);
    for g in 0..groups {
        let packed = PackedGroup {
            family,
            payload: p.group_payload(g).to_vec(),
        };
        let (w, q) = unpack_group(&packed, &geom)?;
        words.extend(w);
        if let Some(q) = q {
            q_scales.push(q);
        }
    }
    if !geom.embedded_scale {
        q_scales = unpack_scale_stream(&p.scales, family.scale_bits(), groups)?;
    }
    let (codes, cluster, clustered_codes) = if family.uses_cluster() {
        if p.cluster.len() != p.header.rows {
            return Err(CcqError::Shape(format!(
                "{} cluster entries for {} rows",
                p.cluster.len(),
                p.header.rows
            )));
        }
        let per_row = (p.header.cols / p.header.group_size) * geom.words;
        let mut codes = Vec::with_capacity(words.len());
        for (i, &q) in words.iter().enumerate() {
            let params = &p.cluster[i / per_row];
            params.validate(family.code_bits())?;
            codes.push(params.expand(q as u8).expect("validated") as u16);
        }
        let q: Vec<u8> = words.iter().map(|&w| w as u8).collect();
        (codes, Some(p.cluster.clone()), Some(q))
    } else {
        (words, None, None)
    };
    let t = QuantizedTensor {
        rows: p.header.rows,
        cols: p.header.cols,
        family,
        group_size: p.header.group_size,
        codes,
        q_scales,
        super_scales: p.super_scales.clone(),
        cluster,
        clustered_codes,
    };
    t.validate()?;
    Ok(t)
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a packed tensor into container bytes.
pub fn encode_container(p: &PackedTensor) -> Result<Vec<u8>> {
    let sections = p.section_bytes();
    let mut header = p.header.clone();
    header.sections.clear();
    let mut offset = 0usize;
    for (name, bytes) in &sections {
        header.sections.push(SectionEntry {
            name: name.to_string(),
            offset: offset as u64,
            length: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        offset = align_up(offset + bytes.len());
    }
    let json = serde_json::to_vec(&header)?;
    let data_start = align_up(PREAMBLE + json.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for ((_, bytes), entry) in sections.iter().zip(&header.sections) {
        out.resize(data_start + entry.offset as usize, 0);
        out.extend_from_slice(bytes);
    }
    out.resize(data_start + offset, 0);
    Ok(out)
}

/// Whether [`decode_container`] checks section digests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checksums {
    Verify,
    Skip,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| CcqError::format(bytes.len() as u64, "truncated preamble"))
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Parses container bytes, checking structure against the header.
pub fn decode_container(bytes: &[u8], checksums: Checksums) -> Result<PackedTensor> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(CcqError::format(0, "bad magic, not a .ccq container"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(CcqError::format(4, format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let json = bytes
        .get(PREAMBLE..PREAMBLE + header_len)
        .ok_or_else(|| CcqError::format(bytes.len() as u64, "truncated header"))?;
    let header: ContainerHeader = serde_json::from_slice(json)
        .map_err(|e| CcqError::format(PREAMBLE as u64, format!("bad header: {e}")))?;
    check_header(&header)?;
    let geom = header.geometry()?;
    let data_start = align_up(PREAMBLE + header_len);

    let groups = header.group_count();
    let mut expected = vec![(SECTION_CODES, groups * geom.payload_bytes())];
    if !geom.embedded_scale {
        expected.push((
            SECTION_SCALES,
            (groups * header.scale_bits as usize).div_ceil(8),
        ));
    }
    expected.push((SECTION_SUPER, header.rows * 4));
    if header.family.uses_cluster() {
        expected.push((SECTION_CLUSTER, header.rows * 8));
    }
    if header.sections.len() != expected.len() {
        return Err(CcqError::format(
            PREAMBLE as u64,
            format!(
                "expected {} sections, header lists {}",
                expected.len(),
                header.sections.len()
            ),
        ));
    }
    let mut contents: Vec<&[u8]> = Vec::new();
    let mut cursor = 0usize;
    for ((name, len), entry) in expected.iter().zip(&header.sections) {
        if entry.name != *name || entry.length as usize != *len || entry.offset as usize != cursor {
            return Err(CcqError::format(
                PREAMBLE as u64,
                format!(
                    "section {:?} at {} with {} bytes; expected {name:?} at {cursor} with {len}",
                    entry.name, entry.offset, entry.length
                ),
            ));
        }
        let start = data_start + cursor;
        let body = bytes.get(start..start + len).ok_or_else(|| {
            CcqError::format(
                bytes.len() as u64,
                format!("truncated: section {name} needs bytes {start}..{}", start + len),
            )
        })?;
        if checksums == Checksums::Verify && sha256_hex(body) != entry.sha256 {
            return Err(CcqError::format(
                start as u64,
                format!("section {name} fails its checksum"),
            ));
        }
        contents.push(body);
        cursor = align_up(cursor + len);
    }
    let end = data_start + cursor;
    if bytes.len() < end {
        return Err(CcqError::format(bytes.len() as u64, "truncated: missing section padding"));
    }
    if bytes.len() > end {
        return Err(CcqError::format(end as u64, "trailing bytes after last section"));
    }

    let mut iter = contents.into_iter();
    let codes = iter.next().expect("codes section").to_vec();
    let scales = if geom.embedded_scale {
        Vec::new()
    } else {
        iter.next().expect("scales section").to_vec()
    };
    let super_scales = f32s(iter.next().expect("super section"));
    let cluster = if header.family.uses_cluster() {
        f32s(iter.next().expect("cluster section"))
            .chunks_exact(2)
            .map(|c| ClusterParams {
                code_scale: c[0],
                code_zero_point: c[1],
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(PackedTensor {
        header,
        codes,
        scales,
        super_scales,
        cluster,
    })
}

fn check_header(h: &ContainerHeader) -> Result<()> {
    let at = PREAMBLE as u64;
    let geom = h
        .geometry()
        .map_err(|e| CcqError::format(at, format!("header: {e}")))?;
    if !h.cols.is_multiple_of(h.group_size) {
        return Err(CcqError::format(
            at,
            format!("{} columns are not a multiple of group size {}", h.cols, h.group_size),
        ));
    }
    let f = h.family;
    let consistent = h.configs == f.configs()
        && h.state_bits == f.state_bits()
        && h.zero_point == f.zero_point()
        && h.scale_bits == f.scale_bits()
        && h.scale_embedded == geom.embedded_scale
        && h.layout == f.layout();
    if !consistent {
        return Err(CcqError::format(
            at,
            format!("header fields disagree with family {f}"),
        ));
    }
    Ok(())
}

pub fn write_packed(p: &PackedTensor, path: &Path) -> Result<()> {
    fs::write(path, encode_container(p)?)?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<PackedTensor> {
    decode_container(&fs::read(path)?, Checksums::Verify)
}

pub fn write_container(t: &QuantizedTensor, path: &Path) -> Result<()> {
    write_packed(&pack_tensor(t)?, path)
}

pub fn read_container(path: &Path) -> Result<QuantizedTensor> {
    unpack_tensor(&read_packed(path)?)
}

/// Stored bits per weight, as an exact ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitsPerWeight {
    /// Code payload plus quantized scale bits.
    pub payload_bits: u64,
    /// Per-channel reals (super scale, cluster parameters), reported apart.
    pub overhead_bits: u64,
    pub weights: u64,
}

impl BitsPerWeight {
    pub fn value(&self) -> f64 {
        if self.weights == 0 {
            0.0
        } else {
            self.payload_bits as f64 / self.weights as f64
        }
    }

    pub fn overhead(&self) -> f64 {
        if self.weights == 0 {
            0.0
        } else {
            self.overhead_bits as f64 / self.weights as f64
        }
    }
}

/// Measures bits per weight from the section sizes of a container.
///
/// Side-band scales are counted at their exact width, not their padded bytes.
pub fn measured_bpw(p: &PackedTensor) -> BitsPerWeight {
    let groups = p.header.group_count() as u64;
    let side = if p.header.scale_embedded {
        0
    } else {
        groups * p.header.scale_bits as u64
    };
    BitsPerWeight {
        payload_bits: p.codes.len() as u64 * 8 + side,
        overhead_bits: (p.super_scales.len() * 32 + p.cluster.len() * 64) as u64,
        weights: p.header.weight_count() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{quantize_tensor, QuantizerOptions};
    use crate::tensor::Matrix;

    #[test]
    fn quantize_scales_examples() {
        assert_eq!(quantize_scales(&[0.0, 0.0], 4).unwrap(), (1.0, vec![0, 0]));
        assert_eq!(quantize_scales(&[15.0, 7.5], 4).unwrap(), (1.0, vec![15, 8]));
        assert!(matches!(quantize_scales(&[-1.0], 4), Err(CcqError::Domain(_))));
        assert!(quantize_scales(&[1.0], 5).is_err());
    }

    #[test]
    fn bpw275_tail_byte() {
        let geom = Family::Bpw275.geometry(64).unwrap();
        let p = pack_group(&[0; 22], Some(0xA), &geom).unwrap();
        assert_eq!(p.payload.len(), 22);
        assert_eq!(p.payload[21], 0x0A);
        let mut words = vec![0u16; 22];
        words[21] = 0x50;
        let p = pack_group(&words, Some(0x3), &geom).unwrap();
        assert_eq!(p.payload[21], 0x53);
        assert_eq!(unpack_group(&p, &geom).unwrap(), (words, Some(3)));
    }

    #[test]
    fn bpw25_tail_word() {
        let geom = Family::Bpw25.geometry(64).unwrap();
        let mut words = vec![0u16; 10];
        words[9] = 0b101 << 13;
        let p = pack_group(&words, Some(0x1FFF), &geom).unwrap();
        assert_eq!(p.payload.len(), 20);
        assert_eq!(u16::from_le_bytes([p.payload[18], p.payload[19]]), 0xBFFF);
        assert_eq!(unpack_group(&p, &geom).unwrap(), (words, Some(0x1FFF)));
    }

    #[test]
    fn pack_group_errors() {
        let geom = Family::Bpw275.geometry(64).unwrap();
        assert!(pack_group(&[0; 21], Some(0), &geom).is_err());
        assert!(pack_group(&[0; 22], Some(0x10), &geom).is_err());
        assert!(pack_group(&[0; 22], None, &geom).is_err());
        let mut words = vec![0u16; 22];
        words[21] = 0x51;
        assert!(pack_group(&words, Some(0), &geom).is_err());
        words[21] = 0x100;
        assert!(pack_group(&words, Some(0), &geom).is_err());
        let geom = Family::Bpw206.geometry(64).unwrap();
        assert!(pack_group(&[0; 16], Some(1), &geom).is_err());
        assert_eq!(pack_group(&[7; 16], None, &geom).unwrap().payload, vec![7; 16]);
    }

    #[test]
    fn cluster_scale_nibbles() {
        assert_eq!(pack_cluster_scales(&[0x3, 0xC]).unwrap(), vec![0xC3]);
        assert!(pack_cluster_scales(&[]).unwrap().is_empty());
        assert_eq!(pack_cluster_scales(&[0x3, 0xC, 0x5]).unwrap(), vec![0xC3, 0x05]);
        assert!(pack_cluster_scales(&[0x10]).is_err());
        assert_eq!(unpack_cluster_scales(&[0xC3, 0x05], 3).unwrap(), vec![3, 0xC, 5]);
        // the generic stream agrees with the nibble rule at 4 bits
        assert_eq!(pack_scale_stream(&[0x3, 0xC, 0x5], 4).unwrap(), vec![0xC3, 0x05]);
    }

    #[test]
    fn scale_stream_13_bits() {
        let q = [0x1FFF, 0, 0x1234, 1];
        let bytes = pack_scale_stream(&q, 13).unwrap();
        assert_eq!(bytes.len(), 7);
        assert_eq!(unpack_scale_stream(&bytes, 13, 4).unwrap(), q);
        assert!(pack_scale_stream(&[0x2000], 13).is_err());
    }

    #[test]
    fn container_bytes_round_trip() {
        let m = Matrix::gaussian(4, 128, 2);
        for f in Family::ALL {
            let t = quantize_tensor(&m, &QuantizerOptions::new(f)).unwrap();
            let p = pack_tensor(&t).unwrap();
            let bytes = encode_container(&p).unwrap();
            assert_eq!(bytes.len() % 8, 0);
            let back = decode_container(&bytes, Checksums::Verify).unwrap();
            assert!(back.checksum_mismatches().is_empty());
            assert_eq!(unpack_tensor(&back).unwrap(), t);
            assert_eq!(encode_container(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupted_containers_fail() {
        let t = quantize_tensor(&Matrix::gaussian(2, 64, 2), &QuantizerOptions::new(Family::Bpw206)).unwrap();
        let bytes = encode_container(&pack_tensor(&t).unwrap()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_container(&bad, Checksums::Verify),
            Err(CcqError::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_container(&bad, Checksums::Verify),
            Err(CcqError::Format { offset: 4, .. })
        ));
        assert!(decode_container(&bytes[..bytes.len() - 8], Checksums::Verify).is_err());
        assert!(decode_container(&bytes[..20], Checksums::Verify).is_err());

        let mut bad = bytes.clone();
        let last = bad.len() - 40;
        bad[last] ^= 1;
        assert!(decode_container(&bad, Checksums::Verify).is_err());
        let lenient = decode_container(&bad, Checksums::Skip).unwrap();
        assert!(!lenient.checksum_mismatches().is_empty());
    }

    #[test]
    fn bpw_matches_table() {
        let m = Matrix::gaussian(2, 128, 4);
        let expect = [(Family::Bpw275, 2.75), (Family::Bpw25, 2.5), (Family::Bpw206, 2.0625)];
        for (f, bpw) in expect {
            let t = quantize_tensor(&m, &QuantizerOptions::new(f)).unwrap();
            assert_eq!(measured_bpw(&pack_tensor(&t).unwrap()).value(), bpw);
        }
    }
}
