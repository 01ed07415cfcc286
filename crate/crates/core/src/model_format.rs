//! The ABCQ container and memory-footprint accounting.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "ABCQ" | u32 version | u32 header_len | header (JSON, header_len bytes)
//! planes:      plane 1..p_high, each rows × words_per_row u32
//! scale sets:  p = p_low..p_high, each p × rows × groups f32 (plane, row, group)
//! offsets:     asymmetric only, p = p_low..p_high, each rows × groups f32
//! u32 CRC-32 (IEEE) of every preceding byte
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bcq::{words_per_row, BitPlaneSet, Mode, QuantConfig, ScaleTensor};
use crate::error::{Error, Result};
use crate::progressive::MultiPrecisionModel;

pub const ABCQ_MAGIC: [u8; 4] = *b"ABCQ";
pub const ABCQ_VERSION: u32 = 1;
/// Scales are stored as 32-bit floats, matching the in-memory representation.
pub const STORED_SCALE_WIDTH: usize = 4;
/// Magic, version, header length and trailing CRC.
pub const FIXED_OVERHEAD: usize = 4 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    rows: u64,
    cols: u64,
    group_size: u64,
    mode: Mode,
    cycles: u64,
    p_low: u64,
    p_high: u64,
    scale_width: u64,
    created_by: String,
}

fn header_for(model: &MultiPrecisionModel) -> Header {
    let cfg = model.config();
    Header {
        rows: model.rows() as u64,
        cols: model.cols() as u64,
        group_size: cfg.group_size as u64,
        mode: cfg.mode,
        cycles: cfg.cycles as u64,
        p_low: model.p_low() as u64,
        p_high: model.p_high() as u64,
        scale_width: STORED_SCALE_WIDTH as u64,
        created_by: concat!("mpbcq ", env!("CARGO_PKG_VERSION")).to_string(),
    }
}

pub fn to_bytes(model: &MultiPrecisionModel) -> Vec<u8> {
    let header = serde_json::to_vec(&header_for(model)).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&ABCQ_MAGIC);
    out.extend_from_slice(&ABCQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for w in model.bitplanes().words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for set in model.scale_sets() {
        for a in set.alphas() {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    for set in model.scale_sets() {
        if let Some(offsets) = set.offsets() {
            for z in offsets {
                out.extend_from_slice(&z.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32s(&mut self, n: usize) -> Vec<u32> {
        let out = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.pos += 4 * n;
        out
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.u32s(n).into_iter().map(f32::from_bits).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MultiPrecisionModel> {
    let truncated = |expected: usize| Error::Truncated { expected: expected as u64, found: bytes.len() as u64 };
    if bytes.len() < 4 {
        return Err(truncated(12));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != ABCQ_MAGIC {
        return Err(Error::BadMagic { expected: ABCQ_MAGIC, found: magic });
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ABCQ_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(truncated(12 + header_len));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.scale_width != STORED_SCALE_WIDTH as u64 {
        return Err(Error::Format(format!("unsupported scale width {}", header.scale_width)));
    }
    let (rows, cols) = (header.rows as usize, header.cols as usize);
    let (p_low, p_high) = (header.p_low as usize, header.p_high as usize);
    let config = QuantConfig::new(header.group_size as usize, header.mode, header.cycles as usize);
    config.validate()?;
    if rows == 0 || cols == 0 || p_low == 0 || p_low > p_high || p_high > crate::bcq::MAX_PLANES {
        return Err(Error::Format(format!("invalid dims {rows}x{cols} or precision range {p_low}:{p_high}")));
    }
    let groups = config.num_groups(cols);
    let expected = payload_bytes(rows, cols, groups, p_low, p_high, header.mode)
        .and_then(|body| body.checked_add(16 + header_len))
        .ok_or_else(|| Error::Format(format!("dims {rows}x{cols} overflow")))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut rd = Reader { bytes, pos: 12 + header_len };
    let planes = BitPlaneSet::from_words(p_high, rows, cols, rd.u32s(p_high * rows * words_per_row(cols)))?;
    let alphas: Vec<Vec<f32>> = (p_low..=p_high).map(|p| rd.f32s(p * rows * groups)).collect();
    let mut offsets: Vec<Option<Vec<f32>>> =
        (p_low..=p_high).map(|_| header.mode.has_offset().then(|| rd.f32s(rows * groups))).collect();
    let scale_sets = (p_low..=p_high)
        .zip(alphas)
        .zip(offsets.iter_mut())
        .map(|((p, a), o)| ScaleTensor::from_parts(p, rows, groups, a, o.take()))
        .collect::<Result<Vec<_>>>()?;
    MultiPrecisionModel::from_parts(planes, scale_sets, p_low, p_high, config)
}

fn payload_bytes(rows: usize, cols: usize, groups: usize, p_low: usize, p_high: usize, mode: Mode) -> Option<usize> {
    let rows = rows as u128;
    let planes = p_high as u128 * rows * words_per_row(cols) as u128 * 4;
    let per_plane_scales = rows * groups as u128 * STORED_SCALE_WIDTH as u128;
    let scales: u128 = (p_low..=p_high).map(|p| p as u128 * per_plane_scales).sum();
    let offsets = if mode.has_offset() { (p_high - p_low + 1) as u128 * per_plane_scales } else { 0 };
    usize::try_from(planes + scales + offsets).ok()
}

pub fn serialize(model: &MultiPrecisionModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn deserialize(path: impl AsRef<Path>) -> Result<MultiPrecisionModel> {
    from_bytes(&fs::read(path)?)
}

/// Byte counts for one precision stored as a standalone model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecisionFootprint {
    pub p: usize,
    pub scale_bytes: u64,
    pub binary_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FootprintTotals {
    pub scale_bytes: u64,
    pub binary_bytes: u64,
    pub total_bytes: u64,
}

/// Memory accounting in the layout of a per-precision table:
/// one row per precision, then the sum of separate models ("Multi-model")
/// and the shared-plane model ("Shared").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintReport {
    pub per_precision: Vec<PrecisionFootprint>,
    pub multi_model: FootprintTotals,
    pub shared: FootprintTotals,
}

impl FootprintReport {
    /// Fraction of the multi-model footprint saved by sharing planes.
    pub fn reduction(&self) -> f64 {
        1.0 - self.shared.total_bytes as f64 / self.multi_model.total_bytes as f64
    }

    /// Aligned table in decimal units picked from the multi-model total
    /// (GB for layer- or model-sized inputs, down to plain bytes).
    pub fn to_table(&self) -> String {
        let (unit, div) = match self.multi_model.total_bytes {
            t if t >= 100_000_000 => ("GB", 1e9),
            t if t >= 100_000 => ("MB", 1e6),
            t if t >= 100 => ("KB", 1e3),
            _ => ("B", 1.0),
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>14} {:>14} {:>14}",
            "Bit",
            format!("Scale ({unit})"),
            format!("Binary ({unit})"),
            format!("Total ({unit})")
        );
        let mut line = |label: String, sc: u64, bi: u64, to: u64| {
            let _ = writeln!(
                s,
                "{label:<12} {:>14.4} {:>14.4} {:>14.4}",
                sc as f64 / div,
                bi as f64 / div,
                to as f64 / div
            );
        };
        for r in &self.per_precision {
            line(format!("BCQ{}", r.p), r.scale_bytes, r.binary_bytes, r.total_bytes);
        }
        let m = self.multi_model;
        line("Multi-model".into(), m.scale_bytes, m.binary_bytes, m.total_bytes);
        let sh = self.shared;
        line("Shared".into(), sh.scale_bytes, sh.binary_bytes, sh.total_bytes);
        let _ = writeln!(s, "reduction vs multi-model: {:.1}%", 100.0 * self.reduction());
        s
    }

    /// Comma-separated rows: `row,scale_bytes,binary_bytes,total_bytes`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,scale_bytes,binary_bytes,total_bytes\n");
        for r in &self.per_precision {
            let _ = writeln!(s, "bcq{},{},{},{}", r.p, r.scale_bytes, r.binary_bytes, r.total_bytes);
        }
        for (name, t) in [("multi_model", self.multi_model), ("shared", self.shared)] {
            let _ = writeln!(s, "{name},{},{},{}", t.scale_bytes, t.binary_bytes, t.total_bytes);
        }
        s
    }

    /// `key=value` lines, one quantity per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for r in &self.per_precision {
            let _ = writeln!(s, "bcq{}.scale_bytes={}", r.p, r.scale_bytes);
            let _ = writeln!(s, "bcq{}.binary_bytes={}", r.p, r.binary_bytes);
            let _ = writeln!(s, "bcq{}.total_bytes={}", r.p, r.total_bytes);
        }
        for (name, t) in [("multi_model", self.multi_model), ("shared", self.shared)] {
            let _ = writeln!(s, "{name}.scale_bytes={}", t.scale_bytes);
            let _ = writeln!(s, "{name}.binary_bytes={}", t.binary_bytes);
            let _ = writeln!(s, "{name}.total_bytes={}", t.total_bytes);
        }
        let _ = writeln!(s, "reduction={:.6}", self.reduction());
        s
    }
}

/// Footprint of an `rows × cols` matrix quantized at every precision in
/// `[p_low, p_high]` with `scale_width`-byte scales.
pub fn footprint(
    rows: u64,
    cols: u64,
    group_size: u64,
    p_low: usize,
    p_high: usize,
    mode: Mode,
    scale_width: u64,
) -> Result<FootprintReport> {
    if rows == 0 || cols == 0 || group_size == 0 || p_low == 0 || p_low > p_high {
        return Err(Error::InvalidArgument(format!(
            "invalid footprint request {rows}x{cols}, g={group_size}, bits {p_low}:{p_high}"
        )));
    }
    let groups = cols.div_ceil(group_size);
    let plane_bytes = rows * cols.div_ceil(32) * 4;
    let offset_bytes = if mode.has_offset() { rows * groups * scale_width } else { 0 };
    let per_precision: Vec<PrecisionFootprint> = (p_low..=p_high)
        .map(|p| {
            let scale_bytes = rows * groups * p as u64 * scale_width + offset_bytes;
            let binary_bytes = plane_bytes * p as u64;
            PrecisionFootprint { p, scale_bytes, binary_bytes, total_bytes: scale_bytes + binary_bytes }
        })
        .collect();
    let scale_sum: u64 = per_precision.iter().map(|r| r.scale_bytes).sum();
    let binary_sum: u64 = per_precision.iter().map(|r| r.binary_bytes).sum();
    let shared_binary = plane_bytes * p_high as u64;
    Ok(FootprintReport {
        per_precision,
        multi_model: FootprintTotals {
            scale_bytes: scale_sum,
            binary_bytes: binary_sum,
            total_bytes: scale_sum + binary_sum,
        },
        shared: FootprintTotals {
            scale_bytes: scale_sum,
            binary_bytes: shared_binary,
            total_bytes: scale_sum + shared_binary,
        },
    })
}

/// Footprint of a concrete model at the container's storage width.
pub fn model_footprint(model: &MultiPrecisionModel, scale_width: u64) -> FootprintReport {
    let cfg = model.config();
    footprint(
        model.rows() as u64,
        model.cols() as u64,
        cfg.group_size as u64,
        model.p_low(),
        model.p_high(),
        cfg.mode,
        scale_width,
    )
    .expect("model dims are valid")
}
