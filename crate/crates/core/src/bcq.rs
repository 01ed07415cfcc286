//! Fixed-precision binary-coded quantization.
//!
//! Every row is split into groups of `group_size` consecutive columns (the last
//! group may be shorter). Within a row-group the reconstruction of column `k` is
//!
//! ```text
//! ŵ[k] = Σ_{i<q} α_i · b_i[k]  (+ z in asymmetric mode),   b_i[k] ∈ {−1, +1}
//! ```
//!
//! Fitting runs in `f64`; stored scales are `f32`. Every error value reported
//! here is computed from the stored `f32` scales with [`level_of`], so the
//! descent guarantees hold for the stored model, not for an idealized one.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solve::solve_normal;
use crate::tensor_io::Matrix;

/// Largest supported plane count. Code recalibration enumerates `2^q` levels.
pub const MAX_PLANES: usize = 16;

pub const DEFAULT_GROUP_SIZE: usize = 128;
pub const DEFAULT_CYCLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Symmetric,
    /// Adds a per-row-group offset `z`, fit jointly with the scales.
    Asymmetric,
}

impl Mode {
    pub fn has_offset(self) -> bool {
        self == Mode::Asymmetric
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(Mode::Symmetric),
            "asym" | "asymmetric" => Ok(Mode::Asymmetric),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?} (expected sym|asym)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Symmetric => "sym",
            Mode::Asymmetric => "asym",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub group_size: usize,
    pub mode: Mode,
    /// Alternating cycles `T` used by base fitting and by every expansion step.
    pub cycles: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { group_size: DEFAULT_GROUP_SIZE, mode: Mode::Asymmetric, cycles: DEFAULT_CYCLES }
    }
}

impl QuantConfig {
    pub fn new(group_size: usize, mode: Mode, cycles: usize) -> Self {
        Self { group_size, mode, cycles }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidArgument("group size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_groups(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }

    pub fn group_bounds(&self, cols: usize, group: usize) -> Range<usize> {
        let start = group * self.group_size;
        start..(start + self.group_size).min(cols)
    }
}

pub(crate) fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(32)
}

/// Packed binary planes. Bit `j` of word `w` in a row holds column `32·w + j`;
/// a set bit encodes `+1`, a clear bit `−1`. Padding bits past the last column
/// are always zero. Layout is plane-major, then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlaneSet {
    planes: usize,
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u32>,
}

impl BitPlaneSet {
    /// All-clear planes, i.e. every code is `−1`.
    pub fn zeroed(planes: usize, rows: usize, cols: usize) -> Self {
        let wpr = words_per_row(cols);
        Self { planes, rows, cols, words_per_row: wpr, words: vec![0; planes * rows * wpr] }
    }

    pub fn from_words(planes: usize, rows: usize, cols: usize, words: Vec<u32>) -> Result<Self> {
        let wpr = words_per_row(cols);
        if planes == 0 || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty plane set {planes}x{rows}x{cols}")));
        }
        if words.len() != planes * rows * wpr {
            return Err(Error::Shape(format!(
                "plane set {planes}x{rows}x{cols} needs {} words, got {}",
                planes * rows * wpr,
                words.len()
            )));
        }
        let set = Self { planes, rows, cols, words_per_row: wpr, words };
        let tail_mask = set.padding_mask();
        if tail_mask != 0 {
            for chunk in set.words.chunks_exact(wpr) {
                if chunk[wpr - 1] & tail_mask != 0 {
                    return Err(Error::Format("non-zero padding bits in bit-plane".into()));
                }
            }
        }
        Ok(set)
    }

    /// Mask of the unused high bits in the last word of each row.
    fn padding_mask(&self) -> u32 {
        match self.cols % 32 {
            0 => 0,
            used => !((1u32 << used) - 1),
        }
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    /// All packed words of one plane.
    pub fn plane(&self, plane: usize) -> &[u32] {
        let n = self.rows * self.words_per_row;
        &self.words[plane * n..(plane + 1) * n]
    }

    pub fn plane_bytes(&self, plane: usize) -> Vec<u8> {
        self.plane(plane).iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn row_words(&self, plane: usize, row: usize) -> &[u32] {
        let start = (plane * self.rows + row) * self.words_per_row;
        &self.words[start..start + self.words_per_row]
    }

    pub fn bit(&self, plane: usize, row: usize, col: usize) -> bool {
        self.row_words(plane, row)[col / 32] >> (col % 32) & 1 == 1
    }

    pub fn code(&self, plane: usize, row: usize, col: usize) -> i8 {
        if self.bit(plane, row, col) {
            1
        } else {
            -1
        }
    }

    pub(crate) fn set_row_words(&mut self, plane: usize, row: usize, words: &[u32]) {
        let start = (plane * self.rows + row) * self.words_per_row;
        self.words[start..start + self.words_per_row].copy_from_slice(words);
    }

    /// Copy of the first `p` planes.
    pub fn truncated(&self, p: usize) -> Self {
        let n = self.rows * self.words_per_row;
        Self { planes: p, words: self.words[..p * n].to_vec(), ..*self }
    }

    /// Appends `extra` all-clear planes.
    pub(crate) fn extended(&self, extra: usize) -> Self {
        let mut words = self.words.clone();
        words.resize(words.len() + extra * self.rows * self.words_per_row, 0);
        Self { planes: self.planes + extra, words, ..*self }
    }

    /// Per-column plane patterns of one row: bit `i` of entry `k` is the bit of
    /// plane `i` at column `k`, for planes `< p`.
    pub fn row_patterns(&self, row: usize, p: usize) -> Vec<u32> {
        let mut out = vec![0u32; self.cols];
        for plane in 0..p {
            let words = self.row_words(plane, row);
            for (k, pat) in out.iter_mut().enumerate() {
                *pat |= (words[k / 32] >> (k % 32) & 1) << plane;
            }
        }
        out
    }
}

/// Packs ±1 codes (any non-negative value counts as `+1`) into words.
pub fn pack_signs(codes: &[i8]) -> Vec<u32> {
    let mut out = vec![0u32; words_per_row(codes.len())];
    for (k, &c) in codes.iter().enumerate() {
        if c >= 0 {
            out[k / 32] |= 1 << (k % 32);
        }
    }
    out
}

pub fn unpack_signs(words: &[u32], cols: usize) -> Vec<i8> {
    (0..cols).map(|k| if words[k / 32] >> (k % 32) & 1 == 1 { 1 } else { -1 }).collect()
}

fn pack_pattern_plane(patterns: &[u32], plane: usize) -> Vec<u32> {
    let mut out = vec![0u32; words_per_row(patterns.len())];
    for (k, &pat) in patterns.iter().enumerate() {
        out[k / 32] |= (pat >> plane & 1) << (k % 32);
    }
    out
}

/// Per-plane, per-row, per-group scales plus the optional per-row-group offset.
/// `alpha` is laid out plane-major, then row, then group.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleTensor {
    planes: usize,
    rows: usize,
    groups: usize,
    alpha: Vec<f32>,
    offset: Option<Vec<f32>>,
}

impl ScaleTensor {
    pub fn zeros(planes: usize, rows: usize, groups: usize, mode: Mode) -> Self {
        Self {
            planes,
            rows,
            groups,
            alpha: vec![0.0; planes * rows * groups],
            offset: mode.has_offset().then(|| vec![0.0; rows * groups]),
        }
    }

    pub fn from_parts(
        planes: usize,
        rows: usize,
        groups: usize,
        alpha: Vec<f32>,
        offset: Option<Vec<f32>>,
    ) -> Result<Self> {
        if alpha.len() != planes * rows * groups {
            return Err(Error::Shape(format!(
                "scale tensor {planes}x{rows}x{groups} needs {} values, got {}",
                planes * rows * groups,
                alpha.len()
            )));
        }
        if let Some(off) = &offset {
            if off.len() != rows * groups {
                return Err(Error::Shape(format!("offsets need {} values, got {}", rows * groups, off.len())));
            }
        }
        if let Some(i) = alpha.iter().chain(offset.iter().flatten()).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { planes, rows, groups, alpha, offset })
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn mode(&self) -> Mode {
        if self.offset.is_some() {
            Mode::Asymmetric
        } else {
            Mode::Symmetric
        }
    }

    pub fn alphas(&self) -> &[f32] {
        &self.alpha
    }

    pub fn offsets(&self) -> Option<&[f32]> {
        self.offset.as_deref()
    }

    pub fn alpha(&self, plane: usize, row: usize, group: usize) -> f32 {
        self.alpha[(plane * self.rows + row) * self.groups + group]
    }

    pub fn set_alpha(&mut self, plane: usize, row: usize, group: usize, value: f32) {
        self.alpha[(plane * self.rows + row) * self.groups + group] = value;
    }

    /// Offset of a row-group; zero in symmetric mode.
    pub fn offset(&self, row: usize, group: usize) -> f32 {
        self.offset.as_ref().map_or(0.0, |o| o[row * self.groups + group])
    }

    pub fn set_offset(&mut self, row: usize, group: usize, value: f32) {
        if let Some(o) = self.offset.as_mut() {
            o[row * self.groups + group] = value;
        }
    }

    /// The first `p` scales of one row-group, in plane order.
    pub fn group_alphas(&self, row: usize, group: usize, p: usize) -> Vec<f32> {
        (0..p).map(|i| self.alpha(i, row, group)).collect()
    }

    /// Copy keeping only the first `p` planes of scales.
    pub fn truncated(&self, p: usize) -> Self {
        let n = self.rows * self.groups;
        Self { planes: p, alpha: self.alpha[..p * n].to_vec(), offset: self.offset.clone(), ..*self }
    }
}

/// A fixed-precision quantized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub bitplanes: BitPlaneSet,
    pub scales: ScaleTensor,
    pub config: QuantConfig,
}

impl QuantizedMatrix {
    pub fn new(bitplanes: BitPlaneSet, scales: ScaleTensor, config: QuantConfig) -> Result<Self> {
        check_pairing(&bitplanes, &scales, &config)?;
        if bitplanes.planes() != scales.planes() {
            return Err(Error::Shape(format!(
                "{} bit-planes paired with {} scale planes",
                bitplanes.planes(),
                scales.planes()
            )));
        }
        Ok(Self { bitplanes, scales, config })
    }

    pub fn planes(&self) -> usize {
        self.bitplanes.planes()
    }

    pub fn rows(&self) -> usize {
        self.bitplanes.rows()
    }

    pub fn cols(&self) -> usize {
        self.bitplanes.cols()
    }

    /// View over the first `p` planes and scales.
    pub fn view(&self, p: usize) -> Result<QuantView<'_>> {
        QuantView::new(&self.bitplanes, &self.scales, p, self.config)
    }

    pub fn dequantize(&self, p: usize) -> Result<Matrix> {
        Ok(self.view(p)?.dequantize())
    }
}

fn check_pairing(planes: &BitPlaneSet, scales: &ScaleTensor, cfg: &QuantConfig) -> Result<()> {
    cfg.validate()?;
    if planes.rows() != scales.rows() || cfg.num_groups(planes.cols()) != scales.groups() {
        return Err(Error::Shape(format!(
            "planes {}x{} (groups of {}) do not match scales {}x{} groups",
            planes.rows(),
            planes.cols(),
            cfg.group_size,
            scales.rows(),
            scales.groups()
        )));
    }
    if cfg.mode != scales.mode() {
        return Err(Error::Shape(format!("config mode {} but scales are {}", cfg.mode, scales.mode())));
    }
    Ok(())
}

/// Borrowed pairing of the first `p` planes with a scale set holding at least
/// `p` planes of scales. Both the fixed-precision matrix and each precision of a
/// multi-precision model are served through this type.
#[derive(Debug, Clone, Copy)]
pub struct QuantView<'a> {
    planes: &'a BitPlaneSet,
    scales: &'a ScaleTensor,
    p: usize,
    config: QuantConfig,
}

impl<'a> QuantView<'a> {
    pub fn new(planes: &'a BitPlaneSet, scales: &'a ScaleTensor, p: usize, config: QuantConfig) -> Result<Self> {
        check_pairing(planes, scales, &config)?;
        let high = planes.planes().min(scales.planes());
        if p == 0 || p > high {
            return Err(Error::PrecisionOutOfRange { p, low: 1, high });
        }
        Ok(Self { planes, scales, p, config })
    }

    pub fn precision(&self) -> usize {
        self.p
    }

    pub fn rows(&self) -> usize {
        self.planes.rows()
    }

    pub fn cols(&self) -> usize {
        self.planes.cols()
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn bitplanes(&self) -> &'a BitPlaneSet {
        self.planes
    }

    pub fn scales(&self) -> &'a ScaleTensor {
        self.scales
    }

    pub fn groups(&self) -> usize {
        self.scales.groups()
    }

    /// Reconstructed values of one row, in `f64`.
    pub fn row_values(&self, row: usize) -> Vec<f64> {
        let patterns = self.planes.row_patterns(row, self.p);
        let mut out = vec![0.0; self.cols()];
        for gr in 0..self.groups() {
            let alphas = self.scales.group_alphas(row, gr, self.p);
            let offset = self.scales.offset(row, gr);
            for k in self.config.group_bounds(self.cols(), gr) {
                out[k] = level_of(&alphas, offset, patterns[k]);
            }
        }
        out
    }

    pub fn dequantize(&self) -> Matrix {
        let data: Vec<f32> = (0..self.rows())
            .into_par_iter()
            .flat_map_iter(|r| self.row_values(r).into_iter().map(|v| v as f32))
            .collect();
        Matrix::new(self.rows(), self.cols(), data).expect("dequantized values are finite")
    }

    /// `‖w − ŵ‖²_F`, summed per group, then per row, in index order.
    pub fn reconstruction_error(&self, w: &Matrix) -> Result<f64> {
        check_weights(w, self.rows(), self.cols())?;
        let per_row: Vec<f64> = (0..self.rows())
            .into_par_iter()
            .map(|r| {
                let wr = to_f64(w.row(r));
                let patterns = self.planes.row_patterns(r, self.p);
                (0..self.groups())
                    .map(|gr| {
                        let b = self.config.group_bounds(self.cols(), gr);
                        group_error(
                            &wr[b.clone()],
                            &patterns[b],
                            &self.scales.group_alphas(r, gr, self.p),
                            self.scales.offset(r, gr),
                        )
                    })
                    .sum::<f64>()
            })
            .collect();
        Ok(per_row.iter().sum())
    }

    pub fn relative_error(&self, w: &Matrix) -> Result<f64> {
        let norm = w.frobenius_sq();
        let err = self.reconstruction_error(w)?;
        Ok(if norm > 0.0 { err / norm } else { err })
    }
}

fn check_weights(w: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if w.rows() != rows || w.cols() != cols {
        return Err(Error::Shape(format!("weights are {}x{}, quantized matrix is {rows}x{cols}", w.rows(), w.cols())));
    }
    Ok(())
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Reconstructed value of a plane pattern: `Σ ±α_i` in plane order, then `+ z`.
/// This is the single definition of a quantization level; every fitter and
/// error evaluation goes through it.
#[inline]
pub fn level_of(alphas: &[f32], offset: f32, pattern: u32) -> f64 {
    let mut v = 0.0f64;
    for (i, &a) in alphas.iter().enumerate() {
        if pattern >> i & 1 == 1 {
            v += a as f64;
        } else {
            v -= a as f64;
        }
    }
    v + offset as f64
}

pub(crate) fn group_error(w: &[f64], patterns: &[u32], alphas: &[f32], offset: f32) -> f64 {
    w.iter()
        .zip(patterns)
        .map(|(&x, &pat)| {
            let d = x - level_of(alphas, offset, pat);
            d * d
        })
        .sum()
}

/// Greedy residual fit of one row-group. Returns patterns, scales, offset.
pub(crate) fn greedy_group(w: &[f64], q: usize, mode: Mode) -> (Vec<u32>, Vec<f32>, f32) {
    let n = w.len() as f64;
    let offset = if mode.has_offset() { (w.iter().sum::<f64>() / n) as f32 } else { 0.0 };
    let mut residual: Vec<f64> = w.iter().map(|&x| x - offset as f64).collect();
    let mut patterns = vec![0u32; w.len()];
    let mut alphas = Vec::with_capacity(q);
    for i in 0..q {
        // sign(0) = +1; with ±1 codes ⟨R, B⟩ / ‖B‖² is the mean absolute residual.
        let alpha = (residual.iter().map(|r| r.abs()).sum::<f64>() / n) as f32;
        for (r, pat) in residual.iter_mut().zip(patterns.iter_mut()) {
            if *r >= 0.0 {
                *pat |= 1 << i;
                *r -= alpha as f64;
            } else {
                *r += alpha as f64;
            }
        }
        alphas.push(alpha);
    }
    (patterns, alphas, offset)
}

pub(crate) struct GroupScales {
    pub alphas: Vec<f32>,
    pub offset: f32,
    pub ridge: bool,
}

/// Least-squares refit of one row-group's scales (and offset) with codes fixed.
///
/// The rounded solution is compared against each incumbent `(alphas, offset)`
/// and the lowest-error candidate wins, so the stored error never increases.
pub(crate) fn ls_group(w: &[f64], patterns: &[u32], q: usize, mode: Mode, incumbents: &[(&[f32], f32)]) -> GroupScales {
    let dim = q + usize::from(mode.has_offset());
    let mut gram = vec![0.0f64; dim * dim];
    let mut rhs = vec![0.0f64; dim];
    let mut col = vec![0.0f64; dim];
    for (&x, &pat) in w.iter().zip(patterns) {
        for (i, c) in col.iter_mut().enumerate().take(q) {
            *c = if pat >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        if dim > q {
            col[q] = 1.0;
        }
        for i in 0..dim {
            rhs[i] += col[i] * x;
            for j in 0..dim {
                gram[i * dim + j] += col[i] * col[j];
            }
        }
    }
    let sol = solve_normal(&gram, &rhs, dim, false);
    let alphas: Vec<f32> = sol.x[..q].iter().map(|&v| v as f32).collect();
    let offset = if dim > q { sol.x[q] as f32 } else { 0.0 };

    let mut best = GroupScales { alphas, offset, ridge: sol.ridge };
    let mut best_err = group_error(w, patterns, &best.alphas, best.offset);
    if !best_err.is_finite() || best.alphas.iter().any(|a| !a.is_finite()) || !best.offset.is_finite() {
        best_err = f64::INFINITY;
    }
    for &(alphas, offset) in incumbents {
        let e = group_error(w, patterns, alphas, offset);
        if e < best_err {
            best_err = e;
            best = GroupScales { alphas: alphas.to_vec(), offset, ridge: best.ridge };
        }
    }
    best
}

/// Sorted table of the `2^q` reachable levels of one row-group.
pub struct LevelTable {
    values: Vec<f64>,
    patterns: Vec<u32>,
}

impl LevelTable {
    pub fn new(alphas: &[f32], offset: f32) -> Result<Self> {
        let q = alphas.len();
        if q == 0 || q > MAX_PLANES {
            return Err(Error::InvalidArgument(format!("code search supports 1..={MAX_PLANES} planes, got {q}")));
        }
        let mut entries: Vec<(f64, u32)> = (0..1u32 << q).map(|pat| (level_of(alphas, offset, pat), pat)).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // Equal levels are interchangeable; keep the lowest pattern.
        entries.dedup_by(|later, earlier| later.0 == earlier.0);
        let (values, patterns) = entries.into_iter().unzip();
        Ok(Self { values, patterns })
    }

    pub fn levels(&self) -> &[f64] {
        &self.values
    }

    /// Nearest level to `x`; an exact midpoint goes to the larger level.
    pub fn nearest(&self, x: f64) -> (f64, u32) {
        let idx = self.values.partition_point(|&v| v < x);
        let pick = if idx == 0 {
            0
        } else if idx == self.values.len() {
            idx - 1
        } else if self.values[idx] - x <= x - self.values[idx - 1] {
            idx
        } else {
            idx - 1
        };
        (self.values[pick], self.patterns[pick])
    }
}

pub(crate) fn bs_group(w: &[f64], alphas: &[f32], offset: f32, patterns: &mut [u32]) -> Result<()> {
    let table = LevelTable::new(alphas, offset)?;
    for (&x, pat) in w.iter().zip(patterns.iter_mut()) {
        *pat = table.nearest(x).1;
    }
    Ok(())
}

/// Working state of one row during fitting. Scales are group-major here
/// (`alphas[group·q + i]`), unlike [`ScaleTensor`].
#[derive(Debug, Clone)]
pub(crate) struct RowFit {
    pub patterns: Vec<u32>,
    pub alphas: Vec<f32>,
    pub offsets: Vec<f32>,
    pub ridge: bool,
}

impl RowFit {
    pub fn group_alphas(&self, gr: usize, q: usize) -> &[f32] {
        &self.alphas[gr * q..(gr + 1) * q]
    }

    pub fn error(&self, w: &[f64], q: usize, cfg: &QuantConfig) -> f64 {
        (0..self.offsets.len())
            .map(|gr| {
                let b = cfg.group_bounds(w.len(), gr);
                group_error(&w[b.clone()], &self.patterns[b], self.group_alphas(gr, q), self.offsets[gr])
            })
            .sum()
    }

    pub fn from_view(view: &QuantView<'_>, row: usize, q: usize) -> Self {
        let groups = view.groups();
        let mut alphas = Vec::with_capacity(groups * q);
        let mut offsets = Vec::with_capacity(groups);
        for gr in 0..groups {
            alphas.extend(view.scales.group_alphas(row, gr, q));
            offsets.push(view.scales.offset(row, gr));
        }
        Self { patterns: view.planes.row_patterns(row, q), alphas, offsets, ridge: false }
    }

    pub fn greedy(w: &[f64], q: usize, cfg: &QuantConfig) -> Self {
        let groups = cfg.num_groups(w.len());
        let mut fit = Self {
            patterns: vec![0; w.len()],
            alphas: Vec::with_capacity(groups * q),
            offsets: Vec::with_capacity(groups),
            ridge: false,
        };
        for gr in 0..groups {
            let b = cfg.group_bounds(w.len(), gr);
            let (pats, alphas, offset) = greedy_group(&w[b.clone()], q, cfg.mode);
            fit.patterns[b].copy_from_slice(&pats);
            fit.alphas.extend(alphas);
            fit.offsets.push(offset);
        }
        fit
    }

    /// LS half-step over all groups. `extra` optionally supplies one more
    /// incumbent per group (group-major scales, offsets).
    pub fn ls_step(&mut self, w: &[f64], q: usize, cfg: &QuantConfig, extra: Option<(&[f32], &[f32])>) {
        for gr in 0..self.offsets.len() {
            let b = cfg.group_bounds(w.len(), gr);
            let current = self.group_alphas(gr, q).to_vec();
            let mut incumbents: Vec<(&[f32], f32)> = vec![(&current, self.offsets[gr])];
            if let Some((alphas, offsets)) = extra {
                incumbents.push((&alphas[gr * q..(gr + 1) * q], offsets[gr]));
            }
            let s = ls_group(&w[b.clone()], &self.patterns[b], q, cfg.mode, &incumbents);
            self.alphas[gr * q..(gr + 1) * q].copy_from_slice(&s.alphas);
            self.offsets[gr] = s.offset;
            self.ridge |= s.ridge;
        }
    }

    pub fn bs_step(&mut self, w: &[f64], q: usize, cfg: &QuantConfig) -> Result<()> {
        for gr in 0..self.offsets.len() {
            let b = cfg.group_bounds(w.len(), gr);
            let alphas = self.group_alphas(gr, q).to_vec();
            bs_group(&w[b.clone()], &alphas, self.offsets[gr], &mut self.patterns[b])?;
        }
        Ok(())
    }
}

/// Assembles per-row fits into packed planes and a scale tensor.
pub(crate) fn assemble(fits: &[RowFit], q: usize, cols: usize, cfg: &QuantConfig) -> (BitPlaneSet, ScaleTensor) {
    let rows = fits.len();
    let groups = cfg.num_groups(cols);
    let mut planes = BitPlaneSet::zeroed(q, rows, cols);
    let mut scales = ScaleTensor::zeros(q, rows, groups, cfg.mode);
    for (r, fit) in fits.iter().enumerate() {
        for plane in 0..q {
            planes.set_row_words(plane, r, &pack_pattern_plane(&fit.patterns, plane));
        }
        for gr in 0..groups {
            for (i, &a) in fit.group_alphas(gr, q).iter().enumerate() {
                scales.set_alpha(i, r, gr, a);
            }
            scales.set_offset(r, gr, fit.offsets[gr]);
        }
    }
    (planes, scales)
}

pub(crate) fn pack_row_plane(fit: &RowFit, plane: usize) -> Vec<u32> {
    pack_pattern_plane(&fit.patterns, plane)
}

fn check_planes(q: usize) -> Result<()> {
    if q == 0 || q > MAX_PLANES {
        return Err(Error::InvalidArgument(format!("plane count must be in 1..={MAX_PLANES}, got {q}")));
    }
    Ok(())
}

/// Greedy residual initialization: plane `i+1` is the sign of the running
/// residual and its scale the group's mean absolute residual. In asymmetric
/// mode the offset starts at the group mean.
pub fn greedy_init(w: &Matrix, q: usize, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    check_planes(q)?;
    cfg.validate()?;
    let fits: Vec<RowFit> = (0..w.rows()).into_par_iter().map(|r| RowFit::greedy(&to_f64(w.row(r)), q, cfg)).collect();
    let (planes, scales) = assemble(&fits, q, w.cols(), cfg);
    QuantizedMatrix::new(planes, scales, *cfg)
}

/// Least-squares update of every row-group's scales with the codes of `qm`
/// held fixed. Never increases any group's reconstruction error.
pub fn ls_update_scales(w: &Matrix, qm: &QuantizedMatrix) -> Result<ScaleTensor> {
    check_weights(w, qm.rows(), qm.cols())?;
    let q = qm.planes();
    let view = qm.view(q)?;
    let fits: Vec<RowFit> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let mut fit = RowFit::from_view(&view, r, q);
            fit.ls_step(&to_f64(w.row(r)), q, &qm.config, None);
            fit
        })
        .collect();
    Ok(assemble(&fits, q, w.cols(), &qm.config).1)
}

/// Reassigns every weight to the nearest level reachable with `scales`,
/// returning the corresponding planes.
pub fn bs_recalibrate_codes(w: &Matrix, scales: &ScaleTensor, cfg: &QuantConfig) -> Result<BitPlaneSet> {
    cfg.validate()?;
    let q = scales.planes();
    check_planes(q)?;
    if scales.rows() != w.rows() || scales.groups() != cfg.num_groups(w.cols()) {
        return Err(Error::Shape("scales do not match the weight matrix".into()));
    }
    let placeholder = BitPlaneSet::zeroed(q, w.rows(), w.cols());
    let view = QuantView::new(&placeholder, scales, q, *cfg)?;
    let fits: Vec<RowFit> = (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let mut fit = RowFit::from_view(&view, r, q);
            fit.bs_step(&to_f64(w.row(r)), q, cfg).map(|_| fit)
        })
        .collect::<Result<_>>()?;
    Ok(assemble(&fits, q, w.cols(), cfg).0)
}

/// Greedy init followed by `cfg.cycles` rounds of {LS scales, nearest-level codes}.
pub fn alternate_fit(w: &Matrix, q: usize, cfg: &QuantConfig) -> Result<QuantizedMatrix> {
    Ok(alternate_fit_traced(w, q, cfg)?.0)
}

/// As [`alternate_fit`], also returning the total reconstruction error after
/// the greedy init and after every half-step: `[init, LS₁, BS₁, LS₂, …]`.
pub fn alternate_fit_traced(w: &Matrix, q: usize, cfg: &QuantConfig) -> Result<(QuantizedMatrix, Vec<f64>)> {
    check_planes(q)?;
    cfg.validate()?;
    let rows: Vec<(RowFit, Vec<f64>)> =
        (0..w.rows()).into_par_iter().map(|r| fit_row(&to_f64(w.row(r)), q, cfg)).collect::<Result<_>>()?;
    let steps = 1 + 2 * cfg.cycles;
    let trace = (0..steps).map(|s| rows.iter().map(|(_, t)| t[s]).sum()).collect();
    let fits: Vec<RowFit> = rows.into_iter().map(|(f, _)| f).collect();
    let (planes, scales) = assemble(&fits, q, w.cols(), cfg);
    Ok((QuantizedMatrix::new(planes, scales, *cfg)?, trace))
}

pub(crate) fn fit_row(w: &[f64], q: usize, cfg: &QuantConfig) -> Result<(RowFit, Vec<f64>)> {
    let mut fit = RowFit::greedy(w, q, cfg);
    let mut trace = Vec::with_capacity(1 + 2 * cfg.cycles);
    trace.push(fit.error(w, q, cfg));
    for _ in 0..cfg.cycles {
        fit.ls_step(w, q, cfg, None);
        trace.push(fit.error(w, q, cfg));
        fit.bs_step(w, q, cfg)?;
        trace.push(fit.error(w, q, cfg));
    }
    Ok((fit, trace))
}

/// `‖w − dequantize(qm, p)‖²_F`.
pub fn reconstruction_error(w: &Matrix, qm: &QuantizedMatrix, p: usize) -> Result<f64> {
    qm.view(p)?.reconstruction_error(w)
}

/// Reconstruction error divided by `‖w‖²_F`.
pub fn relative_reconstruction_error(w: &Matrix, qm: &QuantizedMatrix, p: usize) -> Result<f64> {
    qm.view(p)?.relative_error(w)
}
