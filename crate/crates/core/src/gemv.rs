//! Matrix-vector products computed directly on packed bit-planes.
//!
//! `y[n] = Σ_{i≤p} Σ_gr α_i[n,gr] · (Σ_{k∈gr} b_i[n,k]·x[k]) + Σ_gr z[n,gr]·Σ_{k∈gr} x[k]`
//!
//! Only planes `1..=p` of each row are read, so traffic scales with the
//! requested precision. Accumulation order is per row, plane-major, then
//! group-major; results are bitwise reproducible for a fixed build.
//!
//! The lookup-table path precomputes, for every `µ`-column chunk of `x`, all
//! `2^µ` signed partial sums; a plane row then costs one table read per chunk
//! instead of `µ` additions. The table depends only on `x`, so it is built once
//! per call and shared by all rows and planes.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::bcq::{QuantView, MAX_PLANES};
use crate::error::{Error, Result};
use crate::progressive::MultiPrecisionModel;
use crate::tensor_io::Matrix;

pub const DEFAULT_CHUNK_BITS: usize = 8;

const ROW_BLOCK: usize = 4;

/// `(N, K)` shapes of representative LLM linear layers.
pub const LLM_LAYER_SHAPES: [(usize, usize); 9] = [
    (4096, 4096),
    (14336, 4096),
    (4096, 14336),
    (5120, 5120),
    (17920, 5120),
    (5120, 17920),
    (8192, 8192),
    (28672, 8192),
    (8192, 28672),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemvPath {
    /// Bit-serial reference: decodes every bit and adds or subtracts `x[k]`.
    Naive,
    Lut,
}

impl FromStr for GemvPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(GemvPath::Naive),
            "lut" => Ok(GemvPath::Lut),
            other => Err(Error::InvalidArgument(format!("unknown gemv path {other:?} (expected lut|naive)"))),
        }
    }
}

impl std::fmt::Display for GemvPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GemvPath::Naive => "naive",
            GemvPath::Lut => "lut",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// LUT chunk width `µ` in bits; one of 1, 2, 4, 8.
    pub chunk_bits: usize,
    /// Split rows across the rayon pool.
    pub parallel: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { chunk_bits: DEFAULT_CHUNK_BITS, parallel: true }
    }
}

impl ExecOptions {
    pub fn serial() -> Self {
        Self { parallel: false, ..Self::default() }
    }
}

/// Exact traffic counters for one call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GemvStats {
    pub plane_bytes_fetched: u64,
    pub scale_bytes_fetched: u64,
    pub lut_build_count: u64,
    pub elapsed: Duration,
}

/// All `2^µ` signed partial sums of every `µ`-wide chunk of an activation vector.
/// Entry `t` of chunk `c` is `Σ_j s_j(t)·x[c·µ + j]` with `s_j(t) = +1` when bit
/// `j` of `t` is set, else `−1`. Columns past the end of `x` count as zero.
#[derive(Debug, Clone)]
pub struct LookupTable {
    chunk_bits: usize,
    chunks: usize,
    entries: Vec<f32>,
}

impl LookupTable {
    pub fn build(x: &[f32], chunk_bits: usize) -> Result<Self> {
        if !matches!(chunk_bits, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidArgument(format!("chunk width must be 1, 2, 4 or 8 bits, got {chunk_bits}")));
        }
        let width = 1usize << chunk_bits;
        let chunks = x.len().div_ceil(chunk_bits);
        let mut entries = vec![0.0f32; chunks * width];
        for (c, table) in entries.chunks_exact_mut(width).enumerate() {
            let lo = c * chunk_bits;
            let xs = &x[lo..(lo + chunk_bits).min(x.len())];
            table[0] = -xs.iter().sum::<f32>();
            for t in 1..width {
                let j = t.trailing_zeros() as usize;
                let xj = xs.get(j).copied().unwrap_or(0.0);
                // Setting bit j flips its sign from −1 to +1.
                table[t] = table[t & (t - 1)] + 2.0 * xj;
            }
        }
        Ok(Self { chunk_bits, chunks, entries })
    }

    pub fn chunk_bits(&self) -> usize {
        self.chunk_bits
    }

    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn table(&self, chunk: usize) -> &[f32] {
        let width = 1 << self.chunk_bits;
        &self.entries[chunk * width..(chunk + 1) * width]
    }

    #[inline]
    pub fn entry(&self, chunk: usize, index: usize) -> f32 {
        self.entries[(chunk << self.chunk_bits) + index]
    }
}

fn check_input(view: &QuantView<'_>, x: &[f32]) -> Result<()> {
    if x.len() != view.cols() {
        return Err(Error::Shape(format!("input has {} entries, model expects {}", x.len(), view.cols())));
    }
    Ok(())
}

fn group_sums(view: &QuantView<'_>, x: &[f32]) -> Vec<f32> {
    let cfg = view.config();
    (0..view.groups()).map(|gr| x[cfg.group_bounds(x.len(), gr)].iter().sum()).collect()
}

struct RowOut {
    y: f32,
    plane_words: u64,
    scale_values: u64,
}

fn run_rows(view: &QuantView<'_>, parallel: bool, f: impl Fn(usize) -> RowOut + Sync) -> (Vec<f32>, u64, u64) {
    let outs: Vec<RowOut> =
        if parallel { (0..view.rows()).into_par_iter().map(&f).collect() } else { (0..view.rows()).map(&f).collect() };
    let words: u64 = outs.iter().map(|o| o.plane_words).sum();
    let scales = outs.iter().map(|o| o.scale_values).sum();
    (outs.into_iter().map(|o| o.y).collect(), words, scales)
}

#[inline]
fn signed_sum_bits(words: &[u32], x: &[f32], range: std::ops::Range<usize>) -> f32 {
    let mut acc = 0.0f32;
    for k in range {
        if words[k / 32] >> (k % 32) & 1 == 1 {
            acc += x[k];
        } else {
            acc -= x[k];
        }
    }
    acc
}

/// Bit-serial reference GEMV at the view's precision.
pub fn gemv_naive(view: &QuantView<'_>, x: &[f32], opts: ExecOptions) -> Result<(Vec<f32>, GemvStats)> {
    check_input(view, x)?;
    let start = Instant::now();
    let cfg = view.config();
    let p = view.precision();
    let groups = view.groups();
    let has_offset = cfg.mode.has_offset();
    let planes = view.bitplanes();
    let scales = view.scales();
    let sums = if has_offset { group_sums(view, x) } else { Vec::new() };
    let (y, words, scale_values) = run_rows(view, opts.parallel, |n| {
        let mut y = 0.0f32;
        let mut plane_words = 0u64;
        let mut scale_values = 0u64;
        for i in 0..p {
            let row_words = planes.row_words(i, n);
            plane_words += row_words.len() as u64;
            for gr in 0..groups {
                let alpha = scales.alpha(i, n, gr);
                scale_values += 1;
                y += alpha * signed_sum_bits(row_words, x, cfg.group_bounds(x.len(), gr));
            }
        }
        if has_offset {
            for (gr, &s) in sums.iter().enumerate() {
                y += scales.offset(n, gr) * s;
                scale_values += 1;
            }
        }
        RowOut { y, plane_words, scale_values }
    });
    let stats = GemvStats {
        plane_bytes_fetched: 4 * words,
        scale_bytes_fetched: 4 * scale_values,
        lut_build_count: 0,
        elapsed: start.elapsed(),
    };
    Ok((y, stats))
}

/// Per-plane sums of table entries for chunks `c0..c1`; `rows[i]` is the
/// packed row of plane `i`. Planes are walked together so each table slab is
/// read from cache once per word rather than once per plane.
#[inline]
fn lut_span(lut: &LookupTable, rows: &[&[u32]], c0: usize, c1: usize, mask: u32, out: &mut [f32]) {
    let mu = lut.chunk_bits;
    let per_word = 32 / mu;
    let single = |words: &[u32], c: usize| {
        let bit = c * mu;
        lut.entry(c, ((words[bit / 32] >> (bit % 32)) & mask) as usize)
    };
    out.fill(0.0);
    let mut c = c0;
    while c < c1 && !c.is_multiple_of(per_word) {
        for (o, w) in out.iter_mut().zip(rows) {
            *o += single(w, c);
        }
        c += 1;
    }
    let full_end = c + (c1 - c) / per_word * per_word;
    if mu == 8 {
        // Four byte-wide chunks per word: one 1024-entry slab of tables per word.
        let slabs = lut.entries[c << 8..full_end << 8].chunks_exact(1024);
        for (wi, slab) in (c / 4..full_end / 4).zip(slabs) {
            let t: &[f32; 1024] = slab.try_into().unwrap();
            for (o, w) in out.iter_mut().zip(rows) {
                let wd = w[wi];
                *o += (t[(wd & 0xff) as usize] + t[256 + (wd >> 8 & 0xff) as usize])
                    + (t[512 + (wd >> 16 & 0xff) as usize] + t[768 + (wd >> 24) as usize]);
            }
        }
    } else {
        for c in c..full_end {
            for (o, w) in out.iter_mut().zip(rows) {
                *o += single(w, c);
            }
        }
    }
    for c in full_end..c1 {
        for (o, w) in out.iter_mut().zip(rows) {
            *o += single(w, c);
        }
    }
}

/// Lookup-table GEMV at the view's precision. Groups whose bounds are not
/// aligned to the chunk width are accumulated bit-serially.
pub fn gemv_lut(view: &QuantView<'_>, x: &[f32], opts: ExecOptions) -> Result<(Vec<f32>, GemvStats)> {
    check_input(view, x)?;
    let start = Instant::now();
    let lut = LookupTable::build(x, opts.chunk_bits)?;
    let mu = opts.chunk_bits;
    let mask = (1u32 << mu) - 1;
    let cfg = view.config();
    let k_len = x.len();
    let p = view.precision();
    let groups = view.groups();
    let has_offset = cfg.mode.has_offset();
    let planes = view.bitplanes();
    let scales = view.scales();
    let sums = if has_offset { group_sums(view, x) } else { Vec::new() };
    // Chunk range of each group, or None when it must take the bit-serial route.
    let spans: Vec<Option<(usize, usize)>> = (0..groups)
        .map(|gr| {
            let b = cfg.group_bounds(k_len, gr);
            (b.start.is_multiple_of(mu) && (b.end.is_multiple_of(mu) || b.end == k_len))
                .then(|| (b.start / mu, b.end.div_ceil(mu)))
        })
        .collect();

    let rows_total = view.rows();
    // Rows are processed in small blocks so each cached table slab serves
    // every (row, plane) pair of the block.
    let block = |b: usize| -> Vec<RowOut> {
        let r0 = b * ROW_BLOCK;
        let r1 = (r0 + ROW_BLOCK).min(rows_total);
        let width = (r1 - r0) * p;
        let mut rows: [&[u32]; ROW_BLOCK * MAX_PLANES] = [&[]; ROW_BLOCK * MAX_PLANES];
        for (j, slot) in rows.iter_mut().take(width).enumerate() {
            *slot = planes.row_words(j % p, r0 + j / p);
        }
        let rows = &rows[..width];
        let mut partials = [0.0f32; ROW_BLOCK * MAX_PLANES];
        let partials = &mut partials[..width];
        let mut out: Vec<RowOut> = (r0..r1)
            .map(|_| RowOut { y: 0.0, plane_words: (p * planes.words_per_row()) as u64, scale_values: 0 })
            .collect();
        for (gr, span) in spans.iter().enumerate() {
            match *span {
                Some((c0, c1)) => lut_span(&lut, rows, c0, c1, mask, partials),
                None => {
                    for (o, w) in partials.iter_mut().zip(rows) {
                        *o = signed_sum_bits(w, x, cfg.group_bounds(k_len, gr));
                    }
                }
            }
            for (j, &partial) in partials.iter().enumerate() {
                let (r, i) = (j / p, j % p);
                out[r].y += scales.alpha(i, r0 + r, gr) * partial;
                out[r].scale_values += 1;
            }
        }
        if has_offset {
            for (r, o) in out.iter_mut().enumerate() {
                for (gr, &s) in sums.iter().enumerate() {
                    o.y += scales.offset(r0 + r, gr) * s;
                    o.scale_values += 1;
                }
            }
        }
        out
    };
    let blocks = rows_total.div_ceil(ROW_BLOCK);
    let outs: Vec<RowOut> = if opts.parallel {
        (0..blocks).into_par_iter().flat_map_iter(block).collect()
    } else {
        (0..blocks).flat_map(block).collect()
    };
    let words: u64 = outs.iter().map(|o| o.plane_words).sum();
    let scale_values: u64 = outs.iter().map(|o| o.scale_values).sum();
    let y: Vec<f32> = outs.into_iter().map(|o| o.y).collect();
    let stats = GemvStats {
        plane_bytes_fetched: 4 * words,
        scale_bytes_fetched: 4 * scale_values,
        lut_build_count: 1,
        elapsed: start.elapsed(),
    };
    Ok((y, stats))
}

/// GEMV on a multi-precision model at per-call precision `p`. The model is
/// only borrowed, so calls at different precisions may run concurrently.
pub fn gemv(
    model: &MultiPrecisionModel,
    p: usize,
    x: &[f32],
    path: GemvPath,
    opts: ExecOptions,
) -> Result<(Vec<f32>, GemvStats)> {
    let view = model.view(p)?;
    match path {
        GemvPath::Naive => gemv_naive(&view, x, opts),
        GemvPath::Lut => gemv_lut(&view, x, opts),
    }
}

/// Plain `f32` dense GEMV, one dot product per row.
pub fn dense_gemv(w: &Matrix, x: &[f32], parallel: bool) -> Result<Vec<f32>> {
    if x.len() != w.cols() {
        return Err(Error::Shape(format!("input has {} entries, matrix expects {}", x.len(), w.cols())));
    }
    let row = |n: usize| w.row(n).iter().zip(x).fold(0.0f32, |acc, (&a, &b)| acc + a * b);
    Ok(if parallel { (0..w.rows()).into_par_iter().map(row).collect() } else { (0..w.rows()).map(row).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchPath {
    Naive,
    Lut,
    /// Dense `f32` weights (the dequantized top precision).
    Dense,
}

impl std::fmt::Display for BenchPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchPath::Naive => "naive",
            BenchPath::Lut => "lut",
            BenchPath::Dense => "dense",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub rows: usize,
    pub cols: usize,
    pub path: BenchPath,
    /// Bits per weight: the precision for plane paths, 32 for dense.
    pub bits: usize,
    pub median_us: f64,
    pub min_us: f64,
    pub plane_bytes: u64,
    pub scale_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn find(&self, path: BenchPath, bits: usize) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.path == path && e.bits == bits)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<13} {:<6} {:>3} {:>12} {:>12} {:>14} {:>12}",
            "shape", "path", "p", "median_us", "min_us", "plane_bytes", "scale_bytes"
        );
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<13} {:<6} {:>3} {:>12.1} {:>12.1} {:>14} {:>12}",
                format!("{}x{}", e.rows, e.cols),
                e.path.to_string(),
                e.bits,
                e.median_us,
                e.min_us,
                e.plane_bytes,
                e.scale_bytes
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("shape,path,p,median_us,min_us,plane_bytes,scale_bytes\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}x{},{},{},{:.3},{:.3},{},{}",
                e.rows, e.cols, e.path, e.bits, e.median_us, e.min_us, e.plane_bytes, e.scale_bytes
            );
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `f` `repeats` times after one excluded warm-up call.
fn time_repeats<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64, f64)> {
    let mut last = f()?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        last = f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((last, median(samples), min))
}

/// Median/min latency per (path, precision). With `dense` set, a dense `f32`
/// GEMV over the dequantized top precision is timed as a baseline.
pub fn bench(
    model: &MultiPrecisionModel,
    precisions: &[usize],
    x: &[f32],
    repeats: usize,
    paths: &[GemvPath],
    dense: bool,
    opts: ExecOptions,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let (rows, cols) = (model.rows(), model.cols());
    let mut report = BenchReport::default();
    for &path in paths {
        for &p in precisions {
            let ((_, stats), median_us, min_us) = time_repeats(repeats, || gemv(model, p, x, path, opts))?;
            report.entries.push(BenchEntry {
                rows,
                cols,
                path: match path {
                    GemvPath::Naive => BenchPath::Naive,
                    GemvPath::Lut => BenchPath::Lut,
                },
                bits: p,
                median_us,
                min_us,
                plane_bytes: stats.plane_bytes_fetched,
                scale_bytes: stats.scale_bytes_fetched,
            });
        }
    }
    if dense {
        let w = model.view(model.p_high())?.dequantize();
        let (_, median_us, min_us) = time_repeats(repeats, || dense_gemv(&w, x, opts.parallel))?;
        report.entries.push(BenchEntry {
            rows,
            cols,
            path: BenchPath::Dense,
            bits: 32,
            median_us,
            min_us,
            plane_bytes: (rows * cols * 4) as u64,
            scale_bytes: 0,
        });
    }
    Ok(report)
}
