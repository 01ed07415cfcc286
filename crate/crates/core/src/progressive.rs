//! Multi-precision models built by progressive one-bit expansion.
//!
//! The base precision `p_low` is fit with the full alternating procedure. Each
//! higher precision `p` then freezes planes `1..p-1`, starts its scale set from
//! the previous one extended with `α_p = 0`, and runs `T` cycles of
//! {re-sign plane `p` from the residual, least-squares refit of all `p` scales}.

use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::bcq::{
    assemble, fit_row, pack_row_plane, to_f64, BitPlaneSet, QuantConfig, QuantView, RowFit, ScaleTensor, MAX_PLANES,
};
use crate::error::{Error, Result};
use crate::tensor_io::{GaussianStream, Matrix};

/// Shared bit-planes plus one scale set per precision in `[p_low, p_high]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPrecisionModel {
    planes: BitPlaneSet,
    scale_sets: Vec<ScaleTensor>,
    p_low: usize,
    p_high: usize,
    config: QuantConfig,
}

impl MultiPrecisionModel {
    pub fn from_parts(
        planes: BitPlaneSet,
        scale_sets: Vec<ScaleTensor>,
        p_low: usize,
        p_high: usize,
        config: QuantConfig,
    ) -> Result<Self> {
        check_range(p_low, p_high)?;
        config.validate()?;
        if planes.planes() != p_high {
            return Err(Error::Shape(format!("model at {p_high} bits carries {} planes", planes.planes())));
        }
        if scale_sets.len() != p_high - p_low + 1 {
            return Err(Error::Shape(format!("expected {} scale sets, got {}", p_high - p_low + 1, scale_sets.len())));
        }
        for (p, set) in (p_low..=p_high).zip(&scale_sets) {
            if set.planes() != p {
                return Err(Error::Shape(format!("scale set for {p} bits has {} planes", set.planes())));
            }
            // Validates rows, groups and mode against the planes.
            QuantView::new(&planes, set, p, config)?;
        }
        Ok(Self { planes, scale_sets, p_low, p_high, config })
    }

    pub fn p_low(&self) -> usize {
        self.p_low
    }

    pub fn p_high(&self) -> usize {
        self.p_high
    }

    pub fn precisions(&self) -> RangeInclusive<usize> {
        self.p_low..=self.p_high
    }

    pub fn config(&self) -> QuantConfig {
        self.config
    }

    pub fn rows(&self) -> usize {
        self.planes.rows()
    }

    pub fn cols(&self) -> usize {
        self.planes.cols()
    }

    pub fn groups(&self) -> usize {
        self.config.num_groups(self.cols())
    }

    pub fn bitplanes(&self) -> &BitPlaneSet {
        &self.planes
    }

    pub fn scale_sets(&self) -> &[ScaleTensor] {
        &self.scale_sets
    }

    fn check_precision(&self, p: usize) -> Result<usize> {
        if p < self.p_low || p > self.p_high {
            return Err(Error::PrecisionOutOfRange { p, low: self.p_low, high: self.p_high });
        }
        Ok(p - self.p_low)
    }

    pub fn scale_set(&self, p: usize) -> Result<&ScaleTensor> {
        Ok(&self.scale_sets[self.check_precision(p)?])
    }

    /// Replaces the scale set of precision `p`; planes and other sets are untouched.
    pub fn replace_scale_set(&mut self, p: usize, scales: ScaleTensor) -> Result<()> {
        let idx = self.check_precision(p)?;
        if scales.planes() != p {
            return Err(Error::Shape(format!("scale set for {p} bits has {} planes", scales.planes())));
        }
        QuantView::new(&self.planes, &scales, p, self.config)?;
        self.scale_sets[idx] = scales;
        Ok(())
    }

    /// Zero-copy pairing of planes `1..=p` with scale set `p`.
    pub fn view(&self, p: usize) -> Result<QuantView<'_>> {
        let idx = self.check_precision(p)?;
        QuantView::new(&self.planes, &self.scale_sets[idx], p, self.config)
    }

    /// Relative reconstruction error at every precision, ascending.
    pub fn relative_errors(&self, w: &Matrix) -> Result<Vec<(usize, f64)>> {
        self.precisions().map(|p| Ok((p, self.view(p)?.relative_error(w)?))).collect()
    }

    /// A model with random planes and positive, geometrically shrinking scales.
    /// Used for engine benchmarks where fitting time would dominate.
    pub fn synthetic(
        rows: usize,
        cols: usize,
        p_low: usize,
        p_high: usize,
        config: QuantConfig,
        seed: u64,
    ) -> Result<Self> {
        check_range(p_low, p_high)?;
        config.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty model {rows}x{cols}")));
        }
        let wpr = cols.div_ceil(32);
        let tail = match cols % 32 {
            0 => u32::MAX,
            used => (1u32 << used) - 1,
        };
        let total_rows = p_high * rows;
        let words: Vec<u32> = (0..total_rows)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut g = GaussianStream::new(seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                (0..wpr).map(move |i| {
                    let v = g.next_u64() as u32;
                    if i + 1 == wpr {
                        v & tail
                    } else {
                        v
                    }
                })
            })
            .collect();
        let planes = BitPlaneSet::from_words(p_high, rows, cols, words)?;
        let groups = config.num_groups(cols);
        let mut g = GaussianStream::new(seed.wrapping_add(1));
        let scale_sets = (p_low..=p_high)
            .map(|p| {
                let alpha = (0..p * rows * groups)
                    .map(|i| {
                        let plane = i / (rows * groups);
                        ((0.5 + g.uniform()) * 0.5f64.powi(plane as i32)) as f32
                    })
                    .collect();
                let offset = config
                    .mode
                    .has_offset()
                    .then(|| (0..rows * groups).map(|_| (0.1 * g.next_gaussian()) as f32).collect());
                ScaleTensor::from_parts(p, rows, groups, alpha, offset)
            })
            .collect::<Result<_>>()?;
        Self::from_parts(planes, scale_sets, p_low, p_high, config)
    }
}

fn check_range(p_low: usize, p_high: usize) -> Result<()> {
    if p_low == 0 || p_low > p_high || p_high > MAX_PLANES {
        return Err(Error::InvalidArgument(format!(
            "precision range {p_low}:{p_high} must satisfy 1 <= low <= high <= {MAX_PLANES}"
        )));
    }
    Ok(())
}

/// Incremental construction of a [`MultiPrecisionModel`].
///
/// Holds the model under construction exclusively. Planes below the current
/// precision are frozen: any write to them panics.
pub struct ModelBuilder<'w> {
    weights: &'w Matrix,
    planes: BitPlaneSet,
    scale_sets: Vec<ScaleTensor>,
    p_low: usize,
    p_high: usize,
    /// Precision fitted so far; planes `< fitted` are frozen.
    fitted: usize,
    config: QuantConfig,
}

impl<'w> ModelBuilder<'w> {
    /// Fits the base precision with greedy init plus `T` alternating cycles.
    pub fn new(weights: &'w Matrix, p_low: usize, p_high: usize, config: QuantConfig) -> Result<Self> {
        check_range(p_low, p_high)?;
        config.validate()?;
        let fits: Vec<RowFit> = (0..weights.rows())
            .into_par_iter()
            .map(|r| fit_row(&to_f64(weights.row(r)), p_low, &config).map(|(f, _)| f))
            .collect::<Result<_>>()?;
        let (base_planes, base_scales) = assemble(&fits, p_low, weights.cols(), &config);
        Ok(Self {
            weights,
            planes: base_planes.extended(p_high - p_low),
            scale_sets: vec![base_scales],
            p_low,
            p_high,
            fitted: p_low,
            config,
        })
    }

    /// Precision reached so far.
    pub fn precision(&self) -> usize {
        self.fitted
    }

    pub fn is_complete(&self) -> bool {
        self.fitted == self.p_high
    }

    /// Current planes, including not-yet-fitted (all-clear) ones.
    pub fn bitplanes(&self) -> &BitPlaneSet {
        &self.planes
    }

    pub fn view(&self, p: usize) -> Result<QuantView<'_>> {
        if p < self.p_low || p > self.fitted {
            return Err(Error::PrecisionOutOfRange { p, low: self.p_low, high: self.fitted });
        }
        QuantView::new(&self.planes, &self.scale_sets[p - self.p_low], p, self.config)
    }

    fn write_plane_row(&mut self, plane: usize, row: usize, words: &[u32]) {
        assert!(
            plane >= self.fitted,
            "attempt to modify frozen bit-plane {} (planes below {} are frozen)",
            plane + 1,
            self.fitted + 1
        );
        self.planes.set_row_words(plane, row, words);
    }

    /// Fits the next precision `p = precision() + 1`. Only plane `p` and scale
    /// set `p` are written.
    pub fn expand_step(&mut self) -> Result<usize> {
        if self.is_complete() {
            return Err(Error::InvalidArgument(format!("model already at {} bits", self.p_high)));
        }
        let p = self.fitted + 1;
        let new_plane = p - 1;
        let prev = self.view(self.fitted)?;
        let cfg = self.config;
        let w = self.weights;
        let fits: Vec<RowFit> = (0..w.rows())
            .into_par_iter()
            .map(|r| expand_row(&to_f64(w.row(r)), &RowFit::from_view(&prev, r, p - 1), p, &cfg))
            .collect();
        for (r, fit) in fits.iter().enumerate() {
            self.write_plane_row(new_plane, r, &pack_row_plane(fit, new_plane));
        }
        let (_, scales) = assemble(&fits, p, w.cols(), &cfg);
        self.scale_sets.push(scales);
        self.fitted = p;
        Ok(p)
    }

    pub fn finish(mut self) -> Result<MultiPrecisionModel> {
        while !self.is_complete() {
            self.expand_step()?;
        }
        MultiPrecisionModel::from_parts(self.planes, self.scale_sets, self.p_low, self.p_high, self.config)
    }
}

/// One row of an expansion step from precision `p − 1` to `p`.
fn expand_row(w: &[f64], prev: &RowFit, p: usize, cfg: &QuantConfig) -> RowFit {
    let groups = prev.offsets.len();
    let q_prev = p - 1;
    let bit = 1u32 << (p - 1);
    // [α₁ … α_{p−1}, 0]; the new plane starts all-clear.
    let mut extended = Vec::with_capacity(groups * p);
    for gr in 0..groups {
        extended.extend_from_slice(prev.group_alphas(gr, q_prev));
        extended.push(0.0);
    }
    let mut fit = RowFit {
        patterns: prev.patterns.iter().map(|&pat| pat & !bit).collect(),
        alphas: extended.clone(),
        offsets: prev.offsets.clone(),
        ridge: false,
    };
    for _ in 0..cfg.cycles {
        for gr in 0..groups {
            let b = cfg.group_bounds(w.len(), gr);
            let alphas = fit.group_alphas(gr, p).to_vec();
            let offset = fit.offsets[gr];
            for k in b {
                let residual = w[k] - crate::bcq::level_of(&alphas, offset, fit.patterns[k]);
                if residual >= 0.0 {
                    fit.patterns[k] |= bit;
                } else {
                    fit.patterns[k] &= !bit;
                }
            }
        }
        fit.ls_step(w, p, cfg, Some((&extended, &prev.offsets)));
    }
    fit
}

/// Base fit at `p_low`, then one-bit expansions up to `p_high`.
pub fn build_multiprecision(w: &Matrix, p_low: usize, p_high: usize, cfg: &QuantConfig) -> Result<MultiPrecisionModel> {
    ModelBuilder::new(w, p_low, p_high, *cfg)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcq::{alternate_fit, unpack_signs, Mode};
    use crate::tensor_io::random_gaussian;

    fn sym(g: usize, t: usize) -> QuantConfig {
        QuantConfig::new(g, Mode::Symmetric, t)
    }

    #[test]
    fn two_stage_trace_on_four_values() {
        let w = Matrix::new(1, 4, vec![3.0, 1.0, -1.0, -3.0]).unwrap();
        let builder = ModelBuilder::new(&w, 1, 2, sym(4, 1)).unwrap();
        assert_eq!(builder.view(1).unwrap().scales().group_alphas(0, 0, 1), vec![2.0]);
        let m = builder.finish().unwrap();
        let planes = m.bitplanes();
        assert_eq!(unpack_signs(planes.row_words(0, 0), 4), vec![1, 1, -1, -1]);
        assert_eq!(unpack_signs(planes.row_words(1, 0), 4), vec![1, -1, 1, -1]);
        assert_eq!(m.scale_set(1).unwrap().group_alphas(0, 0, 1), vec![2.0]);
        assert_eq!(m.scale_set(2).unwrap().group_alphas(0, 0, 2), vec![2.0, 1.0]);
        assert_eq!(m.view(2).unwrap().dequantize().data(), w.data());
        assert_eq!(m.view(1).unwrap().dequantize().data(), &[2.0, 2.0, -2.0, -2.0]);
    }

    #[test]
    fn degenerate_range_matches_alternate_fit() {
        let w = random_gaussian(16, 64, 3).unwrap();
        let cfg = QuantConfig::new(32, Mode::Asymmetric, 4);
        let m = build_multiprecision(&w, 2, 2, &cfg).unwrap();
        let qm = alternate_fit(&w, 2, &cfg).unwrap();
        assert_eq!(m.bitplanes(), &qm.bitplanes);
        assert_eq!(m.scale_set(2).unwrap(), &qm.scales);
    }

    #[test]
    fn zero_residual_gives_all_plus_plane_and_zero_scale() {
        let w = Matrix::new(1, 4, vec![3.0, 1.0, -1.0, -3.0]).unwrap();
        let mut b = ModelBuilder::new(&w, 2, 3, sym(4, 2)).unwrap();
        let before = b.view(2).unwrap().reconstruction_error(&w).unwrap();
        assert_eq!(before, 0.0);
        b.expand_step().unwrap();
        assert_eq!(unpack_signs(b.bitplanes().row_words(2, 0), 4), vec![1, 1, 1, 1]);
        let v = b.view(3).unwrap();
        assert_eq!(v.scales().alpha(2, 0, 0), 0.0);
        assert_eq!(v.reconstruction_error(&w).unwrap(), 0.0);
    }

    #[test]
    fn expansion_step_does_not_raise_error() {
        let w = random_gaussian(128, 128, 21).unwrap();
        let mut b = ModelBuilder::new(&w, 2, 3, QuantConfig::new(128, Mode::Asymmetric, 20)).unwrap();
        let before = b.view(2).unwrap().reconstruction_error(&w).unwrap();
        let frozen: Vec<Vec<u8>> = (0..2).map(|i| b.bitplanes().plane_bytes(i)).collect();
        b.expand_step().unwrap();
        let after = b.view(3).unwrap().reconstruction_error(&w).unwrap();
        assert!(after <= before, "{after} > {before}");
        for (i, bytes) in frozen.iter().enumerate() {
            assert_eq!(&b.bitplanes().plane_bytes(i), bytes);
        }
    }

    #[test]
    #[should_panic(expected = "frozen bit-plane")]
    fn writing_frozen_plane_panics() {
        let w = random_gaussian(2, 8, 1).unwrap();
        let mut b = ModelBuilder::new(&w, 2, 3, sym(8, 1)).unwrap();
        b.write_plane_row(0, 0, &[0]);
    }

    #[test]
    fn zero_cycles_leaves_new_plane_clear() {
        let w = random_gaussian(4, 32, 8).unwrap();
        let m = build_multiprecision(&w, 1, 2, &sym(32, 0)).unwrap();
        assert!(m.bitplanes().plane(1).iter().all(|&x| x == 0));
        let s = m.scale_set(2).unwrap();
        assert!((0..4).all(|r| s.alpha(1, r, 0) == 0.0));
    }

    #[test]
    fn precision_views() {
        let w = random_gaussian(8, 64, 2).unwrap();
        let m = build_multiprecision(&w, 2, 4, &QuantConfig::new(32, Mode::Asymmetric, 2)).unwrap();
        assert_eq!(m.view(2).unwrap().precision(), 2);
        assert_eq!(m.view(4).unwrap().precision(), 4);
        assert!(matches!(m.view(1), Err(Error::PrecisionOutOfRange { .. })));
        assert!(matches!(m.view(5), Err(Error::PrecisionOutOfRange { .. })));
        // Dense oracle straight from the stored planes and scales.
        let v = m.view(3).unwrap();
        let deq = v.dequantize();
        let s = m.scale_set(3).unwrap();
        for r in 0..8 {
            for k in 0..64 {
                let gr = k / 32;
                let mut x = s.offset(r, gr) as f64;
                for i in 0..3 {
                    x += s.alpha(i, r, gr) as f64 * m.bitplanes().code(i, r, k) as f64;
                }
                assert!((deq.get(r, k) as f64 - x).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn replacing_one_scale_set_leaves_others() {
        let w = random_gaussian(8, 64, 6).unwrap();
        let mut m = build_multiprecision(&w, 2, 4, &QuantConfig::new(32, Mode::Asymmetric, 2)).unwrap();
        let d2 = m.view(2).unwrap().dequantize();
        let d4 = m.view(4).unwrap().dequantize();
        let mut s3 = m.scale_set(3).unwrap().clone();
        s3.set_alpha(0, 0, 0, 100.0);
        m.replace_scale_set(3, s3).unwrap();
        assert_eq!(m.view(2).unwrap().dequantize(), d2);
        assert_eq!(m.view(4).unwrap().dequantize(), d4);
        assert!(m.replace_scale_set(3, m.scale_set(2).unwrap().clone()).is_err());
    }

    #[test]
    fn rejects_bad_ranges() {
        let w = random_gaussian(2, 8, 1).unwrap();
        assert!(build_multiprecision(&w, 3, 2, &sym(8, 1)).is_err());
        assert!(build_multiprecision(&w, 0, 2, &sym(8, 1)).is_err());
        assert!(build_multiprecision(&w, 2, 17, &sym(8, 1)).is_err());
    }

    #[test]
    fn synthetic_model_is_valid_and_deterministic() {
        let cfg = QuantConfig::new(128, Mode::Asymmetric, 0);
        let a = MultiPrecisionModel::synthetic(16, 300, 2, 4, cfg, 5).unwrap();
        let b = MultiPrecisionModel::synthetic(16, 300, 2, 4, cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.groups(), 3);
    }
}
