//! Small dense normal-equation solves shared by the scale fitters.

use nalgebra::{DMatrix, DVector};

/// Relative ridge weight applied when the Gram matrix is singular or
/// underdetermined: `λ = RIDGE_REL · trace(G) / dim`.
pub(crate) const RIDGE_REL: f64 = 1e-8;

/// Smallest acceptable ratio between the smallest and largest squared
/// Cholesky pivots before the system is treated as singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-12;

pub(crate) struct Solution {
    pub x: Vec<f64>,
    pub ridge: bool,
}

/// Solves `gram · x = rhs` for symmetric positive semi-definite `gram`
/// (row-major, `dim × dim`). Falls back to a ridge-regularized solve when the
/// system is singular, numerically near-singular, or `force_ridge` is set.
pub(crate) fn solve_normal(gram: &[f64], rhs: &[f64], dim: usize, force_ridge: bool) -> Solution {
    debug_assert_eq!(gram.len(), dim * dim);
    debug_assert_eq!(rhs.len(), dim);
    let g = DMatrix::from_row_slice(dim, dim, gram);
    let b = DVector::from_column_slice(rhs);

    if !force_ridge {
        if let Some(chol) = g.clone().cholesky() {
            let l = chol.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..dim {
                let d = l[(i, i)] * l[(i, i)];
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if hi > 0.0 && lo / hi > PIVOT_RATIO_FLOOR {
                let x = chol.solve(&b);
                if x.iter().all(|v| v.is_finite()) {
                    return Solution { x: x.as_slice().to_vec(), ridge: false };
                }
            }
        }
    }

    let trace: f64 = (0..dim).map(|i| g[(i, i)]).sum();
    let lambda = if trace > 0.0 { RIDGE_REL * trace / dim as f64 } else { RIDGE_REL };
    let mut reg = g;
    for i in 0..dim {
        reg[(i, i)] += lambda;
    }
    let x = match reg.clone().cholesky() {
        Some(chol) => chol.solve(&b),
        // Still indefinite from round-off: the pseudo-inverse is the last resort.
        None => reg.pseudo_inverse(1e-12).map(|pinv| pinv * &b).unwrap_or_else(|_| DVector::zeros(dim)),
    };
    let x = if x.iter().all(|v| v.is_finite()) { x.as_slice().to_vec() } else { vec![0.0; dim] };
    Solution { x, ridge: true }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_posed_system() {
        let s = solve_normal(&[2.0, 0.0, 0.0, 2.0], &[6.0, 4.0], 2, false);
        assert!(!s.ridge);
        assert!((s.x[0] - 3.0).abs() < 1e-12 && (s.x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_system_uses_ridge() {
        // Duplicate regressors: [[g, g], [g, g]].
        let s = solve_normal(&[4.0, 4.0, 4.0, 4.0], &[8.0, 8.0], 2, false);
        assert!(s.ridge);
        assert!((s.x[0] + s.x[1] - 2.0).abs() < 1e-6);
    }
}
