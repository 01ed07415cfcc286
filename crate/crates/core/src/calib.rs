//! Output-error refinement of one precision's scales.
//!
//! For activations `X` (`S × K`) the objective is `‖X·Wᵀ − X·Ŵ(α)ᵀ‖²_F` with
//! the bit-planes held fixed. `Ŵ` is linear in the scales, so each output row
//! is an independent linear least-squares problem over that row's `p·G` scales
//! (plus `G` offsets in asymmetric mode).

use rayon::prelude::*;

use crate::bcq::{level_of, to_f64, QuantConfig, QuantView, ScaleTensor};
use crate::error::{Error, Result};
use crate::progressive::MultiPrecisionModel;
use crate::solve::solve_normal;
use crate::tensor_io::Matrix;

pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// Halvings tried before a gradient step is abandoned.
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Solver {
    /// Closed-form per-row least squares; attains the global minimum.
    #[default]
    Exact,
    /// Full-batch gradient descent on the mean squared output error.
    /// A step that would raise a row's loss is retried at half the rate.
    GradientDescent { epochs: usize, learning_rate: f64 },
}

impl Solver {
    pub fn gradient_default() -> Self {
        Solver::GradientDescent { epochs: DEFAULT_EPOCHS, learning_rate: DEFAULT_LEARNING_RATE }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub scales: ScaleTensor,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Rows whose normal equations needed the ridge fallback (exact solver).
    pub ridge_rows: usize,
}

fn check_inputs(w: &Matrix, view: &QuantView<'_>, x: &Matrix) -> Result<()> {
    if w.rows() != view.rows() || w.cols() != view.cols() {
        return Err(Error::Shape(format!(
            "weights {}x{} vs model {}x{}",
            w.rows(),
            w.cols(),
            view.rows(),
            view.cols()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Shape(format!("activations have {} columns, weights {}", x.cols(), w.cols())));
    }
    Ok(())
}

/// `‖X·e‖²` for one error row `e`.
fn row_loss(x: &Matrix, e: &[f64]) -> f64 {
    (0..x.rows())
        .map(|s| {
            let y: f64 = x.row(s).iter().zip(e).map(|(&a, &b)| a as f64 * b).sum();
            y * y
        })
        .sum()
}

/// Row loss given scales laid out group-major (`alphas[gr·p + i]`).
fn row_loss_with(
    x: &Matrix,
    w: &[f64],
    patterns: &[u32],
    alphas: &[f32],
    offsets: &[f32],
    p: usize,
    cfg: &QuantConfig,
) -> f64 {
    let mut e = vec![0.0; w.len()];
    for (gr, &off) in offsets.iter().enumerate() {
        let a = &alphas[gr * p..(gr + 1) * p];
        for k in cfg.group_bounds(w.len(), gr) {
            e[k] = w[k] - level_of(a, off, patterns[k]);
        }
    }
    row_loss(x, &e)
}

/// Per-row calibration losses; their in-order sum is [`calibration_loss`].
fn row_losses(w: &Matrix, view: &QuantView<'_>, x: &Matrix) -> Vec<f64> {
    (0..w.rows())
        .into_par_iter()
        .map(|r| {
            let e: Vec<f64> = w.row(r).iter().zip(view.row_values(r)).map(|(&a, b)| a as f64 - b).collect();
            row_loss(x, &e)
        })
        .collect()
}

/// `‖X·Wᵀ − X·Ŵᵀ‖²_F` at the view's precision.
pub fn calibration_loss(w: &Matrix, view: &QuantView<'_>, x: &Matrix) -> Result<f64> {
    check_inputs(w, view, x)?;
    Ok(row_losses(w, view, x).iter().sum())
}

/// [`calibration_loss`] at precision `p` of a model.
pub fn model_calibration_loss(w: &Matrix, model: &MultiPrecisionModel, x: &Matrix, p: usize) -> Result<f64> {
    calibration_loss(w, &model.view(p)?, x)
}

struct RowProblem {
    /// `S × m` design, row-major.
    design: Vec<f64>,
    target: Vec<f64>,
    m: usize,
}

fn build_problem(x: &Matrix, w: &[f64], patterns: &[u32], p: usize, groups: usize, cfg: &QuantConfig) -> RowProblem {
    let offset_cols = if cfg.mode.has_offset() { groups } else { 0 };
    let m = p * groups + offset_cols;
    let s_count = x.rows();
    let mut design = vec![0.0; s_count * m];
    let mut target = vec![0.0; s_count];
    for s in 0..s_count {
        let xs = x.row(s);
        let row = &mut design[s * m..(s + 1) * m];
        for gr in 0..groups {
            for k in cfg.group_bounds(w.len(), gr) {
                let v = xs[k] as f64;
                let pat = patterns[k];
                for i in 0..p {
                    if pat >> i & 1 == 1 {
                        row[gr * p + i] += v;
                    } else {
                        row[gr * p + i] -= v;
                    }
                }
                if offset_cols > 0 {
                    row[p * groups + gr] += v;
                }
            }
        }
        target[s] = xs.iter().zip(w).map(|(&a, &b)| a as f64 * b).sum();
    }
    RowProblem { design, target, m }
}

impl RowProblem {
    fn normal_equations(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.m;
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for (row, &t) in self.design.chunks_exact(m).zip(&self.target) {
            for i in 0..m {
                if row[i] == 0.0 {
                    continue;
                }
                rhs[i] += row[i] * t;
                for j in 0..m {
                    gram[i * m + j] += row[i] * row[j];
                }
            }
        }
        (gram, rhs)
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        self.design
            .chunks_exact(self.m)
            .zip(&self.target)
            .map(|(row, &t)| t - row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

fn split_theta(
    theta: &[f64],
    p: usize,
    groups: usize,
    current_offsets: &[f32],
    has_offset: bool,
) -> (Vec<f32>, Vec<f32>) {
    let alphas = theta[..p * groups].iter().map(|&v| v as f32).collect();
    let offsets =
        if has_offset { theta[p * groups..].iter().map(|&v| v as f32).collect() } else { current_offsets.to_vec() };
    (alphas, offsets)
}

struct RowResult {
    alphas: Vec<f32>,
    offsets: Vec<f32>,
    ridge: bool,
}

fn refine_row(w: &[f64], view: &QuantView<'_>, row: usize, x: &Matrix, solver: Solver) -> RowResult {
    let p = view.precision();
    let cfg = view.config();
    let groups = view.groups();
    let has_offset = cfg.mode.has_offset();
    let patterns = view.bitplanes().row_patterns(row, p);
    let cur_alphas: Vec<f32> = (0..groups).flat_map(|gr| view.scales().group_alphas(row, gr, p)).collect();
    let cur_offsets: Vec<f32> = (0..groups).map(|gr| view.scales().offset(row, gr)).collect();
    let cur_loss = row_loss_with(x, w, &patterns, &cur_alphas, &cur_offsets, p, &cfg);

    let problem = build_problem(x, w, &patterns, p, groups, &cfg);
    let (theta, ridge) = match solver {
        Solver::Exact => {
            let (gram, rhs) = problem.normal_equations();
            let sol = solve_normal(&gram, &rhs, problem.m, x.rows() < problem.m);
            (sol.x, sol.ridge)
        }
        Solver::GradientDescent { epochs, learning_rate } => {
            let mut theta: Vec<f64> = cur_alphas.iter().map(|&v| v as f64).collect();
            if has_offset {
                theta.extend(cur_offsets.iter().map(|&v| v as f64));
            }
            let scale = 1.0 / (x.rows() as f64 * view.rows() as f64);
            let mse = |r: &[f64]| scale * r.iter().map(|v| v * v).sum::<f64>();
            let mut resid = problem.residual(&theta);
            let mut loss = mse(&resid);
            for _ in 0..epochs {
                let mut grad = vec![0.0; problem.m];
                for (row, &r) in problem.design.chunks_exact(problem.m).zip(&resid) {
                    for (g, &a) in grad.iter_mut().zip(row) {
                        *g -= 2.0 * scale * a * r;
                    }
                }
                let mut step = learning_rate;
                for _ in 0..MAX_BACKTRACKS {
                    let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
                    let trial_resid = problem.residual(&trial);
                    let trial_loss = mse(&trial_resid);
                    if trial_loss <= loss {
                        theta = trial;
                        resid = trial_resid;
                        loss = trial_loss;
                        break;
                    }
                    step *= 0.5;
                }
            }
            (theta, false)
        }
    };

    let (alphas, offsets) = split_theta(&theta, p, groups, &cur_offsets, has_offset);
    let finite = alphas.iter().chain(&offsets).all(|v| v.is_finite());
    let new_loss = if finite { row_loss_with(x, w, &patterns, &alphas, &offsets, p, &cfg) } else { f64::INFINITY };
    if new_loss <= cur_loss {
        RowResult { alphas, offsets, ridge }
    } else {
        RowResult { alphas: cur_alphas, offsets: cur_offsets, ridge }
    }
}

/// Refits scale set `p` against calibration activations `x`, planes fixed.
/// The returned set never has a higher calibration loss than the current one.
pub fn refine_scales(
    w: &Matrix,
    model: &MultiPrecisionModel,
    x: &Matrix,
    p: usize,
    solver: Solver,
) -> Result<RefineOutcome> {
    let view = model.view(p)?;
    refine_view(w, &view, x, solver)
}

/// As [`refine_scales`], on any view.
pub fn refine_view(w: &Matrix, view: &QuantView<'_>, x: &Matrix, solver: Solver) -> Result<RefineOutcome> {
    check_inputs(w, view, x)?;
    if let Solver::GradientDescent { learning_rate, .. } = solver {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {learning_rate}")));
        }
    }
    let p = view.precision();
    let groups = view.groups();
    let cfg = view.config();
    let results: Vec<RowResult> =
        (0..w.rows()).into_par_iter().map(|r| refine_row(&to_f64(w.row(r)), view, r, x, solver)).collect();

    let mut scales = view.scales().truncated(p);
    for (r, res) in results.iter().enumerate() {
        for gr in 0..groups {
            for i in 0..p {
                scales.set_alpha(i, r, gr, res.alphas[gr * p + i]);
            }
            scales.set_offset(r, gr, res.offsets[gr]);
        }
    }
    let loss_before = calibration_loss(w, view, x)?;
    let refined = QuantView::new(view.bitplanes(), &scales, p, cfg)?;
    let loss_after = calibration_loss(w, &refined, x)?;
    let ridge_rows = results.iter().filter(|r| r.ridge).count();
    Ok(RefineOutcome { scales, loss_before, loss_after, ridge_rows })
}
