//! Linear-mode-connectivity sweeps against analytic losses.
//!
//! A sweep walks the segment `λ·θ_A + (1−λ)·θ_B` on a uniform grid, evaluates
//! the loss at every point, and reports the barrier: the highest loss on the
//! path minus the worse endpoint loss. Connectivity holds when the barrier is
//! at most ε. For the built-in convex losses the barrier is never positive.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{decode_f32, CheckpointHandle};

/// Default ε for self-tests on convex oracles.
pub const DEFAULT_EPSILON: f64 = 1e-9;
/// Slack allowed when checking that a quadratic matrix is PSD.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Positive semidefinite matrix of a quadratic loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuadraticMatrix {
    /// Row-major square matrix.
    Dense(Vec<Vec<f64>>),
    Diagonal(Vec<f64>),
    /// `diag(diagonal) + factorᵀ·factor`, with `factor` given as rows.
    LowRank {
        diagonal: Vec<f64>,
        factor: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossOracle {
    /// `L(θ) = (θ−c)ᵀ A (θ−c)`.
    Quadratic {
        center: Vec<f64>,
        matrix: QuadraticMatrix,
    },
    /// `L(θ) = ‖Xθ − y‖²`, `x` given as rows.
    LeastSquares { x: Vec<Vec<f64>>, y: Vec<f64> },
    /// Externally measured `(λ, loss)` pairs along a path.
    CustomGrid { points: Vec<(f64, f64)> },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorization of `A + tol·I`; success means A is PSD within `tol`.
fn is_psd(a: &[Vec<f64>], tol: f64) -> bool {
    let n = a.len();
    let mut l = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j] + if i == j { tol } else { 0.0 };
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    true
}

impl QuadraticMatrix {
    pub fn dim(&self) -> usize {
        match self {
            QuadraticMatrix::Dense(rows) => rows.len(),
            QuadraticMatrix::Diagonal(d) => d.len(),
            QuadraticMatrix::LowRank { diagonal, .. } => diagonal.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            QuadraticMatrix::Dense(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n || !finite(r)) {
                    return bad("dense matrix must be square and finite".into());
                }
                for (i, row) in rows.iter().enumerate() {
                    for (j, &x) in row.iter().enumerate().take(i) {
                        let y = rows[j][i];
                        let scale = x.abs().max(y.abs()).max(1.0);
                        if (x - y).abs() > PSD_TOLERANCE * scale {
                            return bad(format!("matrix is not symmetric at ({i}, {j})"));
                        }
                    }
                }
                if !is_psd(rows, PSD_TOLERANCE) {
                    return bad("matrix is not positive semidefinite".into());
                }
            }
            QuadraticMatrix::Diagonal(d) => {
                if !finite(d) || d.iter().any(|x| *x < -PSD_TOLERANCE) {
                    return bad("diagonal entries must be finite and non-negative".into());
                }
            }
            QuadraticMatrix::LowRank { diagonal, factor } => {
                if !finite(diagonal) || diagonal.iter().any(|x| *x < -PSD_TOLERANCE) {
                    return bad("diagonal entries must be finite and non-negative".into());
                }
                if factor
                    .iter()
                    .any(|r| r.len() != diagonal.len() || !finite(r))
                {
                    return bad("factor rows must match the dimension and be finite".into());
                }
            }
        }
        Ok(())
    }

    /// `rᵀ A r`.
    fn quad_form(&self, r: &[f64]) -> f64 {
        match self {
            QuadraticMatrix::Dense(rows) => {
                rows.iter().zip(r).map(|(row, ri)| ri * dot(row, r)).sum()
            }
            QuadraticMatrix::Diagonal(d) => d.iter().zip(r).map(|(di, ri)| di * ri * ri).sum(),
            QuadraticMatrix::LowRank { diagonal, factor } => {
                let diag: f64 = diagonal.iter().zip(r).map(|(di, ri)| di * ri * ri).sum();
                diag + factor.iter().map(|b| dot(b, r).powi(2)).sum::<f64>()
            }
        }
    }
}

impl LossOracle {
    pub fn quadratic(center: Vec<f64>, matrix: QuadraticMatrix) -> Result<Self> {
        let o = LossOracle::Quadratic { center, matrix };
        o.validate()?;
        Ok(o)
    }

    pub fn least_squares(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let o = LossOracle::LeastSquares { x, y };
        o.validate()?;
        Ok(o)
    }

    pub fn custom_grid(points: Vec<(f64, f64)>) -> Result<Self> {
        let o = LossOracle::CustomGrid { points };
        o.validate()?;
        Ok(o)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let o: LossOracle =
            serde_json::from_str(text).map_err(|e| Error::json("loss oracle", e))?;
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossOracle::Quadratic { center, matrix } => {
                if center.len() != matrix.dim() {
                    return Err(Error::InvalidArgument(format!(
                        "center has dimension {}, matrix {}",
                        center.len(),
                        matrix.dim()
                    )));
                }
                matrix.validate()
            }
            LossOracle::LeastSquares { x, y } => {
                if x.len() != y.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} rows but {} targets",
                        x.len(),
                        y.len()
                    )));
                }
                let n = x.first().map_or(0, Vec::len);
                if x.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidArgument(
                        "design matrix rows differ in length".into(),
                    ));
                }
                Ok(())
            }
            LossOracle::CustomGrid { points } => check_table(points),
        }
    }

    /// Parameter dimension, or `None` for a custom grid.
    pub fn dim(&self) -> Option<usize> {
        match self {
            LossOracle::Quadratic { center, .. } => Some(center.len()),
            LossOracle::LeastSquares { x, .. } => Some(x.first().map_or(0, Vec::len)),
            LossOracle::CustomGrid { .. } => None,
        }
    }
}

fn check_table(points: &[(f64, f64)]) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(format!("custom grid: {m}")));
    if points.len() < 2 {
        return bad("needs at least two points");
    }
    if points[0].0 != 0.0 || points[points.len() - 1].0 != 1.0 {
        return bad("must start at λ = 0 and end at λ = 1");
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return bad("λ values must be strictly increasing");
    }
    if points.iter().any(|(l, v)| !l.is_finite() || !v.is_finite()) {
        return bad("values must be finite");
    }
    Ok(())
}

/// Exact analytic loss at `theta`, in F64.
pub fn loss_eval(oracle: &LossOracle, theta: &[f64]) -> Result<f64> {
    let check = |n: usize| {
        if theta.len() == n {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "theta has dimension {}, oracle expects {n}",
                theta.len()
            )))
        }
    };
    match oracle {
        LossOracle::Quadratic { center, matrix } => {
            check(center.len())?;
            let r: Vec<f64> = theta.iter().zip(center).map(|(t, c)| t - c).collect();
            Ok(matrix.quad_form(&r).max(0.0))
        }
        LossOracle::LeastSquares { x, y } => {
            check(x.first().map_or(0, Vec::len))?;
            Ok(x.iter()
                .zip(y)
                .map(|(row, yi)| (dot(row, theta) - yi).powi(2))
                .sum())
        }
        LossOracle::CustomGrid { .. } => Err(Error::InvalidArgument(
            "a custom grid oracle is indexed by λ, not by parameters".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// λ values; λ = 1 is θ_A, λ = 0 is θ_B.
    pub grid: Vec<f64>,
    pub losses: Vec<f64>,
    /// `(L(θ_A), L(θ_B))`.
    pub endpoints: (f64, f64),
    pub barrier: f64,
    pub epsilon: f64,
    pub epsilon_pass: bool,
}

impl SweepReport {
    fn assemble(grid: Vec<f64>, losses: Vec<f64>, epsilon: f64) -> Self {
        let loss_b = losses[0];
        let loss_a = losses[losses.len() - 1];
        let peak = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let barrier = peak - loss_a.max(loss_b);
        SweepReport {
            grid,
            losses,
            endpoints: (loss_a, loss_b),
            barrier,
            epsilon,
            epsilon_pass: barrier <= epsilon,
        }
    }

    /// `lambda,loss` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,loss\n");
        for (l, v) in self.grid.iter().zip(&self.losses) {
            let _ = writeln!(out, "{l},{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>10}  {:>24}", "lambda", "loss");
        for (l, v) in self.grid.iter().zip(&self.losses) {
            let _ = writeln!(out, "{l:>10.6}  {v:>24.12e}");
        }
        let _ = writeln!(
            out,
            "L(theta_A) = {:e}  L(theta_B) = {:e}",
            self.endpoints.0, self.endpoints.1
        );
        let _ = writeln!(
            out,
            "barrier = {:e}  epsilon = {:e}  {}",
            self.barrier,
            self.epsilon,
            if self.epsilon_pass { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Uniform grid `i / (points − 1)`. Refining by an integer factor reproduces
/// the coarse points bit-for-bit.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    let last = (points - 1) as f64;
    (0..points).map(|i| i as f64 / last).collect()
}

/// Sweeps the segment between `theta_a` (λ = 1) and `theta_b` (λ = 0).
/// For a custom grid oracle the supplied table is the sweep and the parameter
/// vectors are ignored.
pub fn lmc_sweep(
    theta_a: &[f64],
    theta_b: &[f64],
    oracle: &LossOracle,
    grid_points: usize,
    epsilon: f64,
) -> Result<SweepReport> {
    if let LossOracle::CustomGrid { points } = oracle {
        return sweep_from_table(points, epsilon);
    }
    if grid_points < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 points, got {grid_points}"
        )));
    }
    if theta_a.len() != theta_b.len() {
        return Err(Error::InvalidArgument(format!(
            "endpoint dimensions differ: {} vs {}",
            theta_a.len(),
            theta_b.len()
        )));
    }
    let grid = uniform_grid(grid_points);
    let losses = grid
        .par_iter()
        .map(|&lam| {
            // Endpoints use the inputs directly so they match loss_eval exactly;
            // the b + λ(a − b) form keeps a constant path exactly constant.
            if lam == 1.0 {
                loss_eval(oracle, theta_a)
            } else if lam == 0.0 {
                loss_eval(oracle, theta_b)
            } else {
                let theta: Vec<f64> = theta_a
                    .iter()
                    .zip(theta_b)
                    .map(|(a, b)| b + lam * (a - b))
                    .collect();
                loss_eval(oracle, &theta)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SweepReport::assemble(grid, losses, epsilon))
}

/// Barrier logic over externally measured `(λ, loss)` pairs.
pub fn sweep_from_table(points: &[(f64, f64)], epsilon: f64) -> Result<SweepReport> {
    check_table(points)?;
    let (grid, losses) = points.iter().copied().unzip();
    Ok(SweepReport::assemble(grid, losses, epsilon))
}

/// Float tensors of a checkpoint concatenated in ascending name order.
pub fn flatten_checkpoint(handle: &CheckpointHandle) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(handle.total_params() as usize);
    for meta in handle.tensors().filter(|m| m.dtype.is_float()) {
        let block = handle.read_tensor(&meta.name)?;
        out.extend(decode_f32(&block)?.into_iter().map(f64::from));
    }
    Ok(out)
}
