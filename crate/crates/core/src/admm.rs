//! Alternating proximal solver for
//! `Σ_v ½‖X_v − Z_v D_v − E_v‖² + α‖Z_v‖₁ + (β/2)‖D_v‖² + γ‖E_v‖₂,₁`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OvError, Result};
use crate::linalg::{
    normalized_gaussian_rows, solve_spd, spectral_norm_sym, POWER_MAX_ITER, POWER_TOL,
};
use crate::rng::{substream, Stream};
use crate::tensor::{group_soft_threshold_values, soft_threshold_values, GroupAxis, Matrix};

/// Multiplier applied to the power-iteration estimate of `‖D Dᵀ‖₂`.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub max_iter: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Threshold the E-step at `γ` (its exact prox) instead of `γ / L`.
    pub exact_e_prox: bool,
    pub group_axis: GroupAxis,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            alpha: 0.01,
            beta: 0.1,
            gamma: 1.0,
            max_iter: 300,
            tol: 1e-8,
            seed: 0,
            exact_e_prox: false,
            group_axis: GroupAxis::Columns,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("tol", self.tol),
        ] {
            if !(v > 0.0) {
                return Err(OvError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Factors of one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewState {
    pub z: Matrix,
    pub d: Matrix,
    pub e: Matrix,
    /// Lipschitz constant for the current `d`.
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub views: Vec<ViewState>,
    /// Objective at the starting point followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// `‖D Dᵀ‖₂ · 1.01`; a zero dictionary yields 1.
pub fn lipschitz(d: &Matrix) -> Result<f64> {
    let ddt = d.matmul_t(d)?;
    let norm = spectral_norm_sym(&ddt, POWER_TOL, POWER_MAX_ITER)?;
    if norm == 0.0 {
        log::warn!("zero dictionary: using unit Lipschitz constant");
        return Ok(1.0);
    }
    Ok(norm * LIPSCHITZ_SAFETY)
}

/// Sum of group ℓ₂ norms along `axis`.
pub fn l21_norm(e: &Matrix, axis: GroupAxis) -> f64 {
    match axis {
        GroupAxis::Columns => e.col_norms().iter().sum(),
        GroupAxis::Rows => e.row_norms().iter().sum(),
    }
}

pub fn view_objective(s: &ViewState, x: &Matrix, cfg: &AdmmConfig) -> Result<f64> {
    let residual = x.sub(&s.z.matmul(&s.d)?)?.sub(&s.e)?;
    Ok(0.5 * residual.frobenius_sq()
        + cfg.alpha * s.z.l1_norm()
        + 0.5 * cfg.beta * s.d.frobenius_sq()
        + cfg.gamma * l21_norm(&s.e, cfg.group_axis))
}

pub fn objective(views: &[ViewState], xs: &[Matrix], cfg: &AdmmConfig) -> Result<f64> {
    check_views(views.len(), xs.len())?;
    views
        .iter()
        .zip(xs)
        .map(|(s, x)| view_objective(s, x, cfg))
        .sum()
}

fn check_views(states: usize, data: usize) -> Result<()> {
    if states != data {
        return Err(OvError::Dimension {
            op: "admm views",
            left: (states, 0),
            right: (data, 0),
        });
    }
    Ok(())
}

/// `S_{α/L}(Z (I − D Dᵀ/L) + (X − E) Dᵀ / L)`.
pub fn z_step(s: &ViewState, x: &Matrix, cfg: &AdmmConfig) -> Result<Matrix> {
    let l = s.lipschitz;
    let c = s.d.rows();
    let ddt = s.d.matmul_t(&s.d)?;
    let r = Matrix::identity(c).sub(&ddt.scale(1.0 / l))?;
    let a =
        s.z.matmul(&r)?
            .add(&x.sub(&s.e)?.matmul_t(&s.d)?.scale(1.0 / l))?;
    Ok(soft_threshold_values(&a, cfg.alpha / l))
}

/// Solves `(ZᵀZ + βI) D = Zᵀ (X − E)`.
pub fn d_step(s: &ViewState, x: &Matrix, cfg: &AdmmConfig) -> Result<Matrix> {
    let c = s.z.cols();
    let gram =
        s.z.t_matmul(&s.z)?
            .add(&Matrix::identity(c).scale(cfg.beta))?;
    let rhs = s.z.t_matmul(&x.sub(&s.e)?)?;
    solve_spd(&gram, &rhs)
}

/// Group shrinkage of `X − Z D` at `γ / L` (or `γ` with `exact_e_prox`).
pub fn e_step(s: &ViewState, x: &Matrix, cfg: &AdmmConfig) -> Result<Matrix> {
    let residual = x.sub(&s.z.matmul(&s.d)?)?;
    Ok(group_soft_threshold_values(
        &residual,
        e_threshold(s.lipschitz, cfg),
        cfg.group_axis,
    ))
}

pub fn e_threshold(lipschitz: f64, cfg: &AdmmConfig) -> f64 {
    if cfg.exact_e_prox {
        cfg.gamma
    } else {
        cfg.gamma / lipschitz
    }
}

/// One z → d → e sweep; the Lipschitz constant is refreshed after the d-step.
pub fn iterate_view(s: &mut ViewState, x: &Matrix, cfg: &AdmmConfig) -> Result<()> {
    s.z = z_step(s, x, cfg)?;
    s.d = d_step(s, x, cfg)?;
    s.lipschitz = lipschitz(&s.d)?;
    s.e = e_step(s, x, cfg)?;
    Ok(())
}

/// Zero codes and noise around the given dictionaries.
pub fn initial_state(xs: &[Matrix], dictionaries: Vec<Matrix>) -> Result<Vec<ViewState>> {
    check_views(dictionaries.len(), xs.len())?;
    xs.iter()
        .zip(dictionaries)
        .map(|(x, d)| {
            if d.cols() != x.cols() {
                return Err(OvError::Dimension {
                    op: "initial_state",
                    left: d.shape(),
                    right: x.shape(),
                });
            }
            Ok(ViewState {
                z: Matrix::zeros(x.rows(), d.rows()),
                e: Matrix::zeros(x.rows(), x.cols()),
                lipschitz: lipschitz(&d)?,
                d,
            })
        })
        .collect()
}

/// Gaussian dictionaries with unit rows, one sub-stream per view.
pub fn random_dictionaries(seed: u64, atoms: usize, dims: &[usize]) -> Vec<Matrix> {
    dims.iter()
        .enumerate()
        .map(|(v, &d)| {
            normalized_gaussian_rows(atoms, d, &mut substream(seed, Stream::Admm, v as u64))
        })
        .collect()
}

/// Worker count from `OPENVIEWER_THREADS` (default 1).
pub fn thread_budget() -> usize {
    std::env::var("OPENVIEWER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn solve(xs: &[Matrix], atoms: usize, cfg: &AdmmConfig) -> Result<AdmmState> {
    let dims: Vec<usize> = xs.iter().map(Matrix::cols).collect();
    solve_from(
        xs,
        initial_state(xs, random_dictionaries(cfg.seed, atoms, &dims))?,
        cfg,
    )
}

pub fn solve_from(xs: &[Matrix], mut views: Vec<ViewState>, cfg: &AdmmConfig) -> Result<AdmmState> {
    cfg.validate()?;
    let threads = thread_budget();
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| OvError::State(e.to_string()))?,
        )
    } else {
        None
    };

    let mut trace = vec![objective(&views, xs, cfg)?];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        match &pool {
            Some(p) => p.install(|| {
                views
                    .par_iter_mut()
                    .zip(xs.par_iter())
                    .try_for_each(|(s, x)| iterate_view(s, x, cfg))
            })?,
            None => {
                for (s, x) in views.iter_mut().zip(xs) {
                    iterate_view(s, x, cfg)?;
                }
            }
        }
        iterations += 1;
        let prev = *trace.last().expect("trace starts non-empty");
        let cur = objective(&views, xs, cfg)?;
        if !cur.is_finite() {
            return Err(OvError::Numeric(format!(
                "objective became {cur} at iteration {iterations}"
            )));
        }
        trace.push(cur);
        if (prev - cur).abs() < cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(AdmmState {
        views,
        objective_trace: trace,
        iterations,
    })
}

/// True when no trace step rises by more than `rel_tol · |previous|`.
pub fn trace_non_increasing(trace: &[f64], rel_tol: f64) -> bool {
    trace
        .windows(2)
        .all(|w| w[1] <= w[0] + rel_tol * w[0].abs())
}

/// `‖X − Z D − E‖_F / ‖X‖_F` pooled over views.
pub fn relative_reconstruction_error(state: &AdmmState, xs: &[Matrix]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, x) in state.views.iter().zip(xs) {
        num += x.sub(&s.z.matmul(&s.d)?)?.sub(&s.e)?.frobenius_sq();
        den += x.frobenius_sq();
    }
    Ok((num / den).sqrt())
}

/// F1 of the recovered noise groups (groups with nonzero norm in `e`)
/// against the planted group indices. Both sets empty scores 1.
pub fn noise_support_f1(e: &Matrix, planted: &[usize], axis: GroupAxis) -> f64 {
    let norms = match axis {
        GroupAxis::Columns => e.col_norms(),
        GroupAxis::Rows => e.row_norms(),
    };
    let predicted: Vec<usize> = (0..norms.len()).filter(|&j| norms[j] > 0.0).collect();
    let tp = predicted.iter().filter(|j| planted.contains(j)).count() as f64;
    let fp = predicted.len() as f64 - tp;
    let fn_ = planted.len() as f64 - tp;
    if tp + fp + fn_ == 0.0 {
        return 1.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}
