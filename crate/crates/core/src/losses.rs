//! Training losses on the fused representation: known-class cross-entropy
//! with a norm margin, the pseudo-unknown uniformity loss, center loss, and
//! the running center update.

use serde::{Deserialize, Serialize};

use crate::error::{OvError, Result};
use crate::tensor::{row_softmax_values, Matrix, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Norm margin `ξ` for known samples.
    pub xi: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub center_lr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            xi: 5.0,
            lambda1: 0.1,
            lambda2: 0.1,
            center_lr: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("xi", self.xi),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(OvError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.center_lr > 0.0 && self.center_lr <= 1.0) {
            return Err(OvError::Config(format!(
                "center_lr must lie in (0, 1], got {}",
                self.center_lr
            )));
        }
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(OvError::Domain(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        m[(i, l)] = 1.0;
    }
    Ok(m)
}

/// Mean cross-entropy plus `Σ max(ξ − ‖z_i‖, 0)²`.
pub fn known_loss(t: &mut Tape, z: Var, labels: &[usize], xi: f64) -> Result<Var> {
    let (n, c) = t.value(z).shape();
    if n == 0 || n != labels.len() {
        return Err(OvError::Domain(format!(
            "known loss needs matching non-empty labels ({n} rows, {} labels)",
            labels.len()
        )));
    }
    let mask = one_hot(labels, c)?;
    let logp = t.row_log_softmax(z);
    let picked = t.hadamard_const(logp, mask)?;
    let s = t.sum(picked);
    let ce = t.scale(s, -1.0 / n as f64);

    let norms = t.row_l2_norms(z);
    let neg = t.scale(norms, -1.0);
    let gap = t.shift(neg, xi);
    let hinge = t.relu(gap);
    let margin = t.frobenius_sq(hinge);
    t.add(ce, margin)
}

/// `−(1/C) Σ_i Σ_c log P(c | z̃_i) + Σ_i ‖z̃_i‖²`.
pub fn unknown_loss(t: &mut Tape, z: Var) -> Result<Var> {
    let c = t.value(z).cols();
    let logp = t.row_log_softmax(z);
    let s = t.sum(logp);
    let ce = t.scale(s, -1.0 / c as f64);
    let sq = t.frobenius_sq(z);
    t.add(ce, sq)
}

/// `½ Σ ‖z_i − c_{y_i}‖²` with the centers held constant.
pub fn center_loss(t: &mut Tape, z: Var, labels: &[usize], centers: &Matrix) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= centers.rows()) {
        return Err(OvError::Domain(format!("label {bad} has no center")));
    }
    let targets = t.constant(centers.select_rows(labels));
    let diff = t.sub(z, targets)?;
    let sq = t.frobenius_sq(diff);
    Ok(t.scale(sq, 0.5))
}

/// `c_j ← c_j − lr · Σ_{y_i=j}(c_j − z_i) / (1 + n_j)` for classes present.
pub fn update_centers(centers: &Matrix, z: &Matrix, labels: &[usize], lr: f64) -> Result<Matrix> {
    if z.rows() != labels.len() || z.cols() != centers.cols() {
        return Err(OvError::Dimension {
            op: "update_centers",
            left: z.shape(),
            right: centers.shape(),
        });
    }
    let k = centers.rows();
    let mut delta = Matrix::zeros(k, centers.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(OvError::Domain(format!("label {l} has no center")));
        }
        counts[l] += 1;
        for (j, d) in delta.row_mut(l).iter_mut().enumerate() {
            *d += centers[(l, j)] - z[(i, j)];
        }
    }
    let mut out = centers.clone();
    for (l, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        for j in 0..centers.cols() {
            out[(l, j)] -= lr * delta[(l, j)] / (1 + n) as f64;
        }
    }
    Ok(out)
}

/// Per-class means of `z`; classes without rows get a zero center.
pub fn class_means(z: &Matrix, labels: &[usize], classes: usize) -> Matrix {
    let mut out = Matrix::zeros(classes, z.cols());
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (o, x) in out.row_mut(l).iter_mut().zip(z.row(i)) {
            *o += x;
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        if n > 0 {
            out.row_mut(l).iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    out
}

/// Scalar values of the loss terms for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub known: f64,
    pub unknown: f64,
    pub center: f64,
}

/// `L_known + λ₁ L_unknown + λ₂ L_center` over the rows of a mixed batch.
/// `labels` of known rows index the `centers`; pseudo rows' labels are ignored.
pub fn total_loss(
    t: &mut Tape,
    z: Var,
    labels: &[usize],
    is_pseudo: &[bool],
    centers: &Matrix,
    cfg: &LossConfig,
) -> Result<(Var, LossParts)> {
    let n = t.value(z).rows();
    if labels.len() != n || is_pseudo.len() != n {
        return Err(OvError::Dimension {
            op: "total_loss",
            left: (n, 0),
            right: (labels.len(), is_pseudo.len()),
        });
    }
    let known_rows: Vec<usize> = (0..n).filter(|&i| !is_pseudo[i]).collect();
    let pseudo_rows: Vec<usize> = (0..n).filter(|&i| is_pseudo[i]).collect();
    if known_rows.is_empty() {
        return Err(OvError::Domain("batch has no known samples".into()));
    }
    let known_labels: Vec<usize> = known_rows.iter().map(|&i| labels[i]).collect();

    let zk = t.select_rows(z, &known_rows)?;
    let lk = known_loss(t, zk, &known_labels, cfg.xi)?;
    let lc = center_loss(t, zk, &known_labels, centers)?;
    let mut parts = LossParts {
        known: t.value(lk).item(),
        center: t.value(lc).item(),
        ..LossParts::default()
    };
    let weighted_center = t.scale(lc, cfg.lambda2);
    let mut total = t.add(lk, weighted_center)?;
    if !pseudo_rows.is_empty() {
        let zp = t.select_rows(z, &pseudo_rows)?;
        let lu = unknown_loss(t, zp)?;
        parts.unknown = t.value(lu).item();
        let weighted = t.scale(lu, cfg.lambda1);
        total = t.add(total, weighted)?;
    }
    parts.total = t.value(total).item();
    Ok((total, parts))
}

/// Upper bound on `‖∂L_total/∂Z‖_F` summed over the batch rows:
/// known rows contribute `(‖p̂‖ + ‖ŷ‖)/N_o + 2‖ẑ‖ + 2ξ + λ₂(‖ẑ‖ + ‖c_y‖ + φ_y)`
/// with `φ_y = center_lr / (1 + n_y)`, pseudo rows `λ₁(‖p̃‖/C + 1/C + 2‖z̃‖)`.
pub fn gradient_bound(
    z: &Matrix,
    labels: &[usize],
    is_pseudo: &[bool],
    centers: &Matrix,
    cfg: &LossConfig,
) -> f64 {
    let c = z.cols() as f64;
    let p = row_softmax_values(z);
    let norms = z.row_norms();
    let pnorms = p.row_norms();
    let n_known = is_pseudo.iter().filter(|&&b| !b).count() as f64;
    let mut per_class = vec![0usize; centers.rows()];
    for (i, &l) in labels.iter().enumerate() {
        if !is_pseudo[i] {
            per_class[l] += 1;
        }
    }
    let center_norms = centers.row_norms();
    let mut eps = 0.0;
    for i in 0..z.rows() {
        if is_pseudo[i] {
            eps += cfg.lambda1 * (pnorms[i] / c + 1.0 / c + 2.0 * norms[i]);
        } else {
            let y = labels[i];
            let phi = cfg.center_lr / (1 + per_class[y]) as f64;
            eps += (pnorms[i] + 1.0) / n_known + 2.0 * norms[i] + 2.0 * cfg.xi;
            eps += cfg.lambda2 * (norms[i] + center_norms[y] + phi);
        }
    }
    eps
}
