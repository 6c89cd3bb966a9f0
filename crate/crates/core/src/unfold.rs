//! The unfolded network: per view and layer a representation (RF), dictionary
//! (CD) and noise (DN) module, followed by centroid-weighted fusion.

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, AdmmState};
use crate::error::{OvError, Result};
use crate::linalg::{normalized_gaussian_rows, spectral_norm_sym, POWER_MAX_ITER, POWER_TOL};
use crate::rng::{substream, Stream};
use crate::tensor::{
    group_soft_threshold_values, row_softmax_values, soft_threshold_values, GroupAxis, Matrix,
    Tape, Var,
};

/// Ridge added to `β` in the initial `M = (εI + βI)⁻¹`.
pub const M_INIT_RIDGE: f64 = 1e-6;
/// Lower clamp on the minimum centroid distance before inversion.
pub const MIN_CENTROID_DISTANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Dictionary frozen at `D_init` and no noise path.
    NoCdDn,
    /// Noise held at zero.
    NoDn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub r: Matrix,
    pub u: Matrix,
    pub m: Matrix,
    pub theta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub d_init: Matrix,
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldParams {
    pub views: Vec<ViewParams>,
    /// Inference-time fusion weights, set when training finishes.
    pub fusion_snapshot: Option<Vec<f64>>,
}

/// Number of matrices per layer in the flat parameter layout.
const PER_LAYER: usize = 5;

impl UnfoldParams {
    pub fn atoms(&self) -> usize {
        self.views[0].d_init.rows()
    }

    pub fn layer_count(&self) -> usize {
        self.views[0].layers.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.d_init.cols()).collect()
    }

    /// Shape checks against the data dimensions.
    pub fn validate(&self, view_dims: &[usize]) -> Result<()> {
        if self.views.is_empty() {
            return Err(OvError::State("parameters have no views".into()));
        }
        if view_dims != self.view_dims().as_slice() {
            return Err(OvError::Dimension {
                op: "view dims",
                left: (self.views.len(), 0),
                right: (view_dims.len(), 0),
            });
        }
        let c = self.atoms();
        let layers = self.layer_count();
        for v in &self.views {
            if v.d_init.rows() != c || v.layers.len() != layers {
                return Err(OvError::State(
                    "inconsistent per-view parameter shapes".into(),
                ));
            }
            for l in &v.layers {
                for m in [&l.r, &l.u, &l.m] {
                    if m.shape() != (c, c) {
                        return Err(OvError::Dimension {
                            op: "layer params",
                            left: m.shape(),
                            right: (c, c),
                        });
                    }
                }
                if !(l.theta >= 0.0 && l.rho >= 0.0) {
                    return Err(OvError::State(format!(
                        "negative threshold ({}, {})",
                        l.theta, l.rho
                    )));
                }
            }
        }
        if let Some(w) = &self.fusion_snapshot {
            if w.len() != self.views.len() {
                return Err(OvError::State(format!(
                    "snapshot has {} weights for {} views",
                    w.len(),
                    self.views.len()
                )));
            }
        }
        Ok(())
    }

    /// Per view: `d_init`, then per layer `r, u, m, theta, rho` (scalars as 1×1).
    pub fn flatten(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for v in &self.views {
            out.push(v.d_init.clone());
            for l in &v.layers {
                out.push(l.r.clone());
                out.push(l.u.clone());
                out.push(l.m.clone());
                out.push(Matrix::scalar(l.theta));
                out.push(Matrix::scalar(l.rho));
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (v, view) in self.views.iter().enumerate() {
            out.push(format!("view{v}.d_init"));
            for l in 0..view.layers.len() {
                for name in ["r", "u", "m", "theta", "rho"] {
                    out.push(format!("view{v}.layer{l}.{name}"));
                }
            }
        }
        out
    }

    fn flat_len(&self) -> usize {
        self.views.len() * (1 + PER_LAYER * self.layer_count())
    }

    /// Rebuilds parameters from the `flatten` layout, keeping the snapshot.
    pub fn unflatten(&self, flat: &[Matrix]) -> Result<UnfoldParams> {
        if flat.len() != self.flat_len() {
            return Err(OvError::State(format!(
                "expected {} parameter blocks, got {}",
                self.flat_len(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        let mut next = |shape: (usize, usize)| -> Result<Matrix> {
            let m = it.next().expect("length checked").clone();
            if m.shape() != shape {
                return Err(OvError::Dimension {
                    op: "unflatten",
                    left: m.shape(),
                    right: shape,
                });
            }
            Ok(m)
        };
        let c = self.atoms();
        let mut views = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let d_init = next(v.d_init.shape())?;
            let mut layers = Vec::with_capacity(v.layers.len());
            for _ in &v.layers {
                layers.push(LayerParams {
                    r: next((c, c))?,
                    u: next((c, c))?,
                    m: next((c, c))?,
                    theta: next((1, 1))?.item(),
                    rho: next((1, 1))?.item(),
                });
            }
            views.push(ViewParams { d_init, layers });
        }
        Ok(UnfoldParams {
            views,
            fusion_snapshot: self.fusion_snapshot.clone(),
        })
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars: Vec<Var> = self.flatten().into_iter().map(|m| tape.leaf(m)).collect();
        self.bind_vars(&vars)
    }

    /// Interprets leaves created from `flatten` order.
    pub fn bind_vars(&self, vars: &[Var]) -> ParamVars {
        let mut it = vars.iter().copied();
        let views = self
            .views
            .iter()
            .map(|v| ViewVars {
                d_init: it.next().expect("flat layout"),
                layers: v
                    .layers
                    .iter()
                    .map(|_| LayerVars {
                        r: it.next().expect("flat layout"),
                        u: it.next().expect("flat layout"),
                        m: it.next().expect("flat layout"),
                        theta: it.next().expect("flat layout"),
                        rho: it.next().expect("flat layout"),
                    })
                    .collect(),
            })
            .collect();
        ParamVars { views }
    }

    /// `Θ − η ∇` with thresholds clamped at zero afterwards.
    pub fn sgd_step(&self, grads: &[Matrix], eta: f64) -> Result<UnfoldParams> {
        let mut flat = self.flatten();
        if grads.len() != flat.len() {
            return Err(OvError::State(format!(
                "{} gradients for {} parameters",
                grads.len(),
                flat.len()
            )));
        }
        for (p, g) in flat.iter_mut().zip(grads) {
            p.axpy(-eta, g)?;
        }
        let mut out = self.unflatten(&flat)?;
        for v in &mut out.views {
            for l in &mut v.layers {
                l.theta = l.theta.max(0.0);
                l.rho = l.rho.max(0.0);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub r: Var,
    pub u: Var,
    pub m: Var,
    pub theta: Var,
    pub rho: Var,
}

#[derive(Debug, Clone)]
pub struct ViewVars {
    pub d_init: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Debug, Clone)]
pub struct ParamVars {
    pub views: Vec<ViewVars>,
}

impl ParamVars {
    /// Leaves in `flatten` order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for v in &self.views {
            out.push(v.d_init);
            for l in &v.layers {
                out.extend([l.r, l.u, l.m, l.theta, l.rho]);
            }
        }
        out
    }
}

/// Analytic parameters: `R = I − D Dᵀ/L`, `U = I/L`, `M = I/(β+ε)`,
/// `θ = α/L`, `ρ = γ/L` with `L = ‖D_init D_initᵀ‖₂`.
pub fn init_params(
    view_dims: &[usize],
    atoms: usize,
    layers: usize,
    cfg: &AdmmConfig,
    seed: u64,
    warm_start: Option<&AdmmState>,
) -> Result<UnfoldParams> {
    if view_dims.is_empty() || atoms == 0 || layers == 0 {
        return Err(OvError::Config(
            "need at least one view, atom and layer".into(),
        ));
    }
    let mut views = Vec::with_capacity(view_dims.len());
    for (v, &dim) in view_dims.iter().enumerate() {
        let d_init = match warm_start {
            Some(state) => {
                let d = state
                    .views
                    .get(v)
                    .ok_or_else(|| OvError::State(format!("warm start lacks view {v}")))?
                    .d
                    .clone();
                if d.shape() != (atoms, dim) {
                    return Err(OvError::Dimension {
                        op: "warm start",
                        left: d.shape(),
                        right: (atoms, dim),
                    });
                }
                d
            }
            None => {
                normalized_gaussian_rows(atoms, dim, &mut substream(seed, Stream::Init, v as u64))
            }
        };
        let mut l = spectral_norm_sym(&d_init.matmul_t(&d_init)?, POWER_TOL, POWER_MAX_ITER)?;
        if l == 0.0 {
            l = 1.0;
        }
        let layer = analytic_layer(&d_init, l, l, None, cfg)?;
        views.push(ViewParams {
            d_init,
            layers: vec![layer; layers],
        });
    }
    Ok(UnfoldParams {
        views,
        fusion_snapshot: None,
    })
}

/// Re-derives every layer's closed forms along a reference batch: layer `l`
/// takes `R, U, θ, ρ` from the dictionary it receives, and `M = (ZᵀZ + βI)⁻¹`
/// from the `Z` it produces there. `D_init` is kept.
pub fn calibrate_layers(
    params: &UnfoldParams,
    xs: &[Matrix],
    cfg: &AdmmConfig,
) -> Result<UnfoldParams> {
    params.validate(&xs.iter().map(Matrix::cols).collect::<Vec<_>>())?;
    let c = params.atoms();
    let mut views = Vec::with_capacity(xs.len());
    for (x, vp) in xs.iter().zip(&params.views) {
        let mut d = vp.d_init.clone();
        let mut z = Matrix::zeros(x.rows(), c);
        let mut e = Matrix::zeros(x.rows(), x.cols());
        let mut layers = Vec::with_capacity(vp.layers.len());
        for _ in &vp.layers {
            let mut l = spectral_norm_sym(&d.matmul_t(&d)?, POWER_TOL, POWER_MAX_ITER)?;
            if l == 0.0 {
                l = 1.0;
            }
            let mut layer = analytic_layer(&d, l, l, None, cfg)?;
            let residual = x.sub(&e)?;
            z = soft_threshold_values(
                &z.matmul(&layer.r)?
                    .add(&residual.matmul_t(&d)?.matmul(&layer.u)?)?,
                layer.theta,
            );
            let eye = Matrix::identity(c);
            layer.m = crate::linalg::solve_spd(&z.t_matmul(&z)?.add(&eye.scale(cfg.beta))?, &eye)?;
            d = layer.m.matmul(&z.t_matmul(&residual)?)?;
            e = group_soft_threshold_values(&x.sub(&z.matmul(&d)?)?, layer.rho, cfg.group_axis);
            layers.push(layer);
        }
        views.push(ViewParams {
            d_init: vp.d_init.clone(),
            layers,
        });
    }
    Ok(UnfoldParams {
        views,
        fusion_snapshot: params.fusion_snapshot.clone(),
    })
}

/// Closed-form layer parameters. `z` selects `M = (ZᵀZ + βI)⁻¹`; without it
/// `M = I/(β+ε)`. `l_z` scales `R, U, θ`; `l_e` scales `ρ`.
pub fn analytic_layer(
    d: &Matrix,
    l_z: f64,
    l_e: f64,
    z: Option<&Matrix>,
    cfg: &AdmmConfig,
) -> Result<LayerParams> {
    let c = d.rows();
    let eye = Matrix::identity(c);
    let m = match z {
        Some(z) => {
            let gram = z.t_matmul(z)?.add(&eye.scale(cfg.beta))?;
            crate::linalg::solve_spd(&gram, &eye)?
        }
        None => eye.scale(1.0 / (cfg.beta + M_INIT_RIDGE)),
    };
    Ok(LayerParams {
        r: eye.sub(&d.matmul_t(d)?.scale(1.0 / l_z))?,
        u: eye.scale(1.0 / l_z),
        m,
        theta: cfg.alpha / l_z,
        rho: if cfg.exact_e_prox {
            cfg.gamma
        } else {
            cfg.gamma / l_e
        },
    })
}

/// `S_θ(Z R + (X − E) Dᵀ U)`.
#[allow(clippy::too_many_arguments)]
pub fn rf_forward(
    t: &mut Tape,
    z: Var,
    x: Var,
    e: Var,
    d: Var,
    r: Var,
    u: Var,
    theta: Var,
) -> Result<Var> {
    let zr = t.matmul(z, r)?;
    let xe = t.sub(x, e)?;
    let dt = t.transpose(d);
    let xd = t.matmul(xe, dt)?;
    let xdu = t.matmul(xd, u)?;
    let pre = t.add(zr, xdu)?;
    t.soft_threshold(pre, theta)
}

/// `M Zᵀ (X − E)`.
pub fn cd_forward(t: &mut Tape, z: Var, x: Var, e: Var, m: Var) -> Result<Var> {
    let xe = t.sub(x, e)?;
    let zt = t.transpose(z);
    let zx = t.matmul(zt, xe)?;
    t.matmul(m, zx)
}

/// `P_ρ(X − Z D)`.
pub fn dn_forward(t: &mut Tape, x: Var, z: Var, d: Var, rho: Var, axis: GroupAxis) -> Result<Var> {
    let zd = t.matmul(z, d)?;
    let res = t.sub(x, zd)?;
    t.group_soft_threshold(res, rho, axis)
}

/// Centroid-separation weights: `d_v` is the smallest distance between class
/// centroids of view `v`, `d̄ = d⁻¹/‖d⁻¹‖₁`, `w = softmax(−d̄)`.
pub fn fusion_weights(zs: &[&Matrix], labels: &[usize]) -> Result<Vec<f64>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(OvError::Fusion(format!(
            "{} distinct labels; need 2",
            classes.len()
        )));
    }
    let mut inv = Vec::with_capacity(zs.len());
    for z in zs {
        if z.rows() != labels.len() {
            return Err(OvError::Dimension {
                op: "fusion_weights",
                left: z.shape(),
                right: (labels.len(), z.cols()),
            });
        }
        let mut centroids = vec![vec![0.0; z.cols()]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for (i, l) in labels.iter().enumerate() {
            let k = classes.binary_search(l).expect("label collected above");
            counts[k] += 1;
            for (c, x) in centroids[k].iter_mut().zip(z.row(i)) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= *n as f64);
        }
        let mut min = f64::INFINITY;
        for a in 0..centroids.len() {
            for b in a + 1..centroids.len() {
                let d = centroids[a]
                    .iter()
                    .zip(&centroids[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        inv.push(1.0 / min.max(MIN_CENTROID_DISTANCE));
    }
    Ok(weights_from_inverse_distances(&inv))
}

fn weights_from_inverse_distances(inv: &[f64]) -> Vec<f64> {
    let total: f64 = inv.iter().sum();
    let logits: Vec<f64> = inv.iter().map(|x| -x / total).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / s).collect()
}

/// Where fusion weights come from.
#[derive(Debug, Clone, Copy)]
pub enum Fusion<'a> {
    /// Computed from the batch labels (falls back to uniform with < 2 labels).
    Labels(&'a [usize]),
    Fixed(&'a [f64]),
    Uniform,
    /// The trained snapshot stored in the parameters.
    Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub ablation: Ablation,
    pub group_axis: GroupAxis,
    pub record_trace: bool,
    /// `Some(β)`: the CD step uses `(ZᵀZ + βI)⁻¹` of the current `Z`, held
    /// constant in the graph, in place of the learned `M`.
    #[serde(default)]
    pub refit_m: Option<f64>,
}

/// Values after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub z: Vec<Matrix>,
    pub d: Vec<Matrix>,
    pub e: Vec<Matrix>,
    pub fused: Matrix,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fused: Var,
    pub view_z: Vec<Var>,
    pub weights: Vec<f64>,
    pub trace: Vec<LayerState>,
}

fn resolve_weights(fusion: Fusion<'_>, params: &UnfoldParams, zs: &[&Matrix]) -> Result<Vec<f64>> {
    let v = zs.len();
    let w = match fusion {
        Fusion::Labels(labels) => match fusion_weights(zs, labels) {
            Ok(w) => w,
            Err(OvError::Fusion(msg)) => {
                log::warn!("fusion weights unavailable ({msg}); using uniform weights");
                vec![1.0 / v as f64; v]
            }
            Err(e) => return Err(e),
        },
        Fusion::Fixed(w) => w.to_vec(),
        Fusion::Uniform => vec![1.0 / v as f64; v],
        Fusion::Snapshot => params
            .fusion_snapshot
            .clone()
            .ok_or_else(|| OvError::State("inference requires a fusion weight snapshot".into()))?,
    };
    if w.len() != v {
        return Err(OvError::Fusion(format!(
            "{} weights for {v} views",
            w.len()
        )));
    }
    Ok(w)
}

fn weighted_sum(t: &mut Tape, zs: &[Var], w: &[f64]) -> Result<Var> {
    let mut acc = t.scale(zs[0], w[0]);
    for (&z, &wv) in zs.iter().zip(w).skip(1) {
        let s = t.scale(z, wv);
        acc = t.add(acc, s)?;
    }
    Ok(acc)
}

/// Runs all layers from `Z⁰ = 0`, `E⁰ = 0`, `D⁰ = D_init`. Fusion weights are
/// treated as constants of the graph.
pub fn forward(
    t: &mut Tape,
    params: &UnfoldParams,
    vars: &ParamVars,
    xs: &[Matrix],
    opts: ForwardOptions,
    fusion: Fusion<'_>,
) -> Result<ForwardOutput> {
    params.validate(&xs.iter().map(Matrix::cols).collect::<Vec<_>>())?;
    let n = xs[0].rows();
    if xs.iter().any(|x| x.rows() != n) {
        return Err(OvError::Dataset("views have different row counts".into()));
    }
    let c = params.atoms();
    let layers = params.layer_count();

    let mut zs = Vec::with_capacity(xs.len());
    let mut ds = Vec::with_capacity(xs.len());
    let mut es = Vec::with_capacity(xs.len());
    let mut xv = Vec::with_capacity(xs.len());
    for (x, pv) in xs.iter().zip(&vars.views) {
        xv.push(t.constant(x.clone()));
        zs.push(t.constant(Matrix::zeros(n, c)));
        ds.push(pv.d_init);
        es.push(t.constant(Matrix::zeros(n, x.cols())));
    }

    let mut trace = Vec::new();
    for l in 0..layers {
        for v in 0..xs.len() {
            let lv = &vars.views[v].layers[l];
            let z = rf_forward(t, zs[v], xv[v], es[v], ds[v], lv.r, lv.u, lv.theta)?;
            if opts.ablation != Ablation::NoCdDn {
                let m = match opts.refit_m {
                    Some(beta) => {
                        let zv = t.value(z);
                        let eye = Matrix::identity(c);
                        let gram = zv.t_matmul(zv)?.add(&eye.scale(beta))?;
                        t.constant(crate::linalg::solve_spd(&gram, &eye)?)
                    }
                    None => lv.m,
                };
                ds[v] = cd_forward(t, z, xv[v], es[v], m)?;
            }
            if opts.ablation == Ablation::Full {
                es[v] = dn_forward(t, xv[v], z, ds[v], lv.rho, opts.group_axis)?;
            }
            zs[v] = z;
        }
        if opts.record_trace || l + 1 == layers {
            let zvals: Vec<&Matrix> = zs.iter().map(|&z| t.value(z)).collect();
            let w = resolve_weights(fusion, params, &zvals)?;
            if opts.record_trace {
                let fused = zvals
                    .iter()
                    .zip(&w)
                    .fold(Matrix::zeros(n, c), |acc, (z, &wv)| {
                        let mut acc = acc;
                        acc.axpy(wv, z).expect("shapes agree");
                        acc
                    });
                trace.push(LayerState {
                    z: zvals.iter().map(|&m| m.clone()).collect(),
                    d: ds.iter().map(|&d| t.value(d).clone()).collect(),
                    e: es.iter().map(|&e| t.value(e).clone()).collect(),
                    fused,
                    weights: w.clone(),
                });
            }
            if l + 1 == layers {
                let fused = weighted_sum(t, &zs, &w)?;
                return Ok(ForwardOutput {
                    fused,
                    view_z: zs,
                    weights: w,
                    trace,
                });
            }
        }
    }
    unreachable!("layer count validated as non-zero")
}

/// Forward pass without gradient bookkeeping, returning the fused matrix.
pub fn infer(
    params: &UnfoldParams,
    xs: &[Matrix],
    opts: ForwardOptions,
    fusion: Fusion<'_>,
) -> Result<Matrix> {
    let mut t = Tape::new();
    let flat: Vec<Var> = params
        .flatten()
        .into_iter()
        .map(|m| t.constant(m))
        .collect();
    let vars = params.bind_vars(&flat);
    let out = forward(&mut t, params, &vars, xs, opts, fusion)?;
    Ok(t.value(out.fused).clone())
}

/// Per-row argmax (ties to the smaller index) and its softmax probability.
pub fn predict(z: &Matrix) -> Vec<(usize, f64)> {
    let p = row_softmax_values(z);
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            (best, p[(i, best)])
        })
        .collect()
}
