//! Open-set scoring, OSCR curves, and diagnostics of the unfolded layers.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::dataset::{make_batches, Batch, MultiViewDataset, OpennessSplit};
use crate::error::{OvError, Result};
use crate::linalg::spectral_norm;
use crate::losses::{class_means, gradient_bound, total_loss, LossConfig};
use crate::pseudo::{generate_pseudo, MixConfig};
use crate::rng::{substream, Stream};
use crate::synth::{generate, SynthSpec};
use crate::tensor::{finite_diff_check, soft_threshold_values, Matrix, Tape};
use crate::trainer::{infer_chunked, BoundRecord, Checkpoint};
use crate::unfold::{
    calibrate_layers, forward, infer, init_params, predict, ForwardOptions, Fusion, UnfoldParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Largest softmax probability.
    #[default]
    MaxSoftmax,
    /// `‖z‖ / (1 + ‖z‖)` of the fused row.
    LogitNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub index: usize,
    /// Known-class index.
    pub predicted: usize,
    pub confidence: f64,
    /// Dataset label.
    pub label: usize,
    /// Known-class index of the label, `None` for unknown classes.
    pub truth: Option<usize>,
}

impl ScoredPrediction {
    pub fn is_unknown(&self) -> bool {
        self.truth.is_none()
    }

    pub fn is_correct(&self) -> bool {
        self.truth == Some(self.predicted)
    }
}

/// Scores the split's test rows with the checkpoint's snapshot weights.
/// Rows are pushed through in chunks of the training forward size.
pub fn score_test_set(
    checkpoint: &Checkpoint,
    dataset: &MultiViewDataset,
    split: &OpennessSplit,
    mode: ScoreMode,
) -> Result<(Vec<ScoredPrediction>, Matrix)> {
    if checkpoint.known_classes != split.known_classes {
        return Err(OvError::Dimension {
            op: "known classes",
            left: (checkpoint.known_classes.len(), 0),
            right: (split.known_classes.len(), 0),
        });
    }
    split.validate(dataset)?;
    let data = checkpoint.prepare(dataset)?;
    let cfg = &checkpoint.config;
    let z = infer_chunked(
        &checkpoint.params,
        &data.views,
        &split.test_idx,
        cfg.forward_rows(),
        cfg.forward_options(),
        Fusion::Snapshot,
    )?;
    let norms = z.row_norms();
    let preds = predict(&z)
        .into_iter()
        .zip(&split.test_idx)
        .enumerate()
        .map(|(r, ((predicted, p), &index))| ScoredPrediction {
            index,
            predicted,
            confidence: match mode {
                ScoreMode::MaxSoftmax => p,
                ScoreMode::LogitNorm => norms[r] / (1.0 + norms[r]),
            },
            label: dataset.labels[index],
            truth: split.known_index(dataset.labels[index]),
        })
        .collect();
    Ok((preds, z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscrPoint {
    pub threshold: f64,
    pub ccr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscrCurve {
    /// Sorted by threshold, highest first.
    pub points: Vec<OscrPoint>,
}

impl OscrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,ccr,fpr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.ccr, p.fpr));
        }
        s
    }
}

/// One point per distinct confidence: CCR counts correct knowns at or above
/// the threshold over all knowns, FPR counts unknowns at or above it over all
/// unknowns.
pub fn oscr_curve(preds: &[ScoredPrediction]) -> Result<OscrCurve> {
    let n_known = preds.iter().filter(|p| !p.is_unknown()).count();
    let n_unknown = preds.len() - n_known;
    if n_known == 0 || n_unknown == 0 {
        return Err(OvError::Metric(format!(
            "OSCR needs known and unknown samples ({n_known} known, {n_unknown} unknown)"
        )));
    }
    if let Some(p) = preds.iter().find(|p| !p.confidence.is_finite()) {
        return Err(OvError::Metric(format!(
            "non-finite confidence for sample {}",
            p.index
        )));
    }
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));

    let mut points = Vec::new();
    let (mut correct, mut false_pos) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let tau = order[k].confidence;
        while k < order.len() && order[k].confidence == tau {
            let p = order[k];
            if p.is_unknown() {
                false_pos += 1;
            } else if p.is_correct() {
                correct += 1;
            }
            k += 1;
        }
        points.push(OscrPoint {
            threshold: tau,
            ccr: correct as f64 / n_known as f64,
            fpr: false_pos as f64 / n_unknown as f64,
        });
    }
    Ok(OscrCurve { points })
}

/// Largest CCR among points with FPR ≤ `target`, or 0 if there is none.
pub fn ccr_at_fpr(curve: &OscrCurve, target: f64) -> Result<f64> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(OvError::Metric(format!(
            "target FPR {target} outside (0, 1]"
        )));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.fpr <= target)
        .map(|p| p.ccr)
        .fold(0.0, f64::max))
}

/// FPR budgets reported in evaluation summaries.
pub const REPORT_FPRS: [f64; 5] = [0.005, 0.01, 0.05, 0.1, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub score_mode: ScoreMode,
    pub known_test: usize,
    pub unknown_test: usize,
    pub closed_set_accuracy: f64,
    /// `(fpr, ccr)` pairs.
    pub ccr_at_fpr: Vec<(f64, f64)>,
}

pub fn summarize(
    preds: &[ScoredPrediction],
    curve: &OscrCurve,
    mode: ScoreMode,
) -> Result<EvalSummary> {
    let known: Vec<&ScoredPrediction> = preds.iter().filter(|p| !p.is_unknown()).collect();
    let correct = known.iter().filter(|p| p.is_correct()).count();
    Ok(EvalSummary {
        score_mode: mode,
        known_test: known.len(),
        unknown_test: preds.len() - known.len(),
        closed_set_accuracy: if known.is_empty() {
            0.0
        } else {
            correct as f64 / known.len() as f64
        },
        ccr_at_fpr: REPORT_FPRS
            .iter()
            .map(|&f| Ok((f, ccr_at_fpr(curve, f)?)))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub view: usize,
    pub layer: usize,
    pub r_norm: f64,
    pub trials: usize,
    /// Largest `‖φ(Z) − φ(Z′)‖ / ‖Z − Z′‖` seen.
    pub max_ratio: f64,
    /// Every pair satisfied `‖φ(Z) − φ(Z′)‖ ≤ ‖R‖₂ ‖Z − Z′‖ + 1e-9`.
    pub bound_holds: bool,
    /// `‖R‖₂ < 1`.
    pub contractive: bool,
}

/// Checks `φ(Z) = S_θ(Z R + B)` against its Lipschitz bound `‖R‖₂` on random
/// pairs, with `B = X D_initᵀ U` for a random `X`.
pub fn contraction_diagnostic(
    params: &UnfoldParams,
    view: usize,
    layer: usize,
    trials: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if trials == 0 {
        return Err(OvError::Domain(
            "contraction diagnostic needs at least one trial".into(),
        ));
    }
    let vp = params
        .views
        .get(view)
        .ok_or_else(|| OvError::Domain(format!("no view {view}")))?;
    let lp = vp
        .layers
        .get(layer)
        .ok_or_else(|| OvError::Domain(format!("no layer {layer}")))?;
    let r_norm = spectral_norm(&lp.r)?;
    let c = params.atoms();
    let n = 16;
    let mut rng = substream(seed, Stream::Diagnostics, (view * 1000 + layer) as u64);
    let mut gauss = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_fn(rows, cols, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        })
    };
    let x = gauss(n, vp.d_init.cols(), 1.0);
    let b = x.matmul_t(&vp.d_init)?.matmul(&lp.u)?;
    let phi = |z: &Matrix| -> Result<Matrix> {
        Ok(soft_threshold_values(&z.matmul(&lp.r)?.add(&b)?, lp.theta))
    };

    let mut max_ratio: f64 = 0.0;
    let mut bound_holds = true;
    for k in 0..trials {
        let scale = [0.01, 1.0, 100.0][k % 3];
        let z1 = gauss(n, c, scale);
        let z2 = gauss(n, c, scale);
        let dz = z1.sub(&z2)?.frobenius_norm();
        if dz == 0.0 {
            continue;
        }
        let dphi = phi(&z1)?.sub(&phi(&z2)?)?.frobenius_norm();
        max_ratio = max_ratio.max(dphi / dz);
        if dphi > r_norm * dz + 1e-9 {
            bound_holds = false;
        }
    }
    Ok(ContractionReport {
        view,
        layer,
        r_norm,
        trials,
        max_ratio,
        bound_holds,
        contractive: r_norm < 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub layers: usize,
    /// Fastest of the repetitions.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSetup {
    pub classes: usize,
    pub dims: [usize; 2],
    pub layers: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for ScalingSetup {
    fn default() -> Self {
        ScalingSetup {
            classes: 10,
            dims: [64, 48],
            layers: 2,
            repetitions: 10,
            seed: 0,
        }
    }
}

/// Keeps glibc from serving large buffers with fresh `mmap`s. Above its
/// default threshold every tape matrix is mapped and page-faulted anew, which
/// adds a step to the timings wherever `N × C` crosses that size. Freed heap
/// tops are kept for the same reason.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn pin_allocator() {
    // 32 MiB is the largest value glibc accepts
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn pin_allocator() {}

/// Times one forward and backward pass of the training loss at each `n`.
/// Sizes are interleaved within each repetition so slow spells on a shared
/// host hit every size alike.
pub fn scaling_benchmark(ns: &[usize], setup: &ScalingSetup) -> Result<Vec<ScalingRow>> {
    pin_allocator();
    let c = setup.classes;
    let params = init_params(
        &setup.dims,
        c,
        setup.layers,
        &AdmmConfig::default(),
        setup.seed,
        None,
    )?;
    let cfg = LossConfig::default();
    let inputs: Vec<(Vec<Matrix>, Vec<usize>, Vec<bool>)> = ns
        .iter()
        .map(|&n| {
            let mut rng = substream(setup.seed, Stream::Diagnostics, n as u64);
            let xs: Vec<Matrix> = setup
                .dims
                .iter()
                .map(|&d| Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % (c + 1)).collect();
            let is_pseudo: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            (xs, labels, is_pseudo)
        })
        .collect();
    let centers = Matrix::zeros(c, c);
    let mut best = vec![f64::INFINITY; ns.len()];
    // the first round grows the heap and is not timed
    for rep in 0..=setup.repetitions.max(1) {
        for (k, (xs, labels, is_pseudo)) in inputs.iter().enumerate() {
            let start = Instant::now();
            let mut t = Tape::new();
            let vars = params.bind(&mut t);
            let out = forward(
                &mut t,
                &params,
                &vars,
                xs,
                ForwardOptions::default(),
                Fusion::Labels(labels),
            )?;
            let (loss, _) = total_loss(&mut t, out.fused, labels, is_pseudo, &centers, &cfg)?;
            let grads = t.backward(loss)?;
            std::hint::black_box(grads.get(vars.views[0].d_init));
            drop(t);
            if rep > 0 {
                best[k] = best[k].min(start.elapsed().as_secs_f64());
            }
        }
    }
    Ok(ns
        .iter()
        .zip(best)
        .map(|(&n, seconds)| ScalingRow {
            n,
            layers: setup.layers,
            seconds,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Known classes, which is also the code width.
    pub classes: usize,
    /// Known rows in the batch; pseudo rows fill it up to `rows`.
    pub known_rows: usize,
    pub rows: usize,
    pub dims: Vec<usize>,
    pub layers: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            classes: 5,
            known_rows: 6,
            rows: 10,
            dims: vec![8, 6],
            layers: 2,
            eps: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub max_relative_error: f64,
    /// `(parameter, max relative error)`.
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub seconds: f64,
}

/// Builds a mixed synthetic batch and checks the gradient of the total loss
/// with respect to every network parameter. Fusion weights and centers are
/// frozen at the unperturbed point, as in training, and the parameters are
/// the closed forms calibrated along the batch.
pub fn gradcheck_pipeline(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    if cfg.known_rows < 2 || cfg.rows <= cfg.known_rows {
        return Err(OvError::Config(format!(
            "gradcheck needs 2 or more known rows and some pseudo rows (known {}, rows {})",
            cfg.known_rows, cfg.rows
        )));
    }
    let spec = SynthSpec {
        classes: cfg.classes,
        samples_per_class: cfg.known_rows.div_ceil(cfg.classes).max(2),
        dims: cfg.dims.clone(),
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let (ds, _) = generate(&spec)?;
    // interleave classes so every class shows up early
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by_key(|&i| (i % spec.samples_per_class, ds.labels[i]));
    let idx = &order[..cfg.known_rows];
    let base = Batch {
        views: ds.views.iter().map(|x| x.select_rows(idx)).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        is_pseudo: vec![false; idx.len()],
    };
    let mix = MixConfig {
        pseudo_ratio: (cfg.rows - cfg.known_rows) as f64 / cfg.known_rows as f64,
        ..MixConfig::default()
    };
    let (mut batch, _) = generate_pseudo(
        &base,
        &mix,
        cfg.classes,
        &mut substream(cfg.seed, Stream::Beta, 0),
    )?;
    let keep: Vec<usize> = (0..batch.len().min(cfg.rows)).collect();
    batch.views = batch.views.iter().map(|x| x.select_rows(&keep)).collect();
    batch.labels.truncate(keep.len());
    batch.is_pseudo.truncate(keep.len());

    let admm = AdmmConfig::default();
    // closed forms along this batch keep deep layers at a sane scale
    let params = calibrate_layers(
        &init_params(&cfg.dims, cfg.classes, cfg.layers, &admm, cfg.seed, None)?,
        &batch.views,
        &admm,
    )?;
    let loss_cfg = LossConfig::default();
    let opts = ForwardOptions::default();

    let z0 = infer(&params, &batch.views, opts, Fusion::Labels(&batch.labels))?;
    let weights = {
        let mut t = Tape::new();
        let vars = params.bind(&mut t);
        forward(
            &mut t,
            &params,
            &vars,
            &batch.views,
            opts,
            Fusion::Labels(&batch.labels),
        )?
        .weights
    };
    let known = batch.known_rows();
    let known_labels: Vec<usize> = known.iter().map(|&i| batch.labels[i]).collect();
    let centers = class_means(&z0.select_rows(&known), &known_labels, cfg.classes);

    let flat = params.flatten();
    let report = finite_diff_check(
        |t, leaves| {
            let vars = params.bind_vars(leaves);
            let out = forward(
                t,
                &params,
                &vars,
                &batch.views,
                opts,
                Fusion::Fixed(&weights),
            )?;
            Ok(total_loss(
                t,
                out.fused,
                &batch.labels,
                &batch.is_pseudo,
                &centers,
                &loss_cfg,
            )?
            .0)
        },
        &flat,
        cfg.eps,
    )?;
    Ok(GradcheckOutcome {
        max_relative_error: report.max_relative_error,
        per_param: params
            .param_names()
            .into_iter()
            .zip(report.per_param)
            .collect(),
        checked: report.checked,
        skipped_kinks: report.skipped,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Measured `‖∂L/∂Z‖_F` against `gradient_bound` on the first `batches`
/// training batches, evaluated at the checkpoint's parameters and centers.
pub fn gradient_bound_spot_check(
    checkpoint: &Checkpoint,
    dataset: &MultiViewDataset,
    split: &OpennessSplit,
    batches: usize,
    seed: u64,
) -> Result<Vec<BoundRecord>> {
    split.validate(dataset)?;
    let data = checkpoint.prepare(dataset)?;
    let cfg = &checkpoint.config;
    let known = split.known_count();
    let mut out = Vec::new();
    for (b, idx) in make_batches(&split.train_idx, cfg.batch_size, seed, 0)?
        .iter()
        .take(batches)
        .enumerate()
    {
        let base = Batch::gather(&data, split, idx)?;
        let batch = match generate_pseudo(
            &base,
            &cfg.mix,
            known,
            &mut substream(seed, Stream::Beta, b as u64),
        ) {
            Ok((batch, _)) => batch,
            Err(OvError::Generation(_)) => base,
            Err(e) => return Err(e),
        };
        let mut t = Tape::new();
        let vars = checkpoint.params.bind(&mut t);
        let fused = forward(
            &mut t,
            &checkpoint.params,
            &vars,
            &batch.views,
            cfg.forward_options(),
            Fusion::Labels(&batch.labels),
        )?
        .fused;
        let z = t.value(fused).clone();
        let (loss, _) = total_loss(
            &mut t,
            fused,
            &batch.labels,
            &batch.is_pseudo,
            &checkpoint.centers,
            &cfg.loss,
        )?;
        let grads = t.backward(loss)?;
        out.push(BoundRecord {
            epoch: 0,
            batch: b,
            grad_norm: grads.get_or_zeros(fused).frobenius_norm(),
            bound: gradient_bound(
                &z,
                &batch.labels,
                &batch.is_pseudo,
                &checkpoint.centers,
                &cfg.loss,
            ),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred(conf: f64, truth: Option<usize>, predicted: usize) -> ScoredPrediction {
        ScoredPrediction {
            index: 0,
            predicted,
            confidence: conf,
            label: truth.unwrap_or(9),
            truth,
        }
    }

    /// Exhaustive recomputation at every candidate threshold.
    fn brute(preds: &[ScoredPrediction]) -> Vec<OscrPoint> {
        let mut taus: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        taus.sort_by(|a, b| b.total_cmp(a));
        taus.dedup();
        let nk = preds.iter().filter(|p| p.truth.is_some()).count() as f64;
        let nu = preds.len() as f64 - nk;
        taus.into_iter()
            .map(|tau| OscrPoint {
                threshold: tau,
                ccr: preds
                    .iter()
                    .filter(|p| p.truth == Some(p.predicted) && p.confidence >= tau)
                    .count() as f64
                    / nk,
                fpr: preds
                    .iter()
                    .filter(|p| p.truth.is_none() && p.confidence >= tau)
                    .count() as f64
                    / nu,
            })
            .collect()
    }

    #[test]
    fn hand_case() {
        let preds = vec![
            pred(0.8, Some(0), 0),
            pred(0.6, Some(1), 0),
            pred(0.7, None, 0),
            pred(0.5, None, 1),
        ];
        let curve = oscr_curve(&preds).unwrap();
        let want = [
            (0.8, 0.5, 0.0),
            (0.7, 0.5, 0.5),
            (0.6, 0.5, 0.5),
            (0.5, 0.5, 1.0),
        ];
        assert_eq!(curve.points.len(), 4);
        for (p, w) in curve.points.iter().zip(want) {
            assert_eq!((p.threshold, p.ccr, p.fpr), w);
        }
        assert_eq!(curve.points, brute(&preds));
        assert_eq!(ccr_at_fpr(&curve, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn separable_and_degenerate() {
        let preds = vec![
            pred(0.9, Some(0), 0),
            pred(0.9, Some(1), 1),
            pred(0.1, None, 0),
        ];
        let curve = oscr_curve(&preds).unwrap();
        assert_eq!(curve.points[0].ccr, 1.0);
        assert_eq!(curve.points[0].fpr, 0.0);
        for t in [0.01, 0.1, 1.0] {
            assert_eq!(ccr_at_fpr(&curve, t).unwrap(), 1.0);
        }

        let preds = vec![
            pred(0.5, Some(0), 0),
            pred(0.5, Some(1), 0),
            pred(0.5, None, 0),
        ];
        let curve = oscr_curve(&preds).unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!((curve.points[0].ccr, curve.points[0].fpr), (0.5, 1.0));
        assert_eq!(ccr_at_fpr(&curve, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn metric_errors() {
        assert!(oscr_curve(&[pred(0.5, Some(0), 0)]).is_err());
        assert!(oscr_curve(&[pred(0.5, None, 0)]).is_err());
        let curve = oscr_curve(&[pred(0.5, Some(0), 0), pred(0.4, None, 0)]).unwrap();
        assert!(ccr_at_fpr(&curve, 0.0).is_err());
        assert!(ccr_at_fpr(&curve, 1.5).is_err());
    }

    #[test]
    fn curve_matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let mut preds: Vec<ScoredPrediction> = (0..n)
                .map(|_| {
                    // coarse grid forces ties
                    let conf = (rng.random_range(0..10) as f64) / 10.0;
                    let truth = if rng.random_bool(0.4) {
                        None
                    } else {
                        Some(rng.random_range(0..3))
                    };
                    pred(conf, truth, rng.random_range(0..3))
                })
                .collect();
            preds[0].truth = Some(0);
            preds[1].truth = None;
            let curve = oscr_curve(&preds).unwrap();
            assert_eq!(curve.points, brute(&preds));
            for w in curve.points.windows(2) {
                assert!(w[1].ccr >= w[0].ccr && w[1].fpr >= w[0].fpr);
            }
            let mut last = 0.0;
            for t in [0.01, 0.05, 0.1, 0.3, 0.5, 1.0] {
                let v = ccr_at_fpr(&curve, t).unwrap();
                assert!(v >= last);
                last = v;
            }
        }
    }

    fn params_with_r(r: Matrix) -> UnfoldParams {
        let mut p = init_params(&[6], 3, 1, &AdmmConfig::default(), 0, None).unwrap();
        p.views[0].layers[0].r = r;
        p
    }

    #[test]
    fn contraction_examples() {
        let rep = contraction_diagnostic(&params_with_r(Matrix::zeros(3, 3)), 0, 0, 50, 1).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert!(rep.bound_holds && rep.contractive);

        let rep =
            contraction_diagnostic(&params_with_r(Matrix::identity(3).scale(0.5)), 0, 0, 300, 2)
                .unwrap();
        assert!(rep.max_ratio <= 0.5 + 1e-12);
        assert!(rep.bound_holds);

        let rep =
            contraction_diagnostic(&params_with_r(Matrix::identity(3).scale(1.5)), 0, 0, 30, 3)
                .unwrap();
        assert!(!rep.contractive);
        assert!(rep.bound_holds);
        assert!(contraction_diagnostic(&params_with_r(Matrix::zeros(3, 3)), 0, 0, 0, 0).is_err());
    }

    #[test]
    fn scaling_rows_cover_grid() {
        let setup = ScalingSetup {
            classes: 3,
            dims: [8, 6],
            layers: 1,
            repetitions: 1,
            seed: 0,
        };
        let rows = scaling_benchmark(&[16, 32], &setup).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 32]);
        assert!(rows.iter().all(|r| r.seconds > 0.0));
    }

    #[test]
    fn pipeline_gradients_match_differences() {
        let out = gradcheck_pipeline(&GradcheckConfig::default()).unwrap();
        assert!(out.max_relative_error < 1e-4, "{out:?}");
        assert_eq!(out.per_param.len(), 2 * (1 + 2 * 5));
        assert!(out.checked > 100);
        assert!(gradcheck_pipeline(&GradcheckConfig {
            rows: 6,
            ..GradcheckConfig::default()
        })
        .is_err());
    }
}
