//! Mini-batch training of the unfolded network with pseudo-unknown mixing,
//! plain gradient descent, center updates, and JSON checkpoints.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmConfig};
use crate::dataset::{
    make_batches, zscore_normalize, Batch, FeatureStats, MultiViewDataset, OpennessSplit,
};
use crate::error::{OvError, Result};
use crate::io;
use crate::losses::{
    class_means, gradient_bound, total_loss, update_centers, LossConfig, LossParts,
};
use crate::pseudo::{generate_pseudo, MixConfig};
use crate::rng::{substream, Stream};
use crate::tensor::{Matrix, Tape};
use crate::unfold::{
    calibrate_layers, forward, infer, init_params, predict, Ablation, ForwardOptions, Fusion,
    UnfoldParams,
};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// How the inference fusion weights are fixed at the end of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    /// Exponential moving average of per-batch weights.
    #[default]
    Ema,
    /// Weights of the last training batch.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub layers: usize,
    pub seed: u64,
    pub mix: MixConfig,
    pub loss: LossConfig,
    pub admm: AdmmConfig,
    pub ablation: Ablation,
    /// Initialize `D_init` from an oracle solve on the training rows.
    pub warm_start: bool,
    /// Re-derive layer closed forms along the first training batch.
    pub calibrate: bool,
    /// Recompute `M` from each batch's codes instead of learning it.
    pub refit_m: bool,
    /// Standardize features with training-split statistics.
    pub normalize: bool,
    pub ema_decay: f64,
    pub snapshot: SnapshotMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 50,
            learning_rate: 0.01,
            layers: 1,
            seed: 0,
            mix: MixConfig::default(),
            loss: LossConfig::default(),
            admm: AdmmConfig::default(),
            ablation: Ablation::Full,
            warm_start: false,
            calibrate: false,
            refit_m: false,
            normalize: false,
            ema_decay: 0.9,
            snapshot: SnapshotMode::Ema,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(OvError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(OvError::Config(format!(
                "batch size {} < 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OvError::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.layers < 1 {
            return Err(OvError::Config("need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(OvError::Config(format!(
                "ema_decay {} outside [0, 1)",
                self.ema_decay
            )));
        }
        self.mix.validate()?;
        self.loss.validate()?;
        self.admm.validate()
    }

    /// Rows in a training forward pass: the batch plus its pseudo rows.
    pub fn forward_rows(&self) -> usize {
        self.batch_size + self.mix.pseudo_count(self.batch_size)
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            ablation: self.ablation,
            group_axis: self.admm.group_axis,
            record_trace: false,
            refit_m: self.refit_m.then_some(self.admm.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub known: f64,
    pub unknown: f64,
    pub center: f64,
    pub fusion_ema: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Measured `‖∂L/∂Z‖_F` against the analytic bound for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub epoch: usize,
    pub batch: usize,
    pub grad_norm: f64,
    pub bound: f64,
}

impl BoundRecord {
    pub fn holds(&self) -> bool {
        self.grad_norm <= self.bound
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub bounds: Vec<BoundRecord>,
}

impl TrainLog {
    /// Epoch losses and sub-losses as CSV (no timing column).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,known,unknown,center,val_accuracy,fusion_ema\n");
        for e in &self.epochs {
            let w: Vec<String> = e.fusion_ema.iter().map(|x| x.to_string()).collect();
            let acc = e.val_accuracy.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch,
                e.loss,
                e.known,
                e.unknown,
                e.center,
                acc,
                w.join(";")
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{}\n", e.epoch, e.seconds));
        }
        s
    }

    pub fn bound_violations(&self) -> usize {
        self.bounds.iter().filter(|b| !b.holds()).count()
    }
}

/// Everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub generator: String,
    pub view_dims: Vec<usize>,
    pub known_classes: Vec<usize>,
    pub normalization: Option<Vec<FeatureStats>>,
    pub params: UnfoldParams,
    pub centers: Matrix,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| OvError::Checkpoint(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| OvError::Checkpoint(format!("parse error: {e}")))?;
        match value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == CHECKPOINT_SCHEMA as u64 => {}
            Some(v) => {
                return Err(OvError::Checkpoint(format!(
                    "checkpoint schema {v} is not supported by {}",
                    crate::version_info()
                )))
            }
            None => return Err(OvError::Checkpoint("missing schema_version".into())),
        }
        let cp: Checkpoint = serde_json::from_value(value)
            .map_err(|e| OvError::Checkpoint(format!("schema error: {e}")))?;
        cp.params.validate(&cp.view_dims)?;
        if cp.centers.shape() != (cp.known_classes.len(), cp.params.atoms()) {
            return Err(OvError::Checkpoint(
                "centers do not match the known classes".into(),
            ));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| OvError::io(path, e))?;
        Checkpoint::from_json(&text)
    }

    /// Applies the stored normalization to a dataset.
    pub fn prepare(&self, dataset: &MultiViewDataset) -> Result<MultiViewDataset> {
        if dataset.view_dims() != self.view_dims {
            return Err(OvError::Dimension {
                op: "checkpoint view dims",
                left: (self.view_dims.len(), self.view_dims.iter().sum()),
                right: (dataset.view_count(), dataset.view_dims().iter().sum()),
            });
        }
        let Some(stats) = &self.normalization else {
            return Ok(dataset.clone());
        };
        let views = dataset
            .views
            .iter()
            .zip(stats)
            .map(|(x, s)| apply_stats(x, s))
            .collect();
        Ok(MultiViewDataset {
            views,
            ..dataset.clone()
        })
    }
}

fn apply_stats(x: &Matrix, s: &FeatureStats) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let c = x[(i, j)] - s.mean[j];
        if s.std[j] < crate::dataset::DEGENERATE_STD {
            c
        } else {
            c / s.std[j]
        }
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Runs `infer` on row chunks of `chunk` rows and stacks the results.
pub fn infer_chunked(
    params: &UnfoldParams,
    xs: &[Matrix],
    idx: &[usize],
    chunk: usize,
    opts: ForwardOptions,
    fusion: Fusion<'_>,
) -> Result<Matrix> {
    let mut parts = Vec::new();
    for rows in idx.chunks(chunk.max(1)) {
        let sub: Vec<Matrix> = xs.iter().map(|x| x.select_rows(rows)).collect();
        parts.push(infer(params, &sub, opts, fusion)?);
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    if refs.is_empty() {
        return Ok(Matrix::zeros(0, params.atoms()));
    }
    Matrix::vstack(&refs)
}

fn ema_update(ema: &mut Option<Vec<f64>>, w: &[f64], decay: f64) {
    match ema {
        None => *ema = Some(w.to_vec()),
        Some(e) => {
            for (a, b) in e.iter_mut().zip(w) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
    }
}

pub fn train(
    dataset: &MultiViewDataset,
    split: &OpennessSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate(dataset)?;
    let known = split.known_count();
    if known < 2 {
        return Err(OvError::Split(format!("{known} known classes; need 2")));
    }
    if split.train_idx.is_empty() {
        return Err(OvError::Split("empty training index".into()));
    }
    let (data, normalization) = if cfg.normalize {
        let (d, s) = zscore_normalize(dataset, &split.train_idx)?;
        (d, Some(s))
    } else {
        (dataset.clone(), None)
    };

    let warm = if cfg.warm_start {
        let xs: Vec<Matrix> = data
            .views
            .iter()
            .map(|x| x.select_rows(&split.train_idx))
            .collect();
        Some(admm::solve(&xs, known, &cfg.admm)?)
    } else {
        None
    };
    let mut params = init_params(
        &data.view_dims(),
        known,
        cfg.layers,
        &cfg.admm,
        cfg.seed,
        warm.as_ref(),
    )?;
    let opts = cfg.forward_options();

    let mut centers: Option<Matrix> = None;
    let mut ema: Option<Vec<f64>> = None;
    let mut last_weights: Vec<f64> = Vec::new();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = make_batches(&split.train_idx, cfg.batch_size, cfg.seed, epoch)?;
        let mut sum = LossParts::default();
        for (b, idx) in batches.iter().enumerate() {
            let base = Batch::gather(&data, split, idx)?;
            let mut rng = substream(cfg.seed, Stream::Beta, ((epoch as u64) << 32) | b as u64);
            let batch = match generate_pseudo(&base, &cfg.mix, known, &mut rng) {
                Ok((batch, _)) => batch,
                Err(OvError::Generation(msg)) => {
                    log::warn!("epoch {epoch} batch {b}: no pseudo samples ({msg})");
                    base
                }
                Err(e) => return Err(e),
            };
            let known_rows = batch.known_rows();
            let known_labels: Vec<usize> = known_rows.iter().map(|&i| batch.labels[i]).collect();

            if cfg.calibrate && epoch == 0 && b == 0 {
                params = calibrate_layers(&params, &batch.views, &cfg.admm)?;
            }
            let mut t = Tape::new();
            let vars = params.bind(&mut t);
            let out = forward(
                &mut t,
                &params,
                &vars,
                &batch.views,
                opts,
                Fusion::Labels(&batch.labels),
            )?;
            let z = t.value(out.fused).clone();
            let c = centers.get_or_insert_with(|| {
                class_means(&z.select_rows(&known_rows), &known_labels, known)
            });

            let (loss, parts) = total_loss(
                &mut t,
                out.fused,
                &batch.labels,
                &batch.is_pseudo,
                c,
                &cfg.loss,
            )?;
            if !parts.total.is_finite() || !z.is_finite() {
                return Err(OvError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!(
                        "loss {} (known {}, unknown {}, center {}), fused finite: {}, rows {:?}",
                        parts.total,
                        parts.known,
                        parts.unknown,
                        parts.center,
                        z.is_finite(),
                        idx
                    ),
                });
            }
            let grads = t.backward(loss)?;
            let record = BoundRecord {
                epoch,
                batch: b,
                grad_norm: grads.get_or_zeros(out.fused).frobenius_norm(),
                bound: gradient_bound(&z, &batch.labels, &batch.is_pseudo, c, &cfg.loss),
            };
            if !record.holds() {
                log::warn!("gradient bound exceeded: {record:?}");
            }
            log.bounds.push(record);

            let flat: Vec<Matrix> = vars
                .flat()
                .into_iter()
                .map(|v| grads.get_or_zeros(v))
                .collect();
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(OvError::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!("non-finite gradient, rows {idx:?}"),
                });
            }
            params = params.sgd_step(&flat, cfg.learning_rate)?;
            *c = update_centers(
                c,
                &z.select_rows(&known_rows),
                &known_labels,
                cfg.loss.center_lr,
            )?;
            ema_update(&mut ema, &out.weights, cfg.ema_decay);
            last_weights = out.weights;

            sum.total += parts.total;
            sum.known += parts.known;
            sum.unknown += parts.unknown;
            sum.center += parts.center;
        }
        let nb = batches.len() as f64;
        let fusion_ema = ema.clone().unwrap_or_default();
        let val_accuracy = validation_accuracy(&params, &data, split, cfg, &fusion_ema)?;
        log.epochs.push(EpochRecord {
            epoch,
            loss: sum.total / nb,
            known: sum.known / nb,
            unknown: sum.unknown / nb,
            center: sum.center / nb,
            fusion_ema,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: loss {:.6} val {:?}",
            sum.total / nb,
            log.epochs.last().and_then(|e| e.val_accuracy)
        );
    }

    params.fusion_snapshot = Some(match cfg.snapshot {
        SnapshotMode::Ema => ema.unwrap_or(last_weights),
        SnapshotMode::Final => last_weights,
    });
    let checkpoint = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA,
        generator: crate::version_info(),
        view_dims: data.view_dims(),
        known_classes: split.known_classes.clone(),
        normalization,
        params,
        centers: centers.expect("at least one batch ran"),
        config: cfg.clone(),
    };
    Ok(TrainOutcome { checkpoint, log })
}

fn validation_accuracy(
    params: &UnfoldParams,
    data: &MultiViewDataset,
    split: &OpennessSplit,
    cfg: &TrainConfig,
    weights: &[f64],
) -> Result<Option<f64>> {
    if split.val_idx.is_empty() || weights.is_empty() {
        return Ok(None);
    }
    let z = infer_chunked(
        params,
        &data.views,
        &split.val_idx,
        cfg.forward_rows(),
        cfg.forward_options(),
        Fusion::Fixed(weights),
    )?;
    let correct = predict(&z)
        .iter()
        .zip(&split.val_idx)
        .filter(|((c, _), &i)| split.known_index(data.labels[i]) == Some(*c))
        .count();
    Ok(Some(correct as f64 / split.val_idx.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{openness_split, SplitRatios};
    use crate::synth::{generate, SynthSpec};

    fn small() -> (MultiViewDataset, OpennessSplit) {
        let (ds, _) = generate(&SynthSpec {
            classes: 5,
            samples_per_class: 30,
            dims: vec![12, 10],
            ..SynthSpec::default()
        })
        .unwrap();
        let ratios = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.3,
        };
        let split = openness_split(&ds, 0.1, ratios, 3).unwrap();
        (ds, split)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let (ds, split) = small();
        assert!(matches!(
            train(&ds, &split, &quick(0)),
            Err(OvError::Config(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (ds, split) = small();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick(2)
        };
        let out = train(&ds, &split, &cfg).unwrap();
        let init = init_params(
            &ds.view_dims(),
            split.known_count(),
            1,
            &cfg.admm,
            cfg.seed,
            None,
        )
        .unwrap();
        let mut trained = out.checkpoint.params.clone();
        trained.fusion_snapshot = None;
        assert_eq!(trained, init);
    }

    #[test]
    fn deterministic_checkpoints_and_logs() {
        let (ds, split) = small();
        let a = train(&ds, &split, &quick(3)).unwrap();
        let b = train(&ds, &split, &quick(3)).unwrap();
        assert_eq!(
            a.checkpoint.to_json().unwrap(),
            b.checkpoint.to_json().unwrap()
        );
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.epochs.len(), 3);
        let w = a.checkpoint.params.fusion_snapshot.as_ref().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (ds, split) = small();
        let out = train(&ds, &split, &quick(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        out.checkpoint.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded, out.checkpoint);
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn checkpoint_load_errors() {
        let (ds, split) = small();
        let out = train(&ds, &split, &quick(1)).unwrap();
        let text = out.checkpoint.to_json().unwrap();
        assert!(matches!(
            Checkpoint::from_json(&text[..text.len() / 2]),
            Err(OvError::Checkpoint(_))
        ));
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
        match Checkpoint::from_json(&bumped) {
            Err(OvError::Checkpoint(msg)) => assert!(msg.contains(&crate::version_info())),
            other => panic!("unexpected {other:?}"),
        }
        let other =
            MultiViewDataset::new("x", vec![Matrix::zeros(4, 3)], vec![0, 0, 1, 1], 2).unwrap();
        assert!(matches!(
            out.checkpoint.prepare(&other),
            Err(OvError::Dimension { .. })
        ));
    }

    #[test]
    fn bound_recorded_for_every_batch() {
        let (ds, split) = small();
        let out = train(&ds, &split, &quick(2)).unwrap();
        let per_epoch = split.train_idx.len().div_ceil(20);
        assert_eq!(out.log.bounds.len(), 2 * per_epoch);
        assert_eq!(out.log.bound_violations(), 0);
    }
}
