//! Multi-view datasets, normalization, openness-based class splits, and
//! mini-batch assembly.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OvError, Result};
use crate::io;
use crate::rng::{substream, Stream};
use crate::tensor::Matrix;

/// `V` aligned feature matrices (view `v` is `N × D_v`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub name: String,
    pub views: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

/// On-disk description of a dataset. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub views: Vec<PathBuf>,
    pub labels: PathBuf,
    /// Defaults to `max(label) + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Matrix>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(OvError::Dataset("at least one view is required".into()));
        }
        let n = labels.len();
        for (v, m) in views.iter().enumerate() {
            if m.rows() != n {
                return Err(OvError::Dataset(format!(
                    "view {v} has {} rows, labels have {n}",
                    m.rows()
                )));
            }
            if !m.is_finite() {
                return Err(OvError::Dataset(format!(
                    "view {v} contains non-finite values"
                )));
            }
        }
        let mut counts = vec![0usize; class_count];
        for (i, &l) in labels.iter().enumerate() {
            if l >= class_count {
                return Err(OvError::Dataset(format!(
                    "label {l} of sample {i} >= class count {class_count}"
                )));
            }
            counts[l] += 1;
        }
        if let Some((c, &k)) = counts.iter().enumerate().find(|(_, &k)| k < 2) {
            return Err(OvError::Dataset(format!(
                "class {c} has {k} samples; at least 2 required"
            )));
        }
        Ok(MultiViewDataset {
            name: name.into(),
            views,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Matrix::cols).collect()
    }

    /// Reads a JSON manifest and the CSV files it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest = io::read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let labels_path = base.join(&manifest.labels);
        let raw = io::read_labels(&labels_path)?;
        let n = raw.len();

        let mut views = Vec::with_capacity(manifest.views.len());
        for rel in &manifest.views {
            let path = base.join(rel);
            let m = io::read_matrix_csv(&path)?;
            if m.rows() != n {
                return Err(OvError::RowMismatch {
                    path,
                    expected: n,
                    found: m.rows(),
                });
            }
            views.push(m);
        }

        let class_count = match manifest.class_count {
            Some(c) => c,
            None => raw
                .iter()
                .map(|&(_, v)| v.max(0) as usize + 1)
                .max()
                .unwrap_or(0),
        };
        let mut labels = Vec::with_capacity(n);
        for &(line, v) in &raw {
            if v < 0 || v as usize >= class_count {
                return Err(OvError::LabelRange {
                    path: labels_path,
                    line,
                    value: v,
                    class_count,
                });
            }
            labels.push(v as usize);
        }
        MultiViewDataset::new(manifest.name, views, labels, class_count)
    }

    /// Writes `manifest.json`, `view_<v>.csv` and `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let mut view_files = Vec::with_capacity(self.views.len());
        for (v, m) in self.views.iter().enumerate() {
            let file = PathBuf::from(format!("view_{v}.csv"));
            io::write_matrix_csv(&dir.join(&file), m)?;
            view_files.push(file);
        }
        io::write_labels(&dir.join("labels.csv"), &self.labels)?;
        let manifest = Manifest {
            name: self.name.clone(),
            views: view_files,
            labels: PathBuf::from("labels.csv"),
            class_count: Some(self.class_count),
        };
        let path = dir.join("manifest.json");
        io::write_json(&path, &manifest)?;
        Ok(path)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-view feature means and standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Columns with a training std below this are centered but not scaled.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Standardizes every feature column with statistics of the `train_idx` rows.
pub fn zscore_normalize(
    dataset: &MultiViewDataset,
    train_idx: &[usize],
) -> Result<(MultiViewDataset, Vec<FeatureStats>)> {
    if train_idx.is_empty() {
        return Err(OvError::Dataset(
            "normalization needs a non-empty training index".into(),
        ));
    }
    let mut views = Vec::with_capacity(dataset.views.len());
    let mut stats = Vec::with_capacity(dataset.views.len());
    let n = train_idx.len() as f64;
    for x in &dataset.views {
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for &i in train_idx {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in train_idx {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.into_iter().map(|s| (s / n).sqrt()).collect();
        let z = Matrix::from_fn(x.rows(), d, |i, j| {
            let c = x[(i, j)] - mean[j];
            if std[j] < DEGENERATE_STD {
                c
            } else {
                c / std[j]
            }
        });
        views.push(z);
        stats.push(FeatureStats { mean, std });
    }
    let out = MultiViewDataset {
        name: dataset.name.clone(),
        views,
        labels: dataset.labels.clone(),
        class_count: dataset.class_count,
    };
    Ok((out, stats))
}

/// Openness of a protocol with `known` training classes out of `total`
/// test classes: `1 − sqrt(2·known / (known + total))`.
pub fn openness_of(known: usize, total: usize) -> f64 {
    1.0 - (2.0 * known as f64 / (known + total) as f64).sqrt()
}

/// Known/unknown class partition plus per-sample train/val/test indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpennessSplit {
    pub known_classes: Vec<usize>,
    pub unknown_classes: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub openness_requested: f64,
    pub openness_achieved: f64,
    pub seed: u64,
}

impl OpennessSplit {
    pub fn known_count(&self) -> usize {
        self.known_classes.len()
    }

    /// Position of an original label among the known classes.
    pub fn known_index(&self, label: usize) -> Option<usize> {
        self.known_classes.binary_search(&label).ok()
    }

    pub fn is_unknown(&self, label: usize) -> bool {
        self.known_index(label).is_none()
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Structural checks against a dataset.
    pub fn validate(&self, dataset: &MultiViewDataset) -> Result<()> {
        let n = dataset.len();
        let all: BTreeSet<usize> = self
            .known_classes
            .iter()
            .chain(&self.unknown_classes)
            .copied()
            .collect();
        if all.len() != self.known_classes.len() + self.unknown_classes.len()
            || all != (0..dataset.class_count).collect()
        {
            return Err(OvError::Split(
                "known and unknown classes must partition all classes".into(),
            ));
        }
        if !self.known_classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(OvError::Split("known_classes must be sorted".into()));
        }
        for (name, idx) in [
            ("train", &self.train_idx),
            ("val", &self.val_idx),
            ("test", &self.test_idx),
        ] {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(OvError::Split(format!(
                    "{name} index {bad} out of range for {n} samples"
                )));
            }
        }
        for &i in self.train_idx.iter().chain(&self.val_idx) {
            if self.is_unknown(dataset.labels[i]) {
                return Err(OvError::Split(format!(
                    "unknown-class sample {i} in train/val"
                )));
            }
        }
        Ok(())
    }
}

/// Sample proportions for the per-class train/val/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.1,
            val: 0.1,
            test: 0.8,
        }
    }
}

/// Number of known classes whose openness is closest to `openness`
/// (ties go to the larger count).
pub fn known_class_count(openness: f64, total: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&openness) {
        return Err(OvError::Split(format!(
            "openness {openness} outside [0, 1)"
        )));
    }
    if total < 2 {
        return Err(OvError::Split(format!(
            "{total} classes cannot yield 2 known classes"
        )));
    }
    let mut best = total;
    let mut best_gap = f64::INFINITY;
    for k in (2..=total).rev() {
        let gap = (openness - openness_of(k, total)).abs();
        if gap < best_gap {
            best = k;
            best_gap = gap;
        }
    }
    Ok(best)
}

pub fn openness_split(
    dataset: &MultiViewDataset,
    openness: f64,
    ratios: SplitRatios,
    seed: u64,
) -> Result<OpennessSplit> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(*r >= 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9
    {
        return Err(OvError::Split(format!(
            "ratios ({train}, {val}, {test}) must be non-negative and sum to 1"
        )));
    }
    let total = dataset.class_count;
    let known_count = known_class_count(openness, total)?;
    let mut rng = substream(seed, Stream::Split, 0);

    let mut classes: Vec<usize> = (0..total).collect();
    classes.shuffle(&mut rng);
    let mut known_classes = classes[..known_count].to_vec();
    let mut unknown_classes = classes[known_count..].to_vec();
    known_classes.sort_unstable();
    unknown_classes.sort_unstable();

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut test_idx = Vec::new();
    for &c in &known_classes {
        let mut idx = dataset.indices_of_class(c);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut n_train = (train * n as f64 + 1e-9).floor() as usize;
        let mut n_val = (val * n as f64 + 1e-9).floor() as usize;
        if n_train + n_val >= n {
            // test must keep at least one sample per class
            if n_val > 0 {
                n_val -= 1;
            } else {
                n_train -= 1;
            }
        }
        train_idx.extend_from_slice(&idx[..n_train]);
        val_idx.extend_from_slice(&idx[n_train..n_train + n_val]);
        test_idx.extend_from_slice(&idx[n_train + n_val..]);
    }
    for &c in &unknown_classes {
        test_idx.extend(dataset.indices_of_class(c));
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok(OpennessSplit {
        known_classes,
        unknown_classes,
        train_idx,
        val_idx,
        test_idx,
        openness_requested: openness,
        openness_achieved: openness_of(known_count, total),
        seed,
    })
}

/// Rows of several views gathered for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub views: Vec<Matrix>,
    /// Known-class index per row; pseudo-unknown rows carry the extra label.
    pub labels: Vec<usize>,
    pub is_pseudo: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers `idx` rows with labels remapped into known-class indices.
    pub fn gather(
        dataset: &MultiViewDataset,
        split: &OpennessSplit,
        idx: &[usize],
    ) -> Result<Batch> {
        let labels = idx
            .iter()
            .map(|&i| {
                split
                    .known_index(dataset.labels[i])
                    .ok_or_else(|| OvError::Split(format!("sample {i} is not from a known class")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            views: dataset.views.iter().map(|m| m.select_rows(idx)).collect(),
            is_pseudo: vec![false; labels.len()],
            labels,
        })
    }

    pub fn known_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_pseudo[i]).collect()
    }

    pub fn pseudo_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_pseudo[i]).collect()
    }
}

/// Shuffled partition of `train_idx` into batches; the last one may be short.
pub fn make_batches(
    train_idx: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(OvError::Config(format!("batch size {batch_size} < 2")));
    }
    let mut order = train_idx.to_vec();
    order.shuffle(&mut substream(seed, Stream::Shuffle, epoch as u64));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn toy(n_per_class: usize, classes: usize) -> MultiViewDataset {
        let n = n_per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let v0 = Matrix::from_fn(n, 3, |i, j| (i * 3 + j) as f64);
        let v1 = Matrix::from_fn(n, 2, |i, j| (i as f64) - j as f64);
        MultiViewDataset::new("toy", vec![v0, v1], labels, classes).unwrap()
    }

    fn write_manifest(dir: &Path, rows: (usize, usize), labels: &str) -> PathBuf {
        let m0 = Matrix::from_fn(rows.0, 3, |i, j| (i + j) as f64);
        let m1 = Matrix::from_fn(rows.1, 2, |i, j| (i * j) as f64);
        io::write_matrix_csv(&dir.join("a.csv"), &m0).unwrap();
        io::write_matrix_csv(&dir.join("b.csv"), &m1).unwrap();
        fs::write(dir.join("y.csv"), labels).unwrap();
        let p = dir.join("m.json");
        fs::write(
            &p,
            r#"{"name": "t", "views": ["a.csv", "b.csv"], "labels": "y.csv", "class_count": 3}"#,
        )
        .unwrap();
        p
    }

    #[test]
    fn load_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), (6, 6), "0\n1\n2\n0\n1\n2\n");
        let ds = MultiViewDataset::load(&p).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.view_count(), 2);
        assert_eq!(ds.view_dims(), vec![3, 2]);
    }

    #[test]
    fn load_row_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), (6, 5), "0\n1\n2\n0\n1\n2\n");
        match MultiViewDataset::load(&p) {
            Err(OvError::RowMismatch {
                path,
                expected: 6,
                found: 5,
            }) => assert!(path.ends_with("b.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_label_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), (6, 6), "0\n1\n2\n0\n1\n3\n");
        match MultiViewDataset::load(&p) {
            Err(OvError::LabelRange {
                value: 3,
                line: 6,
                path,
                ..
            }) => assert!(path.ends_with("y.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_missing_view_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), (6, 6), "0\n1\n2\n0\n1\n2\n");
        fs::remove_file(dir.path().join("a.csv")).unwrap();
        match MultiViewDataset::load(&p) {
            Err(OvError::Io { path, .. }) => assert!(path.ends_with("a.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(3, 3);
        let p = ds.save(dir.path()).unwrap();
        assert_eq!(MultiViewDataset::load(&p).unwrap(), ds);
    }

    #[test]
    fn zscore_examples() {
        let labels = vec![0, 0, 1, 1];
        let x = Matrix::from_rows(&[
            vec![5.0, 0.0, 1.0],
            vec![5.0, 2.0, 2.0],
            vec![5.0, 7.0, 4.0],
            vec![5.0, 1.0, 8.0],
        ])
        .unwrap();
        let ds = MultiViewDataset::new("z", vec![x], labels, 2).unwrap();
        let (out, stats) = zscore_normalize(&ds, &[0, 1]).unwrap();
        // constant column: centered only
        assert_eq!(stats[0].std[0], 0.0);
        assert_eq!(out.views[0][(2, 0)], 0.0);
        // train values {0, 2}: mean 1, std 1
        assert_eq!(stats[0].mean[1], 1.0);
        assert_eq!(stats[0].std[1], 1.0);
        assert_eq!(out.views[0][(2, 1)], 6.0);
        assert!(zscore_normalize(&ds, &[]).is_err());
    }

    #[test]
    fn zscore_train_columns_standardized() {
        let ds = toy(10, 3);
        let train: Vec<usize> = (0..30).step_by(2).collect();
        let (out, _) = zscore_normalize(&ds, &train).unwrap();
        for x in &out.views {
            for j in 0..x.cols() {
                let vals: Vec<f64> = train.iter().map(|&i| x[(i, j)]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                    / vals.len() as f64)
                    .sqrt();
                assert!(mean.abs() < 1e-10);
                assert!((std - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn known_count_by_enumeration() {
        assert_eq!(known_class_count(0.0, 10).unwrap(), 10);
        assert_eq!(known_class_count(0.1, 10).unwrap(), 7);
        assert!((openness_of(7, 10) - 0.0925).abs() < 1e-4);
        assert_eq!(known_class_count(0.1, 7).unwrap(), 5);
        assert!(known_class_count(1.0, 10).is_err());
        assert!(known_class_count(0.2, 1).is_err());
        // openness grows as fewer classes are known
        for k in 2..10 {
            assert!(openness_of(k, 10) >= openness_of(k + 1, 10));
        }
    }

    #[test]
    fn split_counts_follow_ratios() {
        let ds = toy(100, 4);
        let s = openness_split(&ds, 0.0, SplitRatios::default(), 3).unwrap();
        assert!(s.unknown_classes.is_empty());
        for &c in &s.known_classes {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| ds.labels[i] == c).count();
            assert_eq!(count(&s.train_idx), 10);
            assert_eq!(count(&s.val_idx), 10);
            assert_eq!(count(&s.test_idx), 80);
        }
        s.validate(&ds).unwrap();
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let ds = toy(20, 10);
        let a = openness_split(&ds, 0.1, SplitRatios::default(), 11).unwrap();
        let b = openness_split(&ds, 0.1, SplitRatios::default(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.known_classes.len(), 7);
        let mut seen = BTreeSet::new();
        for &i in a.train_idx.iter().chain(&a.val_idx).chain(&a.test_idx) {
            assert!(seen.insert(i), "index {i} repeated");
        }
        for &c in &a.unknown_classes {
            for i in ds.indices_of_class(c) {
                assert!(a.test_idx.contains(&i));
            }
        }
        a.validate(&ds).unwrap();
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let ds = toy(10, 3);
        assert!(openness_split(&ds, 1.0, SplitRatios::default(), 0).is_err());
        let bad = SplitRatios {
            train: 0.5,
            val: 0.5,
            test: 0.5,
        };
        assert!(openness_split(&ds, 0.0, bad, 0).is_err());
    }

    #[test]
    fn batches_cover_and_repeat() {
        let idx: Vec<usize> = (0..55).collect();
        let b = make_batches(&idx, 50, 1, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 5]);
        assert_eq!(make_batches(&idx[..50], 50, 1, 0).unwrap().len(), 1);
        assert_eq!(b, make_batches(&idx, 50, 1, 0).unwrap());
        assert_ne!(b, make_batches(&idx, 50, 1, 1).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, idx);
        assert!(make_batches(&idx, 1, 1, 0).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let x = Matrix::zeros(3, 2);
        assert!(MultiViewDataset::new("x", vec![x.clone()], vec![0, 0, 1], 2).is_err());
        assert!(MultiViewDataset::new("x", vec![x.clone()], vec![0, 0], 1).is_err());
        assert!(MultiViewDataset::new("x", vec![x], vec![0, 0, 5], 2).is_err());
    }
}
