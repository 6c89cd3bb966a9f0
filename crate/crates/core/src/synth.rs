//! Planted multi-view data following `X_v = Z D_v + E_v + noise`.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::MultiViewDataset;
use crate::error::{OvError, Result};
use crate::io;
use crate::linalg::orthonormal_rows;
use crate::rng::{substream, Stream};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dims: Vec<usize>,
    /// Class separation `s`: row `i` of `Z*` is `s · onehot(y_i)` plus jitter.
    pub separation: f64,
    pub noise_fraction: f64,
    pub noise_magnitude: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            samples_per_class: 100,
            dims: vec![40, 30],
            separation: 5.0,
            noise_fraction: 0.1,
            noise_magnitude: 1.0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OvError::Generation(m));
        if self.classes < 3 {
            return fail(format!("need at least 3 classes, got {}", self.classes));
        }
        if self.samples_per_class < 2 {
            return fail(format!(
                "need at least 2 samples per class, got {}",
                self.samples_per_class
            ));
        }
        if self.dims.is_empty() {
            return fail("need at least one view".into());
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < self.classes) {
            return fail(format!("view dimension {d} < class count {}", self.classes));
        }
        if !(0.0..=0.5).contains(&self.noise_fraction) {
            return fail(format!(
                "noise fraction {} outside [0, 0.5]",
                self.noise_fraction
            ));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("noise_magnitude", self.noise_magnitude),
            ("jitter", self.jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.separation == 0.0 {
            return fail("separation must be positive".into());
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    pub z: Matrix,
    pub dictionaries: Vec<Matrix>,
    pub noise: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFiles {
    pub z: PathBuf,
    pub dictionaries: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

impl Planted {
    pub fn noise_columns(&self, view: usize) -> Vec<usize> {
        self.noise[view]
            .col_norms()
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    /// Writes CSVs plus `planted.json` indexing them.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let z = PathBuf::from("planted_z.csv");
        io::write_matrix_csv(&dir.join(&z), &self.z)?;
        let mut files = PlantedFiles {
            z,
            dictionaries: Vec::new(),
            noise: Vec::new(),
        };
        for (v, (d, e)) in self.dictionaries.iter().zip(&self.noise).enumerate() {
            let dp = PathBuf::from(format!("planted_d_{v}.csv"));
            let ep = PathBuf::from(format!("planted_e_{v}.csv"));
            io::write_matrix_csv(&dir.join(&dp), d)?;
            io::write_matrix_csv(&dir.join(&ep), e)?;
            files.dictionaries.push(dp);
            files.noise.push(ep);
        }
        let path = dir.join("planted.json");
        io::write_json(&path, &files)?;
        Ok(path)
    }

    pub fn load(index: &Path) -> Result<Self> {
        let files: PlantedFiles = io::read_json(index)?;
        let base = index.parent().unwrap_or(Path::new("."));
        Ok(Planted {
            z: io::read_matrix_csv(&base.join(files.z))?,
            dictionaries: files
                .dictionaries
                .iter()
                .map(|p| io::read_matrix_csv(&base.join(p)))
                .collect::<Result<_>>()?,
            noise: files
                .noise
                .iter()
                .map(|p| io::read_matrix_csv(&base.join(p)))
                .collect::<Result<_>>()?,
        })
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    // sigma was validated as finite and non-negative
    Normal::new(0.0, sigma).expect("valid normal")
}

pub fn generate(spec: &SynthSpec) -> Result<(MultiViewDataset, Planted)> {
    spec.validate()?;
    let c = spec.classes;
    let n = c * spec.samples_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i / spec.samples_per_class).collect();

    let mut rng = substream(spec.seed, Stream::Synth, 0);
    let jitter = gaussian(spec.jitter);
    let z = Matrix::from_fn(n, c, |i, j| {
        let base = if labels[i] == j { spec.separation } else { 0.0 };
        base + jitter.sample(&mut rng)
    });

    let mut views = Vec::with_capacity(spec.dims.len());
    let mut dictionaries = Vec::with_capacity(spec.dims.len());
    let mut noise = Vec::with_capacity(spec.dims.len());
    for (v, &d) in spec.dims.iter().enumerate() {
        let mut rng = substream(spec.seed, Stream::Synth, v as u64 + 1);
        let dict = orthonormal_rows(c, d, &mut rng)?;
        let k = (spec.noise_fraction * d as f64).round() as usize;
        let mut e = Matrix::zeros(n, d);
        for j in sample(&mut rng, d, k).into_iter() {
            for i in 0..n {
                e[(i, j)] = if rng.random::<bool>() {
                    spec.noise_magnitude
                } else {
                    -spec.noise_magnitude
                };
            }
        }
        let mut x = z.matmul(&dict)?.add(&e)?;
        if spec.jitter > 0.0 {
            x.as_mut_slice()
                .iter_mut()
                .for_each(|val| *val += jitter.sample(&mut rng));
        }
        views.push(x);
        dictionaries.push(dict);
        noise.push(e);
    }

    let dataset = MultiViewDataset::new(format!("synth-{}", spec.seed), views, labels, c)?;
    Ok((
        dataset,
        Planted {
            z,
            dictionaries,
            noise,
        },
    ))
}
