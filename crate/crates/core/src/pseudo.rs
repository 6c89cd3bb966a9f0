//! Pseudo-unknown samples built by mixing pairs of samples from different
//! known classes.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{OvError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    /// Shape of the symmetric Beta(ω, ω) mixing distribution.
    pub omega: f64,
    /// Pseudo rows per known row in a batch.
    pub pseudo_ratio: f64,
    /// Draw a separate coefficient for every view.
    pub per_view_zeta: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            omega: 2.0,
            pseudo_ratio: 1.0,
            per_view_zeta: false,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(OvError::Config(format!(
                "omega must be positive, got {}",
                self.omega
            )));
        }
        if !(self.pseudo_ratio > 0.0 && self.pseudo_ratio <= 1.0) {
            return Err(OvError::Config(format!(
                "pseudo_ratio must lie in (0, 1], got {}",
                self.pseudo_ratio
            )));
        }
        Ok(())
    }

    /// Number of pseudo rows generated for `known` source rows.
    pub fn pseudo_count(&self, known: usize) -> usize {
        (self.pseudo_ratio * known as f64).ceil() as usize
    }
}

/// Draws from Beta(ω, ω) as `g₁ / (g₁ + g₂)` with independent Gamma(ω, 1).
pub fn sample_beta<R: Rng + ?Sized>(omega: f64, rng: &mut R) -> Result<f64> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(OvError::Domain(format!(
            "Beta shape must be positive, got {omega}"
        )));
    }
    let gamma = Gamma::new(omega, 1.0).map_err(|e| OvError::Domain(e.to_string()))?;
    loop {
        let g1: f64 = gamma.sample(rng);
        let g2: f64 = gamma.sample(rng);
        let s = g1 + g2;
        // both draws underflow to 0 only for tiny ω; redraw
        if s > 0.0 {
            return Ok(g1 / s);
        }
    }
}

/// Provenance of one pseudo row: rows `i` and `j` of the source batch and
/// the per-view coefficients applied to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixRecord {
    pub i: usize,
    pub j: usize,
    pub zeta: Vec<f64>,
}

/// Appends pseudo-unknown rows labelled `unknown_label` to `batch`.
pub fn generate_pseudo<R: Rng + ?Sized>(
    batch: &Batch,
    config: &MixConfig,
    unknown_label: usize,
    rng: &mut R,
) -> Result<(Batch, Vec<MixRecord>)> {
    config.validate()?;
    let sources = batch.known_rows();
    let class_count = sources
        .iter()
        .map(|&r| batch.labels[r] + 1)
        .max()
        .unwrap_or(0);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for &r in &sources {
        buckets[batch.labels[r]].push(r);
    }
    if buckets.iter().filter(|b| !b.is_empty()).count() < 2 {
        return Err(OvError::Generation(
            "batch needs samples from at least 2 classes".into(),
        ));
    }

    let count = config.pseudo_count(sources.len());
    let view_count = batch.views.len();
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let i = sources[rng.random_range(0..sources.len())];
        let own = batch.labels[i];
        let mut k = rng.random_range(0..sources.len() - buckets[own].len());
        let mut j = usize::MAX;
        for (c, bucket) in buckets.iter().enumerate() {
            if c == own {
                continue;
            }
            if k < bucket.len() {
                j = bucket[k];
                break;
            }
            k -= bucket.len();
        }
        let zeta = if config.per_view_zeta {
            (0..view_count)
                .map(|_| sample_beta(config.omega, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![sample_beta(config.omega, rng)?; view_count]
        };
        records.push(MixRecord { i, j, zeta });
    }

    let views = batch
        .views
        .iter()
        .enumerate()
        .map(|(v, x)| {
            let mixed = Matrix::from_fn(count, x.cols(), |r, c| {
                let rec = &records[r];
                let z = rec.zeta[v];
                z * x[(rec.i, c)] + (1.0 - z) * x[(rec.j, c)]
            });
            Matrix::vstack(&[x, &mixed])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut labels = batch.labels.clone();
    labels.extend(std::iter::repeat_n(unknown_label, count));
    let mut is_pseudo = batch.is_pseudo.clone();
    is_pseudo.extend(std::iter::repeat_n(true, count));
    Ok((
        Batch {
            views,
            labels,
            is_pseudo,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(labels: Vec<usize>) -> Batch {
        let n = labels.len();
        Batch {
            views: vec![
                Matrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64),
                Matrix::from_fn(n, 3, |i, j| (i as f64).sin() + j as f64),
            ],
            is_pseudo: vec![false; n],
            labels,
        }
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut xs: Vec<f64> = (0..100_000)
            .map(|_| sample_beta(1.0, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                ((k as f64 + 1.0) / n - x)
                    .abs()
                    .max((x - k as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS {ks}");
    }

    #[test]
    fn beta_symmetric_mean_and_support() {
        for omega in [0.2, 2.0, 10.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let xs: Vec<f64> = (0..100_000)
                .map(|_| sample_beta(omega, &mut rng).unwrap())
                .collect();
            assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((mean - 0.5).abs() < 0.01, "ω={omega}: {mean}");
        }
        assert!(sample_beta(0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_doubles_with_ratio_one() {
        let b = batch((0..50).map(|i| i % 5).collect());
        let (out, rec) = generate_pseudo(
            &b,
            &MixConfig::default(),
            5,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(out.is_pseudo.iter().filter(|&&p| p).count(), 50);
        assert!(out.labels[50..].iter().all(|&l| l == 5));
        assert_eq!(rec.len(), 50);
        for v in &out.views {
            assert_eq!(v.rows(), 100);
        }
    }

    #[test]
    fn pseudo_rows_lie_on_segments() {
        let b = batch((0..20).map(|i| i % 3).collect());
        for per_view in [false, true] {
            let cfg = MixConfig {
                per_view_zeta: per_view,
                pseudo_ratio: 0.5,
                ..MixConfig::default()
            };
            let (out, rec) =
                generate_pseudo(&b, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(rec.len(), 10);
            for (r, m) in rec.iter().enumerate() {
                assert_ne!(b.labels[m.i], b.labels[m.j]);
                if !per_view {
                    assert!(m.zeta.iter().all(|&z| z == m.zeta[0]));
                }
                for (v, x) in b.views.iter().enumerate() {
                    for c in 0..x.cols() {
                        let want = m.zeta[v] * x[(m.i, c)] + (1.0 - m.zeta[v]) * x[(m.j, c)];
                        assert_eq!(out.views[v][(20 + r, c)], want);
                    }
                }
            }
        }
    }

    #[test]
    fn mixing_endpoints() {
        let x = Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        let mix = |z: f64| Matrix::from_fn(1, 2, |_, c| z * x[(0, c)] + (1.0 - z) * x[(1, c)]);
        assert_eq!(mix(0.5).as_slice(), &[1.0, 1.0]);
        assert_eq!(mix(1.0).as_slice(), x.row(0));
    }

    #[test]
    fn reproducible_and_single_class_error() {
        let b = batch((0..10).map(|i| i % 2).collect());
        let cfg = MixConfig::default();
        let a = generate_pseudo(&b, &cfg, 2, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .0;
        let c = generate_pseudo(&b, &cfg, 2, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .0;
        assert_eq!(a, c);
        let single = batch(vec![1; 6]);
        assert!(matches!(
            generate_pseudo(&single, &cfg, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(OvError::Generation(_))
        ));
        let bad = MixConfig {
            pseudo_ratio: 1.5,
            ..cfg
        };
        assert!(generate_pseudo(&b, &bad, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
