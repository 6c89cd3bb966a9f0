use openviewer::admm::AdmmConfig;
use openviewer::dataset::{openness_split, Batch, MultiViewDataset, SplitRatios};
use openviewer::eval::{ccr_at_fpr, contraction_diagnostic, oscr_curve, ScoredPrediction};
use openviewer::losses::{gradient_bound, known_loss, total_loss, update_centers, LossConfig};
use openviewer::pseudo::{generate_pseudo, MixConfig};
use openviewer::rng::{substream, Stream};
use openviewer::tensor::{
    group_soft_threshold_values, soft_threshold_values, GroupAxis, Matrix, Tape,
};
use openviewer::unfold::{fusion_weights, init_params, LayerParams};
use proptest::prelude::*;
use std::collections::BTreeSet;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn pair(rows: usize, cols: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (matrix(rows, cols, 5.0), matrix(rows, cols, 5.0))
}

fn dataset(classes: usize, per_class: usize) -> MultiViewDataset {
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let views = vec![
        Matrix::from_fn(n, 3, |i, j| (i * 7 + j) as f64 * 0.1),
        Matrix::from_fn(n, 2, |i, j| (i as f64 - j as f64).sin()),
    ];
    MultiViewDataset::new("prop", views, labels, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prox_operators_are_nonexpansive((a, b) in pair(4, 5), theta in 0.0..3.0f64) {
        let d = a.sub(&b).unwrap().frobenius_norm();
        let s = soft_threshold_values(&a, theta).sub(&soft_threshold_values(&b, theta)).unwrap();
        prop_assert!(s.frobenius_norm() <= d + 1e-12);
        for axis in [GroupAxis::Columns, GroupAxis::Rows] {
            let g = group_soft_threshold_values(&a, theta, axis)
                .sub(&group_soft_threshold_values(&b, theta, axis))
                .unwrap();
            prop_assert!(g.frobenius_norm() <= d + 1e-12);
        }
    }

    #[test]
    fn zero_threshold_is_identity(a in matrix(3, 6, 10.0)) {
        prop_assert_eq!(soft_threshold_values(&a, 0.0), a.clone());
        prop_assert_eq!(group_soft_threshold_values(&a, 0.0, GroupAxis::Columns), a.clone());
        prop_assert_eq!(group_soft_threshold_values(&a, 0.0, GroupAxis::Rows), a);
    }

    #[test]
    fn identity_product_is_bitwise(a in matrix(5, 4, 3.0), b in matrix(4, 3, 3.0)) {
        let ai = a.matmul(&Matrix::identity(4)).unwrap();
        prop_assert_eq!(ai.matmul(&b).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn split_partitions_samples(classes in 3usize..9, per_class in 5usize..20, openness in 0.0..0.3f64, seed in any::<u64>()) {
        let ds = dataset(classes, per_class);
        let ratios = SplitRatios { train: 0.5, val: 0.2, test: 0.3 };
        let s = openness_split(&ds, openness, ratios, seed).unwrap();
        prop_assert_eq!(&s, &openness_split(&ds, openness, ratios, seed).unwrap());

        let mut seen = BTreeSet::new();
        for &i in s.train_idx.iter().chain(&s.val_idx).chain(&s.test_idx) {
            prop_assert!(seen.insert(i), "sample {} used twice", i);
        }
        prop_assert_eq!(seen.len(), ds.len());
        for &i in s.train_idx.iter().chain(&s.val_idx) {
            prop_assert!(!s.is_unknown(ds.labels[i]));
        }
        for &c in &s.unknown_classes {
            prop_assert!(ds.indices_of_class(c).iter().all(|i| s.test_idx.contains(i)));
        }
    }

    #[test]
    fn pseudo_rows_lie_on_segments(seed in any::<u64>(), per_view in any::<bool>(), omega in 0.5..4.0f64) {
        let ds = dataset(4, 6);
        let split = openness_split(&ds, 0.0, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }, 0).unwrap();
        let base = Batch::gather(&ds, &split, &split.train_idx).unwrap();
        let cfg = MixConfig { omega, per_view_zeta: per_view, ..MixConfig::default() };
        let (batch, records) = generate_pseudo(&base, &cfg, 4, &mut substream(seed, Stream::Beta, 0)).unwrap();
        let (again, _) = generate_pseudo(&base, &cfg, 4, &mut substream(seed, Stream::Beta, 0)).unwrap();
        prop_assert_eq!(&batch, &again);
        let n = base.len();
        for (r, rec) in records.iter().enumerate() {
            prop_assert_ne!(base.labels[rec.i], base.labels[rec.j]);
            prop_assert!(batch.is_pseudo[n + r]);
            for (v, x) in base.views.iter().enumerate() {
                let z = rec.zeta[v];
                prop_assert!(z > 0.0 && z < 1.0);
                for c in 0..x.cols() {
                    let expect = z * x[(rec.i, c)] + (1.0 - z) * x[(rec.j, c)];
                    prop_assert_eq!(batch.views[v][(n + r, c)], expect);
                }
            }
        }
    }

    #[test]
    fn fusion_weights_on_simplex(a in matrix(12, 3, 4.0), b in matrix(12, 3, 4.0), c in matrix(12, 3, 0.5)) {
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let w = fusion_weights(&[&a, &b, &c], &labels).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        // identical views get identical weights
        let same = fusion_weights(&[&a, &a], &labels).unwrap();
        prop_assert_eq!(same[0], same[1]);
    }

    #[test]
    fn oscr_monotone_and_ccr_monotone_in_target(
        rows in prop::collection::vec((0.0..1.0f64, any::<bool>(), any::<bool>()), 2..60),
    ) {
        let mut preds: Vec<ScoredPrediction> = rows
            .iter()
            .enumerate()
            .map(|(i, &(conf, known, correct))| ScoredPrediction {
                index: i,
                predicted: usize::from(!correct),
                confidence: (conf * 20.0).round() / 20.0,
                label: 0,
                truth: known.then_some(0),
            })
            .collect();
        preds[0].truth = Some(0);
        preds[1].truth = None;
        let curve = oscr_curve(&preds).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].ccr <= w[1].ccr && w[0].fpr <= w[1].fpr);
        }
        let mut last = 0.0;
        for k in 1..=20 {
            let v = ccr_at_fpr(&curve, k as f64 / 20.0).unwrap();
            prop_assert!(v >= last && (0.0..=1.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn center_update_with_zero_rate_is_identity(c in matrix(3, 4, 2.0), z in matrix(6, 4, 2.0)) {
        let labels = [0, 1, 2, 2, 1, 0];
        prop_assert_eq!(update_centers(&c, &z, &labels, 0.0).unwrap(), c.clone());
        prop_assert_eq!(update_centers(&c, &z, &labels, 0.7).unwrap(), update_centers(&c, &z, &labels, 0.7).unwrap());
    }

    #[test]
    fn loss_collapses_without_weights(z in matrix(8, 4, 4.0), c in matrix(4, 4, 1.0)) {
        let labels = [0, 1, 2, 3, 4, 4, 0, 4];
        let is_pseudo: Vec<bool> = labels.iter().map(|&l| l == 4).collect();
        let cfg = LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };
        let mut t = Tape::new();
        let v = t.constant(z.clone());
        let (total, _) = total_loss(&mut t, v, &labels, &is_pseudo, &c, &cfg).unwrap();
        let known_rows = [0usize, 1, 2, 3, 6];
        let zk = t.constant(z.select_rows(&known_rows));
        let k = known_loss(&mut t, zk, &[0, 1, 2, 3, 0], cfg.xi).unwrap();
        prop_assert_eq!(t.value(total).item(), t.value(k).item());
    }

    #[test]
    fn gradient_never_exceeds_bound(z in matrix(10, 4, 8.0), c in matrix(4, 4, 3.0), l1 in 0.0..1.0f64, l2 in 0.0..1.0f64) {
        let labels = [0, 1, 2, 3, 0, 1, 4, 4, 4, 2];
        let is_pseudo: Vec<bool> = labels.iter().map(|&l| l == 4).collect();
        let cfg = LossConfig { lambda1: l1, lambda2: l2, ..LossConfig::default() };
        let mut t = Tape::new();
        let v = t.leaf(z.clone());
        let (loss, _) = total_loss(&mut t, v, &labels, &is_pseudo, &c, &cfg).unwrap();
        let g = t.backward(loss).unwrap().get_or_zeros(v).frobenius_norm();
        prop_assert!(g <= gradient_bound(&z, &labels, &is_pseudo, &c, &cfg));
    }

    #[test]
    fn contraction_bound_for_scaled_identity(s in 0.0..0.99f64, theta in 0.0..1.0f64, seed in any::<u64>()) {
        let mut params = init_params(&[6], 4, 1, &AdmmConfig::default(), seed, None).unwrap();
        let layer: &mut LayerParams = &mut params.views[0].layers[0];
        layer.r = Matrix::identity(4).scale(s);
        layer.theta = theta;
        let report = contraction_diagnostic(&params, 0, 0, 50, seed).unwrap();
        prop_assert!(report.bound_holds && report.contractive);
        prop_assert!(report.max_ratio <= s + 1e-9);
    }
}
