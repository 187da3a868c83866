use iaraudit_core::metrics::{auc, tpr_at_fpr, RocCurve};
use iaraudit_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

/// Mann-Whitney by direct pair counting; ties count one half.
fn pairwise_auc(m: &[f64], n: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in m {
        for &b in n {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (m.len() * n.len()) as f64
}

/// Tries every observed score as a `score >= threshold` cut, plus a cut
/// above all scores, and keeps the best TPR whose FPR is within target.
fn sweep_tpr(m: &[f64], n: &[f64], target: f64) -> f64 {
    let mut cuts: Vec<f64> = m.iter().chain(n).copied().collect();
    cuts.push(f64::INFINITY);
    let mut best = 0.0f64;
    for t in cuts {
        let tp = m.iter().filter(|&&x| x >= t).count() as f64 / m.len() as f64;
        let fp = n.iter().filter(|&&x| x >= t).count() as f64 / n.len() as f64;
        if fp <= target {
            best = best.max(tp);
        }
    }
    best
}

fn draws(seed: u64, count: usize, shift: f64, grid: bool) -> Vec<f64> {
    let mut rng = stream(seed, &[count as u64]);
    (0..count)
        .map(|_| {
            let x: f64 = rng.random::<f64>() * 4.0 + shift;
            if grid {
                (x * 4.0).round() / 4.0
            } else {
                x
            }
        })
        .collect()
}

#[test]
fn auc_matches_pairwise_count_at_n_200() {
    for seed in 0..10 {
        for grid in [false, true] {
            let m = draws(seed, 200, 0.7, grid);
            let n = draws(seed + 100, 200, 0.0, grid);
            let fast = auc(&m, &n).unwrap();
            assert!((fast - pairwise_auc(&m, &n)).abs() < 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn tpr_matches_exhaustive_sweep_on_20_by_20() {
    for seed in 0..50 {
        for grid in [false, true] {
            let m = draws(seed, 20, 0.5, grid);
            let n = draws(seed + 1000, 20, 0.0, grid);
            for target in [0.01, 0.05, 0.1, 0.25, 0.5, 0.99] {
                assert_eq!(
                    tpr_at_fpr(&m, &n, target).unwrap(),
                    sweep_tpr(&m, &n, target),
                    "seed {seed} target {target}"
                );
            }
        }
    }
}

#[test]
fn roc_points_are_the_sweep_points() {
    let m = [0.9, 0.8, 0.8, 0.4, 0.1];
    let n = [0.85, 0.8, 0.3, 0.2];
    let roc = RocCurve::new(&m, &n).unwrap();
    for p in &roc.points {
        assert!(sweep_tpr(&m, &n, p.fpr) >= p.tpr);
    }
    assert_eq!(roc.tpr_at(0.0), 0.2);
    assert_eq!(roc.tpr_at(0.25), 0.2);
    assert_eq!(roc.tpr_at(0.5), 0.8);
}

proptest! {
    #[test]
    fn tpr_matches_sweep_with_ties(
        m in proptest::collection::vec(-6i32..6, 1..40),
        n in proptest::collection::vec(-6i32..6, 1..40),
        target in 0.001f64..1.0,
    ) {
        let m: Vec<f64> = m.into_iter().map(|v| f64::from(v) / 2.0).collect();
        let n: Vec<f64> = n.into_iter().map(|v| f64::from(v) / 2.0).collect();
        prop_assert_eq!(tpr_at_fpr(&m, &n, target).unwrap(), sweep_tpr(&m, &n, target));
    }

    #[test]
    fn auc_matches_pairwise_on_reals(
        m in proptest::collection::vec(-1e3f64..1e3, 1..60),
        n in proptest::collection::vec(-1e3f64..1e3, 1..60),
    ) {
        prop_assert!((auc(&m, &n).unwrap() - pairwise_auc(&m, &n)).abs() < 1e-12);
    }
}
