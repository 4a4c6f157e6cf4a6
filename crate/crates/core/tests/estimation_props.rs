use ahrs_core::estimation::{gae, normalize_advantages, push_history, summarize_branches, BranchStats, EstimationError, StatsHistory};
use ahrs_core::matrix::Matrix;
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d))
}

fn batch(t: usize, b: usize) -> impl Strategy<Value = (Matrix, Matrix, Vec<bool>)> {
    (mat(t, b), mat(t + 1, b), prop::collection::vec(prop::bool::weighted(0.1), t))
}

fn stats(means: &[f64], vars: &[f64], epoch: u64) -> BranchStats {
    BranchStats {
        means: means.to_vec(),
        vars: vars.to_vec(),
        epoch,
    }
}

#[test]
fn base_case_and_monte_carlo() {
    let r = Matrix::from_rows(&[vec![2.0, -1.0]]);
    let v = Matrix::from_rows(&[vec![0.5, 0.25], vec![9.0, 9.0]]);
    let (adv, _) = gae(&r, &v, &[true], 0.99, 0.95).unwrap();
    assert_eq!(adv.row(0), &[1.5, -1.25]);

    // lambda = 1 over a single terminated episode equals discounted sum minus baseline
    let t = 20;
    let gamma = 0.97;
    let rewards: Vec<f64> = (0..t).map(|i| ((i * 7 % 5) as f64) - 1.5).collect();
    let values: Vec<f64> = (0..=t).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut dones = vec![false; t];
    dones[t - 1] = true;
    let (adv, _) = gae(
        &Matrix::from_vec(t, 1, rewards.clone()),
        &Matrix::from_vec(t + 1, 1, values.clone()),
        &dones,
        gamma,
        1.0,
    )
    .unwrap();
    for s in 0..t {
        let g: f64 = (s..t).map(|i| gamma.powi((i - s) as i32) * rewards[i]).sum();
        assert!((adv[(s, 0)] - (g - values[s])).abs() < 1e-10);
    }
}

#[test]
fn shape_and_input_errors() {
    let r = Matrix::zeros(3, 2);
    assert!(matches!(gae(&r, &Matrix::zeros(3, 2), &[false; 3], 0.9, 0.9), Err(EstimationError::ShapeMismatch(_))));
    assert!(matches!(gae(&r, &Matrix::zeros(4, 2), &[false; 2], 0.9, 0.9), Err(EstimationError::ShapeMismatch(_))));
    let mut bad = Matrix::zeros(3, 2);
    bad[(1, 1)] = f64::NAN;
    assert!(matches!(gae(&bad, &Matrix::zeros(4, 2), &[false; 3], 0.9, 0.9), Err(EstimationError::NonFiniteInput(_))));
}

#[test]
fn normalization_examples() {
    let out = normalize_advantages(&Matrix::from_rows(&[vec![-1.0, 3.0], vec![1.0, 3.0]]));
    assert_eq!(out.col(0), vec![-1.0, 1.0]);
    assert_eq!(out.col(1), vec![0.0, 0.0]);
}

#[test]
fn summary_examples() {
    let s = summarize_branches(&Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]), 4).unwrap();
    assert_eq!(s.means, vec![2.0, 5.0]);
    assert_eq!(s.vars, vec![1.0, 0.0]);
    let s = summarize_branches(&Matrix::from_rows(&[vec![1.5, -2.0]]), 1).unwrap();
    assert_eq!(s.vars, vec![0.0, 0.0]);
    assert!(matches!(summarize_branches(&Matrix::with_cols(2), 1), Err(EstimationError::EmptyWindow)));
}

#[test]
fn history_examples() {
    let mut h = StatsHistory::new();
    for e in 1..=6 {
        h = push_history(h, stats(&[e as f64], &[0.0], e)).unwrap();
    }
    assert_eq!(h.len(), 5);
    assert_eq!(h.iter().next().unwrap().epoch, 2);
    assert!(matches!(
        push_history(h, stats(&[0.0], &[0.0], 6)),
        Err(EstimationError::NonMonotonicEpoch { .. })
    ));
    let h = push_history(StatsHistory::new(), stats(&[1.0], &[0.0], 1)).unwrap();
    assert_eq!(h.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn branch_linearity((r, v, d) in batch(50, 4), gamma in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
        let (adv, _) = gae(&r, &v, &d, gamma, lambda).unwrap();
        let (scalar, _) = gae(&r.sum_cols(), &v.sum_cols(), &d, gamma, lambda).unwrap();
        for t in 0..50 {
            let summed: f64 = adv.row(t).iter().sum();
            prop_assert!((summed - scalar[(t, 0)]).abs() < 1e-10, "t={} {} vs {}", t, summed, scalar[(t, 0)]);
        }
    }

    #[test]
    fn lambda_zero_is_td((r, v, d) in batch(30, 3), gamma in 0.0f64..=1.0) {
        let (adv, _) = gae(&r, &v, &d, gamma, 0.0).unwrap();
        for t in 0..30 {
            let nd = if d[t] { 0.0 } else { 1.0 };
            for k in 0..3 {
                let delta = r[(t, k)] + gamma * nd * v[(t + 1, k)] - v[(t, k)];
                prop_assert_eq!(adv[(t, k)], delta);
            }
        }
    }

    #[test]
    fn returns_minus_advantages_is_values((r, v, d) in batch(40, 2), gamma in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
        let (adv, ret) = gae(&r, &v, &d, gamma, lambda).unwrap();
        for t in 0..40 {
            for k in 0..2 {
                prop_assert!((ret[(t, k)] - adv[(t, k)] - v[(t, k)]).abs() <= 1e-12 * (1.0 + ret[(t, k)].abs()));
            }
        }
    }

    #[test]
    fn normalized_columns_centered(a in mat(20, 3)) {
        let out = normalize_advantages(&a);
        for k in 0..3 {
            let c = out.col(k);
            let mean = c.iter().sum::<f64>() / 20.0;
            prop_assert!(mean.abs() < 1e-10);
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0;
            prop_assert!((var - 1.0).abs() < 1e-9 || var == 0.0);
        }
    }

    #[test]
    fn summary_permutation_invariant(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..12), shift in 0usize..12) {
        let n = rows.len();
        let rotated: Vec<Vec<f64>> = (0..n).map(|i| rows[(i + shift) % n].clone()).collect();
        let a = summarize_branches(&Matrix::from_rows(&rows), 1).unwrap();
        let b = summarize_branches(&Matrix::from_rows(&rotated), 1).unwrap();
        for k in 0..3 {
            prop_assert!((a.means[k] - b.means[k]).abs() < 1e-12);
            prop_assert!((a.vars[k] - b.vars[k]).abs() < 1e-12);
            prop_assert!(a.vars[k] >= 0.0);
        }
    }

    #[test]
    fn history_capped_and_ordered(epochs in prop::collection::vec(1u64..40, 1..30)) {
        let mut h = StatsHistory::new();
        for e in epochs {
            match push_history(h.clone(), stats(&[e as f64], &[1.0], e)) {
                Ok(next) => h = next,
                Err(EstimationError::NonMonotonicEpoch { .. }) => {}
                Err(other) => return Err(TestCaseError::fail(format!("{other}"))),
            }
            prop_assert!(h.len() <= 5);
            let es: Vec<u64> = h.iter().map(|s| s.epoch).collect();
            prop_assert!(es.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
