use ahrs_core::estimation::{BranchStats, StatsHistory};
use ahrs_core::rules::{compute_weights, list_rules, rule, rules_prompt_block, RuleError};
use proptest::prelude::*;

fn st(means: &[f64], vars: &[f64], epoch: u64) -> BranchStats {
    BranchStats {
        means: means.to_vec(),
        vars: vars.to_vec(),
        epoch,
    }
}

fn stats_strategy() -> impl Strategy<Value = BranchStats> {
    (2usize..7).prop_flat_map(|b| {
        (prop::collection::vec(-100.0f64..100.0, b), prop::collection::vec(0.0f64..50.0, b))
            .prop_map(|(m, v)| st(&m, &v, 50))
    })
}

fn history_for(b: usize, seed: f64) -> StatsHistory {
    let mut h = StatsHistory::new();
    for e in 1..=4u64 {
        let m: Vec<f64> = (0..b).map(|k| (seed + k as f64 * e as f64).sin() * 10.0).collect();
        h.push(st(&m, &vec![1.0; b], e * 10)).unwrap();
    }
    h
}

#[test]
fn catalog() {
    let rules = list_rules();
    assert_eq!(rules.len(), 8);
    let ids: Vec<u8> = rules.iter().map(|r| r.id).collect();
    assert_eq!(ids, (1..=8).collect::<Vec<u8>>());
    assert!(rules.iter().all(|r| !r.description.is_empty()));
    assert!(rule(3).unwrap().description.contains("mean_returns + var_returns"));
    let block = rules_prompt_block();
    assert_eq!(block, rules_prompt_block());
    assert!(block.contains("Prioritize components with higher mean returns"));
    for i in 1..=8 {
        assert!(block.contains(&format!("{i}.")));
    }
    assert!(!block.contains("9."));
    assert!(matches!(rule(0), Err(RuleError::UnknownRule(0))));
    assert!(matches!(rule(9), Err(RuleError::UnknownRule(9))));
}

#[test]
fn examples() {
    let h = StatsHistory::new();
    let w = compute_weights(1, &st(&[0.0, 10.0], &[3.0, 1.0], 1), &h).unwrap();
    assert_eq!(w.weights, vec![0.5, 1.0]);
    let w = compute_weights(3, &st(&[1.0, 2.0], &[0.5, 0.5], 1), &h).unwrap();
    assert_eq!(w.weights, vec![0.5, 1.0]);
    for id in 1..=8 {
        let w = compute_weights(id, &st(&[2.0; 4], &[1.0; 4], 1), &h).unwrap();
        assert_eq!(w.weights, vec![0.75; 4]);
    }
    for id in [4, 8] {
        let w = compute_weights(id, &st(&[1.0, 5.0, -3.0], &[0.0, 1.0, 2.0], 1), &h).unwrap();
        assert_eq!(w.weights, vec![0.75; 3]);
    }
    assert!(matches!(
        compute_weights(1, &st(&[f64::NAN, 0.0], &[0.0, 0.0], 1), &h),
        Err(RuleError::NonFiniteStats)
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_in_range(s in stats_strategy(), id in 1i64..=8, seed in -5.0f64..5.0) {
        let b = s.means.len();
        for h in [StatsHistory::new(), history_for(b, seed)] {
            let w = compute_weights(id, &s, &h).unwrap();
            prop_assert_eq!(w.weights.len(), b);
            prop_assert!(w.weights.iter().all(|x| (0.5..=1.0).contains(x)), "{:?}", w.weights);
            prop_assert_eq!(w.rule_id, Some(id as u8));
            prop_assert_eq!(&w, &compute_weights(id, &s, &h).unwrap());
        }
    }

    #[test]
    fn monotone_rules(s in stats_strategy()) {
        let h = StatsHistory::new();
        let b = s.means.len();
        let score = |id: i64, k: usize| match id {
            1 => s.means[k],
            2 => s.vars[k],
            _ => s.means[k] + s.vars[k],
        };
        for id in 1..=3 {
            let w = compute_weights(id, &s, &h).unwrap().weights;
            for i in 0..b {
                for j in 0..b {
                    if score(id, i) > score(id, j) {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn rule_one_affine_invariant(s in stats_strategy(), a in 0.1f64..10.0, c in -50.0f64..50.0) {
        let h = StatsHistory::new();
        let base = compute_weights(1, &s, &h).unwrap().weights;
        let moved = st(&s.means.iter().map(|m| a * m + c).collect::<Vec<_>>(), &s.vars, s.epoch);
        let w = compute_weights(1, &moved, &h).unwrap().weights;
        for (x, y) in base.iter().zip(&w) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", base, w);
        }
    }
}
