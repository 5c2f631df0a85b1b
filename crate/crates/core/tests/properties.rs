use proptest::prelude::*;

use threepath::checker::{check_linearizable, History, HistoryEvent, Op, OracleDict, Verdict};
use threepath::policy::PolicyKind;
use threepath::trees::{AbTree, Bst, Dictionary, TreeConfig};
use threepath::txn::TxnConfig;
use threepath::workload::sample_range_size;

fn op_strategy(keys: u64) -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..keys, 0..100u64).prop_map(|(key, value)| Op::Insert { key, value }),
        3 => (0..keys).prop_map(|key| Op::Delete { key }),
        2 => (0..keys).prop_map(|key| Op::Search { key }),
        1 => (0..keys, 0..keys).prop_map(|(lo, len)| Op::RangeQuery { lo, hi: lo + len }),
    ]
}

fn policy_strategy() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(PolicyKind::ALL.to_vec())
}

fn config(policy: PolicyKind, spurious: f64, small: bool) -> TreeConfig {
    let mut c = TreeConfig::new(policy);
    c.txn = TxnConfig {
        spurious_abort_prob: spurious,
        ..TxnConfig::default()
    };
    if small {
        c.a = 2;
        c.b = 5;
    }
    c
}

fn matches_oracle(d: &dyn Dictionary, ops: &[Op]) -> Result<(), TestCaseError> {
    let mut w = d.register();
    let mut oracle = OracleDict::default();
    for op in ops {
        prop_assert_eq!(op.apply(d, &mut w), oracle.apply(*op), "{}", op);
    }
    d.rebalance_all(&mut w);
    prop_assert_eq!(d.validate(), Vec::<String>::new());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bst_matches_oracle(
        policy in policy_strategy(),
        spurious in prop::sample::select(vec![0.0, 0.5, 1.0]),
        ops in prop::collection::vec(op_strategy(40), 1..300),
    ) {
        matches_oracle(&Bst::new(config(policy, spurious, false)).unwrap(), &ops)?;
    }

    #[test]
    fn abtree_matches_oracle(
        policy in policy_strategy(),
        spurious in prop::sample::select(vec![0.0, 0.5, 1.0]),
        small in any::<bool>(),
        ops in prop::collection::vec(op_strategy(120), 1..400),
    ) {
        matches_oracle(&AbTree::new(config(policy, spurious, small)).unwrap(), &ops)?;
    }

    #[test]
    fn range_query_is_sorted_and_bounded(
        keys in prop::collection::btree_set(0..1000u64, 0..200),
        lo in 0..1000u64,
        len in 0..1000u64,
    ) {
        let t = AbTree::new(config(PolicyKind::ThreePath, 0.0, true)).unwrap();
        let mut w = t.register();
        for &k in &keys {
            t.insert(&mut w, k, k + 1);
        }
        let got = t.range_query(&mut w, lo, lo + len);
        let want: Vec<(u64, u64)> = keys.range(lo..lo + len).map(|&k| (k, k + 1)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn sequential_histories_are_linearizable(ops in prop::collection::vec(op_strategy(6), 0..36)) {
        let mut oracle = OracleDict::default();
        let events = ops
            .iter()
            .enumerate()
            .map(|(i, &op)| HistoryEvent {
                thread: i % 3,
                op,
                response: oracle.apply(op),
                invoked: 2 * i as u64 + 1,
                responded: 2 * i as u64 + 2,
            })
            .collect();
        prop_assert_eq!(check_linearizable(&History { events }), Ok(Verdict::Ok));
    }

    #[test]
    fn widening_intervals_keeps_a_history_linearizable(
        ops in prop::collection::vec(op_strategy(6), 1..24),
        stretch in prop::collection::vec(0..6u64, 24),
    ) {
        // Each thread's ops stay sequential; ops only gain overlap with
        // other threads, which can only add legal orders.
        let mut oracle = OracleDict::default();
        let mut events: Vec<HistoryEvent> = ops
            .iter()
            .enumerate()
            .map(|(i, &op)| HistoryEvent {
                thread: i % 3,
                op,
                response: oracle.apply(op),
                invoked: 100 * i as u64 + 50,
                responded: 100 * i as u64 + 51,
            })
            .collect();
        for (i, e) in events.iter_mut().enumerate() {
            e.invoked -= stretch[i] * 8;
            e.responded += stretch[i] * 8;
        }
        prop_assert_eq!(check_linearizable(&History { events }), Ok(Verdict::Ok));
    }

    #[test]
    fn history_text_round_trips(ops in prop::collection::vec(op_strategy(50), 0..20)) {
        let mut oracle = OracleDict::default();
        let h = History {
            events: ops
                .iter()
                .enumerate()
                .map(|(i, &op)| HistoryEvent {
                    thread: i % 4,
                    op,
                    response: oracle.apply(op),
                    invoked: 2 * i as u64,
                    responded: 2 * i as u64 + 1,
                })
                .collect(),
        };
        prop_assert_eq!(h.to_string().parse::<History>().unwrap(), h);
    }

    #[test]
    fn range_size_formula(x in 0.0..1.0f64, s in 1..100_000u64) {
        let v = sample_range_size(x, s);
        prop_assert!(v >= 1 && v <= s);
        prop_assert_eq!(v, ((x * x * s as f64).floor() as u64 + 1).min(s));
    }
}
