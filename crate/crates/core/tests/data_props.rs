mod common;

use std::collections::HashSet;

use common::{hr_oracle, ndcg_oracle};
use jagrec::data::{five_core_filter, group_sequences, hr_at_k, leave_one_out_split, ndcg_at_k, Interaction, InteractionLog};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn log_strategy() -> impl Strategy<Value = InteractionLog> {
    prop::collection::vec((0u64..40, 0u64..30, 0i64..1000), 0..600).prop_map(|rows| InteractionLog {
        records: rows
            .into_iter()
            .map(|(user_id, item_id, timestamp)| Interaction { user_id, item_id, timestamp, click: true, ..Interaction::default() })
            .collect(),
        skipped: 0,
    })
}

fn rankings() -> impl Strategy<Value = (Vec<Vec<u64>>, Vec<u64>)> {
    prop::collection::vec((prop::collection::vec(0u64..50, 0..30), 0u64..50), 1..40)
        .prop_map(|rows| rows.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn five_core_is_idempotent_and_satisfied(log in log_strategy()) {
        let once = five_core_filter(&log);
        let twice = five_core_filter(&once.log);
        prop_assert_eq!(&once.log, &twice.log);
        prop_assert_eq!(twice.rounds, 1);
        for r in &once.log.records {
            let by_user = once.log.records.iter().filter(|x| x.user_id == r.user_id).count();
            let item_users: HashSet<u64> =
                once.log.records.iter().filter(|x| x.item_id == r.item_id).map(|x| x.user_id).collect();
            prop_assert!(by_user >= 5 && item_users.len() >= 5);
        }
    }

    #[test]
    fn leave_one_out_is_disjoint_and_exhaustive(log in log_strategy()) {
        let seqs = group_sequences(&five_core_filter(&log).log);
        let split = leave_one_out_split(&seqs).unwrap();
        prop_assert_eq!(split.train.len(), seqs.users.len());
        for (u, seq) in &seqs.users {
            let train = &split.train[u];
            let test = split.test[u];
            // Positions partition the sequence: every event lands in exactly one side.
            prop_assert_eq!(train.len() + 1, seq.len());
            let mut rebuilt = train.clone();
            rebuilt.push(test);
            prop_assert_eq!(rebuilt, seq.iter().map(|x| x.0).collect::<Vec<_>>());
            let last_ts = seq.iter().map(|x| x.1).max().unwrap();
            prop_assert_eq!(seq.last().unwrap().1, last_ts);
        }
    }

    #[test]
    fn metrics_match_oracles_exactly((ranked, truth) in rankings(), k in 1usize..35) {
        prop_assert_eq!(hr_at_k(&ranked, &truth, k).unwrap(), hr_oracle(&ranked, &truth, k));
        prop_assert_eq!(ndcg_at_k(&ranked, &truth, k).unwrap(), ndcg_oracle(&ranked, &truth, k));
    }

    #[test]
    fn metrics_grow_with_k((ranked, truth) in rankings(), k in 1usize..34) {
        prop_assert!(hr_at_k(&ranked, &truth, k).unwrap() <= hr_at_k(&ranked, &truth, k + 1).unwrap());
        prop_assert!(ndcg_at_k(&ranked, &truth, k).unwrap() <= ndcg_at_k(&ranked, &truth, k + 1).unwrap());
        prop_assert!(ndcg_at_k(&ranked, &truth, k).unwrap() <= hr_at_k(&ranked, &truth, k).unwrap());
    }
}

#[test]
fn random_ranking_hit_rate_is_k_over_pool() {
    let mut rng = jagrec::rng::stream(301, &[]);
    let (users, pool) = (20_000usize, 200u64);
    for k in [1usize, 10, 50, 100] {
        let mut ranked = Vec::with_capacity(users);
        let mut truth = Vec::with_capacity(users);
        for u in 0..users {
            let mut items: Vec<u64> = (0..pool).collect();
            items.shuffle(&mut rng);
            ranked.push(items);
            truth.push(u as u64 % pool);
        }
        let p = k as f64 / pool as f64;
        let sigma = (p * (1.0 - p) / users as f64).sqrt();
        let hr = hr_at_k(&ranked, &truth, k).unwrap();
        assert!((hr - p).abs() <= 3.0 * sigma, "K={k}: {hr} vs {p} ± {}", 3.0 * sigma);
    }
}
