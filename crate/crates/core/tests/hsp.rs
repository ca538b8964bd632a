use jagrec::hsp::{all_to_all_latency, hsp_train, ClusterTopology, HspConfig, IdWorkload};

fn workload() -> IdWorkload {
    IdWorkload { table_rows: vec![200; 8], samples_per_device: 8, max_ids_per_sample: 4, zipf_exponent: 1.1, seed: 9 }
}

#[test]
fn grouped_runs_match_centralized_bitwise() {
    let w = workload();
    let cfg = HspConfig::default();
    let base = hsp_train(20, &w, &ClusterTopology::new(16, 1).unwrap(), &cfg).unwrap();
    for m in [2, 4] {
        let topo = ClusterTopology::new(16, m).unwrap();
        let run = hsp_train(20, &w, &topo, &cfg).unwrap();
        assert_eq!(run.fingerprints, base.fingerprints, "M={m}");
        assert_eq!(run.log.cross_group_all_to_all(&topo), 0);
        for step in 0..20 {
            assert!(run.log.all_to_all_fan_out(step, 16).iter().all(|&f| f == topo.group_size() - 1));
        }
    }
}

#[test]
fn volume_and_latency_shrink_with_groups() {
    let w = workload();
    let cfg = HspConfig::default();
    let mut prev = (u64::MAX, f64::INFINITY);
    for m in [1, 2, 4, 8] {
        let topo = ClusterTopology::new(16, m).unwrap();
        let run = hsp_train(5, &w, &topo, &cfg).unwrap();
        let cur = (run.log.all_to_all_bytes(), all_to_all_latency(&run.log, &topo));
        assert!(cur.0 <= prev.0 && cur.1 <= prev.1, "M={m}: {cur:?} after {prev:?}");
        prev = cur;
    }
}

#[test]
fn invalid_topologies_are_rejected() {
    assert!(ClusterTopology::new(16, 3).is_err());
    assert!(ClusterTopology::new(0, 1).is_err());
}
