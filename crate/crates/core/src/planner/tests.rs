use super::*;
use crate::codesign::{build_colocated, build_hot_split, colocate_with};
use crate::engine::Strategy;
use crate::table::TableView;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn geometry(id: u32, len: usize, width: usize) -> TableGeometry {
    TableGeometry {
        table_id: id,
        num_entries: len.next_power_of_two().max(2),
        logical_entries: len,
        row_width: width,
    }
}

fn plain_planner(len: usize, bin: usize, q_full: usize) -> Planner {
    Planner::new(PlannerSpec {
        full: geometry(1, len, 16),
        full_bin_size: bin,
        hot: None,
        hot_bin_size: 0,
        hot_map: HotIndexMap::default(),
        companions: Companions::none(len),
        base_entry_bytes: 16,
        q_hot: 0,
        q_full,
        prf: PrfId::Aes128Ctr,
    })
    .unwrap()
}

/// What one server would return for `q` over its table.
fn answer(q: &PlannedQuery, key: &DpfKey, table: &EmbeddingTable) -> Vec<u8> {
    let bin = q.bin_id as usize * key.num_entries() as usize;
    let view = TableView::new(table.view().bytes(), table.entry_bytes())
        .slice(bin..bin + key.num_entries() as usize);
    let mut acc = vec![0u8; table.entry_bytes()];
    for (j, leaf) in key.eval_full().iter().enumerate() {
        if leaf.lsb() == 1 {
            crate::xor_into(&mut acc, view.row(j));
        }
    }
    acc
}

fn run(
    plan: &QueryPlan,
    hot: Option<&EmbeddingTable>,
    full: &EmbeddingTable,
) -> BTreeMap<u32, Vec<u8>> {
    let pick = |q: &PlannedQuery| {
        if q.table_id == full.table_id() {
            full
        } else {
            hot.unwrap()
        }
    };
    let a: Vec<Vec<u8>> = plan.slots().map(|q| answer(q, &q.key_a, pick(q))).collect();
    let b: Vec<Vec<u8>> = plan.slots().map(|q| answer(q, &q.key_b, pick(q))).collect();
    reconstruct(plan, &a, &b).unwrap()
}

#[test]
fn padding_only_plan() {
    let t = EmbeddingTable::random(1, 64, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let trace = Trace::new(vec![vec![1, 2, 3]]);
    let co = build_colocated(&t, &trace, 0).unwrap();
    let split = build_hot_split(&co.table, &trace, 8, 2, 2, 2).unwrap();
    let p = Planner::for_tables(&split, &co, 4, 16, PrfId::Aes128Ctr).unwrap();
    let plan = p.plan(&[], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(plan.num_keys(), 4);
    assert_eq!(plan.dummy_count, 4);
    assert!(plan.served.is_empty() && plan.dropped.is_empty());
    assert!(run(&plan, split.hot_table.as_ref(), &co.table).is_empty());
}

#[test]
fn same_bin_conflict() {
    let p = plain_planner(8, 4, 2);
    let plan = p.plan(&[1, 2], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(plan.served, vec![1]);
    assert_eq!(plan.dropped, vec![2]);
    assert_eq!(plan.dummy_count, 1);
    let bins: Vec<u32> = plan.full_slots.iter().map(|s| s.bin_id).collect();
    assert_eq!(bins, vec![0, 1]);
    assert!(plan.full_slots[1].target.is_none());
}

/// Every ordered request of distinct indices over L=8, for every bin size
/// and budget: the served rows are the first wanted row of each bin, in
/// request order, up to the budget.
#[test]
fn exhaustive_small_cases() {
    fn requests(len: u32, max: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max {
            let mut next = Vec::new();
            for r in &frontier {
                for i in 0..len {
                    if !r.contains(&i) {
                        let mut r2: Vec<u32> = r.clone();
                        r2.push(i);
                        next.push(r2);
                    }
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }
    let reqs = requests(8, 3);
    for bin in [2usize, 4, 8] {
        for q in 1..=4 {
            let p = plain_planner(8, bin, q);
            for r in &reqs {
                let a = p.assign(r).unwrap();
                let mut bins_seen = Vec::new();
                let mut want_served = Vec::new();
                for &i in r {
                    let b = i as usize / bin;
                    if !bins_seen.contains(&b) {
                        bins_seen.push(b);
                        if want_served.len() < q {
                            want_served.push(i);
                        }
                    }
                }
                assert_eq!(a.served, want_served, "bin {bin} q {q} req {r:?}");
                assert_eq!(a.served.len() + a.dropped.len(), r.len());
                assert!(a.covered.is_empty());
            }
        }
    }
}

#[test]
fn duplicates_are_collapsed() {
    let p = plain_planner(16, 4, 4);
    let a = p.assign(&[5, 5, 9, 5]).unwrap();
    assert_eq!(a.served, vec![5, 9]);
    assert!(a.dropped.is_empty());
}

#[test]
fn colocated_pair_needs_one_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = EmbeddingTable::random(7, 16, 16, &mut rng).unwrap();
    let trace = Trace::new(vec![vec![3, 7]; 3]);
    let co = build_colocated(&t, &trace, 1).unwrap();
    let split = HotSplit::without_hot(co.table.clone(), 2);
    let p = Planner::for_tables(&split, &co, 4, 4, PrfId::Aes128Ctr).unwrap();
    let plan = p.plan(&[3, 7], &mut rng).unwrap();
    assert_eq!(plan.served, vec![3]);
    assert_eq!(plan.covered, vec![7]);
    assert_eq!(plan.dummy_count, 1);
    let got = run(&plan, None, &co.table);
    assert_eq!(got.len(), 2);
    assert_eq!(got[&3], t.row(3));
    assert_eq!(got[&7], t.row(7));
}

#[test]
fn late_companion_rescues_a_drop() {
    // 4 and 5 share a bin; 9 is served afterwards and carries 5.
    let t = EmbeddingTable::random(1, 16, 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut lists = vec![Vec::new(); 16];
    lists[9] = vec![5];
    let co = colocate_with(&t, Companions::from_lists(1, lists)).unwrap();
    let split = HotSplit::without_hot(co.table.clone(), 2);
    let p = Planner::for_tables(&split, &co, 4, 4, PrfId::ChaCha20).unwrap();
    let a = p.assign(&[4, 5, 9]).unwrap();
    assert_eq!(a.served, vec![4, 9]);
    assert_eq!(a.covered, vec![5]);
    assert!(a.dropped.is_empty());
}

#[test]
fn hot_then_full_then_drop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = EmbeddingTable::random(1, 64, 32, &mut rng).unwrap();
    // 10, 20, 30 are the hottest rows.
    let trace = Trace::new(vec![vec![10, 20, 30], vec![10, 20, 30], vec![10], vec![20]]);
    let co = build_colocated(&t, &trace, 0).unwrap();
    let split = build_hot_split(&co.table, &trace, 3, 2, 1, 2).unwrap();
    let p = Planner::for_tables(&split, &co, 4, 16, PrfId::Aes128Ctr).unwrap();
    // 10 takes the single hot slot; 20 and 30 overflow to the same full
    // bin, so 30 is dropped; 40 gets the last full slot and 50 nothing.
    let plan = p.plan(&[10, 20, 30, 40, 50], &mut rng).unwrap();
    assert_eq!(plan.hot_slots.len(), 1);
    assert_eq!(plan.full_slots.len(), 2);
    assert_eq!(plan.served, vec![10, 20, 40]);
    assert_eq!(plan.dropped, vec![30, 50]);
    let got = run(&plan, split.hot_table.as_ref(), &co.table);
    assert_eq!(got[&10], t.row(10));
    assert_eq!(got[&20], t.row(20));
}

#[test]
fn reconstruct_checks_lengths() {
    let p = plain_planner(16, 4, 2);
    let plan = p.plan(&[1], &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let good = vec![vec![0u8; 16]; 2];
    assert!(matches!(
        reconstruct(&plan, &good[..1], &good),
        Err(PlanError::ResponseCount { .. })
    ));
    let mut bad = good.clone();
    bad[1].push(0);
    assert!(matches!(
        reconstruct(&plan, &good, &bad),
        Err(PlanError::LengthMismatch { slot: 1, .. })
    ));
}

#[test]
fn config_mismatch_is_rejected() {
    let base = PlannerSpec {
        full: geometry(1, 64, 32),
        full_bin_size: 8,
        hot: None,
        hot_bin_size: 0,
        hot_map: HotIndexMap::default(),
        companions: Companions::none(64),
        base_entry_bytes: 16,
        q_hot: 0,
        q_full: 2,
        prf: PrfId::Aes128Ctr,
    };
    assert!(Planner::new(base.clone()).is_err());
    assert!(Planner::new(PlannerSpec {
        base_entry_bytes: 32,
        full_bin_size: 3,
        ..base.clone()
    })
    .is_err());
    assert!(Planner::new(PlannerSpec {
        base_entry_bytes: 32,
        q_hot: 1,
        ..base.clone()
    })
    .is_err());
    let ok = Planner::new(PlannerSpec {
        base_entry_bytes: 32,
        ..base
    })
    .unwrap();
    assert!(matches!(
        ok.assign(&[64]),
        Err(PlanError::IndexOutOfRange { index: 64, .. })
    ));
}

#[test]
fn dummies_avoid_padding_bins() {
    // 20 logical rows padded to 32, bins of 8: bin 3 is all padding.
    let p = plain_planner(20, 8, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let plan = p.plan(&[], &mut rng).unwrap();
        assert_eq!(plan.num_keys(), 6);
        assert!(plan.full_slots.iter().all(|s| s.bin_id < 3));
    }
}

#[test]
fn drop_rate_hand_case() {
    let p = plain_planner(4, 4, 1);
    let trace = Trace::new(vec![vec![0, 1], vec![2, 3], vec![3, 1], vec![]]);
    assert_eq!(simulate_drop_rate(&trace, &p).unwrap(), 0.5);
    assert!(matches!(
        simulate_drop_rate(&Trace::default(), &p),
        Err(PlanError::EmptyTrace)
    ));
}

#[test]
fn one_row_per_bin_never_drops() {
    let p = plain_planner(64, 4, 16);
    let trace = Trace::new(
        (0..16)
            .map(|b| vec![b * 4, ((b + 3) % 16) * 4 + 1])
            .collect(),
    );
    assert_eq!(simulate_drop_rate(&trace, &p).unwrap(), 0.0);
}

#[test]
fn cost_law() {
    let t = EmbeddingTable::random(1, 1000, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let trace = Trace::new(vec![(0..40).collect()]);
    let co = build_colocated(&t, &trace, 1).unwrap();
    let split = build_hot_split(&co.table, &trace, 100, 2, 3, 5).unwrap();
    let p = Planner::for_tables(&split, &co, 64, 256, PrfId::Aes128Ctr).unwrap();
    assert_eq!(
        p.server_prf_calls(Strategy::MemBoundedTree),
        3 * 126 + 5 * 510
    );
    assert_eq!(
        p.server_prf_calls(Strategy::BranchParallel),
        3 * 64 * 6 + 5 * 256 * 8
    );
    // Hot bins are clamped to the padded hot table.
    let p = Planner::for_tables(&split, &co, 1024, 256, PrfId::Aes128Ctr).unwrap();
    assert_eq!(p.hot().unwrap().bins.bin_size(), 128);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leakage_shape(reqs in prop::collection::vec(prop::collection::vec(0u32..500, 0..30), 1..6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = EmbeddingTable::random(1, 500, 16, &mut rng).unwrap();
        let trace = Trace::new(reqs.clone());
        let co = build_colocated(&t, &trace, 2).unwrap();
        let split = build_hot_split(&co.table, &trace, 50, 2, 3, 4).unwrap();
        let p = Planner::for_tables(&split, &co, 16, 64, PrfId::Aes128Ctr).unwrap();
        let want = p.request_bytes_per_server() as usize;
        for r in &reqs {
            let plan = p.plan(r, &mut rng).unwrap();
            prop_assert_eq!(plan.hot_slots.len(), 3);
            prop_assert_eq!(plan.full_slots.len(), 4);
            prop_assert_eq!(plan.request_bytes(), want);
            let mut distinct = r.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(plan.served.len() + plan.covered.len() + plan.dropped.len(), distinct.len());
            let got = run(&plan, split.hot_table.as_ref(), &co.table);
            for i in plan.served.iter().chain(&plan.covered) {
                prop_assert_eq!(got[i].as_slice(), t.row(*i as usize));
            }
        }
    }

    #[test]
    fn smaller_bins_never_drop_more(reqs in prop::collection::vec(prop::collection::vec(0u32..256, 1..20), 1..20), q in 1usize..12) {
        let trace = Trace::new(reqs);
        let mut last = f64::INFINITY;
        for bin in [256usize, 128, 64, 32, 16, 8, 4, 2] {
            let rate = simulate_drop_rate(&trace, &plain_planner(256, bin, q)).unwrap();
            prop_assert!(rate <= last + 1e-12, "bin {} rate {} > {}", bin, rate, last);
            last = rate;
        }
    }
}
