use super::Strategy;
use super::*;
use crate::dpf::{gen, DomainSpec, TargetPoint};
use crate::prf::PrfId;
use crate::table::EmbeddingTable;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn keys_for(l: u64, targets: &[u64], r: &mut ChaCha20Rng) -> (Vec<DpfKey>, Vec<DpfKey>) {
    let d = DomainSpec::new(l).unwrap();
    targets
        .iter()
        .map(|&i| gen(d, PrfId::Aes128Ctr, TargetPoint(i), r).unwrap())
        .unzip()
}

/// Unfused reference: full expansion, then multiply.
fn reference_share(key: &DpfKey, table: &TableView<'_>) -> Vec<u8> {
    let mut acc = vec![0u8; table.entry_bytes()];
    for (j, leaf) in key.eval_full().into_iter().enumerate() {
        if leaf.lsb() == 1 {
            crate::xor_into(&mut acc, table.row(j));
        }
    }
    acc
}

fn all_plans(workers: usize) -> Vec<EvalPlan> {
    let mut plans = vec![
        EvalPlan::new(Strategy::BranchParallel),
        EvalPlan::new(Strategy::LevelByLevel),
        EvalPlan::new(Strategy::SingleQueryCooperative),
    ];
    for k in [1, 2, 4] {
        plans.push(EvalPlan::new(Strategy::MemBoundedTree).with_chunk(k));
    }
    plans.into_iter().map(|p| p.with_workers(workers)).collect()
}

#[test]
fn four_entry_lookup() {
    let mut r = rng(1);
    let rows: Vec<u8> = (0..4 * 16).map(|b| (b * 7 + 3) as u8).collect();
    let table = EmbeddingTable::new(0, 16, rows).unwrap();
    let (a, b) = keys_for(4, &[2], &mut r);
    let engine = EvalEngine::new(2).unwrap();
    for plan in all_plans(2) {
        let (sa, _) = engine.eval_batch(&a, &table.view(), &plan).unwrap();
        let (sb, _) = engine.eval_batch(&b, &table.view(), &plan).unwrap();
        assert_eq!(sa[0].combine(&sb[0]), table.row(2), "{:?}", plan.strategy);
    }
}

#[test]
fn strategies_agree_with_reference() {
    let mut r = rng(2);
    let engine = EvalEngine::new(4).unwrap();
    for depth in 1..=9u32 {
        let l = 1u64 << depth;
        let table = EmbeddingTable::random(0, l as usize, 32, &mut r).unwrap();
        let targets: Vec<u64> = (0..3).map(|_| r.gen_range(0..l)).collect();
        let (ka, _) = keys_for(l, &targets, &mut r);
        let want: Vec<Vec<u8>> = ka
            .iter()
            .map(|k| reference_share(k, &table.view()))
            .collect();
        for workers in [1, 3, 8] {
            for plan in all_plans(workers) {
                if plan.chunk_k as u64 > l {
                    continue;
                }
                let batch = if plan.strategy == Strategy::SingleQueryCooperative {
                    1
                } else {
                    2
                };
                let plan = plan.with_batch(batch);
                let (got, _) = engine.eval_batch(&ka, &table.view(), &plan).unwrap();
                let got: Vec<Vec<u8>> = got.into_iter().map(|s| s.0).collect();
                assert_eq!(got, want, "L={l} {plan:?}");
            }
        }
    }
}

#[test]
fn work_counts_are_exact() {
    let mut r = rng(3);
    let engine = EvalEngine::new(2).unwrap();
    let table = EmbeddingTable::random(0, 8, 16, &mut r).unwrap();
    let (k, _) = keys_for(8, &[5], &mut r);
    let (_, c) = engine
        .eval_branch_parallel(&k[0], &table.view(), 1)
        .unwrap();
    assert_eq!(c.prf_calls, 24);
    let (_, c) = engine.eval_level_by_level(&k[0], &table.view(), 1).unwrap();
    assert_eq!(c.prf_calls, 14);

    let table = EmbeddingTable::random(0, 1 << 10, 16, &mut r).unwrap();
    let targets: Vec<u64> = (0..16).map(|i| i * 61).collect();
    let (ks, _) = keys_for(1 << 10, &targets, &mut r);
    let plan = EvalPlan::new(Strategy::MemBoundedTree)
        .with_batch(16)
        .with_chunk(128)
        .with_workers(4);
    let (_, c) = engine.eval_batch(&ks, &table.view(), &plan).unwrap();
    assert_eq!(c.prf_calls, 16 * (2 * 1024 - 2));
    let (_, c) = engine
        .eval_level_by_level(&ks[0], &table.view(), 4)
        .unwrap();
    assert_eq!(c.prf_calls, 2046);
    assert!(c.peak_intermediate_bytes >= 1024 * 16);
    assert_eq!(c.responses_bytes, 16);
}

#[test]
fn engine_counter_accumulates() {
    let mut r = rng(4);
    let engine = EvalEngine::new(1).unwrap();
    assert_eq!(engine.prf_call_counter(), 0);
    let table = EmbeddingTable::random(0, 8, 16, &mut r).unwrap();
    let (k, _) = keys_for(8, &[1], &mut r);
    engine.eval_level_by_level(&k[0], &table.view(), 1).unwrap();
    engine
        .eval_branch_parallel(&k[0], &table.view(), 4)
        .unwrap();
    assert_eq!(engine.prf_call_counter(), 14 + 24);
    engine.reset_counter();
    assert_eq!(engine.prf_call_counter(), 0);
}

#[test]
fn branch_parallel_redundancy_ratio() {
    // L log L / (2L - 2): 24/14 at L=8, tending to log2(L)/2.
    for depth in [3u32, 10, 20] {
        let l = 1u64 << depth;
        let bp = Strategy::BranchParallel.prf_calls_per_key(l) as f64;
        let opt = Strategy::MemBoundedTree.prf_calls_per_key(l) as f64;
        let ratio = bp / opt;
        let expected = depth as f64 / 2.0 * l as f64 / (l - 1) as f64;
        assert!((ratio - expected).abs() < 1e-12);
    }
    assert!((24.0f64 / 14.0 - 1.714).abs() < 1e-3);
}

#[test]
fn memory_separation_at_4096() {
    let mut r = rng(5);
    let engine = EvalEngine::new(4).unwrap();
    let l = 1usize << 12;
    let table = EmbeddingTable::random(0, l, 16, &mut r).unwrap();
    let (k, _) = keys_for(l as u64, &[4000], &mut r);
    let (mb, cm) = engine
        .eval_mem_bounded(&k[0], &table.view(), 128, 4)
        .unwrap();
    let (lv, cl) = engine.eval_level_by_level(&k[0], &table.view(), 4).unwrap();
    assert_eq!(mb, lv);
    assert_eq!(cm.prf_calls, 2 * 4096 - 2);
    assert!(
        cm.peak_intermediate_bytes <= 128 * 12 * 16,
        "{}",
        cm.peak_intermediate_bytes
    );
    assert!(cl.peak_intermediate_bytes >= 65_536);
}

#[test]
fn level_by_level_respects_budget() {
    let mut r = rng(6);
    let engine = EvalEngine::new(2).unwrap();
    let l = 1usize << 10;
    let table = EmbeddingTable::random(0, l, 16, &mut r).unwrap();
    let targets: Vec<u64> = (0..32).collect();
    let (ks, _) = keys_for(l as u64, &targets, &mut r);
    let budget = 4 * level_buffer_bytes(l as u64);

    let lbl = EvalPlan::new(Strategy::LevelByLevel)
        .with_batch(32)
        .with_mem_budget(budget);
    let err = engine.eval_batch(&ks, &table.view(), &lbl).unwrap_err();
    assert!(matches!(err, EngineError::Capacity { .. }));

    // At the same batch the memory-bounded traversal fits easily.
    let mb = EvalPlan::new(Strategy::MemBoundedTree)
        .with_batch(32)
        .with_mem_budget(budget);
    let (_, c) = engine.eval_batch(&ks, &table.view(), &mb).unwrap();
    assert!(c.peak_intermediate_bytes <= budget);

    let small = lbl.clone().with_batch(4);
    assert!(engine.eval_batch(&ks, &table.view(), &small).is_ok());
}

#[test]
fn plan_errors() {
    let mut r = rng(7);
    let engine = EvalEngine::new(1).unwrap();
    let table = EmbeddingTable::random(0, 16, 16, &mut r).unwrap();
    let (k8, _) = keys_for(8, &[1], &mut r);
    assert_eq!(
        engine
            .eval_level_by_level(&k8[0], &table.view(), 1)
            .unwrap_err(),
        EngineError::DomainMismatch { key: 8, table: 16 }
    );
    let (k16, _) = keys_for(16, &[1], &mut r);
    assert_eq!(
        engine
            .eval_mem_bounded(&k16[0], &table.view(), 32, 1)
            .unwrap_err(),
        EngineError::BadChunk { k: 32, l: 16 }
    );
    assert!(matches!(
        engine.eval_mem_bounded(&k16[0], &table.view(), 3, 1),
        Err(EngineError::BadChunk { .. })
    ));
    let coop = EvalPlan::new(Strategy::SingleQueryCooperative).with_batch(2);
    assert!(matches!(
        engine.eval_batch(&k16, &table.view(), &coop),
        Err(EngineError::InvalidPlan(_))
    ));
    assert_eq!(
        engine.eval_batch(&[], &table.view(), &EvalPlan::new(Strategy::LevelByLevel)),
        Err(EngineError::EmptyBatch)
    );
}

#[test]
fn scheduler_rule() {
    let cfg = SchedulerConfig::default();
    assert_eq!(
        select_strategy(1 << 23, 64, &cfg).strategy,
        Strategy::SingleQueryCooperative
    );
    assert_eq!(select_strategy(1 << 23, 64, &cfg).batch_size, 1);
    assert_eq!(
        select_strategy(1 << 22, 64, &cfg).strategy,
        Strategy::MemBoundedTree
    );
    assert_eq!(
        select_strategy(1 << 10, 64, &cfg).strategy,
        Strategy::MemBoundedTree
    );

    let plan = select_strategy(1 << 20, 1_000_000, &cfg);
    assert_eq!(plan.chunk_k, 128);
    assert_eq!(plan.batch_size, (1u64 << 30) as usize / (128 * 20 * 16));
    assert_eq!(plan.batch_size, 26_214);
    assert_eq!(select_strategy(1 << 20, 512, &cfg).batch_size, 512);

    let tiny = SchedulerConfig {
        mem_budget_bytes: 1,
        ..Default::default()
    };
    assert_eq!(select_strategy(1 << 10, 64, &tiny).batch_size, 1);
    assert_eq!(select_strategy(16, 4, &cfg).chunk_k, 16);
}

#[test]
fn strategy_names_parse() {
    for s in Strategy::ALL {
        assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
    }
    assert!("warp".parse::<Strategy>().is_err());
}

#[test]
fn partitioned_halves() {
    let mut r = rng(8);
    let engine = EvalEngine::new(2).unwrap();
    let l = 256u64;
    let table = EmbeddingTable::random(0, l as usize, 16, &mut r).unwrap();
    let (k, _) = keys_for(l, &[200], &mut r);
    let whole = reference_share(&k[0], &table.view());
    let p = engine
        .eval_partitioned(&k[0], &table.view(), &[0..128, 128..256])
        .unwrap();
    assert_eq!(p.share.0, whole);
    let mut x = p.shards[0].share.0.clone();
    crate::xor_into(&mut x, &p.shards[1].share.0);
    assert_eq!(x, whole);
    // An aligned half is a subtree plus the one-node path to it.
    assert_eq!(p.shards[0].prf_calls, 1 + (2 * 128 - 2));
}

#[test]
#[allow(clippy::single_range_in_vec_init)]
fn partition_errors() {
    let mut r = rng(9);
    let engine = EvalEngine::new(1).unwrap();
    let table = EmbeddingTable::random(0, 16, 16, &mut r).unwrap();
    let (k, _) = keys_for(16, &[3], &mut r);
    for bad in [
        vec![0..8, 7..16],
        vec![0..8, 9..16],
        vec![0..8],
        vec![0..0, 0..16],
        vec![0..8, 8..17],
    ] {
        assert!(matches!(
            engine.eval_partitioned(&k[0], &table.view(), &bad),
            Err(EngineError::BadShards(_))
        ));
    }
}

#[test]
fn cooperative_matches_reference_at_65536() {
    let mut r = rng(10);
    let engine = EvalEngine::new(8).unwrap();
    let l = 1usize << 16;
    let table = EmbeddingTable::random(0, l, 16, &mut r).unwrap();
    let (k, _) = keys_for(l as u64, &[54321], &mut r);
    let (s, c) = engine
        .eval_cooperative_single(&k[0], &table.view(), 8)
        .unwrap();
    assert_eq!(s.0, reference_share(&k[0], &table.view()));
    let (_, c1) = engine
        .eval_cooperative_single(&k[0], &table.view(), 1)
        .unwrap();
    assert_eq!(c.prf_calls, c1.prf_calls);
    assert_eq!(c.prf_calls, 2 * l as u64 - 2);
}

#[test]
fn cooperative_latency_scales_with_workers() {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    if cores < 2 {
        eprintln!("skipping: {cores} core(s) available, worker scaling is unobservable");
        return;
    }
    let mut r = rng(11);
    let l = 1usize << 20;
    let table = EmbeddingTable::random(0, l, 16, &mut r).unwrap();
    let (k, _) = keys_for(l as u64, &[1], &mut r);
    let best = |workers: usize| {
        let engine = EvalEngine::new(workers).unwrap();
        (0..3)
            .map(|_| {
                engine
                    .eval_cooperative_single(&k[0], &table.view(), workers)
                    .unwrap()
                    .1
                    .wall_time
            })
            .min()
            .unwrap()
    };
    assert!(best(8) < best(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Random shard boundaries: partial shares XOR to the whole, and each
    // shard's work stays within 2 * leaves + 2 * log2(L).
    #[test]
    fn partitions_are_linear(depth in 2u32..10, cuts in proptest::collection::vec(any::<u64>(), 0..5), target in any::<u64>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = 1u64 << depth;
        let table = EmbeddingTable::random(0, l as usize, 16, &mut r).unwrap();
        let (k, _) = keys_for(l, &[target % l], &mut r);
        let mut bounds: Vec<u64> = cuts.iter().map(|c| 1 + c % (l - 1)).collect();
        bounds.push(0);
        bounds.push(l);
        bounds.sort_unstable();
        bounds.dedup();
        let shards: Vec<Range<u64>> = bounds.windows(2).map(|w| w[0]..w[1]).collect();
        let engine = EvalEngine::new(2).unwrap();
        let p = engine.eval_partitioned(&k[0], &table.view(), &shards).unwrap();
        prop_assert_eq!(p.share.0, reference_share(&k[0], &table.view()));
        for s in &p.shards {
            let leaves = s.range.end - s.range.start;
            prop_assert!(s.prf_calls <= 2 * leaves + 2 * depth as u64);
        }
    }

    #[test]
    fn strategy_equivalence(depth in 1u32..9, workers in 1usize..9, kexp in 0u32..9, target in any::<u64>(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = 1u64 << depth;
        let table = EmbeddingTable::random(0, l as usize, 48, &mut r).unwrap();
        let (k, _) = keys_for(l, &[target % l], &mut r);
        let want = reference_share(&k[0], &table.view());
        let engine = EvalEngine::new(workers).unwrap();
        let chunk = 1usize << kexp.min(depth);
        prop_assert_eq!(&engine.eval_mem_bounded(&k[0], &table.view(), chunk, workers).unwrap().0 .0, &want);
        prop_assert_eq!(&engine.eval_branch_parallel(&k[0], &table.view(), workers).unwrap().0 .0, &want);
        prop_assert_eq!(&engine.eval_cooperative_single(&k[0], &table.view(), workers).unwrap().0 .0, &want);
    }
}
