//! Batched full-domain evaluation fused with the table product.
//!
//! Four expansion strategies trade PRF work against live intermediate
//! memory:
//!
//! | strategy                 | PRF calls per key | peak node bytes per key |
//! |--------------------------|-------------------|-------------------------|
//! | `BranchParallel`         | `L * log2 L`      | `workers * (log2 L + 1) * 16` |
//! | `LevelByLevel`           | `2L - 2`          | `(L + L/2) * 16`        |
//! | `MemBoundedTree`         | `2L - 2`          | `<= K * log2 L * 16`    |
//! | `SingleQueryCooperative` | `2L - 2`          | `(L + L/2) * 16`        |
//!
//! Every strategy produces bit-identical response shares: the reduction is
//! XOR, so the result does not depend on scheduling or partitioning.

mod kernels;
pub mod memory;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::dpf::DpfKey;
use crate::prf::{Expander, PrfCounter};
use crate::table::TableView;
use memory::MemTracker;

/// Default chunk width for the memory-bounded traversal.
pub const DEFAULT_CHUNK_K: usize = 128;
/// Tables strictly larger than this are served one key at a time with all
/// workers cooperating.
pub const COOPERATIVE_THRESHOLD: u64 = 1 << 22;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("key domain of {key} entries does not match table of {table} entries")]
    DomainMismatch { key: u64, table: u64 },
    #[error("chunk K={k} must be a power of two no larger than L={l}")]
    BadChunk { k: usize, l: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("level buffers need {needed} bytes, over the {budget}-byte budget")]
    Capacity { needed: u64, budget: u64 },
    #[error("bad shard layout: {0}")]
    BadShards(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    BranchParallel,
    LevelByLevel,
    MemBoundedTree,
    SingleQueryCooperative,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::BranchParallel,
        Strategy::LevelByLevel,
        Strategy::MemBoundedTree,
        Strategy::SingleQueryCooperative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::BranchParallel => "branch-parallel",
            Strategy::LevelByLevel => "level-by-level",
            Strategy::MemBoundedTree => "mem-bounded",
            Strategy::SingleQueryCooperative => "cooperative",
        }
    }

    /// PRF calls to fully evaluate one key over `l` leaves.
    pub fn prf_calls_per_key(self, l: u64) -> u64 {
        match self {
            Strategy::BranchParallel => l * l.trailing_zeros() as u64,
            _ => 2 * l - 2,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "branch-parallel" | "branch" => Ok(Strategy::BranchParallel),
            "level-by-level" | "level" => Ok(Strategy::LevelByLevel),
            "mem-bounded" | "mem-bounded-tree" | "membounded" => Ok(Strategy::MemBoundedTree),
            "cooperative" | "single-query-cooperative" | "coop" => {
                Ok(Strategy::SingleQueryCooperative)
            }
            other => Err(EngineError::InvalidPlan(format!(
                "unknown strategy `{other}`"
            ))),
        }
    }
}

impl From<Strategy> for String {
    fn from(v: Strategy) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for Strategy {
    type Error = EngineError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    pub strategy: Strategy,
    /// Keys evaluated together; forced to 1 for the cooperative strategy.
    pub batch_size: usize,
    /// Chunk width for `MemBoundedTree`.
    pub chunk_k: usize,
    /// Logical worker count used to partition the work.
    pub workers: usize,
    /// Cap on live node bytes for the level-synchronous strategies.
    pub mem_budget_bytes: Option<u64>,
}

impl EvalPlan {
    pub fn new(strategy: Strategy) -> Self {
        EvalPlan {
            strategy,
            batch_size: 1,
            chunk_k: DEFAULT_CHUNK_K,
            workers: 1,
            mem_budget_bytes: None,
        }
    }

    pub fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_chunk(mut self, chunk_k: usize) -> Self {
        self.chunk_k = chunk_k;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_mem_budget(mut self, bytes: u64) -> Self {
        self.mem_budget_bytes = Some(bytes);
        self
    }

    pub fn validate(&self, num_entries: usize) -> Result<(), EngineError> {
        if self.batch_size == 0 {
            return Err(EngineError::InvalidPlan("batch size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(EngineError::InvalidPlan("workers must be >= 1".into()));
        }
        if self.strategy == Strategy::SingleQueryCooperative && self.batch_size != 1 {
            return Err(EngineError::InvalidPlan(
                "cooperative evaluation requires batch size 1".into(),
            ));
        }
        if self.strategy == Strategy::MemBoundedTree
            && (self.chunk_k == 0 || !self.chunk_k.is_power_of_two() || self.chunk_k > num_entries)
        {
            return Err(EngineError::BadChunk {
                k: self.chunk_k,
                l: num_entries,
            });
        }
        Ok(())
    }
}

/// Exact counters for one evaluation call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub prf_calls: u64,
    pub peak_intermediate_bytes: u64,
    pub wall_time: Duration,
    pub responses_bytes: u64,
}

/// One server's share of a retrieved row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ResponseShare(pub Vec<u8>);

impl ResponseShare {
    pub fn combine(&self, other: &ResponseShare) -> Vec<u8> {
        let mut out = self.0.clone();
        crate::xor_into(&mut out, &other.0);
        out
    }
}

/// Per-shard output of [`EvalEngine::eval_partitioned`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardPartial {
    pub range: Range<u64>,
    pub share: ResponseShare,
    pub prf_calls: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionedShare {
    pub share: ResponseShare,
    pub shards: Vec<ShardPartial>,
}

/// Inputs to [`select_strategy`].
#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub mem_budget_bytes: u64,
    pub chunk_k: usize,
    pub workers: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            mem_budget_bytes: 1 << 30,
            chunk_k: DEFAULT_CHUNK_K,
            workers: 1,
        }
    }
}

/// Pick a plan for `num_entries` leaves and up to `requested_batch` keys.
///
/// Tables above [`COOPERATIVE_THRESHOLD`] get the single-key cooperative
/// strategy; everything else gets the memory-bounded traversal with the batch
/// capped so that `B * K * log2(L) * 16` stays within the memory budget.
pub fn select_strategy(
    num_entries: u64,
    requested_batch: usize,
    cfg: &SchedulerConfig,
) -> EvalPlan {
    let workers = cfg.workers.max(1);
    if num_entries > COOPERATIVE_THRESHOLD {
        return EvalPlan::new(Strategy::SingleQueryCooperative).with_workers(workers);
    }
    let k = (cfg.chunk_k.max(1) as u64).min(num_entries).max(1);
    let depth = num_entries.max(2).trailing_zeros() as u64;
    let per_key = k * depth * 16;
    let fit = (cfg.mem_budget_bytes / per_key.max(1)).max(1);
    let batch = (requested_batch.max(1) as u64).min(fit) as usize;
    EvalPlan::new(Strategy::MemBoundedTree)
        .with_batch(batch)
        .with_chunk(k as usize)
        .with_workers(workers)
        .with_mem_budget(cfg.mem_budget_bytes)
}

/// Owns a fixed worker pool and a running PRF-call total.
pub struct EvalEngine {
    pool: rayon::ThreadPool,
    workers: usize,
    counter: PrfCounter,
}

impl fmt::Debug for EvalEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvalEngine")
            .field("workers", &self.workers)
            .field("prf_calls", &self.counter.get())
            .finish()
    }
}

impl EvalEngine {
    pub fn new(workers: usize) -> Result<Self, EngineError> {
        let workers = workers.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("dpir-eval-{i}"))
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;
        Ok(EvalEngine {
            pool,
            workers,
            counter: PrfCounter::new(),
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// PRF calls issued by this engine since the last reset.
    pub fn prf_call_counter(&self) -> u64 {
        self.counter.get()
    }

    pub fn reset_counter(&self) {
        self.counter.reset();
    }

    fn check_domain(keys: &[DpfKey], table: &TableView<'_>) -> Result<(), EngineError> {
        let l = table.num_entries() as u64;
        for key in keys {
            if key.num_entries() != l {
                return Err(EngineError::DomainMismatch {
                    key: key.num_entries(),
                    table: l,
                });
            }
        }
        Ok(())
    }

    /// Evaluate `keys` against `table`, `plan.batch_size` keys at a time.
    pub fn eval_batch(
        &self,
        keys: &[DpfKey],
        table: &TableView<'_>,
        plan: &EvalPlan,
    ) -> Result<(Vec<ResponseShare>, CostReport), EngineError> {
        if keys.is_empty() {
            return Err(EngineError::EmptyBatch);
        }
        Self::check_domain(keys, table)?;
        plan.validate(table.num_entries())?;
        if matches!(
            plan.strategy,
            Strategy::LevelByLevel | Strategy::SingleQueryCooperative
        ) {
            let group = plan.batch_size.min(keys.len()) as u64;
            let needed = level_buffer_bytes(table.num_entries() as u64) * group;
            if let Some(budget) = plan.mem_budget_bytes {
                if needed > budget {
                    return Err(EngineError::Capacity { needed, budget });
                }
            }
        }

        let start = Instant::now();
        let mem = MemTracker::new();
        let mut calls = 0u64;
        let mut shares = Vec::with_capacity(keys.len());
        self.pool.install(|| {
            for group in keys.chunks(plan.batch_size) {
                let (accs, c) = match plan.strategy {
                    Strategy::BranchParallel => {
                        kernels::branch_parallel(group, table, plan.workers, &mem)
                    }
                    Strategy::LevelByLevel => kernels::level_by_level(group, table, &mem),
                    Strategy::MemBoundedTree => {
                        kernels::mem_bounded(group, table, plan.chunk_k, plan.workers, &mem)
                    }
                    Strategy::SingleQueryCooperative => {
                        let (acc, c) =
                            kernels::cooperative_single(&group[0], table, plan.workers, &mem);
                        (vec![acc], c)
                    }
                };
                calls += c;
                shares.extend(accs.into_iter().map(ResponseShare));
            }
        });
        self.counter.add(calls);
        let report = CostReport {
            prf_calls: calls,
            peak_intermediate_bytes: mem.peak(),
            wall_time: start.elapsed(),
            responses_bytes: (keys.len() * table.entry_bytes()) as u64,
        };
        Ok((shares, report))
    }

    fn eval_one(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        plan: EvalPlan,
    ) -> Result<(ResponseShare, CostReport), EngineError> {
        let (mut shares, report) = self.eval_batch(std::slice::from_ref(key), table, &plan)?;
        Ok((shares.pop().unwrap(), report))
    }

    pub fn eval_branch_parallel(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        workers: usize,
    ) -> Result<(ResponseShare, CostReport), EngineError> {
        self.eval_one(
            key,
            table,
            EvalPlan::new(Strategy::BranchParallel).with_workers(workers),
        )
    }

    pub fn eval_level_by_level(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        workers: usize,
    ) -> Result<(ResponseShare, CostReport), EngineError> {
        self.eval_one(
            key,
            table,
            EvalPlan::new(Strategy::LevelByLevel).with_workers(workers),
        )
    }

    pub fn eval_mem_bounded(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        chunk_k: usize,
        workers: usize,
    ) -> Result<(ResponseShare, CostReport), EngineError> {
        self.eval_one(
            key,
            table,
            EvalPlan::new(Strategy::MemBoundedTree)
                .with_chunk(chunk_k)
                .with_workers(workers),
        )
    }

    pub fn eval_cooperative_single(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        workers: usize,
    ) -> Result<(ResponseShare, CostReport), EngineError> {
        self.eval_one(
            key,
            table,
            EvalPlan::new(Strategy::SingleQueryCooperative).with_workers(workers),
        )
    }

    /// Evaluate one key shard by shard; shards must partition `[0, L)`.
    /// Each shard only expands nodes whose span meets its leaf range.
    pub fn eval_partitioned(
        &self,
        key: &DpfKey,
        table: &TableView<'_>,
        shards: &[Range<u64>],
    ) -> Result<PartitionedShare, EngineError> {
        Self::check_domain(std::slice::from_ref(key), table)?;
        check_partition(shards, key.num_entries())?;
        let width = table.entry_bytes();
        let mem = MemTracker::new();
        let partials: Vec<ShardPartial> = self.pool.install(|| {
            shards
                .par_iter()
                .map(|range| {
                    let mut ex = Expander::new(key.prf());
                    let leaves = kernels::expand_range(key, &mut ex, range.start, range.end, &mem);
                    let mut acc = vec![0u8; width];
                    kernels::accumulate_leaves(&mut acc, &leaves, range.start as usize, table);
                    ShardPartial {
                        range: range.clone(),
                        share: ResponseShare(acc),
                        prf_calls: ex.calls(),
                    }
                })
                .collect()
        });
        self.counter.add(partials.iter().map(|p| p.prf_calls).sum());
        let combined =
            kernels::xor_reduce_tree(partials.iter().map(|p| p.share.0.clone()).collect(), width);
        Ok(PartitionedShare {
            share: ResponseShare(combined),
            shards: partials,
        })
    }
}

/// Live node bytes of a level-synchronous expansion of one key at its
/// widest step: the leaf level plus its parent level.
pub fn level_buffer_bytes(num_entries: u64) -> u64 {
    (num_entries + num_entries / 2) * 16
}

/// Analytic bound on live node bytes when `batch` keys over `l` leaves are
/// evaluated together with `strategy`.
pub fn peak_bytes_bound(
    strategy: Strategy,
    l: u64,
    batch: usize,
    chunk_k: usize,
    workers: usize,
) -> u64 {
    let depth = l.max(2).trailing_zeros() as u64;
    let batch = batch.max(1) as u64;
    match strategy {
        Strategy::BranchParallel => batch * (workers.max(1) as u64).min(l) * (depth + 1) * 16,
        Strategy::LevelByLevel => batch * level_buffer_bytes(l),
        Strategy::MemBoundedTree => batch * (chunk_k.max(1) as u64).min(l) * depth * 16,
        Strategy::SingleQueryCooperative => level_buffer_bytes(l),
    }
}

fn check_partition(shards: &[Range<u64>], l: u64) -> Result<(), EngineError> {
    let mut sorted: Vec<&Range<u64>> = shards.iter().collect();
    sorted.sort_by_key(|r| r.start);
    let mut next = 0u64;
    for r in sorted {
        if r.start >= r.end {
            return Err(EngineError::BadShards(format!("empty shard {r:?}")));
        }
        if r.start < next {
            return Err(EngineError::BadShards(format!("shard {r:?} overlaps")));
        }
        if r.start > next {
            return Err(EngineError::BadShards(format!(
                "leaves {next}..{} not covered",
                r.start
            )));
        }
        next = r.end;
    }
    if next != l {
        return Err(EngineError::BadShards(format!(
            "shards end at {next}, table has {l} entries"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
