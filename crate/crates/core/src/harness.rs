//! Measurement scenarios behind the `bench` subcommands.
//!
//! Counter columns (PRF calls and their formulas, the analytic memory
//! bound) are exact and reproducible under a fixed seed. Timing columns and
//! measured peaks depend on the machine and scheduling; rows are tagged
//! with a short fingerprint of the machine.

use std::io::Write;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dpf::{gen, DomainSpec, DpfKey, TargetPoint};
use crate::engine::{
    peak_bytes_bound, EngineError, EvalEngine, EvalPlan, Strategy, DEFAULT_CHUNK_K,
};
use crate::planner::sweep::{self, best_drop_within, Constraints, Grid, SweepResult};
use crate::planner::PlanError;
use crate::prf::PrfId;
use crate::table::EmbeddingTable;
use crate::trace::Trace;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad bench parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Dpf(#[from] crate::dpf::DpfError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    KernelSweep,
    PrfSweep,
    EndToEnd,
    CodesignSweep,
}

impl Scenario {
    /// Scenarios that report timings need a few repetitions to mean much.
    pub fn min_repetitions(self) -> usize {
        match self {
            Scenario::CodesignSweep => 1,
            _ => 3,
        }
    }
}

/// Architecture, OS, core count and whether AES instructions are present.
pub fn machine_fingerprint() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    #[cfg(target_arch = "x86_64")]
    let aes = std::arch::is_x86_feature_detected!("aes");
    #[cfg(target_arch = "aarch64")]
    let aes = std::arch::is_aarch64_feature_detected!("aes");
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    let aes = false;
    format!(
        "{}-{}-{}cpu{}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        cores,
        if aes { "-aes" } else { "" }
    )
}

fn check_reps(scenario: Scenario, reps: usize) -> Result<(), HarnessError> {
    if reps < scenario.min_repetitions() {
        return Err(HarnessError::Params(format!(
            "{scenario:?} needs at least {} repetitions",
            scenario.min_repetitions()
        )));
    }
    Ok(())
}

fn random_keys(
    rng: &mut ChaCha8Rng,
    l: u64,
    prf: PrfId,
    n: usize,
) -> Result<Vec<DpfKey>, HarnessError> {
    let domain = DomainSpec::new(l)?;
    (0..n)
        .map(|_| Ok(gen(domain, prf, TargetPoint(rng.gen_range(0..l)), rng)?.0))
        .collect()
}

#[derive(Clone, Debug)]
pub struct KernelSweepSpec {
    pub log2_sizes: Vec<u32>,
    pub strategies: Vec<Strategy>,
    pub batches: Vec<usize>,
    pub chunks: Vec<usize>,
    pub workers: usize,
    pub mem_budget_bytes: Option<u64>,
    pub entry_bytes: usize,
    pub prf: PrfId,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for KernelSweepSpec {
    fn default() -> Self {
        KernelSweepSpec {
            log2_sizes: vec![20],
            strategies: Strategy::ALL.to_vec(),
            batches: vec![1, 8, 64, 512],
            chunks: vec![DEFAULT_CHUNK_K],
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            mem_budget_bytes: Some(4 << 30),
            entry_bytes: 64,
            prf: PrfId::Aes128Ctr,
            repetitions: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelRow {
    pub strategy: Strategy,
    pub log2_l: u32,
    pub batch: usize,
    pub chunk_k: usize,
    pub workers: usize,
    /// Measured PRF calls for one batch.
    pub prf_calls: u64,
    pub expected_prf_calls: u64,
    /// Measured high-water mark of live node bytes. With several workers
    /// it depends on how tasks interleave.
    pub peak_bytes: u64,
    pub peak_bound: u64,
    /// Median over repetitions.
    pub latency: Option<Duration>,
    pub qps: Option<f64>,
    /// `ok` or `infeasible: <reason>`.
    pub status: String,
    pub machine: String,
}

/// Strategy x L x B x K, one batch of random keys per repetition. Only
/// the memory-bounded strategy uses K; other strategies get one row per
/// (L, B). The cooperative strategy evaluates a batch one key at a time.
pub fn run_kernel_sweep(spec: &KernelSweepSpec) -> Result<Vec<KernelRow>, HarnessError> {
    check_reps(Scenario::KernelSweep, spec.repetitions)?;
    let engine = EvalEngine::new(spec.workers.max(1))?;
    let machine = machine_fingerprint();
    let mut rows = Vec::new();
    for &log2_l in &spec.log2_sizes {
        let l = 1u64 << log2_l;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ log2_l as u64);
        let table = EmbeddingTable::random(0, l as usize, spec.entry_bytes, &mut rng)?;
        let max_batch = spec.batches.iter().copied().max().unwrap_or(1);
        let keys = random_keys(&mut rng, l, spec.prf, max_batch)?;
        for &strategy in &spec.strategies {
            let chunks: Vec<usize> = if strategy == Strategy::MemBoundedTree {
                spec.chunks.clone()
            } else {
                vec![0]
            };
            for &batch in &spec.batches {
                for &chunk_k in &chunks {
                    let plan_batch = if strategy == Strategy::SingleQueryCooperative {
                        1
                    } else {
                        batch
                    };
                    let mut plan = EvalPlan::new(strategy)
                        .with_batch(plan_batch)
                        .with_workers(spec.workers.max(1));
                    if chunk_k > 0 {
                        plan = plan.with_chunk(chunk_k);
                    }
                    if let Some(b) = spec.mem_budget_bytes {
                        plan = plan.with_mem_budget(b);
                    }
                    let expected = batch as u64 * strategy.prf_calls_per_key(l);
                    let mut row = KernelRow {
                        strategy,
                        log2_l,
                        batch,
                        chunk_k,
                        workers: plan.workers,
                        prf_calls: 0,
                        expected_prf_calls: expected,
                        peak_bytes: 0,
                        peak_bound: peak_bytes_bound(
                            strategy,
                            l,
                            plan_batch,
                            plan.chunk_k,
                            plan.workers,
                        ),
                        latency: None,
                        qps: None,
                        status: "ok".into(),
                        machine: machine.clone(),
                    };
                    let mut times = Vec::with_capacity(spec.repetitions);
                    for _ in 0..spec.repetitions {
                        match engine.eval_batch(&keys[..batch], &table.view(), &plan) {
                            Ok((_, cost)) => {
                                row.prf_calls = cost.prf_calls;
                                row.peak_bytes = row.peak_bytes.max(cost.peak_intermediate_bytes);
                                times.push(cost.wall_time);
                            }
                            Err(
                                e @ (EngineError::Capacity { .. } | EngineError::BadChunk { .. }),
                            ) => {
                                row.status = format!("infeasible: {e}");
                                break;
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    if !times.is_empty() {
                        times.sort();
                        let median = times[times.len() / 2];
                        row.latency = Some(median);
                        row.qps = Some(batch as f64 / median.as_secs_f64().max(1e-9));
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_kernel_csv<W: Write>(rows: &[KernelRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "strategy",
        "log2_l",
        "batch",
        "chunk_k",
        "workers",
        "prf_calls",
        "expected_prf_calls",
        "peak_bytes",
        "peak_bound",
        "latency_ms",
        "qps",
        "status",
        "machine",
    ])?;
    for r in rows {
        out.write_record([
            r.strategy.to_string(),
            r.log2_l.to_string(),
            r.batch.to_string(),
            r.chunk_k.to_string(),
            r.workers.to_string(),
            r.prf_calls.to_string(),
            r.expected_prf_calls.to_string(),
            r.peak_bytes.to_string(),
            r.peak_bound.to_string(),
            r.latency
                .map_or(String::new(), |d| format!("{:.3}", d.as_secs_f64() * 1e3)),
            r.qps.map_or(String::new(), |q| format!("{q:.1}")),
            r.status.clone(),
            r.machine.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PrfSweepSpec {
    pub log2_l: u32,
    pub batch: usize,
    pub chunk_k: usize,
    pub workers: usize,
    pub entry_bytes: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for PrfSweepSpec {
    fn default() -> Self {
        PrfSweepSpec {
            log2_l: 20,
            batch: 512,
            chunk_k: DEFAULT_CHUNK_K,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            entry_bytes: 64,
            repetitions: 3,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrfRow {
    pub prf: PrfId,
    pub log2_l: u32,
    pub batch: usize,
    pub prf_calls: u64,
    pub latency: Duration,
    pub qps: f64,
    /// Throughput relative to the first PRF in the sweep.
    pub relative: f64,
    /// Reconstructed rows equal the plaintext rows.
    pub correct: bool,
    pub machine: String,
}

/// One row per registered PRF: the same targets over the same table, with
/// both parties' keys evaluated so every PRF's reconstruction is checked.
pub fn run_prf_sweep(spec: &PrfSweepSpec) -> Result<Vec<PrfRow>, HarnessError> {
    check_reps(Scenario::PrfSweep, spec.repetitions)?;
    if spec.batch == 0 {
        return Err(HarnessError::Params("batch must be >= 1".into()));
    }
    let engine = EvalEngine::new(spec.workers.max(1))?;
    let l = 1u64 << spec.log2_l;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let table = EmbeddingTable::random(0, l as usize, spec.entry_bytes, &mut rng)?;
    let targets: Vec<u64> = (0..spec.batch).map(|_| rng.gen_range(0..l)).collect();
    let plan = EvalPlan::new(Strategy::MemBoundedTree)
        .with_batch(spec.batch)
        .with_chunk(spec.chunk_k.min(l as usize))
        .with_workers(spec.workers.max(1));
    let machine = machine_fingerprint();
    let domain = DomainSpec::new(l)?;

    let mut rows: Vec<PrfRow> = Vec::new();
    for prf in PrfId::ALL {
        let mut ka = Vec::with_capacity(targets.len());
        let mut kb = Vec::with_capacity(targets.len());
        for &t in &targets {
            let (a, b) = gen(domain, prf, TargetPoint(t), &mut rng)?;
            ka.push(a);
            kb.push(b);
        }
        let mut times = Vec::new();
        let mut calls = 0;
        let mut shares_a = Vec::new();
        for _ in 0..spec.repetitions {
            let (s, cost) = engine.eval_batch(&ka, &table.view(), &plan)?;
            times.push(cost.wall_time);
            calls = cost.prf_calls;
            shares_a = s;
        }
        let (shares_b, _) = engine.eval_batch(&kb, &table.view(), &plan)?;
        let correct = targets
            .iter()
            .zip(shares_a.iter().zip(&shares_b))
            .all(|(&t, (a, b))| a.combine(b) == table.row(t as usize));
        times.sort();
        let latency = times[times.len() / 2];
        let qps = spec.batch as f64 / latency.as_secs_f64().max(1e-9);
        let relative = rows.first().map_or(1.0, |first| qps / first.qps);
        rows.push(PrfRow {
            prf,
            log2_l: spec.log2_l,
            batch: spec.batch,
            prf_calls: calls,
            latency,
            qps,
            relative,
            correct,
            machine: machine.clone(),
        });
    }
    Ok(rows)
}

pub fn write_prf_csv<W: Write>(rows: &[PrfRow], w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "prf",
        "log2_l",
        "batch",
        "prf_calls",
        "latency_ms",
        "qps",
        "relative",
        "correct",
        "machine",
    ])?;
    for r in rows {
        out.write_record([
            r.prf.to_string(),
            r.log2_l.to_string(),
            r.batch.to_string(),
            r.prf_calls.to_string(),
            format!("{:.3}", r.latency.as_secs_f64() * 1e3),
            format!("{:.1}", r.qps),
            format!("{:.3}", r.relative),
            r.correct.to_string(),
            r.machine.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A (PRF, communication) budget and the best drop rate each variant
/// reaches within it.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetPoint {
    pub max_prf_calls: u64,
    pub max_comm_bytes: u64,
    pub with_codesign: Option<f64>,
    pub without_codesign: Option<f64>,
}

impl BudgetPoint {
    /// How much lower the co-design drop rate is; `None` unless both
    /// variants have a feasible point.
    pub fn gap(&self) -> Option<f64> {
        Some(self.without_codesign? - self.with_codesign?)
    }
}

#[derive(Clone, Debug)]
pub struct CodesignReport {
    pub with_codesign: Vec<SweepResult>,
    pub without_codesign: Vec<SweepResult>,
    pub budgets: Vec<BudgetPoint>,
}

/// Pareto fronts with and without co-design (no hot table, no
/// co-location) over the same bins and full-table budgets, compared at
/// each `(max_prf_calls, max_comm_bytes)` budget.
pub fn run_codesign_sweep(
    trace: &Trace,
    logical_entries: usize,
    entry_bytes: usize,
    grid: &Grid,
    constraints: &Constraints,
    budgets: &[(u64, u64)],
    prf: PrfId,
) -> Result<CodesignReport, HarnessError> {
    if trace.is_empty() {
        return Err(PlanError::EmptyTrace.into());
    }
    let with_all = sweep::evaluate_grid(trace, logical_entries, entry_bytes, grid, prf)?;
    let without_all = sweep::evaluate_grid(
        trace,
        logical_entries,
        entry_bytes,
        &grid.without_codesign(),
        prf,
    )?;
    let with_codesign = sweep::pareto_front(&with_all, constraints);
    let without_codesign = sweep::pareto_front(&without_all, constraints);
    let budgets = budgets
        .iter()
        .map(|&(p, c)| BudgetPoint {
            max_prf_calls: p,
            max_comm_bytes: c,
            with_codesign: best_drop_within(&with_codesign, p, c),
            without_codesign: best_drop_within(&without_codesign, p, c),
        })
        .collect();
    Ok(CodesignReport {
        with_codesign,
        without_codesign,
        budgets,
    })
}

/// Both fronts in one CSV, tagged by a leading `variant` column.
pub fn write_codesign_csv<W: Write>(report: &CodesignReport, w: W) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["variant"];
    header.extend(sweep::CSV_HEADER);
    out.write_record(&header)?;
    for (name, front) in [
        ("codesign", &report.with_codesign),
        ("baseline", &report.without_codesign),
    ] {
        for r in front {
            let c = &r.config;
            out.write_record([
                name.to_string(),
                c.bin_size.to_string(),
                c.hot_size.to_string(),
                c.q_hot.to_string(),
                c.q_full.to_string(),
                c.colocate_c.to_string(),
                c.batch.to_string(),
                c.chunk_k.to_string(),
                c.strategy.to_string(),
                r.cost.prf_calls.to_string(),
                r.comm_bytes.to_string(),
                format!("{:.6}", r.drop_rate),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SyntheticTrace;

    fn small_kernel() -> KernelSweepSpec {
        KernelSweepSpec {
            log2_sizes: vec![8, 10],
            strategies: Strategy::ALL.to_vec(),
            batches: vec![1, 4],
            chunks: vec![16, 64],
            workers: 2,
            mem_budget_bytes: None,
            entry_bytes: 16,
            prf: PrfId::Aes128Ctr,
            repetitions: 3,
            seed: 5,
        }
    }

    #[test]
    fn kernel_counters_match_formulas() {
        let rows = run_kernel_sweep(&small_kernel()).unwrap();
        // 2 sizes x (3 strategies x 2 batches + mem-bounded x 2 batches x 2 chunks)
        assert_eq!(rows.len(), 2 * (3 * 2 + 2 * 2));
        for r in &rows {
            assert_eq!(r.status, "ok");
            assert_eq!(r.prf_calls, r.expected_prf_calls, "{r:?}");
            assert!(r.peak_bytes <= r.peak_bound, "{r:?}");
        }
        for log2 in [8u32, 10] {
            let l = 1u64 << log2;
            let calls = |s: Strategy| {
                rows.iter()
                    .find(|r| r.strategy == s && r.log2_l == log2)
                    .unwrap()
                    .prf_calls
            };
            let ratio =
                calls(Strategy::BranchParallel) as f64 / calls(Strategy::LevelByLevel) as f64;
            let want = log2 as f64 / 2.0 * l as f64 / (l as f64 - 1.0);
            assert!((ratio - want).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_counters_are_reproducible() {
        let counters = |rows: Vec<KernelRow>| -> Vec<(u64, u64, u64)> {
            rows.iter()
                .map(|r| (r.prf_calls, r.expected_prf_calls, r.peak_bound))
                .collect()
        };
        assert_eq!(
            counters(run_kernel_sweep(&small_kernel()).unwrap()),
            counters(run_kernel_sweep(&small_kernel()).unwrap())
        );
        // Measured peaks depend on thread interleaving unless there is a
        // single worker.
        let single = KernelSweepSpec {
            workers: 1,
            ..small_kernel()
        };
        let peaks =
            |rows: Vec<KernelRow>| -> Vec<u64> { rows.iter().map(|r| r.peak_bytes).collect() };
        assert_eq!(
            peaks(run_kernel_sweep(&single).unwrap()),
            peaks(run_kernel_sweep(&single).unwrap())
        );
    }

    #[test]
    fn infeasible_rows_are_marked() {
        let spec = KernelSweepSpec {
            log2_sizes: vec![10],
            strategies: vec![Strategy::LevelByLevel, Strategy::MemBoundedTree],
            batches: vec![8],
            chunks: vec![2048, 32],
            mem_budget_bytes: Some(64 << 10),
            ..small_kernel()
        };
        let rows = run_kernel_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].status.starts_with("infeasible"));
        assert!(rows[1].status.starts_with("infeasible"));
        assert_eq!(rows[2].status, "ok");
        let mut buf = Vec::new();
        write_kernel_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn too_few_repetitions() {
        let spec = KernelSweepSpec {
            repetitions: 2,
            ..small_kernel()
        };
        assert!(matches!(
            run_kernel_sweep(&spec),
            Err(HarnessError::Params(_))
        ));
    }

    #[test]
    fn prf_sweep_has_one_correct_row_per_prf() {
        let rows = run_prf_sweep(&PrfSweepSpec {
            log2_l: 10,
            batch: 8,
            workers: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(rows.len(), PrfId::ALL.len());
        assert!(rows.iter().all(|r| r.correct && r.prf_calls == 8 * 2046));
        assert_eq!(rows[0].relative, 1.0);
    }

    #[test]
    fn codesign_sweep_rejects_empty_trace() {
        let grid = Grid {
            bin_sizes: vec![64],
            hot_sizes: vec![0],
            hot_fractions: vec![],
            q_hot: vec![0],
            q_full: vec![4],
            colocate_c: vec![0],
            batch: vec![1],
            chunk_k: vec![16],
            strategies: vec![Strategy::MemBoundedTree],
        };
        let err = run_codesign_sweep(
            &Trace::default(),
            1024,
            16,
            &grid,
            &Constraints::default(),
            &[],
            PrfId::Aes128Ctr,
        );
        assert!(matches!(
            err,
            Err(HarnessError::Plan(PlanError::EmptyTrace))
        ));

        let trace = SyntheticTrace {
            num_entries: 1024,
            inferences: 100,
            lookups: 4,
            exponent: 1.0,
            block: 1,
            block_prob: 0.0,
        }
        .generate(&mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
        let report = run_codesign_sweep(
            &trace,
            1024,
            16,
            &grid,
            &Constraints::default(),
            &[(u64::MAX, u64::MAX)],
            PrfId::Aes128Ctr,
        )
        .unwrap();
        // Without any co-design knobs both variants are the same grid.
        assert_eq!(report.budgets[0].gap(), Some(0.0));
    }
}
