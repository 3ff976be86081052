//! Offline grid search over planner and engine parameters.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_drop_rate, PlanError, Planner, TableGeometry};
use crate::codesign::{
    access_counts, companions_from_trace, top_k_by_frequency, Companions, HotIndexMap,
};
use crate::engine::{peak_bytes_bound, CostReport, EvalPlan, Strategy, DEFAULT_CHUNK_K};
use crate::prf::PrfId;
use crate::trace::Trace;

/// Table ids used for the simulated layouts; only their distinctness matters.
const FULL_ID: u32 = 0;
const HOT_ID: u32 = 1;

fn one() -> Vec<usize> {
    vec![1]
}

fn zero() -> Vec<usize> {
    vec![0]
}

fn default_chunk() -> Vec<usize> {
    vec![DEFAULT_CHUNK_K]
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::MemBoundedTree]
}

/// The lattice of configurations to evaluate. Every combination of the
/// listed values is one point.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub bin_sizes: Vec<usize>,
    /// Hot table sizes in rows; 0 means no hot table.
    #[serde(default = "zero")]
    pub hot_sizes: Vec<usize>,
    /// Hot table sizes as fractions of the table, added to `hot_sizes`.
    #[serde(default)]
    pub hot_fractions: Vec<f64>,
    #[serde(default = "zero")]
    pub q_hot: Vec<usize>,
    pub q_full: Vec<usize>,
    #[serde(default = "zero")]
    pub colocate_c: Vec<usize>,
    #[serde(default = "one")]
    pub batch: Vec<usize>,
    #[serde(default = "default_chunk")]
    pub chunk_k: Vec<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
}

impl Grid {
    fn hot_sizes_for(&self, len: usize) -> Vec<usize> {
        let mut sizes = self.hot_sizes.clone();
        sizes.extend(
            self.hot_fractions
                .iter()
                .map(|f| ((len as f64) * f.clamp(0.0, 1.0)).round() as usize),
        );
        sizes.sort_unstable();
        sizes.dedup();
        sizes
    }

    /// The baseline grid: same bins and full budgets, no hot table and no
    /// co-location.
    pub fn without_codesign(&self) -> Grid {
        Grid {
            hot_sizes: vec![0],
            hot_fractions: Vec::new(),
            q_hot: vec![0],
            colocate_c: vec![0],
            ..self.clone()
        }
    }
}

/// Per-inference limits; `None` means unconstrained.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    pub max_comm_bytes: Option<u64>,
    pub max_prf_calls: Option<u64>,
    pub max_drop_rate: Option<f64>,
}

impl Constraints {
    pub fn admits(&self, r: &SweepResult) -> bool {
        self.max_comm_bytes.is_none_or(|m| r.comm_bytes <= m)
            && self.max_prf_calls.is_none_or(|m| r.cost.prf_calls <= m)
            && self.max_drop_rate.is_none_or(|m| r.drop_rate <= m)
    }
}

/// A sweep configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: Grid,
    #[serde(default)]
    pub constraints: Constraints,
    #[serde(default)]
    pub prf: PrfId,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self, PlanError> {
        toml::from_str(text).map_err(|e| PlanError::SweepConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlanError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SweepPoint {
    pub bin_size: usize,
    pub hot_size: usize,
    pub q_hot: usize,
    pub q_full: usize,
    pub colocate_c: usize,
    pub batch: usize,
    pub chunk_k: usize,
    pub strategy: Strategy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub config: SweepPoint,
    /// Per-inference, per-server PRF calls and the engine's live node bound.
    pub cost: CostReport,
    /// Per-inference bytes on the wire, both servers, both directions.
    pub comm_bytes: u64,
    pub drop_rate: f64,
}

impl SweepResult {
    fn axes(&self) -> (u64, u64, f64) {
        (self.cost.prf_calls, self.comm_bytes, self.drop_rate)
    }

    /// No worse on every axis and better on one.
    pub fn dominates(&self, other: &SweepResult) -> bool {
        let (p, c, d) = self.axes();
        let (p2, c2, d2) = other.axes();
        p <= p2 && c <= c2 && d <= d2 && (p < p2 || c < c2 || d < d2)
    }
}

/// Key for the parts of a point that decide drops and communication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct LayoutPoint {
    bin_size: usize,
    hot_size: usize,
    q_hot: usize,
    q_full: usize,
    colocate_c: usize,
}

struct LayoutEval {
    planner: Planner,
    drop_rate: f64,
}

/// Evaluate every valid point of `grid` for a table of `logical_entries`
/// rows of `entry_bytes` each. Points that cannot be realised (bins larger
/// than the table, hot budget without a hot table, chunk wider than a bin,
/// batched cooperative evaluation) are skipped.
pub fn evaluate_grid(
    trace: &Trace,
    logical_entries: usize,
    entry_bytes: usize,
    grid: &Grid,
    prf: PrfId,
) -> Result<Vec<SweepResult>, PlanError> {
    if trace.is_empty() {
        return Err(PlanError::EmptyTrace);
    }
    if logical_entries == 0 || entry_bytes == 0 {
        return Err(PlanError::SweepConfig("empty table".into()));
    }
    let padded = logical_entries.next_power_of_two().max(2);
    let counts = access_counts(trace, logical_entries)?;
    let hot_sizes = grid.hot_sizes_for(logical_entries);

    let mut companions: HashMap<usize, Arc<Companions>> = HashMap::new();
    for &c in &grid.colocate_c {
        if let std::collections::hash_map::Entry::Vacant(e) = companions.entry(c) {
            e.insert(Arc::new(companions_from_trace(trace, logical_entries, c)?));
        }
    }
    let mut hot_maps: HashMap<usize, Arc<HotIndexMap>> = HashMap::new();
    for &h in &hot_sizes {
        if h > logical_entries {
            continue;
        }
        let top = top_k_by_frequency(&counts, h);
        let map = top
            .iter()
            .enumerate()
            .map(|(row, &i)| (i, row as u32))
            .collect();
        hot_maps.insert(h, Arc::new(HotIndexMap(map)));
    }

    let mut layouts = Vec::new();
    for &bin_size in &grid.bin_sizes {
        for &hot_size in &hot_sizes {
            for &q_hot in &grid.q_hot {
                for &q_full in &grid.q_full {
                    for &c in &grid.colocate_c {
                        layouts.push(LayoutPoint {
                            bin_size,
                            hot_size,
                            q_hot,
                            q_full,
                            colocate_c: c,
                        });
                    }
                }
            }
        }
    }
    layouts.sort_unstable();
    layouts.dedup();

    let evals: Vec<(LayoutPoint, Option<LayoutEval>)> = layouts
        .into_par_iter()
        .map(|lp| {
            let Some(hot_map) = hot_maps.get(&lp.hot_size) else {
                return Ok((lp, None));
            };
            let width = entry_bytes * (lp.colocate_c + 1);
            let full = TableGeometry {
                table_id: FULL_ID,
                num_entries: padded,
                logical_entries,
                row_width: width,
            };
            let hot = (lp.hot_size > 0).then(|| TableGeometry {
                table_id: HOT_ID,
                num_entries: lp.hot_size.next_power_of_two().max(2),
                logical_entries: lp.hot_size,
                row_width: width,
            });
            let planner = match Planner::from_shared(
                full,
                lp.bin_size,
                hot,
                lp.bin_size,
                hot_map.clone(),
                companions[&lp.colocate_c].clone(),
                entry_bytes,
                lp.q_hot,
                lp.q_full,
                prf,
            ) {
                Ok(p) => p,
                Err(PlanError::ConfigMismatch(_)) => return Ok((lp, None)),
                Err(e) => return Err(e),
            };
            let drop_rate = simulate_drop_rate(trace, &planner)?;
            Ok((lp, Some(LayoutEval { planner, drop_rate })))
        })
        .collect::<Result<_, PlanError>>()?;

    let mut out = Vec::new();
    for (lp, eval) in &evals {
        let Some(eval) = eval else { continue };
        for &strategy in &grid.strategies {
            for &batch in &grid.batch {
                for &chunk_k in &grid.chunk_k {
                    let point = SweepPoint {
                        bin_size: lp.bin_size,
                        hot_size: lp.hot_size,
                        q_hot: lp.q_hot,
                        q_full: lp.q_full,
                        colocate_c: lp.colocate_c,
                        batch,
                        chunk_k,
                        strategy,
                    };
                    if let Some(r) = cost_point(point, eval) {
                        out.push(r);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn cost_point(point: SweepPoint, eval: &LayoutEval) -> Option<SweepResult> {
    let p = &eval.planner;
    let mut tables = vec![(p.full().bins.bin_size(), point.q_full)];
    if let Some(h) = p.hot() {
        tables.push((h.bins.bin_size(), point.q_hot));
    }
    let mut peak = 0;
    for &(l, q) in &tables {
        if q == 0 {
            continue;
        }
        let plan = EvalPlan::new(point.strategy)
            .with_batch(point.batch)
            .with_chunk(point.chunk_k);
        if plan.validate(l).is_err() {
            return None;
        }
        let batch = point.batch.min(q);
        peak = peak.max(peak_bytes_bound(
            point.strategy,
            l as u64,
            batch,
            point.chunk_k,
            1,
        ));
    }
    Some(SweepResult {
        config: point,
        cost: CostReport {
            prf_calls: p.server_prf_calls(point.strategy),
            peak_intermediate_bytes: peak,
            wall_time: Default::default(),
            responses_bytes: 2 * p.response_bytes_per_server(),
        },
        comm_bytes: p.comm_bytes(),
        drop_rate: eval.drop_rate,
    })
}

/// Admissible points that no other admissible point dominates, by drop
/// rate, then PRF calls, then communication, then configuration.
pub fn pareto_front(results: &[SweepResult], constraints: &Constraints) -> Vec<SweepResult> {
    let feasible: Vec<&SweepResult> = results.iter().filter(|r| constraints.admits(r)).collect();
    let mut front: Vec<SweepResult> = feasible
        .iter()
        .filter(|r| !feasible.iter().any(|o| o.dominates(r)))
        .map(|r| (*r).clone())
        .collect();
    sort_results(&mut front);
    front
}

pub fn sort_results(results: &mut [SweepResult]) {
    results.sort_by(|a, b| {
        a.drop_rate
            .total_cmp(&b.drop_rate)
            .then(a.cost.prf_calls.cmp(&b.cost.prf_calls))
            .then(a.comm_bytes.cmp(&b.comm_bytes))
            .then(a.config.cmp(&b.config))
    });
}

/// Evaluate the grid and return its Pareto front under `constraints`.
pub fn grid_search(
    trace: &Trace,
    logical_entries: usize,
    entry_bytes: usize,
    grid: &Grid,
    constraints: &Constraints,
    prf: PrfId,
) -> Result<Vec<SweepResult>, PlanError> {
    let all = evaluate_grid(trace, logical_entries, entry_bytes, grid, prf)?;
    let front = pareto_front(&all, constraints);
    if front.is_empty() {
        return Err(PlanError::Infeasible);
    }
    Ok(front)
}

/// Lowest drop rate among `results` within both budgets.
pub fn best_drop_within(
    results: &[SweepResult],
    max_prf_calls: u64,
    max_comm_bytes: u64,
) -> Option<f64> {
    results
        .iter()
        .filter(|r| r.cost.prf_calls <= max_prf_calls && r.comm_bytes <= max_comm_bytes)
        .map(|r| r.drop_rate)
        .min_by(|a, b| a.total_cmp(b))
}

pub const CSV_HEADER: [&str; 11] = [
    "bin_size",
    "hot_size",
    "q_hot",
    "q_full",
    "colocate_c",
    "batch",
    "chunk_k",
    "strategy",
    "prf_calls",
    "comm_bytes",
    "drop_rate",
];

pub fn write_csv<W: Write>(results: &[SweepResult], w: W) -> Result<(), PlanError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in results {
        let c = &r.config;
        out.write_record([
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
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::PlannerSpec;
    use crate::trace::SyntheticTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(bins: Vec<usize>, q_full: Vec<usize>) -> Grid {
        Grid {
            bin_sizes: bins,
            hot_sizes: vec![0],
            hot_fractions: vec![],
            q_hot: vec![0],
            q_full,
            colocate_c: vec![0],
            batch: vec![1],
            chunk_k: vec![16],
            strategies: vec![Strategy::MemBoundedTree],
        }
    }

    fn trace() -> Trace {
        SyntheticTrace {
            num_entries: 1024,
            inferences: 300,
            lookups: 6,
            exponent: 1.0,
            block: 4,
            block_prob: 0.3,
        }
        .generate(&mut ChaCha8Rng::seed_from_u64(11))
        .unwrap()
    }

    #[test]
    fn single_config_iff_feasible() {
        let t = trace();
        let g = grid(vec![64], vec![8]);
        let front =
            grid_search(&t, 1024, 16, &g, &Constraints::default(), PrfId::Aes128Ctr).unwrap();
        assert_eq!(front.len(), 1);
        let r = &front[0];
        assert_eq!(r.cost.prf_calls, 8 * 126);
        let planner = Planner::new(PlannerSpec {
            full: TableGeometry {
                table_id: 0,
                num_entries: 1024,
                logical_entries: 1024,
                row_width: 16,
            },
            full_bin_size: 64,
            hot: None,
            hot_bin_size: 0,
            hot_map: HotIndexMap::default(),
            companions: Companions::none(1024),
            base_entry_bytes: 16,
            q_hot: 0,
            q_full: 8,
            prf: PrfId::Aes128Ctr,
        })
        .unwrap();
        assert_eq!(r.drop_rate, simulate_drop_rate(&t, &planner).unwrap());
        // 8 keys of depth 6 and 8 rows of 16 bytes, framed, to and from
        // both servers.
        assert_eq!(
            r.comm_bytes,
            2 * 8 * ((10 + 16 + 24 + 64 * 6) + (10 + 8 + 16))
        );

        let tight = Constraints {
            max_comm_bytes: Some(r.comm_bytes - 1),
            ..Default::default()
        };
        assert!(matches!(
            grid_search(&t, 1024, 16, &g, &tight, PrfId::Aes128Ctr),
            Err(PlanError::Infeasible)
        ));
    }

    #[test]
    fn dominated_config_is_pruned() {
        let t = trace();
        // Branch-parallel evaluation costs more PRF calls at identical
        // drops and communication.
        let mut g = grid(vec![64], vec![8]);
        g.strategies = vec![Strategy::BranchParallel, Strategy::MemBoundedTree];
        let front =
            grid_search(&t, 1024, 16, &g, &Constraints::default(), PrfId::Aes128Ctr).unwrap();
        assert_eq!(front.len(), 1);
        assert_eq!(front[0].config.strategy, Strategy::MemBoundedTree);
    }

    #[test]
    fn smaller_bins_cost_more_comm_and_drop_less() {
        let t = trace();
        // One key per bin, so every bin is queried.
        let mut results = Vec::new();
        for bin in [512usize, 256, 128, 64, 32] {
            let g = grid(vec![bin], vec![1024 / bin]);
            results.extend(evaluate_grid(&t, 1024, 16, &g, PrfId::Aes128Ctr).unwrap());
        }
        for w in results.windows(2) {
            assert!(w[1].comm_bytes > w[0].comm_bytes);
            assert!(w[1].drop_rate <= w[0].drop_rate);
        }
        assert!(results.last().unwrap().drop_rate < results[0].drop_rate);
    }

    #[test]
    fn invalid_points_are_skipped() {
        let t = trace();
        let mut g = grid(vec![64, 4096], vec![4]);
        g.hot_sizes = vec![0, 100];
        g.q_hot = vec![0, 2];
        g.batch = vec![1, 4];
        g.strategies = vec![Strategy::SingleQueryCooperative];
        let all = evaluate_grid(&t, 1024, 16, &g, PrfId::Aes128Ctr).unwrap();
        assert!(all.iter().all(|r| r.config.bin_size == 64));
        assert!(all.iter().all(|r| r.config.batch == 1));
        assert!(all
            .iter()
            .all(|r| r.config.hot_size > 0 || r.config.q_hot == 0));
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn deterministic_and_csv() {
        let t = trace();
        let mut g = grid(vec![32, 128], vec![4, 8]);
        g.hot_fractions = vec![0.1];
        g.q_hot = vec![0, 2];
        g.colocate_c = vec![0, 2];
        let a = evaluate_grid(&t, 1024, 16, &g, PrfId::Aes128Ctr).unwrap();
        let b = evaluate_grid(&t, 1024, 16, &g, PrfId::Aes128Ctr).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "bin_size,hot_size,q_hot,q_full,colocate_c,batch,chunk_k,strategy,prf_calls,comm_bytes,drop_rate\n"
        ));
        assert_eq!(text.lines().count(), a.len() + 1);
    }

    #[test]
    fn config_file() {
        let cfg = SweepConfig::from_toml(
            r#"
            prf = "chacha20"
            [grid]
            bin_sizes = [256, 1024]
            hot_fractions = [0.1, 0.2]
            q_hot = [2]
            q_full = [4, 8]
            colocate_c = [0, 2]
            strategies = ["mem-bounded", "level-by-level"]
            [constraints]
            max_comm_bytes = 300000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.prf, PrfId::ChaCha20);
        assert_eq!(cfg.grid.batch, vec![1]);
        assert_eq!(cfg.constraints.max_comm_bytes, Some(300_000));
        assert!(SweepConfig::from_toml("[grid]\nbin_sizes=[2]\nq_full=[1]\nbogus=1\n").is_err());
    }
}
