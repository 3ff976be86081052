//! Client-side planning of one inference's lookups.
//!
//! A table of `L` rows is cut into `L / I` contiguous bins of `I` rows and
//! each key addresses a single bin, so a server only expands an `I`-leaf
//! tree per key. Only one row per bin can be fetched by one plan; a second
//! wanted row in an already used bin is dropped. Every plan carries exactly
//! `q_hot` keys for the hot table and `q_full` keys for the full table,
//! padding with dummy keys, so the number and size of the keys never depend
//! on what was asked for.
//!
//! The bin of each key is visible to the servers. When `q_full` equals the
//! number of bins every bin receives exactly one key and the bin list is
//! constant too; with smaller budgets the set of touched bins is revealed.

pub mod sweep;

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::codesign::{CodesignError, ColocatedTable, Companions, HotIndexMap, HotSplit};
use crate::dpf::{gen, serialized_key_len, DomainSpec, DpfError, DpfKey, TargetPoint};
use crate::engine::Strategy;
use crate::prf::PrfId;
use crate::service::wire::{FRAME_HEADER_BYTES, QUERY_PREFIX_BYTES};
use crate::table::EmbeddingTable;
use crate::trace::Trace;

/// Response frame bytes in front of the share: the request id.
const RESPONSE_PREFIX_BYTES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("index {index} is outside the table's {len} rows")]
    IndexOutOfRange { index: u32, len: usize },
    #[error("expected {expected} responses per server, got {a} and {b}")]
    ResponseCount { expected: usize, a: usize, b: usize },
    #[error("slot {slot}: shares of {a} and {b} bytes, row width is {expected}")]
    LengthMismatch {
        slot: usize,
        a: usize,
        b: usize,
        expected: usize,
    },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("no configuration satisfies the constraints")]
    Infeasible,
    #[error("sweep configuration: {0}")]
    SweepConfig(String),
    #[error(transparent)]
    Dpf(#[from] DpfError),
    #[error(transparent)]
    Codesign(#[from] CodesignError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Contiguous bins of `bin_size` rows over a padded table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinConfig {
    bin_size: usize,
    num_entries: usize,
}

impl BinConfig {
    pub fn new(bin_size: usize, num_entries: usize) -> Result<Self, PlanError> {
        if !num_entries.is_power_of_two() || num_entries < 2 {
            return Err(PlanError::ConfigMismatch(format!(
                "table of {num_entries} rows is not a padded power of two"
            )));
        }
        if !bin_size.is_power_of_two() || bin_size < 2 || bin_size > num_entries {
            return Err(PlanError::ConfigMismatch(format!(
                "bin size {bin_size} must be a power of two in [2, {num_entries}]"
            )));
        }
        Ok(BinConfig {
            bin_size,
            num_entries,
        })
    }

    pub fn bin_size(&self) -> usize {
        self.bin_size
    }

    pub fn num_entries(&self) -> usize {
        self.num_entries
    }

    pub fn num_bins(&self) -> usize {
        self.num_entries / self.bin_size
    }

    pub fn bin_of(&self, index: u32) -> u32 {
        (index as usize / self.bin_size) as u32
    }

    pub fn offset_of(&self, index: u32) -> u64 {
        (index as usize % self.bin_size) as u64
    }

    pub fn range(&self, bin: u32) -> Range<usize> {
        let start = bin as usize * self.bin_size;
        start..start + self.bin_size
    }

    pub fn domain(&self) -> DomainSpec {
        DomainSpec::new(self.bin_size as u64).expect("bin size validated")
    }
}

/// What the client needs to know about a hosted table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableGeometry {
    pub table_id: u32,
    /// Padded row count.
    pub num_entries: usize,
    pub logical_entries: usize,
    pub row_width: usize,
}

impl TableGeometry {
    pub fn of(table: &EmbeddingTable) -> Self {
        TableGeometry {
            table_id: table.table_id(),
            num_entries: table.num_entries(),
            logical_entries: table.logical_entries(),
            row_width: table.entry_bytes(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableLayout {
    pub geometry: TableGeometry,
    pub bins: BinConfig,
}

impl TableLayout {
    pub fn new(geometry: TableGeometry, bin_size: usize) -> Result<Self, PlanError> {
        if geometry.logical_entries == 0 || geometry.logical_entries > geometry.num_entries {
            return Err(PlanError::ConfigMismatch(format!(
                "bad table geometry {geometry:?}"
            )));
        }
        Ok(TableLayout {
            geometry,
            bins: BinConfig::new(bin_size, geometry.num_entries)?,
        })
    }

    /// Bins holding at least one real row. Bins made only of padding are
    /// never addressed, not even by dummies.
    pub fn usable_bins(&self) -> u32 {
        self.geometry.logical_entries.div_ceil(self.bins.bin_size) as u32
    }

    fn logical_rows_in(&self, bin: u32) -> u64 {
        let r = self.bins.range(bin);
        (r.end.min(self.geometry.logical_entries) - r.start) as u64
    }

    pub fn key_bytes(&self) -> usize {
        serialized_key_len(self.bins.bin_size.trailing_zeros())
    }
}

/// Everything a [`Planner`] is built from.
#[derive(Clone, Debug)]
pub struct PlannerSpec {
    pub full: TableGeometry,
    pub full_bin_size: usize,
    pub hot: Option<TableGeometry>,
    /// Clamped to the hot table's padded size.
    pub hot_bin_size: usize,
    pub hot_map: HotIndexMap,
    pub companions: Companions,
    pub base_entry_bytes: usize,
    pub q_hot: usize,
    pub q_full: usize,
    pub prf: PrfId,
}

/// Plans the keys for one inference under fixed budgets.
#[derive(Clone, Debug)]
pub struct Planner {
    full: TableLayout,
    hot: Option<TableLayout>,
    hot_map: Arc<HotIndexMap>,
    companions: Arc<Companions>,
    base_entry_bytes: usize,
    q_hot: usize,
    q_full: usize,
    prf: PrfId,
}

impl Planner {
    pub fn new(spec: PlannerSpec) -> Result<Self, PlanError> {
        Self::from_shared(
            spec.full,
            spec.full_bin_size,
            spec.hot,
            spec.hot_bin_size,
            Arc::new(spec.hot_map),
            Arc::new(spec.companions),
            spec.base_entry_bytes,
            spec.q_hot,
            spec.q_full,
            spec.prf,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_shared(
        full: TableGeometry,
        full_bin_size: usize,
        hot: Option<TableGeometry>,
        hot_bin_size: usize,
        hot_map: Arc<HotIndexMap>,
        companions: Arc<Companions>,
        base_entry_bytes: usize,
        q_hot: usize,
        q_full: usize,
        prf: PrfId,
    ) -> Result<Self, PlanError> {
        let mismatch = |m: String| Err(PlanError::ConfigMismatch(m));
        let full = TableLayout::new(full, full_bin_size)?;
        let hot = hot
            .map(|g| TableLayout::new(g, hot_bin_size.min(g.num_entries)))
            .transpose()?;
        let width = base_entry_bytes * (companions.c() + 1);
        if base_entry_bytes == 0 || full.geometry.row_width != width {
            return mismatch(format!(
                "full table rows are {} bytes, expected {base_entry_bytes} x {}",
                full.geometry.row_width,
                companions.c() + 1
            ));
        }
        if companions.len() != full.geometry.logical_entries {
            return mismatch(format!(
                "companion map covers {} rows, table has {}",
                companions.len(),
                full.geometry.logical_entries
            ));
        }
        match &hot {
            None if q_hot > 0 || !hot_map.is_empty() => {
                return mismatch("hot budget or hot map without a hot table".into())
            }
            Some(h) => {
                if h.geometry.row_width != width {
                    return mismatch("hot and full rows differ in width".into());
                }
                if h.geometry.table_id == full.geometry.table_id {
                    return mismatch("hot and full tables share an id".into());
                }
                if hot_map.len() != h.geometry.logical_entries {
                    return mismatch(format!(
                        "hot map has {} entries, hot table {}",
                        hot_map.len(),
                        h.geometry.logical_entries
                    ));
                }
                for (&idx, &row) in &hot_map.0 {
                    if idx as usize >= full.geometry.logical_entries
                        || row as usize >= h.geometry.logical_entries
                    {
                        return mismatch(format!("hot map entry {idx} -> {row} out of range"));
                    }
                }
            }
            None => {}
        }
        Ok(Planner {
            full,
            hot,
            hot_map,
            companions,
            base_entry_bytes,
            q_hot,
            q_full,
            prf,
        })
    }

    /// Planner over a built hot split and co-located layout. The split must
    /// have been built from `colocated.table`.
    pub fn for_tables(
        split: &HotSplit,
        colocated: &ColocatedTable,
        hot_bin_size: usize,
        full_bin_size: usize,
        prf: PrfId,
    ) -> Result<Self, PlanError> {
        if split.full_table != colocated.table {
            return Err(PlanError::ConfigMismatch(
                "hot split was not built from the co-located table".into(),
            ));
        }
        Planner::new(PlannerSpec {
            full: TableGeometry::of(&colocated.table),
            full_bin_size,
            hot: split.hot_table.as_ref().map(TableGeometry::of),
            hot_bin_size,
            hot_map: split.hot_index_map.clone(),
            companions: colocated.companions.clone(),
            base_entry_bytes: colocated.base_entry_bytes,
            q_hot: split.q_hot,
            q_full: split.q_full,
            prf,
        })
    }

    pub fn full(&self) -> &TableLayout {
        &self.full
    }

    pub fn hot(&self) -> Option<&TableLayout> {
        self.hot.as_ref()
    }

    pub fn q_hot(&self) -> usize {
        self.q_hot
    }

    pub fn q_full(&self) -> usize {
        self.q_full
    }

    pub fn prf(&self) -> PrfId {
        self.prf
    }

    pub fn base_entry_bytes(&self) -> usize {
        self.base_entry_bytes
    }

    pub fn companions(&self) -> &Companions {
        &self.companions
    }

    pub fn hot_map(&self) -> &HotIndexMap {
        &self.hot_map
    }

    pub fn num_keys(&self) -> usize {
        self.q_hot + self.q_full
    }

    /// PRF calls one server spends on one plan.
    pub fn server_prf_calls(&self, strategy: Strategy) -> u64 {
        let hot = self
            .hot
            .map_or(0, |h| strategy.prf_calls_per_key(h.bins.bin_size as u64));
        self.q_hot as u64 * hot
            + self.q_full as u64 * strategy.prf_calls_per_key(self.full.bins.bin_size as u64)
    }

    /// Bytes the client sends to one server for one plan.
    pub fn request_bytes_per_server(&self) -> u64 {
        let frame =
            |l: &TableLayout| (FRAME_HEADER_BYTES + QUERY_PREFIX_BYTES + l.key_bytes()) as u64;
        self.q_hot as u64 * self.hot.as_ref().map_or(0, frame)
            + self.q_full as u64 * frame(&self.full)
    }

    /// Bytes one server sends back for one plan.
    pub fn response_bytes_per_server(&self) -> u64 {
        let frame = |l: &TableLayout| {
            (FRAME_HEADER_BYTES + RESPONSE_PREFIX_BYTES + l.geometry.row_width) as u64
        };
        self.q_hot as u64 * self.hot.as_ref().map_or(0, frame)
            + self.q_full as u64 * frame(&self.full)
    }

    /// Total bytes on the wire for one plan, both servers, both directions.
    pub fn comm_bytes(&self) -> u64 {
        2 * (self.request_bytes_per_server() + self.response_bytes_per_server())
    }

    /// Decide which wanted rows are fetched, through which table and bin.
    /// Uses no randomness.
    pub fn assign(&self, wanted: &[u32]) -> Result<Assignment, PlanError> {
        let logical = self.full.geometry.logical_entries;
        let mut seen = HashSet::with_capacity(wanted.len());
        let mut distinct = Vec::with_capacity(wanted.len());
        for &i in wanted {
            if i as usize >= logical {
                return Err(PlanError::IndexOutOfRange {
                    index: i,
                    len: logical,
                });
            }
            if seen.insert(i) {
                distinct.push(i);
            }
        }

        let mut out = Assignment::default();
        let mut reach: HashSet<u32> = HashSet::new();
        let mut used_hot = HashSet::new();
        let mut used_full = HashSet::new();
        for i in distinct {
            if reach.contains(&i) {
                out.covered.push(i);
                continue;
            }
            let hot_slot = match (self.hot, self.hot_map.get(i)) {
                (Some(h), Some(row))
                    if out.hot.len() < self.q_hot && !used_hot.contains(&h.bins.bin_of(row)) =>
                {
                    Some((h, row))
                }
                _ => None,
            };
            if let Some((h, row)) = hot_slot {
                let bin = h.bins.bin_of(row);
                used_hot.insert(bin);
                out.hot.push(RealQuery {
                    index: i,
                    bin,
                    offset: h.bins.offset_of(row),
                });
            } else {
                let bin = self.full.bins.bin_of(i);
                if out.full.len() < self.q_full && !used_full.contains(&bin) {
                    used_full.insert(bin);
                    out.full.push(RealQuery {
                        index: i,
                        bin,
                        offset: self.full.bins.offset_of(i),
                    });
                } else {
                    out.dropped.push(i);
                    continue;
                }
            }
            out.served.push(i);
            reach.extend(self.companions.of(i).iter().copied());
        }
        // A row served later in the request may carry an earlier casualty.
        let mut late = Vec::new();
        out.dropped.retain(|i| {
            let hit = reach.contains(i);
            if hit {
                late.push(*i);
            }
            !hit
        });
        out.covered.extend(late);
        Ok(out)
    }

    /// Build the keys for one inference. Deterministic given `rng`'s state.
    pub fn plan<R: RngCore + ?Sized>(
        &self,
        wanted: &[u32],
        rng: &mut R,
    ) -> Result<QueryPlan, PlanError> {
        let a = self.assign(wanted)?;
        let hot_slots = match &self.hot {
            Some(h) => self.build_slots(h, &a.hot, self.q_hot, rng)?,
            None => Vec::new(),
        };
        let full_slots = self.build_slots(&self.full, &a.full, self.q_full, rng)?;
        let dummy_count = self.q_hot + self.q_full - a.hot.len() - a.full.len();
        Ok(QueryPlan {
            hot_slots,
            full_slots,
            served: a.served,
            covered: a.covered,
            dropped: a.dropped,
            dummy_count,
            base_entry_bytes: self.base_entry_bytes,
        })
    }

    fn build_slots<R: RngCore + ?Sized>(
        &self,
        layout: &TableLayout,
        real: &[RealQuery],
        budget: usize,
        rng: &mut R,
    ) -> Result<Vec<PlannedQuery>, PlanError> {
        let mut picks: Vec<(u32, u64, Option<u32>)> = real
            .iter()
            .map(|q| (q.bin, q.offset, Some(q.index)))
            .collect();
        let used: HashSet<u32> = real.iter().map(|q| q.bin).collect();
        let mut free: Vec<u32> = (0..layout.usable_bins())
            .filter(|b| !used.contains(b))
            .collect();
        free.shuffle(rng);
        let mut free = free.into_iter();
        while picks.len() < budget {
            let bin = free
                .next()
                .unwrap_or_else(|| rng.gen_range(0..layout.usable_bins()));
            let offset = rng.gen_range(0..layout.logical_rows_in(bin));
            picks.push((bin, offset, None));
        }
        picks.sort_by_key(|p| p.0);

        let domain = layout.bins.domain();
        picks
            .into_iter()
            .map(|(bin, offset, index)| {
                let (key_a, key_b) = gen(domain, self.prf, TargetPoint(offset), rng)?;
                Ok(PlannedQuery {
                    table_id: layout.geometry.table_id,
                    bin_id: bin,
                    row_width: layout.geometry.row_width,
                    key_a,
                    key_b,
                    target: index.map(|i| SlotTarget {
                        index: i,
                        companions: self.companions.of(i).to_vec(),
                    }),
                })
            })
            .collect()
    }
}

/// A real lookup placed in a bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RealQuery {
    pub index: u32,
    pub bin: u32,
    pub offset: u64,
}

/// Outcome of [`Planner::assign`]. `served`, `covered` and `dropped`
/// partition the distinct wanted rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub hot: Vec<RealQuery>,
    pub full: Vec<RealQuery>,
    pub served: Vec<u32>,
    /// Wanted rows that arrive as companions of a served row.
    pub covered: Vec<u32>,
    pub dropped: Vec<u32>,
}

/// Client-side record of which row a slot fetches. Never sent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotTarget {
    pub index: u32,
    pub companions: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct PlannedQuery {
    pub table_id: u32,
    pub bin_id: u32,
    pub row_width: usize,
    pub key_a: DpfKey,
    pub key_b: DpfKey,
    /// `None` for a dummy.
    pub target: Option<SlotTarget>,
}

#[derive(Clone, Debug)]
pub struct QueryPlan {
    pub hot_slots: Vec<PlannedQuery>,
    pub full_slots: Vec<PlannedQuery>,
    pub served: Vec<u32>,
    pub covered: Vec<u32>,
    pub dropped: Vec<u32>,
    pub dummy_count: usize,
    pub base_entry_bytes: usize,
}

impl QueryPlan {
    /// Hot slots first, then full slots; responses follow this order.
    pub fn slots(&self) -> impl Iterator<Item = &PlannedQuery> {
        self.hot_slots.iter().chain(&self.full_slots)
    }

    pub fn num_keys(&self) -> usize {
        self.hot_slots.len() + self.full_slots.len()
    }

    /// Bytes of query frames sent to one server.
    pub fn request_bytes(&self) -> usize {
        self.slots()
            .map(|s| FRAME_HEADER_BYTES + QUERY_PREFIX_BYTES + s.key_a.serialized_len())
            .sum()
    }
}

/// XOR the two servers' shares slot by slot and unpack every wanted row.
/// Dummy slots are ignored.
pub fn reconstruct(
    plan: &QueryPlan,
    responses_a: &[Vec<u8>],
    responses_b: &[Vec<u8>],
) -> Result<BTreeMap<u32, Vec<u8>>, PlanError> {
    let n = plan.num_keys();
    if responses_a.len() != n || responses_b.len() != n {
        return Err(PlanError::ResponseCount {
            expected: n,
            a: responses_a.len(),
            b: responses_b.len(),
        });
    }
    let wanted: HashSet<u32> = plan.served.iter().chain(&plan.covered).copied().collect();
    let d = plan.base_entry_bytes;
    let mut out = BTreeMap::new();
    for (slot, ((q, a), b)) in plan.slots().zip(responses_a).zip(responses_b).enumerate() {
        if a.len() != q.row_width || b.len() != q.row_width {
            return Err(PlanError::LengthMismatch {
                slot,
                a: a.len(),
                b: b.len(),
                expected: q.row_width,
            });
        }
        let Some(t) = &q.target else { continue };
        let mut row = a.clone();
        crate::xor_into(&mut row, b);
        for (s, &c) in t.companions.iter().enumerate() {
            if wanted.contains(&c) && !out.contains_key(&c) {
                out.insert(c, row[d * (s + 1)..d * (s + 2)].to_vec());
            }
        }
        row.truncate(d);
        out.insert(t.index, row);
    }
    Ok(out)
}

/// Mean over non-empty inferences of dropped / distinct wanted rows.
pub fn simulate_drop_rate(trace: &Trace, planner: &Planner) -> Result<f64, PlanError> {
    if trace.is_empty() {
        return Err(PlanError::EmptyTrace);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for inf in trace.inferences() {
        let a = planner.assign(inf)?;
        let distinct = a.served.len() + a.covered.len() + a.dropped.len();
        if distinct == 0 {
            continue;
        }
        sum += a.dropped.len() as f64 / distinct as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[cfg(test)]
mod tests;
