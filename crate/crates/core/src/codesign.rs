//! Offline table transforms driven by access statistics: a small hot table
//! of the most frequent rows, and co-location of each row with the rows it
//! is most often fetched together with.
//!
//! Ties are always broken towards the lower index.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::table::{EmbeddingTable, TableError};
use crate::trace::Trace;

pub const HOT_MAP_MAGIC: [u8; 4] = *b"DPHM";
pub const COMPANION_MAGIC: [u8; 4] = *b"DPCM";
const SIDECAR_VERSION: u32 = 1;
const NO_COMPANION: u32 = u32::MAX;

#[derive(Debug, thiserror::Error)]
pub enum CodesignError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace index {index} is outside the table's {len} rows")]
    IndexOutOfRange { index: u32, len: usize },
    #[error("hot size {hot_size} exceeds the table's {len} rows")]
    HotSizeTooLarge { hot_size: usize, len: usize },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-row frequencies of a trace over a table of `len` rows.
pub fn access_counts(trace: &Trace, len: usize) -> Result<Vec<u64>, CodesignError> {
    if trace.is_empty() {
        return Err(CodesignError::EmptyTrace);
    }
    let mut counts = vec![0u64; len];
    for &idx in trace.inferences().iter().flatten() {
        *counts
            .get_mut(idx as usize)
            .ok_or(CodesignError::IndexOutOfRange { index: idx, len })? += 1;
    }
    Ok(counts)
}

/// The `k` most frequent rows, most frequent first.
pub fn top_k_by_frequency(counts: &[u64], k: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..counts.len() as u32).collect();
    order.sort_by(|a, b| counts[*b as usize].cmp(&counts[*a as usize]).then(a.cmp(b)));
    order.truncate(k);
    order
}

/// For each of `len` rows, up to `c` rows it co-occurs with most often
/// within one inference. Rows that never co-occur are not companions.
pub fn companions_from_trace(
    trace: &Trace,
    len: usize,
    c: usize,
) -> Result<Companions, CodesignError> {
    if trace.is_empty() {
        return Err(CodesignError::EmptyTrace);
    }
    if c == 0 {
        return Ok(Companions::none(len));
    }
    let mut pairs: HashMap<u32, HashMap<u32, u32>> = HashMap::new();
    let mut distinct = Vec::new();
    for inf in trace.inferences() {
        distinct.clear();
        distinct.extend_from_slice(inf);
        distinct.sort_unstable();
        distinct.dedup();
        if let Some(&idx) = distinct.iter().find(|i| **i as usize >= len) {
            return Err(CodesignError::IndexOutOfRange { index: idx, len });
        }
        for &a in &distinct {
            let row = pairs.entry(a).or_default();
            for &b in &distinct {
                if a != b {
                    *row.entry(b).or_default() += 1;
                }
            }
        }
    }
    let mut lists = vec![Vec::new(); len];
    for (a, row) in pairs {
        let mut cands: Vec<(u32, u32)> = row.into_iter().collect();
        cands.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        lists[a as usize] = cands.into_iter().take(c).map(|(b, _)| b).collect();
    }
    Ok(Companions { c, lists })
}

/// Companion lists of a co-located layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Companions {
    c: usize,
    lists: Vec<Vec<u32>>,
}

impl Companions {
    pub fn none(len: usize) -> Self {
        Companions {
            c: 0,
            lists: vec![Vec::new(); len],
        }
    }

    pub fn from_lists(c: usize, lists: Vec<Vec<u32>>) -> Self {
        debug_assert!(lists.iter().all(|l| l.len() <= c));
        Companions { c, lists }
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn of(&self, index: u32) -> &[u32] {
        self.lists.get(index as usize).map_or(&[], |l| l.as_slice())
    }

    /// Sidecar layout: magic `DPCM`, version u32, C u32, rows u64, then
    /// `rows * C` u32 slots (`u32::MAX` = empty). Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.lists.len() * self.c * 4);
        out.extend_from_slice(&COMPANION_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.c as u32).to_le_bytes());
        out.extend_from_slice(&(self.lists.len() as u64).to_le_bytes());
        for list in &self.lists {
            for slot in 0..self.c {
                let v = list.get(slot).copied().unwrap_or(NO_COMPANION);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodesignError> {
        let bad = |m: &str| CodesignError::Sidecar(m.to_string());
        if bytes.len() < 20 || bytes[..4] != COMPANION_MAGIC {
            return Err(bad("not a companion map"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != SIDECAR_VERSION {
            return Err(bad("unsupported companion map version"));
        }
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if rows.checked_mul(c * 4) != Some(body.len()) {
            return Err(bad("companion map length mismatch"));
        }
        let lists = (0..rows)
            .map(|r| {
                (0..c)
                    .map(|s| {
                        let off = (r * c + s) * 4;
                        u32::from_le_bytes(body[off..off + 4].try_into().unwrap())
                    })
                    .filter(|v| *v != NO_COMPANION)
                    .collect()
            })
            .collect();
        Ok(Companions { c, lists })
    }
}

/// Original row index -> hot table row.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HotIndexMap(pub BTreeMap<u32, u32>);

impl HotIndexMap {
    pub fn get(&self, index: u32) -> Option<u32> {
        self.0.get(&index).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sidecar layout: magic `DPHM`, version u32, count u64, then `count`
    /// (index u32, hot row u32) pairs sorted by index. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.0.len() * 8);
        out.extend_from_slice(&HOT_MAP_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for (k, v) in &self.0 {
            out.extend_from_slice(&k.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodesignError> {
        let bad = |m: &str| CodesignError::Sidecar(m.to_string());
        if bytes.len() < 16 || bytes[..4] != HOT_MAP_MAGIC {
            return Err(bad("not a hot index map"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != SIDECAR_VERSION {
            return Err(bad("unsupported hot map version"));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if count.checked_mul(8) != Some(body.len()) {
            return Err(bad("hot map length mismatch"));
        }
        let map = body
            .chunks_exact(8)
            .map(|p| {
                (
                    u32::from_le_bytes(p[..4].try_into().unwrap()),
                    u32::from_le_bytes(p[4..].try_into().unwrap()),
                )
            })
            .collect();
        Ok(HotIndexMap(map))
    }
}

/// A full table plus a hot table duplicating its most frequent rows, and
/// the fixed per-inference query budgets for each.
#[derive(Clone, Debug)]
pub struct HotSplit {
    pub hot_table: Option<EmbeddingTable>,
    pub full_table: EmbeddingTable,
    pub hot_index_map: HotIndexMap,
    pub q_hot: usize,
    pub q_full: usize,
}

impl HotSplit {
    /// No hot table; every query goes to the full table.
    pub fn without_hot(full_table: EmbeddingTable, q_full: usize) -> Self {
        HotSplit {
            hot_table: None,
            full_table,
            hot_index_map: HotIndexMap::default(),
            q_hot: 0,
            q_full,
        }
    }
}

/// Copy the `hot_size` most frequent rows of `table` into a new table with
/// id `hot_table_id`, most frequent first.
pub fn build_hot_split(
    table: &EmbeddingTable,
    trace: &Trace,
    hot_size: usize,
    hot_table_id: u32,
    q_hot: usize,
    q_full: usize,
) -> Result<HotSplit, CodesignError> {
    let len = table.logical_entries();
    if hot_size > len {
        return Err(CodesignError::HotSizeTooLarge { hot_size, len });
    }
    let counts = access_counts(trace, len)?;
    if hot_size == 0 {
        return Ok(HotSplit {
            q_hot,
            ..HotSplit::without_hot(table.clone(), q_full)
        });
    }
    let hot = top_k_by_frequency(&counts, hot_size);
    let mut rows = Vec::with_capacity(hot_size * table.entry_bytes());
    for &idx in &hot {
        rows.extend_from_slice(table.row(idx as usize));
    }
    let hot_table = EmbeddingTable::new(hot_table_id, table.entry_bytes(), rows)?;
    let map = hot
        .iter()
        .enumerate()
        .map(|(row, &idx)| (idx, row as u32))
        .collect();
    Ok(HotSplit {
        hot_table: Some(hot_table),
        full_table: table.clone(),
        hot_index_map: HotIndexMap(map),
        q_hot,
        q_full,
    })
}

/// A table whose row `i` is original row `i` followed by its `C` companion
/// rows (zero-filled where a row has fewer than `C` companions).
#[derive(Clone, Debug)]
pub struct ColocatedTable {
    pub base_entry_bytes: usize,
    pub table: EmbeddingTable,
    pub companions: Companions,
}

impl ColocatedTable {
    pub fn identity(base: &EmbeddingTable) -> Self {
        ColocatedTable {
            base_entry_bytes: base.entry_bytes(),
            table: base.clone(),
            companions: Companions::none(base.logical_entries()),
        }
    }

    pub fn c(&self) -> usize {
        self.companions.c()
    }

    pub fn row_width(&self) -> usize {
        self.table.entry_bytes()
    }
}

pub fn build_colocated(
    table: &EmbeddingTable,
    trace: &Trace,
    c: usize,
) -> Result<ColocatedTable, CodesignError> {
    let len = table.logical_entries();
    let companions = companions_from_trace(trace, len, c)?;
    if c == 0 {
        return Ok(ColocatedTable::identity(table));
    }
    Ok(colocate_with(table, companions)?)
}

/// Lay out `table` with the given companion lists.
pub fn colocate_with(
    table: &EmbeddingTable,
    companions: Companions,
) -> Result<ColocatedTable, TableError> {
    let d = table.entry_bytes();
    let c = companions.c();
    let width = d * (c + 1);
    let len = table.logical_entries();
    let mut rows = vec![0u8; len * width];
    for (i, out) in rows.chunks_exact_mut(width).enumerate() {
        out[..d].copy_from_slice(table.row(i));
        for (slot, &comp) in companions.of(i as u32).iter().enumerate() {
            out[d * (slot + 1)..d * (slot + 2)].copy_from_slice(table.row(comp as usize));
        }
    }
    Ok(ColocatedTable {
        base_entry_bytes: d,
        table: EmbeddingTable::new(table.table_id(), width, rows)?,
        companions,
    })
}

pub fn write_sidecar(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CodesignError> {
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::SyntheticTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(len: usize) -> EmbeddingTable {
        let rows: Vec<u8> = (0..len * 16)
            .map(|b| (b / 16) as u8 ^ (b % 16) as u8)
            .collect();
        EmbeddingTable::new(1, 16, rows).unwrap()
    }

    #[test]
    fn uniform_trace_takes_lowest_indices() {
        let t = table(16);
        let trace = Trace::new((0..16).map(|i| vec![i]).collect());
        let split = build_hot_split(&t, &trace, 4, 2, 1, 1).unwrap();
        let map: Vec<(u32, u32)> = split.hot_index_map.0.into_iter().collect();
        assert_eq!(map, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn zipf_hot_table_matches_sort_by_count() {
        let t = table(1024);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trace = SyntheticTrace {
            num_entries: 1024,
            inferences: 3000,
            lookups: 4,
            exponent: 1.0,
            block: 1,
            block_prob: 0.0,
        }
        .generate(&mut rng)
        .unwrap();
        let split = build_hot_split(&t, &trace, 102, 2, 8, 8).unwrap();

        // Oracle: count with a map, then sort the (count, index) pairs.
        let mut freq: BTreeMap<u32, u64> = (0..1024).map(|i| (i, 0)).collect();
        for i in trace.inferences().iter().flatten() {
            *freq.get_mut(i).unwrap() += 1;
        }
        let mut ranked: Vec<(u64, u32)> = freq.into_iter().map(|(i, c)| (c, i)).collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut want: Vec<u32> = ranked[..102].iter().map(|p| p.1).collect();
        want.sort_unstable();
        let got: Vec<u32> = split.hot_index_map.0.keys().copied().collect();
        assert_eq!(got, want);

        let hot = split.hot_table.as_ref().unwrap();
        assert_eq!(hot.logical_entries(), 102);
        assert_eq!(hot.num_entries(), 128);
        for (&idx, &row) in &split.hot_index_map.0 {
            assert_eq!(hot.row(row as usize), t.row(idx as usize));
        }
    }

    #[test]
    fn hot_split_errors() {
        let t = table(8);
        let trace = Trace::new(vec![vec![1]]);
        assert!(matches!(
            build_hot_split(&t, &trace, 9, 2, 1, 1),
            Err(CodesignError::HotSizeTooLarge { .. })
        ));
        assert!(matches!(
            build_hot_split(&t, &Trace::default(), 1, 2, 1, 1),
            Err(CodesignError::EmptyTrace)
        ));
        assert!(matches!(
            build_hot_split(&t, &Trace::new(vec![vec![8]]), 1, 2, 1, 1),
            Err(CodesignError::IndexOutOfRange { index: 8, len: 8 })
        ));
        let none = build_hot_split(&t, &trace, 0, 2, 0, 3).unwrap();
        assert!(none.hot_table.is_none());
    }

    #[test]
    fn colocation_zero_is_identity() {
        let t = table(8);
        let trace = Trace::new(vec![vec![1, 2]]);
        let co = build_colocated(&t, &trace, 0).unwrap();
        assert_eq!(co.table, t);
        assert_eq!(co.c(), 0);
    }

    #[test]
    fn repeated_pair() {
        let t = table(8);
        let trace = Trace::new(vec![vec![3, 7]; 5]);
        let co = build_colocated(&t, &trace, 1).unwrap();
        assert_eq!(co.companions.of(3), &[7]);
        assert_eq!(co.companions.of(7), &[3]);
        assert!(co.companions.of(0).is_empty());
        let row = co.table.row(3);
        assert_eq!(&row[..16], t.row(3));
        assert_eq!(&row[16..], t.row(7));
        assert!(co.table.row(0)[16..].iter().all(|b| *b == 0));
    }

    #[test]
    fn planted_blocks() {
        // Blocks {5b..5b+5}, each inference = one whole block plus a noise
        // index from a different block.
        let len = 40usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inferences = Vec::new();
        for n in 0..400usize {
            let b = n % 8;
            let mut inf: Vec<u32> = (5 * b as u32..5 * b as u32 + 5).collect();
            let noise = rand::Rng::gen_range(&mut rng, 0..len as u32);
            if noise / 5 != b as u32 {
                inf.push(noise);
            }
            inferences.push(inf);
        }
        let trace = Trace::new(inferences);
        let co = build_colocated(&table(len), &trace, 4).unwrap();

        // Oracle: brute-force pairwise counts.
        for i in 0..len as u32 {
            let mut counts: Vec<(u32, u32)> = (0..len as u32)
                .filter(|j| *j != i)
                .map(|j| {
                    let c = trace
                        .inferences()
                        .iter()
                        .filter(|inf| inf.contains(&i) && inf.contains(&j))
                        .count() as u32;
                    (c, j)
                })
                .collect();
            counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let want: Vec<u32> = counts.iter().take(4).map(|p| p.1).collect();
            assert_eq!(co.companions.of(i), want.as_slice());
            let mut block: Vec<u32> = (i / 5 * 5..i / 5 * 5 + 5).filter(|j| *j != i).collect();
            block.sort_unstable();
            let mut got = co.companions.of(i).to_vec();
            got.sort_unstable();
            assert_eq!(got, block);
        }
        for i in 0..len {
            assert_eq!(&co.table.row(i)[..16], table(len).row(i));
        }
    }

    #[test]
    fn sidecars_round_trip() {
        let map = HotIndexMap([(9u32, 0u32), (3, 1), (700, 2)].into_iter().collect());
        let bytes = map.to_bytes();
        assert_eq!(&bytes[..4], b"DPHM");
        assert_eq!(bytes.len(), 16 + 3 * 8);
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(HotIndexMap::from_bytes(&bytes).unwrap(), map);
        assert!(HotIndexMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let comps = Companions::from_lists(2, vec![vec![1, 2], vec![0], vec![]]);
        let bytes = comps.to_bytes();
        assert_eq!(Companions::from_bytes(&bytes).unwrap(), comps);
        assert!(Companions::from_bytes(&bytes[1..]).is_err());
    }
}
