//! Expansion kernels. Each returns one accumulated row share per key plus
//! the exact number of PRF calls issued. Callers run them inside the
//! engine's thread pool.

use rayon::prelude::*;

use super::memory::MemTracker;
use crate::dpf::DpfKey;
use crate::prf::{Expander, Seed};
use crate::table::TableView;
use crate::xor_into;

/// Parents per parallel task in level-synchronous kernels.
const LEVEL_TASK_PARENTS: usize = 256;
/// Leaves per parallel task when multiplying a materialized leaf vector.
const LEAF_TASK: usize = 1024;

/// XOR-combine partial accumulators pairwise, as a reduction tree.
pub(crate) fn xor_reduce_tree(mut parts: Vec<Vec<u8>>, width: usize) -> Vec<u8> {
    if parts.is_empty() {
        return vec![0u8; width];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                xor_into(&mut left, &right);
            }
            next.push(left);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Fold leaves whose low bit is set into `acc`; `first` is the leaf index
/// of `leaves[0]`.
#[inline]
pub(crate) fn accumulate_leaves(
    acc: &mut [u8],
    leaves: &[Seed],
    first: usize,
    table: &TableView<'_>,
) {
    for (t, leaf) in leaves.iter().enumerate() {
        if leaf.lsb() == 1 {
            xor_into(acc, table.row(first + t));
        }
    }
}

fn split_range(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, len.max(1));
    (0..parts)
        .map(|p| (p * len / parts, (p + 1) * len / parts))
        .filter(|(s, e)| s < e)
        .collect()
}

/// Each task walks root-to-leaf for every leaf in its range, recomputing
/// the whole path each time: `L * depth` PRF calls per key.
pub(crate) fn branch_parallel(
    keys: &[DpfKey],
    table: &TableView<'_>,
    workers: usize,
    mem: &MemTracker,
) -> (Vec<Vec<u8>>, u64) {
    let leaves = table.num_entries();
    let width = table.entry_bytes();
    let ranges = split_range(leaves, workers);
    let tasks: Vec<(usize, usize, usize)> = (0..keys.len())
        .flat_map(|k| ranges.iter().map(move |&(s, e)| (k, s, e)))
        .collect();

    let partials: Vec<(usize, Vec<u8>, u64)> = tasks
        .into_par_iter()
        .map(|(k, start, end)| {
            let key = &keys[k];
            let depth = key.depth();
            let mut ex = Expander::new(key.prf());
            let mut path = mem.nodes(depth as usize + 1);
            path[0] = key.root();
            let mut acc = vec![0u8; width];
            for j in start..end {
                for d in 1..=depth {
                    let bit = ((j >> (depth - d)) & 1) as u8;
                    path[d as usize] = key.child(&mut ex, path[d as usize - 1], d, bit);
                }
                if path[depth as usize].lsb() == 1 {
                    xor_into(&mut acc, table.row(j));
                }
            }
            (k, acc, ex.calls())
        })
        .collect();

    gather(partials, keys.len(), width)
}

fn gather(
    partials: Vec<(usize, Vec<u8>, u64)>,
    num_keys: usize,
    width: usize,
) -> (Vec<Vec<u8>>, u64) {
    let mut per_key: Vec<Vec<Vec<u8>>> = vec![Vec::new(); num_keys];
    let mut calls = 0;
    for (k, acc, c) in partials {
        per_key[k].push(acc);
        calls += c;
    }
    let shares = per_key
        .into_iter()
        .map(|p| xor_reduce_tree(p, width))
        .collect();
    (shares, calls)
}

/// Expand every key of the batch one level at a time into shared level
/// buffers (`B * width` nodes). Returns the leaf buffer.
fn expand_batch_levels<'t>(
    keys: &[DpfKey],
    depth: u32,
    mem: &'t MemTracker,
    task_parents: usize,
) -> (super::memory::NodeBuf<'t>, u64) {
    let mut cur = mem.nodes(keys.len());
    for (slot, key) in cur.iter_mut().zip(keys) {
        *slot = key.root();
    }
    let mut calls = 0u64;
    for d in 1..=depth {
        let width = 1usize << (d - 1);
        let mut next = mem.nodes(cur.len() * 2);
        let cs = width.min(task_parents.max(1));
        calls += next
            .par_chunks_mut(2 * cs)
            .zip(cur.par_chunks(cs))
            .enumerate()
            .map(|(i, (out, parents))| {
                let key = &keys[i * cs / width];
                let mut ex = Expander::new(key.prf());
                key.expand_level_into(&mut ex, parents, d, out);
                ex.calls()
            })
            .sum::<u64>();
        cur = next;
    }
    (cur, calls)
}

/// Materialize whole levels for the whole batch, then multiply the leaf
/// vectors by the table. Peak live nodes: `B * (L + L/2)`.
pub(crate) fn level_by_level(
    keys: &[DpfKey],
    table: &TableView<'_>,
    mem: &MemTracker,
) -> (Vec<Vec<u8>>, u64) {
    let leaves_per_key = table.num_entries();
    let width = table.entry_bytes();
    let depth = keys[0].depth();
    let (leaves, calls) = expand_batch_levels(keys, depth, mem, LEVEL_TASK_PARENTS);

    let cs = leaves_per_key.min(LEAF_TASK);
    let partials: Vec<(usize, Vec<u8>, u64)> = leaves
        .par_chunks(cs)
        .enumerate()
        .map(|(i, chunk)| {
            let flat = i * cs;
            let (k, first) = (flat / leaves_per_key, flat % leaves_per_key);
            let mut acc = vec![0u8; width];
            accumulate_leaves(&mut acc, chunk, first, table);
            (k, acc, 0)
        })
        .collect();
    drop(leaves);
    let (shares, _) = gather(partials, keys.len(), width);
    (shares, calls)
}

/// Memory-bounded depth-first traversal with operator fusion.
///
/// Each key is split into `parts` aligned subtrees (a power of two), and each
/// subtree is walked depth-first holding at most one chunk of `k / parts`
/// nodes per level. Leaf chunks are folded into a per-task accumulator as
/// soon as they are produced.
pub(crate) fn mem_bounded(
    keys: &[DpfKey],
    table: &TableView<'_>,
    k: usize,
    workers: usize,
    mem: &MemTracker,
) -> (Vec<Vec<u8>>, u64) {
    let leaves = table.num_entries();
    let width = table.entry_bytes();
    let depth = keys[0].depth();
    let parts = prev_power_of_two((workers / keys.len()).max(1))
        .min(k)
        .min(leaves);
    let part_bits = parts.trailing_zeros();
    let chunk = (k / parts).max(1);

    // Subtree roots for every key; a small level-synchronous prefix.
    let mut top_calls = 0u64;
    let mut roots: Vec<(usize, usize, Seed)> = Vec::with_capacity(keys.len() * parts);
    for (ki, key) in keys.iter().enumerate() {
        let mut ex = Expander::new(key.prf());
        let mut cur = mem.nodes(1);
        cur[0] = key.root();
        for d in 1..=part_bits {
            let mut next = mem.nodes(cur.len() * 2);
            key.expand_level_into(&mut ex, &cur, d, &mut next);
            cur = next;
        }
        top_calls += ex.calls();
        roots.extend(cur.iter().enumerate().map(|(p, s)| (ki, p, *s)));
    }

    let partials: Vec<(usize, Vec<u8>, u64)> = roots
        .into_par_iter()
        .map(|(ki, p, root)| {
            let key = &keys[ki];
            let mut walk = Walk {
                key,
                table,
                mem,
                depth,
                ex: Expander::new(key.prf()),
                acc: vec![0u8; width],
            };
            walk.subtree(root, part_bits, p, chunk);
            (ki, walk.acc, walk.ex.calls())
        })
        .collect();

    let (shares, calls) = gather(partials, keys.len(), width);
    (shares, calls + top_calls)
}

struct Walk<'a, 't> {
    key: &'a DpfKey,
    table: &'a TableView<'a>,
    mem: &'t MemTracker,
    depth: u32,
    ex: Expander,
    acc: Vec<u8>,
}

impl Walk<'_, '_> {
    fn subtree(&mut self, root: Seed, level: u32, index: usize, chunk: usize) {
        let mut cur = self.mem.nodes(1);
        cur[0] = root;
        let mut level = level;
        let mut first = index;
        while cur.len() < chunk && level < self.depth {
            let mut next = self.mem.nodes(cur.len() * 2);
            self.key
                .expand_level_into(&mut self.ex, &cur, level + 1, &mut next);
            cur = next;
            level += 1;
            first *= 2;
        }
        self.descend(&cur, level, first);
    }

    fn descend(&mut self, nodes: &[Seed], level: u32, first: usize) {
        if level == self.depth {
            accumulate_leaves(&mut self.acc, nodes, first, self.table);
            return;
        }
        let half = (nodes.len() / 2).max(1);
        for start in (0..nodes.len()).step_by(half) {
            let parents = &nodes[start..start + half];
            let mut child = self.mem.nodes(2 * half);
            self.key
                .expand_level_into(&mut self.ex, parents, level + 1, &mut child);
            self.descend(&child, level + 1, 2 * (first + start));
        }
    }
}

/// All workers cooperate on one key: each level is split into `workers`
/// slices expanded in parallel, with the level boundary acting as the
/// barrier. Leaves are folded per worker and XOR-reduced.
pub(crate) fn cooperative_single(
    key: &DpfKey,
    table: &TableView<'_>,
    workers: usize,
    mem: &MemTracker,
) -> (Vec<u8>, u64) {
    let width = table.entry_bytes();
    let mut cur = mem.nodes(1);
    cur[0] = key.root();
    let mut calls = 0u64;
    for d in 1..=key.depth() {
        let mut next = mem.nodes(cur.len() * 2);
        let cs = cur.len().div_ceil(workers.max(1));
        calls += next
            .par_chunks_mut(2 * cs)
            .zip(cur.par_chunks(cs))
            .map(|(out, parents)| {
                let mut ex = Expander::new(key.prf());
                key.expand_level_into(&mut ex, parents, d, out);
                ex.calls()
            })
            .sum::<u64>();
        cur = next;
    }
    let cs = cur.len().div_ceil(workers.max(1));
    let partials: Vec<Vec<u8>> = cur
        .par_chunks(cs)
        .enumerate()
        .map(|(i, leaves)| {
            let mut acc = vec![0u8; width];
            accumulate_leaves(&mut acc, leaves, i * cs, table);
            acc
        })
        .collect();
    (xor_reduce_tree(partials, width), calls)
}

fn prev_power_of_two(n: usize) -> usize {
    debug_assert!(n > 0);
    1 << (usize::BITS - 1 - n.leading_zeros())
}

/// Nodes of `key` covering leaves `[start, end)`, computed level by level
/// touching only nodes whose span intersects the range.
pub(crate) fn expand_range(
    key: &DpfKey,
    ex: &mut Expander,
    start: u64,
    end: u64,
    mem: &MemTracker,
) -> Vec<Seed> {
    let depth = key.depth();
    let mut cur = mem.nodes(1);
    cur[0] = key.root();
    let mut lo = 0u64;
    for d in 1..=depth {
        let shift = depth - d;
        let (nlo, nhi) = (start >> shift, (end - 1) >> shift);
        let mut next = mem.nodes((nhi - nlo + 1) as usize);
        for (slot, c) in next.iter_mut().zip(nlo..=nhi) {
            let parent = cur[((c >> 1) - lo) as usize];
            *slot = key.child(ex, parent, d, (c & 1) as u8);
        }
        cur = next;
        lo = nlo;
    }
    cur.to_vec()
}
