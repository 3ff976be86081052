//! Two-party distributed point function over a GGM-style tree.
//!
//! A key holds a root node value and, for every level `d = 1..=depth`, two
//! 2-cell codeword columns `C0[., d]` and `C1[., d]`. A node's children are
//!
//! ```text
//! P(d, j) = PRF_{P(d-1, j/2)}(j mod 2)  ^  C_{lsb(P(d-1, j/2))}[j mod 2, d]
//! ```
//!
//! and the leaves of the two parties XOR to `1` at the target index and to
//! `0` everywhere else.

use rand::RngCore;

use crate::prf::{Expander, PrfCounter, PrfError, PrfId, Seed, SEED_BYTES};
use crate::table::TableView;

/// A leaf of one party's expanded tree.
pub type LeafShare = Seed;

/// Largest supported tree depth.
pub const MAX_DEPTH: u32 = 40;

pub const KEY_MAGIC: [u8; 4] = *b"DPFK";
pub const KEY_VERSION: u8 = 1;
pub const KEY_HEADER_BYTES: usize = 24;
/// Serialized codeword bytes per tree level: four 16-byte cells.
pub const KEY_BYTES_PER_LEVEL: usize = 4 * SEED_BYTES;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DpfError {
    #[error("domain size {0} is not a power of two >= 2")]
    BadDomain(u64),
    #[error("domain depth {0} is outside 1..={MAX_DEPTH}")]
    BadDepth(u32),
    #[error("index {index} out of range for domain of {len} entries")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("bad key magic")]
    BadMagic,
    #[error("unsupported key version {0}")]
    BadVersion(u8),
    #[error("key length {actual} does not match expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error(transparent)]
    Prf(#[from] PrfError),
}

/// Evaluation domain of `2^depth` leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DomainSpec {
    depth: u32,
}

impl DomainSpec {
    pub fn new(num_entries: u64) -> Result<Self, DpfError> {
        if num_entries < 2 || !num_entries.is_power_of_two() {
            return Err(DpfError::BadDomain(num_entries));
        }
        Self::from_depth(num_entries.trailing_zeros())
    }

    pub fn from_depth(depth: u32) -> Result<Self, DpfError> {
        if depth == 0 || depth > MAX_DEPTH {
            return Err(DpfError::BadDepth(depth));
        }
        Ok(DomainSpec { depth })
    }

    pub fn depth(self) -> u32 {
        self.depth
    }

    pub fn num_entries(self) -> u64 {
        1u64 << self.depth
    }

    pub fn check_index(self, index: u64) -> Result<(), DpfError> {
        if index >= self.num_entries() {
            return Err(DpfError::IndexOutOfRange {
                index,
                len: self.num_entries(),
            });
        }
        Ok(())
    }
}

/// The secret point a key pair encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetPoint(pub u64);

/// Codeword cells of one level, indexed `[matrix][child bit]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LevelCodewords(pub [[Seed; 2]; 2]);

/// One party's key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DpfKey {
    domain: DomainSpec,
    prf: PrfId,
    root: Seed,
    levels: Vec<LevelCodewords>,
}

impl DpfKey {
    pub fn domain(&self) -> DomainSpec {
        self.domain
    }

    pub fn prf(&self) -> PrfId {
        self.prf
    }

    pub fn root(&self) -> Seed {
        self.root
    }

    pub fn depth(&self) -> u32 {
        self.domain.depth
    }

    pub fn num_entries(&self) -> u64 {
        self.domain.num_entries()
    }

    /// Codewords of `level` (1-based, as in the tree recursion).
    pub fn codewords(&self, level: u32) -> &LevelCodewords {
        &self.levels[level as usize - 1]
    }

    /// `C_matrix[child, level]`.
    pub fn codeword(&self, matrix: u8, child: u8, level: u32) -> Seed {
        self.codewords(level).0[matrix as usize][child as usize]
    }

    /// Compute child `bit` of `parent`, where the child sits at `level`.
    #[inline]
    pub fn child(&self, ex: &mut Expander, parent: Seed, level: u32, bit: u8) -> Seed {
        let cw = &self.levels[level as usize - 1].0;
        ex.expand(parent, bit) ^ cw[parent.lsb() as usize][bit as usize]
    }

    /// Expand `parents` (all at `level - 1`) into `out`, two children each,
    /// in left-to-right order.
    #[inline]
    pub fn expand_level_into(
        &self,
        ex: &mut Expander,
        parents: &[Seed],
        level: u32,
        out: &mut [Seed],
    ) {
        debug_assert_eq!(out.len(), parents.len() * 2);
        let cw = &self.levels[level as usize - 1].0;
        for (p, pair) in parents.iter().zip(out.chunks_exact_mut(2)) {
            let row = &cw[p.lsb() as usize];
            pair[0] = ex.expand(*p, 0) ^ row[0];
            pair[1] = ex.expand(*p, 1) ^ row[1];
        }
    }

    /// Value of node `index` at `level` by walking from the root.
    /// Issues exactly `level` PRF calls.
    pub fn node_at(&self, ex: &mut Expander, level: u32, index: u64) -> Seed {
        let mut value = self.root;
        for d in 1..=level {
            let bit = ((index >> (level - d)) & 1) as u8;
            value = self.child(ex, value, d, bit);
        }
        value
    }

    /// Point evaluation at leaf `j`: exactly `depth` PRF calls.
    pub fn eval_point(&self, j: u64) -> Result<LeafShare, DpfError> {
        self.eval_point_with(j, None)
    }

    pub fn eval_point_with(
        &self,
        j: u64,
        counter: Option<&PrfCounter>,
    ) -> Result<LeafShare, DpfError> {
        self.domain.check_index(j)?;
        let mut ex = Expander::new(self.prf);
        let leaf = self.node_at(&mut ex, self.depth(), j);
        if let Some(c) = counter {
            c.record(&ex);
        }
        Ok(leaf)
    }

    /// Reference full-domain evaluation, level order, single-threaded.
    /// Exactly `2L - 2` PRF calls.
    pub fn eval_full(&self) -> Vec<LeafShare> {
        self.eval_full_with(None)
    }

    pub fn eval_full_with(&self, counter: Option<&PrfCounter>) -> Vec<LeafShare> {
        let mut ex = Expander::new(self.prf);
        let mut level = vec![self.root];
        for d in 1..=self.depth() {
            let mut next = vec![Seed::ZERO; level.len() * 2];
            self.expand_level_into(&mut ex, &level, d, &mut next);
            level = next;
        }
        if let Some(c) = counter {
            c.record(&ex);
        }
        level
    }

    /// Every level of the expanded tree, root first. Test and inspection aid.
    pub fn eval_tree(&self) -> Vec<Vec<Seed>> {
        let mut ex = Expander::new(self.prf);
        let mut levels = vec![vec![self.root]];
        for d in 1..=self.depth() {
            let parents = levels.last().unwrap();
            let mut next = vec![Seed::ZERO; parents.len() * 2];
            self.expand_level_into(&mut ex, parents, d, &mut next);
            levels.push(next);
        }
        levels
    }

    /// Total serialized size: header plus `64 * depth` codeword bytes.
    pub fn serialized_len(&self) -> usize {
        serialized_key_len(self.depth())
    }

    /// Bytes of codeword payload, excluding the fixed header.
    pub fn payload_len(&self) -> usize {
        self.depth() as usize * KEY_BYTES_PER_LEVEL
    }

    /// Wire layout, little-endian:
    ///
    /// | offset | size | field                        |
    /// |--------|------|------------------------------|
    /// | 0      | 4    | magic `DPFK`                 |
    /// | 4      | 1    | version (1)                  |
    /// | 5      | 1    | PRF code                     |
    /// | 6      | 1    | depth                        |
    /// | 7      | 1    | reserved, zero               |
    /// | 8      | 16   | root                         |
    /// | 24     | 64·d | per level: C0[0], C0[1], C1[0], C1[1] |
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&KEY_MAGIC);
        out.push(KEY_VERSION);
        out.push(self.prf.code());
        out.push(self.depth() as u8);
        out.push(0);
        out.extend_from_slice(&self.root.to_bytes());
        for level in &self.levels {
            for matrix in level.0 {
                for cell in matrix {
                    out.extend_from_slice(&cell.to_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DpfError> {
        if bytes.len() < KEY_HEADER_BYTES {
            return Err(DpfError::BadLength {
                expected: KEY_HEADER_BYTES,
                actual: bytes.len(),
            });
        }
        if bytes[..4] != KEY_MAGIC {
            return Err(DpfError::BadMagic);
        }
        if bytes[4] != KEY_VERSION {
            return Err(DpfError::BadVersion(bytes[4]));
        }
        let prf = PrfId::from_code(bytes[5])?;
        let domain = DomainSpec::from_depth(bytes[6] as u32)?;
        let expected = serialized_key_len(domain.depth);
        if bytes.len() != expected {
            return Err(DpfError::BadLength {
                expected,
                actual: bytes.len(),
            });
        }
        let read = |off: usize| Seed::from_bytes(bytes[off..off + SEED_BYTES].try_into().unwrap());
        let root = read(8);
        let levels = (0..domain.depth as usize)
            .map(|d| {
                let base = KEY_HEADER_BYTES + d * KEY_BYTES_PER_LEVEL;
                LevelCodewords([
                    [read(base), read(base + 16)],
                    [read(base + 32), read(base + 48)],
                ])
            })
            .collect();
        Ok(DpfKey {
            domain,
            prf,
            root,
            levels,
        })
    }
}

/// Serialized key size for a tree of `depth` levels.
pub fn serialized_key_len(depth: u32) -> usize {
    KEY_HEADER_BYTES + depth as usize * KEY_BYTES_PER_LEVEL
}

fn random_with_lsb<R: RngCore + ?Sized>(rng: &mut R, lsb: u8) -> Seed {
    Seed((Seed::random(rng).0 & !1) | lsb as u128)
}

/// Generate the two parties' keys for `target`.
///
/// Both keys share the codewords and differ only in the root. The on-path
/// node values of the two parties always differ in their low bit, so each
/// party applies a different codeword matrix there; the cells are chosen so
/// that off-path children coincide and the final on-path leaves differ by
/// exactly [`Seed::ONE`]. Issues exactly `4 * depth` PRF calls.
pub fn gen<R: RngCore + ?Sized>(
    domain: DomainSpec,
    prf: PrfId,
    target: TargetPoint,
    rng: &mut R,
) -> Result<(DpfKey, DpfKey), DpfError> {
    gen_with(domain, prf, target, rng, None)
}

pub fn gen_with<R: RngCore + ?Sized>(
    domain: DomainSpec,
    prf: PrfId,
    target: TargetPoint,
    rng: &mut R,
    counter: Option<&PrfCounter>,
) -> Result<(DpfKey, DpfKey), DpfError> {
    domain.check_index(target.0)?;
    let depth = domain.depth;
    let mut ex = Expander::new(prf);

    let root_a = Seed::random(rng);
    let root_b = random_with_lsb(rng, root_a.lsb() ^ 1);
    let (mut node_a, mut node_b) = (root_a, root_b);
    let mut levels = Vec::with_capacity(depth as usize);

    for d in 1..=depth {
        let on_path = ((target.0 >> (depth - d)) & 1) as u8;
        let off_path = on_path ^ 1;
        let expand_a = [ex.expand(node_a, 0), ex.expand(node_a, 1)];
        let expand_b = [ex.expand(node_b, 0), ex.expand(node_b, 1)];
        let ta = node_a.lsb() as usize;
        let tb = node_b.lsb() as usize;

        // Required XOR between the two matrices, per child bit:
        // off-path children must coincide, the on-path child must keep an
        // odd difference (or become exactly ONE at the leaves).
        let mut diff = [Seed::ZERO; 2];
        diff[off_path as usize] = expand_a[off_path as usize] ^ expand_b[off_path as usize];
        let prf_diff = expand_a[on_path as usize] ^ expand_b[on_path as usize];
        diff[on_path as usize] = if d == depth {
            prf_diff ^ Seed::ONE
        } else {
            random_with_lsb(rng, prf_diff.lsb() ^ 1)
        };

        let mut cells = [[Seed::ZERO; 2]; 2];
        for bit in 0..2 {
            let fill = Seed::random(rng);
            cells[ta][bit] = fill;
            cells[tb][bit] = fill ^ diff[bit];
        }

        node_a = expand_a[on_path as usize] ^ cells[ta][on_path as usize];
        node_b = expand_b[on_path as usize] ^ cells[tb][on_path as usize];
        levels.push(LevelCodewords(cells));
    }
    debug_assert_eq!(node_a ^ node_b, Seed::ONE);

    if let Some(c) = counter {
        c.record(&ex);
    }
    let key_a = DpfKey {
        domain,
        prf,
        root: root_a,
        levels: levels.clone(),
    };
    let key_b = DpfKey {
        domain,
        prf,
        root: root_b,
        levels,
    };
    Ok((key_a, key_b))
}

/// Plain secret-shared PIR query: two random `L`-bit vectors whose XOR is
/// the indicator of `target`.
pub fn naive_pir_shares<R: RngCore + ?Sized>(
    domain: DomainSpec,
    target: TargetPoint,
    rng: &mut R,
) -> Result<(Vec<bool>, Vec<bool>), DpfError> {
    domain.check_index(target.0)?;
    let len = domain.num_entries() as usize;
    let mut bytes = vec![0u8; len.div_ceil(8)];
    rng.fill_bytes(&mut bytes);
    let r1: Vec<bool> = (0..len).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect();
    let mut r2 = r1.clone();
    r2[target.0 as usize] ^= true;
    Ok((r1, r2))
}

/// Server side of the naive scheme: XOR of the rows whose bit is set.
pub fn naive_pir_answer(bits: &[bool], table: &TableView<'_>) -> Vec<u8> {
    assert_eq!(
        bits.len(),
        table.num_entries(),
        "bit vector / table length mismatch"
    );
    let mut acc = vec![0u8; table.entry_bytes()];
    for (j, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        crate::xor_into(&mut acc, table.row(j));
    }
    acc
}
