//! Embedding tables and their on-disk format.
//!
//! Table file layout (little-endian, 32-byte header then row-major rows):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `DPTB`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 2    | flags, bit 0 = padded                   |
//! | 8      | 4    | table id                                |
//! | 12     | 8    | stored rows L (power of two)            |
//! | 20     | 4    | entry bytes D (multiple of 16)          |
//! | 24     | 8    | logical rows before padding             |

use std::fs;
use std::io::{self, Read, Write};
use std::ops::Range;
use std::path::Path;

pub const TABLE_MAGIC: [u8; 4] = *b"DPTB";
pub const TABLE_VERSION: u16 = 1;
pub const TABLE_HEADER_BYTES: usize = 32;
const FLAG_PADDED: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("table header: {0}")]
    Header(String),
    #[error("truncated table payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("entry size {0} is not a positive multiple of 16")]
    EntryBytes(usize),
    #[error("row data of {len} bytes is not a whole number of {entry_bytes}-byte rows")]
    RaggedRows { len: usize, entry_bytes: usize },
    #[error("table has no rows")]
    Empty,
    #[error("requested {requested} rows but the table has {available}")]
    TooLarge { requested: usize, available: usize },
}

/// A borrowed, read-only run of equally sized rows.
#[derive(Clone, Copy, Debug)]
pub struct TableView<'a> {
    rows: &'a [u8],
    entry_bytes: usize,
}

impl<'a> TableView<'a> {
    pub fn new(rows: &'a [u8], entry_bytes: usize) -> Self {
        assert!(
            entry_bytes > 0 && rows.len().is_multiple_of(entry_bytes),
            "ragged table view"
        );
        TableView { rows, entry_bytes }
    }

    pub fn num_entries(&self) -> usize {
        self.rows.len() / self.entry_bytes
    }

    pub fn entry_bytes(&self) -> usize {
        self.entry_bytes
    }

    #[inline]
    pub fn row(&self, j: usize) -> &'a [u8] {
        &self.rows[j * self.entry_bytes..(j + 1) * self.entry_bytes]
    }

    pub fn bytes(&self) -> &'a [u8] {
        self.rows
    }

    /// Rows `range` as a new view.
    pub fn slice(&self, range: Range<usize>) -> TableView<'a> {
        TableView {
            rows: &self.rows[range.start * self.entry_bytes..range.end * self.entry_bytes],
            entry_bytes: self.entry_bytes,
        }
    }
}

/// An `L x D` table, zero-padded to a power-of-two number of rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTable {
    table_id: u32,
    entry_bytes: usize,
    logical_entries: usize,
    rows: Vec<u8>,
}

impl EmbeddingTable {
    /// Build from row-major bytes, padding with zero rows up to the next
    /// power of two (and at least 2 rows).
    pub fn new(table_id: u32, entry_bytes: usize, mut rows: Vec<u8>) -> Result<Self, TableError> {
        if entry_bytes == 0 || !entry_bytes.is_multiple_of(16) {
            return Err(TableError::EntryBytes(entry_bytes));
        }
        if !rows.len().is_multiple_of(entry_bytes) {
            return Err(TableError::RaggedRows {
                len: rows.len(),
                entry_bytes,
            });
        }
        let logical_entries = rows.len() / entry_bytes;
        if logical_entries == 0 {
            return Err(TableError::Empty);
        }
        let padded = logical_entries.next_power_of_two().max(2);
        rows.resize(padded * entry_bytes, 0);
        Ok(EmbeddingTable {
            table_id,
            entry_bytes,
            logical_entries,
            rows,
        })
    }

    /// Deterministic pseudorandom table, handy for tests and benchmarks.
    pub fn random<R: rand::RngCore + ?Sized>(
        table_id: u32,
        num_entries: usize,
        entry_bytes: usize,
        rng: &mut R,
    ) -> Result<Self, TableError> {
        let mut rows = vec![0u8; num_entries * entry_bytes];
        rng.fill_bytes(&mut rows);
        Self::new(table_id, entry_bytes, rows)
    }

    pub fn table_id(&self) -> u32 {
        self.table_id
    }

    pub fn with_id(mut self, table_id: u32) -> Self {
        self.table_id = table_id;
        self
    }

    /// Stored rows, including padding.
    pub fn num_entries(&self) -> usize {
        self.rows.len() / self.entry_bytes
    }

    /// Rows before padding; the only addressable ones.
    pub fn logical_entries(&self) -> usize {
        self.logical_entries
    }

    pub fn is_padded(&self) -> bool {
        self.logical_entries != self.num_entries()
    }

    pub fn entry_bytes(&self) -> usize {
        self.entry_bytes
    }

    pub fn depth(&self) -> u32 {
        self.num_entries().trailing_zeros()
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.rows[j * self.entry_bytes..(j + 1) * self.entry_bytes]
    }

    pub fn view(&self) -> TableView<'_> {
        TableView::new(&self.rows, self.entry_bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TABLE_HEADER_BYTES + self.rows.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let flags = if self.is_padded() { FLAG_PADDED } else { 0 };
        let mut header = [0u8; TABLE_HEADER_BYTES];
        header[0..4].copy_from_slice(&TABLE_MAGIC);
        header[4..6].copy_from_slice(&TABLE_VERSION.to_le_bytes());
        header[6..8].copy_from_slice(&flags.to_le_bytes());
        header[8..12].copy_from_slice(&self.table_id.to_le_bytes());
        header[12..20].copy_from_slice(&(self.num_entries() as u64).to_le_bytes());
        header[20..24].copy_from_slice(&(self.entry_bytes as u32).to_le_bytes());
        header[24..32].copy_from_slice(&(self.logical_entries as u64).to_le_bytes());
        w.write_all(&header)?;
        w.write_all(&self.rows)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TableError> {
        Self::read_from(bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TableError> {
        let mut header = [0u8; TABLE_HEADER_BYTES];
        let got = read_full(&mut r, &mut header)?;
        if got < TABLE_HEADER_BYTES {
            return Err(TableError::Header(format!(
                "expected {TABLE_HEADER_BYTES} header bytes, found {got}"
            )));
        }
        if header[0..4] != TABLE_MAGIC {
            return Err(TableError::Header("bad magic".into()));
        }
        let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
        if version != TABLE_VERSION {
            return Err(TableError::Header(format!("unsupported version {version}")));
        }
        let flags = u16::from_le_bytes(header[6..8].try_into().unwrap());
        let table_id = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let stored = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let entry_bytes = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        let logical = u64::from_le_bytes(header[24..32].try_into().unwrap()) as usize;

        if entry_bytes == 0 || !entry_bytes.is_multiple_of(16) {
            return Err(TableError::EntryBytes(entry_bytes));
        }
        if stored < 2 || !stored.is_power_of_two() || logical == 0 || logical > stored {
            return Err(TableError::Header(format!(
                "inconsistent row counts {logical}/{stored}"
            )));
        }
        if (flags & FLAG_PADDED != 0) != (logical != stored) {
            return Err(TableError::Header(
                "padding flag disagrees with row counts".into(),
            ));
        }
        let expected = stored
            .checked_mul(entry_bytes)
            .ok_or_else(|| TableError::Header("table size overflows".into()))?;
        let mut rows = vec![0u8; expected];
        let got = read_full(&mut r, &mut rows)?;
        if got < expected {
            return Err(TableError::Truncated {
                expected,
                actual: got,
            });
        }
        Ok(EmbeddingTable {
            table_id,
            entry_bytes,
            logical_entries: logical,
            rows,
        })
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, TableError> {
    let file = fs::File::open(path)?;
    EmbeddingTable::read_from(io::BufReader::new(file))
}

pub fn store_table(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<(), TableError> {
    let file = fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    table.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}
