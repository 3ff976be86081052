//! Access traces: one model inference per line, space-separated decimal
//! row indices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Zipf};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: `{token}` is not a row index")]
    Parse { line: usize, token: String },
    #[error("trace is empty")]
    Empty,
    #[error("bad synthetic trace parameters: {0}")]
    Params(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    inferences: Vec<Vec<u32>>,
}

impl Trace {
    pub fn new(inferences: Vec<Vec<u32>>) -> Self {
        Trace { inferences }
    }

    pub fn inferences(&self) -> &[Vec<u32>] {
        &self.inferences
    }

    pub fn len(&self) -> usize {
        self.inferences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inferences.is_empty()
    }

    /// Largest index mentioned, if any.
    pub fn max_index(&self) -> Option<u32> {
        self.inferences.iter().flatten().copied().max()
    }

    /// Blank lines are kept as empty inferences.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut inferences = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| TraceError::Parse {
                        line: n + 1,
                        token: tok.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            inferences.push(row);
        }
        Ok(Trace { inferences })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for inf in &self.inferences {
            for (i, idx) in inf.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{idx}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn store(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// First `fraction` of the inferences and the rest, e.g. a profiling
    /// split and an evaluation split.
    pub fn split(&self, fraction: f64) -> (Trace, Trace) {
        let cut = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        (
            Trace::new(self.inferences[..cut].to_vec()),
            Trace::new(self.inferences[cut..].to_vec()),
        )
    }
}

/// Parameters of a synthetic power-law trace.
#[derive(Clone, Debug)]
pub struct SyntheticTrace {
    pub num_entries: usize,
    pub inferences: usize,
    /// Independent Zipf draws per inference.
    pub lookups: usize,
    pub exponent: f64,
    /// Size of the planted co-occurrence groups; 1 disables planting.
    pub block: usize,
    /// Chance that a draw pulls in its whole group.
    pub block_prob: f64,
}

impl SyntheticTrace {
    /// Popularity ranks are scattered over the index space by a seeded
    /// permutation, so hot rows are not clustered in the low bins.
    /// Group `g` is the ranks `g*block .. (g+1)*block`.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trace, TraceError> {
        if self.num_entries == 0 || self.block == 0 || self.exponent <= 0.0 {
            return Err(TraceError::Params(format!("{self:?}")));
        }
        let zipf = Zipf::new(self.num_entries as u64, self.exponent)
            .map_err(|e| TraceError::Params(e.to_string()))?;
        let mut perm: Vec<u32> = (0..self.num_entries as u32).collect();
        perm.shuffle(rng);
        let mut inferences = Vec::with_capacity(self.inferences);
        for _ in 0..self.inferences {
            let mut inf = Vec::with_capacity(self.lookups);
            for _ in 0..self.lookups {
                let rank = zipf.sample(rng) as usize - 1;
                if self.block > 1 && rng.gen_bool(self.block_prob) {
                    let g = rank / self.block * self.block;
                    let end = (g + self.block).min(self.num_entries);
                    inf.extend(perm[g..end].iter().copied());
                } else {
                    inf.push(perm[rank]);
                }
            }
            inferences.push(inf);
        }
        Ok(Trace { inferences })
    }
}
