//! Pseudorandom functions used to expand a tree node into its children.
//!
//! Every backend maps a 128-bit node value (used as the PRF key) and a
//! single child bit to a fresh 128-bit value. One call computes exactly one
//! child, so counting calls counts computed tree nodes.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use aes::cipher::{BlockEncrypt, KeyInit, KeyIvInit, StreamCipher};
use hmac::{Hmac, Mac};
use sha2::Sha256;

/// Width of a node value in bytes.
pub const SEED_BYTES: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PrfError {
    #[error("unknown PRF `{0}`")]
    UnknownName(String),
    #[error("unknown PRF id {0}")]
    UnknownId(u8),
}

/// A 128-bit node value. Also serves as the key of the PRF that expands it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Seed(pub u128);

impl Seed {
    pub const ZERO: Seed = Seed(0);
    /// The nonzero share target: 0^127 || 1.
    pub const ONE: Seed = Seed(1);

    pub fn from_bytes(bytes: [u8; SEED_BYTES]) -> Self {
        Seed(u128::from_le_bytes(bytes))
    }

    pub fn to_bytes(self) -> [u8; SEED_BYTES] {
        self.0.to_le_bytes()
    }

    /// Low bit, used as the control bit that picks a codeword matrix.
    #[inline]
    pub fn lsb(self) -> u8 {
        (self.0 & 1) as u8
    }

    pub fn random<R: rand::RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; SEED_BYTES];
        rng.fill_bytes(&mut bytes);
        Seed::from_bytes(bytes)
    }
}

impl std::ops::BitXor for Seed {
    type Output = Seed;
    #[inline]
    fn bitxor(self, rhs: Seed) -> Seed {
        Seed(self.0 ^ rhs.0)
    }
}

impl std::ops::BitXorAssign for Seed {
    #[inline]
    fn bitxor_assign(&mut self, rhs: Seed) {
        self.0 ^= rhs.0;
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({})", hex::encode(self.to_bytes()))
    }
}

/// The registered PRF backends.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(into = "String", try_from = "String")]
pub enum PrfId {
    #[default]
    Aes128Ctr,
    Sha256Hmac,
    ChaCha20,
    SipHash,
    HighwayHash,
}

impl PrfId {
    pub const ALL: [PrfId; 5] = [
        PrfId::Aes128Ctr,
        PrfId::Sha256Hmac,
        PrfId::ChaCha20,
        PrfId::SipHash,
        PrfId::HighwayHash,
    ];

    /// Wire code used in the key header.
    pub fn code(self) -> u8 {
        match self {
            PrfId::Aes128Ctr => 0,
            PrfId::Sha256Hmac => 1,
            PrfId::ChaCha20 => 2,
            PrfId::SipHash => 3,
            PrfId::HighwayHash => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, PrfError> {
        PrfId::ALL
            .into_iter()
            .find(|id| id.code() == code)
            .ok_or(PrfError::UnknownId(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            PrfId::Aes128Ctr => "aes128-ctr",
            PrfId::Sha256Hmac => "sha256-hmac",
            PrfId::ChaCha20 => "chacha20",
            PrfId::SipHash => "siphash",
            PrfId::HighwayHash => "highwayhash",
        }
    }
}

impl fmt::Display for PrfId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrfId {
    type Err = PrfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let id = match norm.as_str() {
            "aes128-ctr" | "aes128ctr" | "aes" | "aes-128" | "aes128" => PrfId::Aes128Ctr,
            "sha256-hmac" | "sha256hmac" | "hmac-sha256" | "sha256" => PrfId::Sha256Hmac,
            "chacha20" | "chacha" => PrfId::ChaCha20,
            "siphash" | "siphash24" | "siphash-2-4" => PrfId::SipHash,
            "highwayhash" | "highway" => PrfId::HighwayHash,
            _ => return Err(PrfError::UnknownName(s.to_string())),
        };
        Ok(id)
    }
}

impl From<PrfId> for String {
    fn from(v: PrfId) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for PrfId {
    type Error = PrfError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Evaluate `id` keyed by `seed` on the child bit `child` (0 or 1).
///
/// Pure function; no counting. Use [`Expander`] on hot paths that need the
/// call count.
pub fn prf_expand(id: PrfId, seed: Seed, child: u8) -> Seed {
    debug_assert!(child <= 1);
    let key = seed.to_bytes();
    match id {
        PrfId::Aes128Ctr => {
            let cipher = aes::Aes128::new(&key.into());
            let mut block = (child as u128).to_le_bytes().into();
            cipher.encrypt_block(&mut block);
            Seed::from_bytes(block.into())
        }
        PrfId::ChaCha20 => {
            let mut full_key = [0u8; 32];
            full_key[..16].copy_from_slice(&key);
            full_key[16..].copy_from_slice(&key);
            let mut cipher = chacha20::ChaCha20::new(&full_key.into(), &[0u8; 12].into());
            let mut stream = [0u8; 2 * SEED_BYTES];
            cipher.apply_keystream(&mut stream);
            let start = child as usize * SEED_BYTES;
            let mut out = [0u8; SEED_BYTES];
            out.copy_from_slice(&stream[start..start + SEED_BYTES]);
            Seed::from_bytes(out)
        }
        PrfId::Sha256Hmac => {
            let mut mac =
                <Hmac<Sha256> as Mac>::new_from_slice(&key).expect("HMAC accepts any key length");
            mac.update(&[child]);
            let digest = mac.finalize().into_bytes();
            let mut out = [0u8; SEED_BYTES];
            out.copy_from_slice(&digest[..SEED_BYTES]);
            Seed::from_bytes(out)
        }
        PrfId::SipHash => {
            use std::hash::Hasher;
            let half = |msg: u8| {
                let mut h = siphasher::sip::SipHasher24::new_with_key(&key);
                h.write(&[msg]);
                h.finish()
            };
            widen(half(2 * child), half(2 * child + 1))
        }
        PrfId::HighwayHash => {
            use highway::{HighwayHash, HighwayHasher, Key};
            let lo = u64::from_le_bytes(key[..8].try_into().unwrap());
            let hi = u64::from_le_bytes(key[8..].try_into().unwrap());
            let hkey = Key([lo, hi, lo, hi]);
            let half = |msg: u8| HighwayHasher::new(hkey).hash64(&[msg]);
            widen(half(2 * child), half(2 * child + 1))
        }
    }
}

// 64-bit outputs are concatenated low word first.
fn widen(lo: u64, hi: u64) -> Seed {
    Seed(lo as u128 | (hi as u128) << 64)
}

/// A PRF handle that counts its invocations locally.
///
/// Each worker owns one; totals are merged into a [`PrfCounter`] or a cost
/// report when the worker finishes.
#[derive(Debug, Clone)]
pub struct Expander {
    id: PrfId,
    calls: u64,
}

impl Expander {
    pub fn new(id: PrfId) -> Self {
        Expander { id, calls: 0 }
    }

    #[inline]
    pub fn expand(&mut self, seed: Seed, child: u8) -> Seed {
        self.calls += 1;
        prf_expand(self.id, seed, child)
    }

    pub fn id(&self) -> PrfId {
        self.id
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

/// Shared, monotone PRF invocation counter.
#[derive(Debug, Default)]
pub struct PrfCounter(AtomicU64);

impl PrfCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, calls: u64) {
        self.0.fetch_add(calls, Ordering::Relaxed);
    }

    pub fn record(&self, expander: &Expander) {
        self.add(expander.calls());
    }

    /// Total invocations since the last reset.
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}
