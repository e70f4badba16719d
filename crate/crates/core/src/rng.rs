//! Named, reproducible random streams.
//!
//! Every stream is a ChaCha12 generator (counter-based, so identical on every
//! platform). Its 256-bit seed is
//!
//! ```text
//! SHA-256("maestrocut/rng/v1" || master_seed as u64 LE || label_1 || label_2 || ...)
//! ```
//!
//! where each label is encoded as a one-byte tag (`0x01` for text, `0x02` for
//! an index) followed by a u32 LE length and the bytes. Streams with different
//! label paths are statistically independent; the same path always yields the
//! same sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Generator type handed out by [`Stream::rng`].
pub type StreamRng = ChaCha12Rng;

const DOMAIN: &[u8] = b"maestrocut/rng/v1";

/// A position in the stream tree: a master seed plus a label path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Stream {
    master: u64,
    path: Vec<u8>,
}

impl Stream {
    pub fn new(master: u64) -> Self {
        Self {
            master,
            path: Vec::new(),
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Derive a named sub-stream.
    pub fn child(&self, label: impl AsRef<str>) -> Self {
        let bytes = label.as_ref().as_bytes();
        let mut path = self.path.clone();
        path.push(0x01);
        path.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        path.extend_from_slice(bytes);
        Self {
            master: self.master,
            path,
        }
    }

    /// Derive an indexed sub-stream (seed index, fragment index, step, ...).
    pub fn index(&self, i: u64) -> Self {
        let mut path = self.path.clone();
        path.push(0x02);
        path.extend_from_slice(&8u32.to_le_bytes());
        path.extend_from_slice(&i.to_le_bytes());
        Self {
            master: self.master,
            path,
        }
    }

    pub fn seed_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.master.to_le_bytes());
        h.update(&self.path);
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        seed
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::from_seed(self.seed_bytes())
    }

    /// A 64-bit seed for APIs that take a plain integer.
    pub fn seed_u64(&self) -> u64 {
        let b = self.seed_bytes();
        u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
    }
}
