//! Named, splittable random streams.
//!
//! Every stochastic site (initialisation, dropout, subset selection, data
//! generation, shuffling) pulls from its own ChaCha stream whose key is a
//! SHA-256 digest of the parent key and the site name. Adding or removing a
//! draw at one site never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStreams {
    key: [u8; 32],
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"latentdr/root");
        hasher.update(seed.to_le_bytes());
        Self {
            key: hasher.finalize().into(),
        }
    }

    fn derive(&self, tag: &[u8], name: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update(tag);
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.finalize().into()
    }

    /// Independent generator for the site `name`.
    pub fn stream(&self, name: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.derive(b"stream", name))
    }

    /// A child namespace; its streams are independent of the parent's.
    pub fn child(&self, name: &str) -> RngStreams {
        RngStreams {
            key: self.derive(b"child", name),
        }
    }

    pub fn child_indexed(&self, name: &str, index: u64) -> RngStreams {
        self.child(&format!("{name}#{index}"))
    }
}
