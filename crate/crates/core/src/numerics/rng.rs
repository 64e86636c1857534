//! Keyed random streams. A stream is identified by a 256-bit key plus a
//! path `(run, t, purpose, i, j)`; the ChaCha seed is the SHA-256 of both,
//! so distinct paths are independent and scheduling never changes a draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedKey(pub [u8; 32]);

impl SeedKey {
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"nested-msf/seed");
        h.update(seed.to_le_bytes());
        SeedKey(h.finalize().into())
    }

    /// Independent key for a labelled sub-experiment.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.0);
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        SeedKey(h.finalize().into())
    }

    pub fn stream(&self, path: StreamPath) -> RngStream {
        RngStream { key: *self, path }
    }
}

/// What a stream is used for; part of the stream path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Truth = 1,
    Observation = 2,
    Init = 3,
    Jitter = 4,
    ParamResample = 5,
    SlowResample = 6,
    FastFilter = 7,
    EnsemblePerturbation = 8,
    Test = 255,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamPath {
    pub run: u64,
    pub t: u64,
    pub purpose: Purpose,
    pub i: u64,
    pub j: u64,
}

impl StreamPath {
    pub fn new(run: u64, t: u64, purpose: Purpose, i: u64, j: u64) -> Self {
        StreamPath {
            run,
            t,
            purpose,
            i,
            j,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: SeedKey,
    path: StreamPath,
}

impl RngStream {
    pub fn path(&self) -> StreamPath {
        self.path
    }

    pub fn key(&self) -> SeedKey {
        self.key
    }

    /// Same key, different path.
    pub fn with_path(&self, path: StreamPath) -> RngStream {
        RngStream {
            key: self.key,
            path,
        }
    }

    /// Same run, time and particle index; new purpose and member index.
    pub fn fork(&self, purpose: Purpose, j: u64) -> RngStream {
        RngStream {
            key: self.key,
            path: StreamPath {
                purpose,
                j,
                ..self.path
            },
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.key.0);
        h.update(self.path.run.to_le_bytes());
        h.update(self.path.t.to_le_bytes());
        h.update([self.path.purpose as u8]);
        h.update(self.path.i.to_le_bytes());
        h.update(self.path.j.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}
