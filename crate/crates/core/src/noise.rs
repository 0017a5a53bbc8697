//! Seeded randomness: path-derived substreams, integer thresholds, Laplace noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("laplace scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("threshold range must contain at least one value")]
    EmptyThresholdRange,
}

/// Controls whether Laplace draws actually add noise.
///
/// `Disabled` forces every Laplace sample to exactly 0.0 while leaving all other
/// draws (thresholds, schedules) untouched. Runs then become deterministic given
/// the thresholds, which is what the exact-trace tests and audit controls rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Standard,
    Disabled,
}

impl std::fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseMode::Standard => write!(f, "standard"),
            NoiseMode::Disabled => write!(f, "disabled"),
        }
    }
}

/// One segment of a stream derivation path. Streams with different paths are
/// computationally independent of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    Trial(u64),
    Round(u64),
    Site(u32),
    Server,
    /// Per-phase threshold perturbation draws.
    PhaseNoise,
    /// Prefix-sum tree level noise.
    TreeNoise,
    Mechanism,
    Adversary,
    /// Side label for paired experiments (0 and 1 in a privacy probe).
    Arm(u32),
    /// Free-form tag for tools and tests.
    Label(u64),
}

impl StreamId {
    fn encode(self) -> (u8, u64) {
        match self {
            StreamId::Trial(i) => (0, i),
            StreamId::Round(i) => (1, i),
            StreamId::Site(i) => (2, i as u64),
            StreamId::Server => (3, 0),
            StreamId::PhaseNoise => (4, 0),
            StreamId::TreeNoise => (5, 0),
            StreamId::Mechanism => (6, 0),
            StreamId::Adversary => (7, 0),
            StreamId::Arm(i) => (8, i as u64),
            StreamId::Label(i) => (9, i),
        }
    }
}

/// A seeded random stream addressed by `(master_seed, path)`.
///
/// The generator state is derived by hashing the seed together with the full
/// path, not by splitting a shared generator, so the draw order of one stream
/// can never affect another. That property is what lets the harness run trials
/// on any number of worker threads and still produce identical output.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<(u8, u64)>,
    id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Stream at the root of the derivation tree for `master_seed`.
    pub fn root(master_seed: u64) -> Self {
        Self::from_parts(master_seed, Vec::new())
    }

    /// Independent stream one path segment below `self`.
    pub fn child(&self, id: StreamId) -> Self {
        let mut path = self.path.clone();
        path.push(id.encode());
        Self::from_parts(self.master_seed, path)
    }

    fn from_parts(master_seed: u64, path: Vec<(u8, u64)>) -> Self {
        let mut h = Sha256::new();
        h.update(b"tally.stream.v1");
        h.update(master_seed.to_le_bytes());
        for (tag, idx) in &path {
            h.update([*tag]);
            h.update(idx.to_le_bytes());
        }
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let id = u64::from_le_bytes(digest[..8].try_into().unwrap());
        RngStream { master_seed, path, id, rng: ChaCha8Rng::from_seed(key) }
    }

    /// Stable 64-bit identifier of this stream (a digest of seed and path).
    /// Reported in output files so individual trials can be re-derived.
    pub fn stream_id(&self) -> u64 {
        self.id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn next_unit_f64(&mut self) -> f64 {
        self.rng.gen()
    }

    /// Uniform integer threshold from `{1, ..., delta}`.
    pub fn uniform_threshold(&mut self, delta: u64) -> Result<u64, NoiseError> {
        if delta < 1 {
            return Err(NoiseError::EmptyThresholdRange);
        }
        Ok(self.rng.gen_range(1..=delta))
    }

    /// Zero-mean Laplace draw with the given scale, via the inverse CDF
    /// `F^-1(u) = -scale * sign(u - 1/2) * ln(1 - 2|u - 1/2|)`.
    ///
    /// In `NoiseMode::Disabled` the result is exactly 0.0; the scale is still
    /// validated so parameter bugs do not hide behind disabled noise.
    pub fn laplace(&mut self, scale: f64, mode: NoiseMode) -> Result<f64, NoiseError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(NoiseError::BadScale(scale));
        }
        if mode == NoiseMode::Disabled {
            return Ok(0.0);
        }
        // u = 0 would map to -infinity; redraw (probability 2^-53 per draw).
        let mut u: f64 = self.rng.gen();
        while u == 0.0 {
            u = self.rng.gen();
        }
        let x = u - 0.5;
        Ok(-scale * x.signum() * (1.0 - 2.0 * x.abs()).ln())
    }
}
