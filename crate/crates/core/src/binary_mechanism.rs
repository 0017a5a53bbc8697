//! Noisy running prefix sums over a bounded stream, plus an empirical privacy
//! probe for them.
//!
//! The mechanism maintains partial sums along the dyadic decomposition of the
//! step index: after step `t`, one noisy partial sum is live for every set bit
//! of `t`, and the published prefix sum is the total of those noisy values. Each
//! level gets an equal share of the privacy budget, so any single input only
//! touches a logarithmic number of noisy values.

use std::collections::HashMap;

use thiserror::Error;

use crate::noise::{NoiseError, NoiseMode, RngStream, StreamId};
use crate::stats::{log_ratio_bounds, LogRatioBounds};

#[derive(Debug, Error, PartialEq)]
pub enum BmError {
    #[error("capacity must be at least 1, got {0}")]
    BadCapacity(u64),
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("stream capacity {0} exhausted")]
    CapacityExhausted(u64),
    #[error("probe streams must have equal length <= capacity")]
    ProbeStreamShape,
    #[error("probe streams must differ in at most one position by at most 1")]
    ProbeStreamsNotNeighbors,
    #[error("probe bucket width must be positive and finite, got {0}")]
    BadBucketWidth(f64),
    #[error("probe needs at least one trial")]
    NoTrials,
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// `ceil(log2(n))` for `n >= 1`, computed in integer arithmetic.
fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Streaming noisy prefix sums for up to `capacity` real-valued inputs.
#[derive(Debug)]
pub struct BinaryMechanism {
    capacity: u64,
    eps_per_level: f64,
    mode: NoiseMode,
    t: u64,
    level_sums: Vec<f64>,
    noisy_sums: Vec<f64>,
}

impl BinaryMechanism {
    /// Total budget `eps` is split evenly over `max(1, ceil(log2(capacity)))`
    /// tree levels.
    pub fn new(capacity: u64, eps: f64, mode: NoiseMode) -> Result<Self, BmError> {
        if capacity < 1 {
            return Err(BmError::BadCapacity(capacity));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(BmError::BadEpsilon(eps));
        }
        let levels = ceil_log2(capacity).max(1) as usize;
        // Highest set-bit index of any t in 1..=capacity.
        let slots = 64 - capacity.leading_zeros() as usize;
        Ok(BinaryMechanism {
            capacity,
            eps_per_level: eps / levels as f64,
            mode,
            t: 0,
            level_sums: vec![0.0; slots],
            noisy_sums: vec![0.0; slots],
        })
    }

    /// Feeds the next input and returns the announced prefix sum `B(t)`.
    pub fn feed(&mut self, x: f64, rng: &mut RngStream) -> Result<f64, BmError> {
        if self.t == self.capacity {
            return Err(BmError::CapacityExhausted(self.capacity));
        }
        self.t += 1;
        let level = self.t.trailing_zeros() as usize;
        // The new partial sum absorbs every level below it, which by the shape
        // of t (trailing zeros) has just gone dead.
        let mut acc = x;
        for j in 0..level {
            acc += self.level_sums[j];
            self.level_sums[j] = 0.0;
            self.noisy_sums[j] = 0.0;
        }
        self.level_sums[level] = acc;
        self.noisy_sums[level] = acc + rng.laplace(1.0 / self.eps_per_level, self.mode)?;
        let mut out = 0.0;
        let mut rest = self.t;
        let mut j = 0;
        while rest != 0 {
            if rest & 1 == 1 {
                out += self.noisy_sums[j];
            }
            rest >>= 1;
            j += 1;
        }
        Ok(out)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn eps_per_level(&self) -> f64 {
        self.eps_per_level
    }

    /// Indices of the currently live noisy partial sums (the set bits of `t`).
    pub fn live_levels(&self) -> Vec<u32> {
        (0..64).filter(|j| self.t >> j & 1 == 1).collect()
    }
}

/// Configuration for [`bm_privacy_probe`].
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub capacity: u64,
    pub eps: f64,
    /// Two input streams of equal length differing in at most one position by
    /// at most 1 (identical streams are allowed as a null control).
    pub stream_a: Vec<f64>,
    pub stream_b: Vec<f64>,
    /// Output vectors are discretized to this grid before counting.
    pub bucket_width: f64,
    pub trials: u64,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    /// Buckets with fewer combined counts than this are not evaluated.
    pub min_count: u64,
}

impl ProbeConfig {
    pub fn new(capacity: u64, eps: f64, stream_a: Vec<f64>, stream_b: Vec<f64>) -> Self {
        ProbeConfig {
            capacity,
            eps,
            stream_a,
            stream_b,
            bucket_width: 1.0,
            trials: 100_000,
            seed: 0,
            noise_mode: NoiseMode::Standard,
            min_count: 50,
        }
    }
}

/// Outcome of a probe run. `violation` is set when some bucket's supported
/// lower bound on the output log-ratio exceeds the nominal `eps`.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub epsilon: f64,
    pub events_evaluated: usize,
    /// Largest statistically supported `|ln(P_a / P_b)|` over evaluated buckets.
    pub max_lower_ci: f64,
    /// Plug-in estimate at the bucket attaining `max_lower_ci` (may be infinite).
    pub point_at_max: f64,
    /// Half-width of the CI at that bucket (may be infinite).
    pub half_width_at_max: f64,
    pub violation: bool,
}

/// Monte Carlo check of how far apart the output distributions of two
/// neighboring input streams really are.
///
/// Runs the mechanism `trials` times per stream with independent noise,
/// discretizes each output vector to a grid, and bounds `|ln(P_a[E]/P_b[E])|`
/// per grid cell with Wilson 95% intervals. Probabilities are relative to all
/// trials of an arm, so cells are genuine events over the output space.
pub fn bm_privacy_probe(cfg: &ProbeConfig) -> Result<ProbeReport, BmError> {
    if cfg.stream_a.len() != cfg.stream_b.len() || cfg.stream_a.len() as u64 > cfg.capacity {
        return Err(BmError::ProbeStreamShape);
    }
    let mut diffs = 0;
    for (a, b) in cfg.stream_a.iter().zip(&cfg.stream_b) {
        if a != b {
            diffs += 1;
            if (a - b).abs() > 1.0 + 1e-9 {
                return Err(BmError::ProbeStreamsNotNeighbors);
            }
        }
    }
    if diffs > 1 {
        return Err(BmError::ProbeStreamsNotNeighbors);
    }
    if !(cfg.bucket_width > 0.0 && cfg.bucket_width.is_finite()) {
        return Err(BmError::BadBucketWidth(cfg.bucket_width));
    }
    if cfg.trials == 0 {
        return Err(BmError::NoTrials);
    }

    let mut counts: HashMap<Vec<i64>, [u64; 2]> = HashMap::new();
    for (arm, stream) in [(0usize, &cfg.stream_a), (1usize, &cfg.stream_b)] {
        let mut rng = RngStream::root(cfg.seed).child(StreamId::Arm(arm as u32));
        for _ in 0..cfg.trials {
            let mut bm = BinaryMechanism::new(cfg.capacity, cfg.eps, cfg.noise_mode)?;
            let mut sig = Vec::with_capacity(stream.len());
            for &x in stream.iter() {
                let out = bm.feed(x, &mut rng)?;
                sig.push((out / cfg.bucket_width).floor() as i64);
            }
            counts.entry(sig).or_default()[arm] += 1;
        }
    }

    let mut report = ProbeReport {
        epsilon: cfg.eps,
        events_evaluated: 0,
        max_lower_ci: 0.0,
        point_at_max: 0.0,
        half_width_at_max: 0.0,
        violation: false,
    };
    let mut best: Option<LogRatioBounds> = None;
    for [na, nb] in counts.values() {
        if na + nb < cfg.min_count {
            continue;
        }
        report.events_evaluated += 1;
        let b = log_ratio_bounds(*na, *nb, cfg.trials);
        if best.is_none_or(|cur| b.lower > cur.lower) {
            best = Some(b);
        }
    }
    if let Some(b) = best {
        report.max_lower_ci = b.lower;
        report.point_at_max = b.point;
        report.half_width_at_max = if b.upper.is_finite() { (b.upper - b.lower) / 2.0 } else { f64::INFINITY };
        report.violation = b.lower > cfg.eps;
    }
    Ok(report)
}
