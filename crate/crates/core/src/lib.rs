//! Simulation library for distributed count tracking under adaptive adversaries.
//!
//! `k` sites receive items one at a time and talk to a central server that must
//! continuously publish an approximate total count while spending as few words of
//! communication as possible. The crate provides:
//!
//! * a noise-hardened tracker whose announcements stay accurate even when the
//!   item schedule adapts to the public transcript ([`robust`]),
//! * two classical baselines, one deterministic and one randomized, that bracket
//!   it in cost and robustness ([`baselines`]),
//! * adversary strategies that drive the schedule, including transcript-adaptive
//!   attacks ([`adversaries`]),
//! * a Monte Carlo harness with reproducible seeding, CSV/JSON reporting, and
//!   trial-level parallelism ([`harness`]),
//! * noisy prefix sums over bounded streams plus an empirical privacy probe for
//!   them ([`binary_mechanism`]),
//! * a transcript-level privacy audit that estimates how much the announcements
//!   reveal about individual site thresholds ([`privacy_audit`]).
//!
//! All randomness flows through [`noise::RngStream`], which derives independent
//! substreams from a master seed and a structured path, so results are
//! byte-for-byte reproducible regardless of thread count.

pub mod adversaries;
pub mod baselines;
pub mod binary_mechanism;
pub mod harness;
pub mod noise;
pub mod privacy_audit;
pub mod robust;
pub mod stats;
pub mod tracking;
