//! The event loop that plays tracker against adversary, plus metrics.
//!
//! One trial is a strictly sequential game: the adversary reads the public
//! transcript, names a site, the tracker absorbs the item and announces, and
//! the announcement is appended for the adversary's next look. Trials are
//! fully independent (each derives its own rng subtree from the master seed),
//! so any number of worker threads produces byte-identical reports.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adversaries::Adversary;
use crate::adversaries::ReplayAdversary;
use crate::adversaries::Schedule;
use crate::adversaries::StopOnFireAdversary;
use crate::adversaries::UpdateChaserAdversary;
use crate::baselines::DeterministicTracker;
use crate::baselines::ObliviousTracker;
use crate::noise::NoiseMode;
use crate::noise::RngStream;
use crate::noise::StreamId;
use crate::privacy_audit::compute_leak_set;
use crate::robust::RobustConfig;
use crate::robust::RobustTracker;
use crate::stats::wilson_interval;
use crate::stats::Z_95;
use crate::tracking::bootstrap_threshold;
use crate::tracking::derive_global_beta;
use crate::tracking::CommLedger;
use crate::tracking::Mechanism;
use crate::tracking::ParamsError;
use crate::tracking::Transcript;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismKind {
    Robust,
    Oblivious,
    Deterministic,
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MechanismKind::Robust => "robust",
            MechanismKind::Oblivious => "oblivious",
            MechanismKind::Deterministic => "deterministic",
        };
        write!(f, "{name}")
    }
}

impl FromStr for MechanismKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robust" => Ok(MechanismKind::Robust),
            "oblivious" => Ok(MechanismKind::Oblivious),
            "deterministic" => Ok(MechanismKind::Deterministic),
            other => Err(HarnessError::BadConfig(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Which input strategy drives a run. `Replay` variants are oblivious; the
/// other two adapt to announcements.
#[derive(Debug, Clone, PartialEq)]
pub enum AdversarySpec {
    Replay(Schedule),
    StopOnFire,
    UpdateChaser,
}

impl AdversarySpec {
    fn build(&self, k: u32, budget: u64, rng: RngStream) -> Box<dyn Adversary> {
        match self {
            AdversarySpec::Replay(schedule) => {
                Box::new(ReplayAdversary::new(k, budget, schedule.clone(), rng))
            }
            AdversarySpec::StopOnFire => Box::new(StopOnFireAdversary::new(k, budget)),
            AdversarySpec::UpdateChaser => Box::new(UpdateChaserAdversary::new(k, budget)),
        }
    }
}

impl fmt::Display for AdversarySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdversarySpec::Replay(Schedule::RoundRobin) => write!(f, "replay:round_robin"),
            AdversarySpec::Replay(Schedule::SingleSite(site)) => {
                write!(f, "replay:single_site:{site}")
            }
            AdversarySpec::Replay(Schedule::Weighted(_)) => write!(f, "replay:weighted"),
            AdversarySpec::StopOnFire => write!(f, "stop_on_fire"),
            AdversarySpec::UpdateChaser => write!(f, "update_chaser"),
        }
    }
}

impl FromStr for AdversarySpec {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" | "replay:round_robin" => Ok(AdversarySpec::Replay(Schedule::RoundRobin)),
            "stop_on_fire" => Ok(AdversarySpec::StopOnFire),
            "update_chaser" => Ok(AdversarySpec::UpdateChaser),
            other => {
                if let Some(site) = other.strip_prefix("replay:single_site:") {
                    let site: u32 = site.parse().map_err(|_| {
                        HarnessError::BadConfig(format!("bad site in adversary '{other}'"))
                    })?;
                    Ok(AdversarySpec::Replay(Schedule::SingleSite(site)))
                } else {
                    Err(HarnessError::BadConfig(format!("unknown adversary '{other}'")))
                }
            }
        }
    }
}

pub fn parse_noise_mode(s: &str) -> Result<NoiseMode, HarnessError> {
    match s {
        "standard" => Ok(NoiseMode::Standard),
        "disabled" => Ok(NoiseMode::Disabled),
        other => Err(HarnessError::BadConfig(format!("unknown noise mode '{other}'"))),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub mechanism: MechanismKind,
    pub adversary: AdversarySpec,
    pub k: u32,
    /// Relative accuracy target.
    pub alpha: f64,
    /// Whole-run failure probability budget, split per round internally.
    pub delta: f64,
    /// Items each trial delivers.
    pub item_budget: u64,
    pub trials: u64,
    pub master_seed: u64,
    pub noise: NoiseMode,
    /// Block divisor for the oblivious baseline; ignored by the others.
    pub c0: f64,
    /// Begin already synchronized at this exact count instead of cold.
    pub start_n0: Option<u64>,
    /// Smallest true count at which relative error is scored. Defaults to
    /// the exact-counting threshold, below which relative error is noise.
    pub n_floor: Option<u64>,
    /// Worker threads for trial parallelism; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mechanism: MechanismKind::Robust,
            adversary: AdversarySpec::Replay(Schedule::RoundRobin),
            k: 16,
            alpha: 0.1,
            delta: 0.05,
            item_budget: 1_000_000,
            trials: 100,
            master_seed: 42,
            noise: NoiseMode::Standard,
            c0: 8.0,
            start_n0: None,
            n_floor: None,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    /// Largest exact count a trial can reach; sizes the failure-budget split.
    fn n_max(&self) -> u64 {
        (self.start_n0.unwrap_or(0) + self.item_budget).max(1)
    }

    /// Per-round failure budget implied by the whole-run delta.
    pub fn round_beta(&self) -> Result<f64, HarnessError> {
        Ok(derive_global_beta(self.delta, self.alpha, self.k, self.n_max())?)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.k == 0 {
            return Err(HarnessError::BadConfig("k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HarnessError::BadConfig(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(HarnessError::BadConfig(format!("delta {} not in (0, 1)", self.delta)));
        }
        if !(self.c0 > 0.0 && self.c0.is_finite()) {
            return Err(HarnessError::BadConfig(format!("c0 {} must be positive", self.c0)));
        }
        if self.mechanism == MechanismKind::Deterministic && self.start_n0.is_some() {
            return Err(HarnessError::BadConfig(
                "the deterministic tracker has no synchronized start".into(),
            ));
        }
        if let AdversarySpec::Replay(Schedule::SingleSite(site)) = &self.adversary {
            if *site < 1 || *site > self.k {
                return Err(HarnessError::BadConfig(format!("site {site} not in 1..={}", self.k)));
            }
        }
        Ok(())
    }

    fn build_mechanism(&self, beta: f64, rng: RngStream) -> Result<Box<dyn Mechanism>, HarnessError> {
        Ok(match self.mechanism {
            MechanismKind::Robust => {
                let rcfg = RobustConfig { k: self.k, alpha: self.alpha, beta, noise: self.noise };
                match self.start_n0 {
                    Some(n0) => Box::new(RobustTracker::starting_at(rcfg, n0, rng)?),
                    None => Box::new(RobustTracker::new(rcfg, rng)?),
                }
            }
            MechanismKind::Oblivious => {
                let n0 = self.start_n0.unwrap_or(0);
                Box::new(ObliviousTracker::starting_at(self.k, self.alpha, self.c0, n0, rng)?)
            }
            MechanismKind::Deterministic => {
                Box::new(DeterministicTracker::new(self.k, self.alpha)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorSample {
    pub step: u64,
    pub n_total: u64,
    pub announced: f64,
}

/// Everything measured in one trial.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub trial: u64,
    /// Stream id of the trial's rng subtree; enough to re-derive the run.
    pub seed: u64,
    pub n_items: u64,
    /// Max over scored steps of |announced - true| / true, counting every
    /// announcement the public saw (interim round-end estimates included).
    pub max_rel_error: f64,
    /// Same maximum restricted to steps before the first resynchronization.
    pub max_rel_error_first_round: f64,
    pub failed: bool,
    pub words: CommLedger,
    pub total_words: u64,
    pub rounds_completed: u64,
    /// Downsampled (step, true count, announced) triples: about 1024 evenly
    /// spaced checkpoints plus update steps, thinned if updates are dense.
    pub error_samples: Vec<ErrorSample>,
    /// Total bits per completed sampled round.
    pub per_round_bits: Vec<u64>,
    /// Largest number of threshold positions exposed in any one round.
    pub leak_max_per_round: u64,
}

/// One finished game: the public history and the measurements.
pub struct TrialRun {
    pub transcript: Transcript,
    pub metrics: Metrics,
}

const SAMPLE_CAP: usize = 16_384;

struct SampleBuf {
    samples: Vec<ErrorSample>,
    /// Keep one update sample in 2^thin_shift once the buffer overflows.
    thin_shift: u32,
    seen_updates: u64,
}

impl SampleBuf {
    fn new() -> Self {
        SampleBuf { samples: Vec::new(), thin_shift: 0, seen_updates: 0 }
    }

    fn push_checkpoint(&mut self, s: ErrorSample) {
        self.samples.push(s);
    }

    fn push_update(&mut self, s: ErrorSample) {
        self.seen_updates += 1;
        if self.seen_updates & ((1 << self.thin_shift) - 1) != 0 {
            return;
        }
        if self.samples.len() >= SAMPLE_CAP {
            // halve retention, deterministically
            let mut keep = false;
            self.samples.retain(|_| {
                keep = !keep;
                keep
            });
            self.thin_shift += 1;
            if self.seen_updates & ((1 << self.thin_shift) - 1) != 0 {
                return;
            }
        }
        self.samples.push(s);
    }
}

/// Plays one full game and measures it.
pub fn run_trial(cfg: &ExperimentConfig, trial: u64) -> Result<TrialRun, HarnessError> {
    cfg.validate()?;
    let beta = cfg.round_beta()?;
    let n_floor = match cfg.n_floor {
        Some(n) => n.max(1),
        None => bootstrap_threshold(cfg.k, cfg.alpha, beta)?,
    };
    let trial_rng = RngStream::root(cfg.master_seed).child(StreamId::Trial(trial));
    let seed = trial_rng.stream_id();
    let mut mechanism = cfg.build_mechanism(beta, trial_rng.child(StreamId::Mechanism))?;
    let mut adversary =
        cfg.adversary.build(cfg.k, cfg.item_budget, trial_rng.child(StreamId::Adversary));

    let start_count = mechanism.n_total();
    let mut transcript = Transcript::new(start_count as f64, start_count);
    let mut buf = SampleBuf::new();
    let checkpoint_every = (cfg.item_budget / 1024).max(1);
    let mut max_rel_error = 0.0f64;
    let mut max_rel_first = 0.0f64;

    while let Some(action) = adversary.next_action(&transcript) {
        let step = transcript.len() as u64;
        let rounds_before = mechanism.rounds_completed();
        let out = mechanism.step(action);
        let n = mechanism.n_total();
        for announcement in out.interim.iter().chain(std::iter::once(&out.announcement)) {
            if n >= n_floor {
                let err = (announcement.value - n as f64).abs() / n as f64;
                max_rel_error = max_rel_error.max(err);
                if rounds_before == 0 {
                    max_rel_first = max_rel_first.max(err);
                }
            }
        }
        let sample = ErrorSample { step, n_total: n, announced: out.announcement.value };
        if out.announcement.is_update() {
            buf.push_update(sample);
        } else if (step + 1).is_multiple_of(checkpoint_every) {
            buf.push_checkpoint(sample);
        }
        transcript.push(action, out.announcement, n);
    }

    let (per_round_bits, leak_max_per_round) = match mechanism.item_log() {
        Some(log) => {
            let bits = log
                .rounds
                .iter()
                .filter(|r| r.completed && !r.bootstrap)
                .map(|r| r.phase_bits.iter().sum())
                .collect();
            let leaks = compute_leak_set(&transcript, log)
                .map_err(|e| HarnessError::BadConfig(format!("corrupt run logs: {e}")))?;
            (bits, leaks.max_per_round())
        }
        None => (Vec::new(), 0),
    };

    let words = *mechanism.ledger();
    let metrics = Metrics {
        trial,
        seed,
        n_items: mechanism.n_total() - start_count,
        max_rel_error,
        max_rel_error_first_round: max_rel_first,
        failed: max_rel_error > cfg.alpha,
        words,
        total_words: words.total(),
        rounds_completed: mechanism.rounds_completed(),
        error_samples: buf.samples,
        per_round_bits,
        leak_max_per_round,
    };
    Ok(TrialRun { transcript, metrics })
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregate {
    pub trials: u64,
    pub failures: u64,
    pub failure_fraction: f64,
    pub failure_ci_low: f64,
    pub failure_ci_high: f64,
    pub mean_total_words: f64,
    pub max_total_words: u64,
    pub mean_rounds: f64,
    pub mean_max_rel_error: f64,
}

pub struct ExperimentReport {
    pub per_trial: Vec<Metrics>,
    pub aggregate: Aggregate,
}

fn aggregate(per_trial: &[Metrics]) -> Aggregate {
    let trials = per_trial.len() as u64;
    let failures = per_trial.iter().filter(|m| m.failed).count() as u64;
    let (lo, hi) = wilson_interval(failures, trials, Z_95);
    let mean = |f: &dyn Fn(&Metrics) -> f64| {
        if per_trial.is_empty() {
            0.0
        } else {
            per_trial.iter().map(f).sum::<f64>() / trials as f64
        }
    };
    Aggregate {
        trials,
        failures,
        failure_fraction: if trials == 0 { 0.0 } else { failures as f64 / trials as f64 },
        failure_ci_low: lo,
        failure_ci_high: hi,
        mean_total_words: mean(&|m| m.total_words as f64),
        max_total_words: per_trial.iter().map(|m| m.total_words).max().unwrap_or(0),
        mean_rounds: mean(&|m| m.rounds_completed as f64),
        mean_max_rel_error: mean(&|m| m.max_rel_error),
    }
}

/// Runs every trial, in parallel when configured, and aggregates. Results do
/// not depend on worker count or scheduling order.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    if cfg.trials == 0 {
        return Err(HarnessError::BadConfig("trials must be at least 1".into()));
    }
    let body = || -> Result<Vec<Metrics>, HarnessError> {
        (0..cfg.trials)
            .into_par_iter()
            .map(|trial| run_trial(cfg, trial).map(|run| run.metrics))
            .collect()
    };
    let per_trial = if cfg.workers == 0 {
        body()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| HarnessError::BadConfig(format!("worker pool: {e}")))?
            .install(body)?
    };
    let aggregate = aggregate(&per_trial);
    Ok(ExperimentReport { per_trial, aggregate })
}

pub const CSV_HEADER: &str =
    "trial,seed,mechanism,adversary,k,alpha,delta,n_items,max_rel_error,failed,total_words,rounds";

/// Per-trial metrics as CSV, one row per trial, fixed column order.
pub fn csv_string(cfg: &ExperimentConfig, report: &ExperimentReport) -> String {
    let mut out = String::with_capacity(64 * (report.per_trial.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for m in &report.per_trial {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            m.trial,
            m.seed,
            cfg.mechanism,
            cfg.adversary,
            cfg.k,
            cfg.alpha,
            cfg.delta,
            m.n_items,
            m.max_rel_error,
            u8::from(m.failed),
            m.total_words,
            m.rounds_completed,
        );
    }
    out
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    mechanism: String,
    adversary: String,
    k: u32,
    alpha: f64,
    delta: f64,
    items: u64,
    trials: u64,
    seed: u64,
    noise_mode: String,
    aggregate: &'a Aggregate,
}

/// Aggregate summary as pretty JSON (stable field order).
pub fn summary_json(cfg: &ExperimentConfig, report: &ExperimentReport) -> String {
    let summary = Summary {
        mechanism: cfg.mechanism.to_string(),
        adversary: cfg.adversary.to_string(),
        k: cfg.k,
        alpha: cfg.alpha,
        delta: cfg.delta,
        items: cfg.item_budget,
        trials: cfg.trials,
        seed: cfg.master_seed,
        noise_mode: cfg.noise.to_string(),
        aggregate: &report.aggregate,
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("plain data serializes");
    text.push('\n');
    text
}
