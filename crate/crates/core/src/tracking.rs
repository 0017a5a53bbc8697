//! Shared protocol vocabulary: round parameters, announcements, transcripts,
//! communication accounting, and the mechanism interface the harness drives.
//!
//! A tracking run is a two-player game. Each step the adversary picks a
//! [`StepAction`]; the mechanism processes it and publishes an [`Announcement`].
//! The ordered (action, announcement) history is the [`Transcript`], the only
//! thing an adversary may observe. Everything the trackers share lives here so
//! the harness can treat them uniformly through [`Mechanism`].

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("round start count must be at least 1, got {0}")]
    BadN0(u64),
    #[error("site count must be at least 1, got {0}")]
    BadK(u32),
    #[error("accuracy target alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("failure probability must lie in (0, 1), got {0}")]
    BadBeta(f64),
    #[error("start count too small to support sampled blocks; run exact bootstrap until it grows")]
    BootstrapRequired,
}

/// Everything one sampled round needs, derived once at round start.
///
/// `s` is the phase count, `c` the concentration constant both noise scales
/// and the per-site block cap are built from, `delta` the block size, `eps`
/// the per-round privacy budget, `t` the phase bit threshold, and `k_prime`
/// the per-site block cap.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundParams {
    pub n0: u64,
    pub k: u32,
    pub s: u32,
    pub beta: f64,
    pub c: f64,
    pub delta: u64,
    pub eps: f64,
    pub t: f64,
    pub k_prime: u64,
}

pub(crate) fn check_common(k: u32, alpha: f64, beta: f64) -> Result<(), ParamsError> {
    if k < 1 {
        return Err(ParamsError::BadK(k));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ParamsError::BadAlpha(alpha));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(ParamsError::BadBeta(beta));
    }
    Ok(())
}

pub(crate) fn phase_count(k: u32) -> u32 {
    (k as f64).sqrt().ceil() as u32
}

fn concentration(s: u32, beta: f64) -> f64 {
    let l = (s as f64).log2();
    ((l.powf(1.5) + 1.0) * (8.0 * s as f64 / beta).log2()).sqrt()
}

/// Derives all per-round constants from the exact count at round start.
///
/// Errors with [`ParamsError::BootstrapRequired`] when `n0` is too small to
/// give a block size of at least 1; the caller then counts exactly instead.
pub fn derive_round_params(n0: u64, k: u32, alpha: f64, beta: f64) -> Result<RoundParams, ParamsError> {
    check_common(k, alpha, beta)?;
    if n0 < 1 {
        return Err(ParamsError::BadN0(n0));
    }
    let s = phase_count(k);
    let c = concentration(s, beta);
    let delta = (alpha * n0 as f64 / (8.0 * c * s as f64)).floor() as u64;
    if delta < 1 {
        return Err(ParamsError::BootstrapRequired);
    }
    Ok(RoundParams {
        n0,
        k,
        s,
        beta,
        c,
        delta,
        eps: c / s as f64,
        t: 2.0 * c * s as f64,
        k_prime: (c * k as f64).ceil() as u64,
    })
}

/// Splits a whole-run failure budget `delta_total` into a per-round budget,
/// spreading it over the phases of every round the stream can contain.
pub fn derive_global_beta(delta_total: f64, alpha: f64, k: u32, n_max: u64) -> Result<f64, ParamsError> {
    if k == 0 {
        return Err(ParamsError::BadK(k));
    }
    // Unlike the per-round accuracy target, the split tolerates alpha >= 1.
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(ParamsError::BadAlpha(alpha));
    }
    if !delta_total.is_finite() || delta_total <= 0.0 || delta_total >= 1.0 {
        return Err(ParamsError::BadBeta(delta_total));
    }
    if n_max < 1 {
        return Err(ParamsError::BadN0(n_max));
    }
    let s = phase_count(k) as f64;
    let rounds = ((n_max as f64).log2() / (alpha * s)).ceil().max(1.0);
    Ok(delta_total / (s * rounds))
}

/// Smallest round-start count at which sampled rounds become possible, i.e.
/// the exact-counting regime ends.
pub fn bootstrap_threshold(k: u32, alpha: f64, beta: f64) -> Result<u64, ParamsError> {
    check_common(k, alpha, beta)?;
    let s = phase_count(k);
    let c = concentration(s, beta);
    let mut n = (8.0 * c * s as f64 / alpha).ceil() as u64;
    // Settle float round-off against the actual acceptance predicate.
    while derive_round_params(n, k, alpha, beta) == Err(ParamsError::BootstrapRequired) {
        n += 1;
    }
    while n > 1 && derive_round_params(n - 1, k, alpha, beta).is_ok() {
        n -= 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepAction {
    Deliver { site: u32 },
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    NoChange,
    Update,
}

/// One published estimate. `NoChange` repeats the previous value verbatim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Announcement {
    pub tag: Tag,
    pub value: f64,
}

impl Announcement {
    pub fn no_change(value: f64) -> Self {
        Announcement { tag: Tag::NoChange, value }
    }
    pub fn update(value: f64) -> Self {
        Announcement { tag: Tag::Update, value }
    }
    pub fn is_update(&self) -> bool {
        self.tag == Tag::Update
    }
}

/// What one step looks like from outside plus the true count for scoring.
/// Adversaries may read everything here: they chose the actions, so the true
/// count is their own bookkeeping, and the announcement is public.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranscriptEntry {
    pub action: StepAction,
    pub tag: Tag,
    pub value: f64,
    pub n_total: u64,
}

/// Ordered step history of one run.
#[derive(Debug, Clone)]
pub struct Transcript {
    start_value: f64,
    start_count: u64,
    entries: Vec<TranscriptEntry>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TranscriptError {
    #[error("step {step}: value changed without an update tag")]
    SilentValueChange { step: usize },
    #[error("step {step}: true count did not advance by the delivered amount")]
    CountMismatch { step: usize },
    #[error("step {step}: announced value is negative or not finite")]
    BadValue { step: usize },
}

impl Transcript {
    pub fn new(start_value: f64, start_count: u64) -> Self {
        Transcript { start_value, start_count, entries: Vec::new() }
    }

    pub fn push(&mut self, action: StepAction, announcement: Announcement, n_total: u64) {
        self.entries.push(TranscriptEntry {
            action,
            tag: announcement.tag,
            value: announcement.value,
            n_total,
        });
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Currently announced value (the start value before any step).
    pub fn last_value(&self) -> f64 {
        self.entries.last().map_or(self.start_value, |e| e.value)
    }

    /// True count after the latest step (the start count before any step).
    pub fn last_count(&self) -> u64 {
        self.entries.last().map_or(self.start_count, |e| e.n_total)
    }

    /// Checks the public-consistency invariants: values only move under an
    /// Update tag, the true count advances exactly with deliveries, and every
    /// announced value is a nonnegative finite real.
    pub fn validate(&self) -> Result<(), TranscriptError> {
        let mut value = self.start_value;
        let mut count = self.start_count;
        for (step, e) in self.entries.iter().enumerate() {
            if !(e.value.is_finite() && e.value >= 0.0) {
                return Err(TranscriptError::BadValue { step });
            }
            if e.tag == Tag::NoChange && e.value != value {
                return Err(TranscriptError::SilentValueChange { step });
            }
            let expect = count + u64::from(matches!(e.action, StepAction::Deliver { .. }));
            if e.n_total != expect {
                return Err(TranscriptError::CountMismatch { step });
            }
            value = e.value;
            count = e.n_total;
        }
        Ok(())
    }
}

/// Word-granular communication accounting; one word carries one integer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub site_to_server: u64,
    pub server_to_site: u64,
    pub broadcast: u64,
}

impl CommLedger {
    pub fn total(&self) -> u64 {
        self.site_to_server + self.server_to_site + self.broadcast
    }
}

/// Per-round private instrumentation kept by block-sampling trackers.
#[derive(Debug, Clone)]
pub struct RoundInfo {
    pub index: u64,
    pub n0: u64,
    pub delta: u64,
    pub s: u32,
    pub k_prime: u64,
    /// Exact-counting segment before sampled rounds begin.
    pub bootstrap: bool,
    pub completed: bool,
    /// Round was cut by a site exhausting its block cap rather than by the
    /// final phase finishing.
    pub ended_by_signal: bool,
    pub phase_bits: Vec<u64>,
}

/// One bit-driven public update: which step announced it and which site's
/// item carried the triggering bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateRecord {
    pub step: u64,
    pub round: u64,
    pub site: u32,
    pub site_count: u64,
}

/// Run-level private log: round metadata plus every bit-driven update.
/// Exact end-of-round broadcasts and bootstrap steps are deliberately not
/// update records; they expose no sampled threshold.
#[derive(Debug, Clone, Default)]
pub struct ItemLog {
    pub rounds: Vec<RoundInfo>,
    pub updates: Vec<UpdateRecord>,
}

/// What one step produced. When a single delivery both crosses the final
/// phase and ends the round, the phase estimate lands in `interim` and the
/// exact end-of-round broadcast is the final `announcement`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub announcement: Announcement,
    pub interim: Option<Announcement>,
    /// A sampled bit forced a public estimate update this step.
    pub bit_update: bool,
    pub round_ended: bool,
}

/// Uniform driving interface for all trackers.
pub trait Mechanism {
    fn step(&mut self, action: StepAction) -> StepOutcome;
    /// Exact total count, including any count the tracker started from.
    fn n_total(&self) -> u64;
    fn ledger(&self) -> &CommLedger;
    fn rounds_completed(&self) -> u64;
    /// Private instrumentation, for trackers that sample blocks.
    fn item_log(&self) -> Option<&ItemLog> {
        None
    }
    fn label(&self) -> &'static str;
}
