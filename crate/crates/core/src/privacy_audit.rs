//! Transcript-level privacy accounting for the robust tracker.
//!
//! The announcements necessarily reveal something: each public update is
//! triggered by one concrete delivery, so the offset of that site's current
//! block is exposed. [`compute_leak_set`] collects exactly those exposed
//! (site, block) positions. [`audit_partial_dp`] then probes the complementary
//! claim: for positions outside the leak set, swapping one block's offset
//! should shift the transcript distribution by at most an `exp(eps)` factor.
//! The audit is an empirical falsification probe over bucketed transcript
//! signatures, not a proof.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::noise::NoiseMode;
use crate::noise::RngStream;
use crate::noise::StreamId;
use crate::robust::RobustConfig;
use crate::robust::RobustTracker;
use crate::stats::log_ratio_bounds;
use crate::tracking::derive_round_params;
use crate::tracking::ItemLog;
use crate::tracking::Mechanism;
use crate::tracking::ParamsError;
use crate::tracking::StepAction;
use crate::tracking::Tag;
use crate::tracking::Transcript;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("transcript and item log disagree at step {step}")]
    MisalignedLogs { step: u64 },
    #[error("audit target out of range: {0}")]
    BadTarget(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

/// The (round, site, block) positions whose firing offsets the announcements
/// exposed. One entry per update-tagged phase crossing; end-of-round exact
/// broadcasts expose nothing because the round's randomness is discarded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeakSet {
    entries: BTreeSet<(u64, u32, u64)>,
}

impl LeakSet {
    pub fn contains(&self, round: u64, site: u32, block: u64) -> bool {
        self.entries.contains(&(round, site, block))
    }

    pub fn entries(&self) -> &BTreeSet<(u64, u32, u64)> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest number of leaked positions in any single round.
    pub fn max_per_round(&self) -> u64 {
        let mut per_round: HashMap<u64, u64> = HashMap::new();
        for (round, _, _) in &self.entries {
            *per_round.entry(*round).or_default() += 1;
        }
        per_round.values().copied().max().unwrap_or(0)
    }
}

/// Reads the exposed positions off a finished run. For every update record
/// the leaked block is the one whose bit caused the update: the block
/// containing that site's latest item.
pub fn compute_leak_set(transcript: &Transcript, log: &ItemLog) -> Result<LeakSet, AuditError> {
    let deltas: HashMap<u64, u64> =
        log.rounds.iter().filter(|r| !r.bootstrap).map(|r| (r.index, r.delta)).collect();
    let entries = transcript.entries();
    let mut set = LeakSet::default();
    for rec in &log.updates {
        let step = rec.step;
        let entry = entries
            .get(step as usize)
            .ok_or(AuditError::MisalignedLogs { step })?;
        if entry.tag != Tag::Update {
            return Err(AuditError::MisalignedLogs { step });
        }
        if entry.action != (StepAction::Deliver { site: rec.site }) {
            return Err(AuditError::MisalignedLogs { step });
        }
        let delta = *deltas.get(&rec.round).ok_or(AuditError::MisalignedLogs { step })?;
        if delta == 0 || rec.site_count == 0 {
            return Err(AuditError::MisalignedLogs { step });
        }
        let block = (rec.site_count - 1) / delta + 1;
        set.entries.insert((rec.round, rec.site, block));
    }
    Ok(set)
}

/// The server's expected bit fraction as a function of the threshold database:
/// completed blocks each contributed their one bit, and the current block of
/// each site has contributed its bit iff the offset has been reached. Scaled
/// by `m = k * k_prime`, this equals the number of bits actually received.
pub fn query_value(
    thresholds: &[Vec<u64>],
    deliveries: &[u32],
    t: usize,
    delta: u64,
    k_prime: u64,
) -> f64 {
    assert!(delta >= 1 && k_prime >= 1);
    let k = thresholds.len();
    assert!(k >= 1, "need at least one site");
    let mut counts = vec![0u64; k];
    for &site in &deliveries[..t] {
        assert!(site >= 1 && site as usize <= k, "site {site} out of range");
        counts[site as usize - 1] += 1;
    }
    let mut bits = 0u64;
    for (row, &c) in thresholds.iter().zip(&counts) {
        assert_eq!(row.len() as u64, k_prime, "one offset per block");
        let full = (c / delta).min(k_prime);
        bits += full;
        let within = c - full * delta;
        if within > 0 && full < k_prime && row[full as usize] <= within {
            bits += 1;
        }
    }
    bits as f64 / (k as u64 * k_prime) as f64
}

/// Small fixed scenario for the distributional audit: a deterministic
/// round-robin schedule over one pinned threshold database per arm, where the
/// arms differ only in the offset of one target block.
#[derive(Debug, Clone)]
pub struct AuditConfig {
    pub k: u32,
    pub alpha: f64,
    pub beta: f64,
    /// Exact synchronized count the audited round starts from.
    pub n0: u64,
    /// Items delivered per trial (round-robin over sites).
    pub budget: u64,
    pub target_site: u32,
    /// 1-based block index whose offset differs between the arms.
    pub target_block: u64,
    /// Target offset in arm one / arm two. Equal offsets give the
    /// identical-database control.
    pub offset_a: u64,
    pub offset_b: u64,
    pub trials: u64,
    pub seed: u64,
    pub noise: NoiseMode,
    /// Smallest combined event mass that gets a row in the report.
    pub min_count: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            k: 4,
            alpha: 0.1,
            beta: 0.05,
            n0: 2000,
            budget: 90,
            target_site: 1,
            target_block: 5,
            offset_a: 1,
            offset_b: 2,
            trials: 100_000,
            seed: 42,
            noise: NoiseMode::Standard,
            min_count: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditVerdict {
    NoViolation,
    Violation,
    /// Too few surviving trials landed in any event to test the bound.
    Inconclusive,
}

impl fmt::Display for AuditVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditVerdict::NoViolation => write!(f, "no violation"),
            AuditVerdict::Violation => write!(f, "VIOLATION"),
            AuditVerdict::Inconclusive => write!(f, "inconclusive"),
        }
    }
}

/// One bucketed transcript signature: the update steps paired with the
/// announced values divided down to block granularity.
pub type Signature = Vec<(u64, i64)>;

#[derive(Debug, Clone)]
pub struct AuditEventRow {
    pub signature: Signature,
    pub count_a: u64,
    pub count_b: u64,
    /// Plug-in |log(p_a/p_b)| estimate.
    pub point: f64,
    /// Wilson 95% (lower, upper) bounds on |log(p_a/p_b)|.
    pub ci: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    /// Privacy budget the run claims: concentration over phase count.
    pub epsilon: f64,
    pub trials: u64,
    /// Trials per arm that kept the target position unexposed.
    pub surviving: [u64; 2],
    pub distinct_signatures: u64,
    /// Admissible events, most incriminating first.
    pub events: Vec<AuditEventRow>,
    pub max_lower_ci: f64,
    pub verdict: AuditVerdict,
}

fn signature_of(transcript: &Transcript, delta: u64) -> Signature {
    transcript
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.tag == Tag::Update)
        .map(|(step, e)| (step as u64, (e.value / delta as f64).floor() as i64))
        .collect()
}

fn format_signature(sig: &Signature) -> String {
    if sig.is_empty() {
        return "(no update)".into();
    }
    let mut out = String::new();
    for (i, (step, bucket)) in sig.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "t{step}:b{bucket}");
    }
    out
}

/// Runs the robust tracker `trials` times on each arm's database, discards
/// runs whose transcript exposed the target position, buckets the remainder
/// into signatures, and compares per-signature frequencies against the
/// `exp(eps)` bound with Wilson confidence intervals.
pub fn audit_partial_dp(cfg: &AuditConfig) -> Result<AuditReport, AuditError> {
    let params = derive_round_params(cfg.n0, cfg.k, cfg.alpha, cfg.beta)?;
    let delta = params.delta;
    let k_prime = params.k_prime;
    if cfg.target_site < 1 || cfg.target_site > cfg.k {
        return Err(AuditError::BadTarget(format!("site {}", cfg.target_site)));
    }
    if cfg.target_block < 1 || cfg.target_block > k_prime {
        return Err(AuditError::BadTarget(format!("block {}", cfg.target_block)));
    }
    for offset in [cfg.offset_a, cfg.offset_b] {
        if offset < 1 || offset > delta {
            return Err(AuditError::BadTarget(format!("offset {offset}")));
        }
    }
    if cfg.trials == 0 {
        return Err(AuditError::BadTarget("zero trials".into()));
    }

    // One fixed database, shared by the arms up to the target entry. Every
    // offset is pinned: only the Laplace noises vary across trials.
    let base: Vec<Vec<u64>> = (1..=cfg.k)
        .map(|site| {
            let mut srng = RngStream::root(cfg.seed)
                .child(StreamId::Label(0))
                .child(StreamId::Site(site));
            (0..k_prime)
                .map(|_| srng.uniform_threshold(delta).expect("delta >= 1"))
                .collect()
        })
        .collect();
    let mut tables = [base.clone(), base];
    for (table, offset) in tables.iter_mut().zip([cfg.offset_a, cfg.offset_b]) {
        table[cfg.target_site as usize - 1][cfg.target_block as usize - 1] = offset;
    }

    let rcfg = RobustConfig { k: cfg.k, alpha: cfg.alpha, beta: cfg.beta, noise: cfg.noise };
    let run_arm = |arm: u32, trial: u64| -> Option<Signature> {
        let rng = RngStream::root(cfg.seed)
            .child(StreamId::Arm(arm))
            .child(StreamId::Trial(trial))
            .child(StreamId::Mechanism);
        let mut tracker =
            RobustTracker::with_thresholds(rcfg.clone(), cfg.n0, &tables[arm as usize], rng)
                .expect("validated above");
        let mut transcript = Transcript::new(cfg.n0 as f64, cfg.n0);
        for step in 0..cfg.budget {
            let action = StepAction::Deliver { site: (step % cfg.k as u64) as u32 + 1 };
            let out = tracker.step(action);
            transcript.push(action, out.announcement, tracker.n_total());
        }
        let leaks = compute_leak_set(&transcript, tracker.item_log().expect("robust logs items"))
            .expect("transcript and log come from the same run");
        // Only the opening round runs on the pinned database; later rounds
        // redraw, so only a first-round exposure disqualifies the trial.
        if leaks.contains(1, cfg.target_site, cfg.target_block) {
            None
        } else {
            Some(signature_of(&transcript, delta))
        }
    };

    let outcomes: Vec<(Option<Signature>, Option<Signature>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| (run_arm(0, trial), run_arm(1, trial)))
        .collect();

    let mut histogram: HashMap<Signature, [u64; 2]> = HashMap::new();
    let mut surviving = [0u64; 2];
    for (a, b) in outcomes {
        if let Some(sig) = a {
            surviving[0] += 1;
            histogram.entry(sig).or_default()[0] += 1;
        }
        if let Some(sig) = b {
            surviving[1] += 1;
            histogram.entry(sig).or_default()[1] += 1;
        }
    }

    let distinct_signatures = histogram.len() as u64;
    let mut events: Vec<AuditEventRow> = histogram
        .into_iter()
        .filter(|(_, counts)| counts[0] + counts[1] >= cfg.min_count)
        .map(|(signature, [count_a, count_b])| {
            let bounds = log_ratio_bounds(count_a, count_b, cfg.trials);
            AuditEventRow {
                signature,
                count_a,
                count_b,
                point: bounds.point,
                ci: (bounds.lower, bounds.upper),
            }
        })
        .collect();
    events.sort_by(|x, y| {
        y.ci.0
            .total_cmp(&x.ci.0)
            .then((y.count_a + y.count_b).cmp(&(x.count_a + x.count_b)))
            .then(x.signature.cmp(&y.signature))
    });

    let max_lower_ci = events.first().map_or(0.0, |e| e.ci.0);
    let verdict = if events.is_empty() {
        AuditVerdict::Inconclusive
    } else if max_lower_ci > params.eps {
        AuditVerdict::Violation
    } else {
        AuditVerdict::NoViolation
    };
    Ok(AuditReport {
        epsilon: params.eps,
        trials: cfg.trials,
        surviving,
        distinct_signatures,
        events,
        max_lower_ci,
        verdict,
    })
}

impl AuditReport {
    /// Renders the per-event comparison as a fixed-width text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "partial-DP audit: eps = {:.4}, {} trials per arm, surviving {} / {}",
            self.epsilon, self.trials, self.surviving[0], self.surviving[1]
        );
        let _ = writeln!(
            out,
            "{:<34} {:>9} {:>9} {:>10} {:>21}  verdict",
            "event signature", "count_D", "count_D'", "log-ratio", "95% CI"
        );
        let shown = self.events.len().min(40);
        for row in &self.events[..shown] {
            let ci = format!("[{:.4}, {:.4}]", row.ci.0, row.ci.1);
            let flag = if row.ci.0 > self.epsilon { "VIOLATION" } else { "ok" };
            let _ = writeln!(
                out,
                "{:<34} {:>9} {:>9} {:>10.4} {:>21}  {}",
                format_signature(&row.signature),
                row.count_a,
                row.count_b,
                row.point,
                ci,
                flag
            );
        }
        if self.events.len() > shown {
            let _ = writeln!(out, "... {} more events below", self.events.len() - shown);
        }
        let _ = writeln!(
            out,
            "{} distinct signatures; max lower CI {:.4} vs eps {:.4}: {}",
            self.distinct_signatures, self.max_lower_ci, self.epsilon, self.verdict
        );
        out
    }
}
