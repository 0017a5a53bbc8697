//! Two classical trackers that bracket the noise-hardened one.
//!
//! The deterministic tracker reports exact site counts on a geometric
//! schedule: accurate against any scheduler, but it spends a word per report
//! and its word count is what the randomized protocols try to beat. The
//! oblivious tracker samples one bit per block like the robust tracker, but
//! announces on every bit and never rotates its parameters inside a round,
//! so an adaptive scheduler that watches the announcements can starve it.

use crate::noise::RngStream;
use crate::noise::StreamId;
use crate::tracking::phase_count;
use crate::tracking::Announcement;
use crate::tracking::CommLedger;
use crate::tracking::Mechanism;
use crate::tracking::ParamsError;
use crate::tracking::StepAction;
use crate::tracking::StepOutcome;

/// Exact tracker: each site reports its count when it first becomes 1 or
/// grows by a (1 + alpha) factor over the last reported value. The server
/// announces the sum of last-reported counts, which undershoots the truth by
/// at most alpha * N + k.
pub struct DeterministicTracker {
    alpha: f64,
    counts: Vec<u64>,
    last_reported: Vec<u64>,
    n_total: u64,
    announced: f64,
    ledger: CommLedger,
}

impl DeterministicTracker {
    pub fn new(k: u32, alpha: f64) -> Result<Self, ParamsError> {
        if k == 0 {
            return Err(ParamsError::BadK(k));
        }
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(ParamsError::BadAlpha(alpha));
        }
        Ok(Self {
            alpha,
            counts: vec![0; k as usize],
            last_reported: vec![0; k as usize],
            n_total: 0,
            announced: 0.0,
            ledger: CommLedger::default(),
        })
    }

    pub fn k(&self) -> u32 {
        self.counts.len() as u32
    }

    fn estimate(&self) -> u64 {
        self.last_reported.iter().sum()
    }
}

impl Mechanism for DeterministicTracker {
    fn step(&mut self, action: StepAction) -> StepOutcome {
        let site = match action {
            StepAction::Deliver { site } => site,
            StepAction::Skip => {
                return StepOutcome {
                    announcement: Announcement::no_change(self.announced),
                    interim: None,
                    bit_update: false,
                    round_ended: false,
                }
            }
        };
        assert!(
            site >= 1 && site <= self.k(),
            "site id {site} out of range 1..={}",
            self.k()
        );
        let i = (site - 1) as usize;
        self.counts[i] += 1;
        self.n_total += 1;
        let c = self.counts[i];
        let last = self.last_reported[i];
        let due = c == 1 || (c as f64) >= (1.0 + self.alpha) * (last as f64);
        if due {
            self.ledger.site_to_server += 1;
            self.last_reported[i] = c;
            self.announced = self.estimate() as f64;
            StepOutcome {
                announcement: Announcement::update(self.announced),
                interim: None,
                bit_update: false,
                round_ended: false,
            }
        } else {
            StepOutcome {
                announcement: Announcement::no_change(self.announced),
                interim: None,
                bit_update: false,
                round_ended: false,
            }
        }
    }

    fn n_total(&self) -> u64 {
        self.n_total
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    fn rounds_completed(&self) -> u64 {
        0
    }

    fn label(&self) -> &'static str {
        "deterministic"
    }
}

struct OblivSite {
    count: u64,
    threshold: u64,
    rng: RngStream,
}

/// Block-sampling tracker with a fixed within-round block size and an
/// announcement on every received bit. Block sizes use a divisor constant
/// c0 instead of the concentration term, so blocks are larger and bits
/// rarer; the price is that each bit moves the public estimate by a full
/// block and the bit timing is exposed to the scheduler.
pub struct ObliviousTracker {
    k: u32,
    alpha: f64,
    c0: f64,
    rng: RngStream,
    n0: u64,
    delta: u64,
    bits: u64,
    sites: Vec<OblivSite>,
    round_index: u64,
    rounds_completed: u64,
    n_total: u64,
    announced: f64,
    ledger: CommLedger,
}

impl ObliviousTracker {
    pub fn new(k: u32, alpha: f64, c0: f64, rng: RngStream) -> Result<Self, ParamsError> {
        Self::starting_at(k, alpha, c0, 0, rng)
    }

    /// Begin already synchronized at an exact total of `n0`.
    pub fn starting_at(
        k: u32,
        alpha: f64,
        c0: f64,
        n0: u64,
        rng: RngStream,
    ) -> Result<Self, ParamsError> {
        if k == 0 {
            return Err(ParamsError::BadK(k));
        }
        if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
            return Err(ParamsError::BadAlpha(alpha));
        }
        if !c0.is_finite() || c0 <= 0.0 {
            return Err(ParamsError::BadAlpha(c0));
        }
        let mut tracker = Self {
            k,
            alpha,
            c0,
            rng,
            n0,
            delta: 1,
            bits: 0,
            sites: Vec::new(),
            round_index: 1,
            rounds_completed: 0,
            n_total: n0,
            announced: n0 as f64,
            ledger: CommLedger::default(),
        };
        tracker.start_round();
        Ok(tracker)
    }

    pub fn delta(&self) -> u64 {
        self.delta
    }

    pub fn n0(&self) -> u64 {
        self.n0
    }

    fn block_size(&self) -> u64 {
        let s = phase_count(self.k) as f64;
        let raw = (self.alpha * self.n0 as f64 / (self.c0 * s)).floor();
        (raw as u64).max(1)
    }

    fn start_round(&mut self) {
        self.delta = self.block_size();
        self.bits = 0;
        let round_rng = self.rng.child(StreamId::Round(self.round_index));
        self.sites = (1..=self.k)
            .map(|i| {
                let mut rng = round_rng.child(StreamId::Site(i));
                let threshold = rng
                    .uniform_threshold(self.delta)
                    .expect("block size is always at least 1");
                OblivSite {
                    count: 0,
                    threshold,
                    rng,
                }
            })
            .collect();
    }
}

impl Mechanism for ObliviousTracker {
    fn step(&mut self, action: StepAction) -> StepOutcome {
        let site = match action {
            StepAction::Deliver { site } => site,
            StepAction::Skip => {
                return StepOutcome {
                    announcement: Announcement::no_change(self.announced),
                    interim: None,
                    bit_update: false,
                    round_ended: false,
                }
            }
        };
        let k = self.sites.len() as u32;
        assert!(site >= 1 && site <= k, "site id {site} out of range 1..={k}");
        let i = (site - 1) as usize;
        self.n_total += 1;
        self.sites[i].count += 1;
        let c = self.sites[i].count;
        let offset = (c - 1) % self.delta + 1;
        if offset == 1 && c > 1 {
            // entering a fresh block: draw its threshold lazily
            let delta = self.delta;
            let s = &mut self.sites[i];
            s.threshold = s
                .rng
                .uniform_threshold(delta)
                .expect("block size is always at least 1");
        }
        if offset != self.sites[i].threshold {
            return StepOutcome {
                announcement: Announcement::no_change(self.announced),
                interim: None,
                bit_update: false,
                round_ended: false,
            };
        }
        // bit received: credit a whole block and tell everyone
        self.ledger.site_to_server += 1;
        self.bits += 1;
        let estimate = self.bits * self.delta + self.n0;
        if estimate >= (2 * self.n0).max(self.n0 + 1) {
            // estimate has doubled: resynchronize on exact counts
            let interim = Announcement::update(estimate as f64);
            let k64 = k as u64;
            self.ledger.server_to_site += k64;
            self.ledger.site_to_server += k64;
            self.ledger.broadcast += k64;
            self.n0 = self.n_total;
            self.rounds_completed += 1;
            self.round_index += 1;
            self.start_round();
            self.announced = self.n_total as f64;
            StepOutcome {
                announcement: Announcement::update(self.announced),
                interim: Some(interim),
                bit_update: true,
                round_ended: true,
            }
        } else {
            self.announced = estimate as f64;
            StepOutcome {
                announcement: Announcement::update(self.announced),
                interim: None,
                bit_update: true,
                round_ended: false,
            }
        }
    }

    fn n_total(&self) -> u64 {
        self.n_total
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    fn rounds_completed(&self) -> u64 {
        self.rounds_completed
    }

    fn label(&self) -> &'static str {
        "oblivious"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::RngStream;

    fn deliver(site: u32) -> StepAction {
        StepAction::Deliver { site }
    }

    #[test]
    fn deterministic_reports_on_geometric_growth() {
        let mut det = DeterministicTracker::new(1, 0.999).unwrap();
        let mut reported = Vec::new();
        for _ in 0..8 {
            let out = det.step(deliver(1));
            if out.announcement.is_update() {
                reported.push(out.announcement.value as u64);
            }
        }
        // with alpha near 1 the single site reports at counts 1, 2, 4, 8
        assert_eq!(reported, vec![1, 2, 4, 8]);
        assert_eq!(det.ledger().site_to_server, 4);
        assert_eq!(det.ledger().total(), 4);
    }

    #[test]
    fn deterministic_reports_every_item_at_half_growth_start() {
        let mut det = DeterministicTracker::new(1, 0.5).unwrap();
        let mut reported = Vec::new();
        for _ in 0..3 {
            let out = det.step(deliver(1));
            if out.announcement.is_update() {
                reported.push(out.announcement.value as u64);
            }
        }
        // 2 >= 1.5 * 1 and 3 >= 1.5 * 2, so every early count is reported
        assert_eq!(reported, vec![1, 2, 3]);
    }

    #[test]
    fn deterministic_error_never_exceeds_alpha_n_plus_k() {
        let alphas = [0.1, 0.3, 0.7];
        for (ai, &alpha) in alphas.iter().enumerate() {
            let k = 5u32;
            let mut det = DeterministicTracker::new(k, alpha).unwrap();
            let mut rng = RngStream::root(900 + ai as u64);
            let mut announced = 0.0f64;
            for _ in 0..5000 {
                let site = 1 + (rng.next_u64() % k as u64) as u32;
                let out = det.step(deliver(site));
                announced = out.announcement.value;
                let n = det.n_total() as f64;
                assert!(announced <= n, "estimate must undershoot");
                assert!(
                    n - announced <= alpha * n + k as f64,
                    "alpha={alpha} n={n} announced={announced}"
                );
            }
            assert!(announced > 0.0);
        }
    }

    #[test]
    fn oblivious_with_unit_blocks_is_exact() {
        // cold start keeps delta = 1 until n0 reaches 160 at these settings,
        // so every item fires its block's only offset and every announcement
        // is exact
        let rng = RngStream::root(31);
        let mut obl = ObliviousTracker::new(3, 0.2, 8.0, rng).unwrap();
        for step in 0..160u64 {
            let out = obl.step(deliver(1 + (step % 3) as u32));
            assert!(out.announcement.is_update());
            assert_eq!(out.announcement.value, obl.n_total() as f64);
        }
        assert_eq!(obl.n_total(), 160);
        assert!(obl.rounds_completed() >= 5, "doubling rounds must stack up");
    }

    #[test]
    fn oblivious_first_bit_credits_a_full_block() {
        let rng = RngStream::root(77);
        let mut obl = ObliviousTracker::starting_at(1, 0.5, 8.0, 1600, rng).unwrap();
        let delta = obl.delta();
        assert_eq!(delta, 100);
        let mut fired_at = None;
        for j in 1..=delta {
            let out = obl.step(deliver(1));
            if out.announcement.is_update() {
                fired_at = Some(j);
                assert_eq!(out.announcement.value, (1600 + delta) as f64);
                break;
            }
        }
        let j = fired_at.expect("one bit per block is guaranteed");
        // announced total over-credits the open block by delta - j items
        assert_eq!(1600 + delta - obl.n_total(), delta - j);
    }

    #[test]
    fn oblivious_round_end_announces_exact_total() {
        let rng = RngStream::root(5);
        let mut obl = ObliviousTracker::starting_at(4, 0.4, 8.0, 400, rng).unwrap();
        assert_eq!(obl.delta(), 10);
        let before = obl.ledger().total();
        let mut steps = 0u64;
        loop {
            let out = obl.step(deliver(1 + (steps % 4) as u32));
            steps += 1;
            if out.round_ended {
                let interim = out.interim.expect("round end collapses two updates");
                assert!(interim.value >= 800.0, "estimate must reach the doubling bar");
                assert_eq!(out.announcement.value, obl.n_total() as f64);
                break;
            }
            assert!(steps < 2000, "round must end once the estimate doubles");
        }
        assert_eq!(obl.rounds_completed(), 1);
        assert_eq!(obl.n0(), obl.n_total());
        // resync pays one collect, one notify, and one broadcast word per site
        let sync_words = obl.ledger().total() - before;
        assert!(sync_words >= 12, "sync words {sync_words} must include 3k");
    }

    #[test]
    fn oblivious_block_size_tracks_round_growth() {
        let rng = RngStream::root(12);
        let mut obl = ObliviousTracker::starting_at(4, 0.4, 8.0, 400, rng).unwrap();
        let mut last_n0 = obl.n0();
        let mut last_delta = obl.delta();
        let mut step = 0u64;
        while obl.rounds_completed() < 4 {
            obl.step(deliver(1 + (step % 4) as u32));
            step += 1;
            if obl.n0() != last_n0 {
                assert!(obl.n0() >= 2 * last_n0 - obl.delta() * 4);
                assert!(obl.delta() >= last_delta);
                last_n0 = obl.n0();
                last_delta = obl.delta();
            }
            assert!(step < 100_000);
        }
    }
}
