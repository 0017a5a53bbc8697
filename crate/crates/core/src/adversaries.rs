//! Input schedulers for the two-player tracking game.
//!
//! Each adversary is a deterministic function of the visible transcript plus
//! its own seeded stream: replaying the same transcript yields the same next
//! action. Adversaries see announcements only, never tracker internals, and
//! every one of them stops after a fixed item budget so runs terminate.

use crate::noise::RngStream;
use crate::tracking::StepAction;
use crate::tracking::Tag;
use crate::tracking::Transcript;

pub trait Adversary {
    /// The next delivery given the public history, or `None` once the item
    /// budget is spent.
    fn next_action(&mut self, transcript: &Transcript) -> Option<StepAction>;

    /// Stable name used in CSV rows and CLI parsing.
    fn label(&self) -> String;
}

/// Fixed schedules that ignore announcements entirely.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    RoundRobin,
    SingleSite(u32),
    /// Per-site weights, length k, nonnegative, positive sum.
    Weighted(Vec<f64>),
}

/// Oblivious scheduler: the whole stream could have been written down before
/// the run started.
pub struct ReplayAdversary {
    k: u32,
    budget: u64,
    schedule: Schedule,
    rng: RngStream,
    cumulative: Vec<f64>,
}

impl ReplayAdversary {
    pub fn new(k: u32, budget: u64, schedule: Schedule, rng: RngStream) -> Self {
        assert!(k >= 1, "need at least one site");
        if let Schedule::SingleSite(site) = schedule {
            assert!(site >= 1 && site <= k, "site {site} out of range 1..={k}");
        }
        let cumulative = match &schedule {
            Schedule::Weighted(weights) => {
                assert_eq!(weights.len(), k as usize, "one weight per site");
                assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));
                let total: f64 = weights.iter().sum();
                assert!(total > 0.0, "weights must have positive sum");
                let mut acc = 0.0;
                weights.iter().map(|w| { acc += w / total; acc }).collect()
            }
            _ => Vec::new(),
        };
        Self { k, budget, schedule, rng, cumulative }
    }
}

impl Adversary for ReplayAdversary {
    fn next_action(&mut self, transcript: &Transcript) -> Option<StepAction> {
        let step = transcript.len() as u64;
        if step >= self.budget {
            return None;
        }
        let site = match &self.schedule {
            Schedule::RoundRobin => (step % self.k as u64) as u32 + 1,
            Schedule::SingleSite(site) => *site,
            Schedule::Weighted(_) => {
                let u = self.rng.next_unit_f64();
                let idx = self
                    .cumulative
                    .iter()
                    .position(|&edge| u < edge)
                    .unwrap_or(self.k as usize - 1);
                idx as u32 + 1
            }
        };
        Some(StepAction::Deliver { site })
    }

    fn label(&self) -> String {
        match &self.schedule {
            Schedule::RoundRobin => "replay:round_robin".into(),
            Schedule::SingleSite(site) => format!("replay:single_site:{site}"),
            Schedule::Weighted(_) => "replay:weighted".into(),
        }
    }
}

/// Adaptive scheduler that abandons a site the moment one of its blocks
/// fires. Against a tracker that announces on every bit this leaves each
/// fired block under-filled, so the announced total over-credits every visited
/// block by the unfilled remainder.
pub struct StopOnFireAdversary {
    k: u32,
    budget: u64,
    scanned: usize,
    updates_seen: u64,
}

impl StopOnFireAdversary {
    pub fn new(k: u32, budget: u64) -> Self {
        assert!(k >= 1, "need at least one site");
        Self { k, budget, scanned: 0, updates_seen: 0 }
    }
}

impl Adversary for StopOnFireAdversary {
    fn next_action(&mut self, transcript: &Transcript) -> Option<StepAction> {
        let entries = transcript.entries();
        if entries.len() as u64 >= self.budget {
            return None;
        }
        // Incremental scan; the target is a pure function of the transcript.
        for entry in &entries[self.scanned..] {
            if entry.tag == Tag::Update {
                self.updates_seen += 1;
            }
        }
        self.scanned = entries.len();
        let site = (self.updates_seen % self.k as u64) as u32 + 1;
        Some(StepAction::Deliver { site })
    }

    fn label(&self) -> String {
        "stop_on_fire".into()
    }
}

/// Adaptive scheduler that keeps hammering the site whose delivery most
/// recently coincided with an update, concentrating items where a threshold
/// was just revealed. Round-robin until the first update.
pub struct UpdateChaserAdversary {
    k: u32,
    budget: u64,
    scanned: usize,
    target: Option<u32>,
}

impl UpdateChaserAdversary {
    pub fn new(k: u32, budget: u64) -> Self {
        assert!(k >= 1, "need at least one site");
        Self { k, budget, scanned: 0, target: None }
    }
}

impl Adversary for UpdateChaserAdversary {
    fn next_action(&mut self, transcript: &Transcript) -> Option<StepAction> {
        let entries = transcript.entries();
        if entries.len() as u64 >= self.budget {
            return None;
        }
        for entry in &entries[self.scanned..] {
            if entry.tag == Tag::Update {
                if let StepAction::Deliver { site } = entry.action {
                    self.target = Some(site);
                }
            }
        }
        self.scanned = entries.len();
        let site = self
            .target
            .unwrap_or((entries.len() as u64 % self.k as u64) as u32 + 1);
        Some(StepAction::Deliver { site })
    }

    fn label(&self) -> String {
        "update_chaser".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::RngStream;
    use crate::noise::StreamId;
    use crate::tracking::Announcement;

    fn sites(adv: &mut dyn Adversary, transcript: &mut Transcript, n: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for _ in 0..n {
            let Some(StepAction::Deliver { site }) = adv.next_action(transcript) else {
                break;
            };
            out.push(site);
            // echo a quiet step so the history advances
            transcript.push(
                StepAction::Deliver { site },
                Announcement::no_change(0.0),
                transcript.last_count() + 1,
            );
        }
        out
    }

    fn rng() -> RngStream {
        RngStream::root(400).child(StreamId::Adversary)
    }

    #[test]
    fn replay_round_robin_cycles_and_stops() {
        let mut adv = ReplayAdversary::new(3, 6, Schedule::RoundRobin, rng());
        let mut t = Transcript::new(0.0, 0);
        assert_eq!(sites(&mut adv, &mut t, 10), vec![1, 2, 3, 1, 2, 3]);
        assert_eq!(adv.next_action(&t), None);
        assert_eq!(adv.label(), "replay:round_robin");
    }

    #[test]
    fn replay_single_site_repeats_one_site() {
        let mut adv = ReplayAdversary::new(4, 4, Schedule::SingleSite(2), rng());
        let mut t = Transcript::new(0.0, 0);
        assert_eq!(sites(&mut adv, &mut t, 10), vec![2, 2, 2, 2]);
        assert_eq!(adv.label(), "replay:single_site:2");
    }

    #[test]
    fn replay_degenerate_weights_hit_one_site() {
        let w = Schedule::Weighted(vec![1.0, 0.0, 0.0]);
        let mut adv = ReplayAdversary::new(3, 8, w, rng());
        let mut t = Transcript::new(0.0, 0);
        assert_eq!(sites(&mut adv, &mut t, 8), vec![1; 8]);
    }

    #[test]
    fn replay_weighted_frequencies_track_weights() {
        let w = Schedule::Weighted(vec![1.0, 3.0]);
        let mut adv = ReplayAdversary::new(2, 20_000, w, rng());
        let mut t = Transcript::new(0.0, 0);
        let drawn = sites(&mut adv, &mut t, 20_000);
        let ones = drawn.iter().filter(|&&s| s == 1).count() as f64;
        let frac = ones / drawn.len() as f64;
        assert!((frac - 0.25).abs() < 0.02, "site 1 fraction {frac}");
    }

    #[test]
    fn stop_on_fire_advances_on_each_update() {
        let mut adv = StopOnFireAdversary::new(3, 100);
        let mut t = Transcript::new(0.0, 0);
        // no updates yet: stays on site 1
        assert_eq!(sites(&mut adv, &mut t, 2), vec![1, 1]);
        t.push(StepAction::Deliver { site: 1 }, Announcement::update(5.0), 3);
        assert_eq!(sites(&mut adv, &mut t, 2), vec![2, 2]);
        t.push(StepAction::Deliver { site: 2 }, Announcement::update(9.0), 6);
        assert_eq!(sites(&mut adv, &mut t, 1), vec![3]);
        t.push(StepAction::Deliver { site: 3 }, Announcement::update(12.0), 8);
        // wraps back around after k updates
        assert_eq!(sites(&mut adv, &mut t, 1), vec![1]);
    }

    #[test]
    fn update_chaser_locks_onto_last_updating_site() {
        let mut adv = UpdateChaserAdversary::new(3, 100);
        let mut t = Transcript::new(0.0, 0);
        // fallback is round-robin while no update exists
        assert_eq!(sites(&mut adv, &mut t, 3), vec![1, 2, 3]);
        t.push(StepAction::Deliver { site: 2 }, Announcement::update(4.0), 4);
        assert_eq!(sites(&mut adv, &mut t, 3), vec![2, 2, 2]);
        t.push(StepAction::Deliver { site: 3 }, Announcement::update(9.0), 8);
        assert_eq!(sites(&mut adv, &mut t, 2), vec![3, 3]);
    }

    #[test]
    fn adaptive_adversaries_are_pure_in_the_transcript() {
        // Feeding the same history to a fresh instance gives the same move
        // as the incrementally updated one.
        let mut t = Transcript::new(0.0, 0);
        let mut warm_fire = StopOnFireAdversary::new(4, 1000);
        let mut warm_chase = UpdateChaserAdversary::new(4, 1000);
        let mut count = 0u64;
        for step in 0..50 {
            let _ = warm_fire.next_action(&t);
            let _ = warm_chase.next_action(&t);
            count += 1;
            let ann = if step % 7 == 3 {
                Announcement::update(count as f64)
            } else {
                Announcement::no_change(0.0)
            };
            t.push(StepAction::Deliver { site: (step % 4) as u32 + 1 }, ann, count);
        }
        let mut cold_fire = StopOnFireAdversary::new(4, 1000);
        let mut cold_chase = UpdateChaserAdversary::new(4, 1000);
        assert_eq!(warm_fire.next_action(&t), cold_fire.next_action(&t));
        assert_eq!(warm_chase.next_action(&t), cold_chase.next_action(&t));
    }
}
