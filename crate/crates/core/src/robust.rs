//! The noise-hardened tracker.
//!
//! Each site chops its per-round stream into blocks of `delta` items and sends
//! the server a single bit per block, at an offset drawn uniformly at round
//! start. The server counts bits per phase against a Laplace-noised threshold;
//! when a phase fills, it feeds the phase count into a noisy prefix-sum tree
//! and publishes the rescaled estimate. After `s` phases (or when any site
//! exhausts its block budget `k_prime`) everyone resynchronizes on the exact
//! count and the round restarts with fresh randomness. Announcements are
//! therefore a very lossy, noise-smeared function of item placement, which is
//! what defeats transcript-adaptive scheduling.

use crate::binary_mechanism::BinaryMechanism;
use crate::noise::{NoiseMode, RngStream, StreamId};
use crate::tracking::{
    check_common, derive_round_params, Announcement, CommLedger, ItemLog, Mechanism, ParamsError,
    RoundInfo, RoundParams, StepAction, StepOutcome, UpdateRecord,
};

#[derive(Debug, Clone)]
pub struct RobustConfig {
    pub k: u32,
    pub alpha: f64,
    /// Per-round failure budget, see [`crate::tracking::derive_global_beta`].
    pub beta: f64,
    pub noise: NoiseMode,
}

struct SiteState {
    count: u64,
    /// Per-block firing offsets, all `k_prime` drawn at round start.
    thresholds: Vec<u64>,
}

struct ServerState {
    phase: u32,
    phase_bits: u64,
    t_hat: f64,
    bm: BinaryMechanism,
    t_hat_rng: RngStream,
    bm_rng: RngStream,
}

enum State {
    /// Exact counting until the total is large enough for sampled rounds.
    Bootstrap,
    Active { params: RoundParams, sites: Vec<SiteState>, server: Box<ServerState> },
}

pub struct RobustTracker {
    cfg: RobustConfig,
    rng: RngStream,
    state: State,
    n_total: u64,
    announced: f64,
    ledger: CommLedger,
    rounds_completed: u64,
    round_index: u64,
    steps: u64,
    log: ItemLog,
    /// (site, block, offset) overrides applied after each round's draw.
    pins: Vec<(u32, u64, u64)>,
}

impl RobustTracker {
    /// Fresh tracker at count zero, counting exactly until sampled rounds
    /// become possible.
    pub fn new(cfg: RobustConfig, rng: RngStream) -> Result<Self, ParamsError> {
        check_common(cfg.k, cfg.alpha, cfg.beta)?;
        let mut t = RobustTracker {
            cfg,
            rng,
            state: State::Bootstrap,
            n_total: 0,
            announced: 0.0,
            ledger: CommLedger::default(),
            rounds_completed: 0,
            round_index: 0,
            steps: 0,
            log: ItemLog::default(),
            pins: Vec::new(),
        };
        t.log.rounds.push(RoundInfo {
            index: 0,
            n0: 0,
            delta: 0,
            s: 0,
            k_prime: 0,
            bootstrap: true,
            completed: false,
            ended_by_signal: false,
            phase_bits: Vec::new(),
        });
        Ok(t)
    }

    /// Tracker already synchronized at exact count `n0`, with round 1 live.
    /// No communication is charged for the assumed initial sync.
    pub fn starting_at(cfg: RobustConfig, n0: u64, rng: RngStream) -> Result<Self, ParamsError> {
        let params = derive_round_params(n0, cfg.k, cfg.alpha, cfg.beta)?;
        let mut t = RobustTracker {
            cfg,
            rng,
            state: State::Bootstrap,
            n_total: n0,
            announced: n0 as f64,
            ledger: CommLedger::default(),
            rounds_completed: 0,
            round_index: 1,
            steps: 0,
            log: ItemLog::default(),
            pins: Vec::new(),
        };
        t.state = t.build_round(params);
        Ok(t)
    }

    /// Tracker synchronized at `n0` with every first-round firing offset fixed
    /// by `table` (outer index site - 1, inner index block - 1). Later rounds
    /// draw fresh offsets as usual. The privacy audit uses this to compare
    /// runs on explicitly chosen threshold databases.
    pub fn with_thresholds(
        cfg: RobustConfig,
        n0: u64,
        table: &[Vec<u64>],
        rng: RngStream,
    ) -> Result<Self, ParamsError> {
        let mut t = Self::starting_at(cfg, n0, rng)?;
        let (delta, k_prime, k) = {
            let p = t.params().expect("round 1 is live");
            (p.delta, p.k_prime, p.k)
        };
        assert_eq!(table.len(), k as usize, "one offset row per site");
        if let State::Active { sites, .. } = &mut t.state {
            for (site, row) in sites.iter_mut().zip(table) {
                assert_eq!(row.len() as u64, k_prime, "one offset per block");
                assert!(row.iter().all(|&r| r >= 1 && r <= delta), "offset outside block");
                site.thresholds.clone_from(row);
            }
        }
        Ok(t)
    }

    /// Forces one site's firing offset for one block, in the current round and
    /// every later one. Used by the privacy audit to fix a threshold database.
    pub fn pin_threshold(&mut self, site: u32, block: u64, offset: u64) {
        assert!(site >= 1 && site <= self.cfg.k, "site out of range");
        assert!(block >= 1, "blocks are 1-based");
        self.pins.push((site, block, offset));
        if let State::Active { params, sites, .. } = &mut self.state {
            assert!(offset >= 1 && offset <= params.delta, "offset outside block");
            if block <= params.k_prime {
                sites[site as usize - 1].thresholds[block as usize - 1] = offset;
            }
        }
    }

    pub fn in_bootstrap(&self) -> bool {
        matches!(self.state, State::Bootstrap)
    }

    pub fn params(&self) -> Option<&RoundParams> {
        match &self.state {
            State::Active { params, .. } => Some(params),
            State::Bootstrap => None,
        }
    }

    pub fn site_thresholds(&self, site: u32) -> Option<&[u64]> {
        match &self.state {
            State::Active { sites, .. } => {
                sites.get(site as usize - 1).map(|s| s.thresholds.as_slice())
            }
            State::Bootstrap => None,
        }
    }

    /// Bits the server has received in the current round.
    pub fn round_bits(&self) -> u64 {
        let open: u64 = self.log.rounds.last().map_or(0, |r| r.phase_bits.iter().sum());
        match &self.state {
            State::Active { server, .. } => open + server.phase_bits,
            State::Bootstrap => 0,
        }
    }

    fn build_round(&mut self, params: RoundParams) -> State {
        let round_rng = self.rng.child(StreamId::Round(self.round_index));
        let mut sites = Vec::with_capacity(params.k as usize);
        for i in 1..=params.k {
            let mut srng = round_rng.child(StreamId::Site(i));
            let thresholds = (0..params.k_prime)
                .map(|_| srng.uniform_threshold(params.delta).expect("delta >= 1"))
                .collect();
            sites.push(SiteState { count: 0, thresholds });
        }
        for &(site, block, offset) in &self.pins {
            assert!(offset >= 1 && offset <= params.delta, "pin outside block");
            if site <= params.k && block <= params.k_prime {
                sites[site as usize - 1].thresholds[block as usize - 1] = offset;
            }
        }
        let server_rng = round_rng.child(StreamId::Server);
        let mut t_hat_rng = server_rng.child(StreamId::PhaseNoise);
        let bm_rng = server_rng.child(StreamId::TreeNoise);
        let bm = BinaryMechanism::new(params.s as u64, params.eps / 4.0, self.cfg.noise)
            .expect("phase count and budget are valid");
        let t_hat = params.t
            + t_hat_rng.laplace(4.0 / params.eps, self.cfg.noise).expect("positive scale");
        self.log.rounds.push(RoundInfo {
            index: self.round_index,
            n0: params.n0,
            delta: params.delta,
            s: params.s,
            k_prime: params.k_prime,
            bootstrap: false,
            completed: false,
            ended_by_signal: false,
            phase_bits: Vec::new(),
        });
        State::Active {
            params,
            sites,
            server: Box::new(ServerState { phase: 1, phase_bits: 0, t_hat, bm, t_hat_rng, bm_rng }),
        }
    }

    /// Exact resynchronization: collect counters, broadcast the fresh start
    /// count, and open the next round. Returns the exact total.
    fn end_round(&mut self, by_signal: bool) -> u64 {
        let (exact, partial_bits) = match &self.state {
            State::Active { params, sites, server } => {
                let sum: u64 = sites.iter().map(|s| s.count).sum();
                (params.n0 + sum, server.phase_bits)
            }
            State::Bootstrap => unreachable!("no round to end"),
        };
        debug_assert_eq!(exact, self.n_total);
        let k = self.cfg.k as u64;
        self.ledger.server_to_site += k;
        self.ledger.site_to_server += k;
        self.ledger.broadcast += k;
        let info = self.log.rounds.last_mut().expect("open round logged");
        info.completed = true;
        info.ended_by_signal = by_signal;
        if by_signal && partial_bits > 0 {
            info.phase_bits.push(partial_bits);
        }
        self.rounds_completed += 1;
        self.round_index += 1;
        let params = derive_round_params(exact, self.cfg.k, self.cfg.alpha, self.cfg.beta)
            .expect("the total only grows, so sampled rounds stay possible");
        self.state = self.build_round(params);
        self.announced = exact as f64;
        exact
    }

    fn quiet(&self) -> StepOutcome {
        StepOutcome {
            announcement: Announcement::no_change(self.announced),
            interim: None,
            bit_update: false,
            round_ended: false,
        }
    }

    fn bootstrap_step(&mut self) -> StepOutcome {
        self.n_total += 1;
        self.ledger.site_to_server += 1;
        self.announced = self.n_total as f64;
        if let Ok(params) =
            derive_round_params(self.n_total, self.cfg.k, self.cfg.alpha, self.cfg.beta)
        {
            let info = self.log.rounds.last_mut().expect("bootstrap segment logged");
            info.completed = true;
            // Sites need the start count and block size before sampling.
            self.ledger.broadcast += self.cfg.k as u64;
            self.round_index = 1;
            self.state = self.build_round(params);
        }
        StepOutcome {
            announcement: Announcement::update(self.announced),
            interim: None,
            bit_update: false,
            round_ended: false,
        }
    }

    fn active_step(&mut self, site: u32) -> StepOutcome {
        let step_index = self.steps - 1;
        let (delta, k_prime, s, t, eps, n0) = match &self.state {
            State::Active { params, .. } => {
                (params.delta, params.k_prime, params.s, params.t, params.eps, params.n0)
            }
            State::Bootstrap => unreachable!(),
        };
        self.n_total += 1;
        let (count, fired) = match &mut self.state {
            State::Active { sites, .. } => {
                let st = &mut sites[site as usize - 1];
                st.count += 1;
                let c = st.count;
                let block = (c - 1) / delta + 1;
                if block > k_prime {
                    (c, None)
                } else {
                    let offset = (c - 1) % delta + 1;
                    (c, Some(offset == st.thresholds[block as usize - 1]))
                }
            }
            State::Bootstrap => unreachable!(),
        };
        match fired {
            None => {
                // Block budget exhausted: the site signals, everyone resyncs.
                self.ledger.site_to_server += 1;
                let exact = self.end_round(true);
                StepOutcome {
                    announcement: Announcement::update(exact as f64),
                    interim: None,
                    bit_update: false,
                    round_ended: true,
                }
            }
            Some(false) => self.quiet(),
            Some(true) => {
                self.ledger.site_to_server += 1;
                let (crossed, phase_bits) = match &mut self.state {
                    State::Active { server, .. } => {
                        server.phase_bits += 1;
                        (server.phase_bits as f64 >= server.t_hat, server.phase_bits)
                    }
                    State::Bootstrap => unreachable!(),
                };
                if !crossed {
                    return self.quiet();
                }
                let estimate = match &mut self.state {
                    State::Active { server, .. } => {
                        let released = server
                            .bm
                            .feed(phase_bits as f64, &mut server.bm_rng)
                            .expect("one feed per phase fits capacity");
                        (released * delta as f64 + n0 as f64).max(0.0)
                    }
                    State::Bootstrap => unreachable!(),
                };
                self.log.updates.push(UpdateRecord {
                    step: step_index,
                    round: self.round_index,
                    site,
                    site_count: count,
                });
                self.log
                    .rounds
                    .last_mut()
                    .expect("open round logged")
                    .phase_bits
                    .push(phase_bits);
                let last_phase = match &mut self.state {
                    State::Active { server, .. } => {
                        if server.phase == s {
                            true
                        } else {
                            server.phase += 1;
                            server.phase_bits = 0;
                            server.t_hat = t
                                + server
                                    .t_hat_rng
                                    .laplace(4.0 / eps, self.cfg.noise)
                                    .expect("positive scale");
                            false
                        }
                    }
                    State::Bootstrap => unreachable!(),
                };
                if last_phase {
                    let exact = self.end_round(false);
                    StepOutcome {
                        announcement: Announcement::update(exact as f64),
                        interim: Some(Announcement::update(estimate)),
                        bit_update: true,
                        round_ended: true,
                    }
                } else {
                    self.announced = estimate;
                    StepOutcome {
                        announcement: Announcement::update(estimate),
                        interim: None,
                        bit_update: true,
                        round_ended: false,
                    }
                }
            }
        }
    }
}

impl Mechanism for RobustTracker {
    fn step(&mut self, action: StepAction) -> StepOutcome {
        self.steps += 1;
        match action {
            StepAction::Skip => self.quiet(),
            StepAction::Deliver { site } => {
                assert!(site >= 1 && site <= self.cfg.k, "site out of range");
                match self.state {
                    State::Bootstrap => self.bootstrap_step(),
                    State::Active { .. } => self.active_step(site),
                }
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

    fn item_log(&self) -> Option<&ItemLog> {
        Some(&self.log)
    }

    fn label(&self) -> &'static str {
        "robust"
    }
}

/// Bits a lone site with block size `delta` emits over `n_items` items,
/// thresholds drawn lazily per block. The core sampling estimator, exposed
/// for direct statistical tests.
pub fn site_bit_count(n_items: u64, delta: u64, rng: &mut RngStream) -> u64 {
    let mut bits = 0;
    let mut threshold = 0;
    for c in 1..=n_items {
        let offset = (c - 1) % delta + 1;
        if offset == 1 {
            threshold = rng.uniform_threshold(delta).expect("delta >= 1");
        }
        if offset == threshold {
            bits += 1;
        }
    }
    bits
}
