//! Deterministic multi-agent world. Agents move on synthetic trajectories,
//! swap TCNs when within the proximity radius and run the full device loop
//! against an in-process back end. An omniscient ledger of true positions
//! and co-locations provides the ground truth for the metrics.

mod output;
pub mod scenario;

use std::collections::BTreeSet;
use std::sync::Arc;

use diary_core::trace::SECONDS_PER_DAY;
use diary_core::{
    day_of, distance_to_polygon, validate_cta, BuildParams, CallToAction, ExposureChannel, GeoPoint, Interval,
    KnownLocation, LocalProjection, LocationSample, RawCta, StayPointConfig, Tcn,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{random_identity, AgentConfig, DeviceAgent};
use crate::backend::{AuthorityAccount, AuthorityRegistry, Backend, ManualClock};
use crate::intake::{parse_publish_response, AuthorityIntake, IntakeConfig};
use crate::transport::{InProcessNetwork, Transport};

pub use output::{write_run_dir, METRICS_HEADER};
pub use scenario::{AgentsSpec, CtaSpec, DiagnosisSpec, GpsSpec, MovementModel, Scenario, ScenarioError};

pub const AUTHORITY_ORIGIN: &str = "authority";
pub const SIM_AUTHORITY_ID: &str = "sim-health-authority";

pub fn agent_label(i: usize) -> String {
    format!("agent-{i:03}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Motion {
    Stay { until: u64 },
    Walk { target: (f64, f64) },
    Heading(f64),
    Still,
}

#[derive(Debug, Clone)]
pub struct SimAgent {
    pub label: String,
    pub adopter: bool,
    pub device: Option<DeviceAgent>,
    /// Local east/north metres from the scenario origin.
    pub home: (f64, f64),
    pub pos: (f64, f64),
    pub speed: f64,
    motion: Motion,
    /// True positions `(t, east, north)` at every step, kept when the run
    /// needs them for ground truth.
    pub history: Vec<(u64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisLogEntry {
    pub t: u64,
    pub agent: String,
    pub consent: bool,
    /// `sent`, `refused`, `not_installed`, `empty` or `failed`.
    pub outcome: String,
    pub bytes_sent: usize,
}

#[derive(Debug, Clone)]
pub struct PublishedCta {
    pub id: String,
    pub cta: CallToAction,
    pub diagnosed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub agents: usize,
    pub adopters: usize,
    pub adoption: f64,
    pub diagnosed: usize,
    pub ctas_published: usize,
    /// Non-diagnosed agents whose true co-location with a diagnosed agent,
    /// inside the shared window, reaches the CTA's minimum exposure.
    pub truly_exposed: usize,
    pub exposed_alerted: usize,
    pub recall: f64,
    pub exposed_tcn_alerted: usize,
    pub tcn_recall: f64,
    pub alerted: usize,
    /// Agents with no co-location and no presence in any CTA region.
    pub clean_agents: usize,
    pub false_alarms: usize,
    pub false_alarm_rate: f64,
    /// TCN-channel alerts for agents with zero true co-location.
    pub tcn_overclaims: usize,
    pub diagnosis_uploads: usize,
    pub stats_uploads: usize,
    pub messages: usize,
}

/// One point of the adoption sensitivity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionPoint {
    pub adoption: f64,
    pub adopters: usize,
    pub truly_exposed: usize,
    pub recall: f64,
    pub tcn_recall: f64,
    pub alerted: usize,
    pub false_alarms: usize,
}

pub struct World {
    pub scenario: Scenario,
    pub now: u64,
    rng: ChaCha20Rng,
    pub agents: Vec<SimAgent>,
    venues: Vec<(f64, f64)>,
    proj: LocalProjection,
    pub network: InProcessNetwork,
    pub clock: Arc<ManualClock>,
    /// Seconds of true co-location per unordered pair, row-major `n × n`.
    coloc: Vec<u64>,
    /// `(t, other, diagnosed)` for every step an agent slated for diagnosis
    /// was within range of another agent.
    diag_events: Vec<(u64, usize, usize)>,
    diag_agents: BTreeSet<usize>,
    /// Successful uploads: agent and the window it covered.
    pub shared_windows: Vec<(usize, Interval)>,
    /// Every scheduled diagnosis and its window, whether or not anything
    /// was uploaded. Ground truth does not depend on the app.
    pub truth_windows: Vec<(usize, Interval)>,
    pub diagnosis_log: Vec<DiagnosisLogEntry>,
    pub published: Vec<PublishedCta>,
    sync_phase: Vec<u64>,
    track: bool,
    noise: Normal<f64>,
}

fn sim_token(seed: u64) -> String {
    format!("sim-token-{seed:016x}-{:016x}", seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl World {
    pub fn new(scenario: Scenario) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
        let origin = GeoPoint::new(scenario.origin[0], scenario.origin[1]).expect("validated origin");
        let proj = LocalProjection::new(origin);
        let clock = Arc::new(ManualClock::new(scenario.start));

        let competence: BTreeSet<String> = {
            let r = scenario.area_radius_m * 2.0 + 5_000.0;
            let corners = [(-r, -r), (-r, r), (r, -r), (r, r), (0.0, 0.0)];
            let pts: Vec<GeoPoint> = corners.iter().map(|&(e, n)| proj.to_geo(e, n)).collect();
            let bbox = diary_core::BoundingBox::from_points(pts).expect("non-empty");
            diary_core::CoarseCell::covering(&bbox).iter().map(ToString::to_string).collect()
        };
        let token = sim_token(scenario.seed);
        let registry = AuthorityRegistry::new(vec![AuthorityAccount {
            id: SIM_AUTHORITY_ID.into(),
            display_name: "Simulated health authority".into(),
            token: token.clone(),
            competence_cells: competence.into_iter().collect(),
        }])
        .expect("valid simulated registry");
        let backend = Arc::new(Backend::in_memory(registry, clock.clone(), Some(scenario.seed)));
        let intake = AuthorityIntake::new(IntakeConfig {
            authority_id: SIM_AUTHORITY_ID.into(),
            token,
            message: "You may have been exposed. Please contact your local health service.".into(),
            stay: StayPointConfig::default(),
            build: BuildParams {
                expansion_m: scenario.cta.expansion_m,
                time_pad_s: scenario.cta.time_pad_s,
                max_distance: scenario.cta.max_distance_m,
                min_exposure: scenario.cta.min_exposure_s,
                movement_discs: scenario.cta.movement_discs,
                ..BuildParams::default()
            },
        });
        let network = InProcessNetwork::new(backend, intake, clock.clone());

        let n = scenario.agents.count;
        let disc = |rng: &mut ChaCha20Rng, radius: f64| {
            let r = radius * rng.gen::<f64>().sqrt();
            let a = rng.gen::<f64>() * std::f64::consts::TAU;
            (r * a.sin(), r * a.cos())
        };
        let venues: Vec<(f64, f64)> = (0..scenario.agents.venues.max(1))
            .map(|_| disc(&mut rng, scenario.area_radius_m * 0.5))
            .collect();

        let diag_agents: BTreeSet<usize> = scenario.diagnosis.iter().map(|d| d.agent).collect();
        let n_adopt = (scenario.adoption * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut adopters: BTreeSet<usize> = order.into_iter().take(n_adopt).collect();
        if n_adopt > 0 {
            // diagnosis only happens through the app, so scheduled patients
            // always run it when anyone does
            for d in &diag_agents {
                if !adopters.contains(d) {
                    let swap = *adopters.iter().find(|a| !diag_agents.contains(a)).unwrap_or(d);
                    adopters.remove(&swap);
                    adopters.insert(*d);
                }
            }
        }

        let agent_cfg = AgentConfig {
            sync_interval_s: scenario.sync_interval_s,
            download_all: scenario.download_all,
            ..AgentConfig::default()
        };
        let mut agents = Vec::with_capacity(n);
        let mut sync_phase = Vec::with_capacity(n);
        for i in 0..n {
            let home = disc(&mut rng, scenario.area_radius_m);
            let (id, seed) = random_identity(&mut rng);
            let adopter = adopters.contains(&i);
            let device = adopter.then(|| {
                let mut d = DeviceAgent::new(id, seed, scenario.start, agent_cfg.clone());
                let home_loc = KnownLocation::new("home", "Home", proj.to_geo(home.0, home.1)).home();
                d.data.store.add_known_location(home_loc).expect("first location");
                let v = venues[i % venues.len()];
                let venue = KnownLocation::new("venue", "Regular place", proj.to_geo(v.0, v.1)).with_radius(50.0);
                d.data.store.add_known_location(venue).expect("distinct id");
                d
            });
            let motion = match scenario.agents.model {
                MovementModel::Stationary => Motion::Still,
                MovementModel::Waypoint => Motion::Stay {
                    until: scenario.start + rng.gen_range(0..=scenario.agents.stay_max_s),
                },
                MovementModel::RandomWalk => Motion::Heading(rng.gen::<f64>() * std::f64::consts::TAU),
            };
            sync_phase.push(rng.gen_range(0..scenario.sync_interval_s.max(1)));
            agents.push(SimAgent {
                label: agent_label(i),
                adopter,
                device,
                home,
                pos: home,
                speed: 0.0,
                motion,
                history: Vec::new(),
            });
        }
        let track = !scenario.diagnosis.is_empty();
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            now: scenario.start,
            rng,
            agents,
            venues,
            proj,
            network,
            clock,
            coloc: vec![0; n * n],
            diag_events: Vec::new(),
            diag_agents,
            shared_windows: Vec::new(),
            truth_windows: Vec::new(),
            diagnosis_log: Vec::new(),
            published: Vec::new(),
            sync_phase,
            track,
            noise,
            scenario,
        }
    }

    pub fn end(&self) -> u64 {
        self.scenario.start + self.scenario.duration_s
    }

    pub fn geo(&self, p: (f64, f64)) -> GeoPoint {
        self.proj.to_geo(p.0, p.1)
    }

    /// True co-location seconds between agents `a` and `b`.
    pub fn colocation(&self, a: usize, b: usize) -> u64 {
        let n = self.agents.len();
        self.coloc[a.min(b) * n + a.max(b)]
    }

    fn noisy_fix(&mut self, t: u64, pos: (f64, f64)) -> LocationSample {
        let gps = &self.scenario.gps;
        let (scale, accuracy) = if self.rng.gen::<f64>() < gps.bad_fix_rate {
            (gps.sigma_m * 8.0, self.rng.gen_range(60.0..150.0))
        } else {
            (gps.sigma_m, 2.0 * gps.sigma_m)
        };
        let de = self.noise.sample(&mut self.rng) * scale;
        let dn = self.noise.sample(&mut self.rng) * scale;
        LocationSample::gps(t, self.proj.to_geo(pos.0 + de, pos.1 + dn), accuracy)
    }

    fn advance(&mut self, i: usize) {
        let spec = self.scenario.agents.clone();
        let dt = self.scenario.dt_s;
        let t_next = self.now + dt;
        let step = spec.speed_mps * dt as f64;
        let a_pos = self.agents[i].pos;
        let (pos, speed, motion) = match self.agents[i].motion {
            Motion::Still => (a_pos, 0.0, Motion::Still),
            Motion::Stay { until } if t_next < until => (a_pos, 0.0, Motion::Stay { until }),
            Motion::Stay { .. } => {
                let pick = self.rng.gen_range(0..=self.venues.len());
                let base = self.venues.get(pick).copied().unwrap_or(self.agents[i].home);
                let r = spec.venue_jitter_m * self.rng.gen::<f64>().sqrt();
                let ang = self.rng.gen::<f64>() * std::f64::consts::TAU;
                let target = (base.0 + r * ang.sin(), base.1 + r * ang.cos());
                (a_pos, 0.0, Motion::Walk { target })
            }
            Motion::Walk { target } => {
                let (dx, dy) = (target.0 - a_pos.0, target.1 - a_pos.1);
                let d = dx.hypot(dy);
                if d <= step {
                    let until = t_next + self.rng.gen_range(spec.stay_min_s..=spec.stay_max_s);
                    (target, d / dt as f64, Motion::Stay { until })
                } else {
                    let p = (a_pos.0 + dx / d * step, a_pos.1 + dy / d * step);
                    (p, spec.speed_mps, Motion::Walk { target })
                }
            }
            Motion::Heading(h) => {
                let mut h = h + self.noise.sample(&mut self.rng) * 0.5;
                if a_pos.0.hypot(a_pos.1) > self.scenario.area_radius_m {
                    h = (-a_pos.0).atan2(-a_pos.1);
                }
                let p = (a_pos.0 + step * h.sin(), a_pos.1 + step * h.cos());
                (p, spec.speed_mps, Motion::Heading(h))
            }
        };
        let a = &mut self.agents[i];
        a.pos = pos;
        a.speed = speed;
        a.motion = motion;
    }

    /// Advances the world by one time step.
    pub fn step(&mut self) {
        let t = self.now;
        let dt = self.scenario.dt_s;
        let n = self.agents.len();
        self.clock.set(t);
        let offset = t - self.scenario.start;
        self.network.offline = self.scenario.outages.iter().any(|[a, b]| (*a..*b).contains(&offset));

        let note_p = self.scenario.notes_per_day * dt as f64 / SECONDS_PER_DAY as f64;
        let mut tcns: Vec<Option<Tcn>> = vec![None; n];
        for i in 0..n {
            let pos = self.agents[i].pos;
            if self.track {
                self.agents[i].history.push((t, pos.0, pos.1));
            }
            if !self.agents[i].adopter {
                continue;
            }
            let fix = self.noisy_fix(t, pos);
            let wants_note = self.rng.gen::<f64>() < note_p;
            let speed = self.agents[i].speed;
            let dev = self.agents[i].device.as_mut().expect("adopter has a device");
            dev.observe_fix(fix, speed).expect("time moves forward");
            if wants_note {
                dev.add_note(t, Some(fix.position), "note").expect("non-empty note");
            }
            tcns[i] = Some(dev.current_tcn(t));
        }

        let prox = self.scenario.proximity_m;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (self.agents[i].pos, self.agents[j].pos);
                let d = (a.0 - b.0).hypot(a.1 - b.1);
                if d > prox {
                    continue;
                }
                self.coloc[i * n + j] += dt;
                if self.diag_agents.contains(&j) {
                    self.diag_events.push((t, i, j));
                }
                if self.diag_agents.contains(&i) {
                    self.diag_events.push((t, j, i));
                }
                if let (Some(ti), Some(tj)) = (tcns[i], tcns[j]) {
                    let rssi = Some((-45.0 - 3.0 * d) as i16);
                    self.agents[i].device.as_mut().expect("adopter").observe_tcn(tj, t, rssi);
                    self.agents[j].device.as_mut().expect("adopter").observe_tcn(ti, t, rssi);
                }
            }
        }

        let new_day = t > self.scenario.start && day_of(t) != day_of(t - dt);
        for i in 0..n {
            let phase_start = self.scenario.start + self.sync_phase[i];
            let label = self.agents[i].label.clone();
            let Some(dev) = self.agents[i].device.as_mut() else { continue };
            let mut ep = self.network.endpoint(label);
            if new_day {
                dev.expire(t);
                dev.upload_daily_stats(t, &mut ep);
            }
            if t >= phase_start {
                dev.sync_and_match(t, &mut ep);
            }
        }

        let due: Vec<DiagnosisSpec> = self
            .scenario
            .diagnosis
            .iter()
            .filter(|d| (t..t + dt).contains(&(self.scenario.start + d.at_s)))
            .cloned()
            .collect();
        for d in due {
            self.diagnose(&d, t);
        }

        for i in 0..n {
            self.advance(i);
        }
        self.now = t + dt;
    }

    fn diagnose(&mut self, spec: &DiagnosisSpec, t: u64) {
        let label = self.agents[spec.agent].label.clone();
        let range = Interval::new(t.saturating_sub(spec.lookback_s).max(self.scenario.start), t);
        self.truth_windows.push((spec.agent, range));
        let mut entry = DiagnosisLogEntry {
            t,
            agent: label.clone(),
            consent: spec.consent,
            outcome: "not_installed".into(),
            bytes_sent: 0,
        };
        if let Some(dev) = self.agents[spec.agent].device.as_ref() {
            let mut ep = self.network.endpoint(label);
            match dev.submit_diagnosis_report(spec.consent, range, t, &mut ep) {
                Ok(r) => {
                    entry.outcome = "sent".into();
                    entry.bytes_sent = r.bytes_sent;
                    self.shared_windows.push((spec.agent, range));
                }
                Err(crate::agent::DiagnosisError::ConsentRequired) => entry.outcome = "refused".into(),
                Err(crate::agent::DiagnosisError::Empty) => entry.outcome = "empty".into(),
                Err(crate::agent::DiagnosisError::Failed(_)) => entry.outcome = "failed".into(),
            }
        }
        self.diagnosis_log.push(entry);
        if self.network.offline {
            return;
        }
        for (k, raw) in self.network.intake.build_pending(t).into_iter().enumerate() {
            let key = format!("diagnosis-{}-{t}-{k}", spec.agent);
            let req = self.network.intake.publish_request(&raw, &key);
            let resp = self.network.endpoint(AUTHORITY_ORIGIN).send(req);
            if let Ok(Ok(p)) = resp.map(|r| parse_publish_response(&r)) {
                let mut raw: RawCta = raw;
                raw.id = p.id.clone();
                raw.coverage_cells = p.coverage_cells.iter().filter_map(|c| c.parse().ok()).collect();
                let cta = validate_cta(raw).expect("server accepted it");
                self.published.push(PublishedCta {
                    id: p.id,
                    cta,
                    diagnosed: spec.agent,
                });
            }
        }
    }

    /// Runs to the end of the scenario, then handles diagnoses scheduled at
    /// the very end, performs a final sync for every device and a last
    /// retention sweep.
    pub fn run(&mut self) {
        let end = self.end();
        while self.now < end {
            self.step();
        }
        self.clock.set(end);
        self.network.offline = false;
        let late: Vec<DiagnosisSpec> = self
            .scenario
            .diagnosis
            .iter()
            .filter(|d| self.scenario.start + d.at_s >= end)
            .cloned()
            .collect();
        for d in late {
            self.diagnose(&d, end);
        }
        for a in &mut self.agents {
            let Some(dev) = a.device.as_mut() else { continue };
            let mut ep = self.network.endpoint(a.label.clone());
            dev.sync_now(end, &mut ep);
            dev.expire(end);
        }
    }

    fn truth_exposure(&self, i: usize) -> u64 {
        self.diag_events
            .iter()
            .filter(|(t, other, d)| {
                *other == i
                    && self
                        .truth_windows
                        .iter()
                        .any(|(a, w)| a == d && w.contains(*t))
            })
            .count() as u64
            * self.scenario.dt_s
    }

    /// Whether agent `i` was ever, by true position or recorded sample,
    /// inside a published region (grown by max distance) during its interval.
    fn present_in_regions(&self, i: usize) -> bool {
        let a = &self.agents[i];
        let recorded: Vec<(u64, GeoPoint)> = a
            .device
            .iter()
            .flat_map(|d| d.data.store.accepted().map(|s| (s.timestamp, s.position)))
            .collect();
        let truth = a.history.iter().map(|&(t, e, n)| (t, self.geo((e, n))));
        let points: Vec<(u64, GeoPoint)> = truth.chain(recorded).collect();
        self.published.iter().any(|p| {
            p.cta.regions.iter().any(|r| {
                points.iter().any(|(t, g)| {
                    r.interval.contains(*t) && distance_to_polygon(*g, &r.polygon) <= p.cta.params.max_distance
                })
            })
        })
    }

    pub fn metrics(&self) -> Metrics {
        let published: BTreeSet<&str> = self.published.iter().map(|p| p.id.as_str()).collect();
        let diagnosed: BTreeSet<usize> = self.truth_windows.iter().map(|(a, _)| *a).collect();
        let min_exposure = self.scenario.cta.min_exposure_s;
        let mut m = Metrics {
            seed: self.scenario.seed,
            agents: self.agents.len(),
            adopters: self.agents.iter().filter(|a| a.adopter).count(),
            adoption: self.scenario.adoption,
            diagnosed: self.shared_windows.len(),
            ctas_published: self.published.len(),
            truly_exposed: 0,
            exposed_alerted: 0,
            recall: 1.0,
            exposed_tcn_alerted: 0,
            tcn_recall: 1.0,
            alerted: 0,
            clean_agents: 0,
            false_alarms: 0,
            false_alarm_rate: 0.0,
            tcn_overclaims: 0,
            diagnosis_uploads: self.diagnosis_log.iter().filter(|e| e.outcome == "sent").count(),
            stats_uploads: self
                .network
                .log()
                .iter()
                .filter(|r| r.path == "/v1/stats" && r.status == 202)
                .count(),
            messages: self.network.log().len(),
        };
        for (i, a) in self.agents.iter().enumerate() {
            if diagnosed.contains(&i) {
                continue;
            }
            let alerts: Vec<_> = a
                .device
                .iter()
                .flat_map(|d| d.pending_alerts())
                .filter(|x| published.contains(x.cta_id.as_str()))
                .collect();
            let alerted = !alerts.is_empty();
            let tcn_alert = alerts.iter().any(|x| x.channel != ExposureChannel::Geo);
            let truth = self.truth_exposure(i);
            let any_coloc = diagnosed.iter().any(|&d| self.colocation(i, d) > 0);
            m.alerted += usize::from(alerted);
            if truth >= min_exposure {
                m.truly_exposed += 1;
                m.exposed_alerted += usize::from(alerted);
                m.exposed_tcn_alerted += usize::from(tcn_alert);
            }
            if tcn_alert && truth == 0 {
                m.tcn_overclaims += 1;
            }
            if !any_coloc && !self.present_in_regions(i) {
                m.clean_agents += 1;
                m.false_alarms += usize::from(alerted);
            }
        }
        if m.truly_exposed > 0 {
            m.recall = m.exposed_alerted as f64 / m.truly_exposed as f64;
            m.tcn_recall = m.exposed_tcn_alerted as f64 / m.truly_exposed as f64;
        }
        if m.alerted > 0 {
            m.false_alarm_rate = m.false_alarms as f64 / m.alerted as f64;
        }
        m
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> World {
    let mut w = World::new(scenario.clone());
    w.run();
    w
}

/// Re-runs the scenario at each adoption rate in `levels`.
pub fn adoption_curve(scenario: &Scenario, levels: &[f64]) -> Vec<AdoptionPoint> {
    levels
        .iter()
        .map(|&adoption| {
            let m = run_scenario(&Scenario {
                adoption,
                adoption_curve: Vec::new(),
                ..scenario.clone()
            })
            .metrics();
            AdoptionPoint {
                adoption,
                adopters: m.adopters,
                truly_exposed: m.truly_exposed,
                recall: m.recall,
                tcn_recall: m.tcn_recall,
                alerted: m.alerted,
                false_alarms: m.false_alarms,
            }
        })
        .collect()
}
