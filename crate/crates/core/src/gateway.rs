//! Gateway state machine: ADMM rounds, membership, rate monitoring.
//!
//! Like the agent, the gateway is sans-IO. [`Gateway::handle`] consumes one
//! inbound message and returns the messages to send; [`Gateway::poll`] fires
//! the round deadline. It only ever sees device sizes, minimum rates and
//! masked reports, never utility functions.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::admm::l2_distance;
use crate::clock::{from_secs, Nanos, NANOS_PER_SEC};
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::monitor::{detect_anomaly, estimate_rate, AnomalyConfig, RateEstimate};
use crate::projection::Projector;
use crate::protocol::{Payload, WireMessage};
use crate::sink::{CloudSink, SinkQuota, SinkRecord};

/// A reference rate moving by more than this restarts the device's estimate.
pub const REFERENCE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub c: f64,
    pub d: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_rounds", alias = "max_iter")]
    pub max_rounds: usize,
    #[serde(default)]
    pub anomaly: AnomalyConfig,
    #[serde(default)]
    pub sink: SinkQuota,
}

fn default_rho() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_rounds() -> usize {
    1000
}

impl GatewayConfig {
    pub fn new(c: f64, d: f64) -> Self {
        Self {
            c,
            d,
            rho: default_rho(),
            tol: default_tol(),
            max_rounds: default_max_rounds(),
            anomaly: AnomalyConfig::default(),
            sink: SinkQuota::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(what.to_string()));
        if !(self.c.is_finite() && self.c > 0.0 && self.d.is_finite() && self.d > 0.0) {
            return bad("budgets c and d must be positive");
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) || self.max_rounds < 2 {
            return bad("need tol > 0 and max_rounds >= 2");
        }
        if self.anomaly.window < 2 {
            return bad("estimation window must hold at least 2 arrivals");
        }
        if let crate::monitor::DeltaSetting::Fixed(d) = self.anomaly.delta {
            if !(d.is_finite() && d > 0.0) {
                return bad("anomaly delta must be positive");
            }
        }
        if !(self.sink.max_writes_per_sec > 0.0) || !(self.sink.max_storage > 0.0) {
            return bad("sink quotas must be positive");
        }
        Ok(())
    }
}

/// Round deadline for a given worst-case one-way latency (seconds).
pub fn round_deadline(latency_bound: f64) -> Nanos {
    from_secs(10.0 * latency_bound).max(NANOS_PER_SEC)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Negotiating,
    Transmitting,
}

#[derive(Debug, Clone, Serialize)]
pub struct Session {
    pub device_id: String,
    pub index: u64,
    pub a: f64,
    pub gamma: f64,
    pub last_s: Option<f64>,
    pub z: f64,
    /// Last converged rate, the baseline for anomaly checks.
    pub reference_z: Option<f64>,
    pub phase: SessionPhase,
    pub arrivals: VecDeque<Nanos>,
    pub last_seq: Option<u64>,
    pub alerted: bool,
}

/// One completed round: the reports and the projection they produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u64,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

/// Primal and dual residuals of the newest round, from reports and
/// projections alone: the scaled dual is `u = s - z`, so the primal residual
/// is the change in `s - z` and the dual residual is `rho` times the change
/// in `z`. Needs two rounds.
pub fn round_residuals(history: &[RoundRecord], rho: f64) -> Option<(f64, f64)> {
    let [.., prev, last] = history else { return None };
    let u_last: Vec<f64> = last.s.iter().zip(&last.z).map(|(s, z)| s - z).collect();
    let u_prev: Vec<f64> = prev.s.iter().zip(&prev.z).map(|(s, z)| s - z).collect();
    Some((l2_distance(&u_last, &u_prev), rho * l2_distance(&last.z, &prev.z)))
}

/// Final rates when both residuals of the newest round are below `tol`.
pub fn declare_converged(history: &[RoundRecord], rho: f64, tol: f64) -> Option<&[f64]> {
    let (primal, dual) = round_residuals(history, rho)?;
    (primal < tol && dual < tol).then(|| history.last().map(|r| r.z.as_slice()).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum GatewayEvent {
    Join {
        t_ns: Nanos,
        device: String,
        index: u64,
    },
    JoinRejected {
        t_ns: Nanos,
        device: String,
        reason: String,
    },
    Leave {
        t_ns: Nanos,
        device: String,
        reason: String,
    },
    SessionStarted {
        t_ns: Nanos,
        round: u64,
        z: BTreeMap<String, f64>,
    },
    Round {
        t_ns: Nanos,
        round: u64,
        s: BTreeMap<String, f64>,
        z: BTreeMap<String, f64>,
        primal: Option<f64>,
        dual: Option<f64>,
    },
    Converged {
        t_ns: Nanos,
        round: u64,
        rounds: usize,
        z: BTreeMap<String, f64>,
    },
    NegotiationFailed {
        t_ns: Nanos,
        round: u64,
        reason: String,
    },
    Alert {
        t_ns: Nanos,
        device: String,
        estimated_rate: f64,
        reference_z: f64,
        delta: f64,
        deviation: f64,
        sample_count: usize,
    },
    StaleReport {
        t_ns: Nanos,
        device: String,
        round: u64,
        expected: u64,
    },
    ProtocolViolation {
        t_ns: Nanos,
        device: String,
        detail: String,
    },
    SinkRejected {
        t_ns: Nanos,
        device: String,
        seq: u64,
        reason: String,
    },
}

/// One received DATA packet and the estimate it produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PacketArrival {
    pub t_ns: Nanos,
    pub device_id: String,
    pub seq: u64,
    pub send_ts_us: u64,
    pub estimated_rate: Option<f64>,
    pub reference_z: Option<f64>,
    pub stored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: String,
    pub msg: WireMessage,
}

pub struct Gateway {
    config: GatewayConfig,
    latency_bound: f64,
    projector: Arc<dyn Projector>,
    sessions: BTreeMap<String, Session>,
    next_index: u64,
    round: u64,
    negotiating: bool,
    round_started: Nanos,
    reports: BTreeMap<String, f64>,
    history: Vec<RoundRecord>,
    set: Option<ConstraintSet>,
    sink: CloudSink,
    events: Vec<GatewayEvent>,
    arrivals: Vec<PacketArrival>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("round", &self.round)
            .field("negotiating", &self.negotiating)
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Gateway {
    /// `latency_bound` is the worst configured one-way latency in seconds;
    /// it sets the round deadline and the automatic alarm threshold.
    pub fn new(
        config: GatewayConfig,
        latency_bound: f64,
        projector: Arc<dyn Projector>,
        sink: CloudSink,
    ) -> Result<Self> {
        config.validate()?;
        if !(latency_bound.is_finite() && latency_bound >= 0.0) {
            return Err(Error::InvalidInput(format!("latency bound {latency_bound} must be >= 0")));
        }
        Ok(Self {
            config,
            latency_bound,
            projector,
            sessions: BTreeMap::new(),
            next_index: 0,
            round: 0,
            negotiating: false,
            round_started: 0,
            reports: BTreeMap::new(),
            history: Vec::new(),
            set: None,
            sink,
            events: Vec::new(),
            arrivals: Vec::new(),
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn sessions(&self) -> &BTreeMap<String, Session> {
        &self.sessions
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn is_negotiating(&self) -> bool {
        self.negotiating
    }

    pub fn constraint_set(&self) -> Option<&ConstraintSet> {
        self.set.as_ref()
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn sink(&self) -> &CloudSink {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut CloudSink {
        &mut self.sink
    }

    pub fn drain_events(&mut self) -> Vec<GatewayEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn drain_arrivals(&mut self) -> Vec<PacketArrival> {
        std::mem::take(&mut self.arrivals)
    }

    /// Time at which the current round times out, while negotiating.
    pub fn next_deadline(&self) -> Option<Nanos> {
        self.negotiating
            .then(|| self.round_started + round_deadline(self.latency_bound))
    }

    pub fn handle(&mut self, msg: WireMessage, now: Nanos) -> Result<Vec<Outbound>> {
        let WireMessage {
            device_id,
            round,
            payload,
        } = msg;
        match payload {
            Payload::Hello { a, gamma } => self.on_hello(device_id, a, gamma, now),
            Payload::XReport { s } => self.on_report(device_id, round, s, now),
            Payload::Data {
                seq,
                send_ts_us,
                size,
            } => Ok(self.on_data(device_id, seq, send_ts_us, size, now)),
            Payload::Leave => {
                if self.sessions.contains_key(&device_id) {
                    self.remove_device(&device_id, "left", now);
                    self.start_negotiation(now)
                } else {
                    Ok(Vec::new())
                }
            }
            other => {
                self.violation(&device_id, format!("{} is not a device-to-gateway message", other.tag()), now);
                Ok(Vec::new())
            }
        }
    }

    /// Drops every device that missed the current round's deadline and
    /// renegotiates among the rest.
    pub fn poll(&mut self, now: Nanos) -> Result<Vec<Outbound>> {
        match self.next_deadline() {
            Some(deadline) if now >= deadline => {}
            _ => return Ok(Vec::new()),
        }
        let missing: Vec<String> = self
            .sessions
            .keys()
            .filter(|id| !self.reports.contains_key(*id))
            .cloned()
            .collect();
        let mut out = Vec::new();
        for id in &missing {
            log::warn!("{id}: no report for round {} before deadline, dropping", self.round);
            self.remove_device(id, "round deadline missed", now);
            out.push(Outbound {
                to: id.clone(),
                msg: WireMessage::new(id.clone(), self.round, Payload::Leave),
            });
        }
        out.extend(self.start_negotiation(now)?);
        Ok(out)
    }

    /// Σ estimated rate and Σ a·estimated rate over transmitting devices.
    pub fn resource_usage(&self) -> (f64, f64) {
        self.sessions
            .values()
            .filter(|s| s.reference_z.is_some())
            .filter_map(|s| self.estimate(s).map(|e| (s.a, e.estimated_rate)))
            .fold((0.0, 0.0), |(r, d), (a, x)| (r + x, d + a * x))
    }

    pub fn estimate_for(&self, device_id: &str) -> Option<RateEstimate> {
        self.sessions.get(device_id).and_then(|s| self.estimate(s))
    }

    /// Session table and round state as JSON.
    pub fn state_dump(&self) -> serde_json::Value {
        serde_json::json!({
            "round": self.round,
            "negotiating": self.negotiating,
            "budget": { "c": self.config.c, "d": self.config.d },
            "rho": self.config.rho,
            "sessions": self.sessions,
            "history_len": self.history.len(),
            "sink": {
                "records": self.sink.records().len(),
                "used_storage": self.sink.used_storage(),
                "rejections": self.sink.rejections(),
            },
        })
    }

    fn estimate(&self, s: &Session) -> Option<RateEstimate> {
        let arrivals: Vec<Nanos> = s.arrivals.iter().copied().collect();
        estimate_rate(&s.device_id, &arrivals, self.config.anomaly.window)
    }

    fn violation(&mut self, device: &str, detail: String, now: Nanos) {
        log::warn!("{device}: {detail}");
        self.events.push(GatewayEvent::ProtocolViolation {
            t_ns: now,
            device: device.to_string(),
            detail,
        });
    }

    fn build_set(sessions: &BTreeMap<String, Session>, config: &GatewayConfig) -> Result<ConstraintSet> {
        ConstraintSet::new(
            config.c,
            config.d,
            sessions.values().map(|s| s.a).collect(),
            sessions.values().map(|s| s.gamma).collect(),
        )
    }

    fn on_hello(&mut self, id: String, a: f64, gamma: f64, now: Nanos) -> Result<Vec<Outbound>> {
        let reject = |this: &mut Self, reason: String| {
            log::warn!("{id}: join rejected: {reason}");
            this.events.push(GatewayEvent::JoinRejected {
                t_ns: now,
                device: id.clone(),
                reason: reason.clone(),
            });
            Ok(vec![Outbound {
                to: id.clone(),
                msg: WireMessage::new(
                    id.clone(),
                    this.round,
                    Payload::JoinAck {
                        accepted: false,
                        index: 0,
                        rho: this.config.rho,
                        c: this.config.c,
                        d: this.config.d,
                        reason,
                    },
                ),
            }])
        };
        if self.sessions.contains_key(&id) {
            return reject(self, "device id already connected".into());
        }
        let mut trial = self.sessions.clone();
        trial.insert(
            id.clone(),
            Session {
                device_id: id.clone(),
                index: self.next_index,
                a,
                gamma,
                last_s: None,
                z: gamma,
                reference_z: None,
                phase: SessionPhase::Negotiating,
                arrivals: VecDeque::new(),
                last_seq: None,
                alerted: false,
            },
        );
        match Self::build_set(&trial, &self.config) {
            Ok(_) => {}
            Err(Error::Infeasible(why)) => return reject(self, format!("quota exceeded: {why}")),
            Err(Error::InvalidInput(why)) => return reject(self, why),
            Err(e) => return Err(e),
        }
        let index = self.next_index;
        self.next_index += 1;
        self.sessions = trial;
        log::info!("{id}: joined as index {index}");
        self.events.push(GatewayEvent::Join {
            t_ns: now,
            device: id.clone(),
            index,
        });
        let mut out = vec![Outbound {
            to: id.clone(),
            msg: WireMessage::new(
                id.clone(),
                self.round,
                Payload::JoinAck {
                    accepted: true,
                    index,
                    rho: self.config.rho,
                    c: self.config.c,
                    d: self.config.d,
                    reason: String::new(),
                },
            ),
        }];
        out.extend(self.start_negotiation(now)?);
        Ok(out)
    }

    fn remove_device(&mut self, id: &str, reason: &str, now: Nanos) {
        if self.sessions.remove(id).is_some() {
            log::info!("{id}: removed ({reason})");
            self.events.push(GatewayEvent::Leave {
                t_ns: now,
                device: id.to_string(),
                reason: reason.to_string(),
            });
        }
    }

    fn z_map(&self, z: &[f64]) -> BTreeMap<String, f64> {
        self.sessions.keys().cloned().zip(z.iter().copied()).collect()
    }

    fn broadcast(&self, payload: Payload) -> Vec<Outbound> {
        self.sessions
            .keys()
            .map(|id| Outbound {
                to: id.clone(),
                msg: WireMessage::new(id.clone(), self.round, payload.clone()),
            })
            .collect()
    }

    /// Rebuilds the constraint set for the current members and opens a new
    /// negotiation session seeded with their last rates.
    fn start_negotiation(&mut self, now: Nanos) -> Result<Vec<Outbound>> {
        self.reports.clear();
        self.history.clear();
        if self.sessions.is_empty() {
            self.negotiating = false;
            self.set = None;
            return Ok(Vec::new());
        }
        self.set = Some(Self::build_set(&self.sessions, &self.config)?);
        self.round += 1;
        self.negotiating = true;
        self.round_started = now;
        for s in self.sessions.values_mut() {
            s.phase = SessionPhase::Negotiating;
        }
        // last rates (floor for newcomers), pulled back into the new budget
        let seed: Vec<f64> = self.sessions.values().map(|s| s.z).collect();
        let seed = self
            .projector
            .project(&seed, self.set.as_ref().expect("set built above"))?;
        for (sess, &zi) in self.sessions.values_mut().zip(&seed) {
            sess.z = zi;
        }
        let z = self.z_map(&seed);
        self.events.push(GatewayEvent::SessionStarted {
            t_ns: now,
            round: self.round,
            z: z.clone(),
        });
        Ok(self.broadcast(Payload::ZBroadcast {
            z,
            session_start: true,
        }))
    }

    fn on_report(&mut self, id: String, round: u64, s: f64, now: Nanos) -> Result<Vec<Outbound>> {
        if !self.negotiating || round != self.round || !self.sessions.contains_key(&id) {
            log::debug!("{id}: ignoring report for round {round} (current {})", self.round);
            self.events.push(GatewayEvent::StaleReport {
                t_ns: now,
                device: id,
                round,
                expected: self.round,
            });
            return Ok(Vec::new());
        }
        if !s.is_finite() {
            self.violation(&id, format!("non-finite report {s}"), now);
            return Ok(Vec::new());
        }
        self.reports.insert(id, s);
        if self.reports.len() == self.sessions.len() {
            self.z_round(now)
        } else {
            Ok(Vec::new())
        }
    }

    fn z_round(&mut self, now: Nanos) -> Result<Vec<Outbound>> {
        let set = self.set.as_ref().expect("negotiating without a constraint set");
        let s: Vec<f64> = self.sessions.keys().map(|id| self.reports[id]).collect();
        let z = self.projector.project(&s, set)?;
        for ((sess, &si), &zi) in self.sessions.values_mut().zip(&s).zip(&z) {
            sess.last_s = Some(si);
            sess.z = zi;
        }
        self.history.push(RoundRecord {
            round: self.round,
            s: s.clone(),
            z: z.clone(),
        });
        let residuals = round_residuals(&self.history, self.config.rho);
        let z_map = self.z_map(&z);
        self.events.push(GatewayEvent::Round {
            t_ns: now,
            round: self.round,
            s: self.z_map(&s),
            z: z_map.clone(),
            primal: residuals.map(|r| r.0),
            dual: residuals.map(|r| r.1),
        });
        self.reports.clear();

        if declare_converged(&self.history, self.config.rho, self.config.tol).is_some() {
            return Ok(self.finish_negotiation(z_map, now));
        }
        if self.history.len() >= self.config.max_rounds {
            let reason = format!("no convergence after {} rounds", self.history.len());
            log::error!("negotiation failed: {reason}");
            self.events.push(GatewayEvent::NegotiationFailed {
                t_ns: now,
                round: self.round,
                reason,
            });
            self.negotiating = false;
            return Ok(Vec::new());
        }
        self.round += 1;
        self.round_started = now;
        Ok(self.broadcast(Payload::ZBroadcast {
            z: z_map,
            session_start: false,
        }))
    }

    fn finish_negotiation(&mut self, z: BTreeMap<String, f64>, now: Nanos) -> Vec<Outbound> {
        self.negotiating = false;
        for sess in self.sessions.values_mut() {
            let zi = z[&sess.device_id];
            let moved = sess.reference_z.is_none_or(|r| (r - zi).abs() > REFERENCE_EPS);
            if moved {
                sess.arrivals.clear();
                sess.alerted = false;
            }
            sess.reference_z = Some(zi);
            sess.phase = SessionPhase::Transmitting;
        }
        log::info!("converged after {} rounds: {z:?}", self.history.len());
        self.events.push(GatewayEvent::Converged {
            t_ns: now,
            round: self.round,
            rounds: self.history.len(),
            z: z.clone(),
        });
        self.broadcast(Payload::Converged { z })
    }

    fn on_data(&mut self, id: String, seq: u64, send_ts_us: u64, size: f64, now: Nanos) -> Vec<Outbound> {
        let window = self.config.anomaly.window;
        let Some(sess) = self.sessions.get_mut(&id) else {
            self.violation(&id, format!("DATA seq {seq} from unknown device"), now);
            return Vec::new();
        };
        if sess.last_seq.is_some_and(|last| seq <= last) {
            self.violation(&id, format!("DATA seq {seq} not increasing"), now);
            return Vec::new();
        }
        sess.last_seq = Some(seq);
        if sess.arrivals.back().is_some_and(|&t| t > now) {
            sess.arrivals.clear();
        }
        sess.arrivals.push_back(now);
        while sess.arrivals.len() > window {
            sess.arrivals.pop_front();
        }

        let stored = match self.sink.write(
            SinkRecord {
                device_id: id.clone(),
                seq,
                send_ts_us,
                arrival_ns: now,
                size,
            },
            now,
        ) {
            Ok(()) => true,
            Err(why) => {
                self.events.push(GatewayEvent::SinkRejected {
                    t_ns: now,
                    device: id.clone(),
                    seq,
                    reason: why.to_string(),
                });
                false
            }
        };

        let sess = &self.sessions[&id];
        let est = self.estimate(sess);
        let reference_z = sess.reference_z;
        self.arrivals.push(PacketArrival {
            t_ns: now,
            device_id: id.clone(),
            seq,
            send_ts_us,
            estimated_rate: est.as_ref().map(|e| e.estimated_rate),
            reference_z,
            stored,
        });

        let (Some(est), Some(z_ref)) = (est, reference_z) else {
            return Vec::new();
        };
        let delta = self.config.anomaly.delta.resolve(z_ref, self.latency_bound);
        let event = detect_anomaly(&est, z_ref, delta, self.config.anomaly.min_samples, now);
        let sess = self.sessions.get_mut(&id).expect("session checked above");
        let Some(event) = event else {
            // re-arm once the estimate is back inside the band
            if est.sample_count >= self.config.anomaly.min_samples {
                sess.alerted = false;
            }
            return Vec::new();
        };
        if sess.alerted {
            return Vec::new();
        }
        sess.alerted = true;
        log::warn!(
            "{id}: estimated rate {:.4} Hz deviates from negotiated {:.4} Hz by {:.4} (threshold {:.4})",
            event.estimated_rate,
            event.reference_z,
            event.deviation,
            event.delta
        );
        self.events.push(GatewayEvent::Alert {
            t_ns: now,
            device: id.clone(),
            estimated_rate: event.estimated_rate,
            reference_z: event.reference_z,
            delta: event.delta,
            deviation: event.deviation,
            sample_count: est.sample_count,
        });
        let mut out = vec![Outbound {
            to: id.clone(),
            msg: WireMessage::new(
                id.clone(),
                self.round,
                Payload::Alert {
                    estimated_rate: event.estimated_rate,
                    reference_z: event.reference_z,
                    delta: event.delta,
                },
            ),
        }];
        if self.config.anomaly.auto_remediate && !self.negotiating {
            match self.start_negotiation(now) {
                Ok(msgs) => out.extend(msgs),
                Err(e) => log::error!("remediation renegotiation failed: {e}"),
            }
        }
        out
    }
}
