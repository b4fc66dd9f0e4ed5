//! Edge-device agent.
//!
//! The agent is a pure state machine: the caller feeds it received messages
//! and the current time and ships whatever it returns. It owns the device's
//! utility function and uses it only inside the local x-update; outbound
//! traffic is limited to `HELLO`, masked `X_REPORT`s, `DATA` and `LEAVE`.
//!
//! Transmission is paced by a blocking-send model: after each `DATA` the
//! caller reports when the send returned ([`DeviceAgent::on_send_complete`])
//! and the next packet is due one period after that, so the observed period
//! is `1/rate + send latency`.

use std::collections::BTreeMap;

use crate::admm::{dual_update, local_x_update};
use crate::clock::{period_of, Nanos};
use crate::error::{Error, ProtocolError, Result};
use crate::protocol::{Payload, WireMessage};
use crate::utility::UtilityFunction;

/// Slack allowed when checking a negotiated rate against the device minimum.
pub const MIN_RATE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub id: String,
    /// Data size per write.
    pub a: f64,
    /// Minimum rate (Hz).
    pub gamma: f64,
    pub utility: UtilityFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Negotiating,
    Transmitting,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Manipulation {
    pub rate: f64,
    pub from: Nanos,
}

#[derive(Debug, Clone)]
pub struct DeviceAgent {
    spec: DeviceSpec,
    phase: Phase,
    rho: f64,
    x: f64,
    u: f64,
    z: f64,
    /// Rate the transmit scheduler runs at; survives renegotiation.
    schedule_rate: Option<f64>,
    manipulation: Option<Manipulation>,
    next_seq: u64,
    next_due: Option<Nanos>,
    awaiting_send: bool,
    alerts: Vec<WireMessage>,
}

impl DeviceAgent {
    pub fn new(spec: DeviceSpec) -> Result<Self> {
        if spec.id.is_empty() {
            return Err(Error::InvalidInput("device id must not be empty".into()));
        }
        if !(spec.a.is_finite() && spec.a > 0.0) || !(spec.gamma.is_finite() && spec.gamma >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "device {}: need a > 0 and gamma >= 0 (a={}, gamma={})",
                spec.id, spec.a, spec.gamma
            )));
        }
        if let crate::utility::ConcavityReport::Violation { x, .. } = spec.utility.validate_concavity() {
            return Err(Error::InvalidInput(format!(
                "device {}: utility is not strictly concave at x={x}",
                spec.id
            )));
        }
        let gamma = spec.gamma;
        Ok(Self {
            spec,
            phase: Phase::Init,
            rho: 1.0,
            x: gamma,
            u: 0.0,
            z: gamma,
            schedule_rate: None,
            manipulation: None,
            next_seq: 0,
            next_due: None,
            awaiting_send: false,
            alerts: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.spec.id
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Negotiated rate; present exactly while transmitting.
    pub fn converged_rate(&self) -> Option<f64> {
        match self.phase {
            Phase::Transmitting => self.schedule_rate,
            _ => None,
        }
    }

    /// Rate the scheduler would use for a send at `t`.
    pub fn effective_rate(&self, t: Nanos) -> Option<f64> {
        match self.manipulation {
            Some(m) if t >= m.from && self.schedule_rate.is_some() => Some(m.rate),
            _ => self.schedule_rate,
        }
    }

    pub fn period(&self, t: Nanos) -> Option<Nanos> {
        self.effective_rate(t).map(period_of)
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn alerts(&self) -> &[WireMessage] {
        &self.alerts
    }

    /// Join request; the agent starts negotiating once the gateway accepts.
    pub fn hello(&self) -> WireMessage {
        WireMessage::new(
            self.spec.id.clone(),
            0,
            Payload::Hello {
                a: self.spec.a,
                gamma: self.spec.gamma,
            },
        )
    }

    pub fn leave(&mut self) -> WireMessage {
        self.phase = Phase::Stopped;
        self.next_due = None;
        WireMessage::new(self.spec.id.clone(), 0, Payload::Leave)
    }

    /// Dispatches one message from the gateway.
    pub fn handle(&mut self, msg: &WireMessage, now: Nanos) -> Result<Vec<WireMessage>> {
        if msg.device_id != self.spec.id {
            return Err(ProtocolError::malformed(
                "device_id",
                format!("message for `{}` delivered to `{}`", msg.device_id, self.spec.id),
            )
            .into());
        }
        match &msg.payload {
            Payload::JoinAck {
                accepted, rho, reason, ..
            } => {
                if *accepted {
                    self.accept_join(*rho)?;
                } else {
                    log::warn!("{}: join rejected: {reason}", self.spec.id);
                    self.phase = Phase::Stopped;
                }
                Ok(Vec::new())
            }
            Payload::ZBroadcast { z, session_start } => {
                Ok(vec![self.negotiate_round(msg.round, z, *session_start)?])
            }
            Payload::Converged { z } => {
                self.enter_transmitting(z, now)?;
                Ok(Vec::new())
            }
            Payload::Alert { .. } => {
                self.alerts.push(msg.clone());
                Ok(Vec::new())
            }
            Payload::Leave => {
                self.phase = Phase::Stopped;
                self.next_due = None;
                Ok(Vec::new())
            }
            other => Err(ProtocolError::malformed(
                "tag",
                format!("{} is not a gateway-to-device message", other.tag()),
            )
            .into()),
        }
    }

    fn accept_join(&mut self, rho: f64) -> Result<()> {
        if self.phase != Phase::Init {
            return Err(Error::Contract(format!("{}: JOIN_ACK outside INIT", self.spec.id)));
        }
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidInput(format!("rho must be positive, got {rho}")));
        }
        self.rho = rho;
        self.x = self.spec.gamma;
        self.z = self.spec.gamma;
        self.u = 0.0;
        self.phase = Phase::Negotiating;
        Ok(())
    }

    /// One ADMM round on the device side.
    ///
    /// Applies the dual update for the freshly broadcast `z` (skipped on the
    /// first broadcast of a negotiation session, which only seeds `z`), then
    /// solves the local x-update and reports the masked sum `x + u`.
    pub fn negotiate_round(
        &mut self,
        round: u64,
        z: &BTreeMap<String, f64>,
        session_start: bool,
    ) -> Result<WireMessage> {
        match self.phase {
            Phase::Negotiating => {}
            // renegotiation: keep transmitting at the old rate meanwhile
            Phase::Transmitting if session_start => self.phase = Phase::Negotiating,
            phase => {
                return Err(Error::Contract(format!(
                    "{}: Z_BROADCAST received in phase {phase:?}",
                    self.spec.id
                )))
            }
        }
        let z_own = *z
            .get(&self.spec.id)
            .ok_or_else(|| ProtocolError::malformed(format!("z.{}", self.spec.id), "missing"))?;
        if !session_start {
            self.u = dual_update(self.u, self.x, z_own);
        }
        self.z = z_own;
        self.x = local_x_update(&self.spec.utility, self.z, self.u, self.rho)?;
        Ok(WireMessage::new(
            self.spec.id.clone(),
            round,
            Payload::XReport { s: self.x + self.u },
        ))
    }

    /// Adopts the negotiated rate and arms (or re-times) the scheduler.
    pub fn enter_transmitting(&mut self, z: &BTreeMap<String, f64>, now: Nanos) -> Result<()> {
        if self.phase != Phase::Negotiating {
            return Err(Error::Contract(format!(
                "{}: CONVERGED received in phase {:?}",
                self.spec.id, self.phase
            )));
        }
        let rate = *z
            .get(&self.spec.id)
            .ok_or_else(|| ProtocolError::malformed(format!("z.{}", self.spec.id), "missing"))?;
        if !(rate.is_finite() && rate >= self.spec.gamma - MIN_RATE_SLACK) || rate <= 0.0 {
            return Err(Error::Contract(format!(
                "{}: negotiated rate {rate} below minimum {}",
                self.spec.id, self.spec.gamma
            )));
        }
        // close the final round so a later renegotiation warm-starts from it
        self.u = dual_update(self.u, self.x, rate);
        self.z = rate;
        let first_start = self.schedule_rate.is_none();
        self.schedule_rate = Some(rate);
        self.phase = Phase::Transmitting;
        if first_start {
            self.next_due = Some(now);
            self.awaiting_send = false;
        }
        Ok(())
    }

    /// From `at` onward the scheduler sends at `rate` instead of the
    /// negotiated one. Negotiation state is left alone.
    pub fn apply_manipulation(&mut self, rate: f64, at: Nanos) -> Result<()> {
        if self.phase != Phase::Transmitting {
            return Err(Error::Contract(format!(
                "{}: manipulation requires TRANSMITTING, phase is {:?}",
                self.spec.id, self.phase
            )));
        }
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidInput(format!("override rate must be positive, got {rate}")));
        }
        self.manipulation = Some(Manipulation { rate, from: at });
        Ok(())
    }

    /// When the scheduler next wants to run, if ever.
    pub fn next_wakeup(&self) -> Option<Nanos> {
        if self.awaiting_send || self.schedule_rate.is_none() || self.phase == Phase::Stopped {
            return None;
        }
        self.next_due
    }

    /// Emits the next `DATA` packet if one is due at `now`.
    pub fn transmit_tick(&mut self, now: Nanos) -> Option<WireMessage> {
        let due = self.next_wakeup()?;
        if now < due {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.awaiting_send = true;
        Some(WireMessage::new(
            self.spec.id.clone(),
            0,
            Payload::Data {
                seq,
                send_ts_us: now / 1_000,
                size: self.spec.a,
            },
        ))
    }

    /// The blocking send issued by the last tick returned at `at`; the next
    /// packet is due one period later.
    pub fn on_send_complete(&mut self, at: Nanos) {
        if !self.awaiting_send {
            return;
        }
        self.awaiting_send = false;
        self.next_due = self.period(at).map(|p| at + p);
    }
}
