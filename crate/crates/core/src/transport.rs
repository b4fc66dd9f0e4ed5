//! Message transport: a deterministic simulated network on a logical clock,
//! and newline-framed stream helpers for the socket mode.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{from_secs, Nanos};
use crate::error::{Error, Result, TransportError};
use crate::protocol::{decode, encode, encode_line, WireMessage};

/// Endpoint name of the gateway.
pub const GATEWAY: &str = "gateway";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    #[default]
    Simulated,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub mode: TransportMode,
    /// One-way latency per device endpoint, seconds. Also the time a send
    /// blocks its sender.
    pub latency: BTreeMap<String, f64>,
    /// Half-width of the uniform delivery jitter, seconds.
    pub jitter: f64,
    pub seed: u64,
    /// Socket mode listen address; port 0 picks a free port.
    pub bind: String,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            mode: TransportMode::Simulated,
            latency: BTreeMap::new(),
            jitter: 0.0,
            seed: 0,
            bind: "127.0.0.1:0".into(),
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some((id, l)) = self.latency.iter().find(|(_, l)| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidInput(format!("latency for {id} must be >= 0, got {l}")));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::InvalidInput(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    pub fn latency_of(&self, endpoint: &str) -> f64 {
        self.latency.get(endpoint).copied().unwrap_or(0.0)
    }

    /// Worst configured one-way latency.
    pub fn latency_bound(&self) -> f64 {
        self.latency.values().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub sent_at: Nanos,
    pub delivered_at: Nanos,
    /// When the blocking send returns control to the sender.
    pub sender_free_at: Nanos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub at: Nanos,
    pub from: String,
    pub to: String,
    pub msg: WireMessage,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    at: Nanos,
    from: String,
    seq: u64,
    to: String,
    line: Vec<u8>,
}

/// In-process network driven by an external logical clock.
///
/// Every message goes through the wire codec. A link's latency is the
/// latency of its device endpoint; jitter is drawn from a seeded stream, and
/// deliveries on one sender/receiver channel never overtake each other.
#[derive(Debug)]
pub struct SimNetwork {
    now: Nanos,
    latency: BTreeMap<String, Nanos>,
    jitter: Nanos,
    rng: ChaCha8Rng,
    connected: BTreeSet<String>,
    queue: BinaryHeap<Reverse<Pending>>,
    next_seq: u64,
    channel_tail: BTreeMap<(String, String), Nanos>,
    wire_log: Option<Vec<String>>,
}

impl SimNetwork {
    pub fn new(config: &TransportConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            now: 0,
            latency: config.latency.iter().map(|(k, v)| (k.clone(), from_secs(*v))).collect(),
            jitter: from_secs(config.jitter),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            connected: BTreeSet::new(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            channel_tail: BTreeMap::new(),
            wire_log: None,
        })
    }

    /// Keep a copy of every line put on the wire.
    pub fn record_wire(&mut self) {
        self.wire_log.get_or_insert_with(Vec::new);
    }

    pub fn wire_log(&self) -> &[String] {
        self.wire_log.as_deref().unwrap_or_default()
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn connect(&mut self, endpoint: &str) {
        self.connected.insert(endpoint.to_string());
    }

    /// Removes the endpoint; messages already in flight to it are dropped.
    pub fn disconnect(&mut self, endpoint: &str) {
        self.connected.remove(endpoint);
    }

    pub fn is_connected(&self, endpoint: &str) -> bool {
        self.connected.contains(endpoint)
    }

    fn link_latency(&self, from: &str, to: &str) -> Nanos {
        let device = if from == GATEWAY { to } else { from };
        self.latency.get(device).copied().unwrap_or(0)
    }

    pub fn send(&mut self, from: &str, to: &str, msg: &WireMessage) -> Result<SendReceipt> {
        for end in [from, to] {
            if !self.connected.contains(end) {
                return Err(TransportError::Disconnected(end.to_string()).into());
            }
        }
        let line = encode(msg)?;
        let latency = self.link_latency(from, to);
        let jitter = if self.jitter > 0 {
            self.rng.gen_range(-(self.jitter as i64)..=self.jitter as i64)
        } else {
            0
        };
        let mut at = (self.now + latency).saturating_add_signed(jitter).max(self.now);
        let tail = self.channel_tail.entry((from.to_string(), to.to_string())).or_insert(0);
        at = at.max(*tail);
        *tail = at;
        if let Some(log) = self.wire_log.as_mut() {
            let text = String::from_utf8_lossy(&line);
            log.push(format!("{} {from}->{to} {}", self.now, text.trim_end()));
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Pending {
            at,
            from: from.to_string(),
            seq,
            to: to.to_string(),
            line,
        }));
        Ok(SendReceipt {
            sent_at: self.now,
            delivered_at: at,
            sender_free_at: self.now + latency,
        })
    }

    pub fn peek_next(&self) -> Option<Nanos> {
        self.queue.peek().map(|Reverse(p)| p.at)
    }

    /// Moves the clock to `until` and returns everything due by then, in
    /// (time, sender, sequence) order.
    pub fn advance_clock(&mut self, until: Nanos) -> Vec<Delivery> {
        assert!(until >= self.now, "clock cannot run backwards ({until} < {})", self.now);
        self.now = until;
        let mut out = Vec::new();
        while self.queue.peek().is_some_and(|Reverse(p)| p.at <= until) {
            let Reverse(p) = self.queue.pop().expect("peeked");
            if !self.connected.contains(&p.to) {
                log::debug!("dropping message for disconnected {}", p.to);
                continue;
            }
            match decode(&p.line) {
                Ok(msg) => out.push(Delivery {
                    at: p.at,
                    from: p.from,
                    to: p.to,
                    msg,
                }),
                Err(e) => log::error!("undecodable line from {}: {e}", p.from),
            }
        }
        out
    }
}

/// Writes one message as a single line and flushes.
pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    let mut line = encode_line(msg)?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(TransportError::from)?;
    w.flush().map_err(TransportError::from)?;
    Ok(())
}

/// Reads one line-framed message; `Ok(None)` at end of stream.
pub fn read_message<R: BufRead>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf).map_err(TransportError::from)?;
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(decode(&buf)?))
}
