//! Scenario drivers: wire a gateway and its agents over a transport and run
//! them for the configured duration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use serde::Serialize;

use crate::agent::{DeviceAgent, Phase};
use crate::clock::{from_secs, Nanos};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayEvent, PacketArrival};
use crate::projection;
use crate::registry::{Named, Registry};
use crate::scenario::ScenarioConfig;
use crate::sink::CloudSink;
use crate::transport::{SimNetwork, GATEWAY};

mod socket;

pub use socket::SocketDriver;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Append accepted sink records to this file.
    pub sink_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UsageSample {
    pub t_ns: Nanos,
    pub total_rate: f64,
    pub total_data: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub events: Vec<GatewayEvent>,
    pub arrivals: Vec<PacketArrival>,
    pub usage: Vec<UsageSample>,
    pub wire_log: Vec<String>,
    pub gateway_state: serde_json::Value,
    /// Latest estimate per device at the end of the run.
    pub estimates: BTreeMap<String, f64>,
    /// Devices connected at the end of the run.
    pub members: Vec<String>,
    /// Agent-side failures (contract or protocol), as text.
    pub agent_errors: Vec<String>,
}

impl RunArtifacts {
    /// Rates from the last successful negotiation.
    pub fn final_rates(&self) -> Option<&BTreeMap<String, f64>> {
        self.events.iter().rev().find_map(|e| match e {
            GatewayEvent::Converged { z, .. } => Some(z),
            _ => None,
        })
    }

    pub fn negotiation_failed(&self) -> bool {
        self.events
            .iter()
            .any(|e| matches!(e, GatewayEvent::NegotiationFailed { .. }))
    }

    pub fn alerts(&self) -> impl Iterator<Item = &GatewayEvent> {
        self.events.iter().filter(|e| matches!(e, GatewayEvent::Alert { .. }))
    }

    /// Event log as JSON lines.
    pub fn event_log(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}

pub trait ScenarioDriver: Named + Send + Sync {
    fn run(&self, scenario: &ScenarioConfig, options: &RunOptions) -> Result<RunArtifacts>;
}

pub fn registry() -> Registry<dyn ScenarioDriver> {
    let mut r: Registry<dyn ScenarioDriver> = Registry::empty("transport driver");
    r.register(Arc::new(SimulatedDriver));
    r.register(Arc::new(SocketDriver));
    r
}

pub(crate) fn build_gateway(scenario: &ScenarioConfig, options: &RunOptions) -> Result<Gateway> {
    let projector = projection::registry().get(&scenario.run.projection)?;
    let sink = match &options.sink_log {
        Some(path) => CloudSink::with_log(scenario.gateway.sink, path)
            .map_err(|e| Error::Transport(e.into()))?,
        None => CloudSink::new(scenario.gateway.sink),
    };
    Gateway::new(scenario.gateway, scenario.transport.latency_bound(), projector, sink)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    Join(String),
    Manipulate(String),
    Leave(String),
    Sample,
}

/// Single-threaded discrete-event run on the logical clock.
#[derive(Debug, Default)]
pub struct SimulatedDriver;

impl Named for SimulatedDriver {
    fn name(&self) -> &'static str {
        "simulated"
    }
}

struct Sim {
    net: SimNetwork,
    gw: Gateway,
    agents: BTreeMap<String, DeviceAgent>,
    errors: Vec<String>,
}

impl Sim {
    fn send(&mut self, from: &str, to: &str, msg: &crate::protocol::WireMessage) -> Option<Nanos> {
        match self.net.send(from, to, msg) {
            Ok(r) => Some(r.sender_free_at),
            Err(e) => {
                log::debug!("{from}->{to}: {e}");
                None
            }
        }
    }

    fn to_gateway(&mut self, msg: crate::protocol::WireMessage, at: Nanos) -> Result<()> {
        for o in self.gw.handle(msg, at)? {
            self.send(GATEWAY, &o.to, &o.msg);
        }
        Ok(())
    }

    fn to_agent(&mut self, id: &str, msg: &crate::protocol::WireMessage, at: Nanos) {
        let Some(agent) = self.agents.get_mut(id) else { return };
        match agent.handle(msg, at) {
            Ok(replies) => {
                for r in replies {
                    self.send(id, GATEWAY, &r);
                }
            }
            Err(e) => {
                log::error!("{id}: {e}");
                self.errors.push(format!("{id}: {e}"));
            }
        }
        if self.agents[id].phase() == Phase::Stopped {
            self.net.disconnect(id);
        }
    }
}

impl ScenarioDriver for SimulatedDriver {
    fn run(&self, scenario: &ScenarioConfig, options: &RunOptions) -> Result<RunArtifacts> {
        scenario.validate()?;
        let mut net = SimNetwork::new(&scenario.transport)?;
        net.record_wire();
        net.connect(GATEWAY);
        let mut sim = Sim {
            net,
            gw: build_gateway(scenario, options)?,
            agents: BTreeMap::new(),
            errors: Vec::new(),
        };
        let mut pending: BTreeMap<String, DeviceAgent> = scenario
            .device_specs()?
            .into_iter()
            .map(|s| Ok((s.id.clone(), DeviceAgent::new(s)?)))
            .collect::<Result<_>>()?;

        let mut timers: BTreeSet<(Nanos, Timer)> = BTreeSet::new();
        for dev in &scenario.devices {
            timers.insert((from_secs(dev.join_time), Timer::Join(dev.id.clone())));
            if let Some(t) = dev.leave_time {
                timers.insert((from_secs(t), Timer::Leave(dev.id.clone())));
            }
            if let Some(m) = &dev.manipulation {
                timers.insert((from_secs(m.at_time), Timer::Manipulate(dev.id.clone())));
            }
        }
        let interval = from_secs(scenario.run.sample_interval);
        timers.insert((interval, Timer::Sample));
        let end = from_secs(scenario.run.duration);
        let mut usage = Vec::new();

        loop {
            let next_tick = sim.agents.values().filter_map(|a| a.next_wakeup()).min();
            let t = [
                sim.net.peek_next(),
                timers.first().map(|(t, _)| *t),
                next_tick,
                sim.gw.next_deadline(),
            ]
            .into_iter()
            .flatten()
            .min();
            let Some(t) = t.filter(|t| *t <= end) else { break };

            for d in sim.net.advance_clock(t) {
                if d.to == GATEWAY {
                    sim.to_gateway(d.msg, d.at)?;
                } else {
                    sim.to_agent(&d.to, &d.msg, d.at);
                }
            }

            while timers.first().is_some_and(|(at, _)| *at <= t) {
                let (_, timer) = timers.pop_first().expect("checked");
                match timer {
                    Timer::Join(id) => {
                        let agent = pending.remove(&id).expect("each device joins once");
                        sim.net.connect(&id);
                        let hello = agent.hello();
                        sim.agents.insert(id.clone(), agent);
                        sim.send(&id, GATEWAY, &hello);
                    }
                    Timer::Leave(id) => {
                        if let Some(agent) = sim.agents.get_mut(&id) {
                            if agent.phase() != Phase::Stopped {
                                let bye = agent.leave();
                                sim.send(&id, GATEWAY, &bye);
                            }
                            sim.net.disconnect(&id);
                        }
                    }
                    Timer::Manipulate(id) => {
                        let dev = scenario.devices.iter().find(|d| d.id == id).expect("known device");
                        let m = dev.manipulation.as_ref().expect("timer set from manipulation");
                        if let Some(agent) = sim.agents.get_mut(&id) {
                            if let Err(e) = agent.apply_manipulation(m.override_rate, t) {
                                log::error!("{id}: {e}");
                                sim.errors.push(format!("{id}: {e}"));
                            }
                        }
                    }
                    Timer::Sample => {
                        let (total_rate, total_data) = sim.gw.resource_usage();
                        usage.push(UsageSample {
                            t_ns: t,
                            total_rate,
                            total_data,
                        });
                        timers.insert((t + interval, Timer::Sample));
                    }
                }
            }

            let due: Vec<String> = sim
                .agents
                .iter()
                .filter(|(_, a)| a.next_wakeup().is_some_and(|w| w <= t))
                .map(|(id, _)| id.clone())
                .collect();
            for id in due {
                let Some(msg) = sim.agents.get_mut(&id).and_then(|a| a.transmit_tick(t)) else {
                    continue;
                };
                let free_at = sim.send(&id, GATEWAY, &msg).unwrap_or(t);
                sim.agents.get_mut(&id).expect("due agent").on_send_complete(free_at);
            }

            for o in sim.gw.poll(t)? {
                sim.send(GATEWAY, &o.to, &o.msg);
            }
        }

        sim.gw.sink_mut().flush().map_err(|e| Error::Transport(e.into()))?;
        let members: Vec<String> = sim.gw.sessions().keys().cloned().collect();
        let estimates = members
            .iter()
            .filter_map(|id| sim.gw.estimate_for(id).map(|e| (id.clone(), e.estimated_rate)))
            .collect();
        Ok(RunArtifacts {
            events: sim.gw.drain_events(),
            arrivals: sim.gw.drain_arrivals(),
            usage,
            wire_log: sim.net.wire_log().to_vec(),
            gateway_state: sim.gw.state_dump(),
            estimates,
            members,
            agent_errors: sim.errors,
        })
    }
}
