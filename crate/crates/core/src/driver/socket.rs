//! Real-socket run: the gateway listens on TCP, each agent runs on its own
//! thread with its own connection, and time is the wall clock since start.
//! Send latency is injected by sleeping before each device-side write.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{build_gateway, RunArtifacts, RunOptions, ScenarioDriver, UsageSample};
use crate::agent::{DeviceAgent, Phase};
use crate::clock::{from_secs, Nanos};
use crate::error::{Error, Result, TransportError};
use crate::protocol::{encode_line, Payload, WireMessage};
use crate::registry::Named;
use crate::scenario::{DeviceConfig, ScenarioConfig};
use crate::transport::{read_message, write_message};

const IDLE_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Default)]
pub struct SocketDriver;

impl Named for SocketDriver {
    fn name(&self) -> &'static str {
        "socket"
    }
}

#[derive(Clone, Copy)]
struct Clock(Instant);

impl Clock {
    fn now(&self) -> Nanos {
        self.0.elapsed().as_nanos() as Nanos
    }

    fn sleep_until(&self, t: Nanos) {
        let now = self.now();
        if t > now {
            thread::sleep(Duration::from_nanos(t - now));
        }
    }
}

enum Inbound {
    Msg(u64, WireMessage),
    Closed(u64),
}

type Writers = Arc<Mutex<BTreeMap<u64, BufWriter<TcpStream>>>>;

fn spawn_reader<T: Send + 'static>(
    stream: TcpStream,
    tx: Sender<T>,
    wrap: impl Fn(Option<WireMessage>) -> T + Send + 'static,
) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            match read_message(&mut reader) {
                Ok(Some(m)) => {
                    if tx.send(wrap(Some(m))).is_err() {
                        return;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::debug!("reader stopped: {e}");
                    break;
                }
            }
        }
        let _ = tx.send(wrap(None));
    });
}

fn device_thread(
    mut agent: DeviceAgent,
    cfg: DeviceConfig,
    latency: Duration,
    addr: std::net::SocketAddr,
    clock: Clock,
    end: Nanos,
) -> Result<()> {
    let id = cfg.id.clone();
    if from_secs(cfg.join_time) >= end {
        return Ok(());
    }
    clock.sleep_until(from_secs(cfg.join_time));
    let stream = TcpStream::connect(addr).map_err(TransportError::from)?;
    stream.set_nodelay(true).map_err(TransportError::from)?;
    let (tx, rx): (Sender<Option<WireMessage>>, Receiver<_>) = mpsc::channel();
    spawn_reader(stream.try_clone().map_err(TransportError::from)?, tx, |m| m);
    let mut writer = BufWriter::new(stream);
    let mut send = |m: &WireMessage| -> Result<Nanos> {
        thread::sleep(latency);
        write_message(&mut writer, m)?;
        Ok(clock.now())
    };
    send(&agent.hello())?;
    let leave_at = cfg.leave_time.map(from_secs);
    let mut manipulation = cfg.manipulation.as_ref().map(|m| (from_secs(m.at_time), m.override_rate));

    loop {
        let now = clock.now();
        if now >= end || agent.phase() == Phase::Stopped {
            break;
        }
        if leave_at.is_some_and(|t| now >= t) {
            send(&agent.leave())?;
            break;
        }
        if let Some((at, rate)) = manipulation {
            if now >= at && agent.phase() == Phase::Transmitting {
                agent.apply_manipulation(rate, now)?;
                manipulation = None;
            }
        }
        if let Some(msg) = agent.transmit_tick(now) {
            let free_at = send(&msg)?;
            agent.on_send_complete(free_at);
            continue;
        }
        let wait = agent
            .next_wakeup()
            .map(|t| Duration::from_nanos(t.saturating_sub(now)))
            .unwrap_or(IDLE_POLL)
            .min(IDLE_POLL);
        match rx.recv_timeout(wait) {
            Ok(Some(msg)) => {
                for reply in agent.handle(&msg, clock.now())? {
                    send(&reply)?;
                }
            }
            Ok(None) | Err(RecvTimeoutError::Disconnected) => {
                log::info!("{id}: gateway closed the connection");
                break;
            }
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
    Ok(())
}

impl ScenarioDriver for SocketDriver {
    fn run(&self, scenario: &ScenarioConfig, options: &RunOptions) -> Result<RunArtifacts> {
        scenario.validate()?;
        let mut gw = build_gateway(scenario, options)?;
        let listener = TcpListener::bind(&scenario.transport.bind).map_err(TransportError::from)?;
        let addr = listener.local_addr().map_err(TransportError::from)?;
        listener.set_nonblocking(true).map_err(TransportError::from)?;
        log::info!("gateway listening on {addr}");

        let clock = Clock(Instant::now());
        let end = from_secs(scenario.run.duration);
        let stop = Arc::new(AtomicBool::new(false));
        let writers: Writers = Arc::default();
        let (tx, rx) = mpsc::channel::<Inbound>();

        let acceptor = {
            let (stop, writers, tx) = (stop.clone(), writers.clone(), tx.clone());
            thread::spawn(move || {
                let mut next_conn = 0u64;
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let conn = next_conn;
                            next_conn += 1;
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_nodelay(true);
                            let Ok(read_half) = stream.try_clone() else { continue };
                            writers.lock().expect("writers lock").insert(conn, BufWriter::new(stream));
                            spawn_reader(read_half, tx.clone(), move |m| match m {
                                Some(m) => Inbound::Msg(conn, m),
                                None => Inbound::Closed(conn),
                            });
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(IDLE_POLL),
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            break;
                        }
                    }
                }
            })
        };
        drop(tx);

        let specs = scenario.device_specs()?;
        let mut devices = Vec::new();
        for (spec, cfg) in specs.into_iter().zip(&scenario.devices) {
            let agent = DeviceAgent::new(spec)?;
            let latency = Duration::from_secs_f64(scenario.transport.latency_of(&cfg.id));
            let cfg = cfg.clone();
            devices.push((
                cfg.id.clone(),
                thread::spawn(move || device_thread(agent, cfg, latency, addr, clock, end)),
            ));
        }

        let mut routes: BTreeMap<String, u64> = BTreeMap::new();
        let mut wire_log = Vec::new();
        let mut usage = Vec::new();
        let interval = from_secs(scenario.run.sample_interval);
        let mut next_sample = interval;
        let route = |gw_out: Vec<crate::gateway::Outbound>,
                     routes: &BTreeMap<String, u64>,
                     wire_log: &mut Vec<String>,
                     now: Nanos| {
            let mut writers = writers.lock().expect("writers lock");
            for o in gw_out {
                let Some(w) = routes.get(&o.to).and_then(|c| writers.get_mut(c)) else { continue };
                if let Ok(line) = encode_line(&o.msg) {
                    wire_log.push(format!("{now} gateway->{} {line}", o.to));
                }
                if let Err(e) = write_message(w, &o.msg) {
                    log::warn!("{}: send failed: {e}", o.to);
                }
            }
        };

        loop {
            let now = clock.now();
            if now >= end {
                break;
            }
            if now >= next_sample {
                let (total_rate, total_data) = gw.resource_usage();
                usage.push(UsageSample {
                    t_ns: now,
                    total_rate,
                    total_data,
                });
                next_sample += interval;
            }
            let out = gw.poll(now)?;
            route(out, &routes, &mut wire_log, now);
            match rx.recv_timeout(IDLE_POLL) {
                Ok(Inbound::Msg(conn, msg)) => {
                    let now = clock.now();
                    if let Ok(line) = encode_line(&msg) {
                        wire_log.push(format!("{now} {}->gateway {line}", msg.device_id));
                    }
                    if matches!(msg.payload, Payload::Hello { .. }) {
                        routes.entry(msg.device_id.clone()).or_insert(conn);
                    } else if routes.get(&msg.device_id) != Some(&conn) {
                        log::warn!("conn {conn}: message for unregistered `{}` ignored", msg.device_id);
                        continue;
                    }
                    let out = gw.handle(msg, now)?;
                    route(out, &routes, &mut wire_log, now);
                }
                Ok(Inbound::Closed(conn)) => {
                    // an abrupt disconnect counts as a LEAVE
                    let gone: Vec<String> = routes
                        .iter()
                        .filter(|(_, c)| **c == conn)
                        .map(|(id, _)| id.clone())
                        .collect();
                    for id in gone {
                        routes.remove(&id);
                        let now = clock.now();
                        let out = gw.handle(WireMessage::new(id, 0, Payload::Leave), now)?;
                        route(out, &routes, &mut wire_log, now);
                    }
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {}
            }
        }

        stop.store(true, Ordering::Relaxed);
        let mut agent_errors = Vec::new();
        for (id, handle) in devices {
            match handle.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => agent_errors.push(format!("{id}: {e}")),
                Err(_) => agent_errors.push(format!("{id}: agent thread panicked")),
            }
        }
        for w in writers.lock().expect("writers lock").values() {
            let _ = w.get_ref().shutdown(std::net::Shutdown::Both);
        }
        let _ = acceptor.join();

        gw.sink_mut().flush().map_err(|e| Error::Transport(e.into()))?;
        let members: Vec<String> = gw.sessions().keys().cloned().collect();
        let estimates = members
            .iter()
            .filter_map(|id| gw.estimate_for(id).map(|e| (id.clone(), e.estimated_rate)))
            .collect();
        Ok(RunArtifacts {
            events: gw.drain_events(),
            arrivals: gw.drain_arrivals(),
            usage,
            wire_log,
            gateway_state: gw.state_dump(),
            estimates,
            members,
            agent_errors,
        })
    }
}
