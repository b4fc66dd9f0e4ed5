//! Scenario runner, offline solver and report generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use txfreq_core::admm::{total_utility, AdmmSettings};
use txfreq_core::clock::to_secs;
use txfreq_core::driver::{self, RunArtifacts, RunOptions};
use txfreq_core::gateway::GatewayEvent;
use txfreq_core::scenario::ScenarioConfig;
use txfreq_core::utility::UtilityFunction;
use txfreq_core::{projection, solver};

pub mod artifacts {
    pub const TRACE: &str = "trace.csv";
    pub const PACKETS: &str = "packets.csv";
    pub const RESOURCES: &str = "resources.csv";
    pub const SUMMARY: &str = "summary.csv";
    pub const UTILITY: &str = "utility.csv";
    pub const EVENTS: &str = "events.log";
    pub const WIRE: &str = "wire.log";
    pub const GATEWAY_STATE: &str = "gateway_state.json";
    pub const SINK: &str = "sink.csv";
    pub const FREQUENCY: &str = "frequency_evolution.csv";
    pub const RESOURCE_CONSUMPTION: &str = "resource_consumption.csv";
    pub const Z_MONITOR: &str = "z_monitor.csv";

    pub const TRACE_HEADER: &str = "round,device,s,z,primal,dual";
    pub const PACKETS_HEADER: &str = "arrival_ts,device,seq,estimated_rate,reference_z,stored";
    pub const RESOURCES_HEADER: &str = "t,total_rate,total_data,c,d";
    pub const SUMMARY_HEADER: &str = "device,theoretical,estimated,abs_error";
    pub const UTILITY_HEADER: &str = "label,computed,reference,gap";
    pub const FREQUENCY_HEADER: &str = "t,device,estimated_rate";
    pub const Z_MONITOR_HEADER: &str = "t,device,z,x_hat,deviation";
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(txfreq_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(txfreq_core::Error::Transport(_)) => 4,
            CliError::Core(_) => 1,
        }
    }
}

impl From<txfreq_core::Error> for CliError {
    fn from(e: txfreq_core::Error) -> Self {
        use txfreq_core::Error as E;
        match e {
            E::Infeasible(m) => CliError::Infeasible(m),
            E::InvalidInput(m) => CliError::Config(m),
            E::NotConverged { iterations, .. } => {
                CliError::NotConverged(format!("no convergence after {iterations} iterations"))
            }
            E::ProjectionDiverged { cycles, last } => {
                CliError::NotConverged(format!("projection stalled after {cycles} cycles near {last:?}"))
            }
            other => CliError::Core(other),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    parse_config(&read_file(path)?).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// x* and total utility of the optimum plus the two fixed-split baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub ids: Vec<String>,
    pub x_star: Vec<f64>,
    pub utility: f64,
    /// Everyone gets `c/N`.
    pub average: f64,
    /// Device i gets `a_i·c/Σa`.
    pub proportional: f64,
}

/// Baselines are scored at their split regardless of whether it fits the
/// data budget; both share the same total rate `c` as the optimum's bound.
pub fn baselines(fs: &[UtilityFunction], sizes: &[f64], c: f64) -> Result<(f64, f64)> {
    let n = fs.len() as f64;
    let avg: Vec<f64> = vec![c / n; fs.len()];
    let total_a: f64 = sizes.iter().sum();
    let prop: Vec<f64> = sizes.iter().map(|a| a * c / total_a).collect();
    Ok((total_utility(fs, &avg)?, total_utility(fs, &prop)?))
}

/// Solves the problem for the listed devices (all when `None`).
pub fn solve(cfg: &ScenarioConfig, solver_name: &str, members: Option<&[String]>) -> Result<Solution> {
    let ids: Vec<String> = match members {
        Some(m) => {
            let mut m = m.to_vec();
            m.sort();
            m
        }
        None => cfg.sorted_ids(),
    };
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let set = cfg.constraint_set_for(&refs)?;
    let mut specs = cfg.device_specs()?;
    specs.retain(|s| ids.contains(&s.id));
    specs.sort_by(|a, b| a.id.cmp(&b.id));
    let fs: Vec<UtilityFunction> = specs.into_iter().map(|s| s.utility).collect();
    let settings = AdmmSettings {
        rho: cfg.gateway.rho,
        tol: cfg.gateway.tol,
        max_iter: cfg.gateway.max_rounds,
    };
    let projector = projection::registry().get(&cfg.run.projection)?;
    let chosen = solver::registry(settings, projector).get(solver_name)?;
    let x_star = chosen.solve(&fs, &set)?;
    let utility = total_utility(&fs, &x_star)?;
    let (average, proportional) = baselines(&fs, set.sizes(), cfg.gateway.c)?;
    Ok(Solution {
        ids,
        x_star,
        utility,
        average,
        proportional,
    })
}

/// Rows of the utility table: label, computed value, published value.
pub fn utility_rows(sol: &Solution, cfg: &ScenarioConfig) -> Vec<(String, f64, Option<f64>)> {
    [("admm", sol.utility), ("proportional", sol.proportional), ("average", sol.average)]
        .into_iter()
        .map(|(label, v)| (label.to_string(), v, cfg.reference.get(label).copied()))
        .collect()
}

pub fn format_solution(sol: &Solution, cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    for (id, x) in sol.ids.iter().zip(&sol.x_star) {
        let _ = writeln!(out, "x*[{id}] = {x:.6}");
    }
    for (label, v, reference) in utility_rows(sol, cfg) {
        let _ = match reference {
            Some(r) => writeln!(out, "{label:<13} utility {v:.4} (published {r:.2}, gap {:.4})", v - r),
            None => writeln!(out, "{label:<13} utility {v:.4}"),
        };
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    pub solution: Solution,
}

/// Runs the scenario, writes every artifact into `out`, and reports
/// non-convergence after the artifacts are on disk.
pub fn run(cfg: &ScenarioConfig, out: &Path, seed: Option<u64>) -> Result<RunOutcome> {
    let mut cfg = cfg.clone();
    if let Some(seed) = seed {
        cfg.transport.seed = seed;
    }
    cfg.validate()?;
    cfg.full_constraint_set()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let sink_path = out.join(artifacts::SINK);
    if sink_path.exists() {
        fs::remove_file(&sink_path).map_err(io_err(&sink_path))?;
    }
    let mode = match cfg.transport.mode {
        txfreq_core::transport::TransportMode::Simulated => "simulated",
        txfreq_core::transport::TransportMode::Socket => "socket",
    };
    let driver = driver::registry().get(mode)?;
    let arts = driver.run(
        &cfg,
        &RunOptions {
            sink_log: Some(sink_path),
        },
    )?;

    let members = if arts.members.is_empty() {
        cfg.sorted_ids()
    } else {
        arts.members.clone()
    };
    let solution = solve(&cfg, "admm", Some(&members))?;
    write_artifacts(&cfg, &arts, &solution, out)?;

    if let Some(GatewayEvent::NegotiationFailed { reason, .. }) = arts
        .events
        .iter()
        .rev()
        .find(|e| matches!(e, GatewayEvent::NegotiationFailed { .. }))
    {
        return Err(CliError::NotConverged(format!(
            "{reason}; trace in {}",
            out.join(artifacts::TRACE).display()
        )));
    }
    for e in &arts.agent_errors {
        log::error!("agent error: {e}");
    }
    Ok(RunOutcome {
        artifacts: arts,
        solution,
    })
}

fn write_artifacts(cfg: &ScenarioConfig, arts: &RunArtifacts, sol: &Solution, out: &Path) -> Result<()> {
    use artifacts::*;

    let mut trace = format!("{TRACE_HEADER}\n");
    for e in &arts.events {
        if let GatewayEvent::Round {
            round,
            s,
            z,
            primal,
            dual,
            ..
        } = e
        {
            for (id, si) in s {
                let _ = writeln!(trace, "{round},{id},{si},{},{},{}", z[id], opt(*primal), opt(*dual));
            }
        }
    }
    write_file(&out.join(TRACE), &trace)?;

    let mut packets = format!("{PACKETS_HEADER}\n");
    for p in &arts.arrivals {
        let _ = writeln!(
            packets,
            "{:.9},{},{},{},{},{}",
            to_secs(p.t_ns),
            p.device_id,
            p.seq,
            opt(p.estimated_rate),
            opt(p.reference_z),
            p.stored
        );
    }
    write_file(&out.join(PACKETS), &packets)?;

    let mut resources = format!("{RESOURCES_HEADER}\n");
    for u in &arts.usage {
        let _ = writeln!(
            resources,
            "{},{},{},{},{}",
            to_secs(u.t_ns),
            u.total_rate,
            u.total_data,
            cfg.gateway.c,
            cfg.gateway.d
        );
    }
    write_file(&out.join(RESOURCES), &resources)?;

    let mut summary = format!("{SUMMARY_HEADER}\n");
    for (id, x) in sol.ids.iter().zip(&sol.x_star) {
        let est = arts.estimates.get(id).copied();
        let err = est.map(|e| (e - x).abs());
        let _ = writeln!(summary, "{id},{x},{},{}", opt(est), opt(err));
    }
    write_file(&out.join(SUMMARY), &summary)?;

    let mut utility = format!("{UTILITY_HEADER}\n");
    for (label, v, reference) in utility_rows(sol, cfg) {
        let _ = writeln!(utility, "{label},{v},{},{}", opt(reference), opt(reference.map(|r| v - r)));
    }
    write_file(&out.join(UTILITY), &utility)?;

    write_file(&out.join(EVENTS), &arts.event_log())?;
    let mut wire = arts.wire_log.join("\n");
    wire.push('\n');
    write_file(&out.join(WIRE), &wire)?;
    let state = serde_json::to_string_pretty(&arts.gateway_state).expect("state serializes");
    write_file(&out.join(GATEWAY_STATE), &(state + "\n"))?;
    Ok(())
}

/// Splits a CSV body (header checked) into rows of fields.
fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(CliError::Config(format!("{}: unexpected header", path.display())));
    }
    Ok(lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect())
}

/// Builds the per-figure CSVs from a run directory and returns a printable
/// summary.
pub fn report(out: &Path) -> Result<String> {
    use artifacts::*;
    let required = [SUMMARY, UTILITY, PACKETS, RESOURCES, EVENTS];
    for name in required {
        let p = out.join(name);
        if !p.is_file() {
            return Err(CliError::Io {
                path: p,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing run artifact"),
            });
        }
    }

    let packets_path = out.join(PACKETS);
    let packets = read_file(&packets_path)?;
    let mut freq = format!("{FREQUENCY_HEADER}\n");
    let mut monitor = format!("{Z_MONITOR_HEADER}\n");
    for row in csv_rows(&packets, PACKETS_HEADER, &packets_path)? {
        let [t, dev, _seq, est, z, _stored] = row[..] else {
            return Err(CliError::Config(format!("{}: bad row", packets_path.display())));
        };
        if est.is_empty() {
            continue;
        }
        let _ = writeln!(freq, "{t},{dev},{est}");
        if let (Ok(x), Ok(zv)) = (est.parse::<f64>(), z.parse::<f64>()) {
            let _ = writeln!(monitor, "{t},{dev},{z},{est},{}", (x - zv).abs());
        }
    }
    write_file(&out.join(FREQUENCY), &freq)?;
    write_file(&out.join(Z_MONITOR), &monitor)?;
    let resources = read_file(&out.join(RESOURCES))?;
    write_file(&out.join(RESOURCE_CONSUMPTION), &resources)?;

    let mut text = String::new();
    let summary_path = out.join(SUMMARY);
    let summary = read_file(&summary_path)?;
    let _ = writeln!(text, "{:<8} {:>12} {:>12} {:>10}", "device", "theoretical", "estimated", "abs error");
    for row in csv_rows(&summary, SUMMARY_HEADER, &summary_path)? {
        if let [dev, x, est, err] = row[..] {
            let _ = writeln!(text, "{dev:<8} {x:>12.12} {est:>12.12} {err:>10.10}");
        }
    }
    let utility_path = out.join(UTILITY);
    let utility = read_file(&utility_path)?;
    let _ = writeln!(text);
    for row in csv_rows(&utility, UTILITY_HEADER, &utility_path)? {
        if let [label, v, reference, gap] = row[..] {
            let v: f64 = v.parse().unwrap_or(f64::NAN);
            let _ = if reference.is_empty() {
                writeln!(text, "{label:<13} utility {v:.4}")
            } else {
                writeln!(text, "{label:<13} utility {v:.4}, published {reference}, gap {gap:.8}")
            };
        }
    }
    let events = read_file(&out.join(EVENTS))?;
    let alerts = events.lines().filter(|l| l.contains("\"event\":\"alert\"")).count();
    let _ = writeln!(text, "\nalerts: {alerts}");
    Ok(text)
}
