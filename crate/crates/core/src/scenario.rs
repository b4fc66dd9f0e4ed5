//! Scenario description: gateway and transport settings plus the device
//! roster. The gateway section carries budgets only; utilities live with
//! the devices.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::agent::DeviceSpec;
use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::gateway::GatewayConfig;
use crate::transport::TransportConfig;
use crate::utility::{default_domain_max, UtilityFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationConfig {
    pub override_rate: f64,
    pub at_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub id: String,
    pub a: f64,
    pub gamma: f64,
    /// Polynomial coefficients, constant term first.
    pub utility: Vec<f64>,
    #[serde(default)]
    pub domain_max: Option<f64>,
    #[serde(default)]
    pub join_time: f64,
    #[serde(default)]
    pub leave_time: Option<f64>,
    #[serde(default)]
    pub manipulation: Option<ManipulationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Length of the run, seconds.
    pub duration: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: f64,
    #[serde(default = "default_projection")]
    pub projection: String,
}

fn default_sample_interval() -> f64 {
    1.0
}
fn default_projection() -> String {
    "dykstra".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    pub run: RunConfig,
    /// Published figures to compare computed utilities against, by label.
    #[serde(default)]
    pub reference: BTreeMap<String, f64>,
    pub devices: Vec<DeviceConfig>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        self.gateway.validate()?;
        self.transport.validate()?;
        if self.devices.is_empty() {
            return bad("scenario needs at least one device".into());
        }
        let mut seen = BTreeSet::new();
        for dev in &self.devices {
            if dev.id.is_empty() || dev.id.contains(char::is_whitespace) || dev.id == crate::transport::GATEWAY {
                return bad(format!("invalid device id `{}`", dev.id));
            }
            if !seen.insert(dev.id.as_str()) {
                return bad(format!("duplicate device id `{}`", dev.id));
            }
            if !(dev.join_time.is_finite() && dev.join_time >= 0.0) {
                return bad(format!("{}: join_time must be >= 0", dev.id));
            }
            if let Some(t) = dev.leave_time {
                if !(t.is_finite() && t > dev.join_time) {
                    return bad(format!("{}: leave_time must follow join_time", dev.id));
                }
            }
            if let Some(m) = &dev.manipulation {
                if !(m.override_rate.is_finite() && m.override_rate > 0.0 && m.at_time.is_finite() && m.at_time >= 0.0) {
                    return bad(format!("{}: manipulation needs a positive rate and time", dev.id));
                }
            }
        }
        if let Some(id) = self.transport.latency.keys().find(|id| !seen.contains(id.as_str())) {
            return bad(format!("latency given for unknown device `{id}`"));
        }
        if !(self.run.duration.is_finite() && self.run.duration > 0.0) {
            return bad("run duration must be positive".into());
        }
        if !(self.run.sample_interval.is_finite() && self.run.sample_interval > 0.0) {
            return bad("sample interval must be positive".into());
        }
        Ok(())
    }

    /// Domain bound shared by utilities that do not set their own.
    pub fn domain_max(&self) -> f64 {
        let sizes: Vec<f64> = self.devices.iter().map(|d| d.a).collect();
        default_domain_max(self.gateway.c, self.gateway.d, &sizes)
    }

    pub fn device_specs(&self) -> Result<Vec<DeviceSpec>> {
        let shared = self.domain_max();
        self.devices
            .iter()
            .map(|d| {
                Ok(DeviceSpec {
                    id: d.id.clone(),
                    a: d.a,
                    gamma: d.gamma,
                    utility: UtilityFunction::concave(d.utility.clone(), d.domain_max.unwrap_or(shared))
                        .map_err(|e| Error::InvalidInput(format!("{}: {e}", d.id)))?,
                })
            })
            .collect()
    }

    /// Constraint set for a subset of devices, in id order.
    pub fn constraint_set_for(&self, ids: &[&str]) -> Result<ConstraintSet> {
        let mut devs: Vec<&DeviceConfig> = self.devices.iter().filter(|d| ids.contains(&d.id.as_str())).collect();
        devs.sort_by(|a, b| a.id.cmp(&b.id));
        ConstraintSet::new(
            self.gateway.c,
            self.gateway.d,
            devs.iter().map(|d| d.a).collect(),
            devs.iter().map(|d| d.gamma).collect(),
        )
    }

    /// Constraint set with every device present, in id order.
    pub fn full_constraint_set(&self) -> Result<ConstraintSet> {
        let ids: Vec<&str> = self.devices.iter().map(|d| d.id.as_str()).collect();
        self.constraint_set_for(&ids)
    }

    /// Utilities in id order, matching [`Self::full_constraint_set`].
    pub fn utilities(&self) -> Result<Vec<UtilityFunction>> {
        let mut specs = self.device_specs()?;
        specs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(specs.into_iter().map(|s| s.utility).collect())
    }

    pub fn sorted_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.devices.iter().map(|d| d.id.clone()).collect();
        ids.sort();
        ids
    }
}
