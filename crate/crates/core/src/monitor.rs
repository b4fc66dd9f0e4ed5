//! Frequency estimation from packet arrivals and deviation alarms.

use serde::{Deserialize, Serialize};

use crate::clock::{to_secs, Nanos};

pub const DEFAULT_WINDOW: usize = 300;
pub const DEFAULT_MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub device_id: String,
    pub estimated_rate: f64,
    pub sample_count: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyEvent {
    pub device_id: String,
    pub estimated_rate: f64,
    pub reference_z: f64,
    pub delta: f64,
    pub deviation: f64,
    pub detected_at: Nanos,
}

/// Average frequency `(n-1)/span` over the newest `min(n, window)` arrivals.
///
/// `arrivals` must be non-decreasing. Returns `None` with fewer than two
/// samples or a zero span.
pub fn estimate_rate(device_id: &str, arrivals: &[Nanos], window: usize) -> Option<RateEstimate> {
    let recent = &arrivals[arrivals.len().saturating_sub(window)..];
    if recent.len() < 2 {
        return None;
    }
    let span = recent[recent.len() - 1].checked_sub(recent[0])?;
    if span == 0 {
        return None;
    }
    Some(RateEstimate {
        device_id: device_id.to_string(),
        estimated_rate: (recent.len() - 1) as f64 / to_secs(span),
        sample_count: recent.len(),
        window,
    })
}

/// Flags `est` when it sits at least `delta` away from the negotiated rate.
/// Estimates built from fewer than `min_samples` arrivals never fire.
pub fn detect_anomaly(
    est: &RateEstimate,
    reference_z: f64,
    delta: f64,
    min_samples: usize,
    now: Nanos,
) -> Option<AnomalyEvent> {
    if est.sample_count < min_samples.max(2) {
        return None;
    }
    let deviation = (est.estimated_rate - reference_z).abs();
    (deviation >= delta).then(|| AnomalyEvent {
        device_id: est.device_id.clone(),
        estimated_rate: est.estimated_rate,
        reference_z,
        delta,
        deviation,
        detected_at: now,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaKeyword {
    Auto,
}

/// Alarm threshold: a fixed value in Hz, or `"auto"` to scale with the rate
/// and the latency bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSetting {
    Fixed(f64),
    Keyword(DeltaKeyword),
}

impl Default for DeltaSetting {
    fn default() -> Self {
        DeltaSetting::Keyword(DeltaKeyword::Auto)
    }
}

impl DeltaSetting {
    /// Threshold for a device negotiated at `z` Hz. The automatic rule is
    /// three times the decay a blocking send of `latency_bound` seconds
    /// causes, floored at 0.1 Hz.
    pub fn resolve(&self, z: f64, latency_bound: f64) -> f64 {
        match *self {
            DeltaSetting::Fixed(d) => d,
            DeltaSetting::Keyword(DeltaKeyword::Auto) => (3.0 * z * latency_bound * z).max(0.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub delta: DeltaSetting,
    pub window: usize,
    pub min_samples: usize,
    pub auto_remediate: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            delta: DeltaSetting::default(),
            window: DEFAULT_WINDOW,
            min_samples: DEFAULT_MIN_SAMPLES,
            auto_remediate: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::from_secs;

    fn periodic(period: f64, n: usize) -> Vec<Nanos> {
        (0..n).map(|i| from_secs(period * i as f64)).collect()
    }

    fn est(rate: f64, n: usize) -> RateEstimate {
        RateEstimate {
            device_id: "d".into(),
            estimated_rate: rate,
            sample_count: n,
            window: 300,
        }
    }

    #[test]
    fn estimates() {
        let e = estimate_rate("d", &periodic(0.25, 4), 300).unwrap();
        assert!((e.estimated_rate - 4.0).abs() < 1e-12);
        assert_eq!(e.sample_count, 4);
        let e = estimate_rate("d", &periodic(1.0016, 400), 300).unwrap();
        assert!((e.estimated_rate - 0.9984).abs() < 1e-4);
        assert_eq!(e.sample_count, 300);
        let e = estimate_rate("d", &periodic(0.3787, 50), 300).unwrap();
        assert!((e.estimated_rate - 2.6406).abs() < 1e-4);
    }

    #[test]
    fn insufficient_data() {
        assert!(estimate_rate("d", &[], 300).is_none());
        assert!(estimate_rate("d", &[5], 300).is_none());
        assert!(estimate_rate("d", &[5, 5], 300).is_none());
    }

    #[test]
    fn window_uses_newest_arrivals() {
        let mut arrivals = periodic(1.0, 10);
        let last = *arrivals.last().unwrap();
        arrivals.extend((1..=10).map(|i| last + from_secs(0.5 * i as f64)));
        let e = estimate_rate("d", &arrivals, 5).unwrap();
        assert!((e.estimated_rate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn anomaly_examples() {
        assert!(detect_anomaly(&est(3.9324, 300), 4.0, 0.2, 30, 0).is_none());
        let ev = detect_anomaly(&est(5.0, 300), 8.0 / 3.0, 0.2, 30, 7).unwrap();
        assert!((ev.deviation - 2.3333).abs() < 1e-4);
        assert_eq!(ev.detected_at, 7);
        assert!(detect_anomaly(&est(4.0, 300), 4.0, 1e-12, 30, 0).is_none());
        // warm-up
        assert!(detect_anomaly(&est(5.0, 29), 8.0 / 3.0, 0.2, 30, 0).is_none());
    }

    #[test]
    fn auto_delta() {
        let auto = DeltaSetting::default();
        assert_eq!(auto.resolve(1.0, 0.005), 0.1);
        assert!((auto.resolve(4.0, 0.005) - 0.24).abs() < 1e-12);
        assert_eq!(DeltaSetting::Fixed(0.2).resolve(4.0, 1.0), 0.2);
    }
}
