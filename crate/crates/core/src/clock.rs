//! Logical time in integer nanoseconds.

pub type Nanos = u64;

pub const NANOS_PER_SEC: Nanos = 1_000_000_000;

/// Seconds to nanoseconds, rounded to the nearest nanosecond.
pub fn from_secs(secs: f64) -> Nanos {
    assert!(secs >= 0.0 && secs.is_finite(), "invalid duration {secs}");
    (secs * NANOS_PER_SEC as f64).round() as Nanos
}

pub fn to_secs(t: Nanos) -> f64 {
    t as f64 / NANOS_PER_SEC as f64
}

/// Send period of a rate in Hz.
pub fn period_of(rate_hz: f64) -> Nanos {
    from_secs(1.0 / rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(from_secs(0.0016), 1_600_000);
        assert_eq!(period_of(4.0), 250_000_000);
        assert_eq!(period_of(8.0 / 3.0), 375_000_000);
        assert_eq!(to_secs(1_500_000_000), 1.5);
    }
}
