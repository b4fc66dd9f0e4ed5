//! Rate- and storage-limited cloud store behind the gateway.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::RangeBounds;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Nanos, NANOS_PER_SEC};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkQuota {
    /// Accepted writes allowed in any trailing one-second window.
    pub max_writes_per_sec: f64,
    /// Total data volume the store will hold.
    pub max_storage: f64,
}

impl Default for SinkQuota {
    fn default() -> Self {
        Self {
            max_writes_per_sec: 10.0,
            max_storage: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRecord {
    pub device_id: String,
    pub seq: u64,
    pub send_ts_us: u64,
    pub arrival_ns: Nanos,
    pub size: f64,
}

impl SinkRecord {
    pub const CSV_HEADER: &'static str = "device_id,seq,send_ts_us,arrival_ns,size";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.device_id, self.seq, self.send_ts_us, self.arrival_ns, self.size
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let mut it = line.trim_end().split(',');
        let rec = SinkRecord {
            device_id: it.next()?.to_string(),
            seq: it.next()?.parse().ok()?,
            send_ts_us: it.next()?.parse().ok()?,
            arrival_ns: it.next()?.parse().ok()?,
            size: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkRejection {
    #[error("write quota exhausted for the current second")]
    Congestion,
    #[error("storage quota exhausted")]
    StorageFull,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RejectionCounts {
    pub congestion: u64,
    pub storage_full: u64,
}

pub struct CloudSink {
    quota: SinkQuota,
    window: VecDeque<Nanos>,
    used_storage: f64,
    records: Vec<SinkRecord>,
    rejections: BTreeMap<String, RejectionCounts>,
    log: Option<BufWriter<File>>,
}

impl std::fmt::Debug for CloudSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CloudSink")
            .field("quota", &self.quota)
            .field("used_storage", &self.used_storage)
            .field("records", &self.records.len())
            .finish()
    }
}

impl CloudSink {
    pub fn new(quota: SinkQuota) -> Self {
        Self {
            quota,
            window: VecDeque::new(),
            used_storage: 0.0,
            records: Vec::new(),
            rejections: BTreeMap::new(),
            log: None,
        }
    }

    /// Also appends every accepted record to `path` as a CSV line.
    pub fn with_log(quota: SinkQuota, path: &Path) -> std::io::Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut log = BufWriter::new(file);
        if fresh {
            writeln!(log, "{}", SinkRecord::CSV_HEADER)?;
        }
        let mut sink = Self::new(quota);
        sink.log = Some(log);
        Ok(sink)
    }

    pub fn quota(&self) -> SinkQuota {
        self.quota
    }

    pub fn used_storage(&self) -> f64 {
        self.used_storage
    }

    /// Stores one packet; each call is exactly one write against the quota.
    pub fn write(&mut self, record: SinkRecord, now: Nanos) -> Result<(), SinkRejection> {
        while let Some(&t) = self.window.front() {
            if t + NANOS_PER_SEC <= now {
                self.window.pop_front();
            } else {
                break;
            }
        }
        let verdict = if (self.window.len() as f64) >= self.quota.max_writes_per_sec {
            Err(SinkRejection::Congestion)
        } else if self.used_storage + record.size > self.quota.max_storage {
            Err(SinkRejection::StorageFull)
        } else {
            Ok(())
        };
        if let Err(why) = verdict {
            let counts = self.rejections.entry(record.device_id).or_default();
            match why {
                SinkRejection::Congestion => counts.congestion += 1,
                SinkRejection::StorageFull => counts.storage_full += 1,
            }
            return Err(why);
        }
        self.window.push_back(now);
        self.used_storage += record.size;
        if let Some(log) = self.log.as_mut() {
            if let Err(e) = writeln!(log, "{}", record.to_csv()) {
                log::error!("sink log write failed: {e}");
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Accepted records whose arrival time lies in `range`, in arrival order.
    pub fn dump(&self, range: impl RangeBounds<Nanos>) -> Vec<&SinkRecord> {
        self.records.iter().filter(|r| range.contains(&r.arrival_ns)).collect()
    }

    pub fn records(&self) -> &[SinkRecord] {
        &self.records
    }

    pub fn rejections(&self) -> &BTreeMap<String, RejectionCounts> {
        &self.rejections
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        match self.log.as_mut() {
            Some(log) => log.flush(),
            None => Ok(()),
        }
    }
}

impl Drop for CloudSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::from_secs;

    fn rec(seq: u64, at: Nanos) -> SinkRecord {
        SinkRecord {
            device_id: "dev1".into(),
            seq,
            send_ts_us: at / 1000,
            arrival_ns: at,
            size: 2.0,
        }
    }

    #[test]
    fn eleventh_write_in_a_second_is_congestion() {
        let mut sink = CloudSink::new(SinkQuota::default());
        for i in 0..10 {
            assert!(sink.write(rec(i, from_secs(0.05 * i as f64)), from_secs(0.05 * i as f64)).is_ok());
        }
        assert_eq!(sink.write(rec(10, from_secs(0.6)), from_secs(0.6)), Err(SinkRejection::Congestion));
        // the first write leaves the window one second after it happened
        assert!(sink.write(rec(11, from_secs(1.0)), from_secs(1.0)).is_ok());
        assert_eq!(sink.rejections()["dev1"].congestion, 1);
    }

    #[test]
    fn storage_cap() {
        let mut sink = CloudSink::new(SinkQuota {
            max_writes_per_sec: 100.0,
            max_storage: 5.0,
        });
        assert!(sink.write(rec(0, 0), 0).is_ok());
        assert!(sink.write(rec(1, 1), 1).is_ok());
        assert_eq!(sink.write(rec(2, 2), 2), Err(SinkRejection::StorageFull));
        assert_eq!(sink.used_storage(), 4.0);
    }

    #[test]
    fn dump_filters_by_arrival() {
        let mut sink = CloudSink::new(SinkQuota::default());
        for i in 0..5 {
            sink.write(rec(i, from_secs(i as f64)), from_secs(i as f64)).unwrap();
        }
        let seqs: Vec<u64> = sink.dump(from_secs(1.0)..from_secs(3.0)).iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let r = rec(3, 123_456_789);
        assert_eq!(SinkRecord::from_csv(&r.to_csv()), Some(r));
        assert_eq!(SinkRecord::from_csv("a,1,2"), None);
    }
}
