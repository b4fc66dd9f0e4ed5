//! Line-oriented wire format between device agents and the gateway.
//!
//! Every message is one JSON object on one line:
//!
//! ```text
//! {"device_id":"dev2","round":7,"s":3.25,"tag":"X_REPORT"}
//! ```
//!
//! `tag`, `device_id` and `round` are common to all messages; the remaining
//! keys depend on the tag (see [`SCHEMA`]). Keys are written in sorted order,
//! so encoding is deterministic. Floats are written in shortest round-trip
//! form and parsed back bit-exactly. The schema has no field that could
//! carry utility-function data, and nothing outside [`SCHEMA`] is accepted.

use std::collections::BTreeMap;

use serde_json::{Map, Number, Value};

use crate::error::ProtocolError;

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub device_id: String,
    /// ADMM round the message belongs to; 0 where not applicable.
    pub round: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Device → gateway: join request with the public device parameters.
    Hello { a: f64, gamma: f64 },
    /// Gateway → device: join outcome, penalty and budget echo.
    JoinAck {
        accepted: bool,
        index: u64,
        rho: f64,
        c: f64,
        d: f64,
        reason: String,
    },
    /// Device → gateway: masked report `s = x^{k+1} + u^k`.
    XReport { s: f64 },
    /// Gateway → device: consensus vector keyed by device id.
    ZBroadcast {
        z: BTreeMap<String, f64>,
        session_start: bool,
    },
    /// Gateway → device: negotiated rates, switch to transmitting.
    Converged { z: BTreeMap<String, f64> },
    /// Device → gateway: one data write.
    Data { seq: u64, send_ts_us: u64, size: f64 },
    /// Gateway → device: estimated rate deviates from the reference.
    Alert {
        estimated_rate: f64,
        reference_z: f64,
        delta: f64,
    },
    Leave,
}

/// Tag and payload field names of every message type. Frozen; see PROTOCOL.md.
pub const SCHEMA: &[(&str, &[&str])] = &[
    ("HELLO", &["a", "gamma"]),
    ("JOIN_ACK", &["accepted", "index", "rho", "c", "d", "reason"]),
    ("X_REPORT", &["s"]),
    ("Z_BROADCAST", &["z", "session_start"]),
    ("CONVERGED", &["z"]),
    ("DATA", &["seq", "send_ts_us", "size"]),
    ("ALERT", &["estimated_rate", "reference_z", "delta"]),
    ("LEAVE", &[]),
];

/// Fields present on every record.
pub const COMMON_FIELDS: &[&str] = &["tag", "device_id", "round"];

impl Payload {
    pub fn tag(&self) -> &'static str {
        match self {
            Payload::Hello { .. } => "HELLO",
            Payload::JoinAck { .. } => "JOIN_ACK",
            Payload::XReport { .. } => "X_REPORT",
            Payload::ZBroadcast { .. } => "Z_BROADCAST",
            Payload::Converged { .. } => "CONVERGED",
            Payload::Data { .. } => "DATA",
            Payload::Alert { .. } => "ALERT",
            Payload::Leave => "LEAVE",
        }
    }
}

impl WireMessage {
    pub fn new(device_id: impl Into<String>, round: u64, payload: Payload) -> Self {
        Self {
            device_id: device_id.into(),
            round,
            payload,
        }
    }

    pub fn tag(&self) -> &'static str {
        self.payload.tag()
    }
}

fn float(field: &str, v: f64) -> Result<Value> {
    Number::from_f64(v)
        .map(Value::Number)
        .ok_or_else(|| ProtocolError::Unencodable {
            field: field.to_string(),
            reason: format!("non-finite value {v}"),
        })
}

fn rate_map(field: &str, z: &BTreeMap<String, f64>) -> Result<Value> {
    let mut out = Map::new();
    for (id, v) in z {
        out.insert(id.clone(), float(&format!("{field}.{id}"), *v)?);
    }
    Ok(Value::Object(out))
}

/// Serializes `m` as one newline-terminated record.
pub fn encode(m: &WireMessage) -> Result<Vec<u8>> {
    let mut line = encode_line(m)?;
    line.push('\n');
    Ok(line.into_bytes())
}

/// [`encode`] without the trailing newline.
pub fn encode_line(m: &WireMessage) -> Result<String> {
    if m.device_id.is_empty() {
        return Err(ProtocolError::Unencodable {
            field: "device_id".into(),
            reason: "empty device id".into(),
        });
    }
    let mut obj = Map::new();
    obj.insert("tag".into(), Value::from(m.tag()));
    obj.insert("device_id".into(), Value::from(m.device_id.as_str()));
    obj.insert("round".into(), Value::from(m.round));
    match &m.payload {
        Payload::Hello { a, gamma } => {
            obj.insert("a".into(), float("a", *a)?);
            obj.insert("gamma".into(), float("gamma", *gamma)?);
        }
        Payload::JoinAck {
            accepted,
            index,
            rho,
            c,
            d,
            reason,
        } => {
            obj.insert("accepted".into(), Value::from(*accepted));
            obj.insert("index".into(), Value::from(*index));
            obj.insert("rho".into(), float("rho", *rho)?);
            obj.insert("c".into(), float("c", *c)?);
            obj.insert("d".into(), float("d", *d)?);
            obj.insert("reason".into(), Value::from(reason.as_str()));
        }
        Payload::XReport { s } => {
            obj.insert("s".into(), float("s", *s)?);
        }
        Payload::ZBroadcast { z, session_start } => {
            obj.insert("z".into(), rate_map("z", z)?);
            obj.insert("session_start".into(), Value::from(*session_start));
        }
        Payload::Converged { z } => {
            obj.insert("z".into(), rate_map("z", z)?);
        }
        Payload::Data {
            seq,
            send_ts_us,
            size,
        } => {
            obj.insert("seq".into(), Value::from(*seq));
            obj.insert("send_ts_us".into(), Value::from(*send_ts_us));
            obj.insert("size".into(), float("size", *size)?);
        }
        Payload::Alert {
            estimated_rate,
            reference_z,
            delta,
        } => {
            obj.insert("estimated_rate".into(), float("estimated_rate", *estimated_rate)?);
            obj.insert("reference_z".into(), float("reference_z", *reference_z)?);
            obj.insert("delta".into(), float("delta", *delta)?);
        }
        Payload::Leave => {}
    }
    serde_json::to_string(&Value::Object(obj)).map_err(|e| ProtocolError::Unencodable {
        field: "<record>".into(),
        reason: e.to_string(),
    })
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
}

impl Fields<'_> {
    fn get(&self, field: &str) -> Result<&Value> {
        self.obj
            .get(field)
            .ok_or_else(|| ProtocolError::malformed(field, "missing"))
    }

    fn f64(&self, field: &str) -> Result<f64> {
        self.get(field)?
            .as_f64()
            .ok_or_else(|| ProtocolError::malformed(field, "expected a number"))
    }

    fn u64(&self, field: &str) -> Result<u64> {
        self.get(field)?
            .as_u64()
            .ok_or_else(|| ProtocolError::malformed(field, "expected a non-negative integer"))
    }

    fn bool(&self, field: &str) -> Result<bool> {
        self.get(field)?
            .as_bool()
            .ok_or_else(|| ProtocolError::malformed(field, "expected a boolean"))
    }

    fn str(&self, field: &str) -> Result<&str> {
        self.get(field)?
            .as_str()
            .ok_or_else(|| ProtocolError::malformed(field, "expected a string"))
    }

    fn rate_map(&self, field: &str) -> Result<BTreeMap<String, f64>> {
        let map = self
            .get(field)?
            .as_object()
            .ok_or_else(|| ProtocolError::malformed(field, "expected an object"))?;
        map.iter()
            .map(|(k, v)| {
                v.as_f64()
                    .map(|v| (k.clone(), v))
                    .ok_or_else(|| ProtocolError::malformed(format!("{field}.{k}"), "expected a number"))
            })
            .collect()
    }
}

/// Parses one record; a single trailing `\n` (or `\r\n`) is allowed.
pub fn decode(line: &[u8]) -> Result<WireMessage> {
    let text = std::str::from_utf8(line)
        .map_err(|e| ProtocolError::malformed("<record>", format!("invalid UTF-8: {e}")))?;
    let text = text
        .strip_suffix('\n')
        .map(|t| t.strip_suffix('\r').unwrap_or(t))
        .unwrap_or(text);
    if text.contains('\n') {
        return Err(ProtocolError::malformed("<record>", "embedded newline"));
    }
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ProtocolError::malformed("<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError::malformed("<record>", "expected an object"))?;
    let f = Fields { obj };

    let tag = f.str("tag")?;
    let Some((_, payload_fields)) = SCHEMA.iter().find(|(t, _)| *t == tag) else {
        return Err(ProtocolError::UnknownTag(tag.to_string()));
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !COMMON_FIELDS.contains(&k.as_str()) && !payload_fields.contains(&k.as_str()))
    {
        return Err(ProtocolError::malformed(extra.as_str(), format!("not a {tag} field")));
    }
    let device_id = f.str("device_id")?;
    if device_id.is_empty() {
        return Err(ProtocolError::malformed("device_id", "empty"));
    }
    let round = f.u64("round")?;

    let payload = match tag {
        "HELLO" => Payload::Hello {
            a: f.f64("a")?,
            gamma: f.f64("gamma")?,
        },
        "JOIN_ACK" => Payload::JoinAck {
            accepted: f.bool("accepted")?,
            index: f.u64("index")?,
            rho: f.f64("rho")?,
            c: f.f64("c")?,
            d: f.f64("d")?,
            reason: f.str("reason")?.to_string(),
        },
        "X_REPORT" => Payload::XReport { s: f.f64("s")? },
        "Z_BROADCAST" => Payload::ZBroadcast {
            z: f.rate_map("z")?,
            session_start: f.bool("session_start")?,
        },
        "CONVERGED" => Payload::Converged {
            z: f.rate_map("z")?,
        },
        "DATA" => Payload::Data {
            seq: f.u64("seq")?,
            send_ts_us: f.u64("send_ts_us")?,
            size: f.f64("size")?,
        },
        "ALERT" => Payload::Alert {
            estimated_rate: f.f64("estimated_rate")?,
            reference_z: f.f64("reference_z")?,
            delta: f.f64("delta")?,
        },
        "LEAVE" => Payload::Leave,
        _ => unreachable!("tag checked against SCHEMA"),
    };
    Ok(WireMessage {
        device_id: device_id.to_string(),
        round,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_report_line() {
        let m = WireMessage::new("dev2", 7, Payload::XReport { s: 3.25 });
        let bytes = encode(&m).unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            "{\"device_id\":\"dev2\",\"round\":7,\"s\":3.25,\"tag\":\"X_REPORT\"}\n"
        );
        assert_eq!(bytes.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn z_broadcast_key_order_irrelevant() {
        let line = br#"{"tag":"Z_BROADCAST","round":3,"device_id":"dev1","session_start":false,"z":{"dev2":4.0,"dev1":1.0}}"#;
        let m = decode(line).unwrap();
        let mut z = BTreeMap::new();
        z.insert("dev1".to_string(), 1.0);
        z.insert("dev2".to_string(), 4.0);
        assert_eq!(
            m,
            WireMessage::new(
                "dev1",
                3,
                Payload::ZBroadcast {
                    z,
                    session_start: false
                }
            )
        );
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn hello_decodes() {
        let m = decode(b"{\"tag\":\"HELLO\",\"device_id\":\"dev3\",\"round\":0,\"a\":5,\"gamma\":1}\n").unwrap();
        assert_eq!(m, WireMessage::new("dev3", 0, Payload::Hello { a: 5.0, gamma: 1.0 }));
    }

    #[test]
    fn truncated_line_is_malformed() {
        let full = encode(&WireMessage::new("dev1", 1, Payload::XReport { s: 1.5 })).unwrap();
        let cut = &full[..full.len() / 2];
        assert!(matches!(decode(cut), Err(ProtocolError::Malformed { .. })));
        assert!(matches!(decode(b""), Err(ProtocolError::Malformed { .. })));
    }

    #[test]
    fn unknown_tag_is_versioning_error() {
        let line = br#"{"tag":"X_REPORT_V2","device_id":"dev1","round":1,"s":1.0}"#;
        assert_eq!(decode(line), Err(ProtocolError::UnknownTag("X_REPORT_V2".into())));
    }

    #[test]
    fn errors_name_the_field() {
        let missing = br#"{"tag":"X_REPORT","device_id":"dev1","round":1}"#;
        assert_eq!(
            decode(missing),
            Err(ProtocolError::malformed("s", "missing"))
        );
        let wrong_type = br#"{"tag":"DATA","device_id":"dev1","round":0,"seq":-1,"send_ts_us":5,"size":2}"#;
        assert!(matches!(decode(wrong_type), Err(ProtocolError::Malformed { field, .. }) if field == "seq"));
        let extra = br#"{"tag":"HELLO","device_id":"dev1","round":0,"a":1,"gamma":1,"coefficients":[1,2]}"#;
        assert!(matches!(decode(extra), Err(ProtocolError::Malformed { field, .. }) if field == "coefficients"));
        let bad_map = br#"{"tag":"CONVERGED","device_id":"dev1","round":0,"z":{"dev1":"x"}}"#;
        assert!(matches!(decode(bad_map), Err(ProtocolError::Malformed { field, .. }) if field == "z.dev1"));
    }

    #[test]
    fn non_finite_values_are_unencodable() {
        let m = WireMessage::new("dev1", 0, Payload::XReport { s: f64::NAN });
        assert!(matches!(encode(&m), Err(ProtocolError::Unencodable { field, .. }) if field == "s"));
        let empty_id = WireMessage::new("", 0, Payload::Leave);
        assert!(encode(&empty_id).is_err());
    }

    #[test]
    fn schema_covers_every_tag() {
        let samples = [
            Payload::Hello { a: 1.0, gamma: 1.0 },
            Payload::JoinAck {
                accepted: true,
                index: 0,
                rho: 1.0,
                c: 1.0,
                d: 1.0,
                reason: String::new(),
            },
            Payload::XReport { s: 0.0 },
            Payload::ZBroadcast {
                z: BTreeMap::new(),
                session_start: true,
            },
            Payload::Converged { z: BTreeMap::new() },
            Payload::Data {
                seq: 0,
                send_ts_us: 0,
                size: 1.0,
            },
            Payload::Alert {
                estimated_rate: 0.0,
                reference_z: 0.0,
                delta: 0.0,
            },
            Payload::Leave,
        ];
        for p in samples {
            let line = encode_line(&WireMessage::new("d", 0, p.clone())).unwrap();
            let value: Value = serde_json::from_str(&line).unwrap();
            let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
            let (_, fields) = SCHEMA.iter().find(|(t, _)| *t == p.tag()).unwrap();
            let mut expected: Vec<&str> = COMMON_FIELDS.iter().chain(fields.iter()).copied().collect();
            keys.sort_unstable();
            expected.sort_unstable();
            assert_eq!(keys, expected, "{}", p.tag());
        }
    }
}
