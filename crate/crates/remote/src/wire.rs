//! Line-delimited JSON wire format and topic naming.
//!
//! Every message is one flat JSON object carrying `kind`, `vehicle_id` and
//! `seq` plus kind-specific fields. Unknown keys are ignored on decode.

use ipp_core::graph::NodeId;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Goto {
        node: NodeId,
        lat: f64,
        lon: f64,
        /// Fleet clock when the command was issued; backends never run behind it.
        issued_at: f64,
    },
    Ack {
        acked_seq: u64,
        reached: bool,
        node: NodeId,
        sim_time: f64,
        /// Measurements published for the acknowledged command.
        samples: u32,
    },
    State {
        lat: f64,
        lon: f64,
        sim_time: f64,
        wall_time: f64,
    },
    Measurement {
        node: NodeId,
        value: f64,
        parameter: String,
        cmd_seq: u64,
    },
    Error {
        ref_seq: u64,
        code: String,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub vehicle_id: String,
    pub seq: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self.payload {
            Payload::Goto { .. } => "goto",
            Payload::Ack { .. } => "ack",
            Payload::State { .. } => "state",
            Payload::Measurement { .. } => "measurement",
            Payload::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("malformed message: {0}")]
    Syntax(String),
    #[error("field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
}

fn bad(field: &'static str, reason: impl Into<String>) -> DecodeError {
    DecodeError::Field {
        field,
        reason: reason.into(),
    }
}

pub fn to_value(msg: &WireMessage) -> Value {
    let mut m = Map::new();
    m.insert("kind".into(), msg.kind().into());
    m.insert("vehicle_id".into(), msg.vehicle_id.clone().into());
    m.insert("seq".into(), msg.seq.into());
    match &msg.payload {
        Payload::Goto {
            node,
            lat,
            lon,
            issued_at,
        } => {
            m.insert("node".into(), node.0.into());
            m.insert("lat".into(), (*lat).into());
            m.insert("lon".into(), (*lon).into());
            m.insert("issued_at".into(), (*issued_at).into());
        }
        Payload::Ack {
            acked_seq,
            reached,
            node,
            sim_time,
            samples,
        } => {
            m.insert("acked_seq".into(), (*acked_seq).into());
            m.insert("reached".into(), (*reached).into());
            m.insert("node".into(), node.0.into());
            m.insert("sim_time".into(), (*sim_time).into());
            m.insert("samples".into(), (*samples).into());
        }
        Payload::State {
            lat,
            lon,
            sim_time,
            wall_time,
        } => {
            m.insert("lat".into(), (*lat).into());
            m.insert("lon".into(), (*lon).into());
            m.insert("sim_time".into(), (*sim_time).into());
            m.insert("wall_time".into(), (*wall_time).into());
        }
        Payload::Measurement {
            node,
            value,
            parameter,
            cmd_seq,
        } => {
            m.insert("node".into(), node.0.into());
            m.insert("value".into(), (*value).into());
            m.insert("parameter".into(), parameter.clone().into());
            m.insert("cmd_seq".into(), (*cmd_seq).into());
        }
        Payload::Error {
            ref_seq,
            code,
            message,
        } => {
            m.insert("ref_seq".into(), (*ref_seq).into());
            m.insert("code".into(), code.clone().into());
            m.insert("message".into(), message.clone().into());
        }
    }
    Value::Object(m)
}

/// Single-line encoding. Floats must be finite.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    serde_json::to_vec(&to_value(msg)).expect("JSON values always serialize")
}

struct Fields<'a>(&'a Map<String, Value>);

impl Fields<'_> {
    fn get(&self, field: &'static str) -> Result<&Value, DecodeError> {
        self.0.get(field).ok_or_else(|| bad(field, "missing"))
    }

    fn u64(&self, field: &'static str) -> Result<u64, DecodeError> {
        self.get(field)?
            .as_u64()
            .ok_or_else(|| bad(field, "expected a non-negative integer"))
    }

    fn u32(&self, field: &'static str) -> Result<u32, DecodeError> {
        u32::try_from(self.u64(field)?).map_err(|_| bad(field, "out of range"))
    }

    fn node(&self, field: &'static str) -> Result<NodeId, DecodeError> {
        let n = self.u64(field)?;
        usize::try_from(n)
            .map(NodeId)
            .map_err(|_| bad(field, "out of range"))
    }

    fn f64(&self, field: &'static str) -> Result<f64, DecodeError> {
        self.get(field)?
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(field, "expected a finite number"))
    }

    fn bool(&self, field: &'static str) -> Result<bool, DecodeError> {
        self.get(field)?
            .as_bool()
            .ok_or_else(|| bad(field, "expected a boolean"))
    }

    fn string(&self, field: &'static str) -> Result<String, DecodeError> {
        self.get(field)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| bad(field, "expected a string"))
    }
}

pub fn from_value(v: &Value) -> Result<WireMessage, DecodeError> {
    let obj = v
        .as_object()
        .ok_or_else(|| DecodeError::Syntax("expected a JSON object".into()))?;
    let f = Fields(obj);
    let kind = f.string("kind")?;
    let vehicle_id = f.string("vehicle_id")?;
    if !valid_vehicle_id(&vehicle_id) {
        return Err(bad("vehicle_id", "empty or contains topic separators"));
    }
    let seq = f.u64("seq")?;
    let payload = match kind.as_str() {
        "goto" => Payload::Goto {
            node: f.node("node")?,
            lat: f.f64("lat")?,
            lon: f.f64("lon")?,
            issued_at: f.f64("issued_at")?,
        },
        "ack" => Payload::Ack {
            acked_seq: f.u64("acked_seq")?,
            reached: f.bool("reached")?,
            node: f.node("node")?,
            sim_time: f.f64("sim_time")?,
            samples: f.u32("samples")?,
        },
        "state" => Payload::State {
            lat: f.f64("lat")?,
            lon: f.f64("lon")?,
            sim_time: f.f64("sim_time")?,
            wall_time: f.f64("wall_time")?,
        },
        "measurement" => Payload::Measurement {
            node: f.node("node")?,
            value: f.f64("value")?,
            parameter: f.string("parameter")?,
            cmd_seq: f.u64("cmd_seq")?,
        },
        "error" => Payload::Error {
            ref_seq: f.u64("ref_seq")?,
            code: f.string("code")?,
            message: f.string("message")?,
        },
        other => return Err(bad("kind", format!("unknown kind `{other}`"))),
    };
    Ok(WireMessage {
        vehicle_id,
        seq,
        payload,
    })
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let v: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    from_value(&v)
}

pub fn valid_vehicle_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['/', '+', '#']) && !id.chars().any(char::is_whitespace)
}

/// Topic names for one vehicle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topics {
    pub cmd: String,
    pub ack: String,
    pub state: String,
    pub measurement: String,
}

impl Topics {
    pub fn new(vehicle_id: &str) -> Self {
        Self {
            cmd: format!("fleet/{vehicle_id}/cmd"),
            ack: format!("fleet/{vehicle_id}/ack"),
            state: format!("fleet/{vehicle_id}/state"),
            measurement: format!("fleet/{vehicle_id}/measurement"),
        }
    }
}
