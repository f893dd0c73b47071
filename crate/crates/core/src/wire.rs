//! Packet formats exchanged between worker endpoints, the switch and the
//! optimizer endpoint.
//!
//! All multi-byte integers are big-endian. Layout:
//!
//! ```text
//!  0       2      3          4                8              10
//!  +-------+------+----------+----------------+---------------+
//!  | magic | kind | worker   | seq_num        | payload_len   |
//!  +-------+------+----------+----------------+---------------+
//!  data kinds:      payload_len x i32 (two's complement)
//!  heartbeat kinds: ack: u32, credit: u32   (payload_len = 0)
//! ```
//!
//! A data packet is `10 + 4 * payload_len` bytes, a heartbeat is 18 bytes.

use thiserror::Error;

pub const MAGIC: u16 = 0x494E;

pub const HEADER_LEN: usize = 10;

pub const HEARTBEAT_LEN: usize = HEADER_LEN + 8;

/// Maximum number of 32-bit elements carried by one data packet.
pub const ELEMS_PER_PACKET: usize = 64;

/// `worker_id` used by everything originating from or addressed to the
/// optimizer side.
pub const OPTIMIZER_ID: u8 = 0xFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PacketKind {
    ParamData = 0,
    GradData = 1,
    ParamHeartbeat = 2,
    GradHeartbeat = 3,
}

impl PacketKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PacketKind::ParamData),
            1 => Some(PacketKind::GradData),
            2 => Some(PacketKind::ParamHeartbeat),
            3 => Some(PacketKind::GradHeartbeat),
            _ => None,
        }
    }

    pub fn is_data(self) -> bool {
        matches!(self, PacketKind::ParamData | PacketKind::GradData)
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketKind::ParamData => "param",
            PacketKind::GradData => "grad",
            PacketKind::ParamHeartbeat => "param_hb",
            PacketKind::GradHeartbeat => "grad_hb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub kind: PacketKind,
    pub worker_id: u8,
    pub seq_num: u32,
    pub payload_len: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeartbeatPayload {
    /// Next expected sequence number.
    pub ack: u32,
    /// Maximum sequence number the receiver buffer can accept.
    pub credit: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Data(Vec<i32>),
    Heartbeat(HeartbeatPayload),
}

/// Which of the two streams a sequence number belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ParamStream,
    GradStream,
}

/// Logical stream label. Within a round, packet indices start at 0; on the
/// wire the sequence number is `round_base + index` so numbers never repeat
/// over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub direction: Direction,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub kind: PacketKind,
    pub worker_id: u8,
    pub seq_num: u32,
    pub payload: Payload,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("truncated packet: {got} bytes, need {need}")]
    Truncated { got: usize, need: usize },
    #[error("unknown packet kind {0}")]
    UnknownKind(u8),
    #[error("packet invariant violated: {0}")]
    InvariantViolation(&'static str),
}

impl Packet {
    pub fn data(kind: PacketKind, worker_id: u8, seq_num: u32, values: Vec<i32>) -> Self {
        debug_assert!(kind.is_data());
        Packet { kind, worker_id, seq_num, payload: Payload::Data(values) }
    }

    pub fn heartbeat(kind: PacketKind, worker_id: u8, ack: u32, credit: u32) -> Self {
        debug_assert!(!kind.is_data());
        Packet {
            kind,
            worker_id,
            seq_num: 0,
            payload: Payload::Heartbeat(HeartbeatPayload { ack, credit }),
        }
    }

    pub fn header(&self) -> PacketHeader {
        let payload_len = match &self.payload {
            Payload::Data(v) => v.len() as u16,
            Payload::Heartbeat(_) => 0,
        };
        PacketHeader { kind: self.kind, worker_id: self.worker_id, seq_num: self.seq_num, payload_len }
    }

    pub fn values(&self) -> Option<&[i32]> {
        match &self.payload {
            Payload::Data(v) => Some(v),
            Payload::Heartbeat(_) => None,
        }
    }

    pub fn heartbeat_payload(&self) -> Option<HeartbeatPayload> {
        match &self.payload {
            Payload::Heartbeat(hb) => Some(*hb),
            Payload::Data(_) => None,
        }
    }

    /// Element count for data packets, 0 for heartbeats.
    pub fn elems(&self) -> usize {
        self.values().map_or(0, <[i32]>::len)
    }

    pub fn encoded_len(&self) -> usize {
        match &self.payload {
            Payload::Data(v) => HEADER_LEN + 4 * v.len(),
            Payload::Heartbeat(_) => HEARTBEAT_LEN,
        }
    }

    fn check(&self) -> Result<(), WireError> {
        match (&self.payload, self.kind.is_data()) {
            (Payload::Data(v), true) if v.len() > ELEMS_PER_PACKET => {
                Err(WireError::InvariantViolation("payload exceeds ELEMS_PER_PACKET"))
            }
            (Payload::Data(_), true) | (Payload::Heartbeat(_), false) => Ok(()),
            (Payload::Data(_), false) => Err(WireError::InvariantViolation("heartbeat kind with data payload")),
            (Payload::Heartbeat(_), true) => Err(WireError::InvariantViolation("data kind with heartbeat payload")),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.check()?;
        let mut buf = Vec::with_capacity(self.encoded_len());
        let header = self.header();
        buf.extend_from_slice(&MAGIC.to_be_bytes());
        buf.push(header.kind as u8);
        buf.push(header.worker_id);
        buf.extend_from_slice(&header.seq_num.to_be_bytes());
        buf.extend_from_slice(&header.payload_len.to_be_bytes());
        match &self.payload {
            Payload::Data(values) => {
                for v in values {
                    buf.extend_from_slice(&v.to_be_bytes());
                }
            }
            Payload::Heartbeat(hb) => {
                buf.extend_from_slice(&hb.ack.to_be_bytes());
                buf.extend_from_slice(&hb.credit.to_be_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated { got: bytes.len(), need: HEADER_LEN });
        }
        let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let kind = PacketKind::from_u8(bytes[2]).ok_or(WireError::UnknownKind(bytes[2]))?;
        let worker_id = bytes[3];
        let seq_num = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
        let payload_len = u16::from_be_bytes([bytes[8], bytes[9]]) as usize;
        let body = &bytes[HEADER_LEN..];

        let payload = if kind.is_data() {
            if payload_len > ELEMS_PER_PACKET {
                return Err(WireError::InvariantViolation("payload_len exceeds ELEMS_PER_PACKET"));
            }
            let need = HEADER_LEN + 4 * payload_len;
            if bytes.len() < need {
                return Err(WireError::Truncated { got: bytes.len(), need });
            }
            if bytes.len() > need {
                return Err(WireError::InvariantViolation("trailing bytes after payload"));
            }
            let values = body
                .chunks_exact(4)
                .map(|c| i32::from_be_bytes(c.try_into().unwrap()))
                .collect();
            Payload::Data(values)
        } else {
            if payload_len != 0 {
                return Err(WireError::InvariantViolation("heartbeat with nonzero payload_len"));
            }
            if bytes.len() < HEARTBEAT_LEN {
                return Err(WireError::Truncated { got: bytes.len(), need: HEARTBEAT_LEN });
            }
            if bytes.len() > HEARTBEAT_LEN {
                return Err(WireError::InvariantViolation("trailing bytes after heartbeat"));
            }
            Payload::Heartbeat(HeartbeatPayload {
                ack: u32::from_be_bytes(body[0..4].try_into().unwrap()),
                credit: u32::from_be_bytes(body[4..8].try_into().unwrap()),
            })
        };
        Ok(Packet { kind, worker_id, seq_num, payload })
    }
}

/// Lowercase hex, two characters per byte, no separators.
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Inverse of [`to_hex`]; whitespace is ignored.
pub fn from_hex(s: &str) -> Option<Vec<u8>> {
    let digits: Vec<u8> = s.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    if !digits.len().is_multiple_of(2) {
        return None;
    }
    digits
        .chunks(2)
        .map(|pair| u8::from_str_radix(std::str::from_utf8(pair).ok()?, 16).ok())
        .collect()
}
