//! The framed message protocol spoken between manager and nodes.
//!
//! A frame is a big-endian `u32` length, a version byte (`0x01`), a message
//! type byte and a canonical JSON body. The length counts everything after
//! itself.

pub mod sample;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engine::SetParam;
use crate::scenario::ExecutionRequest;
use crate::{canonical, StepRecord};

pub const VERSION: u8 = 1;
/// Largest accepted value of the length prefix.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;
pub const HEADER_LEN: usize = 6;

/// Lifecycle state of a run as tracked by the manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RunStatus {
    Pending,
    Assigned,
    Running,
    Paused,
    Completed,
    Stopped,
    Failed,
}

impl RunStatus {
    pub const ALL: [RunStatus; 7] = [
        RunStatus::Pending,
        RunStatus::Assigned,
        RunStatus::Running,
        RunStatus::Paused,
        RunStatus::Completed,
        RunStatus::Stopped,
        RunStatus::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::Completed | RunStatus::Stopped | RunStatus::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "PENDING",
            RunStatus::Assigned => "ASSIGNED",
            RunStatus::Running => "RUNNING",
            RunStatus::Paused => "PAUSED",
            RunStatus::Completed => "COMPLETED",
            RunStatus::Stopped => "STOPPED",
            RunStatus::Failed => "FAILED",
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCommand {
    Play,
    Pause,
    Resume,
    Stop,
    /// Real-time multiplier; 0 runs unpaced.
    SetSpeed {
        factor: f64,
    },
    SetParam(SetParam),
}

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::Play => "play",
            ControlCommand::Pause => "pause",
            ControlCommand::Resume => "resume",
            ControlCommand::Stop => "stop",
            ControlCommand::SetSpeed { .. } => "set_speed",
            ControlCommand::SetParam(_) => "set_param",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub node_id: String,
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heartbeat {
    pub node_id: String,
    pub running_run_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assign {
    pub execution_request: ExecutionRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignAck {
    pub run_id: String,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Control {
    pub run_id: String,
    pub command: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunStateChange {
    pub run_id: String,
    pub state: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordBatch {
    pub run_id: String,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordAck {
    pub run_id: String,
    /// Highest step persisted; `null` before anything lands.
    #[serde(deserialize_with = "Option::deserialize")]
    pub through_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bye {
    pub node_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorMsg {
    pub code: String,
    pub text: String,
}

/// Values of [`ErrorMsg::code`] that peers act on.
pub mod error_code {
    /// A control command did not fit the run's phase. Text names the run.
    pub const ILLEGAL_TRANSITION: &str = "illegal_transition";
    /// The manager no longer assigns this run to the sender; text is the run id.
    /// The node abandons the run and its unacknowledged records.
    pub const RUN_NOT_ASSIGNED: &str = "run_not_assigned";
    /// A frame could not be decoded.
    pub const BAD_FRAME: &str = "bad_frame";
    /// Records could not be persisted; the node keeps them for retransmission.
    pub const STORE_FAILED: &str = "store_failed";
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Heartbeat(Heartbeat),
    Assign(Assign),
    AssignAck(AssignAck),
    Control(Control),
    RunStateChange(RunStateChange),
    RecordBatch(RecordBatch),
    RecordAck(RecordAck),
    Bye(Bye),
    Error(ErrorMsg),
}

/// Wire discriminants.
pub mod msg_type {
    pub const HELLO: u8 = 1;
    pub const HEARTBEAT: u8 = 2;
    pub const ASSIGN: u8 = 3;
    pub const ASSIGN_ACK: u8 = 4;
    pub const CONTROL: u8 = 5;
    pub const RUN_STATE_CHANGE: u8 = 6;
    pub const RECORD_BATCH: u8 = 7;
    pub const RECORD_ACK: u8 = 8;
    pub const BYE: u8 = 9;
    pub const ERROR: u8 = 10;
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello(_) => HELLO,
            Message::Heartbeat(_) => HEARTBEAT,
            Message::Assign(_) => ASSIGN,
            Message::AssignAck(_) => ASSIGN_ACK,
            Message::Control(_) => CONTROL,
            Message::RunStateChange(_) => RUN_STATE_CHANGE,
            Message::RecordBatch(_) => RECORD_BATCH,
            Message::RecordAck(_) => RECORD_ACK,
            Message::Bye(_) => BYE,
            Message::Error(_) => ERROR,
        }
    }

    fn body(&self) -> Vec<u8> {
        match self {
            Message::Hello(m) => canonical::to_vec(m),
            Message::Heartbeat(m) => canonical::to_vec(m),
            Message::Assign(m) => canonical::to_vec(m),
            Message::AssignAck(m) => canonical::to_vec(m),
            Message::Control(m) => canonical::to_vec(m),
            Message::RunStateChange(m) => canonical::to_vec(m),
            Message::RecordBatch(m) => canonical::to_vec(m),
            Message::RecordAck(m) => canonical::to_vec(m),
            Message::Bye(m) => canonical::to_vec(m),
            Message::Error(m) => canonical::to_vec(m),
        }
    }

    fn from_body(ty: u8, body: &[u8]) -> Result<Self, DecodeError> {
        fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, DecodeError> {
            serde_json::from_slice(body).map_err(|e| DecodeError::BadBody(e.to_string()))
        }
        use msg_type::*;
        Ok(match ty {
            HELLO => Message::Hello(parse(body)?),
            HEARTBEAT => Message::Heartbeat(parse(body)?),
            ASSIGN => Message::Assign(parse(body)?),
            ASSIGN_ACK => Message::AssignAck(parse(body)?),
            CONTROL => Message::Control(parse(body)?),
            RUN_STATE_CHANGE => Message::RunStateChange(parse(body)?),
            RECORD_BATCH => Message::RecordBatch(parse(body)?),
            RECORD_ACK => Message::RecordAck(parse(body)?),
            BYE => Message::Bye(parse(body)?),
            ERROR => Message::Error(parse(body)?),
            other => return Err(DecodeError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("incomplete frame")]
    NeedMoreBytes,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("invalid body: {0}")]
    BadBody(String),
    #[error("declared frame length {0} exceeds the limit")]
    FrameTooLarge(u64),
    #[error("declared frame length {0} is shorter than the header")]
    FrameTooShort(u64),
}

/// Encodes one message as a frame. Bodies are canonical JSON, so equal
/// messages always produce equal bytes.
pub fn encode(msg: &Message) -> Vec<u8> {
    let body = msg.body();
    let len = (body.len() + 2) as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.push(VERSION);
    out.push(msg.msg_type());
    out.extend_from_slice(&body);
    out
}

/// Length prefix of a buffered frame, checked against the limits.
fn declared_len(bytes: &[u8]) -> Result<usize, DecodeError> {
    let Some(prefix) = bytes.get(..4) else {
        return Err(DecodeError::NeedMoreBytes);
    };
    let len = u32::from_be_bytes(prefix.try_into().expect("four bytes")) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::FrameTooLarge(len as u64));
    }
    if len < 2 {
        return Err(DecodeError::FrameTooShort(len as u64));
    }
    Ok(len)
}

/// Decodes the frame at the start of `bytes`, returning the message and the
/// number of bytes it occupied. Incomplete input yields `NeedMoreBytes`.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), DecodeError> {
    let len = declared_len(bytes)?;
    let Some(frame) = bytes.get(4..4 + len) else {
        return Err(DecodeError::NeedMoreBytes);
    };
    if frame[0] != VERSION {
        return Err(DecodeError::BadVersion(frame[0]));
    }
    Ok((Message::from_body(frame[1], &frame[2..])?, 4 + len))
}

/// Incremental decoder for one byte stream.
///
/// A frame that fails to decode is reported once and skipped using its
/// declared length, so the following frame is read normally. Oversized frames
/// are rejected from the header alone and their bodies are discarded as they
/// arrive.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
    pos: usize,
    discard: usize,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held waiting for the rest of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn feed(&mut self, mut chunk: &[u8]) -> Vec<Result<Message, DecodeError>> {
        let skip = self.discard.min(chunk.len());
        self.discard -= skip;
        chunk = &chunk[skip..];
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        loop {
            let pending = &self.buf[self.pos..];
            match decode(pending) {
                Ok((msg, used)) => {
                    self.pos += used;
                    out.push(Ok(msg));
                }
                Err(DecodeError::NeedMoreBytes) => break,
                Err(e @ DecodeError::FrameTooLarge(len)) => {
                    let total = 4 + len as usize;
                    let have = pending.len().min(total);
                    self.pos += have;
                    self.discard = total - have;
                    out.push(Err(e));
                }
                Err(e) => {
                    let total = declared_len(pending).map_or(4, |len| 4 + len);
                    self.pos += total;
                    out.push(Err(e));
                }
            }
            if self.discard > 0 {
                break;
            }
        }
        if self.pos == self.buf.len() {
            self.buf.clear();
            self.pos = 0;
        } else if self.pos > self.buf.len() / 2 {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello() -> Message {
        Message::Hello(Hello { node_id: "n1".into(), capacity: 2 })
    }

    fn frame(version: u8, ty: u8, body: &[u8]) -> Vec<u8> {
        let mut f = ((body.len() + 2) as u32).to_be_bytes().to_vec();
        f.push(version);
        f.push(ty);
        f.extend_from_slice(body);
        f
    }

    #[test]
    fn hello_layout() {
        let bytes = encode(&hello());
        let body = br#"{"capacity":2,"node_id":"n1"}"#;
        assert_eq!(bytes, frame(1, 1, body));
        assert_eq!(decode(&bytes), Ok((hello(), bytes.len())));
    }

    #[test]
    fn control_round_trip() {
        for command in [
            ControlCommand::Pause,
            ControlCommand::SetSpeed { factor: 2.5 },
            ControlCommand::SetParam(SetParam {
                agent_id: "blue1".into(),
                param_path: "agents.blue1.params.speed_mps".into(),
                value: serde_json::json!(250),
            }),
        ] {
            let m = Message::Control(Control { run_id: "r1".into(), command });
            assert_eq!(decode(&encode(&m)).unwrap().0, m);
        }
    }

    #[test]
    fn control_wire_form() {
        let m = Message::Control(Control { run_id: "r1".into(), command: ControlCommand::SetSpeed { factor: 2.0 } });
        let bytes = encode(&m);
        assert_eq!(&bytes[6..], br#"{"command":{"command":"set_speed","factor":2.0},"run_id":"r1"}"#);
    }

    #[test]
    fn short_prefix_needs_more() {
        let bytes = encode(&hello());
        for n in 0..bytes.len() {
            assert_eq!(decode(&bytes[..n]), Err(DecodeError::NeedMoreBytes), "{n}");
        }
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode(&frame(2, 1, b"{}")), Err(DecodeError::BadVersion(2)));
        assert_eq!(decode(&frame(1, 0, b"{}")), Err(DecodeError::UnknownType(0)));
        assert_eq!(decode(&frame(1, 11, b"{}")), Err(DecodeError::UnknownType(11)));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert_eq!(decode(&huge), Err(DecodeError::FrameTooLarge(MAX_FRAME_LEN as u64 + 1)));
        assert_eq!(decode(&[0, 0, 0, 1, 1]), Err(DecodeError::FrameTooShort(1)));
    }

    #[test]
    fn missing_fields_are_named() {
        let Err(DecodeError::BadBody(msg)) = decode(&frame(1, 1, br#"{"capacity":2}"#)) else { panic!() };
        assert!(msg.contains("node_id"), "{msg}");
        let Err(DecodeError::BadBody(msg)) = decode(&frame(1, 1, br#"{"node_id":"a","capacity":2,"x":1}"#)) else {
            panic!()
        };
        assert!(msg.contains("unknown field"), "{msg}");
    }

    #[test]
    fn reader_handles_byte_at_a_time() {
        let a = hello();
        let b = Message::Bye(Bye { node_id: "n1".into() });
        let stream = [encode(&a), encode(&b)].concat();
        let mut r = FrameReader::new();
        let mut got = Vec::new();
        for byte in &stream {
            got.extend(r.feed(std::slice::from_ref(byte)));
        }
        assert_eq!(got, vec![Ok(a), Ok(b)]);
        assert_eq!(r.buffered(), 0);
    }

    #[test]
    fn reader_resyncs_after_bad_body() {
        let bad = frame(1, 1, b"{not json");
        let good = encode(&hello());
        let mut r = FrameReader::new();
        let got = r.feed(&[bad, good].concat());
        assert!(matches!(got[0], Err(DecodeError::BadBody(_))));
        assert_eq!(got[1], Ok(hello()));
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn oversized_frame_is_dropped_without_buffering() {
        let declared = MAX_FRAME_LEN + 10;
        let mut r = FrameReader::new();
        let got = r.feed(&(declared as u32).to_be_bytes());
        assert_eq!(got, vec![Err(DecodeError::FrameTooLarge(declared as u64))]);
        let filler = vec![0u8; 1 << 20];
        let mut left = declared;
        while left > 0 {
            let n = left.min(filler.len());
            assert!(r.feed(&filler[..n]).is_empty());
            assert_eq!(r.buffered(), 0);
            left -= n;
        }
        assert_eq!(r.feed(&encode(&hello())), vec![Ok(hello())]);
    }
}
