//! Length-prefixed binary framing shared by client, server, actor and learner.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! magic "LRWP" (4) | version u8 | kind u8 | seq u64 | body_len u32 | body
//! ```
//!
//! Vectors inside a body are a `u32` element count followed by `f64` values.
//! The codec is pure; sequencing rules (monotonic `seq`, handshakes) belong to
//! the sessions that use it. See `docs/wire.md` for worked examples.

use std::io::{self, Read, Write};
use thiserror::Error;

use crate::rlbridge::{Transition, TransitionSource};

pub const MAGIC: [u8; 4] = *b"LRWP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
/// Upper bound on a body; larger declared lengths are rejected without buffering.
pub const MAX_BODY_LEN: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Hello = 0,
    Observation = 1,
    ChunkReply = 2,
    Transition = 3,
    ParamUpdate = 4,
    Error = 5,
}

impl Kind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Kind::Hello,
            1 => Kind::Observation,
            2 => Kind::ChunkReply,
            3 => Kind::Transition,
            4 => Kind::ParamUpdate,
            5 => Kind::Error,
            _ => return None,
        })
    }
}

/// Application error codes carried by [`Payload::Error`].
pub mod codes {
    pub const MALFORMED: u16 = 1;
    pub const SESSION_LIMIT: u16 = 2;
    pub const DIM_MISMATCH: u16 = 3;
    pub const INTERNAL: u16 = 4;
    pub const PROTOCOL: u16 = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello,
    /// Flattened observation stack.
    Observation(Vec<f64>),
    /// Row-major `H_a x action_dim` chunk.
    ChunkReply { action_dim: u32, actions: Vec<f64> },
    Transition(Transition),
    /// A parameter broadcast; an empty `params` vector is an acknowledgement.
    ParamUpdate { version: u64, params: Vec<f64> },
    Error { code: u16, text: String },
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Hello => Kind::Hello,
            Payload::Observation(_) => Kind::Observation,
            Payload::ChunkReply { .. } => Kind::ChunkReply,
            Payload::Transition(_) => Kind::Transition,
            Payload::ParamUpdate { .. } => Kind::ParamUpdate,
            Payload::Error { .. } => Kind::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub seq: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn new(seq: u64, payload: Payload) -> Self {
        Self { seq, payload }
    }

    pub fn kind(&self) -> Kind {
        self.payload.kind()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame, {needed} more bytes needed")]
    Truncated { needed: usize },
    #[error("declared body length {0} exceeds the limit")]
    Oversize(usize),
    #[error("malformed body: {0}")]
    MalformedBody(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{what} of length {len} does not fit the frame")]
    Oversize { what: &'static str, len: usize },
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len_prefix(&mut self, what: &'static str, len: usize) -> Result<(), EncodeError> {
        let n = u32::try_from(len).map_err(|_| EncodeError::Oversize { what, len })?;
        self.u32(n);
        Ok(())
    }
    fn vec(&mut self, v: &[f64]) -> Result<(), EncodeError> {
        self.len_prefix("vector", v.len())?;
        for x in v {
            self.f64(*x);
        }
        Ok(())
    }
}

fn encode_body(payload: &Payload) -> Result<Vec<u8>, EncodeError> {
    let mut w = BodyWriter { buf: Vec::new() };
    match payload {
        Payload::Hello => {}
        Payload::Observation(v) => w.vec(v)?,
        Payload::ChunkReply {
            action_dim,
            actions,
        } => {
            w.u32(*action_dim);
            w.vec(actions)?;
        }
        Payload::Transition(t) => {
            w.vec(&t.s)?;
            w.vec(&t.a)?;
            w.f64(t.r);
            w.vec(&t.s_next)?;
            w.u8(t.source as u8);
        }
        Payload::ParamUpdate { version, params } => {
            w.u64(*version);
            w.vec(params)?;
        }
        Payload::Error { code, text } => {
            w.u16(*code);
            w.len_prefix("error text", text.len())?;
            w.buf.extend_from_slice(text.as_bytes());
        }
    }
    Ok(w.buf)
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, EncodeError> {
    let body = encode_body(&msg.payload)?;
    if body.len() > MAX_BODY_LEN {
        return Err(EncodeError::Oversize {
            what: "body",
            len: body.len(),
        });
    }
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&msg.seq.to_le_bytes());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DecodeError::MalformedBody(format!("{what} runs past the body")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn vec(&mut self, what: &str) -> Result<Vec<f64>, DecodeError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n.saturating_mul(8), what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(self) -> Result<(), DecodeError> {
        if self.pos != self.buf.len() {
            return Err(DecodeError::MalformedBody(format!(
                "{} trailing bytes inside body",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_body(kind: Kind, body: &[u8]) -> Result<Payload, DecodeError> {
    let mut r = BodyReader { buf: body, pos: 0 };
    let payload = match kind {
        Kind::Hello => Payload::Hello,
        Kind::Observation => Payload::Observation(r.vec("observation")?),
        Kind::ChunkReply => {
            let action_dim = r.u32("action dim")?;
            let actions = r.vec("actions")?;
            if action_dim == 0 || actions.len() % action_dim as usize != 0 {
                return Err(DecodeError::MalformedBody(format!(
                    "{} actions do not split into rows of {action_dim}",
                    actions.len()
                )));
            }
            Payload::ChunkReply {
                action_dim,
                actions,
            }
        }
        Kind::Transition => {
            let s = r.vec("state")?;
            let a = r.vec("action")?;
            let rew = r.f64("reward")?;
            let s_next = r.vec("next state")?;
            let tag = r.u8("source")?;
            let source = TransitionSource::from_byte(tag)
                .ok_or_else(|| DecodeError::MalformedBody(format!("unknown source tag {tag}")))?;
            Payload::Transition(Transition {
                s,
                a,
                r: rew,
                s_next,
                source,
            })
        }
        Kind::ParamUpdate => {
            let version = r.u64("version")?;
            let params = r.vec("params")?;
            Payload::ParamUpdate { version, params }
        }
        Kind::Error => {
            let code = r.u16("error code")?;
            let n = r.u32("error text")? as usize;
            let bytes = r.take(n, "error text")?;
            let text = std::str::from_utf8(bytes)
                .map_err(|e| DecodeError::MalformedBody(format!("error text: {e}")))?
                .to_owned();
            Payload::Error { code, text }
        }
    };
    r.finish()?;
    Ok(payload)
}

/// Validated header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: Kind,
    pub seq: u64,
    pub body_len: usize,
}

/// Parses the fixed header. Partial input is checked as far as it goes, so a
/// bad magic is reported as soon as its first byte arrives.
pub fn decode_header(bytes: &[u8]) -> Result<Header, DecodeError> {
    let n = bytes.len().min(4);
    if bytes[..n] != MAGIC[..n] {
        return Err(DecodeError::BadMagic);
    }
    if bytes.len() > 4 && bytes[4] != VERSION {
        return Err(DecodeError::BadVersion(bytes[4]));
    }
    if bytes.len() > 5 && Kind::from_byte(bytes[5]).is_none() {
        return Err(DecodeError::UnknownKind(bytes[5]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN - bytes.len(),
        });
    }
    let kind = Kind::from_byte(bytes[5]).expect("checked above");
    let seq = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let body_len = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if body_len > MAX_BODY_LEN {
        return Err(DecodeError::Oversize(body_len));
    }
    Ok(Header {
        kind,
        seq,
        body_len,
    })
}

/// Decodes exactly one frame and returns it with the unconsumed remainder.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, &[u8]), DecodeError> {
    let header = decode_header(bytes)?;
    let total = HEADER_LEN + header.body_len;
    if bytes.len() < total {
        return Err(DecodeError::Truncated {
            needed: total - bytes.len(),
        });
    }
    let payload = decode_body(header.kind, &bytes[HEADER_LEN..total])?;
    Ok((WireMessage::new(header.seq, payload), &bytes[total..]))
}

/// Reads one frame from a blocking stream. `Ok(None)` on a clean end of stream
/// at a frame boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => {
                filled += n;
                // Fail fast on garbage instead of waiting for a full header.
                match decode_header(&header[..filled]) {
                    Ok(_) | Err(DecodeError::Truncated { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = decode_header(&header)?;
    let mut body = vec![0u8; h.body_len];
    r.read_exact(&mut body)?;
    Ok(Some(WireMessage::new(h.seq, decode_body(h.kind, &body)?)))
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hello_is_a_bare_header() {
        let bytes = encode(&WireMessage::new(0, Payload::Hello)).unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(&bytes[..4], b"LRWP");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
    }

    #[test]
    fn observation_body_length() {
        let bytes = encode(&WireMessage::new(3, Payload::Observation(vec![0.5, -0.25]))).unwrap();
        let body_len = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        assert_eq!(body_len, 4 + 16);
        assert_eq!(bytes.len(), 18 + 20);
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode(&WireMessage::new(0, Payload::Hello)).unwrap();
        bytes[1] = b'X';
        assert_eq!(decode(&bytes).unwrap_err(), DecodeError::BadMagic);
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&WireMessage::new(0, Payload::Hello)).unwrap();
        bytes[4] = 2;
        assert_eq!(decode(&bytes).unwrap_err(), DecodeError::BadVersion(2));
    }

    #[test]
    fn unknown_kind() {
        let mut bytes = encode(&WireMessage::new(0, Payload::Hello)).unwrap();
        bytes[5] = 9;
        assert_eq!(decode(&bytes).unwrap_err(), DecodeError::UnknownKind(9));
    }

    #[test]
    fn cut_mid_body_reports_missing_bytes() {
        let bytes = encode(&WireMessage::new(1, Payload::Observation(vec![1.0, 2.0, 3.0]))).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert_eq!(decode(cut).unwrap_err(), DecodeError::Truncated { needed: 5 });
        assert_eq!(
            decode(&bytes[..10]).unwrap_err(),
            DecodeError::Truncated { needed: 8 }
        );
    }

    #[test]
    fn remainder_is_returned() {
        let mut bytes = encode(&WireMessage::new(1, Payload::Hello)).unwrap();
        let second = encode(&WireMessage::new(2, Payload::Observation(vec![4.0]))).unwrap();
        bytes.extend_from_slice(&second);
        let (m1, rest) = decode(&bytes).unwrap();
        assert_eq!(m1.seq, 1);
        let (m2, rest) = decode(rest).unwrap();
        assert_eq!(m2.payload, Payload::Observation(vec![4.0]));
        assert!(rest.is_empty());
    }

    #[test]
    fn vector_length_past_body_is_malformed() {
        let mut bytes = encode(&WireMessage::new(1, Payload::Observation(vec![1.0]))).unwrap();
        // Claim 1000 elements inside a 12-byte body.
        bytes[18..22].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(DecodeError::MalformedBody(_))));
    }

    #[test]
    fn ragged_chunk_is_malformed() {
        let msg = WireMessage::new(
            1,
            Payload::ChunkReply {
                action_dim: 2,
                actions: vec![1.0, 2.0, 3.0],
            },
        );
        let bytes = encode(&msg).unwrap();
        assert!(matches!(decode(&bytes), Err(DecodeError::MalformedBody(_))));
    }

    #[test]
    fn stream_read_write() {
        let msgs = vec![
            WireMessage::new(0, Payload::Hello),
            WireMessage::new(
                7,
                Payload::Error {
                    code: codes::SESSION_LIMIT,
                    text: "full".into(),
                },
            ),
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut cursor = std::io::Cursor::new(buf);
        for m in &msgs {
            assert_eq!(&read_message(&mut cursor).unwrap().unwrap(), m);
        }
        assert!(read_message(&mut cursor).unwrap().is_none());
    }

    fn arb_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(any::<f64>(), 0..16)
    }

    fn arb_payload() -> impl Strategy<Value = Payload> {
        prop_oneof![
            Just(Payload::Hello),
            arb_vec().prop_map(Payload::Observation),
            (1u32..4, prop::collection::vec(any::<f64>(), 0..6)).prop_map(|(d, v)| {
                let rows = v.len();
                let mut actions = Vec::new();
                for _ in 0..d {
                    actions.extend_from_slice(&v);
                }
                let _ = rows;
                Payload::ChunkReply {
                    action_dim: d,
                    actions,
                }
            }),
            (arb_vec(), arb_vec(), any::<f64>(), arb_vec(), 0u8..3).prop_map(
                |(s, a, r, s_next, tag)| Payload::Transition(Transition {
                    s,
                    a,
                    r,
                    s_next,
                    source: TransitionSource::from_byte(tag).unwrap(),
                })
            ),
            (any::<u64>(), arb_vec())
                .prop_map(|(version, params)| Payload::ParamUpdate { version, params }),
            (any::<u16>(), ".{0,20}").prop_map(|(code, text)| Payload::Error { code, text }),
        ]
    }

    fn bits(m: &WireMessage) -> Vec<u8> {
        encode(m).unwrap()
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seq in any::<u64>(), payload in arb_payload()) {
            let msg = WireMessage::new(seq, payload);
            let bytes = encode(&msg).unwrap();
            let (back, rest) = decode(&bytes).unwrap();
            prop_assert!(rest.is_empty());
            // NaN payloads compare unequal, so compare re-encoded bytes.
            prop_assert_eq!(bits(&back), bytes);
        }

        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }
    }
}
