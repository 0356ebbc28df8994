//! Length-prefixed frame format.
//!
//! Every frame starts with a 10-byte header: the magic `SPLF`, a version byte,
//! a message-type byte and the body length as a little-endian `u32`. All
//! integers in bodies are little-endian as well.

use std::io::{self, Read, Write};

use crate::codec::Codec;

pub const MAGIC: [u8; 4] = *b"SPLF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Upper bound on accepted body sizes.
pub const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;
const MAX_RANK: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    InferRequest = 1,
    InferResponse = 2,
    ModelInfo = 3,
    Error = 255,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::InferRequest),
            2 => Some(MsgType::InferResponse),
            3 => Some(MsgType::ModelInfo),
            255 => Some(MsgType::Error),
            _ => None,
        }
    }
}

/// Error codes carried in ERROR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    BadMagic,
    UnsupportedVersion,
    BadMsgType,
    MalformedBody,
    ShapeMismatch,
    PayloadLength,
    CodecMismatch,
    FrameTooLarge,
    Internal,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadMagic => "bad_magic",
            ErrorCode::UnsupportedVersion => "unsupported_version",
            ErrorCode::BadMsgType => "bad_msg_type",
            ErrorCode::MalformedBody => "malformed_body",
            ErrorCode::ShapeMismatch => "shape_mismatch",
            ErrorCode::PayloadLength => "payload_length",
            ErrorCode::CodecMismatch => "codec_mismatch",
            ErrorCode::FrameTooLarge => "frame_too_large",
            ErrorCode::Internal => "internal",
        }
    }

    /// Whether the byte stream can still be parsed after this error.
    pub fn keeps_framing(self) -> bool {
        !matches!(self, ErrorCode::BadMagic | ErrorCode::FrameTooLarge)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferRequest {
    pub request_id: u32,
    pub dims: Vec<u32>,
    pub codec: u8,
    pub payload: Vec<u8>,
}

impl InferRequest {
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    pub fn codec(&self) -> Option<Codec> {
        Codec::from_wire_id(self.codec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferResponse {
    pub request_id: u32,
    pub label: u32,
    pub server_compute_ns: u64,
}

/// Sent empty by a client; the server answers with the tail input shape and class count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelInfo {
    pub dims: Vec<u32>,
    pub num_classes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    InferRequest(InferRequest),
    InferResponse(InferResponse),
    ModelInfo(ModelInfo),
    Error(ErrorBody),
}

/// A frame that could not be decoded, with the code reported back to the peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn to_message(&self) -> Message {
        Message::Error(ErrorBody { code: self.code.as_str().to_string(), message: self.message.clone() })
    }
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::InferRequest(_) => MsgType::InferRequest,
            Message::InferResponse(_) => MsgType::InferResponse,
            Message::ModelInfo(_) => MsgType::ModelInfo,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        match self {
            Message::InferRequest(r) => {
                b.extend_from_slice(&r.request_id.to_le_bytes());
                b.push(r.dims.len() as u8);
                for d in &r.dims {
                    b.extend_from_slice(&d.to_le_bytes());
                }
                b.push(r.codec);
                b.extend_from_slice(&r.payload);
            }
            Message::InferResponse(r) => {
                b.extend_from_slice(&r.request_id.to_le_bytes());
                b.extend_from_slice(&r.label.to_le_bytes());
                b.extend_from_slice(&r.server_compute_ns.to_le_bytes());
            }
            Message::ModelInfo(m) => {
                if !m.dims.is_empty() || m.num_classes != 0 {
                    b.push(m.dims.len() as u8);
                    for d in &m.dims {
                        b.extend_from_slice(&d.to_le_bytes());
                    }
                    b.extend_from_slice(&m.num_classes.to_le_bytes());
                }
            }
            Message::Error(e) => {
                let code = truncate_utf8(&e.code, u8::MAX as usize);
                let msg = truncate_utf8(&e.message, u16::MAX as usize);
                b.push(code.len() as u8);
                b.extend_from_slice(code.as_bytes());
                b.extend_from_slice(&(msg.len() as u16).to_le_bytes());
                b.extend_from_slice(msg.as_bytes());
            }
        }
        b
    }

    pub fn encode(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(&encode_header(self.msg_type() as u8, body.len() as u32));
        out.extend_from_slice(&body);
        out
    }

    pub fn decode_body(msg_type: u8, body: &[u8]) -> Result<Self, WireError> {
        let ty = MsgType::from_u8(msg_type)
            .ok_or_else(|| WireError::new(ErrorCode::BadMsgType, format!("unknown message type {msg_type}")))?;
        let mut r = Cursor { buf: body, pos: 0 };
        let msg = match ty {
            MsgType::InferRequest => {
                let request_id = r.u32()?;
                let rank = r.u8()?;
                if rank == 0 || rank > MAX_RANK {
                    return Err(WireError::new(ErrorCode::MalformedBody, format!("invalid rank {rank}")));
                }
                let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                let codec = r.u8()?;
                let payload = r.rest().to_vec();
                Message::InferRequest(InferRequest { request_id, dims, codec, payload })
            }
            MsgType::InferResponse => {
                let m = Message::InferResponse(InferResponse {
                    request_id: r.u32()?,
                    label: r.u32()?,
                    server_compute_ns: r.u64()?,
                });
                r.finish()?;
                m
            }
            MsgType::ModelInfo => {
                if body.is_empty() {
                    Message::ModelInfo(ModelInfo::default())
                } else {
                    let rank = r.u8()?;
                    if rank > MAX_RANK {
                        return Err(WireError::new(ErrorCode::MalformedBody, format!("invalid rank {rank}")));
                    }
                    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                    let num_classes = r.u32()?;
                    r.finish()?;
                    Message::ModelInfo(ModelInfo { dims, num_classes })
                }
            }
            MsgType::Error => {
                let n = r.u8()? as usize;
                let code = r.string(n)?;
                let n = r.u16()? as usize;
                let message = r.string(n)?;
                r.finish()?;
                Message::Error(ErrorBody { code, message })
            }
        };
        Ok(msg)
    }
}

pub fn encode_header(msg_type: u8, body_len: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = VERSION;
    h[5] = msg_type;
    h[6..].copy_from_slice(&body_len.to_le_bytes());
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: u8,
    pub body_len: u32,
}

/// Parses a header. A wrong version is reported by [`check_header`], not here,
/// so the caller can still skip the body.
pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, WireError> {
    if h[..4] != MAGIC {
        return Err(WireError::new(ErrorCode::BadMagic, format!("bad magic {:02x?}", &h[..4])));
    }
    let body_len = u32::from_le_bytes([h[6], h[7], h[8], h[9]]);
    if body_len > MAX_BODY_LEN {
        return Err(WireError::new(
            ErrorCode::FrameTooLarge,
            format!("body of {body_len} bytes exceeds the {MAX_BODY_LEN}-byte limit"),
        ));
    }
    Ok(Header { version: h[4], msg_type: h[5], body_len })
}

pub fn check_header(h: &Header) -> Result<(), WireError> {
    if h.version != VERSION {
        return Err(WireError::new(
            ErrorCode::UnsupportedVersion,
            format!("version {} is not supported (expected {VERSION})", h.version),
        ));
    }
    Ok(())
}

/// Decodes one complete frame held in `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::new(ErrorCode::MalformedBody, "frame shorter than header"));
    }
    let header = parse_header(bytes[..HEADER_LEN].try_into().expect("header slice"))?;
    check_header(&header)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != header.body_len as usize {
        return Err(WireError::new(
            ErrorCode::MalformedBody,
            format!("body_len {} but {} body bytes", header.body_len, body.len()),
        ));
    }
    Message::decode_body(header.msg_type, body)
}

/// Outcome of reading one frame from a stream.
#[derive(Debug)]
pub enum ReadOutcome {
    Frame(Message),
    /// The frame was rejected; the stream is still aligned if `code.keeps_framing()`.
    Rejected(WireError),
    Eof,
}

pub fn read_frame(r: &mut impl Read) -> io::Result<ReadOutcome> {
    let mut h = [0u8; HEADER_LEN];
    match read_exact_or_eof(r, &mut h)? {
        0 => return Ok(ReadOutcome::Eof),
        n if n < HEADER_LEN => {
            return Ok(ReadOutcome::Rejected(WireError::new(ErrorCode::MalformedBody, "truncated header")));
        }
        _ => {}
    }
    let header = match parse_header(&h) {
        Ok(h) => h,
        Err(e) => return Ok(ReadOutcome::Rejected(e)),
    };
    let mut body = vec![0u8; header.body_len as usize];
    r.read_exact(&mut body)?;
    if let Err(e) = check_header(&header) {
        return Ok(ReadOutcome::Rejected(e));
    }
    Ok(match Message::decode_body(header.msg_type, &body) {
        Ok(m) => ReadOutcome::Frame(m),
        Err(e) => ReadOutcome::Rejected(e),
    })
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::new(ErrorCode::MalformedBody, "body truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String, WireError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| WireError::new(ErrorCode::MalformedBody, "string is not valid UTF-8"))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::new(ErrorCode::MalformedBody, "trailing bytes after body"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_round_trip() {
        let msg = Message::InferRequest(InferRequest {
            request_id: 7,
            dims: vec![3, 5, 5],
            codec: 1,
            payload: vec![1, 2, 3],
        });
        let bytes = msg.encode();
        assert_eq!(&bytes[..4], b"SPLF");
        assert_eq!(bytes[5], 1);
        assert_eq!(decode_frame(&bytes).unwrap(), msg);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = Message::ModelInfo(ModelInfo::default()).encode();
        bytes[4] = 9;
        assert_eq!(decode_frame(&bytes).unwrap_err().code, ErrorCode::UnsupportedVersion);
        bytes[0] = b'X';
        assert_eq!(decode_frame(&bytes).unwrap_err().code, ErrorCode::BadMagic);
    }

    #[test]
    fn rejects_oversized_frames() {
        let h = encode_header(1, MAX_BODY_LEN + 1);
        assert_eq!(parse_header(&h).unwrap_err().code, ErrorCode::FrameTooLarge);
    }

    #[test]
    fn error_body_layout() {
        let msg = Message::Error(ErrorBody { code: "bad_magic".into(), message: "x".into() });
        let body = msg.encode_body();
        assert_eq!(body[0], 9);
        assert_eq!(&body[1..10], b"bad_magic");
        assert_eq!(&body[10..12], &1u16.to_le_bytes());
    }
}
