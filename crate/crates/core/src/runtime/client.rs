//! Device-side execution: run the head, ship the bottleneck, receive the label.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::model::Sequential;
use crate::tensor::{argmax, Tensor};

use super::wire::{read_frame, write_frame, InferRequest, Message, ModelInfo, ReadOutcome};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// Wall-clock accounting of one remote inference, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub head_s: f64,
    pub serialize_s: f64,
    /// Round trip minus the server-reported tail compute time.
    pub network_s: f64,
    pub tail_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteOutcome {
    pub label: usize,
    pub breakdown: DelayBreakdown,
    /// Exact payload bytes that were transmitted.
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub label: usize,
    pub payload: Vec<u8>,
}

/// A connection to a tail server.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u32,
}

fn map_io(e: io::Error, what: &str) -> Error {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Error::NetworkTimeout(format!("{what}: {e}")),
        io::ErrorKind::ConnectionRefused
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::NotConnected
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::AddrNotAvailable
        | io::ErrorKind::UnexpectedEof => Error::EndpointUnavailable(format!("{what}: {e}")),
        _ => Error::Io(e),
    }
}

impl Client {
    pub fn connect(endpoint: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let addrs: Vec<SocketAddr> = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::EndpointUnavailable(e.to_string()))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Self {
                        reader: BufReader::new(stream.try_clone()?),
                        writer: BufWriter::new(stream),
                        next_id: 1,
                    });
                }
                Err(e) => last = Some(map_io(e, &format!("connect {addr}"))),
            }
        }
        Err(last.unwrap_or_else(|| Error::EndpointUnavailable("endpoint resolved to no address".into())))
    }

    fn exchange(&mut self, msg: &Message) -> Result<Message> {
        write_frame(&mut self.writer, msg).map_err(|e| map_io(e, "send"))?;
        match read_frame(&mut self.reader).map_err(|e| map_io(e, "receive"))? {
            ReadOutcome::Frame(Message::Error(e)) => Err(Error::Protocol { code: e.code, message: e.message }),
            ReadOutcome::Frame(m) => Ok(m),
            ReadOutcome::Rejected(e) => {
                Err(Error::Protocol { code: e.code.as_str().to_string(), message: format!("bad reply: {}", e.message) })
            }
            ReadOutcome::Eof => Err(Error::EndpointUnavailable("server closed the connection".into())),
        }
    }

    pub fn model_info(&mut self) -> Result<ModelInfo> {
        match self.exchange(&Message::ModelInfo(ModelInfo::default()))? {
            Message::ModelInfo(info) => Ok(info),
            other => Err(unexpected(&other)),
        }
    }

    /// Sends an already-encoded payload; returns the label and server compute time in ns.
    pub fn send_payload(&mut self, shape: &[usize], codec: Codec, payload: Vec<u8>) -> Result<(usize, u64)> {
        let request_id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        let req = Message::InferRequest(InferRequest {
            request_id,
            dims: shape.iter().map(|&d| d as u32).collect(),
            codec: codec.wire_id(),
            payload,
        });
        match self.exchange(&req)? {
            Message::InferResponse(r) if r.request_id == request_id => Ok((r.label as usize, r.server_compute_ns)),
            Message::InferResponse(r) => Err(Error::Protocol {
                code: "request_id".into(),
                message: format!("response for request {} while waiting for {request_id}", r.request_id),
            }),
            other => Err(unexpected(&other)),
        }
    }

    /// Runs `head` on one image and asks the server for the label.
    pub fn infer(&mut self, head: &Sequential<f32>, image: &Tensor<f32>, codec: Codec) -> Result<RemoteOutcome> {
        let start = Instant::now();
        let z = head.predict(&as_batch(image)?)?;
        let head_s = start.elapsed().as_secs_f64();
        let shape = z.sample_shape().to_vec();
        let t = Instant::now();
        let payload = codec.encode(&z.reshape(&shape)?)?;
        let serialize_s = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let (label, server_ns) = self.send_payload(&shape, codec, payload.clone())?;
        let round_trip = t.elapsed().as_secs_f64();
        let tail_s = server_ns as f64 * 1e-9;
        let breakdown = DelayBreakdown {
            head_s,
            serialize_s,
            network_s: (round_trip - tail_s).max(0.0),
            tail_s,
            total_s: start.elapsed().as_secs_f64(),
        };
        Ok(RemoteOutcome { label, breakdown, payload })
    }
}

fn unexpected(m: &Message) -> Error {
    Error::Protocol { code: "unexpected_reply".into(), message: format!("unexpected {:?} reply", m.msg_type()) }
}

/// Accepts either a single sample `(C, H, W)` or a batch of one `(1, C, H, W)`.
fn as_batch(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    match image.shape().len() {
        3 => Ok(image.clone().unsqueeze()),
        4 if image.shape()[0] == 1 => Ok(image.clone()),
        _ => Err(Error::Shape(format!("expected one image (C,H,W) or (1,C,H,W), got {:?}", image.shape()))),
    }
}

/// Connects, runs one remote inference and disconnects.
pub fn infer_remote(
    head: &Sequential<f32>,
    image: &Tensor<f32>,
    endpoint: impl ToSocketAddrs,
    codec: Codec,
    timeout: Duration,
) -> Result<RemoteOutcome> {
    Client::connect(endpoint, timeout)?.infer(head, image, codec)
}

/// The same computation as the networked path, without the network.
pub fn infer_local_split(
    head: &Sequential<f32>,
    tail: &Sequential<f32>,
    image: &Tensor<f32>,
    codec: Codec,
) -> Result<LocalOutcome> {
    let z = head.predict(&as_batch(image)?)?;
    let shape = z.sample_shape().to_vec();
    let payload = codec.encode(&z.reshape(&shape)?)?;
    let restored = codec.decode(&shape, &payload)?.unsqueeze();
    let logits = tail.predict(&restored)?;
    Ok(LocalOutcome { label: argmax(logits.sample(0)), payload })
}
