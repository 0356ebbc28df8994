//! Tail-model server: one thread per connection, one request in flight per connection.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::model::Sequential;
use crate::tensor::argmax;

use super::wire::{
    read_frame, write_frame, ErrorCode, InferRequest, InferResponse, Message, ModelInfo, ReadOutcome, WireError,
};

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Codecs the server accepts; anything else is answered with `codec_mismatch`.
    pub codecs: Vec<Codec>,
    /// Idle time after which a silent connection is closed.
    pub idle_timeout: Duration,
}

impl ServerOptions {
    pub fn only(codec: Codec) -> Self {
        Self { codecs: vec![codec], ..Self::default() }
    }
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { codecs: Codec::ALL.to_vec(), idle_timeout: Duration::from_secs(30) }
    }
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    pub served: AtomicU64,
    pub rejected: AtomicU64,
}

/// Handle to a running server; dropping it stops the accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn is_running(&self) -> bool {
        self.accept.as_ref().is_some_and(|h| !h.is_finished())
    }

    /// Blocks until the accept loop exits (it only does so after [`ServerHandle::shutdown`]).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

struct Shared {
    tail: Sequential<f32>,
    num_classes: u32,
    options: ServerOptions,
    stats: Arc<ServerStats>,
}

/// Binds `endpoint` and starts serving `tail` in background threads.
pub fn serve(tail: Sequential<f32>, endpoint: impl ToSocketAddrs, options: ServerOptions) -> Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint).map_err(|e| Error::EndpointUnavailable(e.to_string()))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let num_classes = tail.output_shape()?.iter().product::<usize>() as u32;
    let stats = Arc::new(ServerStats::default());
    let shared = Arc::new(Shared { tail, num_classes, options, stats: stats.clone() });
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let accept = thread::Builder::new().name("splitcomp-accept".into()).spawn(move || {
        while !stop_flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    shared.stats.connections.fetch_add(1, Ordering::Relaxed);
                    let shared = shared.clone();
                    let _ = thread::Builder::new().name("splitcomp-conn".into()).spawn(move || {
                        let _ = handle_connection(stream, &shared);
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    })?;
    Ok(ServerHandle { addr, stop, stats, accept: Some(accept) })
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(shared.options.idle_timeout))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match read_frame(&mut reader)? {
            ReadOutcome::Eof => return Ok(()),
            ReadOutcome::Rejected(err) => {
                shared.stats.rejected.fetch_add(1, Ordering::Relaxed);
                write_frame(&mut writer, &err.to_message())?;
                if !err.code.keeps_framing() {
                    return Ok(());
                }
                continue;
            }
            ReadOutcome::Frame(msg) => respond(msg, shared),
        };
        match &reply {
            Message::Error(_) => shared.stats.rejected.fetch_add(1, Ordering::Relaxed),
            _ => shared.stats.served.fetch_add(1, Ordering::Relaxed),
        };
        write_frame(&mut writer, &reply)?;
    }
}

fn respond(msg: Message, shared: &Shared) -> Message {
    match msg {
        Message::InferRequest(req) => match run_tail(&req, shared) {
            Ok(resp) => Message::InferResponse(resp),
            Err(e) => e.to_message(),
        },
        Message::ModelInfo(_) => Message::ModelInfo(ModelInfo {
            dims: shared.tail.input_shape.iter().map(|&d| d as u32).collect(),
            num_classes: shared.num_classes,
        }),
        Message::InferResponse(_) | Message::Error(_) => {
            WireError::new(ErrorCode::BadMsgType, "servers only accept INFER_REQUEST and MODEL_INFO").to_message()
        }
    }
}

fn run_tail(req: &InferRequest, shared: &Shared) -> std::result::Result<InferResponse, WireError> {
    let codec = req
        .codec()
        .ok_or_else(|| WireError::new(ErrorCode::MalformedBody, format!("unknown codec id {}", req.codec)))?;
    if !shared.options.codecs.contains(&codec) {
        return Err(WireError::new(ErrorCode::CodecMismatch, format!("codec {codec} is not accepted")));
    }
    let shape = req.shape();
    if shape != shared.tail.input_shape {
        return Err(WireError::new(
            ErrorCode::ShapeMismatch,
            format!("dims {shape:?} do not match tail input {:?}", shared.tail.input_shape),
        ));
    }
    let expected = codec.payload_len(&shape);
    if req.payload.len() != expected {
        return Err(WireError::new(
            ErrorCode::PayloadLength,
            format!("expected {expected} payload bytes, got {}", req.payload.len()),
        ));
    }
    let start = Instant::now();
    let x = codec
        .decode(&shape, &req.payload)
        .map_err(|e| WireError::new(ErrorCode::MalformedBody, e.to_string()))?;
    let mut batched = vec![1];
    batched.extend_from_slice(&shape);
    let x = x.reshape(&batched).map_err(|e| WireError::new(ErrorCode::Internal, e.to_string()))?;
    let logits = shared.tail.predict(&x).map_err(|e| WireError::new(ErrorCode::Internal, e.to_string()))?;
    let label = argmax(logits.sample(0)) as u32;
    let server_compute_ns = start.elapsed().as_nanos() as u64;
    Ok(InferResponse { request_id: req.request_id, label, server_compute_ns })
}
