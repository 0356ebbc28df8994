//! Networked split inference.
//!
//! The head runs on the device, the bottleneck tensor crosses a TCP connection
//! in a small framed protocol ([`wire`]) and the server runs the tail and
//! replies with the predicted label.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{infer_local_split, infer_remote, Client, DelayBreakdown, LocalOutcome, RemoteOutcome, DEFAULT_TIMEOUT};
pub use server::{serve, ServerHandle, ServerOptions, ServerStats};
pub use wire::{ErrorCode, Message, WireError};
