//! Frame transports. Every transport delivers a connection's frames in
//! FIFO order.

use std::io::Write;
use std::net::TcpStream;

use thiserror::Error;

use super::wire::{read_frame, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("no frame available")]
    Empty,
    #[error("connection closed")]
    Closed,
    #[error("transport i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl TransportError {
    /// Whether the round can be retried after a rollback.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Io(_) | TransportError::Empty)
    }
}

pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        (**self).recv()
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        (**self).recv()
    }
}

/// Length-framed byte stream over TCP.
#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> Self {
        // frames are small and strictly request/response
        let _ = stream.set_nodelay(true);
        Self { stream }
    }

    pub fn connect(addr: impl std::net::ToSocketAddrs) -> Result<Self, TransportError> {
        TcpStream::connect(addr)
            .map(Self::new)
            .map_err(|e| TransportError::Io(e.to_string()))
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.stream
            .write_all(frame)
            .map_err(|e| TransportError::Io(e.to_string()))
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        read_frame(&mut self.stream)?.ok_or(TransportError::Closed)
    }
}
