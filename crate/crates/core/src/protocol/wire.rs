//! `CFP1` framing.
//!
//! ```text
//! magic "CFP1" | version u8 | tag u8 | reserved u16 | session u64 | round u64 | len u32 | payload
//! ```
//!
//! All integers are little-endian. Tensors inside payloads are written as
//! `rank u32 | extents u32... | f32 data`.

use std::io::Read;

use thiserror::Error;

use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"CFP1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
/// Upper bound on a single payload.
pub const MAX_PAYLOAD: usize = 256 << 20;
const MAX_RANK: usize = 8;
/// Loss value sent alongside the no-op flag.
const NOOP_LOSS: f32 = f32::NAN;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message tag {0:#04x}")]
    BadTag(u8),
    #[error("reserved header bits set")]
    Reserved,
    #[error("declared length overflows limits")]
    LengthOverflow,
    #[error("frame truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload does not match its declared shape: {0}")]
    PayloadMismatch(String),
    #[error("text field is not valid UTF-8")]
    BadUtf8,
    #[error("stream i/o: {0}")]
    Io(String),
}

impl WireError {
    /// Stable numeric code, distinct per error kind.
    pub fn code(&self) -> u16 {
        match self {
            WireError::BadMagic(_) => 1,
            WireError::BadVersion(_) => 2,
            WireError::BadTag(_) => 3,
            WireError::Reserved => 4,
            WireError::LengthOverflow => 5,
            WireError::Truncated { .. } => 6,
            WireError::PayloadMismatch(_) => 7,
            WireError::BadUtf8 => 8,
            WireError::Io(_) => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        client_id: u32,
        n_images: u32,
    },
    HelloAck {
        client_id: u32,
        total_steps: u32,
        t_split: u32,
        rounds: u32,
    },
    TriggerDiffusion {
        batch_size: u32,
    },
    /// Server-owned training pairs of one client round.
    NoisedBatch {
        client_id: u32,
        timesteps: Vec<u32>,
        x_t: Tensor<f32>,
        epsilon: Tensor<f32>,
    },
    /// `None` is the explicit no-op flag sent for an empty batch.
    ServerTrainAck {
        server_loss: Option<f32>,
    },
    PartialDenoised {
        client_id: u32,
        boundary_t: u32,
        images: Tensor<f32>,
    },
    ClientDone {
        client_id: u32,
        client_loss: Option<f32>,
    },
    Abort {
        code: u16,
        reason: String,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::HelloAck { .. } => 0x02,
            Message::TriggerDiffusion { .. } => 0x03,
            Message::NoisedBatch { .. } => 0x04,
            Message::ServerTrainAck { .. } => 0x05,
            Message::PartialDenoised { .. } => 0x06,
            Message::ClientDone { .. } => 0x07,
            Message::Abort { .. } => 0x08,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::HelloAck { .. } => "HelloAck",
            Message::TriggerDiffusion { .. } => "TriggerDiffusion",
            Message::NoisedBatch { .. } => "NoisedBatch",
            Message::ServerTrainAck { .. } => "ServerTrainAck",
            Message::PartialDenoised { .. } => "PartialDenoised",
            Message::ClientDone { .. } => "ClientDone",
            Message::Abort { .. } => "Abort",
        }
    }
}

/// A message with its routing header.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub session: u64,
    pub round: u64,
    pub message: Message,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    buf.extend_from_slice(&t.to_le_bytes());
}

fn put_loss(buf: &mut Vec<u8>, loss: Option<f32>) {
    buf.push(u8::from(loss.is_none()));
    buf.extend_from_slice(&loss.unwrap_or(NOOP_LOSS).to_le_bytes());
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    let mut payload = Vec::new();
    match &env.message {
        Message::Hello { client_id, n_images } => {
            put_u32(&mut payload, *client_id);
            put_u32(&mut payload, *n_images);
        }
        Message::HelloAck {
            client_id,
            total_steps,
            t_split,
            rounds,
        } => {
            for v in [client_id, total_steps, t_split, rounds] {
                put_u32(&mut payload, *v);
            }
        }
        Message::TriggerDiffusion { batch_size } => put_u32(&mut payload, *batch_size),
        Message::NoisedBatch {
            client_id,
            timesteps,
            x_t,
            epsilon,
        } => {
            put_u32(&mut payload, *client_id);
            put_u32(&mut payload, timesteps.len() as u32);
            for &t in timesteps {
                put_u32(&mut payload, t);
            }
            put_tensor(&mut payload, x_t);
            put_tensor(&mut payload, epsilon);
        }
        Message::ServerTrainAck { server_loss } => put_loss(&mut payload, *server_loss),
        Message::PartialDenoised {
            client_id,
            boundary_t,
            images,
        } => {
            put_u32(&mut payload, *client_id);
            put_u32(&mut payload, *boundary_t);
            put_tensor(&mut payload, images);
        }
        Message::ClientDone { client_id, client_loss } => {
            put_u32(&mut payload, *client_id);
            put_loss(&mut payload, *client_loss);
        }
        Message::Abort { code, reason } => {
            payload.extend_from_slice(&code.to_le_bytes());
            put_u32(&mut payload, reason.len() as u32);
            payload.extend_from_slice(reason.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(env.message.tag());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&env.session.to_le_bytes());
    out.extend_from_slice(&env.round.to_le_bytes());
    put_u32(&mut out, payload.len() as u32);
    out.extend_from_slice(&payload);
    out
}

/// Parsed fixed-size frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub tag: u8,
    pub session: u64,
    pub round: u64,
    pub payload_len: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    let tag = bytes[5];
    if !(0x01..=0x08).contains(&tag) {
        return Err(WireError::BadTag(tag));
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(WireError::Reserved);
    }
    let session = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let round = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let payload_len = u32::from_le_bytes(bytes[24..28].try_into().expect("4 bytes")) as usize;
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::LengthOverflow);
    }
    Ok(Header {
        tag,
        session,
        round,
        payload_len,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(WireError::PayloadMismatch(format!(
                "field needs {n} bytes, {remaining} left in payload"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn loss(&mut self) -> Result<Option<f32>, WireError> {
        let flag = self.u8()?;
        let v = self.f32()?;
        match flag {
            0 => Ok(Some(v)),
            1 if v.to_bits() == NOOP_LOSS.to_bits() => Ok(None),
            1 => Err(WireError::PayloadMismatch(format!("no-op flag with loss {v}"))),
            other => Err(WireError::PayloadMismatch(format!("bad no-op flag {other}"))),
        }
    }

    fn tensor(&mut self) -> Result<Tensor<f32>, WireError> {
        let rank = self.u32()? as usize;
        if rank > MAX_RANK {
            return Err(WireError::PayloadMismatch(format!("tensor rank {rank} > {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let bytes = numel(&shape)
            .and_then(|n| n.checked_mul(4))
            .filter(|&b| b <= MAX_PAYLOAD)
            .ok_or(WireError::LengthOverflow)?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| WireError::PayloadMismatch(e.to_string()))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.bytes.len() {
            return Err(WireError::PayloadMismatch(format!(
                "{} trailing payload bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_image_batch(name: &str, t: &Tensor<f32>, count: usize) -> Result<(), WireError> {
    if t.rank() != 4 || t.shape()[0] != count {
        return Err(WireError::PayloadMismatch(format!(
            "{name} shaped {:?}, expected rank 4 with {count} items",
            t.shape()
        )));
    }
    Ok(())
}

/// Decode exactly one frame. Never reads past the declared payload length.
pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
    let header = decode_header(bytes)?;
    let needed = HEADER_LEN + header.payload_len;
    if bytes.len() < needed {
        return Err(WireError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(WireError::PayloadMismatch(format!(
            "{} bytes after the declared frame end",
            bytes.len() - needed
        )));
    }
    let mut r = Reader {
        bytes: &bytes[HEADER_LEN..needed],
        pos: 0,
    };
    let message = match header.tag {
        0x01 => Message::Hello {
            client_id: r.u32()?,
            n_images: r.u32()?,
        },
        0x02 => Message::HelloAck {
            client_id: r.u32()?,
            total_steps: r.u32()?,
            t_split: r.u32()?,
            rounds: r.u32()?,
        },
        0x03 => Message::TriggerDiffusion { batch_size: r.u32()? },
        0x04 => {
            let client_id = r.u32()?;
            let count = r.u32()? as usize;
            if count.saturating_mul(4) > header.payload_len {
                return Err(WireError::PayloadMismatch(format!("{count} timesteps cannot fit")));
            }
            let timesteps = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let x_t = r.tensor()?;
            let epsilon = r.tensor()?;
            check_image_batch("x_t", &x_t, count)?;
            if epsilon.shape() != x_t.shape() {
                return Err(WireError::PayloadMismatch(format!(
                    "epsilon shaped {:?}, x_t shaped {:?}",
                    epsilon.shape(),
                    x_t.shape()
                )));
            }
            Message::NoisedBatch {
                client_id,
                timesteps,
                x_t,
                epsilon,
            }
        }
        0x05 => Message::ServerTrainAck { server_loss: r.loss()? },
        0x06 => {
            let client_id = r.u32()?;
            let boundary_t = r.u32()?;
            let images = r.tensor()?;
            if images.rank() != 4 {
                return Err(WireError::PayloadMismatch("boundary images must be rank 4".into()));
            }
            Message::PartialDenoised {
                client_id,
                boundary_t,
                images,
            }
        }
        0x07 => Message::ClientDone {
            client_id: r.u32()?,
            client_loss: r.loss()?,
        },
        0x08 => {
            let code = r.u16()?;
            let len = r.u32()? as usize;
            let reason = std::str::from_utf8(r.take(len)?)
                .map_err(|_| WireError::BadUtf8)?
                .to_string();
            Message::Abort { code, reason }
        }
        other => return Err(WireError::BadTag(other)),
    };
    r.finish()?;
    Ok(Envelope {
        session: header.session,
        round: header.round,
        message,
    })
}

/// Read one complete frame from a byte stream. Returns `Ok(None)` on a
/// clean end of stream before any header byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: HEADER_LEN,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(WireError::Io(e.to_string())),
        }
    }
    let h = decode_header(&header)?;
    let mut frame = header.to_vec();
    frame.resize(HEADER_LEN + h.payload_len, 0);
    r.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: HEADER_LEN + h.payload_len,
            available: HEADER_LEN,
        },
        _ => WireError::Io(e.to_string()),
    })?;
    Ok(Some(frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_frame_is_rejected() {
        let env = Envelope {
            session: 3,
            round: 1,
            message: Message::TriggerDiffusion { batch_size: 4 },
        };
        let bytes = encode(&env);
        for cut in 0..bytes.len() {
            assert!(matches!(decode(&bytes[..cut]), Err(WireError::Truncated { .. })));
        }
        assert_eq!(decode(&bytes).unwrap(), env);
    }

    #[test]
    fn header_errors_have_distinct_codes() {
        let mut b = encode(&Envelope {
            session: 1,
            round: 0,
            message: Message::Hello { client_id: 0, n_images: 1 },
        });
        let mut codes = std::collections::HashSet::new();
        let mut bad = b.clone();
        bad[0] = b'X';
        codes.insert(decode(&bad).unwrap_err().code());
        let mut bad = b.clone();
        bad[4] = 9;
        codes.insert(decode(&bad).unwrap_err().code());
        let mut bad = b.clone();
        bad[5] = 0x7f;
        codes.insert(decode(&bad).unwrap_err().code());
        let mut bad = b.clone();
        bad[24..28].copy_from_slice(&u32::MAX.to_le_bytes());
        codes.insert(decode(&bad).unwrap_err().code());
        b.push(0);
        codes.insert(decode(&b).unwrap_err().code());
        assert_eq!(codes.len(), 5);
    }

    #[test]
    fn tensor_extent_overflow_is_caught() {
        let mut payload = Vec::new();
        put_u32(&mut payload, 1);
        put_u32(&mut payload, 0);
        put_u32(&mut payload, 4);
        for _ in 0..4 {
            put_u32(&mut payload, u32::MAX);
        }
        let mut frame = Vec::new();
        frame.extend_from_slice(MAGIC);
        frame.extend_from_slice(&[VERSION, 0x06, 0, 0]);
        frame.extend_from_slice(&1u64.to_le_bytes());
        frame.extend_from_slice(&1u64.to_le_bytes());
        put_u32(&mut frame, payload.len() as u32);
        frame.extend_from_slice(&payload);
        assert_eq!(decode(&frame).unwrap_err(), WireError::LengthOverflow);
    }
}
