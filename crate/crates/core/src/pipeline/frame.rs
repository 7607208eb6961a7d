//! Length-prefixed frames exchanged between pipeline processes.
//!
//! Header, little-endian, 20 octets:
//!
//! | offset | size | field                                    |
//! |--------|------|------------------------------------------|
//! | 0      | 4    | magic `BBF1`                             |
//! | 4      | 1    | message type                             |
//! | 5      | 8    | batch id                                 |
//! | 13     | 2    | micro-batch index                        |
//! | 15     | 1    | flags (bit 0 compressed, bit 1 split)    |
//! | 16     | 4    | payload length                           |

use std::io::{self, Read, Write};

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = *b"BBF1";
pub const FRAME_HEADER_LEN: usize = 20;
pub const FLAG_COMPRESSED: u8 = 0b01;
pub const FLAG_BYTE_SPLIT: u8 = 0b10;
/// Frames larger than this are treated as corrupt.
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("corrupt frame: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Activations = 0,
    PackedSd = 1,
    Ack = 2,
    Shutdown = 3,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;

    fn try_from(v: u8) -> Result<Self, FrameError> {
        Ok(match v {
            0 => MsgType::Activations,
            1 => MsgType::PackedSd,
            2 => MsgType::Ack,
            3 => MsgType::Shutdown,
            other => return Err(FrameError::Corrupt(format!("unknown message type {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub msg_type: MsgType,
    pub batch_id: u64,
    pub micro_index: u16,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn control(msg_type: MsgType) -> Self {
        WireFrame {
            msg_type,
            batch_id: 0,
            micro_index: 0,
            flags: 0,
            payload: Vec::new(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn header(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        h[0..4].copy_from_slice(&FRAME_MAGIC);
        h[4] = self.msg_type as u8;
        h[5..13].copy_from_slice(&self.batch_id.to_le_bytes());
        h[13..15].copy_from_slice(&self.micro_index.to_le_bytes());
        h[15] = self.flags;
        h[16..20].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FrameError> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(FrameError::Corrupt(format!("{} trailing bytes", cursor.len())));
        }
        Ok(frame)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)
    }
}

/// Reads one frame. A clean end of stream before the header is reported as
/// `UnexpectedEof`.
pub fn read_frame(r: &mut impl Read) -> Result<WireFrame, FrameError> {
    let mut h = [0u8; FRAME_HEADER_LEN];
    r.read_exact(&mut h)?;
    if h[0..4] != FRAME_MAGIC {
        return Err(FrameError::Corrupt("bad magic".into()));
    }
    let msg_type = MsgType::try_from(h[4])?;
    let batch_id = u64::from_le_bytes(h[5..13].try_into().unwrap());
    let micro_index = u16::from_le_bytes([h[13], h[14]]);
    let flags = h[15];
    let len = u32::from_le_bytes(h[16..20].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(FrameError::Corrupt(format!("payload length {len} too large")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameError::Corrupt("truncated payload".into())
        } else {
            FrameError::Io(e)
        }
    })?;
    Ok(WireFrame {
        msg_type,
        batch_id,
        micro_index,
        flags,
        payload,
    })
}
