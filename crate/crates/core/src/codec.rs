//! Lossless compression of FP16 activation streams.
//!
//! Each little-endian FP16 element is split into its high byte (sign,
//! exponent and the top two mantissa bits) and its low byte (the remaining
//! mantissa bits). The two lanes have very different byte distributions, so
//! compressing them separately beats compressing the interleaved stream.
//!
//! Container layout, little-endian throughout:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `BBC1`                   |
//! | 4      | 1    | version (1)                    |
//! | 5      | 1    | backend id                     |
//! | 6      | 1    | flags (bit 0: byte-split)      |
//! | 7      | 8    | element count                  |
//! | 15     | 8    | high blob length               |
//! | 23     | 8    | low blob length                |
//! | 31     | ..   | high blob, then low blob       |

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"BBC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 31;
pub const FLAG_SPLIT: u8 = 0b0000_0001;

/// Streams at least this long compress their two lanes on separate threads.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("stream has odd length {0}")]
    OddLength(usize),
    #[error("lane lengths differ: high {high}, low {low}")]
    LaneLengthMismatch { high: usize, low: usize },
    #[error("unknown backend {0}")]
    BackendUnknown(String),
    #[error("corrupt container: {0}")]
    CorruptContainer(String),
}

fn corrupt(msg: impl Into<String>) -> CodecError {
    CodecError::CorruptContainer(msg.into())
}

/// Raw FP16 octets; element `k` occupies bytes `2k` (low) and `2k + 1` (high).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Fp16Stream(Vec<u8>);

impl Fp16Stream {
    pub fn new(bytes: Vec<u8>) -> Result<Self, CodecError> {
        if bytes.len() % 2 != 0 {
            return Err(CodecError::OddLength(bytes.len()));
        }
        Ok(Fp16Stream(bytes))
    }

    pub fn from_f32(values: &[f32]) -> Self {
        Fp16Stream(
            values
                .iter()
                .flat_map(|&v| half::f16::from_f32(v).to_le_bytes())
                .collect(),
        )
    }

    pub fn from_bits(bits: &[u16]) -> Self {
        Fp16Stream(bits.iter().flat_map(|b| b.to_le_bytes()).collect())
    }

    pub fn element_count(&self) -> usize {
        self.0.len() / 2
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

/// Splits a stream into (high lane, low lane).
pub fn byte_split(s: &Fp16Stream) -> (Vec<u8>, Vec<u8>) {
    let n = s.element_count();
    let mut high = Vec::with_capacity(n);
    let mut low = Vec::with_capacity(n);
    for pair in s.0.chunks_exact(2) {
        low.push(pair[0]);
        high.push(pair[1]);
    }
    (high, low)
}

/// Splits raw octets, rejecting odd lengths.
pub fn byte_split_bytes(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>), CodecError> {
    if bytes.len() % 2 != 0 {
        return Err(CodecError::OddLength(bytes.len()));
    }
    Ok(byte_split(&Fp16Stream(bytes.to_vec())))
}

pub fn byte_merge(high: &[u8], low: &[u8]) -> Result<Fp16Stream, CodecError> {
    if high.len() != low.len() {
        return Err(CodecError::LaneLengthMismatch {
            high: high.len(),
            low: low.len(),
        });
    }
    let mut out = Vec::with_capacity(high.len() * 2);
    for (&h, &l) in high.iter().zip(low) {
        out.push(l);
        out.push(h);
    }
    Ok(Fp16Stream(out))
}

/// Byte-value frequencies.
pub fn histogram(data: &[u8]) -> [u64; 256] {
    let mut counts = [0u64; 256];
    for &b in data {
        counts[b as usize] += 1;
    }
    counts
}

/// Shannon entropy in bits per byte; zero for empty input.
pub fn entropy(data: &[u8]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total = data.len() as f64;
    let h: f64 = histogram(data)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    h.clamp(0.0, 8.0)
}

/// A pair of pure transforms with `decode(encode(x)) == x`.
pub trait Backend: Send + Sync {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn encode(&self, data: &[u8]) -> Vec<u8>;
    fn decode(&self, data: &[u8]) -> Result<Vec<u8>, CodecError>;
}

pub struct Identity;

impl Backend for Identity {
    fn id(&self) -> u8 {
        0
    }
    fn name(&self) -> &'static str {
        "identity"
    }
    fn encode(&self, data: &[u8]) -> Vec<u8> {
        data.to_vec()
    }
    fn decode(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        Ok(data.to_vec())
    }
}

/// Zstandard at its default level.
pub struct Zstd;

impl Backend for Zstd {
    fn id(&self) -> u8 {
        1
    }
    fn name(&self) -> &'static str {
        "zstd"
    }
    fn encode(&self, data: &[u8]) -> Vec<u8> {
        zstd::bulk::compress(data, zstd::DEFAULT_COMPRESSION_LEVEL).expect("in-memory zstd")
    }
    fn decode(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        zstd::stream::decode_all(data).map_err(|e| corrupt(format!("zstd: {e}")))
    }
}

/// DEFLATE at the default level.
pub struct Deflate;

impl Backend for Deflate {
    fn id(&self) -> u8 {
        2
    }
    fn name(&self) -> &'static str {
        "deflate"
    }
    fn encode(&self, data: &[u8]) -> Vec<u8> {
        let mut enc =
            flate2::write::DeflateEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(data).expect("in-memory deflate");
        enc.finish().expect("in-memory deflate")
    }
    fn decode(&self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::new();
        flate2::read::DeflateDecoder::new(data)
            .read_to_end(&mut out)
            .map_err(|e| corrupt(format!("deflate: {e}")))?;
        Ok(out)
    }
}

/// Backends addressable by id or name.
pub struct Registry {
    backends: Vec<Box<dyn Backend>>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry {
            backends: vec![Box::new(Identity), Box::new(Zstd), Box::new(Deflate)],
        }
    }
}

impl Registry {
    /// Adds a backend, replacing any existing one with the same id.
    pub fn register(&mut self, backend: Box<dyn Backend>) {
        self.backends.retain(|b| b.id() != backend.id());
        self.backends.push(backend);
    }

    pub fn by_id(&self, id: u8) -> Result<&dyn Backend, CodecError> {
        self.backends
            .iter()
            .find(|b| b.id() == id)
            .map(|b| b.as_ref())
            .ok_or_else(|| CodecError::BackendUnknown(id.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&dyn Backend, CodecError> {
        self.backends
            .iter()
            .find(|b| b.name() == name)
            .map(|b| b.as_ref())
            .ok_or_else(|| CodecError::BackendUnknown(name.to_owned()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.backends.iter().map(|b| b.name()).collect()
    }

    pub fn compress(
        &self,
        s: &Fp16Stream,
        backend_id: u8,
        split: bool,
    ) -> Result<CodecContainer, CodecError> {
        let backend = self.by_id(backend_id)?;
        let (high_blob, low_blob) = if split {
            let (high, low) = byte_split(s);
            encode_pair(backend, &high, &low)
        } else {
            (backend.encode(s.as_bytes()), Vec::new())
        };
        Ok(CodecContainer {
            backend_id,
            flags: if split { FLAG_SPLIT } else { 0 },
            element_count: s.element_count() as u64,
            high_blob,
            low_blob,
        })
    }

    pub fn decompress(&self, c: &CodecContainer) -> Result<Fp16Stream, CodecError> {
        let backend = self.by_id(c.backend_id)?;
        let n = usize::try_from(c.element_count).map_err(|_| corrupt("element count overflow"))?;
        if c.flags & FLAG_SPLIT != 0 {
            let (high, low) = decode_pair(backend, &c.high_blob, &c.low_blob);
            let (high, low) = (high?, low?);
            if high.len() != n || low.len() != n {
                return Err(corrupt(format!(
                    "lanes decode to {}/{} bytes, header says {n} elements",
                    high.len(),
                    low.len()
                )));
            }
            byte_merge(&high, &low)
        } else {
            if !c.low_blob.is_empty() {
                return Err(corrupt("raw-mode container carries a low blob"));
            }
            let raw = backend.decode(&c.high_blob)?;
            if Some(raw.len()) != n.checked_mul(2) {
                return Err(corrupt(format!(
                    "stream decodes to {} bytes, header says {n} elements",
                    raw.len()
                )));
            }
            Ok(Fp16Stream(raw))
        }
    }

    pub fn analyze(&self, s: &Fp16Stream, backend_id: u8) -> Result<EntropyReport, CodecError> {
        let (high, low) = byte_split(s);
        let raw_mode = self.compress(s, backend_id, false)?;
        let split_mode = self.compress(s, backend_id, true)?;
        let raw_size = s.as_bytes().len() as u64;
        let ratio = |n: usize| {
            if raw_size == 0 {
                1.0
            } else {
                n as f64 / raw_size as f64
            }
        };
        Ok(EntropyReport {
            raw_entropy: entropy(s.as_bytes()),
            high_entropy: entropy(&high),
            low_entropy: entropy(&low),
            raw_size,
            lane_size: high.len() as u64,
            raw_mode_compressed: raw_mode.high_blob.len() as u64,
            high_compressed: split_mode.high_blob.len() as u64,
            low_compressed: split_mode.low_blob.len() as u64,
            split_mode_compressed: (split_mode.high_blob.len() + split_mode.low_blob.len()) as u64,
            raw_mode_ratio: ratio(raw_mode.high_blob.len()),
            ratio: ratio(split_mode.high_blob.len() + split_mode.low_blob.len()),
        })
    }
}

fn encode_pair(backend: &dyn Backend, high: &[u8], low: &[u8]) -> (Vec<u8>, Vec<u8>) {
    if high.len() < PARALLEL_THRESHOLD {
        return (backend.encode(high), backend.encode(low));
    }
    std::thread::scope(|scope| {
        let h = scope.spawn(|| backend.encode(high));
        let l = backend.encode(low);
        (h.join().expect("lane encoder panicked"), l)
    })
}

type Decoded = Result<Vec<u8>, CodecError>;

fn decode_pair(backend: &dyn Backend, high: &[u8], low: &[u8]) -> (Decoded, Decoded) {
    if high.len() + low.len() < PARALLEL_THRESHOLD {
        return (backend.decode(high), backend.decode(low));
    }
    std::thread::scope(|scope| {
        let h = scope.spawn(|| backend.decode(high));
        let l = backend.decode(low);
        (h.join().expect("lane decoder panicked"), l)
    })
}

/// Compresses with the default registry.
pub fn compress(s: &Fp16Stream, backend_id: u8, split: bool) -> Result<CodecContainer, CodecError> {
    Registry::default().compress(s, backend_id, split)
}

/// Decompresses with the default registry.
pub fn decompress(c: &CodecContainer) -> Result<Fp16Stream, CodecError> {
    Registry::default().decompress(c)
}

pub fn analyze(s: &Fp16Stream, backend_id: u8) -> Result<EntropyReport, CodecError> {
    Registry::default().analyze(s, backend_id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecContainer {
    pub backend_id: u8,
    pub flags: u8,
    pub element_count: u64,
    pub high_blob: Vec<u8>,
    pub low_blob: Vec<u8>,
}

impl CodecContainer {
    pub fn is_split(&self) -> bool {
        self.flags & FLAG_SPLIT != 0
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.high_blob.len() + self.low_blob.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.backend_id);
        out.push(self.flags);
        out.extend_from_slice(&self.element_count.to_le_bytes());
        out.extend_from_slice(&(self.high_blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.low_blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.high_blob);
        out.extend_from_slice(&self.low_blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(corrupt(format!("unsupported version {}", bytes[4])));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let element_count = u64_at(7);
        let high_len = u64_at(15);
        let low_len = u64_at(23);
        let body = (bytes.len() - HEADER_LEN) as u64;
        if high_len.checked_add(low_len) != Some(body) {
            return Err(corrupt(format!(
                "blob lengths {high_len} + {low_len} do not match {body} body bytes"
            )));
        }
        let split_at = HEADER_LEN + high_len as usize;
        Ok(CodecContainer {
            backend_id: bytes[5],
            flags: bytes[6],
            element_count,
            high_blob: bytes[HEADER_LEN..split_at].to_vec(),
            low_blob: bytes[split_at..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub raw_entropy: f64,
    pub high_entropy: f64,
    pub low_entropy: f64,
    pub raw_size: u64,
    pub lane_size: u64,
    pub raw_mode_compressed: u64,
    pub high_compressed: u64,
    pub low_compressed: u64,
    pub split_mode_compressed: u64,
    pub raw_mode_ratio: f64,
    /// Split-mode compressed size over raw size.
    pub ratio: f64,
}
