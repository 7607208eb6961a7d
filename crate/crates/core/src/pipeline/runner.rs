//! Socket-based pipeline runner.
//!
//! A run is a chain `source -> stage* -> sink` of TCP connections. Every role
//! applies a synthetic compute delay of `blocks * block_delay_ms *
//! micro_batch_size` per frame. The source generates activations, stages
//! forward them, and the sink checks and digests them. Each role runs a
//! receive, a compute and a send worker joined by bounded queues, so a slow
//! link back-pressures the compute lane once `slots` frames are queued.
//!
//! On completion the source sends `Shutdown`. Every receiver forwards it and
//! replies `Ack` upstream once its own downstream has acknowledged, so the
//! source observes the end of the whole chain.

use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::frame::{read_frame, FrameError, MsgType, WireFrame, FLAG_BYTE_SPLIT, FLAG_COMPRESSED};
use super::shaper::{shape_link, LinkShape, ShapedLink};
use super::RunMetrics;
use crate::codec::{self, CodecContainer, CodecError, Fp16Stream};
use crate::specdec::{pack, PackedBatch};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("corrupt frame: {0}")]
    FrameCorrupt(String),
    #[error("codec: {0}")]
    Codec(#[from] CodecError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<FrameError> for WireError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Corrupt(m) => WireError::FrameCorrupt(m),
            FrameError::Io(e) => e.into(),
        }
    }
}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        WireError::ConnectionLost(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Stage,
    Sink,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Role::Source),
            "stage" => Ok(Role::Stage),
            "sink" => Ok(Role::Sink),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// What the source puts in each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    /// Gaussian FP16 activations, `micro_batch_size * hidden_dim` values.
    #[default]
    Activations,
    /// Ragged draft-tree hidden states in packed form, `hidden_dim` wide.
    PackedSd,
}

#[derive(Debug, Clone)]
pub struct RoleConfig {
    pub role: Role,
    /// Listen address for stages and sinks.
    pub bind: Option<String>,
    /// Downstream address for sources and stages.
    pub connect: Option<String>,
    /// Shaping of the outgoing link.
    pub shape: LinkShape,
    pub blocks: u32,
    pub block_delay_ms: f64,
    pub micro_batch_size: u32,
    pub compression: bool,
    pub backend: u8,
    pub split: bool,
    pub slots: usize,
    /// Decode steps generated by the source.
    pub steps: u32,
    /// Frames per step generated by the source.
    pub micro_batches: u32,
    pub hidden_dim: usize,
    pub payload: PayloadKind,
    pub seed: u64,
    pub io_timeout: Duration,
}

impl RoleConfig {
    pub fn new(role: Role) -> Self {
        RoleConfig {
            role,
            bind: None,
            connect: None,
            shape: LinkShape::unlimited(),
            blocks: 1,
            block_delay_ms: 0.0,
            micro_batch_size: 1,
            compression: false,
            backend: 1,
            split: true,
            slots: 2,
            steps: 1,
            micro_batches: 1,
            hidden_dim: 1024,
            payload: PayloadKind::Activations,
            seed: 0,
            io_timeout: Duration::from_secs(60),
        }
    }

    fn compute_delay(&self) -> Duration {
        let ms = f64::from(self.blocks) * self.block_delay_ms * f64::from(self.micro_batch_size);
        Duration::from_secs_f64(ms.max(0.0) / 1e3)
    }

    fn validate(&self) -> Result<(), WireError> {
        let bad = |m: &str| Err(WireError::Config(m.to_owned()));
        if self.slots == 0 {
            return bad("slots must be >= 1");
        }
        if self.micro_batch_size == 0 || self.micro_batches == 0 {
            return bad("micro-batch size and count must be >= 1");
        }
        if self.micro_batches > u32::from(u16::MAX) + 1 {
            return bad("at most 65536 micro-batches per step");
        }
        if self.hidden_dim == 0 {
            return bad("hidden dimension must be >= 1");
        }
        if !(self.block_delay_ms >= 0.0) {
            return bad("block delay must be non-negative");
        }
        if !(self.shape.rate_bps > 0.0) {
            return bad("link rate must be positive");
        }
        let needs_bind = self.role != Role::Source;
        let needs_connect = self.role != Role::Sink;
        if needs_bind && self.bind.is_none() {
            return bad("stage and sink roles need --bind");
        }
        if needs_connect && self.connect.is_none() {
            return bad("source and stage roles need --connect");
        }
        Ok(())
    }
}

/// Runs one role to completion and reports what it measured.
pub fn run_wire(cfg: &RoleConfig) -> Result<RunMetrics, WireError> {
    cfg.validate()?;
    let listener = match &cfg.bind {
        Some(addr) if cfg.role != Role::Source => Some(TcpListener::bind(addr)?),
        _ => None,
    };
    run_role(cfg, listener, None)
}

fn connect_with_retry(addr: &str, within: Duration) -> Result<TcpStream, WireError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| WireError::Config(format!("{addr}: {e}")))?
        .collect();
    let deadline = Instant::now() + within;
    loop {
        match TcpStream::connect(&addrs[..]) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => return Err(e.into()),
            Err(_) => thread::sleep(Duration::from_millis(50)),
        }
    }
}

#[derive(Debug, Default)]
struct ComputeStats {
    busy_ms: f64,
    compression_ms: f64,
    frames: u64,
    digest: Option<String>,
}

#[derive(Debug, Default)]
struct SendStats {
    frames: u64,
    bytes: u64,
    transfer_ms: f64,
    /// When the downstream acknowledged shutdown.
    acked_at: Option<Instant>,
}

fn run_role(
    cfg: &RoleConfig,
    listener: Option<TcpListener>,
    epoch: Option<Instant>,
) -> Result<RunMetrics, WireError> {
    cfg.validate()?;
    let started = Instant::now();
    let upstream = match listener {
        Some(l) => {
            let (s, peer) = l.accept()?;
            log::debug!("{:?} accepted {peer}", cfg.role);
            s.set_read_timeout(Some(cfg.io_timeout))?;
            s.set_nodelay(true)?;
            Some(s)
        }
        None => None,
    };
    let downstream = match &cfg.connect {
        Some(addr) if cfg.role != Role::Sink => {
            let s = connect_with_retry(addr, cfg.io_timeout)?;
            s.set_read_timeout(Some(cfg.io_timeout))?;
            s.set_nodelay(true)?;
            Some(s)
        }
        _ => None,
    };

    let (in_tx, in_rx) = mpsc::sync_channel::<WireFrame>(cfg.slots);
    let (out_tx, out_rx) = mpsc::sync_channel::<WireFrame>(cfg.slots);
    let (done_tx, done_rx) = mpsc::channel::<()>();

    thread::scope(|scope| {
        let recv = upstream.map(|s| {
            let in_tx = in_tx.clone();
            scope.spawn(move || recv_worker(s, in_tx, done_rx))
        });
        drop(in_tx);

        let send = downstream.map(|s| {
            let link = shape_link(s, cfg.shape);
            let done = (cfg.role == Role::Stage).then(|| done_tx.clone());
            scope.spawn(move || send_worker(link, out_rx, done))
        });

        let compute = {
            let done = (cfg.role == Role::Sink).then(|| done_tx.clone());
            let input = (cfg.role != Role::Source).then_some(in_rx);
            let output = (cfg.role != Role::Sink).then_some(out_tx);
            scope.spawn(move || compute_worker(cfg, input, output, done))
        };
        drop(done_tx);

        let compute = compute.join().expect("compute worker panicked");
        let send = send.map(|h| h.join().expect("send worker panicked"));
        let recv = recv.map(|h| h.join().expect("receive worker panicked"));

        let compute = compute?;
        let send = send.transpose()?;
        let recv = recv.transpose()?;

        let origin = epoch
            .or_else(|| recv.as_ref().and_then(|r| r.first_frame))
            .unwrap_or(started);
        let end = match (&send, &recv) {
            (Some(s), _) if cfg.role == Role::Source => s.acked_at.unwrap_or_else(Instant::now),
            (_, Some(r)) => r.acked_at.unwrap_or_else(Instant::now),
            _ => Instant::now(),
        };
        let completion_ms = end.saturating_duration_since(origin).as_secs_f64() * 1e3;
        let tokens = compute.frames as f64 * f64::from(cfg.micro_batch_size);
        let hops = usize::from(send.is_some());
        let per_frame = |total: f64, n: u64| if n == 0 { 0.0 } else { total / n as f64 };
        Ok(RunMetrics {
            throughput: if completion_ms > 0.0 { tokens / (completion_ms / 1e3) } else { 0.0 },
            completion_ms,
            step_times_ms: Vec::new(),
            stage_busy_ms: vec![compute.busy_ms],
            stage_idle_ms: vec![(completion_ms - compute.busy_ms).max(0.0)],
            hop_transfer_ms: send.iter().map(|s| per_frame(s.transfer_ms, s.frames)).collect(),
            hop_compression_ms: vec![per_frame(compute.compression_ms, compute.frames); hops],
            hop_frames: send.iter().map(|s| s.frames).collect(),
            hop_bytes: send.iter().map(|s| s.bytes).collect(),
            output_digest: compute.digest,
        })
    })
}

#[derive(Debug)]
struct RecvStats {
    first_frame: Option<Instant>,
    acked_at: Option<Instant>,
}

fn recv_worker(
    stream: TcpStream,
    tx: SyncSender<WireFrame>,
    downstream_done: Receiver<()>,
) -> Result<RecvStats, WireError> {
    let mut writer = stream.try_clone()?;
    let mut reader = io::BufReader::with_capacity(1 << 16, stream);
    let mut stats = RecvStats {
        first_frame: None,
        acked_at: None,
    };
    loop {
        let frame = read_frame(&mut reader)?;
        stats.first_frame.get_or_insert_with(Instant::now);
        match frame.msg_type {
            MsgType::Ack => return Err(WireError::FrameCorrupt("unexpected ack from upstream".into())),
            MsgType::Shutdown => {
                if tx.send(frame).is_err() {
                    return Ok(stats);
                }
                drop(tx);
                // A closed channel without a signal means a downstream worker
                // failed; its error is reported by that worker.
                if downstream_done.recv().is_ok() {
                    WireFrame::control(MsgType::Ack).write_to(&mut writer)?;
                    writer.flush()?;
                    stats.acked_at = Some(Instant::now());
                }
                return Ok(stats);
            }
            MsgType::Activations | MsgType::PackedSd => {
                if tx.send(frame).is_err() {
                    return Ok(stats);
                }
            }
        }
    }
}

fn send_worker(
    mut link: ShapedLink<TcpStream>,
    rx: Receiver<WireFrame>,
    done: Option<mpsc::Sender<()>>,
) -> Result<SendStats, WireError> {
    let mut stats = SendStats::default();
    for frame in rx {
        let hop = link.send_frame(&frame)?;
        log::debug!("sent {:?} frame, {} bytes in {:.3} ms", frame.msg_type, frame.encoded_len(), hop.as_secs_f64() * 1e3);
        if frame.msg_type == MsgType::Shutdown {
            let reply = read_frame(link.get_mut())?;
            if reply.msg_type != MsgType::Ack {
                return Err(WireError::FrameCorrupt(format!(
                    "expected ack, got {:?}",
                    reply.msg_type
                )));
            }
            stats.acked_at = Some(Instant::now());
            if let Some(done) = done {
                let _ = done.send(());
            }
            return Ok(stats);
        }
        stats.frames += 1;
        stats.bytes += frame.encoded_len() as u64;
        stats.transfer_ms += hop.as_secs_f64() * 1e3;
    }
    Ok(stats)
}

/// Deterministic frame contents for the source.
struct Generator {
    rng: ChaCha8Rng,
    kind: PayloadKind,
    values: usize,
    hidden_dim: usize,
}

impl Generator {
    fn new(cfg: &RoleConfig) -> Self {
        Generator {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            kind: cfg.payload,
            values: cfg.micro_batch_size as usize * cfg.hidden_dim,
            hidden_dim: cfg.hidden_dim,
        }
    }

    fn next_payload(&mut self) -> Vec<u8> {
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        match self.kind {
            PayloadKind::Activations => {
                let v: Vec<f32> = (0..self.values).map(|_| normal.sample(&mut self.rng)).collect();
                Fp16Stream::from_f32(&v).into_bytes()
            }
            PayloadKind::PackedSd => {
                let requests = self.values / self.hidden_dim;
                let rows = Uniform::new_inclusive(1usize, 8);
                let per_request: Vec<Vec<Vec<u16>>> = (0..requests)
                    .map(|_| {
                        (0..rows.sample(&mut self.rng))
                            .map(|_| {
                                (0..self.hidden_dim)
                                    .map(|_| half::f16::from_f32(normal.sample(&mut self.rng)).to_bits())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
                pack(&per_request).expect("uniform rows").to_bytes()
            }
        }
    }
}

fn msg_type_for(kind: PayloadKind) -> MsgType {
    match kind {
        PayloadKind::Activations => MsgType::Activations,
        PayloadKind::PackedSd => MsgType::PackedSd,
    }
}

/// Produces (source) or receives frames, sleeps the compute delay, and
/// forwards (source, stage) or digests (sink) them.
fn compute_worker(
    cfg: &RoleConfig,
    input: Option<Receiver<WireFrame>>,
    output: Option<SyncSender<WireFrame>>,
    done: Option<mpsc::Sender<()>>,
) -> Result<ComputeStats, WireError> {
    let mut stats = ComputeStats::default();
    let mut hasher = Sha256::new();
    let delay = cfg.compute_delay();

    let mut handle = |stats: &mut ComputeStats, header: WireFrame, raw: Vec<u8>| -> Result<bool, WireError> {
        let busy_from = Instant::now();
        if header.msg_type == MsgType::PackedSd {
            PackedBatch::from_bytes(&raw).map_err(|e| WireError::FrameCorrupt(e.to_string()))?;
        }
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        hasher.update(&raw);
        stats.frames += 1;
        let Some(out) = &output else {
            stats.busy_ms += busy_from.elapsed().as_secs_f64() * 1e3;
            return Ok(true);
        };
        let (payload, flags) = if cfg.compression {
            let t = Instant::now();
            let c = codec::compress(&Fp16Stream::new(raw)?, cfg.backend, cfg.split)?;
            stats.compression_ms += t.elapsed().as_secs_f64() * 1e3;
            let split = if c.is_split() { FLAG_BYTE_SPLIT } else { 0 };
            (c.to_bytes(), FLAG_COMPRESSED | split)
        } else {
            (raw, 0)
        };
        stats.busy_ms += busy_from.elapsed().as_secs_f64() * 1e3;
        let frame = WireFrame {
            flags,
            payload,
            ..header
        };
        Ok(out.send(frame).is_ok())
    };

    match input {
        None => {
            let mut generator = Generator::new(cfg);
            let kind = msg_type_for(cfg.payload);
            'steps: for step in 0..cfg.steps {
                for k in 0..cfg.micro_batches {
                    let header = WireFrame {
                        msg_type: kind,
                        batch_id: u64::from(step),
                        micro_index: k as u16,
                        flags: 0,
                        payload: Vec::new(),
                    };
                    let raw = generator.next_payload();
                    if !handle(&mut stats, header, raw)? {
                        break 'steps;
                    }
                }
            }
            if let Some(out) = &output {
                let _ = out.send(WireFrame::control(MsgType::Shutdown));
            }
        }
        Some(rx) => {
            for mut frame in rx {
                if frame.msg_type == MsgType::Shutdown {
                    if let Some(out) = &output {
                        let _ = out.send(frame);
                    }
                    if let Some(done) = &done {
                        let _ = done.send(());
                    }
                    break;
                }
                let raw = if frame.flags & FLAG_COMPRESSED != 0 {
                    let container = CodecContainer::from_bytes(&frame.payload)?;
                    codec::decompress(&container)?.into_bytes()
                } else {
                    std::mem::take(&mut frame.payload)
                };
                if !handle(&mut stats, frame, raw)? {
                    break;
                }
            }
        }
    }
    stats.digest = Some(hex::encode(hasher.finalize()));
    Ok(stats)
}

/// An in-process chain over loopback: stage 0 is the source, the last stage
/// is the sink.
#[derive(Debug, Clone)]
pub struct LocalPipelineConfig {
    /// Blocks per stage, at least two stages.
    pub blocks: Vec<u32>,
    pub block_delay_ms: f64,
    /// Outgoing link of every stage but the last.
    pub hops: Vec<LinkShape>,
    pub steps: u32,
    pub micro_batches: u32,
    pub micro_batch_size: u32,
    pub hidden_dim: usize,
    pub compression: bool,
    pub backend: u8,
    pub split: bool,
    pub slots: usize,
    pub payload: PayloadKind,
    pub seed: u64,
}

impl LocalPipelineConfig {
    /// Two stages joined by one link, no compute delay.
    pub fn two_stage(shape: LinkShape) -> Self {
        LocalPipelineConfig {
            blocks: vec![1, 1],
            block_delay_ms: 0.0,
            hops: vec![shape],
            steps: 1,
            micro_batches: 1,
            micro_batch_size: 1,
            hidden_dim: 1024,
            compression: false,
            backend: 1,
            split: true,
            slots: 2,
            payload: PayloadKind::Activations,
            seed: 0,
        }
    }

    fn role(&self, index: usize) -> RoleConfig {
        let last = self.blocks.len() - 1;
        let role = match index {
            0 => Role::Source,
            i if i == last => Role::Sink,
            _ => Role::Stage,
        };
        RoleConfig {
            role,
            bind: None,
            connect: None,
            shape: self.hops.get(index).copied().unwrap_or_else(LinkShape::unlimited),
            blocks: self.blocks[index],
            block_delay_ms: self.block_delay_ms,
            micro_batch_size: self.micro_batch_size,
            compression: self.compression,
            backend: self.backend,
            split: self.split,
            slots: self.slots,
            steps: self.steps,
            micro_batches: self.micro_batches,
            hidden_dim: self.hidden_dim,
            payload: self.payload,
            seed: self.seed,
            io_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalRun {
    /// Whole-chain view: completion at the source, per-stage busy times and
    /// per-hop transfers in chain order, digest at the sink.
    pub metrics: RunMetrics,
    /// Digest of what the source generated.
    pub source_digest: String,
    pub roles: Vec<RunMetrics>,
}

impl LocalRun {
    pub fn lossless(&self) -> bool {
        self.metrics.output_digest.as_deref() == Some(self.source_digest.as_str())
    }
}

pub fn run_local_pipeline(cfg: &LocalPipelineConfig) -> Result<LocalRun, WireError> {
    let n = cfg.blocks.len();
    if n < 2 {
        return Err(WireError::Config("a local pipeline needs at least two stages".into()));
    }
    if cfg.hops.len() != n - 1 {
        return Err(WireError::Config(format!("{} stages need {} hop shapes, got {}", n, n - 1, cfg.hops.len())));
    }
    let mut listeners = Vec::with_capacity(n - 1);
    let mut addrs = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let l = TcpListener::bind("127.0.0.1:0")?;
        addrs.push(l.local_addr()?.to_string());
        listeners.push(Some(l));
    }
    let roles: Vec<RoleConfig> = (0..n)
        .map(|i| {
            let mut r = cfg.role(i);
            r.connect = addrs.get(i).cloned();
            r.bind = i.checked_sub(1).map(|j| addrs[j].clone());
            r
        })
        .collect();
    for r in &roles {
        r.validate()?;
    }
    let epoch = Instant::now();
    let results: Vec<Result<RunMetrics, WireError>> = thread::scope(|scope| {
        let handles: Vec<_> = roles
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let listener = if i == 0 { None } else { listeners[i - 1].take() };
                scope.spawn(move || run_role(r, listener, Some(epoch)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("role panicked")).collect()
    });
    let roles = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let source = &roles[0];
    let sink = &roles[n - 1];
    let metrics = RunMetrics {
        throughput: source.throughput,
        completion_ms: source.completion_ms,
        step_times_ms: Vec::new(),
        stage_busy_ms: roles.iter().flat_map(|r| r.stage_busy_ms.iter().copied()).collect(),
        stage_idle_ms: roles
            .iter()
            .flat_map(|r| r.stage_busy_ms.iter().map(|b| (source.completion_ms - b).max(0.0)))
            .collect(),
        hop_transfer_ms: roles.iter().flat_map(|r| r.hop_transfer_ms.iter().copied()).collect(),
        hop_compression_ms: roles.iter().flat_map(|r| r.hop_compression_ms.iter().copied()).collect(),
        hop_frames: roles.iter().flat_map(|r| r.hop_frames.iter().copied()).collect(),
        hop_bytes: roles.iter().flat_map(|r| r.hop_bytes.iter().copied()).collect(),
        output_digest: sink.output_digest.clone(),
    };
    Ok(LocalRun {
        metrics,
        source_digest: source.output_digest.clone().unwrap_or_default(),
        roles,
    })
}
