//! Sender-side link shaping: a fixed propagation delay followed by a
//! token-bucket paced write.

use std::io::{self, Write};
use std::thread;
use std::time::{Duration, Instant};

use super::frame::WireFrame;

/// Bytes written per pacing step.
pub const CHUNK: usize = 4096;

/// Paces a byte stream to `rate` bytes per second with at most `burst`
/// bytes of accumulated credit.
///
/// The bucket keeps an absolute release time rather than sleeping a fixed
/// amount per chunk, so scheduler overshoot on one chunk is recovered on
/// the next.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    release_at: Option<Instant>,
}

impl TokenBucket {
    pub fn new(rate_bytes_per_s: f64, burst_bytes: f64) -> Self {
        assert!(rate_bytes_per_s > 0.0, "rate must be positive");
        TokenBucket {
            rate: rate_bytes_per_s,
            burst: burst_bytes.max(0.0),
            release_at: None,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Reserves `bytes` and returns how long the caller must wait before
    /// sending them.
    pub fn reserve(&mut self, bytes: usize, now: Instant) -> Duration {
        let credit = Duration::from_secs_f64(self.burst / self.rate);
        let floor = now.checked_sub(credit).unwrap_or(now);
        let mut t = match self.release_at {
            Some(t) if t > floor => t,
            _ => floor,
        };
        t += Duration::from_secs_f64(bytes as f64 / self.rate);
        self.release_at = Some(t);
        t.saturating_duration_since(now)
    }

    pub fn take(&mut self, bytes: usize) {
        let wait = self.reserve(bytes, Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Emulated link characteristics. An infinite rate disables pacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkShape {
    /// Bits per second.
    pub rate_bps: f64,
    pub latency_ms: f64,
}

impl LinkShape {
    pub fn unlimited() -> Self {
        LinkShape {
            rate_bps: f64::INFINITY,
            latency_ms: 0.0,
        }
    }

    pub fn mbps(rate_mbps: f64, latency_ms: f64) -> Self {
        LinkShape {
            rate_bps: rate_mbps * 1e6,
            latency_ms,
        }
    }

    /// Parses `RATE_MBPS,LATENCY_MS`, e.g. `20,5`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let (rate, lat) = s
            .split_once(',')
            .ok_or_else(|| format!("expected RATE_MBPS,LATENCY_MS, got {s:?}"))?;
        let rate: f64 = rate.trim().parse().map_err(|e| format!("rate: {e}"))?;
        let lat: f64 = lat.trim().parse().map_err(|e| format!("latency: {e}"))?;
        if !(rate > 0.0) || !(lat >= 0.0) {
            return Err(format!("rate must be positive and latency non-negative, got {s:?}"));
        }
        Ok(LinkShape::mbps(rate, lat))
    }

    /// Time to deliver `bytes` over this link, in milliseconds.
    pub fn transfer_ms(&self, bytes: usize) -> f64 {
        if self.rate_bps.is_finite() {
            self.latency_ms + bytes as f64 * 8.0 / self.rate_bps * 1e3
        } else {
            self.latency_ms
        }
    }
}

/// A writer that delivers whole frames through a shaped link.
pub struct ShapedLink<W: Write> {
    inner: W,
    bucket: Option<TokenBucket>,
    latency: Duration,
}

pub fn shape_link<W: Write>(inner: W, shape: LinkShape) -> ShapedLink<W> {
    let bucket = shape
        .rate_bps
        .is_finite()
        .then(|| TokenBucket::new(shape.rate_bps / 8.0, CHUNK as f64));
    ShapedLink {
        inner,
        bucket,
        latency: Duration::from_secs_f64(shape.latency_ms.max(0.0) / 1e3),
    }
}

impl<W: Write> ShapedLink<W> {
    /// Sends one frame and returns the hop time: the latency hold plus the
    /// time from the first byte written to the last.
    pub fn send_frame(&mut self, frame: &WireFrame) -> io::Result<Duration> {
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        let start = Instant::now();
        self.write_paced(&frame.header())?;
        self.write_paced(&frame.payload)?;
        self.inner.flush()?;
        Ok(self.latency + start.elapsed())
    }

    fn write_paced(&mut self, bytes: &[u8]) -> io::Result<()> {
        match &mut self.bucket {
            None => self.inner.write_all(bytes),
            Some(bucket) => {
                for chunk in bytes.chunks(CHUNK) {
                    bucket.take(chunk.len());
                    self.inner.write_all(chunk)?;
                }
                Ok(())
            }
        }
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
