//! End-to-end validation of the analytic models: a deterministic
//! discrete-event simulator and a socket-based runner over shaped links.

use serde::{Deserialize, Serialize};

pub mod frame;
pub mod runner;
pub mod shaper;
pub mod sim;

pub use frame::{FrameError, MsgType, WireFrame};
pub use runner::{run_local_pipeline, run_wire, LocalPipelineConfig, LocalRun, PayloadKind, Role, RoleConfig, WireError};
pub use shaper::{shape_link, LinkShape, ShapedLink, TokenBucket};
pub use sim::{simulate, simulate_stages, SimConfig, SimError, StageTimes};

/// Measurements from a simulated or real run. Times in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Tokens per second.
    pub throughput: f64,
    pub completion_ms: f64,
    pub step_times_ms: Vec<f64>,
    pub stage_busy_ms: Vec<f64>,
    pub stage_idle_ms: Vec<f64>,
    /// Mean per-frame transfer time on each hop.
    pub hop_transfer_ms: Vec<f64>,
    /// Mean per-frame compression time on each hop.
    pub hop_compression_ms: Vec<f64>,
    pub hop_frames: Vec<u64>,
    /// Payload bytes put on each hop.
    pub hop_bytes: Vec<u64>,
    /// SHA-256 of the delivered activations, when measured at a sink.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_digest: Option<String>,
}
