//! The `beeplan` command line. Every subcommand prints one JSON document.
//!
//! Exit codes: 0 on success, 1 on domain errors (one JSON line on stderr),
//! 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cluster::{load_cluster_spec, ClusterError, ClusterSpec};
use crate::codec::{self, CodecContainer, CodecError, Fp16Stream, Registry};
use crate::cost::PayloadMode;
use crate::pipeline::{
    run_local_pipeline, run_wire, simulate, LinkShape, LocalPipelineConfig, PayloadKind, Role,
    RoleConfig, SimConfig, SimError, WireError,
};
use crate::planner::{
    brute_force_assignment, enumerate_plans, Objective, Plan, PlanCandidates, PlanError,
    DEFAULT_COMPRESSION_RATIO, DEFAULT_MAX_MICRO_BATCHES,
};
use crate::sd::{break_even_bandwidth, decide_sd, t_auto, t_spec, PruneLevel, SdParams};

/// Bytes in the MB unit accepted by `analyze-sd`.
const MB: f64 = 1e6;

#[derive(Debug, Parser)]
#[command(name = "beeplan", version, about = "Plan, simulate and measure pipelined inference over slow links")]
struct Cli {
    /// Seed for every randomized input.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Choose layer assignment, batch size, micro-batches and compression.
    Plan(PlanArgs),
    /// Run a plan through the discrete-event simulator.
    Simulate(SimulateArgs),
    /// Speculative-decoding break-even analysis.
    AnalyzeSd(AnalyzeSdArgs),
    /// Compress a file of raw FP16 values into a container.
    Compress(CompressArgs),
    /// Restore raw FP16 values from a container.
    Decompress(DecompressArgs),
    /// Byte entropy and compressed sizes of a raw FP16 file.
    Entropy(EntropyArgs),
    /// Run one role of a socket pipeline over a shaped link.
    BenchWire(BenchWireArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Sum,
    Cycle,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Sum => Objective::SumOfStages,
            ObjectiveArg::Cycle => Objective::BottleneckCycle,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PayloadModeArg {
    PerMicroBatch,
    WholeBatch,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Force one objective; by default M = 1 uses `sum` and M > 1 `cycle`.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Candidate batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    batch_set: Option<Vec<u32>>,
    #[arg(long, default_value_t = DEFAULT_MAX_MICRO_BATCHES)]
    max_micro_batches: u32,
    #[arg(long, default_value_t = DEFAULT_COMPRESSION_RATIO)]
    compression_ratio: f64,
    /// CPU time charged per compressed hop, ms.
    #[arg(long, default_value_t = 0.0)]
    compression_cpu_ms: f64,
    #[arg(long, value_enum, default_value_t = PayloadModeArg::PerMicroBatch)]
    payload_mode: PayloadModeArg,
    /// Never consider compression.
    #[arg(long)]
    no_compression: bool,
    /// Re-solve the chosen configuration by exhaustive search and report both.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Plan JSON as printed by `plan`.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value_t = 1)]
    steps: u32,
    #[arg(long, default_value_t = 2)]
    slots: u32,
}

#[derive(Debug, Args)]
struct AnalyzeSdArgs {
    #[arg(long)]
    params: PathBuf,
    /// `LO:HI:STEPS` in MB/s, evenly spaced and inclusive.
    #[arg(long)]
    bandwidth_sweep: Option<String>,
}

#[derive(Debug, Args)]
struct CodecArgs {
    #[arg(long, default_value = "zstd")]
    backend: String,
    /// Compress the interleaved stream instead of the two byte lanes.
    #[arg(long)]
    no_split: bool,
}

#[derive(Debug, Args)]
struct CompressArgs {
    input: PathBuf,
    /// Where the container goes.
    dest: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Debug, Args)]
struct DecompressArgs {
    input: PathBuf,
    dest: PathBuf,
}

#[derive(Debug, Args)]
struct EntropyArgs {
    input: PathBuf,
    #[arg(long, default_value = "zstd")]
    backend: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Source,
    Stage,
    Sink,
    /// Every role in this process over loopback.
    Local,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PayloadArg {
    Activations,
    PackedSd,
}

#[derive(Debug, Args)]
struct BenchWireArgs {
    #[arg(long, value_enum)]
    role: RoleArg,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    connect: Option<String>,
    /// Outgoing link as `RATE_MBPS,LATENCY_MS`; unshaped if omitted.
    #[arg(long, value_parser = LinkShape::parse)]
    shape: Option<LinkShape>,
    /// Stages in a `local` run, including source and sink.
    #[arg(long, default_value_t = 2)]
    stages: usize,
    #[arg(long, default_value_t = 1)]
    blocks: u32,
    #[arg(long, default_value_t = 0.0)]
    block_delay_ms: f64,
    #[arg(long, default_value_t = 1)]
    micro_batch_size: u32,
    #[arg(long, default_value_t = 1)]
    micro_batches: u32,
    #[arg(long, default_value_t = 1)]
    steps: u32,
    /// FP16 values per batch item.
    #[arg(long, default_value_t = 1024)]
    hidden_dim: usize,
    #[arg(long)]
    compress: bool,
    #[command(flatten)]
    codec: CodecArgs,
    #[arg(long, default_value_t = 2)]
    slots: usize,
    #[arg(long, value_enum, default_value_t = PayloadArg::Activations)]
    payload: PayloadArg,
    #[arg(long, default_value_t = 60)]
    timeout_s: u64,
}

/// A domain error reported as `{"error": kind, "message": ...}`.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            kind,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Failure::new("Io", format!("{}: {e}", path.display()))
    }
}

impl From<ClusterError> for Failure {
    fn from(e: ClusterError) -> Self {
        let kind = match e {
            ClusterError::Parse(_) => "ParseError",
            ClusterError::Validation { .. } => "ValidationError",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<PlanError> for Failure {
    fn from(e: PlanError) -> Self {
        let kind = match e {
            PlanError::InfeasiblePlan(_) => "InfeasiblePlan",
            PlanError::NoFeasiblePlan => "NoFeasiblePlan",
            PlanError::TooLarge(_) => "TooLarge",
            PlanError::InvalidArgument(_) => "InvalidArgument",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InfeasiblePlan(p) => p.into(),
            SimError::Invalid(m) => Failure::new("InvalidArgument", m),
        }
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        let kind = match e {
            CodecError::OddLength(_) => "OddLength",
            CodecError::LaneLengthMismatch { .. } => "LaneLengthMismatch",
            CodecError::BackendUnknown(_) => "BackendUnknown",
            CodecError::CorruptContainer(_) => "CorruptContainer",
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<WireError> for Failure {
    fn from(e: WireError) -> Self {
        let kind = match e {
            WireError::ConnectionLost(_) => "ConnectionLost",
            WireError::FrameCorrupt(_) => "FrameCorrupt",
            WireError::Codec(_) => "CodecError",
            WireError::Config(_) => "InvalidArgument",
        };
        Failure::new(kind, e.to_string())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::io(path, e))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn load_spec(path: &Path) -> Result<ClusterSpec, Failure> {
    Ok(load_cluster_spec(&read_text(path)?)?)
}

/// Parses argv, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = std::env::var("BEEPLAN_LOG").unwrap_or_else(|_| "error".into());
    let _ = env_logger::Builder::new().parse_filters(&level).try_init();

    let result = dispatch(&cli).and_then(|value| {
        let Format::Json = cli.format;
        let text = serde_json::to_string_pretty(&value).expect("JSON values serialize");
        match &cli.output {
            Some(path) => write(path, format!("{text}\n").as_bytes()),
            None => {
                let mut out = io::stdout().lock();
                writeln!(out, "{text}").map_err(|e| Failure::new("Io", e.to_string()))
            }
        }
    });
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Value, Failure> {
    match &cli.command {
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::AnalyzeSd(a) => analyze_sd(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Entropy(a) => entropy(a),
        Command::BenchWire(a) => bench_wire(a, cli.seed),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn plan(a: &PlanArgs) -> Result<Value, Failure> {
    let spec = load_spec(&a.spec)?;
    let defaults = PlanCandidates::default();
    let candidates = PlanCandidates {
        batch_sizes: a.batch_set.clone().unwrap_or(defaults.batch_sizes),
        max_micro_batches: a.max_micro_batches,
        compression_options: if a.no_compression { vec![false] } else { vec![false, true] },
        compression_ratio: a.compression_ratio,
        compression_cpu_ms: a.compression_cpu_ms,
        payload_mode: match a.payload_mode {
            PayloadModeArg::PerMicroBatch => PayloadMode::PerMicroBatch,
            PayloadModeArg::WholeBatch => PayloadMode::WholeBatch,
        },
        objective: a.objective.map(Objective::from),
    };
    let best = enumerate_plans(&spec, &candidates)?;
    let mut value = to_value(&best);
    if a.oracle {
        let oracle = brute_force_assignment(&spec, &best.cost_params(), best.objective)?;
        value["oracle"] = json!({
            "layers": oracle.layers,
            "predicted_step_time_ms": oracle.predicted_step_time_ms,
            "matches": oracle.predicted_step_time_ms == best.predicted_step_time_ms,
        });
    }
    Ok(value)
}

fn simulate_cmd(a: &SimulateArgs) -> Result<Value, Failure> {
    let spec = load_spec(&a.spec)?;
    let plan: Plan = serde_json::from_str(&read_text(&a.plan)?)
        .map_err(|e| Failure::new("ParseError", format!("{}: {e}", a.plan.display())))?;
    if plan.layers.len() != spec.node_count() {
        return Err(Failure::new(
            "InvalidArgument",
            format!("plan has {} stages, spec has {} nodes", plan.layers.len(), spec.node_count()),
        ));
    }
    let metrics = simulate(
        &plan,
        &spec,
        &SimConfig {
            steps: a.steps,
            slots: a.slots,
        },
    )?;
    Ok(to_value(&metrics))
}

/// `analyze-sd` input with sizes in MB and bandwidth in MB/s.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdParamsFile {
    tokens: f64,
    payload_mb: f64,
    bandwidth_mb_s: f64,
    t_rtt_ms: f64,
    t_comp_ms: f64,
    compute_ratio: f64,
    draft_ms: f64,
    nodes: f64,
    tree_size: f64,
    accepted: f64,
    #[serde(default = "one")]
    batch: f64,
    /// Tree configurations tried in order; defaults to the full tree
    /// followed by a tree 60% smaller keeping 96% of its acceptance.
    #[serde(default)]
    prune_levels: Option<Vec<PruneLevel>>,
}

fn one() -> f64 {
    1.0
}

impl SdParamsFile {
    fn params(&self) -> SdParams {
        SdParams {
            tokens: self.tokens,
            payload_bytes: self.payload_mb * MB,
            bandwidth: self.bandwidth_mb_s * MB,
            t_rtt_ms: self.t_rtt_ms,
            t_comp_ms: self.t_comp_ms,
            compute_ratio: self.compute_ratio,
            draft_ms: self.draft_ms,
            nodes: self.nodes,
            tree_size: self.tree_size,
            accepted: self.accepted,
            batch: self.batch,
        }
    }

    fn levels(&self) -> Vec<PruneLevel> {
        self.prune_levels.clone().unwrap_or_else(|| {
            vec![
                PruneLevel {
                    tree_size: self.tree_size,
                    accepted: self.accepted,
                },
                PruneLevel {
                    tree_size: self.tree_size * 0.4,
                    accepted: (self.accepted * 0.96).max(1.0),
                },
            ]
        })
    }
}

fn parse_sweep(s: &str) -> Result<(f64, f64, usize), Failure> {
    let bad = || Failure::new("InvalidArgument", format!("bandwidth sweep must be LO:HI:STEPS, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, steps] = parts[..] else {
        return Err(bad());
    };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let steps: usize = steps.parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && steps >= 1) {
        return Err(bad());
    }
    Ok((lo, hi, steps))
}

fn sd_point(p: &SdParams, levels: &[PruneLevel], bandwidth: f64) -> Value {
    let q = p.with_bandwidth(bandwidth);
    let decision = decide_sd(p, bandwidth, levels);
    json!({
        "bandwidth_mb_s": bandwidth / MB,
        "t_auto_ms": t_auto(&q),
        "t_spec_ms": t_spec(&q),
        "decision": decision,
    })
}

fn analyze_sd(a: &AnalyzeSdArgs) -> Result<Value, Failure> {
    let file: SdParamsFile = serde_json::from_str(&read_text(&a.params)?)
        .map_err(|e| Failure::new("ParseError", format!("{}: {e}", a.params.display())))?;
    let p = file.params();
    p.validate().map_err(|m| Failure::new("InvalidArgument", m))?;
    let levels = file.levels();
    let break_even = |tree_size, accepted| {
        let be = break_even_bandwidth(&p.with_tree(tree_size, accepted));
        json!({
            "tree_size": tree_size,
            "accepted": accepted,
            "break_even": be,
            "s_star_mb_s": be.finite().map(|s| s / MB),
        })
    };
    let mut report = sd_point(&p, &levels, p.bandwidth);
    report["levels"] = levels.iter().map(|l| break_even(l.tree_size, l.accepted)).collect();
    if let Some(s) = &a.bandwidth_sweep {
        let (lo, hi, steps) = parse_sweep(s)?;
        let sweep: Vec<Value> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                sd_point(&p, &levels, (lo + f * (hi - lo)) * MB)
            })
            .collect();
        report["sweep"] = Value::Array(sweep);
    }
    Ok(report)
}

fn backend_id(name: &str) -> Result<u8, Failure> {
    Ok(Registry::default().by_name(name)?.id())
}

fn compress(a: &CompressArgs) -> Result<Value, Failure> {
    let raw = read(&a.input)?;
    let stream = Fp16Stream::new(raw)?;
    let container = codec::compress(&stream, backend_id(&a.codec.backend)?, !a.codec.no_split)?;
    let bytes = container.to_bytes();
    write(&a.dest, &bytes)?;
    let input = stream.as_bytes().len();
    Ok(json!({
        "input_bytes": input,
        "output_bytes": bytes.len(),
        "ratio": if input == 0 { 1.0 } else { bytes.len() as f64 / input as f64 },
        "backend": a.codec.backend,
        "split": container.is_split(),
    }))
}

fn decompress(a: &DecompressArgs) -> Result<Value, Failure> {
    let bytes = read(&a.input)?;
    let container = CodecContainer::from_bytes(&bytes)?;
    let stream = codec::decompress(&container)?;
    write(&a.dest, stream.as_bytes())?;
    Ok(json!({
        "input_bytes": bytes.len(),
        "output_bytes": stream.as_bytes().len(),
        "elements": stream.element_count(),
    }))
}

fn entropy(a: &EntropyArgs) -> Result<Value, Failure> {
    let stream = Fp16Stream::new(read(&a.input)?)?;
    let report = codec::analyze(&stream, backend_id(&a.backend)?)?;
    Ok(to_value(&report))
}

fn bench_wire(a: &BenchWireArgs, seed: u64) -> Result<Value, Failure> {
    let shape = a.shape.unwrap_or_else(LinkShape::unlimited);
    let backend = backend_id(&a.codec.backend)?;
    let payload = match a.payload {
        PayloadArg::Activations => PayloadKind::Activations,
        PayloadArg::PackedSd => PayloadKind::PackedSd,
    };
    let role = match a.role {
        RoleArg::Local => {
            if a.stages < 2 {
                return Err(Failure::new("InvalidArgument", "a local run needs --stages >= 2"));
            }
            let cfg = LocalPipelineConfig {
                blocks: vec![a.blocks; a.stages],
                block_delay_ms: a.block_delay_ms,
                hops: vec![shape; a.stages - 1],
                steps: a.steps,
                micro_batches: a.micro_batches,
                micro_batch_size: a.micro_batch_size,
                hidden_dim: a.hidden_dim,
                compression: a.compress,
                backend,
                split: !a.codec.no_split,
                slots: a.slots,
                payload,
                seed,
            };
            let run = run_local_pipeline(&cfg)?;
            let mut value = to_value(&run.metrics);
            value["lossless"] = json!(run.lossless());
            return Ok(value);
        }
        RoleArg::Source => Role::Source,
        RoleArg::Stage => Role::Stage,
        RoleArg::Sink => Role::Sink,
    };
    let cfg = RoleConfig {
        role,
        bind: a.bind.clone(),
        connect: a.connect.clone(),
        shape,
        blocks: a.blocks,
        block_delay_ms: a.block_delay_ms,
        micro_batch_size: a.micro_batch_size,
        compression: a.compress,
        backend,
        split: !a.codec.no_split,
        slots: a.slots,
        steps: a.steps,
        micro_batches: a.micro_batches,
        hidden_dim: a.hidden_dim,
        payload,
        seed,
        io_timeout: Duration::from_secs(a.timeout_s),
    };
    Ok(to_value(&run_wire(&cfg)?))
}
