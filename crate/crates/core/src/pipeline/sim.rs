//! Discrete-event simulation of one micro-batched pipeline.
//!
//! Every active stage owns a compute lane, a CPU lane (compression) and a
//! transfer lane to the next stage. A stage may start computing micro-batch
//! `k + 1` as soon as its compute lane is free and fewer than `slots`
//! micro-batches are between compute start and transfer completion. Decode
//! steps are serialized: step `t + 1` starts when step `t` has drained.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::RunMetrics;
use crate::cluster::ClusterSpec;
use crate::planner::{stage_costs, Plan, PlanError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(#[from] PlanError),
    #[error("invalid simulation: {0}")]
    Invalid(String),
}

/// Per-micro-batch lane times of one active stage, ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub compute: f64,
    /// Compression before the outgoing transfer.
    pub cpu: f64,
    /// Outgoing transfer; ignored on the last stage.
    pub transfer: f64,
}

impl StageTimes {
    pub fn new(compute: f64, transfer: f64) -> Self {
        StageTimes {
            compute,
            cpu: 0.0,
            transfer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: u32,
    /// Micro-batches a stage may hold between compute start and transfer end.
    pub slots: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { steps: 1, slots: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    ComputeDone,
    CpuLaneDone,
    TransferDone,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub stage: usize,
    pub micro_batch: usize,
    seq: u64,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, seq).
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Default, Clone)]
struct Lane {
    busy: bool,
    queue: VecDeque<usize>,
    busy_ms: f64,
}

struct Engine<'a> {
    stages: &'a [StageTimes],
    slots: u32,
    now: f64,
    seq: u64,
    heap: BinaryHeap<SimEvent>,
    compute: Vec<Lane>,
    cpu: Vec<Lane>,
    transfer: Vec<Lane>,
    in_flight: Vec<u32>,
    transfers: Vec<u64>,
    finished: usize,
}

impl<'a> Engine<'a> {
    fn new(stages: &'a [StageTimes], slots: u32) -> Self {
        let n = stages.len();
        Engine {
            stages,
            slots,
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            compute: vec![Lane::default(); n],
            cpu: vec![Lane::default(); n],
            transfer: vec![Lane::default(); n],
            in_flight: vec![0; n],
            transfers: vec![0; n],
            finished: 0,
        }
    }

    fn schedule(&mut self, delay: f64, kind: EventKind, stage: usize, micro_batch: usize) {
        self.seq += 1;
        self.heap.push(SimEvent {
            time: self.now + delay,
            kind,
            stage,
            micro_batch,
            seq: self.seq,
        });
    }

    fn last(&self) -> usize {
        self.stages.len() - 1
    }

    fn try_compute(&mut self, s: usize) {
        if self.compute[s].busy || self.in_flight[s] >= self.slots {
            return;
        }
        if let Some(k) = self.compute[s].queue.pop_front() {
            self.compute[s].busy = true;
            self.in_flight[s] += 1;
            let t = self.stages[s].compute;
            self.compute[s].busy_ms += t;
            self.schedule(t, EventKind::ComputeDone, s, k);
        }
    }

    fn try_cpu(&mut self, s: usize) {
        if self.cpu[s].busy {
            return;
        }
        if let Some(k) = self.cpu[s].queue.pop_front() {
            self.cpu[s].busy = true;
            let t = self.stages[s].cpu;
            self.cpu[s].busy_ms += t;
            self.schedule(t, EventKind::CpuLaneDone, s, k);
        }
    }

    fn try_transfer(&mut self, s: usize) {
        if self.transfer[s].busy {
            return;
        }
        if let Some(k) = self.transfer[s].queue.pop_front() {
            self.transfer[s].busy = true;
            let t = self.stages[s].transfer;
            self.transfer[s].busy_ms += t;
            self.transfers[s] += 1;
            self.schedule(t, EventKind::TransferDone, s, k);
        }
    }

    /// Runs one step of `micro_batches` starting at the current time.
    fn run_step(&mut self, micro_batches: usize) -> f64 {
        self.finished = 0;
        self.compute[0].queue.extend(0..micro_batches);
        self.try_compute(0);
        while let Some(ev) = self.heap.pop() {
            self.now = ev.time;
            let s = ev.stage;
            match ev.kind {
                EventKind::ComputeDone => {
                    self.compute[s].busy = false;
                    if s == self.last() {
                        self.in_flight[s] -= 1;
                        self.finished += 1;
                    } else {
                        self.cpu[s].queue.push_back(ev.micro_batch);
                        self.try_cpu(s);
                    }
                    self.try_compute(s);
                }
                EventKind::CpuLaneDone => {
                    self.cpu[s].busy = false;
                    self.transfer[s].queue.push_back(ev.micro_batch);
                    self.try_transfer(s);
                    self.try_cpu(s);
                }
                EventKind::TransferDone => {
                    self.transfer[s].busy = false;
                    self.in_flight[s] -= 1;
                    self.compute[s + 1].queue.push_back(ev.micro_batch);
                    self.try_compute(s + 1);
                    self.try_compute(s);
                    self.try_transfer(s);
                }
            }
        }
        debug_assert_eq!(self.finished, micro_batches);
        self.now
    }
}

/// Simulates `config.steps` serialized steps over explicit stage times.
/// Each step produces `tokens_per_step` tokens.
pub fn simulate_stages(
    stages: &[StageTimes],
    micro_batches: u32,
    tokens_per_step: f64,
    config: &SimConfig,
) -> Result<RunMetrics, SimError> {
    if stages.is_empty() {
        return Err(SimError::Invalid("no active stages".into()));
    }
    if micro_batches == 0 || config.slots == 0 {
        return Err(SimError::Invalid("micro-batches and slots must be >= 1".into()));
    }
    if let Some(bad) = stages
        .iter()
        .find(|s| [s.compute, s.cpu, s.transfer].iter().any(|t| !(t.is_finite() && *t >= 0.0)))
    {
        return Err(SimError::Invalid(format!("bad stage times {bad:?}")));
    }
    let mut engine = Engine::new(stages, config.slots);
    let mut step_times = Vec::with_capacity(config.steps as usize);
    for _ in 0..config.steps {
        let start = engine.now;
        let end = engine.run_step(micro_batches as usize);
        step_times.push(end - start);
    }
    let completion = engine.now;
    let hops = stages.len() - 1;
    let per_frame = |lanes: &[Lane]| -> Vec<f64> {
        lanes[..hops]
            .iter()
            .zip(&engine.transfers)
            .map(|(l, &n)| if n == 0 { 0.0 } else { l.busy_ms / n as f64 })
            .collect()
    };
    let tokens = tokens_per_step * f64::from(config.steps);
    Ok(RunMetrics {
        throughput: if completion > 0.0 { tokens / (completion / 1000.0) } else { f64::INFINITY },
        completion_ms: completion,
        step_times_ms: step_times,
        stage_busy_ms: engine.compute.iter().map(|l| l.busy_ms).collect(),
        stage_idle_ms: engine.compute.iter().map(|l| completion - l.busy_ms).collect(),
        hop_transfer_ms: per_frame(&engine.transfer),
        hop_compression_ms: per_frame(&engine.cpu),
        hop_frames: engine.transfers[..hops].to_vec(),
        hop_bytes: vec![0; hops],
        output_digest: None,
    })
}

/// Lane times of every active stage of `plan`.
pub fn plan_stage_times(plan: &Plan, spec: &ClusterSpec) -> Result<Vec<StageTimes>, SimError> {
    let params = plan.cost_params();
    let cpu = if params.compression { params.compression_cpu_ms } else { 0.0 };
    let costs = stage_costs(spec, &plan.layers, &params)?;
    let last = costs.len() - 1;
    Ok(costs
        .iter()
        .enumerate()
        .map(|(k, (_, c))| {
            if k == last {
                StageTimes::new(c.t_comp, 0.0)
            } else {
                StageTimes {
                    compute: c.t_comp,
                    cpu,
                    transfer: c.t_comm - cpu,
                }
            }
        })
        .collect())
}

/// Simulates `plan`, counting `B * seq_len` tokens per step as the planner
/// does.
pub fn simulate(plan: &Plan, spec: &ClusterSpec, config: &SimConfig) -> Result<RunMetrics, SimError> {
    let stages = plan_stage_times(plan, spec)?;
    let tokens = f64::from(plan.batch_size) * spec.model.seq_len as f64;
    let mut metrics = simulate_stages(&stages, plan.micro_batches, tokens, config)?;
    let payload = plan.cost_params().hop_payload(&spec.model)
        * if plan.compression { plan.compression_ratio } else { 1.0 };
    metrics.hop_bytes = metrics
        .hop_frames
        .iter()
        .map(|&n| (payload * n as f64).round() as u64)
        .collect();
    // Report hops and busy times per node rather than per active stage.
    let active = plan.active_nodes();
    let mut busy = vec![0.0; plan.layers.len()];
    for (k, &i) in active.iter().enumerate() {
        busy[i] = metrics.stage_busy_ms[k];
    }
    metrics.stage_idle_ms = busy.iter().map(|b| metrics.completion_ms - b).collect();
    metrics.stage_busy_ms = busy;
    Ok(metrics)
}

/// Makespan of `micro_batches` identical jobs through the chain of lanes:
/// the sum of all lane times plus `(M - 1)` times the slowest lane.
pub fn flow_shop_step_time(stages: &[StageTimes], micro_batches: u32) -> f64 {
    let last = stages.len() - 1;
    let lanes = stages.iter().enumerate().flat_map(|(k, s)| {
        if k == last {
            vec![s.compute]
        } else {
            vec![s.compute, s.cpu, s.transfer]
        }
    });
    let (sum, max) = lanes.fold((0.0, 0.0f64), |(sum, max), t| (sum + t, max.max(t)));
    sum + f64::from(micro_batches - 1) * max
}

/// `(M + N - 1) * max_i max(T_comp, T_comm)`.
pub fn bottleneck_step_time(stages: &[StageTimes], micro_batches: u32) -> f64 {
    let cycle = stages
        .iter()
        .map(|s| s.compute.max(s.cpu + s.transfer))
        .fold(0.0, f64::max);
    f64::from(micro_batches + stages.len() as u32 - 1) * cycle
}
