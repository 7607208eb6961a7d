//! Contiguous layer assignment and batch/micro-batch/compression selection.
//!
//! The solver walks the nodes in pipeline order and keeps, for every node
//! `q` and block count `j`, the best cost of a prefix whose last active node
//! is `q`. Hop costs depend on which node comes next, so the state is keyed by
//! the last active node rather than the last node considered; skipped nodes
//! are bridged with [`ClusterSpec::bypass_link`]. Under the bottleneck
//! objective the fill/drain factor depends on how many nodes are active, so
//! that count is tracked as well.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterSpec;
use crate::cost::{hop_time, stage_cost, CostParams, Infeasible, PayloadMode, StageCost};

/// Payload shrink of byte-split compression on FP16 activations (312.6 KB of
/// 416.4 KB).
pub const DEFAULT_COMPRESSION_RATIO: f64 = 312.6 / 416.4;

/// Candidate batch sizes tried when none are given.
pub const DEFAULT_BATCH_SET: [u32; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Largest micro-batch count considered by default.
pub const DEFAULT_MAX_MICRO_BATCHES: u32 = 16;

/// Largest number of compositions the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),
    #[error("no feasible plan")]
    NoFeasiblePlan,
    #[error("{0} compositions exceed the brute-force limit")]
    TooLarge(u64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Sum of per-stage compute and hop times, no overlap.
    SumOfStages,
    /// `(M + N_active - 1)` cycles of the slowest stage.
    BottleneckCycle,
}

impl Objective {
    fn combine(self, acc: f64, term: f64) -> f64 {
        match self {
            Objective::SumOfStages => acc + term,
            Objective::BottleneckCycle => acc.max(term),
        }
    }

    fn finish(self, value: f64, micro_batches: u32, active: usize) -> f64 {
        match self {
            Objective::SumOfStages => value,
            Objective::BottleneckCycle => f64::from(micro_batches + active as u32 - 1) * value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub layers: Vec<u32>,
    pub alphas: Vec<f64>,
    pub batch_size: u32,
    pub micro_batches: u32,
    pub compression: bool,
    pub compression_ratio: f64,
    pub compression_cpu_ms: f64,
    pub payload_mode: PayloadMode,
    /// Whether speculative decoding is advised; decided separately.
    pub sd: bool,
    pub objective: Objective,
    /// Tokens per second.
    pub predicted_throughput: f64,
    pub predicted_step_time_ms: f64,
}

impl Plan {
    pub fn cost_params(&self) -> CostParams {
        CostParams {
            batch: self.batch_size,
            micro_batches: self.micro_batches,
            compression: self.compression,
            compression_ratio: self.compression_ratio,
            compression_cpu_ms: self.compression_cpu_ms,
            payload_mode: self.payload_mode,
        }
    }

    /// Node positions with at least one block.
    pub fn active_nodes(&self) -> Vec<usize> {
        active_nodes(&self.layers)
    }
}

fn active_nodes(layers: &[u32]) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0)
        .map(|(i, _)| i)
        .collect()
}

fn validate_params(spec: &ClusterSpec, params: &CostParams) -> Result<(), PlanError> {
    if params.batch == 0 {
        return Err(PlanError::InvalidArgument("batch size must be >= 1".into()));
    }
    if params.micro_batches == 0 || params.batch % params.micro_batches != 0 {
        return Err(PlanError::InvalidArgument(format!(
            "micro-batch count {} must divide batch size {}",
            params.micro_batches, params.batch
        )));
    }
    if !(params.compression_ratio > 0.0 && params.compression_ratio <= 1.0) {
        return Err(PlanError::InvalidArgument("compression ratio must be in (0, 1]".into()));
    }
    if spec.model.total_blocks == 0 {
        return Err(PlanError::InvalidArgument("model has no blocks".into()));
    }
    Ok(())
}

/// Per-stage costs of an explicit layer assignment, in active-node order.
pub fn stage_costs(
    spec: &ClusterSpec,
    layers: &[u32],
    params: &CostParams,
) -> Result<Vec<(usize, StageCost)>, PlanError> {
    validate_params(spec, params)?;
    if layers.len() != spec.node_count() {
        return Err(PlanError::InfeasiblePlan(format!(
            "{} layer counts for {} nodes",
            layers.len(),
            spec.node_count()
        )));
    }
    let total: u64 = layers.iter().map(|&l| u64::from(l)).sum();
    if total != u64::from(spec.model.total_blocks) {
        return Err(PlanError::InfeasiblePlan(format!(
            "layers sum to {total}, model has {}",
            spec.model.total_blocks
        )));
    }
    let active = active_nodes(layers);
    active
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let link = active.get(k + 1).map(|&next| spec.bypass_link(i, next));
            stage_cost(&spec.nodes[i], link.as_ref(), &spec.model, layers[i], params)
                .map(|c| (i, c))
                .map_err(|e: Infeasible| {
                    PlanError::InfeasiblePlan(format!("node {}: {e}", spec.nodes[i].node_id))
                })
        })
        .collect()
}

/// Objective value of a layer assignment, in ms per step.
pub fn assignment_time(
    spec: &ClusterSpec,
    layers: &[u32],
    params: &CostParams,
    objective: Objective,
) -> Result<f64, PlanError> {
    let costs = stage_costs(spec, layers, params)?;
    let mut acc = 0.0;
    for (_, c) in &costs {
        acc = objective.combine(acc, c.t_comp);
        acc = objective.combine(acc, c.t_comm);
    }
    Ok(objective.finish(acc, params.micro_batches, costs.len()))
}

/// Step time of `plan` on `spec` under the plan's own objective.
pub fn pipeline_time(plan: &Plan, spec: &ClusterSpec) -> Result<f64, PlanError> {
    assignment_time(spec, &plan.layers, &plan.cost_params(), plan.objective)
}

fn throughput(spec: &ClusterSpec, batch: u32, step_ms: f64) -> f64 {
    f64::from(batch) * spec.model.seq_len as f64 / (step_ms / 1000.0)
}

fn build_plan(
    spec: &ClusterSpec,
    layers: Vec<u32>,
    params: &CostParams,
    objective: Objective,
) -> Result<Plan, PlanError> {
    let costs = stage_costs(spec, &layers, params)?;
    let mut alphas = vec![0.0; layers.len()];
    for (i, c) in &costs {
        alphas[*i] = c.alpha;
    }
    let step = assignment_time(spec, &layers, params, objective)?;
    Ok(Plan {
        layers,
        alphas,
        batch_size: params.batch,
        micro_batches: params.micro_batches,
        compression: params.compression,
        compression_ratio: params.compression_ratio,
        compression_cpu_ms: params.compression_cpu_ms,
        payload_mode: params.payload_mode,
        sd: false,
        objective,
        predicted_throughput: throughput(spec, params.batch, step),
        predicted_step_time_ms: step,
    })
}

/// Work done by one solver run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DpStats {
    /// Combines of a prefix value with a stage's compute time.
    pub combine_steps: u64,
    /// Combines of a finished prefix with a hop into the next active node.
    pub hop_steps: u64,
}

impl DpStats {
    /// Expected counts for `nodes` nodes, `blocks` blocks and `slots`
    /// active-count slots (1 for the sum objective, `nodes` for the cycle one).
    pub fn expected(nodes: u64, blocks: u64, slots: u64) -> DpStats {
        let hop_slots = if slots == 1 { 1 } else { slots - 1 };
        DpStats {
            combine_steps: slots * nodes * blocks * (blocks + 1) / 2,
            hop_steps: hop_slots * nodes * (nodes - 1) / 2 * (blocks + 1),
        }
    }
}

pub fn solve_layer_assignment(
    spec: &ClusterSpec,
    params: &CostParams,
    objective: Objective,
) -> Result<Plan, PlanError> {
    solve_with_stats(spec, params, objective).map(|(plan, _)| plan)
}

/// Exact dynamic program over contiguous assignments.
pub fn solve_with_stats(
    spec: &ClusterSpec,
    params: &CostParams,
    objective: Objective,
) -> Result<(Plan, DpStats), PlanError> {
    validate_params(spec, params)?;
    let n = spec.node_count();
    let blocks = spec.model.total_blocks as usize;
    let width = blocks + 1;

    // comp[q * width + l]: compute time of l blocks on node q.
    let mut comp = vec![f64::INFINITY; n * width];
    for q in 0..n {
        for l in 1..=blocks {
            if let Ok(c) = stage_cost(&spec.nodes[q], None, &spec.model, l as u32, params) {
                comp[q * width + l] = c.t_comp;
            }
        }
    }
    let mut hop = vec![f64::INFINITY; n * n];
    for p in 0..n {
        for q in p + 1..n {
            hop[p * n + q] = hop_time(&spec.bypass_link(p, q), &spec.model, params);
        }
    }

    let tracked = objective == Objective::BottleneckCycle;
    let slots = if tracked { n } else { 1 };
    let idx = |k: usize, q: usize, j: usize| (k * n + q) * width + j;
    let mut best = vec![f64::INFINITY; slots * n * width];
    let mut take = vec![0u32; slots * n * width];
    let mut before = vec![f64::INFINITY; slots * n * width];
    let mut pred = vec![usize::MAX; slots * n * width];
    let mut stats = DpStats::default();

    for q in 0..n {
        for k in 0..slots {
            // Prefix values feeding node q, with k active nodes before it.
            if k == 0 {
                before[idx(k, q, 0)] = 0.0;
            }
            let from_slot = match (tracked, k) {
                (true, 0) => None,
                (true, k) => Some(k - 1),
                (false, _) => Some(0),
            };
            if let Some(src) = from_slot {
                for p in 0..q {
                    let h = hop[p * n + q];
                    for j in 0..width {
                        stats.hop_steps += 1;
                        let v = objective.combine(best[idx(src, p, j)], h);
                        if v < before[idx(k, q, j)] {
                            before[idx(k, q, j)] = v;
                            pred[idx(k, q, j)] = p;
                        }
                    }
                }
            }
            for j in 1..width {
                for l in 1..=j {
                    stats.combine_steps += 1;
                    let v = objective.combine(before[idx(k, q, j - l)], comp[q * width + l]);
                    if v < best[idx(k, q, j)] {
                        best[idx(k, q, j)] = v;
                        take[idx(k, q, j)] = l as u32;
                    }
                }
            }
        }
    }

    let mut winner: Option<(f64, usize, usize)> = None;
    for k in 0..slots {
        for q in 0..n {
            let v = best[idx(k, q, blocks)];
            if !v.is_finite() {
                continue;
            }
            let total = if tracked {
                objective.finish(v, params.micro_batches, k + 1)
            } else {
                v
            };
            if winner.is_none_or(|(w, _, _)| total < w) {
                winner = Some((total, k, q));
            }
        }
    }
    let (_, mut k, mut q) = winner.ok_or(PlanError::NoFeasiblePlan)?;

    let mut layers = vec![0u32; n];
    let mut j = blocks;
    loop {
        let l = take[idx(k, q, j)];
        layers[q] = l;
        j -= l as usize;
        let p = pred[idx(k, q, j)];
        if p == usize::MAX {
            debug_assert_eq!(j, 0);
            break;
        }
        if tracked {
            k -= 1;
        }
        q = p;
    }
    let plan = build_plan(spec, layers, params, objective)?;
    Ok((plan, stats))
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * u128::from(n - i) / u128::from(i + 1);
        if acc > u128::from(u64::MAX) {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Number of ways to split `blocks` into `nodes` ordered non-negative parts.
pub fn composition_count(nodes: usize, blocks: u32) -> u64 {
    binomial(u64::from(blocks) + nodes as u64 - 1, nodes as u64 - 1)
}

/// Exhaustive minimum over every composition of the blocks. Test oracle.
pub fn brute_force_assignment(
    spec: &ClusterSpec,
    params: &CostParams,
    objective: Objective,
) -> Result<Plan, PlanError> {
    validate_params(spec, params)?;
    let n = spec.node_count();
    let blocks = spec.model.total_blocks;
    let count = composition_count(n, blocks);
    if count > BRUTE_FORCE_LIMIT {
        return Err(PlanError::TooLarge(count));
    }
    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut layers = vec![0u32; n];
    layers[n - 1] = blocks;
    loop {
        if let Ok(t) = assignment_time(spec, &layers, params, objective) {
            if best.as_ref().is_none_or(|(b, _)| t < *b) {
                best = Some((t, layers.clone()));
            }
        }
        if !next_composition(&mut layers) {
            break;
        }
    }
    let (_, layers) = best.ok_or(PlanError::NoFeasiblePlan)?;
    build_plan(spec, layers, params, objective)
}

/// Advances to the next composition with the same total; false when done.
fn next_composition(parts: &mut [u32]) -> bool {
    let n = parts.len();
    if n < 2 {
        return false;
    }
    // The last part holds the remainder; move one unit into the rightmost
    // earlier slot that can still grow, resetting everything after it.
    let last = parts[n - 1];
    if last > 0 {
        parts[n - 2] += 1;
        parts[n - 1] = last - 1;
        return true;
    }
    let Some(pos) = (0..n - 1).rev().find(|&i| parts[i] > 0) else {
        return false;
    };
    if pos == 0 {
        return false;
    }
    let moved = parts[pos];
    parts[pos] = 0;
    parts[pos - 1] += 1;
    parts[n - 1] = moved - 1;
    true
}

/// Search space for [`enumerate_plans`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidates {
    pub batch_sizes: Vec<u32>,
    /// Micro-batch counts are the divisors of B up to this bound.
    pub max_micro_batches: u32,
    pub compression_options: Vec<bool>,
    pub compression_ratio: f64,
    pub compression_cpu_ms: f64,
    pub payload_mode: PayloadMode,
    /// Forces one objective for every candidate. By default M = 1 uses the
    /// sum of stages and M > 1 the bottleneck cycle.
    pub objective: Option<Objective>,
}

impl Default for PlanCandidates {
    fn default() -> Self {
        PlanCandidates {
            batch_sizes: DEFAULT_BATCH_SET.to_vec(),
            max_micro_batches: DEFAULT_MAX_MICRO_BATCHES,
            compression_options: vec![false, true],
            compression_ratio: DEFAULT_COMPRESSION_RATIO,
            compression_cpu_ms: 0.0,
            payload_mode: PayloadMode::PerMicroBatch,
            objective: None,
        }
    }
}

impl PlanCandidates {
    /// Every (B, M, compression) triple in tie-break preference order:
    /// smaller M, then smaller B, then compression off.
    pub fn configurations(&self) -> Vec<CostParams> {
        let mut batches = self.batch_sizes.clone();
        batches.sort_unstable();
        batches.dedup();
        let mut compression = self.compression_options.clone();
        compression.sort_unstable();
        compression.dedup();
        let mut out = Vec::new();
        for &b in &batches {
            for m in (1..=b.min(self.max_micro_batches)).filter(|m| b % m == 0) {
                for &c in &compression {
                    out.push(CostParams {
                        batch: b,
                        micro_batches: m,
                        compression: c,
                        compression_ratio: self.compression_ratio,
                        compression_cpu_ms: self.compression_cpu_ms,
                        payload_mode: self.payload_mode,
                    });
                }
            }
        }
        out.sort_by_key(|p| (p.micro_batches, p.batch, p.compression));
        out
    }
}

/// Highest-throughput plan over every candidate configuration.
pub fn enumerate_plans(spec: &ClusterSpec, candidates: &PlanCandidates) -> Result<Plan, PlanError> {
    if candidates.batch_sizes.is_empty() {
        return Err(PlanError::InvalidArgument("candidate batch set is empty".into()));
    }
    let mut best: Option<Plan> = None;
    for params in candidates.configurations() {
        let objective = candidates.objective.unwrap_or(if params.micro_batches == 1 {
            Objective::SumOfStages
        } else {
            Objective::BottleneckCycle
        });
        let plan = match solve_layer_assignment(spec, &params, objective) {
            Ok(plan) => plan,
            Err(PlanError::NoFeasiblePlan) => continue,
            Err(e) => return Err(e),
        };
        log::debug!(
            "B={} M={} compression={} -> {:.3} tok/s",
            params.batch,
            params.micro_batches,
            params.compression,
            plan.predicted_throughput
        );
        let better = match &best {
            None => true,
            Some(b) => plan.predicted_throughput > b.predicted_throughput * (1.0 + 1e-12),
        };
        if better {
            best = Some(plan);
        }
    }
    best.ok_or(PlanError::NoFeasiblePlan)
}
