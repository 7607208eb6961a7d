//! Closed-form stage costs: per-block compute with KV offloading, per-hop
//! transfer time, and the GPU/host memory constraints that fix the offload
//! ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{LinkProfile, ModelProfile, NodeProfile};

/// Why a node cannot hold a given number of blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum Infeasible {
    #[error("weights and activation workspace exceed GPU memory")]
    GpuWeightOverflow,
    #[error("offloaded KV cache exceeds host memory")]
    HostKvOverflow,
}

/// Which batch size sets the activation payload of a hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// Each hop carries one micro-batch, `(B / M) * d` bytes.
    #[default]
    PerMicroBatch,
    /// Each hop carries the whole batch, `B * d` bytes.
    WholeBatch,
}

/// Batch shape and hop options shared by every stage of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub batch: u32,
    pub micro_batches: u32,
    pub compression: bool,
    /// Compressed size over raw size, in (0, 1]. Applies when `compression` is set.
    pub compression_ratio: f64,
    /// CPU time charged on every hop when compression is on, in ms.
    pub compression_cpu_ms: f64,
    pub payload_mode: PayloadMode,
}

impl CostParams {
    pub fn uncompressed(batch: u32, micro_batches: u32) -> Self {
        CostParams {
            batch,
            micro_batches,
            compression: false,
            compression_ratio: 1.0,
            compression_cpu_ms: 0.0,
            payload_mode: PayloadMode::PerMicroBatch,
        }
    }

    pub fn micro_batch_size(&self) -> u32 {
        self.batch / self.micro_batches
    }

    /// Raw activation bytes crossing one hop.
    pub fn hop_payload(&self, model: &ModelProfile) -> f64 {
        let requests = match self.payload_mode {
            PayloadMode::PerMicroBatch if self.micro_batches > 1 => self.micro_batch_size(),
            _ => self.batch,
        };
        f64::from(requests) * model.activation_bytes() as f64
    }
}

/// Cost of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    /// Compute time for the stage's blocks, ms.
    pub t_comp: f64,
    /// Outgoing hop time, ms. Zero for the last stage.
    pub t_comm: f64,
    pub alpha: f64,
    pub feasible: bool,
}

impl StageCost {
    pub fn cycle(&self) -> f64 {
        self.t_comp.max(self.t_comm)
    }
}

/// Per-block latency with a fraction `alpha` of attention running on the CPU.
pub fn t_block(node: &NodeProfile, alpha: f64, b: u32) -> f64 {
    node.t_mlp.at(b) + (1.0 - alpha) * node.t_attn_gpu.at(b) + alpha * node.t_attn_cpu.at(b)
}

pub fn stage_compute_time(node: &NodeProfile, layers: u32, alpha: f64, b: u32) -> f64 {
    if layers == 0 {
        return 0.0;
    }
    f64::from(layers) * t_block(node, alpha, b)
}

/// Latency plus serialization time of `payload` bytes over `link`.
pub fn hop_comm_time(link: &LinkProfile, payload: f64) -> f64 {
    link.latency_ms + payload / link.bytes_per_ms()
}

/// Memory footprint of `layers` blocks on one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryDemand {
    pub weights: f64,
    pub workspace: f64,
    pub kv: f64,
}

impl MemoryDemand {
    pub fn new(model: &ModelProfile, layers: u32, batch: u32, micro_batch: u32) -> Self {
        let layers = f64::from(layers);
        MemoryDemand {
            weights: layers * model.weight_bytes_per_block as f64,
            workspace: model.act_workspace_factor
                * f64::from(micro_batch)
                * model.activation_bytes() as f64,
            kv: layers
                * model.kv_bytes_per_block_per_token as f64
                * f64::from(batch)
                * model.seq_len as f64,
        }
    }

    /// Whether offloading `alpha` of the KV cache satisfies both memory limits.
    pub fn fits(&self, node: &NodeProfile, alpha: f64) -> bool {
        let gpu = self.weights + self.workspace + (1.0 - alpha) * self.kv;
        gpu <= node.gpu_mem as f64 && alpha * self.kv <= node.host_mem as f64
    }
}

/// Smallest KV offload fraction that lets `layers` blocks fit on `node`.
pub fn derive_offload_ratio(
    node: &NodeProfile,
    model: &ModelProfile,
    layers: u32,
    batch: u32,
    micro_batch: u32,
) -> Result<f64, Infeasible> {
    let demand = MemoryDemand::new(model, layers, batch, micro_batch);
    let free = node.gpu_mem as f64 - demand.weights - demand.workspace;
    if free < 0.0 {
        return Err(Infeasible::GpuWeightOverflow);
    }
    let alpha = if demand.kv > 0.0 {
        ((demand.kv - free) / demand.kv).clamp(0.0, 1.0)
    } else {
        0.0
    };
    if alpha * demand.kv > node.host_mem as f64 {
        return Err(Infeasible::HostKvOverflow);
    }
    Ok(alpha)
}

/// Compute and outgoing-hop cost of a stage holding `layers` blocks.
///
/// `link` is the hop to the next active stage, `None` for the last one. The
/// offload ratio is derived from the memory constraints.
pub fn stage_cost(
    node: &NodeProfile,
    link: Option<&LinkProfile>,
    model: &ModelProfile,
    layers: u32,
    params: &CostParams,
) -> Result<StageCost, Infeasible> {
    let b = params.micro_batch_size();
    if layers == 0 {
        return Ok(StageCost {
            t_comp: 0.0,
            t_comm: 0.0,
            alpha: 0.0,
            feasible: true,
        });
    }
    let alpha = derive_offload_ratio(node, model, layers, params.batch, b)?;
    let t_comp = stage_compute_time(node, layers, alpha, b);
    let t_comm = link.map_or(0.0, |link| hop_time(link, model, params));
    Ok(StageCost {
        t_comp,
        t_comm,
        alpha,
        feasible: true,
    })
}

/// Hop time under `params`, including compression ratio and CPU charge.
pub fn hop_time(link: &LinkProfile, model: &ModelProfile, params: &CostParams) -> f64 {
    let payload = params.hop_payload(model);
    if params.compression {
        params.compression_cpu_ms + hop_comm_time(link, payload * params.compression_ratio)
    } else {
        hop_comm_time(link, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::LatencyTable;

    fn node(gpu_mem: u64, host_mem: u64) -> NodeProfile {
        NodeProfile {
            node_id: "n".into(),
            gpu_mem,
            host_mem,
            t_mlp: LatencyTable::flat(1.0),
            t_attn_gpu: LatencyTable::flat(2.0),
            t_attn_cpu: LatencyTable::flat(10.0),
            pcie_bw: None,
        }
    }

    fn model() -> ModelProfile {
        ModelProfile {
            total_blocks: 40,
            hidden_dim: 1000,
            elem_bytes: 2,
            seq_len: 100,
            weight_bytes_per_block: 1_000_000,
            kv_bytes_per_block_per_token: 1_000,
            act_workspace_factor: 2.0,
        }
    }

    #[test]
    fn t_block_endpoints_and_blend() {
        let n = node(1, 0);
        assert_eq!(t_block(&n, 0.0, 1), 3.0);
        assert_eq!(t_block(&n, 1.0, 1), 11.0);
        assert_eq!(t_block(&n, 0.5, 1), 7.0);
    }

    #[test]
    fn stage_compute_examples() {
        let n = node(1, 0);
        assert_eq!(stage_compute_time(&n, 0, 0.7, 4), 0.0);
        assert_eq!(stage_compute_time(&n, 20, 0.0, 4), 60.0);
        // By hand: 1 + 0.7 * 2 + 0.3 * 10 = 5.4 per block, times 20.
        let got = stage_compute_time(&n, 20, 0.3, 4);
        assert!((got - 108.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn hop_examples() {
        let link = LinkProfile::new("a", "b", 10.0, 8e6);
        assert_eq!(hop_comm_time(&link, 1e6), 1010.0);
        assert_eq!(hop_comm_time(&link, 0.0), 10.0);
        let link = LinkProfile::new("a", "b", 0.0, 20e6);
        // 416.4 KB = 416_400 bytes; 416_400 * 8 / 20e6 s = 166.56 ms.
        assert!((hop_comm_time(&link, 416_400.0) - 166.56).abs() < 1e-9);
    }

    #[test]
    fn offload_ratio_examples() {
        let m = model();
        let layers = 10;
        let d = MemoryDemand::new(&m, layers, 8, 8);
        let total = (d.weights + d.workspace + d.kv) as u64;
        assert_eq!(derive_offload_ratio(&node(total, 0), &m, layers, 8, 8), Ok(0.0));
        let half = (d.weights + d.workspace + d.kv / 2.0) as u64;
        let alpha = derive_offload_ratio(&node(half, (d.kv / 2.0) as u64), &m, layers, 8, 8);
        assert_eq!(alpha, Ok(0.5));
        let short = (d.weights + d.workspace) as u64 - 1;
        assert_eq!(
            derive_offload_ratio(&node(short, u64::MAX), &m, layers, 8, 8),
            Err(Infeasible::GpuWeightOverflow)
        );
        assert_eq!(
            derive_offload_ratio(&node(half, (d.kv / 2.0) as u64 - 1), &m, layers, 8, 8),
            Err(Infeasible::HostKvOverflow)
        );
    }

    #[test]
    fn stage_cost_composes() {
        let m = model();
        let n = node(u64::MAX / 4, 0);
        let link = LinkProfile::new("a", "b", 7.0, 100e6);
        let p = CostParams::uncompressed(16, 1);
        let c = stage_cost(&n, Some(&link), &m, 4, &p).unwrap();
        let payload = 16.0 * m.activation_bytes() as f64;
        assert_eq!(c.t_comm, hop_comm_time(&link, payload));
        assert_eq!(c.t_comp, stage_compute_time(&n, 4, 0.0, 16));

        let ratio = CostParams {
            compression: true,
            compression_ratio: 0.75,
            ..p
        };
        let cr = stage_cost(&n, Some(&link), &m, 4, &ratio).unwrap();
        let transfer = c.t_comm - link.latency_ms;
        assert!((cr.t_comm - (link.latency_ms + 0.75 * transfer)).abs() < 1e-9);

        let micro = CostParams::uncompressed(16, 4);
        let cm = stage_cost(&n, Some(&link), &m, 4, &micro).unwrap();
        assert!((cm.t_comm - link.latency_ms - transfer / 4.0).abs() < 1e-9);
        let whole = CostParams {
            payload_mode: PayloadMode::WholeBatch,
            ..micro
        };
        assert_eq!(stage_cost(&n, Some(&link), &m, 4, &whole).unwrap().t_comm, c.t_comm);
        assert_eq!(stage_cost(&n, None, &m, 4, &p).unwrap().t_comm, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn t_block_is_affine(alpha in 0.0f64..=1.0) {
                let n = node(1, 0);
                let lerp = (1.0 - alpha) * t_block(&n, 0.0, 1) + alpha * t_block(&n, 1.0, 1);
                prop_assert!((t_block(&n, alpha, 1) - lerp).abs() < 1e-9);
            }

            #[test]
            fn hop_time_decreases_with_bandwidth(
                lat in 0.0f64..100.0, bw in 1e3f64..1e10, factor in 1.001f64..10.0, payload in 1.0f64..1e8
            ) {
                let slow = LinkProfile::new("a", "b", lat, bw);
                let fast = LinkProfile::new("a", "b", lat, bw * factor);
                prop_assert!(hop_comm_time(&fast, payload) < hop_comm_time(&slow, payload));
                let extra = LinkProfile::new("a", "b", lat + 5.0, bw);
                prop_assert!((hop_comm_time(&extra, payload) - hop_comm_time(&slow, payload) - 5.0).abs() < 1e-6);
            }

            #[test]
            fn offload_ratio_is_minimal(
                layers in 1u32..40, batch in 1u32..64, gpu in 1u64..200_000_000, host in 0u64..400_000_000
            ) {
                let m = model();
                let n = node(gpu, host);
                let demand = MemoryDemand::new(&m, layers, batch, batch);
                if let Ok(alpha) = derive_offload_ratio(&n, &m, layers, batch, batch) {
                    prop_assert!((0.0..=1.0).contains(&alpha));
                    let slack = 1e-9 * demand.kv.max(1.0);
                    prop_assert!(demand.weights + demand.workspace + (1.0 - alpha) * demand.kv <= gpu as f64 + slack);
                    prop_assert!(alpha * demand.kv <= host as f64 + slack);
                    if alpha > 1e-6 {
                        let lower = alpha - 1e-6;
                        prop_assert!(!demand.fits(&n, lower));
                    }
                } else {
                    // No alpha in [0, 1] satisfies both constraints.
                    for i in 0..=100 {
                        prop_assert!(!demand.fits(&n, f64::from(i) / 100.0));
                    }
                }
            }
        }
    }
}
