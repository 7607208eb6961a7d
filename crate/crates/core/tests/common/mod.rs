#![allow(dead_code)]

use beeplan::cluster::{ClusterSpec, LatencyTable, LinkProfile, ModelProfile, NodeProfile};
use beeplan::cost::CostParams;
use rand::seq::SliceRandom;
use rand::Rng;

pub const GB: u64 = 1_000_000_000;

pub fn flat_node(id: &str, gpu_mem: u64, mlp_ms: f64) -> NodeProfile {
    NodeProfile {
        node_id: id.into(),
        gpu_mem,
        host_mem: 64 * GB,
        t_mlp: LatencyTable::flat(mlp_ms),
        t_attn_gpu: LatencyTable::flat(0.05),
        t_attn_cpu: LatencyTable::flat(0.5),
        pcie_bw: None,
    }
}

pub fn chain_links(nodes: &[NodeProfile], latency_ms: f64, bandwidth_bps: f64) -> Vec<LinkProfile> {
    nodes
        .windows(2)
        .map(|w| LinkProfile::new(&w[0].node_id, &w[1].node_id, latency_ms, bandwidth_bps))
        .collect()
}

fn random_table(rng: &mut impl Rng, base: std::ops::Range<f64>, growth: f64) -> LatencyTable {
    let mut acc = rng.gen_range(base);
    LatencyTable::new([1u32, 4, 16, 64].into_iter().map(|b| {
        let v = acc;
        acc += growth * rng.gen_range(0.2..2.0) * f64::from(b);
        (b, v)
    }))
}

/// A random heterogeneous cluster of `n` nodes over `blocks` blocks. Memory
/// is sized so that some instances need offloading and a few nodes cannot
/// hold many blocks at all.
pub fn random_spec(rng: &mut impl Rng, n: usize, blocks: u32) -> ClusterSpec {
    let model = ModelProfile {
        total_blocks: blocks,
        hidden_dim: *[512u64, 1024, 4096].choose(rng).unwrap(),
        elem_bytes: 2,
        seq_len: rng.gen_range(16..256),
        weight_bytes_per_block: rng.gen_range(100_000_000..600_000_000),
        kv_bytes_per_block_per_token: rng.gen_range(1_000..40_000),
        act_workspace_factor: 2.0,
    };
    let nodes: Vec<NodeProfile> = (0..n)
        .map(|i| NodeProfile {
            node_id: format!("n{i}"),
            gpu_mem: rng.gen_range(GB / 2..6 * GB),
            host_mem: rng.gen_range(GB..16 * GB),
            t_mlp: random_table(rng, 0.2..3.0, 0.01),
            t_attn_gpu: random_table(rng, 0.02..0.5, 0.005),
            t_attn_cpu: random_table(rng, 0.5..4.0, 0.1),
            pcie_bw: None,
        })
        .collect();
    let mut links = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || rng.gen_bool(0.3) {
                links.push(LinkProfile::new(
                    &nodes[i].node_id,
                    &nodes[j].node_id,
                    rng.gen_range(0.0..30.0),
                    rng.gen_range(5e6..1e9),
                ));
            }
        }
    }
    ClusterSpec::new(nodes, links, model).expect("generated spec is valid")
}

pub fn random_params(rng: &mut impl Rng) -> CostParams {
    let batch = *[1u32, 2, 4, 8, 16].choose(rng).unwrap();
    let divisors: Vec<u32> = (1..=batch).filter(|m| batch % m == 0).collect();
    let micro_batches = *divisors.choose(rng).unwrap();
    CostParams {
        compression: rng.gen_bool(0.3),
        compression_cpu_ms: rng.gen_range(0.0..2.0),
        ..CostParams::uncompressed(batch, micro_batches)
    }
}

/// Reference KV model: the visible sequence as a plain list, with the
/// length of the uncommitted tail.
#[derive(Debug, Default, Clone)]
pub struct FlatKv {
    pub tokens: Vec<u32>,
    pub pending: usize,
}

impl FlatKv {
    pub fn append(&mut self, new: &[u32]) {
        self.tokens.extend_from_slice(new);
        self.pending += new.len();
    }

    pub fn commit(&mut self, accepted: &[usize]) {
        let start = self.tokens.len() - self.pending;
        let tail: Vec<u32> = self.tokens.split_off(start);
        self.tokens
            .extend(tail.iter().enumerate().filter(|(i, _)| accepted.contains(i)).map(|(_, t)| *t));
        self.pending = 0;
    }
}
