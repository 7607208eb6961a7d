//! Cluster, link and model descriptions consumed by the planner, the
//! simulator and the wire runner.
//!
//! A cluster document is JSON with three top-level keys:
//!
//! ```json
//! {
//!   "nodes": [{ "node_id": "a", "gpu_mem": 24000000000, "host_mem": 128000000000,
//!               "t_mlp": {"1": 2.0, "8": 2.4}, "t_attn_gpu": {...}, "t_attn_cpu": {...} }],
//!   "links": [{ "from": "a", "to": "b", "latency_ms": 20.0, "bandwidth_mbps": 312.0 }],
//!   "model": { "total_blocks": 40, "hidden_dim": 5120, "elem_bytes": 2, "seq_len": 128,
//!              "weight_bytes_per_block": 600000000, "kv_bytes_per_block_per_token": 20480 }
//! }
//! ```
//!
//! Latency tables are keyed by micro-batch size. Link bandwidth is given in
//! Mbps in the document and kept in bits per second once loaded.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest latency an extrapolated table lookup may return, in ms.
const MIN_LATENCY_MS: f64 = 1e-9;

const BITS_PER_MBIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("validation error in `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl ClusterError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ClusterError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Profiled per-block latency in milliseconds, keyed by micro-batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatencyTable(BTreeMap<u32, f64>);

impl LatencyTable {
    pub fn new(entries: impl IntoIterator<Item = (u32, f64)>) -> Self {
        LatencyTable(entries.into_iter().collect())
    }

    /// A table with the same latency at every micro-batch size.
    pub fn flat(ms: f64) -> Self {
        LatencyTable::new([(1, ms)])
    }

    pub fn entries(&self) -> &BTreeMap<u32, f64> {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn keys(&self) -> Vec<u32> {
        self.0.keys().copied().collect()
    }

    /// Latency at micro-batch size `b`.
    pub fn at(&self, b: u32) -> f64 {
        interpolate_latency(self, b)
    }
}

/// Looks up a latency table at micro-batch size `b`.
///
/// Exact keys return their value, sizes between two keys interpolate
/// linearly, and sizes outside the profiled range extrapolate along the line
/// through the two nearest keys. Extrapolated values are clamped to stay
/// positive. A single-entry table is treated as constant.
pub fn interpolate_latency(table: &LatencyTable, b: u32) -> f64 {
    let map = &table.0;
    if let Some(&v) = map.get(&b) {
        return v;
    }
    let mut iter = map.iter();
    let (first, second) = match (iter.next(), iter.next()) {
        (Some(f), Some(s)) => (f, s),
        (Some((_, &v)), None) => return v,
        _ => return MIN_LATENCY_MS,
    };
    let x = f64::from(b);
    let below = map.range(..b).next_back();
    let above = map.range(b..).next();
    let ((x0, y0), (x1, y1)) = match (below, above) {
        (Some(lo), Some(hi)) => (lo, hi),
        // Below the range: line through the two smallest keys.
        (None, Some(_)) => (first, second),
        // Above the range: line through the two largest keys.
        (Some(hi), None) => {
            let lo = map.range(..*hi.0).next_back().expect("table has >= 2 keys");
            (lo, hi)
        }
        (None, None) => unreachable!("non-empty table"),
    };
    let (x0, x1) = (f64::from(*x0), f64::from(*x1));
    let y = y0 + (y1 - y0) * (x - x0) / (x1 - x0);
    y.max(MIN_LATENCY_MS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeProfile {
    pub node_id: String,
    /// GPU memory in bytes.
    pub gpu_mem: u64,
    /// Host memory in bytes.
    pub host_mem: u64,
    pub t_mlp: LatencyTable,
    pub t_attn_gpu: LatencyTable,
    pub t_attn_cpu: LatencyTable,
    /// PCIe bandwidth in bytes per second. Reserved, unused by the cost model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcie_bw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkProfile {
    pub from: String,
    pub to: String,
    /// One-way propagation latency in ms.
    pub latency_ms: f64,
    /// Link bandwidth in bits per second.
    pub bandwidth_bps: f64,
}

impl LinkProfile {
    pub fn new(from: &str, to: &str, latency_ms: f64, bandwidth_bps: f64) -> Self {
        LinkProfile {
            from: from.to_owned(),
            to: to.to_owned(),
            latency_ms,
            bandwidth_bps,
        }
    }

    pub fn bytes_per_ms(&self) -> f64 {
        self.bandwidth_bps / 8.0 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    from: String,
    to: String,
    latency_ms: f64,
    bandwidth_mbps: f64,
}

fn default_workspace_factor() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub total_blocks: u32,
    pub hidden_dim: u64,
    pub elem_bytes: u64,
    pub seq_len: u64,
    pub weight_bytes_per_block: u64,
    pub kv_bytes_per_block_per_token: u64,
    /// Activation workspace is `act_workspace_factor * b * d` bytes.
    #[serde(default = "default_workspace_factor")]
    pub act_workspace_factor: f64,
}

impl ModelProfile {
    /// Per-request activation payload in bytes.
    pub fn activation_bytes(&self) -> u64 {
        self.hidden_dim * self.elem_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    nodes: Vec<NodeProfile>,
    #[serde(default)]
    links: Vec<LinkDoc>,
    model: ModelProfile,
}

/// Validated cluster description. Nodes are in pipeline order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeProfile>,
    pub links: Vec<LinkProfile>,
    pub model: ModelProfile,
    link_index: HashMap<(usize, usize), usize>,
}

impl ClusterSpec {
    pub fn new(
        nodes: Vec<NodeProfile>,
        links: Vec<LinkProfile>,
        model: ModelProfile,
    ) -> Result<Self, ClusterError> {
        validate_model(&model)?;
        if nodes.is_empty() {
            return Err(ClusterError::invalid("nodes", "at least one node is required"));
        }
        let mut position = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            validate_node(i, node)?;
            if position.insert(node.node_id.clone(), i).is_some() {
                return Err(ClusterError::invalid(
                    format!("nodes[{i}].node_id"),
                    format!("duplicate node id `{}`", node.node_id),
                ));
            }
        }
        let mut link_index = HashMap::new();
        for (k, link) in links.iter().enumerate() {
            let field = format!("links[{k}]");
            let from = *position.get(&link.from).ok_or_else(|| {
                ClusterError::invalid(&field, format!("unknown node `{}`", link.from))
            })?;
            let to = *position.get(&link.to).ok_or_else(|| {
                ClusterError::invalid(&field, format!("unknown node `{}`", link.to))
            })?;
            if !(link.latency_ms >= 0.0 && link.latency_ms.is_finite()) {
                return Err(ClusterError::invalid(
                    format!("{field}.latency_ms"),
                    "must be finite and >= 0",
                ));
            }
            if !(link.bandwidth_bps > 0.0) {
                return Err(ClusterError::invalid(
                    format!("{field}.bandwidth_mbps"),
                    "must be > 0",
                ));
            }
            if link_index.insert((from, to), k).is_some() {
                return Err(ClusterError::invalid(
                    field,
                    format!("duplicate link {} -> {}", link.from, link.to),
                ));
            }
        }
        for pair in 0..nodes.len().saturating_sub(1) {
            if !link_index.contains_key(&(pair, pair + 1)) {
                return Err(ClusterError::invalid(
                    "links",
                    format!(
                        "missing link {} -> {}",
                        nodes[pair].node_id,
                        nodes[pair + 1].node_id
                    ),
                ));
            }
        }
        Ok(ClusterSpec {
            nodes,
            links,
            model,
            link_index,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Explicit link between two node positions, if the document has one.
    pub fn link(&self, from: usize, to: usize) -> Option<&LinkProfile> {
        self.link_index.get(&(from, to)).map(|&k| &self.links[k])
    }

    /// Hop between two active nodes `from < to`, skipping everything in
    /// between. An explicit link wins; otherwise the chain of adjacent links
    /// is collapsed into one with summed latency and the narrowest bandwidth.
    pub fn bypass_link(&self, from: usize, to: usize) -> LinkProfile {
        assert!(from < to && to < self.nodes.len(), "bad hop {from} -> {to}");
        if let Some(link) = self.link(from, to) {
            return link.clone();
        }
        let mut latency_ms = 0.0;
        let mut bandwidth_bps = f64::INFINITY;
        for i in from..to {
            let hop = self.link(i, i + 1).expect("adjacent links are validated");
            latency_ms += hop.latency_ms;
            bandwidth_bps = bandwidth_bps.min(hop.bandwidth_bps);
        }
        LinkProfile::new(
            &self.nodes[from].node_id,
            &self.nodes[to].node_id,
            latency_ms,
            bandwidth_bps,
        )
    }

    /// Returns a copy with every link's bandwidth multiplied by `factor`.
    pub fn with_bandwidth_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for link in &mut out.links {
            link.bandwidth_bps *= factor;
        }
        out
    }

    pub fn to_json(&self) -> String {
        let doc = ClusterDoc {
            nodes: self.nodes.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkDoc {
                    from: l.from.clone(),
                    to: l.to.clone(),
                    latency_ms: l.latency_ms,
                    bandwidth_mbps: l.bandwidth_bps / BITS_PER_MBIT,
                })
                .collect(),
            model: self.model.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("cluster doc serializes")
    }
}

/// Parses and validates a cluster document.
pub fn load_cluster_spec(text: &str) -> Result<ClusterSpec, ClusterError> {
    let doc: ClusterDoc = serde_json::from_str(text)?;
    let links = doc
        .links
        .into_iter()
        .map(|l| LinkProfile {
            from: l.from,
            to: l.to,
            latency_ms: l.latency_ms,
            bandwidth_bps: l.bandwidth_mbps * BITS_PER_MBIT,
        })
        .collect();
    ClusterSpec::new(doc.nodes, links, doc.model)
}

fn validate_model(model: &ModelProfile) -> Result<(), ClusterError> {
    let checks: [(&str, bool, &str); 7] = [
        ("model.total_blocks", model.total_blocks >= 1, "must be >= 1"),
        ("model.hidden_dim", model.hidden_dim >= 1, "must be >= 1"),
        (
            "model.elem_bytes",
            matches!(model.elem_bytes, 1 | 2 | 4),
            "must be 1, 2 or 4",
        ),
        ("model.seq_len", model.seq_len >= 1, "must be >= 1"),
        (
            "model.weight_bytes_per_block",
            model.weight_bytes_per_block > 0,
            "must be > 0",
        ),
        (
            "model.kv_bytes_per_block_per_token",
            model.kv_bytes_per_block_per_token > 0,
            "must be > 0",
        ),
        (
            "model.act_workspace_factor",
            model.act_workspace_factor > 0.0 && model.act_workspace_factor.is_finite(),
            "must be finite and > 0",
        ),
    ];
    for (field, ok, reason) in checks {
        if !ok {
            return Err(ClusterError::invalid(field, reason));
        }
    }
    Ok(())
}

fn validate_node(i: usize, node: &NodeProfile) -> Result<(), ClusterError> {
    if node.gpu_mem == 0 {
        return Err(ClusterError::invalid(format!("nodes[{i}].gpu_mem"), "must be > 0"));
    }
    let tables = [
        ("t_mlp", &node.t_mlp),
        ("t_attn_gpu", &node.t_attn_gpu),
        ("t_attn_cpu", &node.t_attn_cpu),
    ];
    for (name, table) in tables {
        if table.is_empty() {
            return Err(ClusterError::invalid(
                format!("nodes[{i}].{name}"),
                "latency table is empty",
            ));
        }
        if let Some((k, v)) = table.entries().iter().find(|(k, v)| **k == 0 || !(**v > 0.0) || !v.is_finite()) {
            return Err(ClusterError::invalid(
                format!("nodes[{i}].{name}[{k}]"),
                format!("entry {v} must be finite and > 0 at micro-batch size >= 1"),
            ));
        }
    }
    let keys: HashSet<u32> = node.t_mlp.keys().into_iter().collect();
    for (name, table) in &tables[1..] {
        if table.keys().into_iter().collect::<HashSet<_>>() != keys {
            return Err(ClusterError::invalid(
                format!("nodes[{i}].{name}"),
                "latency tables must share the same micro-batch sizes",
            ));
        }
    }
    if let Some(bw) = node.pcie_bw {
        if !(bw > 0.0) {
            return Err(ClusterError::invalid(format!("nodes[{i}].pcie_bw"), "must be > 0"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(pairs: &[(u32, f64)]) -> LatencyTable {
        LatencyTable::new(pairs.iter().copied())
    }

    fn node_json(id: &str) -> String {
        format!(
            r#"{{"node_id":"{id}","gpu_mem":1000,"host_mem":0,
                "t_mlp":{{"1":1.0}},"t_attn_gpu":{{"1":2.0}},"t_attn_cpu":{{"1":10.0}}}}"#
        )
    }

    const MODEL: &str = r#"{"total_blocks":4,"hidden_dim":8,"elem_bytes":2,"seq_len":4,
        "weight_bytes_per_block":10,"kv_bytes_per_block_per_token":1}"#;

    #[test]
    fn interpolation_examples() {
        let t = table(&[(8, 2.0), (16, 4.0)]);
        assert_eq!(interpolate_latency(&t, 16), 4.0);
        assert_eq!(interpolate_latency(&t, 12), 3.0);
        // Line through (8, 2) and (16, 4) has slope 0.25: 2 + 0.25 * 24 = 8.
        assert_eq!(interpolate_latency(&t, 32), 8.0);
        // 2 + 0.25 * (1 - 8) = 0.25
        assert_eq!(interpolate_latency(&t, 1), 0.25);
    }

    #[test]
    fn extrapolation_is_clamped_positive() {
        let t = table(&[(8, 1.0), (16, 10.0)]);
        assert!(interpolate_latency(&t, 1) > 0.0);
    }

    #[test]
    fn single_entry_is_constant() {
        let t = LatencyTable::flat(3.5);
        assert_eq!(t.at(1), 3.5);
        assert_eq!(t.at(64), 3.5);
    }

    #[test]
    fn minimal_spec_loads() {
        let doc = format!(r#"{{"nodes":[{}],"links":[],"model":{MODEL}}}"#, node_json("a"));
        let spec = load_cluster_spec(&doc).unwrap();
        assert_eq!(spec.node_count(), 1);
        assert_eq!(spec.model.act_workspace_factor, 2.0);
    }

    #[test]
    fn missing_link_is_rejected() {
        let doc = format!(
            r#"{{"nodes":[{},{},{}],
                "links":[{{"from":"a","to":"b","latency_ms":1,"bandwidth_mbps":100}}],
                "model":{MODEL}}}"#,
            node_json("a"),
            node_json("b"),
            node_json("c")
        );
        match load_cluster_spec(&doc) {
            Err(ClusterError::Validation { reason, .. }) => assert!(reason.contains("missing link")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn bandwidths_are_preserved() {
        let doc = format!(
            r#"{{"nodes":[{},{},{}],
                "links":[{{"from":"a","to":"b","latency_ms":30,"bandwidth_mbps":312}},
                         {{"from":"b","to":"c","latency_ms":40,"bandwidth_mbps":643}}],
                "model":{MODEL}}}"#,
            node_json("a"),
            node_json("b"),
            node_json("c")
        );
        let spec = load_cluster_spec(&doc).unwrap();
        assert_eq!(spec.link(0, 1).unwrap().bandwidth_bps, 312e6);
        assert_eq!(spec.link(1, 2).unwrap().bandwidth_bps, 643e6);
        let again = load_cluster_spec(&spec.to_json()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let doc = format!(
            r#"{{"nodes":[{}],"links":[],"model":{MODEL},"extra":1}}"#,
            node_json("a")
        );
        assert!(matches!(load_cluster_spec(&doc), Err(ClusterError::Parse(_))));
        let bad_node = node_json("a").replace("\"host_mem\"", "\"colour\":1,\"host_mem\"");
        let doc = format!(r#"{{"nodes":[{bad_node}],"links":[],"model":{MODEL}}}"#);
        assert!(matches!(load_cluster_spec(&doc), Err(ClusterError::Parse(_))));
    }

    #[test]
    fn invariant_violations_name_the_field() {
        let zero = node_json("a").replace("\"gpu_mem\":1000", "\"gpu_mem\":0");
        let doc = format!(r#"{{"nodes":[{zero}],"links":[],"model":{MODEL}}}"#);
        match load_cluster_spec(&doc) {
            Err(ClusterError::Validation { field, .. }) => assert_eq!(field, "nodes[0].gpu_mem"),
            other => panic!("{other:?}"),
        }
        let mismatched = node_json("a").replace(r#""t_attn_cpu":{"1":10.0}"#, r#""t_attn_cpu":{"2":10.0}"#);
        let doc = format!(r#"{{"nodes":[{mismatched}],"links":[],"model":{MODEL}}}"#);
        assert!(matches!(load_cluster_spec(&doc), Err(ClusterError::Validation { .. })));
        let dup = format!(
            r#"{{"nodes":[{},{}],"links":[{{"from":"a","to":"a","latency_ms":1,"bandwidth_mbps":1}}],"model":{MODEL}}}"#,
            node_json("a"),
            node_json("a")
        );
        assert!(matches!(load_cluster_spec(&dup), Err(ClusterError::Validation { .. })));
        let bad_elem = MODEL.replace("\"elem_bytes\":2", "\"elem_bytes\":3");
        let doc = format!(r#"{{"nodes":[{}],"links":[],"model":{bad_elem}}}"#, node_json("a"));
        match load_cluster_spec(&doc) {
            Err(ClusterError::Validation { field, .. }) => assert_eq!(field, "model.elem_bytes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bypass_uses_explicit_link_or_collapses_chain() {
        let doc = format!(
            r#"{{"nodes":[{},{},{}],
                "links":[{{"from":"a","to":"b","latency_ms":10,"bandwidth_mbps":100}},
                         {{"from":"b","to":"c","latency_ms":5,"bandwidth_mbps":40}}],
                "model":{MODEL}}}"#,
            node_json("a"),
            node_json("b"),
            node_json("c")
        );
        let spec = load_cluster_spec(&doc).unwrap();
        let hop = spec.bypass_link(0, 2);
        assert_eq!(hop.latency_ms, 15.0);
        assert_eq!(hop.bandwidth_bps, 40e6);

        let doc = doc.replace(
            r#""links":["#,
            r#""links":[{"from":"a","to":"c","latency_ms":3,"bandwidth_mbps":500},"#,
        );
        let spec = load_cluster_spec(&doc).unwrap();
        let hop = spec.bypass_link(0, 2);
        assert_eq!(hop.latency_ms, 3.0);
        assert_eq!(hop.bandwidth_bps, 500e6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn monotone_table() -> impl Strategy<Value = LatencyTable> {
            prop::collection::btree_map(1u32..256, 0.01f64..5.0, 1..6).prop_map(|m| {
                let mut acc = 0.0;
                LatencyTable::new(m.into_iter().map(|(k, inc)| {
                    acc += inc;
                    (k, acc)
                }))
            })
        }

        proptest! {
            #[test]
            fn interpolation_is_monotone(t in monotone_table(), a in 1u32..400, b in 1u32..400) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(interpolate_latency(&t, lo) <= interpolate_latency(&t, hi));
                prop_assert!(interpolate_latency(&t, lo) > 0.0);
            }

            #[test]
            fn serialization_round_trips(
                mbps in prop::collection::vec(0.001f64..100_000.0, 1..5),
                lat in 0.0f64..500.0,
                gpu in 1u64..u64::MAX / 2,
            ) {
                let ids: Vec<String> = (0..=mbps.len()).map(|i| format!("n{i}")).collect();
                let nodes = ids
                    .iter()
                    .map(|id| NodeProfile {
                        node_id: id.clone(),
                        gpu_mem: gpu,
                        host_mem: 7,
                        t_mlp: LatencyTable::new([(1, 1.5), (8, lat + 2.0)]),
                        t_attn_gpu: LatencyTable::new([(1, 0.5), (8, 0.75)]),
                        t_attn_cpu: LatencyTable::new([(1, 3.0), (8, 9.0)]),
                        pcie_bw: Some(16e9),
                    })
                    .collect();
                let links = mbps
                    .iter()
                    .enumerate()
                    .map(|(i, m)| LinkProfile::new(&ids[i], &ids[i + 1], lat, m * BITS_PER_MBIT))
                    .collect();
                let model: ModelProfile = serde_json::from_str(MODEL).unwrap();
                let spec = ClusterSpec::new(nodes, links, model).unwrap();
                let again = load_cluster_spec(&spec.to_json()).unwrap();
                prop_assert_eq!(again, spec);
            }
        }
    }
}
