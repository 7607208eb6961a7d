//! Planning and measurement toolkit for pipelined LLM inference across
//! heterogeneous nodes joined by slow links.
//!
//! - [`cluster`]: cluster, link and model descriptions.
//! - [`cost`]: per-stage compute, offload and per-hop transfer costs.
//! - [`planner`]: optimal contiguous layer assignment and configuration search.
//! - [`sd`]: speculative-decoding latency model and bandwidth-aware decision.
//! - [`codec`]: lossless byte-split compression of FP16 activations.
//! - [`specdec`]: draft pruning, packed transfer and KV-cache compaction.
//! - [`pipeline`]: event-driven simulator and a socket runner over shaped links.
//! - [`cli`]: the `beeplan` command line.

pub mod cli;
pub mod cluster;
pub mod codec;
pub mod cost;
pub mod pipeline;
pub mod planner;
pub mod sd;
pub mod specdec;

pub use cluster::{load_cluster_spec, ClusterSpec, LinkProfile, ModelProfile, NodeProfile};
pub use planner::{enumerate_plans, solve_layer_assignment, Objective, Plan, PlanCandidates};
