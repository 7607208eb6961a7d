mod common;

use beeplan::cluster::{ClusterSpec, LinkProfile};
use beeplan::cost::{t_block, CostParams};
use beeplan::planner::{
    assignment_time, brute_force_assignment, enumerate_plans, pipeline_time, solve_layer_assignment,
    solve_with_stats, DpStats, Objective, PlanCandidates, PlanError,
};
use common::{chain_links, flat_node, random_params, random_spec, GB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBJECTIVES: [Objective; 2] = [Objective::SumOfStages, Objective::BottleneckCycle];

fn objective_value(spec: &ClusterSpec, params: &CostParams, objective: Objective) -> Option<f64> {
    match solve_layer_assignment(spec, params, objective) {
        Ok(plan) => Some(plan.predicted_step_time_ms),
        Err(PlanError::NoFeasiblePlan) => None,
        Err(e) => panic!("unexpected {e}"),
    }
}

/// Every way to give each of `n` nodes at least one of `blocks` blocks.
fn positive_compositions(n: usize, blocks: u32) -> Vec<Vec<u32>> {
    if n == 1 {
        return if blocks >= 1 { vec![vec![blocks]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 1..=blocks.saturating_sub(n as u32 - 1) {
        for mut rest in positive_compositions(n - 1, blocks - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

#[test]
fn dp_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let n = rng.gen_range(1..=4);
        let blocks = rng.gen_range(1..=10);
        let spec = random_spec(&mut rng, n, blocks);
        let params = random_params(&mut rng);
        for objective in OBJECTIVES {
            let dp = solve_layer_assignment(&spec, &params, objective);
            let oracle = brute_force_assignment(&spec, &params, objective);
            match (dp, oracle) {
                (Ok(a), Ok(b)) => {
                    assert_eq!(a.predicted_step_time_ms, b.predicted_step_time_ms);
                    assert_eq!(pipeline_time(&a, &spec).unwrap(), a.predicted_step_time_ms);
                    assert_eq!(a.layers.iter().sum::<u32>(), spec.model.total_blocks);
                }
                (Err(PlanError::NoFeasiblePlan), Err(PlanError::NoFeasiblePlan)) => {}
                (a, b) => panic!("solver {a:?} vs oracle {b:?}"),
            }
        }
    }
}

#[test]
fn faster_links_never_hurt() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..150 {
        let n = rng.gen_range(2..=4);
        let blocks = rng.gen_range(1..=12);
        let spec = random_spec(&mut rng, n, blocks);
        let params = random_params(&mut rng);
        let k = rng.gen_range(0..spec.links.len());
        let mut links = spec.links.clone();
        links[k].bandwidth_bps *= rng.gen_range(1.0..20.0);
        let faster = ClusterSpec::new(spec.nodes.clone(), links, spec.model.clone()).unwrap();
        for objective in OBJECTIVES {
            match (objective_value(&spec, &params, objective), objective_value(&faster, &params, objective)) {
                (Some(before), Some(after)) => assert!(after <= before, "{after} > {before}"),
                (None, None) => {}
                (a, b) => panic!("feasibility changed with bandwidth: {a:?} -> {b:?}"),
            }
        }
    }
}

#[test]
fn using_every_node_is_never_better() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..80 {
        let n = rng.gen_range(2..=4);
        let blocks = rng.gen_range(n as u32..=10);
        let spec = random_spec(&mut rng, n, blocks);
        let params = random_params(&mut rng);
        for objective in OBJECTIVES {
            let best = objective_value(&spec, &params, objective);
            let forced = positive_compositions(n, blocks)
                .into_iter()
                .filter_map(|layers| assignment_time(&spec, &layers, &params, objective).ok())
                .fold(f64::INFINITY, f64::min);
            match best {
                Some(best) => assert!(forced >= best, "forced {forced} < free {best}"),
                None => assert!(forced.is_infinite()),
            }
        }
    }
}

#[test]
fn dp_work_follows_the_loop_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let spec = random_spec(&mut rng, 8, 80);
    let params = CostParams::uncompressed(1, 1);
    let (_, sum) = solve_with_stats(&spec, &params, Objective::SumOfStages).unwrap();
    assert_eq!(sum, DpStats::expected(8, 80, 1));
    let (_, cycle) = solve_with_stats(&spec, &params, Objective::BottleneckCycle).unwrap();
    assert_eq!(cycle, DpStats::expected(8, 80, 8));
}

#[test]
fn single_node_throughput_is_closed_form() {
    let node = flat_node("solo", 80 * GB, 1.5);
    let spec = ClusterSpec::new(vec![node.clone()], vec![], common_model(10)).unwrap();
    let plan = enumerate_plans(&spec, &PlanCandidates::default()).unwrap();
    assert_eq!(plan.micro_batches, 1);
    assert_eq!(plan.layers, vec![10]);
    let b = plan.batch_size;
    let step = 10.0 * t_block(&node, 0.0, b);
    let expected = f64::from(b) * spec.model.seq_len as f64 / (step / 1000.0);
    assert!((plan.predicted_throughput - expected).abs() <= 1e-9 * expected);
}

fn common_model(blocks: u32) -> beeplan::ModelProfile {
    beeplan::ModelProfile {
        total_blocks: blocks,
        hidden_dim: 4096,
        elem_bytes: 2,
        seq_len: 128,
        weight_bytes_per_block: 200_000_000,
        kv_bytes_per_block_per_token: 16_384,
        act_workspace_factor: 2.0,
    }
}

#[test]
fn bandwidth_regimes_pick_different_techniques() {
    // 500 MB of GPU memory holds two 200 MB blocks, so all four nodes are needed.
    let nodes: Vec<_> = (0..4).map(|i| flat_node(&format!("n{i}"), GB / 2, 10.0)).collect();
    let candidates = PlanCandidates {
        batch_sizes: vec![8],
        compression_cpu_ms: 1.0,
        ..PlanCandidates::default()
    };
    let at = |mbps: f64| {
        let links: Vec<LinkProfile> = chain_links(&nodes, 1.0, mbps * 1e6);
        let spec = ClusterSpec::new(nodes.clone(), links, regime_model()).unwrap();
        enumerate_plans(&spec, &candidates).unwrap()
    };
    let fast = at(500.0);
    assert_eq!((fast.micro_batches, fast.compression), (1, false));
    let slow = at(20.0);
    assert!(slow.micro_batches > 1 && slow.compression, "{slow:?}");
}

pub fn regime_model() -> beeplan::ModelProfile {
    beeplan::ModelProfile {
        total_blocks: 8,
        hidden_dim: 8192,
        seq_len: 64,
        ..common_model(8)
    }
}
