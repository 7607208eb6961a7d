//! Plans a three-node cluster and shows how the chosen configuration moves
//! as every link is slowed down.
//!
//! cargo run --example plan_cluster [-- path/to/cluster.json]

use beeplan::planner::{brute_force_assignment, PlanCandidates};
use beeplan::{enumerate_plans, load_cluster_spec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => include_str!("data/e6_cluster.json").to_owned(),
    };
    let spec = load_cluster_spec(&text)?;
    let candidates = PlanCandidates {
        compression_cpu_ms: 2.0,
        ..PlanCandidates::default()
    };

    let plan = enumerate_plans(&spec, &candidates)?;
    println!("{}", serde_json::to_string_pretty(&plan)?);

    let oracle = brute_force_assignment(&spec, &plan.cost_params(), plan.objective)?;
    println!(
        "exhaustive search over the same configuration: {:?} at {:.3} ms",
        oracle.layers, oracle.predicted_step_time_ms
    );

    println!("\nlink scale  layers          B    M  compress  step ms   tok/s");
    for scale in [1.0, 0.5, 0.25, 0.1, 0.05, 0.02] {
        let slowed = spec.with_bandwidth_scaled(scale);
        let p = enumerate_plans(&slowed, &candidates)?;
        println!(
            "{scale:>10}  {:<14}  {:>3}  {:>3}  {:>8}  {:>7.2}  {:>7.0}",
            format!("{:?}", p.layers),
            p.batch_size,
            p.micro_batches,
            p.compression,
            p.predicted_step_time_ms,
            p.predicted_throughput
        );
    }
    Ok(())
}
