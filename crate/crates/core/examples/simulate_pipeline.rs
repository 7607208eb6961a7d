//! Runs a plan through the event-driven simulator and compares the measured
//! step time with the closed forms.
//!
//! cargo run --example simulate_pipeline

use beeplan::pipeline::sim::{bottleneck_step_time, flow_shop_step_time, plan_stage_times};
use beeplan::pipeline::{simulate, simulate_stages, SimConfig, StageTimes};
use beeplan::planner::PlanCandidates;
use beeplan::{enumerate_plans, load_cluster_spec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A balanced three-stage pipeline: every lane takes 10 ms.
    let balanced = [StageTimes::new(10.0, 0.0); 3];
    let m = simulate_stages(&balanced, 4, 4.0, &SimConfig::default())?;
    println!("balanced 3 stages, M=4: {} ms (cycle formula {} ms)", m.completion_ms, bottleneck_step_time(&balanced, 4));

    // Uneven stages with communication: the simulator tracks the flow-shop
    // makespan, and the cycle formula becomes exact as M grows.
    let uneven = [
        StageTimes::new(7.0, 3.0),
        StageTimes::new(12.0, 5.5),
        StageTimes::new(4.0, 0.0),
    ];
    println!("\n  M   simulated  flow-shop  cycle formula");
    for mb in [1, 2, 4, 8, 16, 64] {
        let got = simulate_stages(&uneven, mb, f64::from(mb), &SimConfig::default())?.completion_ms;
        println!(
            "{mb:>3}  {got:>10.2}  {:>9.2}  {:>13.2}",
            flow_shop_step_time(&uneven, mb),
            bottleneck_step_time(&uneven, mb)
        );
    }

    let spec = load_cluster_spec(include_str!("data/e6_cluster.json"))?;
    let plan = enumerate_plans(&spec, &PlanCandidates::default())?;
    let metrics = simulate(&plan, &spec, &SimConfig { steps: 3, slots: 2 })?;
    println!("\nplanned {:?}, B={} M={}", plan.layers, plan.batch_size, plan.micro_batches);
    println!("stage lanes: {:?}", plan_stage_times(&plan, &spec)?);
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    println!("predicted step {:.3} ms", plan.predicted_step_time_ms);
    Ok(())
}
