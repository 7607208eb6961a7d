//! Streams activations through a source, a stage and a sink over loopback
//! links shaped to 20 Mbit/s, with and without micro-batching and
//! compression.
//!
//! cargo run --release --example wire_loopback

use beeplan::pipeline::{run_local_pipeline, LinkShape, LocalPipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let link = LinkShape::mbps(20.0, 2.0);
    // 4 requests of 52,050 FP16 values: 416.4 kB per step, about 167 ms on
    // the wire. Each stage computes for 2 blocks * 20 ms * 4 requests.
    let base = LocalPipelineConfig {
        blocks: vec![2, 2, 2],
        block_delay_ms: 20.0,
        hops: vec![link; 2],
        steps: 2,
        micro_batches: 1,
        micro_batch_size: 4,
        hidden_dim: 52_050,
        ..LocalPipelineConfig::two_stage(link)
    };

    println!("  M  compress  completion ms  per-hop ms          lossless");
    for (m, compression) in [(1, false), (4, false), (4, true)] {
        let cfg = LocalPipelineConfig {
            micro_batches: m,
            micro_batch_size: 4 / m,
            compression,
            ..base.clone()
        };
        let run = run_local_pipeline(&cfg)?;
        println!(
            "{m:>3}  {compression:>8}  {:>13.1}  {:<18}  {}",
            run.metrics.completion_ms,
            format!("{:.1?}", run.metrics.hop_transfer_ms),
            run.lossless()
        );
    }
    Ok(())
}
