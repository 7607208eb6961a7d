//! Break-even bandwidth of speculative decoding and the bandwidth-aware
//! choice between the full tree, a pruned tree and plain decoding.
//!
//! cargo run --example sd_break_even

use beeplan::sd::{bisect_break_even, break_even_bandwidth, decide_sd, t_auto, t_spec, PruneLevel, SdParams};

const MB: f64 = 1e6;

fn main() {
    let p = SdParams {
        tokens: 128.0,
        payload_bytes: 16_384.0,
        bandwidth: 10.0 * MB,
        t_rtt_ms: 20.0,
        t_comp_ms: 8.0,
        compute_ratio: 1.3,
        draft_ms: 6.0,
        nodes: 4.0,
        tree_size: 64.0,
        accepted: 3.2,
        batch: 8.0,
    };
    let levels = [
        PruneLevel { tree_size: p.tree_size, accepted: p.accepted },
        PruneLevel { tree_size: 0.4 * p.tree_size, accepted: 0.96 * p.accepted },
    ];
    for (name, l) in ["full", "pruned"].iter().zip(&levels) {
        let q = p.with_tree(l.tree_size, l.accepted);
        let be = break_even_bandwidth(&q);
        let bisected = be.finite().and_then(|s| bisect_break_even(&q, s / 100.0, s * 100.0, 1e-9));
        let mbs = |x: Option<f64>| x.map_or("none".to_owned(), |s| format!("{:.3} MB/s", s / MB));
        println!(
            "{name:>6} tree {:>5.1}, a={:.3}: {be:?}; closed form {}, bisection {}",
            l.tree_size,
            l.accepted,
            mbs(be.finite()),
            mbs(bisected)
        );
    }

    println!("\n  MB/s   t_auto ms   t_spec ms   decision");
    for mbs in [1.0, 5.0, 10.0, 20.0, 40.0, 80.0, 200.0] {
        let s = mbs * MB;
        let d = decide_sd(&p, s, &levels);
        let what = match d.chosen_level {
            Some(0) => "full tree",
            Some(_) => "pruned tree",
            None => "autoregressive",
        };
        println!(
            "{mbs:>6}  {:>10.1}  {:>10.1}   {what}",
            t_auto(&p.with_bandwidth(s)),
            t_spec(&p.with_bandwidth(s))
        );
    }
}
