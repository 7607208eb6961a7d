//! Three-region KV cache: rejected draft tokens become holes that are masked
//! immediately and removed later, off the critical path.
//!
//! cargo run --example kv_compaction

use beeplan::specdec::{KvCache, SharedKvCache};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cache = KvCache::new();
    cache.append(["The", "cat"]);
    cache.commit(&[0, 1])?;
    cache.compact();

    // A speculative round proposes four tokens; two are accepted.
    cache.append(["sat", "ran", "on", "under"]);
    cache.commit(&[0, 2])?;
    println!("visible   {:?}", cache.visible());
    println!("mask      {:?}", cache.attention_mask());
    println!("prefix {} holes {:?} physical {}", cache.prefix_len(), cache.holes(), cache.physical_len());

    cache.compact();
    println!("after compaction: visible {:?}, prefix {}, physical {}", cache.visible(), cache.prefix_len(), cache.physical_len());

    // The shared cache compacts on a worker thread while the next round's
    // tokens are appended.
    let shared = SharedKvCache::new(cache);
    shared.append(["the", "a", "mat"]);
    let compaction = shared.commit_and_compact_async(&[0, 2])?;
    shared.append(["."]);
    compaction.join().expect("compaction thread");
    println!("shared view {:?}", shared.visible());
    Ok(())
}
