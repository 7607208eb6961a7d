//! Scores draft-tree candidates, prunes them at the threshold that keeps the
//! top 40%, and packs the surviving hidden states for transfer.
//!
//! cargo run --example draft_pruning

use beeplan::specdec::{
    pack, prune_with_fallback, score_candidates, threshold_for_retention, unpack, MlpScorer,
    PackedBatch, PruneConfig, Scorer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 32;
const HIDDEN: usize = 8;

/// A proxy distribution peaked on a random token.
fn proxy_distribution(rng: &mut impl Rng) -> Vec<f64> {
    let peak = rng.gen_range(0..VOCAB);
    let sharpness: f64 = rng.gen_range(0.5..6.0);
    let w: Vec<f64> = (0..VOCAB)
        .map(|v| if v == peak { sharpness.exp() } else { rng.gen_range(0.2..1.0) })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = PruneConfig {
        tau: 0.0,
        scorer: Scorer::ConfidenceOnly,
    };

    // Four requests, each with its own proxy distribution and 10 candidates.
    let requests: Vec<(Vec<f64>, Vec<u32>)> = (0..4)
        .map(|_| {
            let p = proxy_distribution(&mut rng);
            let c = (0..10).map(|_| rng.gen_range(0..VOCAB as u32)).collect();
            (p, c)
        })
        .collect();
    let scored: Vec<_> = requests
        .iter()
        .map(|(p, c)| score_candidates(p, c, &cfg))
        .collect::<Result<_, _>>()?;
    let all: Vec<f64> = scored.iter().flatten().map(|s| s.score).collect();
    let tau = threshold_for_retention(&all, 0.4);
    println!("threshold keeping the top 40%: {tau:.4}");

    let mut kept_states = Vec::new();
    for (r, scores) in scored.iter().enumerate() {
        let kept = prune_with_fallback(scores, tau);
        let ids: Vec<u32> = kept.iter().map(|&i| scores[i].candidate_id).collect();
        println!("request {r}: kept {}/{} candidates {ids:?}", kept.len(), scores.len());
        let states: Vec<Vec<u16>> = kept
            .iter()
            .map(|_| (0..HIDDEN).map(|_| rng.gen()).collect())
            .collect();
        kept_states.push(states);
    }

    let packed = pack(&kept_states)?;
    let wire = packed.to_bytes();
    println!("packed offsets {:?}, {} rows, {} bytes on the wire", packed.offsets, packed.rows(), wire.len());
    assert_eq!(unpack(&PackedBatch::from_bytes(&wire)?)?, kept_states);

    // A learned scorer is loaded from its flat weight file.
    let mlp = MlpScorer::zeros(16);
    let loaded = MlpScorer::from_bytes(&mlp.to_bytes())?;
    let with_mlp = PruneConfig {
        tau: 0.5,
        scorer: Scorer::LoadedMlp(loaded),
    };
    let s = score_candidates(&requests[0].0, &requests[0].1[..3], &with_mlp)?;
    println!("zero-weight MLP scores: {:?}", s.iter().map(|c| c.score).collect::<Vec<_>>());
    Ok(())
}
