//! Draft-tree pruning, padding-free packing of the retained candidate
//! states, and a KV cache that defers compaction of rejected draft slots.

use std::collections::BTreeSet;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecDecError {
    #[error("probability vector is not a distribution: {0}")]
    BadDistribution(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("candidate {id} outside vocabulary of {vocab}")]
    OutOfVocabulary { id: u32, vocab: usize },
    #[error("hidden vectors disagree on width: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("corrupt offsets: {0}")]
    CorruptOffsets(String),
    #[error("index {index} outside the new region of {len} tokens")]
    IndexOutOfRegion { index: usize, len: usize },
}

/// Shannon entropy of a distribution, in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.log2())
        .sum::<f64>()
        .max(0.0)
}

/// Small MLP mapping candidate features to a retention score.
///
/// Topology is `3 -> hidden -> 1` with ReLU on the hidden layer and a sigmoid
/// on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScorer {
    hidden: usize,
    /// `hidden x 3`, row-major.
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: f32,
}

pub const MLP_MAGIC: [u8; 4] = *b"BBMS";
pub const MLP_DEFAULT_HIDDEN: usize = 16;
const FEATURES: usize = 3;

impl MlpScorer {
    pub fn new(
        hidden: usize,
        w1: Vec<f32>,
        b1: Vec<f32>,
        w2: Vec<f32>,
        b2: f32,
    ) -> Result<Self, SpecDecError> {
        if w1.len() != hidden * FEATURES || b1.len() != hidden || w2.len() != hidden {
            return Err(SpecDecError::ShapeMismatch(format!(
                "hidden {hidden}: w1 {}, b1 {}, w2 {}",
                w1.len(),
                b1.len(),
                w2.len()
            )));
        }
        Ok(MlpScorer { hidden, w1, b1, w2, b2 })
    }

    pub fn zeros(hidden: usize) -> Self {
        MlpScorer::new(
            hidden,
            vec![0.0; hidden * FEATURES],
            vec![0.0; hidden],
            vec![0.0; hidden],
            0.0,
        )
        .expect("consistent shapes")
    }

    pub fn score(&self, features: [f64; 3]) -> f64 {
        let mut z = f64::from(self.b2);
        for h in 0..self.hidden {
            let row = &self.w1[h * FEATURES..(h + 1) * FEATURES];
            let pre = f64::from(self.b1[h])
                + row.iter().zip(features).map(|(&w, f)| f64::from(w) * f).sum::<f64>();
            z += f64::from(self.w2[h]) * pre.max(0.0);
        }
        1.0 / (1.0 + (-z).exp())
    }

    /// File layout: magic `BBMS`, then `u32` LE input, hidden and output
    /// widths, then `f32` LE values for w1, b1, w2, b2 in that order.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SpecDecError> {
        let bad = |m: &str| SpecDecError::ShapeMismatch(m.to_owned());
        if bytes.len() < 16 || bytes[..4] != MLP_MAGIC {
            return Err(bad("missing BBMS header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (inputs, hidden, outputs) = (dim(0), dim(1), dim(2));
        if inputs != FEATURES || outputs != 1 || hidden == 0 {
            return Err(bad(&format!("expected 3 -> h -> 1, got {inputs} -> {hidden} -> {outputs}")));
        }
        let expected = hidden * FEATURES + hidden + hidden + 1;
        let body = &bytes[16..];
        if body.len() != expected * 4 {
            return Err(bad(&format!("expected {expected} weights, found {} bytes", body.len())));
        }
        let vals: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w1, rest) = vals.split_at(hidden * FEATURES);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(hidden);
        MlpScorer::new(hidden, w1.to_vec(), b1.to_vec(), w2.to_vec(), b2[0])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MLP_MAGIC.to_vec();
        for d in [FEATURES, self.hidden, 1] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain([&self.b2]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// Score is the proxy probability of the candidate token.
    ConfidenceOnly,
    LoadedMlp(MlpScorer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub tau: f64,
    pub scorer: Scorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: u32,
    /// `[max p, p[candidate], H(p) in bits]`.
    pub features: [f64; 3],
    pub score: f64,
}

fn check_distribution(p: &[f64]) -> Result<(), SpecDecError> {
    if p.is_empty() {
        return Err(SpecDecError::BadDistribution("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !(**x >= 0.0 && **x <= 1.0)) {
        return Err(SpecDecError::BadDistribution(format!("entry {x} outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SpecDecError::BadDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Features and retention score of one candidate under its proxy distribution.
pub fn score_candidate(p_hat: &[f64], candidate: u32, cfg: &PruneConfig) -> Result<CandidateScore, SpecDecError> {
    check_distribution(p_hat)?;
    let confidence = *p_hat.get(candidate as usize).ok_or(SpecDecError::OutOfVocabulary {
        id: candidate,
        vocab: p_hat.len(),
    })?;
    let peak = p_hat.iter().copied().fold(0.0, f64::max);
    let features = [peak, confidence, entropy_bits(p_hat)];
    let score = match &cfg.scorer {
        Scorer::ConfidenceOnly => confidence,
        Scorer::LoadedMlp(mlp) => mlp.score(features),
    };
    Ok(CandidateScore {
        candidate_id: candidate,
        features,
        score: score.clamp(0.0, 1.0),
    })
}

pub fn score_candidates(
    p_hat: &[f64],
    candidates: &[u32],
    cfg: &PruneConfig,
) -> Result<Vec<CandidateScore>, SpecDecError> {
    candidates.iter().map(|&c| score_candidate(p_hat, c, cfg)).collect()
}

/// Positions of candidates with `score >= tau`, in input order.
pub fn prune(scores: &[CandidateScore], tau: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.score >= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Like [`prune`], but keeps the best-scoring candidate when nothing passes
/// so every request makes progress.
pub fn prune_with_fallback(scores: &[CandidateScore], tau: f64) -> Vec<usize> {
    let kept = prune(scores, tau);
    if !kept.is_empty() || scores.is_empty() {
        return kept;
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if s.score > scores[best].score { i } else { best });
    vec![best]
}

/// Threshold that keeps roughly the top `fraction` of `scores`.
pub fn threshold_for_retention(scores: &[f64], fraction: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = ((fraction.clamp(0.0, 1.0) * sorted.len() as f64).round() as usize).max(1);
    sorted[keep - 1]
}

/// Ragged per-request hidden states flattened into one buffer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBatch {
    pub hidden_dim: usize,
    /// Per-request start rows, `requests + 1` entries.
    pub offsets: Vec<u32>,
    /// `offsets.last() * hidden_dim` FP16 values.
    pub payload: Vec<u16>,
}

pub type HiddenVec = Vec<u16>;

pub fn pack(per_request: &[Vec<HiddenVec>]) -> Result<PackedBatch, SpecDecError> {
    let hidden_dim = per_request.iter().flatten().next().map_or(0, Vec::len);
    let mut offsets = Vec::with_capacity(per_request.len() + 1);
    offsets.push(0u32);
    let mut payload = Vec::new();
    for request in per_request {
        for v in request {
            if v.len() != hidden_dim {
                return Err(SpecDecError::DimMismatch {
                    expected: hidden_dim,
                    found: v.len(),
                });
            }
            payload.extend_from_slice(v);
        }
        offsets.push(offsets.last().unwrap() + request.len() as u32);
    }
    Ok(PackedBatch {
        hidden_dim,
        offsets,
        payload,
    })
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        self.offsets.last().copied().unwrap_or(0) as usize
    }

    fn validate(&self) -> Result<(), SpecDecError> {
        let bad = |m: String| Err(SpecDecError::CorruptOffsets(m));
        match self.offsets.first() {
            Some(0) => {}
            Some(x) => return bad(format!("first offset is {x}")),
            None => return bad("no offsets".into()),
        }
        if let Some(w) = self.offsets.windows(2).find(|w| w[1] < w[0]) {
            return bad(format!("offsets decrease from {} to {}", w[0], w[1]));
        }
        if self.rows() * self.hidden_dim != self.payload.len() {
            return bad(format!(
                "{} rows of width {} but {} values",
                self.rows(),
                self.hidden_dim,
                self.payload.len()
            ));
        }
        Ok(())
    }

    /// Count, offsets and payload as little-endian octets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.offsets.len() + 2 * self.payload.len());
        out.extend_from_slice(&(self.offsets.len() as u32).to_le_bytes());
        for o in &self.offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SpecDecError> {
        let bad = |m: &str| SpecDecError::CorruptOffsets(m.to_owned());
        let count = bytes
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("missing offset count"))?;
        let table_end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(4))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("offset table truncated"))?;
        let offsets: Vec<u32> = bytes[4..table_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let body = &bytes[table_end..];
        if body.len() % 2 != 0 {
            return Err(bad("payload has odd length"));
        }
        let payload: Vec<u16> = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let rows = offsets.last().copied().unwrap_or(0) as usize;
        let hidden_dim = if rows == 0 {
            0
        } else if payload.len() % rows == 0 {
            payload.len() / rows
        } else {
            return Err(bad("payload is not a whole number of rows"));
        };
        let pb = PackedBatch {
            hidden_dim,
            offsets,
            payload,
        };
        pb.validate()?;
        Ok(pb)
    }
}

pub fn unpack(pb: &PackedBatch) -> Result<Vec<Vec<HiddenVec>>, SpecDecError> {
    pb.validate()?;
    let d = pb.hidden_dim;
    Ok(pb
        .offsets
        .windows(2)
        .map(|w| {
            (w[0] as usize..w[1] as usize)
                .map(|row| pb.payload[row * d..(row + 1) * d].to_vec())
                .collect()
        })
        .collect())
}

/// KV cache with a compact prefix, a region of committed tokens interleaved
/// with holes left by rejected drafts, and the newest appended tokens.
///
/// Attention skips hole slots, so the cache stays usable before compaction.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    entries: Vec<T>,
    prefix_len: usize,
    /// Physical slots in the middle region that are masked out.
    holes: BTreeSet<usize>,
    new_len: usize,
}

impl<T> Default for KvCache<T> {
    fn default() -> Self {
        KvCache {
            entries: Vec::new(),
            prefix_len: 0,
            holes: BTreeSet::new(),
            new_len: 0,
        }
    }
}

impl<T: Clone> KvCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn new_len(&self) -> usize {
        self.new_len
    }

    pub fn holes(&self) -> &BTreeSet<usize> {
        &self.holes
    }

    pub fn physical_len(&self) -> usize {
        self.entries.len()
    }

    /// Start of the newly appended region.
    fn new_start(&self) -> usize {
        self.entries.len() - self.new_len
    }

    pub fn append(&mut self, tokens: impl IntoIterator<Item = T>) {
        let before = self.entries.len();
        self.entries.extend(tokens);
        self.new_len += self.entries.len() - before;
    }

    /// Keeps `accepted` (indices into the new region) and turns the rest of
    /// the new region into holes.
    pub fn commit(&mut self, accepted: &[usize]) -> Result<(), SpecDecError> {
        if let Some(&index) = accepted.iter().find(|&&i| i >= self.new_len) {
            return Err(SpecDecError::IndexOutOfRegion {
                index,
                len: self.new_len,
            });
        }
        let keep: BTreeSet<usize> = accepted.iter().copied().collect();
        let start = self.new_start();
        for i in 0..self.new_len {
            if !keep.contains(&i) {
                self.holes.insert(start + i);
            }
        }
        self.new_len = 0;
        Ok(())
    }

    /// Removes hole slots; logical content is unchanged.
    pub fn compact(&mut self) {
        if self.holes.is_empty() {
            self.prefix_len = self.new_start();
            return;
        }
        let new_start = self.new_start();
        let mut slot = 0;
        let holes = std::mem::take(&mut self.holes);
        self.entries.retain(|_| {
            let keep = !holes.contains(&slot);
            slot += 1;
            keep
        });
        self.prefix_len = new_start - holes.len();
    }

    /// Physical slots attention may read, in order.
    pub fn visible_slots(&self) -> Vec<usize> {
        (0..self.entries.len()).filter(|i| !self.holes.contains(i)).collect()
    }

    /// Attention mask over physical slots; false exactly at holes.
    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.entries.len()).map(|i| !self.holes.contains(&i)).collect()
    }

    /// Visible tokens in logical order.
    pub fn visible(&self) -> Vec<T> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.holes.contains(i))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// A cache shared between the request path and a background compactor.
///
/// Every operation takes the lock, so any interleaving is equivalent to some
/// serial order of the same calls.
#[derive(Debug)]
pub struct SharedKvCache<T> {
    inner: Arc<RwLock<KvCache<T>>>,
}

impl<T> Clone for SharedKvCache<T> {
    fn clone(&self) -> Self {
        SharedKvCache {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Clone + Send + Sync + 'static> SharedKvCache<T> {
    pub fn new(cache: KvCache<T>) -> Self {
        SharedKvCache {
            inner: Arc::new(RwLock::new(cache)),
        }
    }

    pub fn append(&self, tokens: impl IntoIterator<Item = T>) {
        self.inner.write().unwrap().append(tokens);
    }

    pub fn commit(&self, accepted: &[usize]) -> Result<(), SpecDecError> {
        self.inner.write().unwrap().commit(accepted)
    }

    pub fn visible(&self) -> Vec<T> {
        self.inner.read().unwrap().visible()
    }

    /// Applies acceptance metadata from the next request and compacts on a
    /// worker thread.
    pub fn commit_and_compact_async(&self, accepted: &[usize]) -> Result<JoinHandle<()>, SpecDecError> {
        self.commit(accepted)?;
        let inner = Arc::clone(&self.inner);
        Ok(std::thread::spawn(move || inner.write().unwrap().compact()))
    }

    pub fn snapshot(&self) -> KvCache<T> {
        self.inner.read().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conf(tau: f64) -> PruneConfig {
        PruneConfig {
            tau,
            scorer: Scorer::ConfidenceOnly,
        }
    }

    fn scored(scores: &[f64]) -> Vec<CandidateScore> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CandidateScore {
                candidate_id: i as u32,
                features: [0.0; 3],
                score: s,
            })
            .collect()
    }

    #[test]
    fn feature_examples() {
        let s = score_candidate(&[0.5, 0.25, 0.25], 0, &conf(0.0)).unwrap();
        assert_eq!(s.features, [0.5, 0.5, 1.5]);
        assert_eq!(s.score, 0.5);
        let one_hot = score_candidate(&[0.0, 1.0, 0.0], 1, &conf(0.0)).unwrap();
        assert_eq!(one_hot.features, [1.0, 1.0, 0.0]);
        assert_eq!(one_hot.score, 1.0);
        let mlp = PruneConfig {
            tau: 0.5,
            scorer: Scorer::LoadedMlp(MlpScorer::zeros(MLP_DEFAULT_HIDDEN)),
        };
        for p in [[0.2, 0.8], [1.0, 0.0]] {
            assert_eq!(score_candidate(&p, 0, &mlp).unwrap().score, 0.5);
        }
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            score_candidate(&[0.5, 0.6], 0, &conf(0.0)),
            Err(SpecDecError::BadDistribution(_))
        ));
        assert!(matches!(
            score_candidate(&[1.0], 3, &conf(0.0)),
            Err(SpecDecError::OutOfVocabulary { .. })
        ));
        assert!(matches!(
            MlpScorer::new(4, vec![0.0; 11], vec![0.0; 4], vec![0.0; 4], 0.0),
            Err(SpecDecError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mlp_file_round_trip() {
        let mlp = MlpScorer::new(
            2,
            vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.25],
            vec![0.1, -0.2],
            vec![1.5, -0.5],
            0.3,
        )
        .unwrap();
        let bytes = mlp.to_bytes();
        assert_eq!(&bytes[..4], b"BBMS");
        assert_eq!(MlpScorer::from_bytes(&bytes).unwrap(), mlp);
        // Hand-computed: hidden = relu([0.1 + 1*0.9 - 0.5 + 0.5*1.0, -0.2 + 0 + 2*0.5 - 0.25*1.0])
        //             = [1.0, 0.55]; z = 0.3 + 1.5 * 1.0 - 0.5 * 0.55 = 1.525
        let s = mlp.score([0.9, 0.5, 1.0]);
        assert!((s - 1.0 / (1.0 + (-1.525f64).exp())).abs() < 1e-6);
        assert!(MlpScorer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn prune_examples() {
        let s = scored(&[0.9, 0.2, 0.5]);
        assert_eq!(prune(&s, 0.4), vec![0, 2]);
        assert_eq!(prune(&s, 0.0), vec![0, 1, 2]);
        assert!(prune(&s, 1.0).is_empty());
        assert_eq!(prune_with_fallback(&s, 1.0), vec![0]);
        // Ties at tau are kept.
        assert_eq!(prune(&scored(&[0.4]), 0.4), vec![0]);
    }

    #[test]
    fn pack_examples() {
        let v = |x: u16| vec![x, x + 1];
        let batch = vec![vec![v(0), v(2), v(4)], vec![v(6)], vec![v(8), v(10)]];
        let pb = pack(&batch).unwrap();
        assert_eq!(pb.offsets, vec![0, 3, 4, 6]);
        assert_eq!(pb.payload.len(), 6 * 2);
        assert_eq!(unpack(&pb).unwrap(), batch);

        let with_empty = vec![vec![v(0)], vec![], vec![v(2)]];
        let pb = pack(&with_empty).unwrap();
        assert_eq!(pb.offsets, vec![0, 1, 1, 2]);
        assert_eq!(unpack(&pb).unwrap(), with_empty);

        assert!(matches!(
            pack(&[vec![vec![1, 2], vec![3]]]),
            Err(SpecDecError::DimMismatch { .. })
        ));
    }

    #[test]
    fn wire_encoding_round_trip_and_corruption() {
        let pb = pack(&[vec![vec![1, 2, 3]], vec![], vec![vec![4, 5, 6], vec![7, 8, 9]]]).unwrap();
        let bytes = pb.to_bytes();
        assert_eq!(&bytes[..4], &4u32.to_le_bytes());
        assert_eq!(PackedBatch::from_bytes(&bytes).unwrap(), pb);
        assert!(PackedBatch::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = pb.clone();
        bad.offsets = vec![0, 2, 1, 3];
        assert!(matches!(unpack(&bad), Err(SpecDecError::CorruptOffsets(_))));
        let empty = pack(&[vec![], vec![]]).unwrap();
        assert_eq!(PackedBatch::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn kv_examples() {
        let mut kv = KvCache::new();
        kv.append([10, 11]);
        kv.commit(&[0, 1]).unwrap();
        kv.compact();
        assert_eq!(kv.prefix_len(), 2);

        kv.append([20, 21, 22, 23]);
        kv.commit(&[0, 2]).unwrap();
        assert_eq!(kv.visible(), vec![10, 11, 20, 22]);
        assert_eq!(kv.holes().iter().copied().collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(kv.attention_mask(), vec![true, true, true, false, true, false]);

        kv.compact();
        assert_eq!(kv.prefix_len(), 4);
        assert!(kv.holes().is_empty());
        assert_eq!(kv.visible(), vec![10, 11, 20, 22]);
        assert_eq!(kv.physical_len(), 4);

        kv.append([30]);
        assert_eq!(
            kv.commit(&[1]),
            Err(SpecDecError::IndexOutOfRegion { index: 1, len: 1 })
        );
    }

    #[test]
    fn compaction_leaves_new_region_in_place() {
        let mut kv = KvCache::new();
        kv.append([1, 2, 3]);
        kv.commit(&[1]).unwrap();
        kv.append([4, 5]);
        kv.compact();
        assert_eq!(kv.prefix_len(), 1);
        assert_eq!(kv.new_len(), 2);
        assert_eq!(kv.visible(), vec![2, 4, 5]);
        kv.commit(&[1]).unwrap();
        assert_eq!(kv.visible(), vec![2, 5]);
    }

    #[test]
    fn background_compaction_matches_serial() {
        let shared = SharedKvCache::new(KvCache::new());
        let mut serial = KvCache::new();
        for round in 0..50u32 {
            let tokens: Vec<u32> = (0..5).map(|i| round * 10 + i).collect();
            let accepted: Vec<usize> = (0..5).filter(|i| (round as usize + i) % 3 != 0).collect();
            shared.append(tokens.clone());
            serial.append(tokens);
            let handle = shared.commit_and_compact_async(&accepted).unwrap();
            serial.commit(&accepted).unwrap();
            // Next round's layers run while compaction proceeds.
            shared.append([round * 10 + 9]);
            serial.append([round * 10 + 9]);
            assert_eq!(shared.visible(), serial.visible());
            handle.join().unwrap();
            shared.commit(&[0]).unwrap();
            serial.commit(&[0]).unwrap();
            assert_eq!(shared.visible(), serial.visible());
        }
        assert!(shared.snapshot().holes().len() <= 5);
    }
}
