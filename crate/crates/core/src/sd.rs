//! Latency model for speculative decoding across a pipeline of internet
//! hops, the break-even bandwidth it implies, and the enable/prune/fallback
//! decision built on top of it.
//!
//! Times are in milliseconds, payloads in bytes and bandwidth in bytes per
//! second. Autoregressive decoding pays compute, transfer and round-trip time
//! per token at every stage; speculative decoding pays them once per pass,
//! `L / a` passes in total, but each pass ships `N_tree` candidate states and
//! costs `m` times the compute plus the draft time `c`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdParams {
    /// Tokens to generate.
    pub tokens: f64,
    /// Hidden-state payload per token, bytes.
    pub payload_bytes: f64,
    /// Bandwidth, bytes per second.
    pub bandwidth: f64,
    pub t_rtt_ms: f64,
    /// Per-node autoregressive compute time, ms.
    pub t_comp_ms: f64,
    /// Speculative over autoregressive compute ratio.
    pub compute_ratio: f64,
    /// Draft model time per speculative pass, ms.
    pub draft_ms: f64,
    pub nodes: f64,
    /// Draft tree size.
    pub tree_size: f64,
    /// Average accepted tokens per pass.
    pub accepted: f64,
    pub batch: f64,
}

impl SdParams {
    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("accepted", self.accepted >= 1.0),
            ("tree_size", self.tree_size >= 1.0),
            ("bandwidth", self.bandwidth > 0.0),
            ("nodes", self.nodes >= 1.0),
            ("compute_ratio", self.compute_ratio >= 1.0),
            ("tokens", self.tokens >= 0.0),
            ("payload_bytes", self.payload_bytes >= 0.0),
            ("t_rtt_ms", self.t_rtt_ms >= 0.0),
            ("t_comp_ms", self.t_comp_ms >= 0.0),
            ("draft_ms", self.draft_ms >= 0.0),
            ("batch", self.batch >= 1.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(format!("invalid {name}")),
            None => Ok(()),
        }
    }

    pub fn with_bandwidth(&self, bandwidth: f64) -> Self {
        SdParams { bandwidth, ..*self }
    }

    pub fn with_tree(&self, tree_size: f64, accepted: f64) -> Self {
        SdParams {
            tree_size,
            accepted,
            ..*self
        }
    }

    /// Time to move `tokens_per_request` hidden states for the whole batch
    /// over one hop, ms.
    fn transfer_ms(&self, tokens_per_request: f64) -> f64 {
        self.batch * tokens_per_request * self.payload_bytes / self.bandwidth * 1000.0
    }
}

/// Total autoregressive decoding time, ms.
pub fn t_auto(p: &SdParams) -> f64 {
    p.tokens * (p.nodes * p.t_comp_ms + p.nodes * p.transfer_ms(1.0) + p.nodes * p.t_rtt_ms)
}

/// Total speculative decoding time, ms.
pub fn t_spec(p: &SdParams) -> f64 {
    (p.tokens / p.accepted)
        * (p.draft_ms
            + p.nodes * p.compute_ratio * p.t_comp_ms
            + p.nodes * p.transfer_ms(p.tree_size)
            + p.nodes * p.t_rtt_ms)
}

/// Where speculation beats autoregression as a function of bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "bytes_per_sec", rename_all = "snake_case")]
pub enum BreakEven {
    /// Faster exactly when bandwidth exceeds this many bytes per second.
    Above(f64),
    NeverHelps,
    AlwaysHelps,
    /// Faster exactly when bandwidth is below this value. Only reachable
    /// when more tokens are accepted than the tree carries.
    Below(f64),
}

impl BreakEven {
    /// Whether speculation is strictly faster at `bandwidth`.
    pub fn helps_at(&self, bandwidth: f64) -> bool {
        match *self {
            BreakEven::Above(s) => bandwidth > s,
            BreakEven::Below(s) => bandwidth < s,
            BreakEven::AlwaysHelps => true,
            BreakEven::NeverHelps => false,
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            BreakEven::Above(s) | BreakEven::Below(s) => Some(s),
            _ => None,
        }
    }
}

/// Savings per pass that do not depend on bandwidth, ms:
/// `(a - 1) t_rtt + (a - m) t_comp - c / n`.
pub fn break_even_denominator(p: &SdParams) -> f64 {
    (p.accepted - 1.0) * p.t_rtt_ms + (p.accepted - p.compute_ratio) * p.t_comp_ms
        - p.draft_ms / p.nodes
}

/// Bandwidth at which speculative and autoregressive decoding tie.
///
/// Speculation is faster iff `B (N - a) D / S < denom`; the sign of the
/// numerator and denominator picks which side of the tie wins.
pub fn break_even_bandwidth(p: &SdParams) -> BreakEven {
    let denom_ms = break_even_denominator(p);
    let numer = p.batch * (p.tree_size - p.accepted) * p.payload_bytes;
    // numer / S in seconds; compare against denom in seconds.
    let denom = denom_ms / 1000.0;
    if numer > 0.0 {
        if denom > 0.0 {
            BreakEven::Above(numer / denom)
        } else {
            BreakEven::NeverHelps
        }
    } else if numer == 0.0 {
        if denom > 0.0 {
            BreakEven::AlwaysHelps
        } else {
            BreakEven::NeverHelps
        }
    } else if denom >= 0.0 {
        BreakEven::AlwaysHelps
    } else {
        BreakEven::Below(numer / denom)
    }
}

/// One candidate tree configuration: size and expected acceptance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneLevel {
    pub tree_size: f64,
    pub accepted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub enabled: bool,
    /// Index into the supplied levels, when enabled.
    pub chosen_level: Option<usize>,
    pub level: Option<PruneLevel>,
    pub t_auto_ms: f64,
    /// Speculative time of the chosen level, when enabled.
    pub t_spec_ms: Option<f64>,
}

/// Picks the first level (largest tree first) that makes speculation strictly
/// faster at `measured_bandwidth`; disables speculation if none does.
pub fn decide_sd(p: &SdParams, measured_bandwidth: f64, levels: &[PruneLevel]) -> Decision {
    let base = p.with_bandwidth(measured_bandwidth);
    let auto = t_auto(&base);
    for (i, level) in levels.iter().enumerate() {
        let candidate = base.with_tree(level.tree_size, level.accepted);
        let spec = t_spec(&candidate);
        if spec < auto {
            return Decision {
                enabled: true,
                chosen_level: Some(i),
                level: Some(*level),
                t_auto_ms: auto,
                t_spec_ms: Some(spec),
            };
        }
    }
    Decision {
        enabled: false,
        chosen_level: None,
        level: None,
        t_auto_ms: auto,
        t_spec_ms: None,
    }
}

/// Bandwidth at which `t_spec = t_auto`, found by bisection on the two time
/// formulas in `[lo, hi]`. Returns `None` if the sign does not change.
pub fn bisect_break_even(p: &SdParams, lo: f64, hi: f64, rel_tol: f64) -> Option<f64> {
    let gap = |s: f64| {
        let q = p.with_bandwidth(s);
        t_auto(&q) - t_spec(&q)
    };
    let (mut lo, mut hi) = (lo, hi);
    let (g_lo, g_hi) = (gap(lo), gap(hi));
    if g_lo.signum() == g_hi.signum() {
        return None;
    }
    while (hi - lo) > rel_tol * lo {
        // Geometric midpoint: the bracket can span many decades.
        let mid = (lo * hi).sqrt();
        if gap(mid).signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo * hi).sqrt())
}
