//! Online dynamic expert pruning with attention-based token protection.
//!
//! For top-2 routing, a token drops its second expert when the ratio of the
//! second routing weight to the first falls below the layer threshold `mu`.
//! A small fraction of tokens, ranked by [`token_importance`], is exempt.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::model::Route;
use crate::numerics::{median, topk_indices, Matrix};
use crate::profiler::ExpertStats;

/// Default fraction of tokens shielded from pruning.
pub const DEFAULT_PROTECT_RATIO: f64 = 0.02;
/// Default fraction of tokens whose experts are all masked in full-drop mode.
pub const DEFAULT_FULL_DROP_RATIO: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Off,
    /// Ratio test only, no protection.
    WeightOnly,
    /// Ratio test with the top-`p` important tokens exempt.
    Protected,
    /// As `Protected`, and the least important tokens skip the MoE block.
    FullDrop,
}

impl std::str::FromStr for PruneMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(PruneMode::Off),
            "weight_only" => Ok(PruneMode::WeightOnly),
            "protected" => Ok(PruneMode::Protected),
            "full_drop" => Ok(PruneMode::FullDrop),
            other => arg_err(format!(
                "unknown pruning mode '{other}' (expected off, weight_only, protected, full_drop)"
            )),
        }
    }
}

/// Where token importance is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtectionScope {
    /// Recomputed in every layer from that layer's attention map.
    #[default]
    PerLayer,
    /// Computed once in the first layer and reused.
    OncePerForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPolicy {
    pub mode: PruneMode,
    pub p: f64,
    pub mu: Vec<f32>,
    pub full_drop_ratio: f64,
    #[serde(default)]
    pub scope: ProtectionScope,
    /// Use one head's attention map instead of the head mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_head: Option<usize>,
}

impl PruningPolicy {
    pub fn off(n_layers: usize) -> Self {
        Self {
            mode: PruneMode::Off,
            p: DEFAULT_PROTECT_RATIO,
            mu: vec![0.0; n_layers],
            full_drop_ratio: 0.0,
            scope: ProtectionScope::PerLayer,
            attention_head: None,
        }
    }

    pub fn new(mode: PruneMode, mu: Vec<f32>) -> Self {
        Self {
            mode,
            p: if mode == PruneMode::WeightOnly { 0.0 } else { DEFAULT_PROTECT_RATIO },
            mu,
            full_drop_ratio: if mode == PruneMode::FullDrop { DEFAULT_FULL_DROP_RATIO } else { 0.0 },
            scope: ProtectionScope::PerLayer,
            attention_head: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return arg_err(format!("protection ratio {} outside [0, 1]", self.p));
        }
        if !(0.0..=1.0).contains(&self.full_drop_ratio) {
            return arg_err(format!("full-drop ratio {} outside [0, 1]", self.full_drop_ratio));
        }
        if self.mode != PruneMode::Off && self.mu.len() != n_layers {
            return arg_err(format!(
                "policy has {} thresholds for a {n_layers}-layer model",
                self.mu.len()
            ));
        }
        if let Some(bad) = self.mu.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return arg_err(format!("ratio threshold {bad} outside [0, 1]"));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    KeepBoth,
    DropSecond,
    DropAll,
}

impl Decision {
    /// Number of routed experts actually run for this token.
    pub fn invoked(self, routed: usize) -> usize {
        match self {
            Decision::KeepBoth => routed,
            Decision::DropSecond => routed.min(1),
            Decision::DropAll => 0,
        }
    }
}

/// Per-layer record of what the pruner did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneTrace {
    pub layer: usize,
    /// Tokens that dropped their second expert.
    pub pruned: Vec<usize>,
    /// Tokens whose experts were all masked (full-drop mode).
    pub dropped: Vec<usize>,
    pub protected: Vec<usize>,
    pub importance: Vec<f32>,
}

/// `I[j] = |t_j|_1 * mean_{i >= j} A[i][j]`.
///
/// `attn` is query-by-key, so the attention token `j` receives is column `j`
/// from row `j` downward. The mean divides by the number of summed terms,
/// `L - j` with zero-based `j`.
pub fn token_importance(hidden: &Matrix, attn: &Matrix) -> Result<Vec<f32>> {
    let l = hidden.rows();
    if attn.shape() != (l, l) {
        return shape_err(format!(
            "attention map {:?} does not match {l} tokens",
            attn.shape()
        ));
    }
    Ok((0..l)
        .map(|j| {
            let l1: f64 = hidden.row(j).iter().map(|v| v.abs() as f64).sum();
            let received: f64 = (j..l).map(|i| attn.get(i, j) as f64).sum();
            (l1 * received / (l - j) as f64) as f32
        })
        .collect())
}

/// Ratio test on a descending top-2 weight pair. Strict inequality.
pub fn decide(weights: &[f32], mu: f32) -> Decision {
    match weights {
        [w0, w1, ..] if w1 / w0 < mu => Decision::DropSecond,
        _ => Decision::KeepBoth,
    }
}

/// `ceil(ratio * len)`, capped at `len`, robust to `0.02 * 100 = 2.0000000000000004`.
pub fn fraction_count(ratio: f64, len: usize) -> usize {
    let raw = ratio * len as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n.max(0.0) as usize).min(len)
}

pub fn apply_layer(
    policy: &PruningPolicy,
    layer: usize,
    hidden: &Matrix,
    attn: &Matrix,
    routes: &[Route],
) -> Result<(Vec<Decision>, LayerPruneTrace)> {
    if policy.mode == PruneMode::Off {
        return apply_layer_with_importance(policy, layer, Vec::new(), routes);
    }
    let importance = token_importance(hidden, attn)?;
    apply_layer_with_importance(policy, layer, importance, routes)
}

/// Same as [`apply_layer`] with importance scores supplied by the caller.
pub fn apply_layer_with_importance(
    policy: &PruningPolicy,
    layer: usize,
    importance: Vec<f32>,
    routes: &[Route],
) -> Result<(Vec<Decision>, LayerPruneTrace)> {
    let l = routes.len();
    let mut decisions = vec![Decision::KeepBoth; l];
    let mut trace = LayerPruneTrace { layer, ..Default::default() };
    if policy.mode == PruneMode::Off {
        return Ok((decisions, trace));
    }
    if importance.len() != l {
        return shape_err(format!("{} importance scores for {l} tokens", importance.len()));
    }
    let mu = *policy
        .mu
        .get(layer)
        .ok_or_else(|| crate::Error::Argument(format!("no threshold for layer {layer}")))?;

    let mut is_protected = vec![false; l];
    let p = if policy.mode == PruneMode::WeightOnly { 0.0 } else { policy.p };
    let n_protect = fraction_count(p, l);
    let protected = topk_indices(&importance, n_protect)?;
    for &t in &protected {
        is_protected[t] = true;
    }

    if policy.mode == PruneMode::FullDrop {
        let n_drop = fraction_count(policy.full_drop_ratio, l);
        // Least important first; ties resolved toward the lower position.
        let mut order: Vec<usize> = (0..l).filter(|&t| !is_protected[t]).collect();
        order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));
        for &t in order.iter().take(n_drop) {
            decisions[t] = Decision::DropAll;
        }
    }

    for (t, route) in routes.iter().enumerate() {
        if is_protected[t] || decisions[t] == Decision::DropAll {
            continue;
        }
        decisions[t] = decide(&route.weights, mu);
    }

    for (t, d) in decisions.iter().enumerate() {
        match d {
            Decision::DropSecond => trace.pruned.push(t),
            Decision::DropAll => trace.dropped.push(t),
            Decision::KeepBoth => {}
        }
    }
    let mut protected = protected;
    protected.sort_unstable();
    trace.protected = protected;
    trace.importance = importance;
    Ok((decisions, trace))
}

/// Per-layer median of the calibration routing ratios.
pub fn calibrate_mu(stats: &ExpertStats) -> Result<Vec<f32>> {
    match &stats.ratio_samples {
        Some(samples) => samples
            .iter()
            .enumerate()
            .map(|(l, s)| {
                if s.is_empty() {
                    arg_err(format!("no routing-ratio samples for layer {l}"))
                } else {
                    median(s)
                }
            })
            .collect(),
        None if !stats.ratio_median.is_empty() => Ok(stats.ratio_median.clone()),
        None => arg_err("stats carry no routing-ratio samples"),
    }
}
