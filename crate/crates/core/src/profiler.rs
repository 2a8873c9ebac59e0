//! Calibration statistics: expert activation frequency `phi`, routing weight
//! mass `w`, per-expert quantization error `eps` at 1/2/3 bits, and the
//! distribution of top-2 routing ratios.
//!
//! Sequences are processed in parallel and merged in sequence order, so every
//! result is reproducible regardless of thread count.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::{ExpertWeights, ForwardMode, ForwardObserver, MoEModel};
use crate::numerics::{median, Matrix};
use crate::quantizer::{binarize, dequantize, rtn_quantize, QuantSpec};

pub const EPS_BITS: [u8; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub config_digest: String,
    pub n_tokens: usize,
    pub top_k: usize,
    /// `phi[l][i]`: fraction of tokens routed to expert `i`; sums to `top_k`.
    pub phi: Vec<Vec<f32>>,
    /// `w[l][i]`: routing weight received per token; sums to 1.
    pub w: Vec<Vec<f32>>,
    /// `eps[l][i][b - 1]`: output error with only expert `i` quantized to `b` bits.
    pub eps: Vec<Vec<Vec<f32>>>,
    /// Same layout as `eps`: `sum diag(H) * dW^2` over the expert's matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian_proxy: Option<Vec<Vec<Vec<f32>>>>,
    pub ratio_median: Vec<f32>,
    /// `ratio_samples[l]`: `w1 / w0` for every calibration token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_samples: Option<Vec<Vec<f32>>>,
}

impl ExpertStats {
    pub fn empty(n_layers: usize, n_experts: usize, top_k: usize) -> Self {
        Self {
            config_digest: String::new(),
            n_tokens: 0,
            top_k,
            phi: vec![vec![0.0; n_experts]; n_layers],
            w: vec![vec![0.0; n_experts]; n_layers],
            eps: vec![vec![vec![0.0; EPS_BITS.len()]; n_experts]; n_layers],
            hessian_proxy: None,
            ratio_median: Vec::new(),
            ratio_samples: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Where the quantization error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EpsTarget {
    /// Residual stream after the last layer.
    #[default]
    FinalHidden,
    /// Output of the perturbed layer only; cheaper.
    LayerOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub group_size: usize,
    pub target: EpsTarget,
    pub keep_ratio_samples: bool,
    pub hessian_proxy: bool,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            group_size: QuantSpec::default().group_size,
            target: EpsTarget::FinalHidden,
            keep_ratio_samples: true,
            hessian_proxy: true,
        }
    }
}

fn check_calib(model: &MoEModel, calib: &[Vec<u32>]) -> Result<()> {
    if calib.is_empty() || calib.iter().all(Vec::is_empty) {
        return arg_err("calibration set is empty");
    }
    if let Some(i) = calib.iter().position(Vec::is_empty) {
        return arg_err(format!("calibration sequence {i} is empty"));
    }
    let vocab = model.config.vocab;
    if let Some(t) = calib.iter().flatten().find(|&&t| t as usize >= vocab) {
        return arg_err(format!("token id {t} out of vocabulary (size {vocab})"));
    }
    Ok(())
}

/// `phi`, `w` and routing ratios from dense forward passes; `eps` is left zero.
pub fn collect_routing_stats(model: &MoEModel, calib: &[Vec<u32>]) -> Result<ExpertStats> {
    check_calib(model, calib)?;
    let cfg = &model.config;
    struct Part {
        counts: Vec<Vec<u64>>,
        mass: Vec<Vec<f64>>,
        ratios: Vec<Vec<f32>>,
    }
    let parts = calib
        .par_iter()
        .map(|seq| {
            let trace = model.forward(seq, ForwardMode::Dense)?;
            let mut p = Part {
                counts: vec![vec![0; cfg.n_experts]; cfg.n_layers],
                mass: vec![vec![0.0; cfg.n_experts]; cfg.n_layers],
                ratios: vec![Vec::new(); cfg.n_layers],
            };
            for (l, lt) in trace.layers.iter().enumerate() {
                for r in &lt.routes {
                    for (&e, &wt) in r.experts.iter().zip(&r.weights) {
                        p.counts[l][e] += 1;
                        p.mass[l][e] += wt as f64;
                    }
                }
                p.ratios[l].extend(lt.ratios());
            }
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_tokens: usize = calib.iter().map(Vec::len).sum();
    let mut counts = vec![vec![0u64; cfg.n_experts]; cfg.n_layers];
    let mut mass = vec![vec![0f64; cfg.n_experts]; cfg.n_layers];
    let mut ratios: Vec<Vec<f32>> = vec![Vec::new(); cfg.n_layers];
    for p in parts {
        for l in 0..cfg.n_layers {
            for e in 0..cfg.n_experts {
                counts[l][e] += p.counts[l][e];
                mass[l][e] += p.mass[l][e];
            }
            ratios[l].extend_from_slice(&p.ratios[l]);
        }
    }
    let n = n_tokens as f64;
    let ratio_median = if cfg.top_k >= 2 {
        ratios.iter().map(|r| median(r)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut stats = ExpertStats::empty(cfg.n_layers, cfg.n_experts, cfg.top_k);
    stats.config_digest = model.digest();
    stats.n_tokens = n_tokens;
    stats.phi = counts
        .iter()
        .map(|row| row.iter().map(|&c| (c as f64 / n) as f32).collect())
        .collect();
    stats.w = mass
        .iter()
        .map(|row| row.iter().map(|&m| (m / n) as f32).collect())
        .collect();
    stats.ratio_median = ratio_median;
    stats.ratio_samples = (cfg.top_k >= 2).then_some(ratios);
    Ok(stats)
}

/// The expert after a quantize-dequantize round trip at `bits`
/// (sign binarization at 1 bit, RTN at 2-4, unchanged at 16).
pub fn quantized_expert(e: &ExpertWeights, bits: u8, group_size: usize) -> Result<ExpertWeights> {
    let spec = QuantSpec { group_size, ..QuantSpec::default().with_bits(bits) };
    spec.validate()?;
    let q = |m: &Matrix| -> Result<Matrix> {
        match bits {
            16 => Ok(m.clone()),
            1 => dequantize(&binarize(m)),
            _ => dequantize(&rtn_quantize(m, &spec)?),
        }
    };
    Ok(ExpertWeights { w_gate: q(&e.w_gate)?, w_up: q(&e.w_up)?, w_down: q(&e.w_down)? })
}

/// Dense residual streams per sequence, reused across perturbations.
struct Reference {
    checkpoints: Vec<Vec<Matrix>>,
}

impl Reference {
    fn new(model: &MoEModel, calib: &[Vec<u32>]) -> Result<Self> {
        let checkpoints = calib
            .par_iter()
            .map(|s| model.residual_checkpoints(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { checkpoints })
    }

    fn eps(
        &self,
        model: &MoEModel,
        layer: usize,
        expert: usize,
        bits: u8,
        opts: &ProfileOptions,
    ) -> Result<f64> {
        let mut perturbed = model.layers[layer].clone();
        perturbed.experts[expert] =
            quantized_expert(&model.layers[layer].experts[expert], bits, opts.group_size)?;
        let (stop, reference) = match opts.target {
            EpsTarget::FinalHidden => (None, model.layers.len()),
            EpsTarget::LayerOutput => (Some(layer), layer + 1),
        };
        let mut total = 0f64;
        for ck in &self.checkpoints {
            let out = model.forward_from(layer, ck[layer].clone(), Some(&perturbed), stop)?;
            total += out.frobenius_distance(&ck[reference])?;
        }
        Ok(total / self.checkpoints.len() as f64)
    }
}

fn check_indices(model: &MoEModel, layer: usize, expert: usize) -> Result<()> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || expert >= cfg.n_experts {
        return arg_err(format!(
            "expert ({layer}, {expert}) out of range for {} layers of {} experts",
            cfg.n_layers, cfg.n_experts
        ));
    }
    Ok(())
}

/// Mean over sequences of `|F(model) - F(model with one expert quantized)|_F`.
pub fn quantization_error_eps(
    model: &MoEModel,
    calib: &[Vec<u32>],
    layer: usize,
    expert: usize,
    bits: u8,
    opts: &ProfileOptions,
) -> Result<f64> {
    check_indices(model, layer, expert)?;
    check_calib(model, calib)?;
    Reference::new(model, calib)?.eps(model, layer, expert, bits, opts)
}

/// Per-column `sum x^2` and row count for each expert's two input streams.
#[derive(Default)]
struct ExpertDiag {
    input: Vec<Vec<(Vec<f64>, usize)>>,
    hidden: Vec<Vec<(Vec<f64>, usize)>>,
}

fn accumulate(slot: &mut (Vec<f64>, usize), x: &Matrix) {
    if slot.0.is_empty() {
        slot.0 = vec![0.0; x.cols()];
    }
    for r in 0..x.rows() {
        for (acc, &v) in slot.0.iter_mut().zip(x.row(r)) {
            *acc += v as f64 * v as f64;
        }
    }
    slot.1 += x.rows();
}

impl ExpertDiag {
    fn new(n_layers: usize, n_experts: usize) -> Self {
        let blank = vec![vec![(Vec::new(), 0usize); n_experts]; n_layers];
        Self { input: blank.clone(), hidden: blank }
    }

    fn merge(&mut self, other: ExpertDiag) {
        for (mine, theirs) in [(&mut self.input, other.input), (&mut self.hidden, other.hidden)] {
            for (ml, tl) in mine.iter_mut().zip(theirs) {
                for (m, t) in ml.iter_mut().zip(tl) {
                    if m.0.is_empty() {
                        *m = t;
                    } else if !t.0.is_empty() {
                        m.0.iter_mut().zip(&t.0).for_each(|(a, b)| *a += b);
                        m.1 += t.1;
                    }
                }
            }
        }
    }

    /// `diag(2 X^T X / n)`, or ones when the expert saw no tokens.
    fn diag(slot: &(Vec<f64>, usize), dim: usize) -> Vec<f64> {
        if slot.1 == 0 {
            return vec![1.0; dim];
        }
        slot.0.iter().map(|&s| 2.0 * s / slot.1 as f64).collect()
    }
}

impl ForwardObserver for ExpertDiag {
    fn expert_input(&mut self, layer: usize, expert: usize, x: &Matrix) {
        accumulate(&mut self.input[layer][expert], x);
    }
    fn expert_hidden(&mut self, layer: usize, expert: usize, act: &Matrix) {
        accumulate(&mut self.hidden[layer][expert], act);
    }
}

fn weighted_sq_error(w: &Matrix, wq: &Matrix, diag: &[f64]) -> f64 {
    (0..w.rows())
        .map(|r| {
            let d: f64 = w.row(r).iter().zip(wq.row(r)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            diag[r] * d
        })
        .sum()
}

fn hessian_proxy(
    model: &MoEModel,
    calib: &[Vec<u32>],
    opts: &ProfileOptions,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let cfg = &model.config;
    let parts = calib
        .par_iter()
        .map(|seq| {
            let mut d = ExpertDiag::new(cfg.n_layers, cfg.n_experts);
            model.forward_observed(seq, ForwardMode::Dense, &mut d)?;
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut diag = ExpertDiag::new(cfg.n_layers, cfg.n_experts);
    for p in parts {
        diag.merge(p);
    }
    let jobs: Vec<(usize, usize)> =
        (0..cfg.n_layers).flat_map(|l| (0..cfg.n_experts).map(move |e| (l, e))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(l, e)| {
            let ex = &model.layers[l].experts[e];
            let din = ExpertDiag::diag(&diag.input[l][e], cfg.hidden);
            let dhid = ExpertDiag::diag(&diag.hidden[l][e], cfg.intermediate);
            EPS_BITS
                .iter()
                .map(|&b| {
                    let q = quantized_expert(ex, b, opts.group_size)?;
                    let v = weighted_sq_error(&ex.w_gate, &q.w_gate, &din)
                        + weighted_sq_error(&ex.w_up, &q.w_up, &din)
                        + weighted_sq_error(&ex.w_down, &q.w_down, &dhid);
                    Ok(v as f32)
                })
                .collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.chunks(cfg.n_experts).map(<[_]>::to_vec).collect())
}

/// Routing statistics plus `eps` for every layer, expert and bit-width.
pub fn collect_all(model: &MoEModel, calib: &[Vec<u32>], opts: &ProfileOptions) -> Result<ExpertStats> {
    let mut stats = collect_routing_stats(model, calib)?;
    let cfg = &model.config;
    let reference = Reference::new(model, calib)?;
    let jobs: Vec<(usize, usize, u8)> = (0..cfg.n_layers)
        .flat_map(|l| (0..cfg.n_experts).flat_map(move |e| EPS_BITS.map(|b| (l, e, b))))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(l, e, b)| reference.eps(model, l, e, b, opts).map(|v| v as f32))
        .collect::<Result<Vec<_>>>()?;
    stats.eps = values
        .chunks(cfg.n_experts * EPS_BITS.len())
        .map(|layer| layer.chunks(EPS_BITS.len()).map(<[_]>::to_vec).collect())
        .collect();
    if opts.hessian_proxy {
        stats.hessian_proxy = Some(hessian_proxy(model, calib, opts)?);
    }
    if !opts.keep_ratio_samples {
        stats.ratio_samples = None;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::SeededRng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            intermediate: 32,
            n_experts: 4,
            top_k: 2,
            vocab: 48,
        }
    }

    fn setup(seed: u64) -> (MoEModel, Vec<Vec<u32>>) {
        let mut rng = SeededRng::new(seed);
        let model = MoEModel::gen_synthetic(&cfg(), &mut rng).unwrap();
        let calib = (0..6).map(|_| (0..10).map(|_| rng.below(48) as u32).collect()).collect();
        (model, calib)
    }

    #[test]
    fn routing_sums_and_counts() {
        let (model, calib) = setup(71);
        let stats = collect_routing_stats(&model, &calib).unwrap();
        assert_eq!(stats.n_tokens, 60);
        // Independent accumulation straight from traces.
        let mut phi = vec![vec![0f64; 4]; 2];
        let mut w = vec![vec![0f64; 4]; 2];
        for seq in &calib {
            let tr = model.forward(seq, ForwardMode::Dense).unwrap();
            for (l, lt) in tr.layers.iter().enumerate() {
                for r in &lt.routes {
                    for (&e, &wt) in r.experts.iter().zip(&r.weights) {
                        phi[l][e] += 1.0 / 60.0;
                        w[l][e] += wt as f64 / 60.0;
                    }
                }
            }
        }
        for l in 0..2 {
            let s_phi: f64 = stats.phi[l].iter().map(|&v| v as f64).sum();
            let s_w: f64 = stats.w[l].iter().map(|&v| v as f64).sum();
            assert!((s_phi - 2.0).abs() < 1e-6 && (s_w - 1.0).abs() < 1e-6);
            for e in 0..4 {
                assert!((stats.phi[l][e] as f64 - phi[l][e]).abs() < 1e-6);
                assert!((stats.w[l][e] as f64 - w[l][e]).abs() < 1e-6);
            }
            let samples = &stats.ratio_samples.as_ref().unwrap()[l];
            assert_eq!(samples.len(), 60);
            assert!(samples.iter().all(|&r| r > 0.0 && r <= 1.0));
        }
    }

    #[test]
    fn zero_gate_routes_to_lowest_indices() {
        let (mut model, calib) = setup(72);
        for layer in &mut model.layers {
            layer.gate = Matrix::zeros(16, 4);
        }
        let stats = collect_routing_stats(&model, &calib).unwrap();
        assert_eq!(stats.phi[0], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(stats.w[1], vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn empty_calibration_rejected() {
        let (model, _) = setup(73);
        assert!(collect_routing_stats(&model, &[]).is_err());
        assert!(collect_routing_stats(&model, &[vec![]]).is_err());
        assert!(quantization_error_eps(&model, &[vec![1]], 2, 0, 2, &Default::default()).is_err());
    }

    #[test]
    fn eps_zero_on_grid_and_at_sixteen_bits() {
        let (mut model, calib) = setup(74);
        let opts = ProfileOptions::default();
        assert_eq!(quantization_error_eps(&model, &calib, 0, 1, 16, &opts).unwrap(), 0.0);
        let on_grid = quantized_expert(&model.layers[1].experts[2], 3, opts.group_size).unwrap();
        model.layers[1].experts[2] = on_grid;
        let e = quantization_error_eps(&model, &calib, 1, 2, 3, &opts).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn eps_deterministic_and_order_insensitive() {
        let (model, calib) = setup(75);
        let opts = ProfileOptions::default();
        let a = quantization_error_eps(&model, &calib, 0, 0, 2, &opts).unwrap();
        let b = quantization_error_eps(&model, &calib, 0, 0, 2, &opts).unwrap();
        assert_eq!(a, b);
        let mut rev = calib.clone();
        rev.reverse();
        let c = quantization_error_eps(&model, &rev, 0, 0, 2, &opts).unwrap();
        assert!((a - c).abs() <= 1e-5 * a.max(1.0));
    }

    #[test]
    fn layer_output_target_runs() {
        let (model, calib) = setup(76);
        let opts = ProfileOptions { target: EpsTarget::LayerOutput, ..Default::default() };
        let e = quantization_error_eps(&model, &calib, 1, 3, 1, &opts).unwrap();
        let f = quantization_error_eps(&model, &calib, 1, 3, 1, &ProfileOptions::default()).unwrap();
        // The last layer's output is the final hidden state.
        assert_eq!(e, f);
    }

    #[test]
    fn collect_all_shapes_and_round_trip() {
        let (model, calib) = setup(77);
        let stats = collect_all(&model, &calib, &ProfileOptions::default()).unwrap();
        assert_eq!(stats.eps.len(), 2);
        assert!(stats.eps.iter().all(|l| l.len() == 4 && l.iter().all(|e| e.len() == 3)));
        assert!(stats.eps.iter().flatten().flatten().all(|&v| v >= 0.0));
        let proxy = stats.hessian_proxy.as_ref().unwrap();
        assert!(proxy.iter().flatten().all(|e| e[0] >= e[1] && e[1] >= e[2]));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        stats.write_json(&path).unwrap();
        assert_eq!(ExpertStats::read_json(&path).unwrap(), stats);
    }

    #[test]
    fn eps_decreases_with_bits_on_average() {
        let mut ordered = 0;
        for seed in 0..20 {
            let (model, calib) = setup(1000 + seed);
            let stats = collect_all(&model, &calib, &ProfileOptions { hessian_proxy: false, ..Default::default() }).unwrap();
            let mean = |b: usize| -> f64 {
                stats.eps.iter().flatten().map(|e| e[b] as f64).sum::<f64>() / 8.0
            };
            if mean(0) >= mean(1) && mean(1) >= mean(2) {
                ordered += 1;
            }
        }
        assert_eq!(ordered, 20);
    }
}
