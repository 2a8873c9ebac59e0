//! Evaluation and accounting: perplexity, storage size, activated bytes per
//! token, pruning FLOPs, corpora and report files.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::model::{ForwardMode, ModelConfig, MoEModel, TensorRole};
use crate::numerics::{softmax_in_place, SeededRng};
use crate::pruner::{Decision, PruneMode, PruningPolicy};
use crate::quantizer::{QuantizedModel, METADATA_BITS, PASSTHROUGH_BITS};

pub type Corpus = Vec<Vec<u32>>;

// ---------------------------------------------------------------------------
// corpora

/// Uniformly random token ids.
pub fn random_corpus(vocab: usize, n_seqs: usize, len: usize, rng: &mut SeededRng) -> Corpus {
    (0..n_seqs).map(|_| (0..len).map(|_| rng.below(vocab) as u32).collect()).collect()
}

/// Sequences sampled autoregressively from `model` (first token uniform).
/// Gives a held-out set whose statistics match the model's own predictions.
pub fn sample_corpus(
    model: &MoEModel,
    n_seqs: usize,
    len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Corpus> {
    if len == 0 || temperature <= 0.0 {
        return arg_err("sampling needs a positive length and temperature");
    }
    let base = SeededRng::new(seed);
    (0..n_seqs)
        .into_par_iter()
        .map(|s| {
            let mut rng = base.fork(s as u64);
            let mut seq = vec![rng.below(model.config.vocab) as u32];
            while seq.len() < len {
                let trace = model.forward(&seq, ForwardMode::Dense)?;
                let last = trace.logits.row(seq.len() - 1);
                let mut probs: Vec<f32> =
                    last.iter().map(|&v| (v as f64 / temperature) as f32).collect();
                softmax_in_place(&mut probs);
                seq.push(rng.categorical(&probs) as u32);
            }
            Ok(seq)
        })
        .collect()
}

pub fn write_corpus_text(path: &Path, corpus: &[Vec<u32>]) -> Result<()> {
    let mut out = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus_text(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::Format(format!("{}:{}: bad token id '{tok}'", path.display(), i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Each sequence is a `u32` LE length followed by that many `u32` LE ids.
pub fn write_corpus_binary(path: &Path, corpus: &[Vec<u32>]) -> Result<()> {
    let mut out = Vec::new();
    for seq in corpus {
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for t in seq {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus_binary(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path)?;
    let mut words = bytes.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: length not a multiple of 4", path.display())));
    }
    let mut corpus = Vec::new();
    while let Some(n) = words.next() {
        let seq: Vec<u32> = words.by_ref().take(n as usize).collect();
        if seq.len() != n as usize {
            return Err(Error::Format(format!("{}: truncated sequence", path.display())));
        }
        corpus.push(seq);
    }
    Ok(corpus)
}

/// Binary when the extension is `.bin`, text otherwise.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    if path.extension().is_some_and(|e| e == "bin") {
        read_corpus_binary(path)
    } else {
        read_corpus_text(path)
    }
}

pub fn write_corpus(path: &Path, corpus: &[Vec<u32>]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "bin") {
        write_corpus_binary(path, corpus)
    } else {
        write_corpus_text(path, corpus)
    }
}

// ---------------------------------------------------------------------------
// perplexity

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneStats {
    pub layer: usize,
    pub tokens: usize,
    pub pruned: usize,
    pub dropped: usize,
    pub protected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Digest of the weights that were evaluated.
    pub model_digest: String,
    pub perplexity: f64,
    pub nll_sum: f64,
    pub predictions: usize,
    pub tokens: usize,
    /// `invocations[l][e]`: tokens that actually ran expert `e` in layer `l`.
    pub invocations: Vec<Vec<u64>>,
    /// Invocations a dense top-k forward performs on the same tokens.
    pub dense_invocations: u64,
    pub layers: Vec<LayerPruneStats>,
}

impl Evaluation {
    pub fn total_invocations(&self) -> u64 {
        self.invocations.iter().flatten().sum()
    }

    /// `1 - invocations(pruned) / invocations(dense)`.
    pub fn invocation_reduction(&self) -> f64 {
        if self.dense_invocations == 0 {
            return 0.0;
        }
        1.0 - self.total_invocations() as f64 / self.dense_invocations as f64
    }
}

fn log_softmax_at(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = logits.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    logits[target] as f64 - lse
}

/// Teacher-forced evaluation with natural-log perplexity and pruning counts.
pub fn evaluate(model: &MoEModel, corpus: &[Vec<u32>], policy: &PruningPolicy) -> Result<Evaluation> {
    let cfg = &model.config;
    let predictions: usize = corpus.iter().map(|s| s.len().saturating_sub(1)).sum();
    if predictions == 0 {
        return arg_err("evaluation corpus has no next-token predictions");
    }
    let mode = if policy.mode == PruneMode::Off {
        ForwardMode::Dense
    } else {
        ForwardMode::Pruned(policy)
    };
    struct Part {
        nll: f64,
        inv: Vec<Vec<u64>>,
        layers: Vec<LayerPruneStats>,
    }
    let parts = corpus
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|seq| {
            let trace = model.forward(seq, mode)?;
            let mut nll = 0f64;
            for t in 0..seq.len() - 1 {
                nll -= log_softmax_at(trace.logits.row(t), seq[t + 1] as usize);
            }
            let mut inv = vec![vec![0u64; cfg.n_experts]; cfg.n_layers];
            let mut layers = Vec::with_capacity(cfg.n_layers);
            for (l, lt) in trace.layers.iter().enumerate() {
                for (r, d) in lt.routes.iter().zip(&lt.decisions) {
                    for &e in &r.experts[..d.invoked(r.experts.len())] {
                        inv[l][e] += 1;
                    }
                }
                let count = |want: Decision| lt.decisions.iter().filter(|&&d| d == want).count();
                layers.push(LayerPruneStats {
                    layer: l,
                    tokens: seq.len(),
                    pruned: count(Decision::DropSecond),
                    dropped: count(Decision::DropAll),
                    protected: lt.prune.as_ref().map_or(0, |p| p.protected.len()),
                });
            }
            Ok(Part { nll, inv, layers })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut nll_sum = 0f64;
    let mut invocations = vec![vec![0u64; cfg.n_experts]; cfg.n_layers];
    let mut layers: Vec<LayerPruneStats> =
        (0..cfg.n_layers).map(|layer| LayerPruneStats { layer, ..Default::default() }).collect();
    for p in parts {
        nll_sum += p.nll;
        for l in 0..cfg.n_layers {
            for e in 0..cfg.n_experts {
                invocations[l][e] += p.inv[l][e];
            }
            let (acc, s) = (&mut layers[l], &p.layers[l]);
            acc.tokens += s.tokens;
            acc.pruned += s.pruned;
            acc.dropped += s.dropped;
            acc.protected += s.protected;
        }
    }
    let tokens: usize = corpus.iter().map(Vec::len).sum();
    Ok(Evaluation {
        model_digest: model.digest(),
        perplexity: (nll_sum / predictions as f64).exp(),
        nll_sum,
        predictions,
        tokens,
        invocations,
        dense_invocations: (tokens * cfg.n_layers * cfg.top_k) as u64,
        layers,
    })
}

pub fn perplexity(model: &MoEModel, corpus: &[Vec<u32>], policy: &PruningPolicy) -> Result<f64> {
    Ok(evaluate(model, corpus, policy)?.perplexity)
}

// ---------------------------------------------------------------------------
// size accounting

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSize {
    pub name: String,
    pub elements: u64,
    pub bits: u8,
    /// Packed payload plus quantizer parameters.
    pub stored_bits: u64,
    pub payload_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub tensors: Vec<TensorSize>,
    pub total_elements: u64,
    pub total_bits: u64,
    pub total_bytes: f64,
    pub avg_bits_overall: f64,
    /// Stored bits of expert tensors over their element count.
    pub avg_bits_experts: f64,
    /// Expert code bits only; equals the allocation's mean width.
    pub avg_payload_bits_experts: f64,
}

fn summarize(tensors: Vec<TensorSize>, is_expert: impl Fn(&str) -> bool) -> SizeReport {
    let total_elements: u64 = tensors.iter().map(|t| t.elements).sum();
    let total_bits: u64 = tensors.iter().map(|t| t.stored_bits).sum();
    let experts: Vec<&TensorSize> = tensors.iter().filter(|t| is_expert(&t.name)).collect();
    let e_elems: u64 = experts.iter().map(|t| t.elements).sum();
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    SizeReport {
        total_elements,
        total_bits,
        total_bytes: total_bits as f64 / 8.0,
        avg_bits_overall: ratio(total_bits, total_elements),
        avg_bits_experts: ratio(experts.iter().map(|t| t.stored_bits).sum(), e_elems),
        avg_payload_bits_experts: ratio(experts.iter().map(|t| t.payload_bits).sum(), e_elems),
        tensors,
    }
}

fn is_expert_name(name: &str) -> bool {
    name.contains(".experts.")
}

/// Sizes read off a quantized container.
pub fn size_accounting(qm: &QuantizedModel) -> SizeReport {
    let tensors = qm
        .tensors
        .iter()
        .map(|(name, qt)| TensorSize {
            name: name.clone(),
            elements: qt.element_count() as u64,
            bits: qt.bits,
            stored_bits: qt.stored_bits(),
            payload_bits: qt.payload_bits(),
        })
        .collect();
    summarize(tensors, is_expert_name)
}

/// Bit-widths for a model that need not exist in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    /// `expert_bits[l][e]`.
    pub expert_bits: Vec<Vec<u8>>,
    /// Attention, router and output head.
    pub non_expert_bits: u8,
    pub embedding_bits: u8,
    pub norm_bits: u8,
    /// `None` charges no quantizer parameters.
    pub group_size: Option<usize>,
}

impl BitPlan {
    pub fn uniform(cfg: &ModelConfig, bits: u8) -> Self {
        Self {
            expert_bits: vec![vec![bits; cfg.n_experts]; cfg.n_layers],
            non_expert_bits: bits,
            embedding_bits: bits,
            norm_bits: bits,
            group_size: None,
        }
    }

    /// The widths `quantize_model` would use.
    pub fn matching_quantizer(expert_bits: Vec<Vec<u8>>, non_expert_bits: u8, group_size: usize) -> Self {
        Self { expert_bits, non_expert_bits, embedding_bits: 16, norm_bits: 16, group_size: Some(group_size) }
    }
}

fn planned_bits(rows: usize, cols: usize, bits: u8, group_size: Option<usize>) -> (u64, u64) {
    let n = (rows * cols) as u64;
    let payload = n * if bits == 16 { PASSTHROUGH_BITS } else { bits as u64 };
    let meta = match (bits, group_size) {
        (16, _) | (_, None) => 0,
        (1, Some(_)) => METADATA_BITS,
        (_, Some(g)) => 2 * METADATA_BITS * (rows.div_ceil(g) * cols) as u64,
    };
    (payload + meta, payload)
}

/// Closed-form sizes from a config and a bit plan.
pub fn analytic_size_accounting(cfg: &ModelConfig, plan: &BitPlan) -> Result<SizeReport> {
    cfg.validate()?;
    if plan.expert_bits.len() != cfg.n_layers || plan.expert_bits.iter().any(|l| l.len() != cfg.n_experts) {
        return Err(Error::Shape("bit plan does not match the model's expert grid".into()));
    }
    let (h, i, v) = (cfg.hidden, cfg.intermediate, cfg.vocab);
    let mut tensors = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, bits: u8| {
        let (stored, payload) = planned_bits(rows, cols, bits, plan.group_size);
        tensors.push(TensorSize {
            name,
            elements: (rows * cols) as u64,
            bits,
            stored_bits: stored,
            payload_bits: payload,
        });
    };
    push("embed".into(), v, h, plan.embedding_bits);
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        push(format!("{p}.attn_norm"), 1, h, plan.norm_bits);
        for m in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.{m}"), h, h, plan.non_expert_bits);
        }
        push(format!("{p}.moe_norm"), 1, h, plan.norm_bits);
        push(format!("{p}.gate"), h, cfg.n_experts, plan.non_expert_bits);
        for e in 0..cfg.n_experts {
            let b = plan.expert_bits[l][e];
            push(format!("{p}.experts.{e}.w_gate"), h, i, b);
            push(format!("{p}.experts.{e}.w_up"), h, i, b);
            push(format!("{p}.experts.{e}.w_down"), i, h, b);
        }
    }
    push("final_norm".into(), 1, h, plan.norm_bits);
    push("head".into(), h, v, plan.non_expert_bits);
    Ok(summarize(tensors, is_expert_name))
}

// ---------------------------------------------------------------------------
// activated parameters

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub mean_activated_bytes_per_token: f64,
    pub invocation_reduction: f64,
}

/// Per-token activated bytes: every non-expert tensor except the embedding
/// table, one embedding row, and the experts each token actually invoked.
/// `sizes` must describe the weights that `eval` ran.
pub fn activation_accounting(
    eval: &Evaluation,
    sizes: &SizeReport,
    sizes_digest: &str,
    cfg: &ModelConfig,
) -> Result<ActivationReport> {
    if eval.model_digest != sizes_digest {
        return arg_err(format!(
            "evaluation ran weights {} but sizes describe {}",
            eval.model_digest, sizes_digest
        ));
    }
    if eval.tokens == 0 {
        return arg_err("evaluation covered no tokens");
    }
    let mut always = 0f64;
    let mut expert_bits = vec![vec![0f64; cfg.n_experts]; cfg.n_layers];
    for t in &sizes.tensors {
        if let Some((l, e)) = parse_expert(&t.name) {
            expert_bits[l][e] += t.stored_bits as f64;
        } else if t.name == "embed" {
            always += t.stored_bits as f64 / cfg.vocab as f64;
        } else {
            always += t.stored_bits as f64;
        }
    }
    let mut invoked = 0f64;
    for (l, row) in eval.invocations.iter().enumerate() {
        for (e, &n) in row.iter().enumerate() {
            invoked += n as f64 * expert_bits[l][e];
        }
    }
    Ok(ActivationReport {
        mean_activated_bytes_per_token: (always + invoked / eval.tokens as f64) / 8.0,
        invocation_reduction: eval.invocation_reduction(),
    })
}

fn parse_expert(name: &str) -> Option<(usize, usize)> {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("layers"), Some(l), Some("experts"), Some(e)) => Some((l.parse().ok()?, e.parse().ok()?)),
        _ => None,
    }
}

/// Role lookup shared by callers that only have tensor names.
pub fn tensor_role(name: &str) -> Option<TensorRole> {
    if let Some((layer, expert)) = parse_expert(name) {
        return Some(TensorRole::Expert { layer, expert });
    }
    match name {
        "embed" => Some(TensorRole::Embedding),
        "head" => Some(TensorRole::Head),
        "final_norm" => Some(TensorRole::Norm),
        _ => {
            let mut parts = name.split('.');
            let (Some("layers"), Some(l), Some(t)) = (parts.next(), parts.next(), parts.next()) else {
                return None;
            };
            let layer = l.parse().ok()?;
            match t {
                "attn_norm" | "moe_norm" => Some(TensorRole::Norm),
                "wq" | "wk" | "wv" | "wo" => Some(TensorRole::Attention { layer }),
                "gate" => Some(TensorRole::Gate { layer }),
                _ => None,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// FLOPs

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub importance_flops: f64,
    pub expert_flops_saved: f64,
    pub ratio: f64,
}

/// Expected expert invocations skipped per token under `policy`, assuming
/// half of the unprotected tokens fall below the median threshold.
pub fn expected_skips_per_token(policy: &PruningPolicy) -> f64 {
    match policy.mode {
        PruneMode::Off => 0.0,
        PruneMode::WeightOnly => 0.5,
        PruneMode::Protected => 0.5 * (1.0 - policy.p),
        PruneMode::FullDrop => {
            let r = policy.full_drop_ratio;
            0.5 * (1.0 - policy.p - r).max(0.0) + 2.0 * r
        }
    }
}

/// Importance cost `n^2 + n + m n + n log2 n` against the expert work
/// avoided, `skips * n * (2 m m1 + 2 m1^2 + 2 m1 m)`, for sequence length
/// `n`, hidden size `m` and expert width `m1`.
pub fn flops_estimate(n: usize, m: usize, m1: usize, skips_per_token: f64) -> FlopsEstimate {
    let (n, m, m1) = (n as f64, m as f64, m1 as f64);
    let importance = n * n + n + m * n + n * n.log2();
    let saved = skips_per_token * n * (2.0 * m * m1 + 2.0 * m1 * m1 + 2.0 * m1 * m);
    FlopsEstimate {
        importance_flops: importance,
        expert_flops_saved: saved,
        ratio: if importance > 0.0 { saved / importance } else { f64::INFINITY },
    }
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub strategy: String,
    pub k: f64,
    pub avg_bits_overall: f64,
    pub avg_bits_experts: f64,
    pub avg_payload_bits_experts: f64,
    pub total_bytes: f64,
    pub mean_activated_bytes_per_token: f64,
    pub invocation_reduction: f64,
    pub perplexity: f64,
    pub prune_mode: PruneMode,
    pub layers: Vec<LayerPruneStats>,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitsRow {
    pub strategy: String,
    pub k: f64,
    pub avg_bits: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionRow {
    pub p: f64,
    pub invocation_reduction: f64,
    pub perplexity: f64,
}

pub const REPORT_FILE: &str = "report.json";
pub const BITS_CSV: &str = "ppl_vs_bits.csv";
pub const PROTECTION_CSV: &str = "reduction_vs_protection.csv";

/// Writes the JSON report and, when non-empty, the two CSV series.
pub fn emit_report(
    dir: &Path,
    report: &RunReport,
    bits_rows: &[BitsRow],
    protection_rows: &[ProtectionRow],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(report)?)?;
    if !bits_rows.is_empty() {
        write_csv(&dir.join(BITS_CSV), bits_rows)?;
    }
    if !protection_rows.is_empty() {
        write_csv(&dir.join(PROTECTION_CSV), protection_rows)?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join(REPORT_FILE))?)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Evaluates `model` at each protection ratio in `ps`, other policy fields fixed.
pub fn protection_sweep(
    model: &MoEModel,
    corpus: &[Vec<u32>],
    base: &PruningPolicy,
    ps: &[f64],
) -> Result<Vec<ProtectionRow>> {
    ps.iter()
        .map(|&p| {
            let policy = PruningPolicy { p, ..base.clone() };
            let ev = evaluate(model, corpus, &policy)?;
            Ok(ProtectionRow { p, invocation_reduction: ev.invocation_reduction(), perplexity: ev.perplexity })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::BitAllocation;
    use crate::numerics::Matrix;
    use crate::pruner::calibrate_mu;
    use crate::profiler::collect_routing_stats;
    use crate::quantizer::{quantize_model, QuantizeOptions};

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, hidden: 16, n_heads: 2, intermediate: 32, n_experts: 4, top_k: 2, vocab: 40 }
    }

    fn setup(seed: u64) -> (MoEModel, Corpus) {
        let mut rng = SeededRng::new(seed);
        let model = MoEModel::gen_synthetic(&cfg(), &mut rng).unwrap();
        let corpus = random_corpus(40, 8, 24, &mut rng);
        (model, corpus)
    }

    #[test]
    fn uniform_predictor_has_vocab_perplexity() {
        let c = ModelConfig { vocab: 4, ..cfg() };
        let mut model = MoEModel::gen_synthetic(&c, &mut SeededRng::new(81)).unwrap();
        model.head = Matrix::zeros(16, 4);
        let ppl = perplexity(&model, &[vec![0, 1, 2, 3, 2, 1]], &PruningPolicy::off(2)).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12, "{ppl}");
    }

    #[test]
    fn perplexity_checks() {
        let (model, corpus) = setup(82);
        let off = PruningPolicy::off(2);
        assert!(perplexity(&model, &[], &off).is_err());
        assert!(perplexity(&model, &[vec![1]], &off).is_err());
        let a = perplexity(&model, &corpus, &off).unwrap();
        let mut rev = corpus.clone();
        rev.reverse();
        assert!((a - perplexity(&model, &rev, &off).unwrap()).abs() < 1e-9 * a);

        let alloc = BitAllocation::uniform(&model.digest(), 2, 4, 16);
        let opts = QuantizeOptions { non_expert_bits: 16, ..Default::default() };
        let qm = quantize_model(&model, &alloc, &corpus, &opts).unwrap();
        assert_eq!(perplexity(&qm.to_model().unwrap(), &corpus, &off).unwrap(), a);
    }

    #[test]
    fn sixteen_bit_sizes() {
        let report = analytic_size_accounting(&cfg(), &BitPlan::uniform(&cfg(), 16)).unwrap();
        let model = MoEModel::gen_synthetic(&cfg(), &mut SeededRng::new(83)).unwrap();
        assert_eq!(report.total_elements, model.element_count() as u64);
        assert_eq!(report.total_bytes, 2.0 * model.element_count() as f64);
        assert_eq!(report.avg_bits_overall, 16.0);
    }

    #[test]
    fn container_and_closed_form_agree() {
        let (model, corpus) = setup(84);
        let mut alloc = BitAllocation::uniform(&model.digest(), 2, 4, 2);
        alloc.bits = vec![vec![3, 2, 2, 1], vec![1, 3, 2, 2]];
        let opts = QuantizeOptions::default();
        let qm = quantize_model(&model, &alloc, &corpus, &opts).unwrap();
        let measured = size_accounting(&qm);
        let plan = BitPlan::matching_quantizer(alloc.bits.clone(), 4, opts.spec.group_size);
        let closed = analytic_size_accounting(&cfg(), &plan).unwrap();
        assert_eq!(measured, closed);
        assert_eq!(measured.avg_payload_bits_experts, 2.0);
        assert!(measured.avg_bits_experts > 2.0);
    }

    #[test]
    fn reduction_counts() {
        let (model, corpus) = setup(85);
        let off = evaluate(&model, &corpus, &PruningPolicy::off(2)).unwrap();
        assert_eq!(off.invocation_reduction(), 0.0);
        // mu = 1 drops every unprotected second expert
        let all = PruningPolicy { p: 0.0, ..PruningPolicy::new(PruneMode::WeightOnly, vec![1.0, 1.0]) };
        let ev = evaluate(&model, &corpus, &all).unwrap();
        assert!((ev.invocation_reduction() - 0.5).abs() < 1e-12);

        let stats = collect_routing_stats(&model, &corpus).unwrap();
        let policy = PruningPolicy::new(PruneMode::Protected, calibrate_mu(&stats).unwrap());
        let ev = evaluate(&model, &corpus, &policy).unwrap();
        let r = ev.invocation_reduction();
        assert!((0.0..=0.5).contains(&r));

        let sizes = analytic_size_accounting(&cfg(), &BitPlan::uniform(&cfg(), 16)).unwrap();
        let dense = activation_accounting(&off, &sizes, &model.digest(), &cfg()).unwrap();
        let pruned = activation_accounting(&ev, &sizes, &model.digest(), &cfg()).unwrap();
        assert!(pruned.mean_activated_bytes_per_token < dense.mean_activated_bytes_per_token);
        assert!(activation_accounting(&ev, &sizes, "other", &cfg()).is_err());
    }

    #[test]
    fn flops_plug_in() {
        let f = flops_estimate(1, 64, 128, 0.5);
        assert_eq!(f.importance_flops, 1.0 + 1.0 + 64.0);
        let f = flops_estimate(2048, 4096, 14336, 0.0);
        assert_eq!(f.importance_flops, 2048.0 * 2048.0 + 2048.0 + 4096.0 * 2048.0 + 2048.0 * 11.0);
    }

    #[test]
    fn corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![vec![1, 2, 3], vec![], vec![7; 9]];
        let bin = dir.path().join("c.bin");
        write_corpus(&bin, &corpus).unwrap();
        assert_eq!(read_corpus(&bin).unwrap(), corpus);
        let txt = dir.path().join("c.txt");
        let nonempty = vec![vec![1, 2, 3], vec![7; 9]];
        write_corpus(&txt, &nonempty).unwrap();
        assert_eq!(read_corpus(&txt).unwrap(), nonempty);
        std::fs::write(&txt, "1 2 x\n").unwrap();
        assert!(matches!(read_corpus(&txt), Err(Error::Format(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let (model, _) = setup(86);
        let a = sample_corpus(&model, 3, 12, 1.0, 9).unwrap();
        assert_eq!(a, sample_corpus(&model, 3, 12, 1.0, 9).unwrap());
        assert!(a.iter().all(|s| s.len() == 12 && s.iter().all(|&t| t < 40)));
    }

    #[test]
    fn report_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            config_digest: "abc".into(),
            strategy: "pmq".into(),
            k: 2.0,
            avg_bits_overall: 2.7,
            avg_bits_experts: 2.1,
            avg_payload_bits_experts: 2.0,
            total_bytes: 1234.5,
            mean_activated_bytes_per_token: 99.25,
            invocation_reduction: 0.23,
            perplexity: 31.7,
            prune_mode: PruneMode::Protected,
            layers: vec![LayerPruneStats { layer: 0, tokens: 10, pruned: 4, dropped: 0, protected: 1 }],
            wall_clock_secs: 0.125,
            notes: vec![],
        };
        let bits = vec![
            BitsRow { strategy: "pmq".into(), k: 2.0, avg_bits: 2.0, perplexity: 30.0 },
            BitsRow { strategy: "pmq".into(), k: 2.5, avg_bits: 2.5, perplexity: 28.0 },
        ];
        emit_report(dir.path(), &report, &bits, &[]).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), report);
        assert_eq!(read_csv::<BitsRow>(&dir.path().join(BITS_CSV)).unwrap(), bits);
        assert!(!dir.path().join(PROTECTION_CSV).exists());
    }

    #[test]
    fn protection_sweep_is_monotone() {
        let (model, corpus) = setup(87);
        let stats = collect_routing_stats(&model, &corpus).unwrap();
        let base = PruningPolicy::new(PruneMode::Protected, calibrate_mu(&stats).unwrap());
        let rows = protection_sweep(&model, &corpus, &base, &[0.0, 0.02, 0.05, 0.1]).unwrap();
        assert_eq!(rows.len(), 4);
        for w in rows.windows(2) {
            assert!(w[1].invocation_reduction <= w[0].invocation_reduction, "{rows:?}");
        }
    }

    #[test]
    fn role_lookup() {
        assert_eq!(tensor_role("layers.3.experts.5.w_up"), Some(TensorRole::Expert { layer: 3, expert: 5 }));
        assert_eq!(tensor_role("layers.1.wo"), Some(TensorRole::Attention { layer: 1 }));
        assert_eq!(tensor_role("embed"), Some(TensorRole::Embedding));
        assert_eq!(tensor_role("bogus"), None);
    }
}
