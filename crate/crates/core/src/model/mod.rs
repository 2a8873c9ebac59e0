//! Toy decoder-only MoE transformer: pre-RMS-norm causal attention followed
//! by a top-k routed block of SwiGLU experts. Forward only, no KV cache.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, shape_err, Result};
use crate::numerics::{matmul, softmax_in_place, topk_indices, vecmat, Matrix, SeededRng};
use crate::pruner::{self, Decision, LayerPruneTrace, PruneMode, PruningPolicy, ProtectionScope};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub intermediate: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("intermediate", self.intermediate),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return arg_err(format!("{name} must be at least 1"));
        }
        if self.top_k > self.n_experts {
            return arg_err(format!(
                "top_k {} exceeds expert count {}",
                self.top_k, self.n_experts
            ));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return arg_err(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    /// hidden x intermediate
    pub w_gate: Matrix,
    /// hidden x intermediate
    pub w_up: Matrix,
    /// intermediate x hidden
    pub w_down: Matrix,
}

impl ExpertWeights {
    pub fn matrices(&self) -> [&Matrix; 3] {
        [&self.w_gate, &self.w_up, &self.w_down]
    }

    /// Runs the expert on a batch of rows.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        let act = self.hidden_activation(x)?;
        matmul(&act, &self.w_down)
    }

    /// `silu(x W_gate) * (x W_up)`, the input to `w_down`.
    pub fn hidden_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut a = matmul(x, &self.w_gate)?;
        let b = matmul(x, &self.w_up)?;
        for (av, &bv) in a.data_mut().iter_mut().zip(b.data()) {
            *av = silu(*av) * bv;
        }
        Ok(a)
    }
}

#[inline]
fn silu(x: f32) -> f32 {
    (x as f64 / (1.0 + (-x as f64).exp())) as f32
}

/// Single-token expert evaluation.
pub fn expert_forward(e: &ExpertWeights, x: &[f32]) -> Result<Vec<f32>> {
    let mut a = vecmat(x, &e.w_gate)?;
    let b = vecmat(x, &e.w_up)?;
    for (av, &bv) in a.iter_mut().zip(&b) {
        *av = silu(*av) * bv;
    }
    vecmat(&a, &e.w_down)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub moe_norm: Matrix,
    /// hidden x n_experts
    pub gate: Matrix,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub embeddings: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Matrix,
    pub head: Matrix,
}

/// Router output for one token: selected experts in descending weight order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub experts: Vec<usize>,
    pub weights: Vec<f32>,
}

impl Route {
    /// Second-highest over highest weight, when at least two experts are routed.
    pub fn ratio(&self) -> Option<f32> {
        match self.weights.as_slice() {
            [w0, w1, ..] => Some(w1 / w0),
            _ => None,
        }
    }
}

/// Top-k selection followed by a softmax over only the selected logits.
pub fn route(gate_logits: &[f32], top_k: usize) -> Result<Route> {
    let experts = topk_indices(gate_logits, top_k)?;
    let mut weights: Vec<f32> = experts.iter().map(|&e| gate_logits[e]).collect();
    softmax_in_place(&mut weights);
    Ok(Route { experts, weights })
}

/// Which role a named tensor plays in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Norm,
    Attention { layer: usize },
    Gate { layer: usize },
    Expert { layer: usize, expert: usize },
    Head,
}

impl TensorRole {
    pub fn is_expert(self) -> bool {
        matches!(self, TensorRole::Expert { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub routes: Vec<Route>,
    pub decisions: Vec<Decision>,
    /// Head-averaged causal attention map, query rows by key columns.
    pub attention: Matrix,
    pub prune: Option<LayerPruneTrace>,
}

impl LayerTrace {
    pub fn ratios(&self) -> impl Iterator<Item = f32> + '_ {
        self.routes.iter().filter_map(Route::ratio)
    }

    /// Expert invocations actually performed in this layer.
    pub fn invocations(&self) -> usize {
        self.routes
            .iter()
            .zip(&self.decisions)
            .map(|(r, d)| d.invoked(r.experts.len()))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Residual stream after the last layer (before the final norm).
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn invocations(&self) -> usize {
        self.layers.iter().map(LayerTrace::invocations).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Dense,
    Pruned(&'a PruningPolicy),
}

/// Hooks into intermediate activations, used for Hessian accumulation.
pub trait ForwardObserver {
    fn attention_input(&mut self, _layer: usize, _h: &Matrix) {}
    fn attention_output(&mut self, _layer: usize, _concat: &Matrix) {}
    fn moe_input(&mut self, _layer: usize, _h: &Matrix) {}
    fn expert_input(&mut self, _layer: usize, _expert: usize, _x: &Matrix) {}
    fn expert_hidden(&mut self, _layer: usize, _expert: usize, _act: &Matrix) {}
    fn head_input(&mut self, _h: &Matrix) {}
}

pub struct NoObserver;

impl ForwardObserver for NoObserver {}

fn rms_norm(x: &Matrix, gain: &Matrix) -> Matrix {
    let mut out = x.clone();
    let g = gain.data();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, &gv) in row.iter_mut().zip(g) {
            *v = (*v as f64 * inv) as f32 * gv;
        }
    }
    out
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// Per-forward state threaded through the layers.
pub(crate) struct LayerContext<'a> {
    pub policy: Option<&'a PruningPolicy>,
    pub cached_importance: Option<Vec<f32>>,
}

impl Layer {
    pub(crate) fn forward(
        &self,
        cfg: &ModelConfig,
        layer_idx: usize,
        x: &mut Matrix,
        ctx: &mut LayerContext<'_>,
        obs: &mut dyn ForwardObserver,
    ) -> Result<LayerTrace> {
        let l = x.rows();
        let hd = cfg.head_dim();

        // attention
        let h = rms_norm(x, &self.attn_norm);
        obs.attention_input(layer_idx, &h);
        let q = matmul(&h, &self.wq)?;
        let k = matmul(&h, &self.wk)?;
        let v = matmul(&h, &self.wv)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Matrix::zeros(l, cfg.hidden);
        let mut mean_map = vec![0f64; l * l];
        let keep_head = ctx.policy.and_then(|p| p.attention_head);
        if let Some(head) = keep_head {
            if head >= cfg.n_heads {
                return arg_err(format!("attention head {head} out of range"));
            }
        }
        let mut head_map: Option<Matrix> = None;
        for head in 0..cfg.n_heads {
            let off = head * hd;
            let mut probs = Matrix::zeros(l, l);
            for i in 0..l {
                let qi = &q.row(i)[off..off + hd];
                let row = &mut probs.row_mut(i)[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + hd];
                    let dot: f64 = qi.iter().zip(kj).map(|(&a, &b)| a as f64 * b as f64).sum();
                    *s = (dot * scale) as f32;
                }
                softmax_in_place(row);
                let out = &mut concat.row_mut(i)[off..off + hd];
                let mut acc = vec![0f64; hd];
                for (j, &a) in probs.row(i)[..=i].iter().enumerate() {
                    for (slot, &vv) in acc.iter_mut().zip(&v.row(j)[off..off + hd]) {
                        *slot += a as f64 * vv as f64;
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
            for (m, &p) in mean_map.iter_mut().zip(probs.data()) {
                *m += p as f64;
            }
            if keep_head == Some(head) {
                head_map = Some(probs);
            }
        }
        let attention = Matrix::from_vec(
            l,
            l,
            mean_map.iter().map(|&s| (s / cfg.n_heads as f64) as f32).collect(),
        )?;
        obs.attention_output(layer_idx, &concat);
        let attn_out = matmul(&concat, &self.wo)?;
        add_in_place(x, &attn_out);

        // routing
        let h2 = rms_norm(x, &self.moe_norm);
        obs.moe_input(layer_idx, &h2);
        let gate_logits = matmul(&h2, &self.gate)?;
        let routes = (0..l)
            .map(|t| route(gate_logits.row(t), cfg.top_k))
            .collect::<Result<Vec<_>>>()?;

        let (decisions, prune) = match ctx.policy {
            Some(policy) if policy.mode != PruneMode::Off => {
                let importance = match (policy.scope, &ctx.cached_importance) {
                    (ProtectionScope::OncePerForward, Some(cached)) => cached.clone(),
                    _ => {
                        let map = head_map.as_ref().unwrap_or(&attention);
                        let imp = pruner::token_importance(x, map)?;
                        if policy.scope == ProtectionScope::OncePerForward {
                            ctx.cached_importance = Some(imp.clone());
                        }
                        imp
                    }
                };
                let (d, tr) =
                    pruner::apply_layer_with_importance(policy, layer_idx, importance, &routes)?;
                (d, Some(tr))
            }
            _ => (vec![Decision::KeepBoth; l], None),
        };

        // experts
        let mut slot_out: Vec<Vec<Option<Vec<f32>>>> =
            routes.iter().map(|r| vec![None; r.experts.len()]).collect();
        for (e_idx, expert) in self.experts.iter().enumerate() {
            let mut members: Vec<(usize, usize)> = Vec::new();
            for (t, r) in routes.iter().enumerate() {
                let active = decisions[t].invoked(r.experts.len());
                if let Some(slot) = r.experts[..active].iter().position(|&e| e == e_idx) {
                    members.push((t, slot));
                }
            }
            if members.is_empty() {
                continue;
            }
            let rows: Vec<usize> = members.iter().map(|m| m.0).collect();
            let xin = h2.select_rows(&rows);
            obs.expert_input(layer_idx, e_idx, &xin);
            let act = expert.hidden_activation(&xin)?;
            obs.expert_hidden(layer_idx, e_idx, &act);
            let out = matmul(&act, &expert.w_down)?;
            for (r, &(t, slot)) in members.iter().enumerate() {
                slot_out[t][slot] = Some(out.row(r).to_vec());
            }
        }
        for (t, r) in routes.iter().enumerate() {
            let active = decisions[t].invoked(r.experts.len());
            if active == 0 {
                continue;
            }
            let mut y = vec![0f32; cfg.hidden];
            for slot in 0..active {
                let w = if active == 1 && r.experts.len() > 1 { 1.0 } else { r.weights[slot] };
                let out = slot_out[t][slot].as_ref().expect("expert output computed");
                for (yv, &o) in y.iter_mut().zip(out) {
                    *yv += w * o;
                }
            }
            for (xv, yv) in x.row_mut(t).iter_mut().zip(y) {
                *xv += yv;
            }
        }

        Ok(LayerTrace { routes, decisions, attention, prune })
    }
}

impl MoEModel {
    /// Gaussian weights with standard deviation `1/sqrt(fan_in)` per matrix
    /// and unit norm gains.
    pub fn gen_synthetic(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let std = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();
        let embeddings = rng.gaussian_matrix(config.vocab, h, std(config.vocab));
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = rng.gaussian_matrix(h, h, std(h));
            let wk = rng.gaussian_matrix(h, h, std(h));
            let wv = rng.gaussian_matrix(h, h, std(h));
            let wo = rng.gaussian_matrix(h, h, std(h));
            let gate = rng.gaussian_matrix(h, config.n_experts, std(h));
            let experts = (0..config.n_experts)
                .map(|_| ExpertWeights {
                    w_gate: rng.gaussian_matrix(h, config.intermediate, std(h)),
                    w_up: rng.gaussian_matrix(h, config.intermediate, std(h)),
                    w_down: rng.gaussian_matrix(
                        config.intermediate,
                        h,
                        std(config.intermediate),
                    ),
                })
                .collect();
            layers.push(Layer {
                attn_norm: Matrix::filled(1, h, 1.0),
                wq,
                wk,
                wv,
                wo,
                moe_norm: Matrix::filled(1, h, 1.0),
                gate,
                experts,
            });
        }
        let head = rng.gaussian_matrix(h, config.vocab, std(h));
        Ok(Self {
            config: config.clone(),
            embeddings,
            layers,
            final_norm: Matrix::filled(1, h, 1.0),
            head,
        })
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return arg_err("empty token sequence");
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return arg_err(format!(
                "token id {bad} out of vocabulary (size {})",
                self.config.vocab
            ));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.embeddings.select_rows(&idx))
    }

    pub fn forward(&self, tokens: &[u32], mode: ForwardMode<'_>) -> Result<ForwardTrace> {
        self.forward_observed(tokens, mode, &mut NoObserver)
    }

    pub fn forward_observed(
        &self,
        tokens: &[u32],
        mode: ForwardMode<'_>,
        obs: &mut dyn ForwardObserver,
    ) -> Result<ForwardTrace> {
        let policy = match mode {
            ForwardMode::Dense => None,
            ForwardMode::Pruned(p) => {
                p.validate(self.config.n_layers)?;
                if p.mode != PruneMode::Off && self.config.top_k != 2 {
                    return arg_err(format!(
                        "ratio pruning needs top-2 routing, model routes top-{}",
                        self.config.top_k
                    ));
                }
                Some(p)
            }
        };
        let mut x = self.embed(tokens)?;
        let mut ctx = LayerContext { policy, cached_importance: None };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(layer.forward(&self.config, i, &mut x, &mut ctx, obs)?);
        }
        let logits = self.logits(&x, obs)?;
        Ok(ForwardTrace { layers, hidden: x, logits })
    }

    /// Runs layers `start..` on a residual stream entering layer `start`,
    /// substituting `replacement` for layer `start` when given. Dense mode.
    pub fn forward_from(
        &self,
        start: usize,
        mut x: Matrix,
        replacement: Option<&Layer>,
        stop_after: Option<usize>,
    ) -> Result<Matrix> {
        if start >= self.layers.len() {
            return arg_err(format!("layer {start} out of range"));
        }
        let end = stop_after.map_or(self.layers.len(), |s| (s + 1).min(self.layers.len()));
        let mut ctx = LayerContext { policy: None, cached_importance: None };
        for i in start..end {
            let layer = if i == start { replacement.unwrap_or(&self.layers[i]) } else { &self.layers[i] };
            layer.forward(&self.config, i, &mut x, &mut ctx, &mut NoObserver)?;
        }
        Ok(x)
    }

    /// Residual stream entering each layer, plus the final one.
    pub fn residual_checkpoints(&self, tokens: &[u32]) -> Result<Vec<Matrix>> {
        let mut x = self.embed(tokens)?;
        let mut ctx = LayerContext { policy: None, cached_importance: None };
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(x.clone());
            layer.forward(&self.config, i, &mut x, &mut ctx, &mut NoObserver)?;
        }
        out.push(x);
        Ok(out)
    }

    fn logits(&self, x: &Matrix, obs: &mut dyn ForwardObserver) -> Result<Matrix> {
        let h = rms_norm(x, &self.final_norm);
        obs.head_input(&h);
        matmul(&h, &self.head)
    }

    /// All weight tensors with stable names, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, &Matrix)> {
        let mut out: Vec<(String, TensorRole, &Matrix)> =
            vec![("embed".into(), TensorRole::Embedding, &self.embeddings)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            let attn = TensorRole::Attention { layer: l };
            out.push((format!("{p}.attn_norm"), TensorRole::Norm, &layer.attn_norm));
            out.push((format!("{p}.wq"), attn, &layer.wq));
            out.push((format!("{p}.wk"), attn, &layer.wk));
            out.push((format!("{p}.wv"), attn, &layer.wv));
            out.push((format!("{p}.wo"), attn, &layer.wo));
            out.push((format!("{p}.moe_norm"), TensorRole::Norm, &layer.moe_norm));
            out.push((format!("{p}.gate"), TensorRole::Gate { layer: l }, &layer.gate));
            for (e, ex) in layer.experts.iter().enumerate() {
                let role = TensorRole::Expert { layer: l, expert: e };
                out.push((format!("{p}.experts.{e}.w_gate"), role, &ex.w_gate));
                out.push((format!("{p}.experts.{e}.w_up"), role, &ex.w_up));
                out.push((format!("{p}.experts.{e}.w_down"), role, &ex.w_down));
            }
        }
        out.push(("final_norm".into(), TensorRole::Norm, &self.final_norm));
        out.push(("head".into(), TensorRole::Head, &self.head));
        out
    }

    /// Rebuilds a model from tensors listed in [`MoEModel::named_tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let expected = 3 + config.n_layers * (7 + 3 * config.n_experts);
        if tensors.len() != expected {
            return shape_err(format!("expected {expected} tensors, got {}", tensors.len()));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let embeddings = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attn_norm = next();
            let wq = next();
            let wk = next();
            let wv = next();
            let wo = next();
            let moe_norm = next();
            let gate = next();
            let experts = (0..config.n_experts)
                .map(|_| ExpertWeights { w_gate: next(), w_up: next(), w_down: next() })
                .collect();
            layers.push(Layer { attn_norm, wq, wk, wv, wo, moe_norm, gate, experts });
        }
        let final_norm = next();
        let head = next();
        let model = Self { config, embeddings, layers, final_norm, head };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (h, i) = (c.hidden, c.intermediate);
        let mut want: Vec<(usize, usize)> = vec![(c.vocab, h)];
        for _ in 0..c.n_layers {
            want.extend([(1, h), (h, h), (h, h), (h, h), (h, h), (1, h), (h, c.n_experts)]);
            for _ in 0..c.n_experts {
                want.extend([(h, i), (h, i), (i, h)]);
            }
        }
        want.extend([(1, h), (h, c.vocab)]);
        let got = self.named_tensors();
        if got.len() != want.len() {
            return shape_err(format!("model holds {} tensors, config implies {}", got.len(), want.len()));
        }
        for ((name, _, m), w) in got.iter().zip(want) {
            if m.shape() != w {
                return shape_err(format!("{name} has shape {:?}, expected {w:?}", m.shape()));
            }
        }
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    /// Short content hash over the config and every weight bit.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, _, m) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden: 16,
            n_heads: 2,
            intermediate: 32,
            n_experts: 4,
            top_k: 2,
            vocab: 64,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_shaped() {
        let cfg = small_config();
        let a = MoEModel::gen_synthetic(&cfg, &mut SeededRng::new(1)).unwrap();
        let b = MoEModel::gen_synthetic(&cfg, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 2);
        assert!(a.layers.iter().all(|l| l.experts.len() == 4));
        a.check_shapes().unwrap();
    }

    #[test]
    fn synthetic_scale_matches_fan_in() {
        let cfg = ModelConfig {
            n_layers: 1,
            hidden: 64,
            n_heads: 4,
            intermediate: 128,
            n_experts: 4,
            top_k: 2,
            vocab: 256,
        };
        let m = MoEModel::gen_synthetic(&cfg, &mut SeededRng::new(2)).unwrap();
        for (name, role, t) in m.named_tensors() {
            if role == TensorRole::Norm || t.len() < 512 {
                continue;
            }
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 1.0 / (t.rows() as f64).sqrt();
            assert!((var.sqrt() / target - 1.0).abs() < 0.10, "{name}");
        }
    }

    #[test]
    fn route_closed_form() {
        let r = route(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
        let e = std::f32::consts::E;
        assert_eq!(r.experts, vec![0, 1]);
        assert!((r.weights[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((r.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-6);

        let r = route(&[0.3; 4], 2).unwrap();
        assert_eq!(r.experts, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5]);

        let logits = [0.5, -1.0, 2.0];
        let r = route(&logits, 3).unwrap();
        let full = crate::numerics::softmax_rows(&Matrix::from_rows(&[logits.to_vec()]));
        for (slot, &e) in r.experts.iter().enumerate() {
            assert!((r.weights[slot] - full.get(0, e)).abs() < 1e-6);
        }
    }

    #[test]
    fn expert_zero_input() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(3)).unwrap();
        let y = expert_forward(&m.layers[0].experts[0], &[0.0; 16]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expert_hand_oracle() {
        // 2-dim hidden, 1-dim intermediate.
        let e = ExpertWeights {
            w_gate: Matrix::from_rows(&[vec![1.0], vec![0.0]]),
            w_up: Matrix::from_rows(&[vec![0.0], vec![1.0]]),
            w_down: Matrix::from_rows(&[vec![1.0, -2.0]]),
        };
        let (a, b) = (0.5f64, 2.0f64);
        let act = a / (1.0 + (-a).exp()) * b;
        let y = expert_forward(&e, &[a as f32, b as f32]).unwrap();
        assert!((y[0] as f64 - act).abs() < 1e-6);
        assert!((y[1] as f64 + 2.0 * act).abs() < 1e-6);
    }

    #[test]
    fn expert_is_nonlinear() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(4)).unwrap();
        let mut rng = SeededRng::new(5);
        let x: Vec<f32> = (0..16).map(|_| rng.gaussian()).collect();
        let x2: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let y = expert_forward(&m.layers[0].experts[1], &x).unwrap();
        let y2 = expert_forward(&m.layers[0].experts[1], &x2).unwrap();
        let diff: f32 = y.iter().zip(&y2).map(|(a, b)| (2.0 * a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn batch_and_single_expert_agree_bitwise() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(6)).unwrap();
        let x = SeededRng::new(7).gaussian_matrix(5, 16, 1.0);
        let e = &m.layers[1].experts[2];
        let batch = e.forward_batch(&x).unwrap();
        for r in 0..5 {
            assert_eq!(batch.row(r), expert_forward(e, x.row(r)).unwrap().as_slice());
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(8)).unwrap();
        let t = m.forward(&[5], ForwardMode::Dense).unwrap();
        for layer in &t.layers {
            assert_eq!(layer.attention.data(), &[1.0]);
        }
    }

    #[test]
    fn dense_trace_invariants() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(9)).unwrap();
        let tokens: Vec<u32> = (0..20).map(|i| (i * 7 % 64) as u32).collect();
        let t = m.forward(&tokens, ForwardMode::Dense).unwrap();
        assert_eq!(t.invocations(), 2 * 20 * 2);
        for layer in &t.layers {
            for r in &layer.routes {
                assert_eq!(r.experts.len(), 2);
                assert_ne!(r.experts[0], r.experts[1]);
                let s: f32 = r.weights.iter().sum();
                assert!((s - 1.0).abs() < 1e-6 && r.weights.iter().all(|&w| w > 0.0));
            }
            let a = &layer.attention;
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(a.row(i)[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(t.logits.shape(), (20, 64));
    }

    #[test]
    fn zero_threshold_policy_matches_dense() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(10)).unwrap();
        let tokens: Vec<u32> = (0..30).map(|i| (i * 13 % 64) as u32).collect();
        let dense = m.forward(&tokens, ForwardMode::Dense).unwrap();
        let mut policy = PruningPolicy::new(PruneMode::WeightOnly, vec![0.0, 0.0]);
        policy.p = 0.0;
        let pruned = m.forward(&tokens, ForwardMode::Pruned(&policy)).unwrap();
        assert_eq!(dense.logits, pruned.logits);
        let off = m.forward(&tokens, ForwardMode::Pruned(&PruningPolicy::off(2))).unwrap();
        assert_eq!(dense, off);
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(11)).unwrap();
        assert!(matches!(
            m.forward(&[64], ForwardMode::Dense),
            Err(crate::Error::Argument(_))
        ));
        assert!(m.forward(&[], ForwardMode::Dense).is_err());
    }

    #[test]
    fn forward_from_matches_full_pass() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(12)).unwrap();
        let tokens: Vec<u32> = (0..12).map(|i| i as u32).collect();
        let cps = m.residual_checkpoints(&tokens).unwrap();
        let full = m.forward(&tokens, ForwardMode::Dense).unwrap();
        assert_eq!(m.forward_from(1, cps[1].clone(), None, None).unwrap(), full.hidden);
        assert_eq!(cps[2], full.hidden);
    }

    #[test]
    fn from_tensors_round_trip() {
        let m = MoEModel::gen_synthetic(&small_config(), &mut SeededRng::new(13)).unwrap();
        let tensors = m.named_tensors().into_iter().map(|(_, _, t)| t.clone()).collect();
        let back = MoEModel::from_tensors(m.config.clone(), tensors).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }
}
