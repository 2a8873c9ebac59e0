//! Whole-model quantization and the `MCQZ` container.
//!
//! Layout: `b"MCQZ"`, `u32` version, `u64` metadata length, UTF-8 JSON
//! metadata, then the payload. Each tensor's payload is its packed codes
//! followed by its `f32` LE parameters (scales then zeros, or the single
//! binary scale), or its raw `f32` LE values when passed through. The
//! metadata carries a hash of the payload bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{dequantize, quantize_matrix, Payload, QuantSpec, QuantizedTensor};
use crate::allocator::BitAllocation;
use crate::error::{arg_err, Error, Result};
use crate::model::{ForwardMode, ForwardObserver, ModelConfig, MoEModel, TensorRole};
use crate::numerics::Matrix;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MCQZ";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOptions {
    /// Method, group size and damping; `bits` is overridden per tensor.
    pub spec: QuantSpec,
    /// Width for attention, router and output head matrices.
    pub non_expert_bits: u8,
}

impl Default for QuantizeOptions {
    fn default() -> Self {
        Self { spec: QuantSpec::default(), non_expert_bits: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    /// Digest of the full-precision model this was produced from.
    pub source_digest: String,
    /// Tensors in the model's storage order.
    pub tensors: Vec<(String, QuantizedTensor)>,
    pub warnings: Vec<String>,
}

impl QuantizedModel {
    pub fn to_model(&self) -> Result<MoEModel> {
        let mats = self
            .tensors
            .par_iter()
            .map(|(_, qt)| dequantize(qt))
            .collect::<Result<Vec<_>>>()?;
        MoEModel::from_tensors(self.config.clone(), mats)
    }

    pub fn get(&self, name: &str) -> Option<&QuantizedTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(self, std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_container(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Which activation stream a matrix consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Site {
    AttentionInput(usize),
    AttentionOutput(usize),
    MoeInput(usize),
    ExpertInput(usize, usize),
    ExpertHidden(usize, usize),
    HeadInput,
}

#[derive(Debug, Clone)]
struct Gram {
    dim: usize,
    sum: Vec<f64>,
    count: usize,
}

impl Gram {
    fn add(&mut self, x: &Matrix) {
        for r in 0..x.rows() {
            let row = x.row(r);
            for (i, &xi) in row.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let xi = xi as f64;
                let dst = &mut self.sum[i * self.dim..(i + 1) * self.dim];
                for (d, &xj) in dst.iter_mut().zip(row) {
                    *d += xi * xj as f64;
                }
            }
        }
        self.count += x.rows();
    }

    fn hessian(&self) -> Matrix {
        let f = 2.0 / self.count as f64;
        Matrix::from_vec(self.dim, self.dim, self.sum.iter().map(|&v| (v * f) as f32).collect())
            .expect("square")
    }
}

/// Accumulates `sum x^T x` for every linear-layer input seen during forward
/// passes. Collectors from separate passes combine with [`HessianCollector::merge`].
#[derive(Debug, Clone, Default)]
pub struct HessianCollector {
    grams: BTreeMap<Site, Gram>,
}

impl HessianCollector {
    fn record(&mut self, site: Site, x: &Matrix) {
        let dim = x.cols();
        self.grams
            .entry(site)
            .or_insert_with(|| Gram { dim, sum: vec![0.0; dim * dim], count: 0 })
            .add(x);
    }

    pub fn merge(&mut self, other: HessianCollector) {
        for (site, g) in other.grams {
            match self.grams.get_mut(&site) {
                Some(mine) => {
                    for (a, b) in mine.sum.iter_mut().zip(&g.sum) {
                        *a += b;
                    }
                    mine.count += g.count;
                }
                None => {
                    self.grams.insert(site, g);
                }
            }
        }
    }

    /// Number of input rows seen by an expert's first projections.
    pub fn expert_samples(&self, layer: usize, expert: usize) -> usize {
        self.grams.get(&Site::ExpertInput(layer, expert)).map_or(0, |g| g.count)
    }

    fn hessian(&self, site: Site) -> Option<Matrix> {
        self.grams.get(&site).filter(|g| g.count > 0).map(Gram::hessian)
    }
}

impl ForwardObserver for HessianCollector {
    fn attention_input(&mut self, layer: usize, h: &Matrix) {
        self.record(Site::AttentionInput(layer), h);
    }
    fn attention_output(&mut self, layer: usize, concat: &Matrix) {
        self.record(Site::AttentionOutput(layer), concat);
    }
    fn moe_input(&mut self, layer: usize, h: &Matrix) {
        self.record(Site::MoeInput(layer), h);
    }
    fn expert_input(&mut self, layer: usize, expert: usize, x: &Matrix) {
        self.record(Site::ExpertInput(layer, expert), x);
    }
    fn expert_hidden(&mut self, layer: usize, expert: usize, act: &Matrix) {
        self.record(Site::ExpertHidden(layer, expert), act);
    }
    fn head_input(&mut self, h: &Matrix) {
        self.record(Site::HeadInput, h);
    }
}

/// Dense forward passes over `calib`, merged in sequence order.
pub fn collect_hessians(model: &MoEModel, calib: &[Vec<u32>]) -> Result<HessianCollector> {
    let parts = calib
        .par_iter()
        .map(|seq| {
            let mut c = HessianCollector::default();
            model.forward_observed(seq, ForwardMode::Dense, &mut c)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = HessianCollector::default();
    for p in parts {
        all.merge(p);
    }
    Ok(all)
}

fn site_for(name: &str, role: TensorRole) -> Option<Site> {
    let suffix = name.rsplit('.').next().unwrap_or(name);
    match role {
        TensorRole::Embedding | TensorRole::Norm => None,
        TensorRole::Attention { layer } if suffix == "wo" => Some(Site::AttentionOutput(layer)),
        TensorRole::Attention { layer } => Some(Site::AttentionInput(layer)),
        TensorRole::Gate { layer } => Some(Site::MoeInput(layer)),
        TensorRole::Expert { layer, expert } if suffix == "w_down" => {
            Some(Site::ExpertHidden(layer, expert))
        }
        TensorRole::Expert { layer, expert } => Some(Site::ExpertInput(layer, expert)),
        TensorRole::Head => Some(Site::HeadInput),
    }
}

/// Quantizes every tensor: embeddings and norm gains stay at full precision,
/// experts take their allocated width, everything else `non_expert_bits`.
/// Hessians come from dense passes of the full-precision model over `calib`.
pub fn quantize_model(
    model: &MoEModel,
    alloc: &BitAllocation,
    calib: &[Vec<u32>],
    opts: &QuantizeOptions,
) -> Result<QuantizedModel> {
    let cfg = &model.config;
    if alloc.bits.len() != cfg.n_layers || alloc.bits.iter().any(|l| l.len() != cfg.n_experts) {
        return Err(Error::Shape(format!(
            "allocation covers {} layers, model has {} layers of {} experts",
            alloc.bits.len(),
            cfg.n_layers,
            cfg.n_experts
        )));
    }
    opts.spec.with_bits(opts.non_expert_bits).validate()?;
    for &b in alloc.bits.iter().flatten() {
        opts.spec.with_bits(b).validate()?;
    }
    if calib.is_empty() && opts.spec.mode == super::QuantMode::Gptq {
        return arg_err("GPTQ needs at least one calibration sequence");
    }
    let grams = collect_hessians(model, calib)?;

    let mut warnings = Vec::new();
    for l in 0..cfg.n_layers {
        for e in 0..cfg.n_experts {
            if grams.expert_samples(l, e) == 0 && alloc.bits[l][e] != 16 {
                warnings.push(format!(
                    "layers.{l}.experts.{e} received no calibration tokens; using an identity Hessian"
                ));
            }
        }
    }

    let named = model.named_tensors();
    let tensors = named
        .par_iter()
        .map(|(name, role, w)| {
            let bits = match *role {
                TensorRole::Embedding | TensorRole::Norm => 16,
                TensorRole::Expert { layer, expert } => alloc.bits[layer][expert],
                _ => opts.non_expert_bits,
            };
            let spec = opts.spec.with_bits(bits);
            let h = site_for(name, *role).map(|site| {
                grams.hessian(site).unwrap_or_else(|| Matrix::identity(w.rows()))
            });
            Ok((name.clone(), quantize_matrix(w, h.as_ref(), &spec, name)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(QuantizedModel {
        config: cfg.clone(),
        source_digest: model.digest(),
        tensors,
        warnings,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Passthrough,
    Affine,
    Binary,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    kind: Kind,
    offset: u64,
    packed_bytes: u64,
    params: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    source_digest: String,
    warnings: Vec<String>,
    payload_sha256: String,
    tensors: Vec<Entry>,
}

fn push_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_container<W: Write>(qm: &QuantizedModel, mut w: W) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(qm.tensors.len());
    for (name, qt) in &qm.tensors {
        let offset = payload.len() as u64;
        let (kind, packed_bytes, params) = match &qt.payload {
            Payload::Passthrough(d) => {
                push_f32s(&mut payload, d);
                (Kind::Passthrough, 0, d.len())
            }
            Payload::Affine { packed, scales, zeros } => {
                payload.extend_from_slice(packed);
                push_f32s(&mut payload, scales);
                push_f32s(&mut payload, zeros);
                (Kind::Affine, packed.len(), scales.len())
            }
            Payload::Binary { packed, scale } => {
                payload.extend_from_slice(packed);
                push_f32s(&mut payload, &[*scale]);
                (Kind::Binary, packed.len(), 1)
            }
        };
        entries.push(Entry {
            name: name.clone(),
            rows: qt.rows,
            cols: qt.cols,
            bits: qt.bits,
            group_size: qt.group_size,
            kind,
            offset,
            packed_bytes: packed_bytes as u64,
            params: params as u64,
        });
    }
    let meta = Metadata {
        config: qm.config.clone(),
        source_digest: qm.source_digest.clone(),
        warnings: qm.warnings.clone(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors: entries,
    };
    let json = serde_json::to_vec(&meta)?;
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<QuantizedModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad container magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let meta: Metadata = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if hex::encode(Sha256::digest(&payload)) != meta.payload_sha256 {
        return Err(Error::Format("container payload hash mismatch".into()));
    }

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for e in meta.tensors {
        let n = e.rows * e.cols;
        let packed = e.packed_bytes as usize;
        let params = e.params as usize;
        let span = match e.kind {
            Kind::Passthrough => 4 * n,
            Kind::Affine => packed + 8 * params,
            Kind::Binary => packed + 4,
        };
        let start = e.offset as usize;
        let bytes = payload
            .get(start..start + span)
            .ok_or_else(|| Error::Format(format!("tensor {} runs past end of payload", e.name)))?;
        let body = match e.kind {
            Kind::Passthrough => Payload::Passthrough(read_f32s(bytes)),
            Kind::Affine => Payload::Affine {
                packed: bytes[..packed].to_vec(),
                scales: read_f32s(&bytes[packed..packed + 4 * params]),
                zeros: read_f32s(&bytes[packed + 4 * params..]),
            },
            Kind::Binary => Payload::Binary {
                packed: bytes[..packed].to_vec(),
                scale: read_f32s(&bytes[packed..])[0],
            },
        };
        let qt = QuantizedTensor {
            rows: e.rows,
            cols: e.cols,
            bits: e.bits,
            group_size: e.group_size,
            payload: body,
        };
        qt.validate().map_err(|err| Error::Format(format!("{}: {err}", e.name)))?;
        tensors.push((e.name, qt));
    }
    Ok(QuantizedModel {
        config: meta.config,
        source_digest: meta.source_digest,
        tensors,
        warnings: meta.warnings,
    })
}
