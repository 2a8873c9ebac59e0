//! Weight quantization: group-wise asymmetric RTN, GPTQ error compensation,
//! sign binarization, and the packed containers that hold the results.
//!
//! Matrices are quantized in the model's `x · W` layout (input rows by
//! output columns). Scale groups run down the input dimension: each output
//! column is split into runs of `group_size` consecutive rows, the last run
//! possibly short. Group `g` of column `c` keeps its scale and zero at index
//! `g * cols + c`.

mod binary;
mod container;
mod gptq;
pub mod pack;

pub use binary::{binarize, binary_matmul};
pub use container::{
    quantize_model, read_container, write_container, HessianCollector, QuantizeOptions,
    QuantizedModel, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use gptq::{gptq_quantize, gptq_quantize_named, hessian_from_inputs};
pub use pack::{pack_bits, packed_len, unpack_bits};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::numerics::Matrix;

/// Bits charged for each stored quantizer parameter (scale, zero, binary scale).
pub const METADATA_BITS: u64 = 16;
/// Bits charged per element of an unquantized tensor.
pub const PASSTHROUGH_BITS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Rtn,
    #[default]
    Gptq,
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(QuantMode::Rtn),
            "gptq" => Ok(QuantMode::Gptq),
            other => arg_err(format!("unknown quantization mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
    pub mode: QuantMode,
    pub block_size: usize,
    /// Fraction of the mean Hessian diagonal added before factorization.
    pub damp: f64,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self { bits: 4, group_size: 64, mode: QuantMode::Gptq, block_size: 128, damp: 0.01 }
    }
}

impl QuantSpec {
    pub fn with_bits(self, bits: u8) -> Self {
        Self { bits, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 3, 4, 16].contains(&self.bits) {
            return arg_err(format!("unsupported bit-width {}", self.bits));
        }
        if self.group_size == 0 || self.block_size == 0 {
            return arg_err("group and block sizes must be positive");
        }
        if !(self.damp >= 0.0 && self.damp.is_finite()) {
            return arg_err(format!("damping {} must be a non-negative number", self.damp));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    /// Full-precision copy (`bits = 16`).
    Passthrough(Vec<f32>),
    /// Packed codes with per-group scale and zero point.
    Affine { packed: Vec<u8>, scales: Vec<f32>, zeros: Vec<f32> },
    /// Packed `(sign(W) + 1) / 2` with one scale for the whole matrix.
    Binary { packed: Vec<u8>, scale: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub payload: Payload,
}

impl QuantizedTensor {
    pub fn passthrough(w: &Matrix) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            bits: 16,
            group_size: 0,
            payload: Payload::Passthrough(w.data().to_vec()),
        }
    }

    pub fn element_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Stored size in bits: payload codes plus quantizer parameters, with
    /// passthrough tensors charged at 16 bits per element.
    pub fn stored_bits(&self) -> u64 {
        let n = self.element_count() as u64;
        match &self.payload {
            Payload::Passthrough(_) => n * PASSTHROUGH_BITS,
            Payload::Affine { scales, zeros, .. } => {
                n * self.bits as u64 + METADATA_BITS * (scales.len() + zeros.len()) as u64
            }
            Payload::Binary { .. } => n + METADATA_BITS,
        }
    }

    /// Code bits only, without quantizer parameters.
    pub fn payload_bits(&self) -> u64 {
        self.element_count() as u64
            * match self.payload {
                Payload::Passthrough(_) => PASSTHROUGH_BITS,
                _ => self.bits as u64,
            }
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        match &self.payload {
            Payload::Passthrough(_) => arg_err("passthrough tensor has no codes"),
            Payload::Affine { packed, .. } | Payload::Binary { packed, .. } => {
                unpack_bits(packed, self.bits, self.element_count())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.element_count();
        let bad = |msg: String| Err(Error::Format(msg));
        match &self.payload {
            Payload::Passthrough(d) if d.len() != n => {
                bad(format!("passthrough holds {} of {n} values", d.len()))
            }
            Payload::Affine { packed, scales, zeros } => {
                if !(2..=4).contains(&self.bits) || self.group_size == 0 {
                    return bad(format!(
                        "affine tensor with bits {} and group size {}",
                        self.bits, self.group_size
                    ));
                }
                let groups = self.rows.div_ceil(self.group_size) * self.cols;
                if packed.len() != packed_len(n, self.bits) {
                    return bad(format!("packed length {} for {n} codes", packed.len()));
                }
                if scales.len() != groups || zeros.len() != groups {
                    return bad(format!(
                        "{} scales / {} zeros for {groups} groups",
                        scales.len(),
                        zeros.len()
                    ));
                }
                Ok(())
            }
            Payload::Binary { packed, .. } => {
                if self.bits != 1 || packed.len() != packed_len(n, 1) {
                    return bad("malformed binary tensor".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[inline]
pub(crate) fn affine_params(min: f32, max: f32, bits: u8) -> (f32, f32) {
    let levels = ((1u32 << bits) - 1) as f32;
    if max > min {
        let scale = (max - min) / levels;
        (scale, -min / scale)
    } else {
        (1.0, -min)
    }
}

#[inline]
pub(crate) fn quantize_value(w: f32, scale: f32, zero: f32, maxq: f32) -> u8 {
    (w / scale + zero).round().clamp(0.0, maxq) as u8
}

#[inline]
pub(crate) fn dequantize_value(q: u8, scale: f32, zero: f32) -> f32 {
    (q as f32 - zero) * scale
}

pub(crate) fn group_range(g: usize, group_size: usize, rows: usize) -> std::ops::Range<usize> {
    g * group_size..((g + 1) * group_size).min(rows)
}

/// Round-to-nearest with a per-group asymmetric affine grid of `2^bits` levels.
pub fn rtn_quantize(w: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    if !(2..=4).contains(&spec.bits) {
        return arg_err(format!("round-to-nearest supports 2-4 bits, got {}", spec.bits));
    }
    spec.validate()?;
    let (rows, cols) = w.shape();
    let gs = spec.group_size;
    let n_groups = rows.div_ceil(gs);
    let maxq = ((1u32 << spec.bits) - 1) as f32;
    let mut scales = vec![0f32; n_groups * cols];
    let mut zeros = vec![0f32; n_groups * cols];
    let mut codes = vec![0u8; rows * cols];
    for g in 0..n_groups {
        let range = group_range(g, gs, rows);
        for c in 0..cols {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for r in range.clone() {
                let v = w.get(r, c);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let (scale, zero) = affine_params(lo, hi, spec.bits);
            scales[g * cols + c] = scale;
            zeros[g * cols + c] = zero;
            for r in range.clone() {
                codes[r * cols + c] = quantize_value(w.get(r, c), scale, zero, maxq);
            }
        }
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        bits: spec.bits,
        group_size: gs,
        payload: Payload::Affine { packed: pack_bits(&codes, spec.bits)?, scales, zeros },
    })
}

pub fn dequantize(qt: &QuantizedTensor) -> Result<Matrix> {
    qt.validate()?;
    let (rows, cols) = (qt.rows, qt.cols);
    match &qt.payload {
        Payload::Passthrough(d) => Matrix::from_vec(rows, cols, d.clone()),
        Payload::Affine { packed, scales, zeros } => {
            let codes = unpack_bits(packed, qt.bits, rows * cols)?;
            let gs = qt.group_size;
            let data = codes
                .iter()
                .enumerate()
                .map(|(i, &q)| {
                    let (r, c) = (i / cols, i % cols);
                    let k = (r / gs) * cols + c;
                    dequantize_value(q, scales[k], zeros[k])
                })
                .collect();
            Matrix::from_vec(rows, cols, data)
        }
        Payload::Binary { packed, scale } => {
            let bits = unpack_bits(packed, 1, rows * cols)?;
            let (pos, neg) = (*scale, -*scale);
            Matrix::from_vec(rows, cols, bits.iter().map(|&b| if b == 1 { pos } else { neg }).collect())
        }
    }
}

/// Quantizes with whatever method the bit-width and mode call for. GPTQ
/// falls back to RTN when no Hessian is supplied.
pub fn quantize_matrix(
    w: &Matrix,
    hessian: Option<&Matrix>,
    spec: &QuantSpec,
    context: &str,
) -> Result<QuantizedTensor> {
    spec.validate()?;
    match (spec.bits, spec.mode, hessian) {
        (16, _, _) => Ok(QuantizedTensor::passthrough(w)),
        (1, _, _) => Ok(binarize(w)),
        (_, QuantMode::Gptq, Some(h)) => gptq_quantize_named(w, h, spec, context),
        _ => rtn_quantize(w, spec),
    }
}

/// `|X W - X W_q|_F` for inputs `x` (samples by input dim).
pub fn proxy_loss(w: &Matrix, wq: &Matrix, x: &Matrix) -> Result<f64> {
    let a = crate::numerics::matmul(x, w)?;
    let b = crate::numerics::matmul(x, wq)?;
    a.frobenius_distance(&b)
}
