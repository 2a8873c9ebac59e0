//! GPTQ: quantize input rows one at a time in natural order and push each
//! row's rounding error onto the rows not yet quantized, weighted by the
//! upper Cholesky factor of the inverse Hessian `H = 2 X^T X / n`.

use super::{
    affine_params, dequantize_value, group_range, pack_bits, quantize_value, Payload, QuantSpec,
    QuantizedTensor,
};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::numerics::Matrix;

/// Lower Cholesky factor of a symmetric positive-definite `n x n` matrix.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s.is_nan() || s <= 0.0 || s.is_infinite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix.
fn invert_lower(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0f64; n * n];
    for j in 0..n {
        inv[j * n + j] = 1.0 / l[j * n + j];
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s -= l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = s / l[i * n + i];
        }
    }
    inv
}

/// Upper factor `U` with `H^-1 = U^T U`.
fn inverse_hessian_factor(h: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(h, n)?;
    let li = invert_lower(&l, n);
    // H^-1 = L^-T L^-1
    let mut hinv = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i..n).map(|k| li[k * n + i] * li[k * n + j]).sum();
            hinv[i * n + j] = s;
            hinv[j * n + i] = s;
        }
    }
    let l2 = cholesky(&hinv, n)?;
    let mut u = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            u[j * n + i] = l2[i * n + j];
        }
    }
    Some(u)
}

pub fn gptq_quantize(w: &Matrix, h: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    gptq_quantize_named(w, h, spec, "matrix")
}

/// As [`gptq_quantize`]; `context` names the tensor in numerical errors.
pub fn gptq_quantize_named(
    w: &Matrix,
    h: &Matrix,
    spec: &QuantSpec,
    context: &str,
) -> Result<QuantizedTensor> {
    spec.validate()?;
    if spec.bits == 16 {
        return Ok(QuantizedTensor::passthrough(w));
    }
    if !(2..=4).contains(&spec.bits) {
        return arg_err(format!("GPTQ supports 2-4 bits, got {}", spec.bits));
    }
    let (rows, cols) = w.shape();
    if h.shape() != (rows, rows) {
        return shape_err(format!(
            "Hessian {:?} for a matrix with {rows} input rows",
            h.shape()
        ));
    }
    let n = rows;
    let mut hd: Vec<f64> = h.data().iter().map(|&v| v as f64).collect();
    for i in 0..n {
        if hd[i * n + i] == 0.0 {
            hd[i * n + i] = 1.0;
        }
    }
    let mean_diag = (0..n).map(|i| hd[i * n + i]).sum::<f64>() / n as f64;
    for i in 0..n {
        hd[i * n + i] += spec.damp * mean_diag;
    }
    let Some(u) = inverse_hessian_factor(&hd, n) else {
        return Err(Error::Numerical(format!(
            "{context}: Cholesky factorization of the damped Hessian failed"
        )));
    };
    let gs = spec.group_size;
    let n_groups = rows.div_ceil(gs);
    let maxq = ((1u32 << spec.bits) - 1) as f32;
    let mut work: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut scales = vec![0f32; n_groups * cols];
    let mut zeros = vec![0f32; n_groups * cols];
    let mut codes = vec![0u8; rows * cols];
    let mut err_block = vec![0f64; spec.block_size * cols];

    let mut b0 = 0;
    while b0 < rows {
        let b1 = (b0 + spec.block_size).min(rows);
        for i in b0..b1 {
            if i % gs == 0 {
                let g = i / gs;
                for c in 0..cols {
                    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                    for r in group_range(g, gs, rows) {
                        let v = work[r * cols + c] as f32;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    let (s, z) = affine_params(lo, hi, spec.bits);
                    scales[g * cols + c] = s;
                    zeros[g * cols + c] = z;
                }
            }
            let g = i / gs;
            let d = u[i * n + i];
            let erow = &mut err_block[(i - b0) * cols..(i - b0 + 1) * cols];
            for c in 0..cols {
                let (s, z) = (scales[g * cols + c], zeros[g * cols + c]);
                let v = work[i * cols + c] as f32;
                let q = quantize_value(v, s, z, maxq);
                codes[i * cols + c] = q;
                erow[c] = (work[i * cols + c] - dequantize_value(q, s, z) as f64) / d;
            }
            for j in i + 1..b1 {
                let f = u[i * n + j];
                if f == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    work[j * cols + c] -= f * erow[c];
                }
            }
        }
        for j in b1..rows {
            for i in b0..b1 {
                let f = u[i * n + j];
                if f == 0.0 {
                    continue;
                }
                let erow = &err_block[(i - b0) * cols..(i - b0 + 1) * cols];
                for c in 0..cols {
                    work[j * cols + c] -= f * erow[c];
                }
            }
        }
        b0 = b1;
    }

    Ok(QuantizedTensor {
        rows,
        cols,
        bits: spec.bits,
        group_size: gs,
        payload: Payload::Affine { packed: pack_bits(&codes, spec.bits)?, scales, zeros },
    })
}

/// `2 X^T X / n` for samples `x` (rows are samples).
pub fn hessian_from_inputs(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut h = vec![0f64; d * d];
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in 0..d {
                h[i * d + j] += xi * row[j] as f64;
            }
        }
    }
    let f = if n == 0 { 0.0 } else { 2.0 / n as f64 };
    Matrix::from_vec(d, d, h.into_iter().map(|v| (v * f) as f32).collect()).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::quantizer::{dequantize, proxy_loss, rtn_quantize, QuantMode};

    fn spec(bits: u8) -> QuantSpec {
        QuantSpec { mode: QuantMode::Gptq, ..QuantSpec::default().with_bits(bits) }
    }

    #[test]
    fn cholesky_inverse_factor() {
        let mut rng = SeededRng::new(41);
        let x = rng.gaussian_matrix(40, 6, 1.0);
        let h = hessian_from_inputs(&x);
        let hd: Vec<f64> = h.data().iter().map(|&v| v as f64).collect();
        let u = inverse_hessian_factor(&hd, 6).unwrap();
        // H * (U^T U) = I
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for k in 0..6 {
                    let hinv_kj: f64 = (0..6).map(|m| u[m * 6 + k] * u[m * 6 + j]).sum();
                    s += hd[i * 6 + k] * hinv_kj;
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-6, "{i},{j}: {s}");
            }
        }
    }

    #[test]
    fn diagonal_hessian_equals_rtn() {
        let mut rng = SeededRng::new(42);
        let w = rng.gaussian_matrix(24, 10, 1.0);
        let mut h = Matrix::zeros(24, 24);
        for i in 0..24 {
            h.set(i, i, 0.5 + rng.uniform() as f32);
        }
        for bits in [2, 3, 4] {
            let s = QuantSpec { group_size: 8, ..spec(bits) };
            assert_eq!(gptq_quantize(&w, &h, &s).unwrap(), rtn_quantize(&w, &s).unwrap());
        }
    }

    #[test]
    fn sixteen_bits_passthrough() {
        let w = SeededRng::new(43).gaussian_matrix(4, 4, 1.0);
        let qt = gptq_quantize(&w, &Matrix::identity(4), &spec(16)).unwrap();
        assert_eq!(dequantize(&qt).unwrap(), w);
    }

    #[test]
    fn beats_rtn_on_correlated_inputs() {
        let mut rng = SeededRng::new(44);
        let mut wins = 0;
        for _ in 0..20 {
            let w = rng.gaussian_matrix(32, 32, 1.0);
            let x = rng.gaussian_matrix(128, 32, 1.0);
            let h = hessian_from_inputs(&x);
            let g = dequantize(&gptq_quantize(&w, &h, &spec(3)).unwrap()).unwrap();
            let r = dequantize(&rtn_quantize(&w, &spec(3)).unwrap()).unwrap();
            if proxy_loss(&w, &g, &x).unwrap() <= proxy_loss(&w, &r, &x).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 19, "{wins}");
    }

    #[test]
    fn singular_hessian_survives_damping() {
        let w = SeededRng::new(45).gaussian_matrix(8, 4, 1.0);
        assert!(gptq_quantize(&w, &Matrix::zeros(8, 8), &spec(2)).is_ok());
        let nan = Matrix::filled(8, 8, f32::NAN);
        assert!(matches!(
            gptq_quantize_named(&w, &nan, &spec(2), "layers.0.wq"),
            Err(Error::Numerical(m)) if m.contains("layers.0.wq")
        ));
    }

    #[test]
    fn shape_checks() {
        let w = Matrix::zeros(4, 2);
        assert!(gptq_quantize(&w, &Matrix::identity(3), &spec(2)).is_err());
        assert!(gptq_quantize(&w, &Matrix::identity(4), &spec(1)).is_err());
    }
}
