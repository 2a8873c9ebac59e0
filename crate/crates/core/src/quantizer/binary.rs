//! 1-bit weights. `B = sign(W)` with `sign(0) = +1`, stored as
//! `(B + 1) / 2` in one bit per element, and a single scale
//! `s = |W|_1 / (d * m)` for the whole matrix.

use super::{pack_bits, unpack_bits, Payload, QuantizedTensor};
use crate::error::{arg_err, shape_err, Result};
use crate::numerics::Matrix;

pub fn binarize(w: &Matrix) -> QuantizedTensor {
    let bits: Vec<u8> = w.data().iter().map(|&v| u8::from(v >= 0.0)).collect();
    let l1: f64 = w.data().iter().map(|&v| v.abs() as f64).sum();
    let scale = if w.is_empty() { 0.0 } else { (l1 / w.len() as f64) as f32 };
    QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        bits: 1,
        group_size: 0,
        payload: Payload::Binary { packed: pack_bits(&bits, 1).expect("0/1 codes fit"), scale },
    }
}

/// `s * x B` computed as `s * (sum of x over set bits - sum over clear bits)`
/// per output column; the only multiplication is by `s`.
pub fn binary_matmul(x: &[f32], qt: &QuantizedTensor) -> Result<Vec<f32>> {
    let Payload::Binary { packed, scale } = &qt.payload else {
        return arg_err(format!("binary matmul on a {}-bit tensor", qt.bits));
    };
    if x.len() != qt.rows {
        return shape_err(format!("input of length {} for {} rows", x.len(), qt.rows));
    }
    let bits = unpack_bits(packed, 1, qt.rows * qt.cols)?;
    let mut plus = vec![0f64; qt.cols];
    let mut minus = vec![0f64; qt.cols];
    for (r, &xv) in x.iter().enumerate() {
        let row = &bits[r * qt.cols..(r + 1) * qt.cols];
        for (c, &b) in row.iter().enumerate() {
            if b == 1 {
                plus[c] += xv as f64;
            } else {
                minus[c] += xv as f64;
            }
        }
    }
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (*scale as f64 * (p - m)) as f32)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{vecmat, SeededRng};
    use crate::quantizer::dequantize;

    fn example() -> Matrix {
        Matrix::from_rows(&[vec![0.5, -0.3], vec![-0.2, 0.4]])
    }

    #[test]
    fn worked_example() {
        let qt = binarize(&example());
        assert_eq!(qt.codes().unwrap(), vec![1, 0, 0, 1]);
        let Payload::Binary { scale, .. } = qt.payload else { panic!() };
        assert!((scale - 0.35).abs() < 1e-7);
        let dq = dequantize(&qt).unwrap();
        assert_eq!(dq.data(), &[scale, -scale, -scale, scale]);
        let y = binary_matmul(&[1.0, 2.0], &qt).unwrap();
        assert!((y[0] + 0.35).abs() < 1e-6 && (y[1] - 0.35).abs() < 1e-6);
    }

    #[test]
    fn all_positive_and_zero() {
        let w = Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]);
        let qt = binarize(&w);
        assert_eq!(qt.codes().unwrap(), vec![1; 4]);
        let Payload::Binary { scale, .. } = qt.payload else { panic!() };
        assert!((scale - 0.25).abs() < 1e-7);

        let z = binarize(&Matrix::zeros(3, 3));
        assert_eq!(z.codes().unwrap(), vec![1; 9]);
        assert!(binary_matmul(&[1.0, -2.0, 3.0], &z).unwrap().iter().all(|&v| v == 0.0));
        assert!(binary_matmul(&[0.0; 2], &qt).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_sign_oracle() {
        let mut rng = SeededRng::new(31);
        let w = rng.gaussian_matrix(64, 64, 1.0);
        let x: Vec<f32> = (0..64).map(|_| rng.gaussian()).collect();
        let qt = binarize(&w);
        let s: f64 = w.data().iter().map(|v| v.abs() as f64).sum::<f64>() / 4096.0;
        let got = binary_matmul(&x, &qt).unwrap();
        for c in 0..64 {
            let oracle: f64 = (0..64)
                .map(|r| x[r] as f64 * if w.get(r, c) >= 0.0 { 1.0 } else { -1.0 })
                .sum::<f64>()
                * s;
            assert!((got[c] as f64 - oracle).abs() <= 1e-5 * oracle.abs().max(1.0));
        }
        let via_dense = vecmat(&x, &dequantize(&qt).unwrap()).unwrap();
        for (a, b) in got.iter().zip(via_dense) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_non_binary_and_bad_dims() {
        let qt = binarize(&example());
        assert!(binary_matmul(&[1.0], &qt).is_err());
        let passthrough = QuantizedTensor::passthrough(&example());
        assert!(binary_matmul(&[1.0, 1.0], &passthrough).is_err());
    }
}
