//! Row-major dense kernels used by the model. All reductions run in a fixed
//! order so results are bit-reproducible.

use crate::model::Scalar;

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = F::zero();
    for k in chunks * 8..a.len() {
        tail = tail + a[k] * b[k];
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `out[rows × n] = x[rows × k] · w[k × n] (+ bias)`
pub fn matmul<F: Scalar>(x: &[F], w: &[F], bias: Option<&[F]>, rows: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), rows * k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![F::zero(); rows * n];
    for r in 0..rows {
        let o = &mut out[r * n..(r + 1) * n];
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        for (i, &xi) in x[r * k..(r + 1) * k].iter().enumerate() {
            axpy(xi, &w[i * n..(i + 1) * n], o);
        }
    }
    out
}

/// `dw[k × n] += xᵀ · dy`, `db += Σ_rows dy`
pub fn matmul_backward_weights<F: Scalar>(
    x: &[F],
    dy: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
    rows: usize,
    k: usize,
    n: usize,
) {
    for r in 0..rows {
        let g = &dy[r * n..(r + 1) * n];
        for (i, &xi) in x[r * k..(r + 1) * k].iter().enumerate() {
            axpy(xi, g, &mut dw[i * n..(i + 1) * n]);
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            axpy(F::one(), &dy[r * n..(r + 1) * n], db);
        }
    }
}

/// `dx[rows × k] += dy[rows × n] · wᵀ`
pub fn matmul_backward_input<F: Scalar>(dy: &[F], w: &[F], dx: &mut [F], rows: usize, k: usize, n: usize) {
    for r in 0..rows {
        let g = &dy[r * n..(r + 1) * n];
        let d = &mut dx[r * k..(r + 1) * k];
        for (i, di) in d.iter_mut().enumerate() {
            *di = *di + dot(g, &w[i * n..(i + 1) * n]);
        }
    }
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
    let lse = max + sum.ln();
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_transposes_agree() {
        let (rows, k, n) = (3, 4, 5);
        let x: Vec<f64> = (0..rows * k).map(|i| (i as f64 * 0.37).cos()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).sin()).collect();
        let y = matmul(&x, &w, None, rows, k, n);
        for r in 0..rows {
            for j in 0..n {
                let e: f64 = (0..k).map(|i| x[r * k + i] * w[i * n + j]).sum();
                assert!((y[r * n + j] - e).abs() < 1e-12);
            }
        }
        // <dy, x·w> = <xᵀ·dy, w> = <dy·wᵀ, x>
        let dy: Vec<f64> = (0..rows * n).map(|i| i as f64 * 0.1 - 0.4).collect();
        let mut dw = vec![0.0; k * n];
        matmul_backward_weights(&x, &dy, &mut dw, None, rows, k, n);
        let mut dx = vec![0.0; rows * k];
        matmul_backward_input(&dy, &w, &mut dx, rows, k, n);
        let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10 && (lhs - via_x).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut row = vec![1.0f64, 2.0, -3.0, 1000.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ls = log_softmax(&[0.0f64; 16]);
        assert!((ls[0] + 16f64.ln()).abs() < 1e-12);
    }
}
