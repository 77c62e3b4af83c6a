//! Eager dense operations. The tape in [`crate::tape`] records these same
//! kernels and pairs each with an explicit backward rule.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{numeric_err, shape_err, Result};
use crate::math;
use crate::tensor::Tensor;

// ── raw kernels (row-major slices) ──────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stabilized softmax of one row, in place.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| math::exp(v - max)).sum();
    max + math::ln(sum)
}

// ── public eager surface ────────────────────────────────────────────────

/// a[m,k] · b[k,n] → [m,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(shape_err!("matmul inner dims {ka} vs {kb}"));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    matmul_acc(a.data(), b.data(), m, ka, n, out.data_mut());
    Ok(out)
}

/// Row-wise softmax. Rejects non-finite input.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(numeric_err!("softmax input contains non-finite values"));
    }
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        softmax_row(row);
    }
    out.grad = None;
    out.requires_grad = false;
    Ok(out)
}

/// Per-row normalization to mean 0 / variance 1, then `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.cols();
    if gamma.numel() != n || beta.numel() != n {
        return Err(shape_err!(
            "layer_norm affine dims {}/{} vs row width {n}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let mut out = Tensor::zeros(vec![x.rows(), n]);
    for (xrow, orow) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
        let (mean, rstd) = row_moments(xrow, eps);
        for i in 0..n {
            orow[i] = (xrow[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok(out)
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / math::sqrt(var + eps))
}

/// Elementwise GELU (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| math::gelu(v)).collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}

/// Mean negative log-likelihood over positions where `mask` is true.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || mask.len() != t {
        return Err(shape_err!(
            "cross_entropy expects {t} targets/mask flags, got {}/{}",
            targets.len(),
            mask.len()
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in logits.data().chunks(v).enumerate() {
        if !mask[i] {
            continue;
        }
        if targets[i] >= v {
            return Err(shape_err!("target {} out of vocab {v}", targets[i]));
        }
        total += logsumexp(row) - row[targets[i]];
        count += 1;
    }
    if count == 0 {
        return Err(numeric_err!("cross_entropy: all positions masked"));
    }
    Ok(total / count as f64)
}

// ── grid kernels (tokens of a side×side grid, row-major) ────────────────

/// Average pooling of a `side×side` token grid by an integer factor.
pub(crate) fn avg_pool_grid(
    x: &[f64],
    side: usize,
    channels: usize,
    factor: usize,
    out: &mut [f64],
) {
    let out_side = side / factor;
    debug_assert_eq!(out.len(), out_side * out_side * channels);
    let inv = 1.0 / (factor * factor) as f64;
    for orow in 0..out_side {
        for ocol in 0..out_side {
            let obase = (orow * out_side + ocol) * channels;
            for dr in 0..factor {
                let irow = orow * factor + dr;
                for dc in 0..factor {
                    let icol = ocol * factor + dc;
                    let ibase = (irow * side + icol) * channels;
                    for c in 0..channels {
                        out[obase + c] += x[ibase + c] * inv;
                    }
                }
            }
        }
    }
}

/// Bilinear sample positions for resizing `in_side` → `out_side`
/// (align-corners, so equal sides is the identity).
/// Returns per output index: (i0, i1, w0, w1) along one axis.
pub(crate) fn bilinear_axis(in_side: usize, out_side: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..out_side)
        .map(|o| {
            if out_side == 1 || in_side == 1 {
                return (0, 0, 1.0, 0.0);
            }
            let src = o as f64 * (in_side - 1) as f64 / (out_side - 1) as f64;
            let i0 = math::floor(src) as usize;
            let i1 = (i0 + 1).min(in_side - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![3.0, -1.5, 2.25, 7.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let x = Tensor::new(vec![1, 2], vec![math::ln(2.0), 0.0]).unwrap();
        let s = softmax_rows(&x).unwrap();
        assert_close(s.data()[0], 2.0 / 3.0, 1e-15);
        assert_close(s.data()[1], 1.0 / 3.0, 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = crate::rng::seeded(11);
        let x = Tensor::randn(vec![5, 7], 3.0, &mut rng);
        let shifted = Tensor::new(
            x.dims().to_vec(),
            x.data().iter().map(|v| v + 123.456).collect(),
        )
        .unwrap();
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert_close(*p, *q, 1e-12);
        }
        for row in a.data().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert_close(sum, 1.0, 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(softmax_rows(&x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full(vec![2, 4], 3.7);
        let g = Tensor::full(vec![4], 1.0);
        let b = Tensor::zeros(vec![4]);
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = crate::rng::seeded(3);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let g = Tensor::zeros(vec![4]);
        let b = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 9.0]).unwrap();
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn layer_norm_centers_random_rows() {
        let mut rng = crate::rng::seeded(5);
        let x = Tensor::randn(vec![6, 9], 4.0, &mut rng);
        let g = Tensor::full(vec![9], 1.0);
        let b = Tensor::zeros(vec![9]);
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for row in out.data().chunks(9) {
            let mean: f64 = row.iter().sum::<f64>() / 9.0;
            assert!(mean.abs() <= 1e-10, "{mean}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::new(vec![3], vec![0.0, 10.0, -10.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert_close(y.data()[1], 10.0, 1e-6);
        assert_close(y.data()[2], 0.0, 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let logits = Tensor::zeros(vec![3, 4]);
        let loss = cross_entropy(&logits, &[0, 1, 2], &[true, true, true]).unwrap();
        assert_eq!(loss, math::ln(4.0));
    }

    #[test]
    fn cross_entropy_saturated_is_tiny() {
        let mut logits = Tensor::zeros(vec![1, 5]);
        logits.data_mut()[2] = 1e4;
        let loss = cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-6, "{loss}");
    }

    #[test]
    fn cross_entropy_hand_example_with_masked_position() {
        // Three positions, middle one masked out.
        let logits = Tensor::new(
            vec![3, 3],
            vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0, 0.5, -0.5, 0.0],
        )
        .unwrap();
        let targets = [2usize, 0, 1];
        let mask = [true, false, true];
        // position 0: lse([1,2,3]) - 3; position 2: lse([.5,-.5,0]) + 0.5
        let lse0 = ((1f64).exp() + (2f64).exp() + (3f64).exp()).ln();
        let lse2 = ((0.5f64).exp() + (-0.5f64).exp() + 1.0).ln();
        let expected = ((lse0 - 3.0) + (lse2 + 0.5)) / 2.0;
        let loss = cross_entropy(&logits, &targets, &mask).unwrap();
        assert_close(loss, expected, 1e-12);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let logits = Tensor::zeros(vec![2, 3]);
        assert!(cross_entropy(&logits, &[0, 0], &[false, false]).is_err());
    }

    #[test]
    fn avg_pool_averages_blocks() {
        // 2x2 grid, 1 channel, factor 2 → single token = mean
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0];
        avg_pool_grid(&x, 2, 1, 2, &mut out);
        assert_eq!(out[0], 2.5);
    }

    #[test]
    fn bilinear_same_side_is_identity() {
        for side in [1usize, 3, 8] {
            for (o, (i0, _, w0, w1)) in bilinear_axis(side, side).iter().enumerate() {
                assert_eq!(*i0, o);
                assert_eq!(*w0, 1.0);
                assert_eq!(*w1, 0.0);
            }
        }
    }
}
