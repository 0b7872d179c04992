//! Dense kernels shared by forward and backward passes.
//!
//! Matrix products go through `matrixmultiply`, which is single-threaded and
//! has a fixed reduction order, so results are bitwise reproducible.

/// `c = a·b` (or `c += a·b` when `accumulate`), where `a` is logically
/// `m×k` and `b` is logically `k×n`. A transposed operand is stored in the
/// row-major layout of its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: out too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every addressed element lies inside
    // the slices for the given dims and strides; `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `[batch, time, channels]` into rows of `kernel·channels` taps for a
/// same-padded dilated convolution. Out-of-range taps are zero.
pub(crate) fn im2col(
    x: &[f64],
    batch: usize,
    time: usize,
    channels: usize,
    kernel: usize,
    dilation: usize,
) -> Vec<f64> {
    let width = kernel * channels;
    let pad = (dilation * (kernel - 1) / 2) as isize;
    let mut cols = vec![0.0; batch * time * width];
    for b in 0..batch {
        for t in 0..time {
            let row = &mut cols[(b * time + t) * width..(b * time + t + 1) * width];
            for j in 0..kernel {
                let src = t as isize + (j * dilation) as isize - pad;
                if src < 0 || src >= time as isize {
                    continue;
                }
                let off = (b * time + src as usize) * channels;
                row[j * channels..(j + 1) * channels].copy_from_slice(&x[off..off + channels]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds tap gradients back onto the input.
pub(crate) fn col2im(
    cols: &[f64],
    batch: usize,
    time: usize,
    channels: usize,
    kernel: usize,
    dilation: usize,
    out: &mut [f64],
) {
    let width = kernel * channels;
    let pad = (dilation * (kernel - 1) / 2) as isize;
    for b in 0..batch {
        for t in 0..time {
            let row = &cols[(b * time + t) * width..(b * time + t + 1) * width];
            for j in 0..kernel {
                let src = t as isize + (j * dilation) as isize - pad;
                if src < 0 || src >= time as isize {
                    continue;
                }
                let off = (b * time + src as usize) * channels;
                for (o, g) in out[off..off + channels]
                    .iter_mut()
                    .zip(&row[j * channels..(j + 1) * channels])
                {
                    *o += g;
                }
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Orders like `total_cmp` except that `-0.0` and `0.0` compare equal.
fn rank_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    let z = |v: f64| if v == 0.0 { 0.0 } else { v };
    z(a).total_cmp(&z(b))
}

/// Indices of the `k` largest values, ties broken by lower index, in
/// descending-value order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp(values[b], values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Indices of the `k` smallest values, ties broken by lower index, in
/// ascending-value order.
pub fn bottom_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp(values[a], values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (b, t, c, k, d) = (2, 6, 3, 3, 2);
        let x: Vec<f64> = (0..b * t * c).map(|i| i as f64 * 0.5 - 3.0).collect();
        let cols = im2col(&x, b, t, c, k, d);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 11) as f64).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(p, q)| p * q).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, b, t, c, k, d, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn top_k_breaks_ties_by_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
        assert_eq!(bottom_k_indices(&[0.5, 0.1, 0.5, 0.1], 3), vec![1, 3, 0]);
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(bottom_k_indices(&[0.0, 0.5, -0.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[-0.0, -1.0, 0.0], 1), vec![0]);
    }
}
