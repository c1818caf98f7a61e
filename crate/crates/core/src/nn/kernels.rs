//! Raw numeric kernels shared by the forward and backward passes.

/// `c = a · b + beta · c` where `a` is logically `[m, k]` and `b` is `[k, n]`.
///
/// With `a_t` set, `a` is stored as `[k, m]` and read transposed; likewise
/// `b_t` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length asserts above guarantee every index the strides can
    // reach lies inside the slices, and `c` does not alias `a` or `b`.
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    gelu_with_grad(x).0
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// `tanh` through one `exp`, several times cheaper than the libm routine.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// `gelu(x)` and its derivative from a single `tanh`.
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (y, dy)
}

/// In-place max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Max-subtracted log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Copies head `off..off + d` of rows `start..start + len` into `dst`.
fn gather_head(src: &[f64], width: usize, start: usize, len: usize, off: usize, d: usize, dst: &mut Vec<f64>) {
    dst.clear();
    for r in start..start + len {
        dst.extend_from_slice(&src[r * width + off..][..d]);
    }
}

fn scatter_head(src: &[f64], width: usize, start: usize, off: usize, d: usize, dst: &mut [f64]) {
    for (i, row) in src.chunks_exact(d).enumerate() {
        dst[(start + i) * width + off..][..d].copy_from_slice(row);
    }
}

/// Forward multi-head self-attention over ragged segments of rows.
///
/// `q`, `k`, `v` and the returned output are `[rows, width]`; each segment
/// `(start, len)` attends only within itself. Returns the output together
/// with the attention probabilities, laid out segment by segment, head by
/// head, as `len × len` blocks.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    width: usize,
    heads: usize,
    segments: &[(usize, usize)],
) -> (Vec<f64>, Vec<f64>) {
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; segments.iter().map(|s| s.1 * s.1 * heads).sum()];
    let (mut qh, mut kh, mut vh, mut oh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut base = 0;
    for &(start, len) in segments {
        for h in 0..heads {
            let off = h * d;
            gather_head(q, width, start, len, off, d, &mut qh);
            gather_head(k, width, start, len, off, d, &mut kh);
            gather_head(v, width, start, len, off, d, &mut vh);
            let p = &mut probs[base..base + len * len];
            base += len * len;
            gemm(len, d, len, &qh, false, &kh, true, 0.0, p);
            for row in p.chunks_exact_mut(len) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
            oh.clear();
            oh.resize(len * d, 0.0);
            gemm(len, len, d, p, false, &vh, false, 0.0, &mut oh);
            scatter_head(&oh, width, start, off, d, &mut out);
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    width: usize,
    heads: usize,
    segments: &[(usize, usize)],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = width / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let (mut qh, mut kh, mut vh, mut doh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut ds, mut g) = (Vec::new(), Vec::new());
    let mut base = 0;
    for &(start, len) in segments {
        for h in 0..heads {
            let off = h * d;
            let p = &probs[base..base + len * len];
            base += len * len;
            gather_head(q, width, start, len, off, d, &mut qh);
            gather_head(k, width, start, len, off, d, &mut kh);
            gather_head(v, width, start, len, off, d, &mut vh);
            gather_head(d_out, width, start, len, off, d, &mut doh);
            g.clear();
            g.resize(len * d, 0.0);
            // dV = P^T dO
            gemm(len, len, d, p, true, &doh, false, 0.0, &mut g);
            scatter_head(&g, width, start, off, d, &mut dv);
            // dP = dO V^T, then dS = P * (dP - rowsum(P * dP)) * scale
            ds.clear();
            ds.resize(len * len, 0.0);
            gemm(len, d, len, &doh, false, &vh, true, 0.0, &mut ds);
            for (srow, prow) in ds.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                let dot: f64 = srow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (s, &pij) in srow.iter_mut().zip(prow) {
                    *s = pij * (*s - dot) * scale;
                }
            }
            // dQ = dS K ; dK = dS^T Q
            gemm(len, len, d, &ds, false, &kh, false, 0.0, &mut g);
            scatter_head(&g, width, start, off, d, &mut dq);
            gemm(len, len, d, &ds, true, &qh, false, 0.0, &mut g);
            scatter_head(&g, width, start, off, d, &mut dk);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let width = 4;
        let q: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..12).map(|i| (i as f64 * 0.11).cos()).collect();
        let v = vec![1.0; 12];
        let (out, probs) = attention_forward(&q, &k, &v, width, 2, &[(0, 2), (2, 1)]);
        assert!(out.iter().all(|o| (o - 1.0).abs() < 1e-12));
        assert_eq!(probs.len(), 2 * 4 + 2);
        // the single-row segment attends only to itself
        assert_eq!(&probs[8..], &[1.0, 1.0]);
    }
}
