//! Raw numeric kernels shared by the tape and the cache-based decode path.
//!
//! The incremental decoder reproduces full-forward logits to tight
//! tolerances, so both paths must accumulate in the same order. Keeping the
//! inner loops here, and only here, is what guarantees that.

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] * B[k,n]^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// out[n] = x[k] * W[k,n]. Same accumulation order as one `matmul_nn` row.
pub fn matvec(x: &[f64], w: &[f64], k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), k);
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0; n];
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w[p * n..(p + 1) * n];
        for (ov, &wv) in out.iter_mut().zip(wrow) {
            *ov += xv * wv;
        }
    }
    out
}

/// In-place stable softmax of one row. Rows of all -inf are a caller bug.
pub fn softmax_row(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Normalize one row, writing the pre-affine normalized values to `xhat` and
/// the affine output to `y`. Returns 1/sqrt(var + eps).
pub fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    xhat: &mut [f64],
    y: &mut [f64],
) -> f64 {
    let d = x.len() as f64;
    let mut mean = 0.0;
    for &v in x {
        mean += v;
    }
    mean /= d;
    let mut var = 0.0;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d;
    let inv_std = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        y[i] = xhat[i] * gain[i] + bias[i];
    }
    inv_std
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
