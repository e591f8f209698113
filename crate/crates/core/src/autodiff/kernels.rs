//! Row-major dense kernels. Everything is written in axpy or lane-split dot
//! form so the inner loops vectorize without reassociation flags.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m x p] += a[m x n] * b[n x p]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        let a_row = &a[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, &b[k * p..(k + 1) * p], out_row);
            }
        }
    }
}

/// `out[m x p] += a[m x n] * b[p x n]^T`
pub fn matmul_t_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            out[i * p + j] += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `out[n x p] += a[m x n]^T * b[m x p]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                axpy(aik, b_row, &mut out[k * p..(k + 1) * p]);
            }
        }
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
