//! Matrix product kernels. Rows of the output are computed independently
//! (in parallel for large products) with a fixed inner summation order, so
//! results are bitwise reproducible for any thread count.

use super::Tensor;
use crate::error::{Error, Result};
use crate::par;

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// `a (m x k) . b (k x n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims(a);
    let (k2, n) = dims(b);
    if k != k2 || !a.is_matrix() || !b.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    });
    Tensor::matrix(m, n, out)
}

/// `a (m x k) . b^T` where `b` is `n x k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims(a);
    let (n, k2) = dims(b);
    if k != k2 || !a.is_matrix() || !b.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Tensor::matrix(m, n, out)
}

/// `a^T . b` where `a` is `m x k` and `b` is `m x n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims(a);
    let (m2, n) = dims(b);
    if m != m2 || !a.is_matrix() || !b.is_matrix() {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; k * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |p, row| {
        for i in 0..m {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &bd[i * n..(i + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    });
    Tensor::matrix(k, n, out)
}
