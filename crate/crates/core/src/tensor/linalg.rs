use super::Tensor;
use crate::error::{Error, Result};

/// `C[m×n] = A[m×k] · B[k×n]`, row-major, accumulated in `f64`. Each
/// output sums its products in ascending `k` order, and products of `f32`
/// values are exact in `f64`, so after the op's single rounding the result
/// equals a plain triple loop carried out in `f64`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (c, &bv) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *c += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose2(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl Tensor {
    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::dim(
                "matmul",
                format!("expected two matrices, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let data = gemm(&self.data(), &other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let ga = a
                    .requires_grad()
                    .then(|| gemm(g, &transpose2(&b.data(), k, n), m, n, k));
                let gb = b
                    .requires_grad()
                    .then(|| gemm(&transpose2(&a.data(), m, k), g, k, m, n));
                vec![ga, gb]
            },
        ))
    }

    /// Batched matrix product of `[B, M, K]` and `[B, K, N]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (&[batch, m, k], &[batch2, k2, n]) = (self.shape(), other.shape()) else {
            return Err(Error::dim(
                "bmm",
                format!("expected rank-3 operands, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        };
        if batch != batch2 || k != k2 {
            return Err(Error::dim(
                "bmm",
                format!("incompatible shapes {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let data = {
            let (av, bv) = (self.data(), other.data());
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                out.extend(gemm(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            out
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "bmm",
            vec![batch, m, n],
            data,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let (av, bv) = (a.data(), b.data());
                let ga = a.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(batch * m * k);
                    for i in 0..batch {
                        let bt = transpose2(&bv[i * k * n..(i + 1) * k * n], k, n);
                        out.extend(gemm(&g[i * m * n..(i + 1) * m * n], &bt, m, n, k));
                    }
                    out
                });
                let gb = b.requires_grad().then(|| {
                    let mut out = Vec::with_capacity(batch * k * n);
                    for i in 0..batch {
                        let at = transpose2(&av[i * m * k..(i + 1) * m * k], m, k);
                        out.extend(gemm(&at, &g[i * m * n..(i + 1) * m * n], k, m, n));
                    }
                    out
                });
                vec![ga, gb]
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r} < 2")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }
}
