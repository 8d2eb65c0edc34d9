//! Elementwise arithmetic, reductions and layout ops.

use rand::Rng;

use std::hash::Hash;

use super::{log_branches, numel_of, Tensor};
use crate::error::{Error, Result};

/// Length of the repeating block when `rhs` broadcasts over the leading axes
/// of `lhs` (its shape must equal a suffix of `lhs`).
fn suffix_period(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(numel_of(rhs))
    } else {
        Err(Error::dim(
            op,
            format!("cannot broadcast {rhs:?} onto {lhs:?}"),
        ))
    }
}

fn fold_period(g: &[f64], period: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; period];
    for chunk in g.chunks_exact(period) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    /// `self + other`, where `other` may broadcast over leading axes.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let period = suffix_period("add", self.shape(), other.shape())?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.chunks_exact(period)
                .flat_map(|c| c.iter().zip(b.iter()).map(|(x, y)| x + y))
                .collect()
        };
        let (pa, pb) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |_, g| {
                vec![
                    pa.then(|| g.to_vec()),
                    pb.then(|| fold_period(g, period)),
                ]
            },
        ))
    }

    /// `self - other`, where `other` may broadcast over leading axes.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    /// Elementwise product, where `other` may broadcast over leading axes.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let period = suffix_period("mul", self.shape(), other.shape())?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.chunks_exact(period)
                .flat_map(|c| c.iter().zip(b.iter()).map(|(x, y)| x * y))
                .collect()
        };
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |_, g| {
                let av = a.data();
                let bv = b.data();
                let ga = a.requires_grad().then(|| {
                    g.chunks_exact(period)
                        .flat_map(|c| c.iter().zip(bv.iter()).map(|(x, y)| x * y))
                        .collect()
                });
                let gb = b.requires_grad().then(|| {
                    let prod: Vec<f64> = g.iter().zip(av.iter()).map(|(x, y)| x * y).collect();
                    fold_period(&prod, period)
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let factor = factor as f64;
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, g| vec![Some(g.iter().map(|v| v * factor).collect())],
        )
    }

    pub fn add_scalar(&self, value: f32) -> Tensor {
        let value = value as f64;
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            |_, g| vec![Some(g.to_vec())],
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| v.max(0.0)).collect();
        log_branches(|h| self.data().iter().for_each(|&v| (v > 0.0).hash(h)));
        let x = self.clone();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, g| {
                let xv = x.data();
                vec![Some(
                    g.iter()
                        .zip(xv.iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            },
        )
    }

    /// Natural logarithm; every element must be positive.
    pub fn ln(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Numeric {
                op: "ln",
                detail: format!("non-positive or non-finite input {bad}"),
            });
        }
        let data = self.data().iter().map(|v| v.ln()).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            "ln",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, g| {
                let xv = x.data();
                vec![Some(g.iter().zip(xv.iter()).map(|(g, x)| g / x).collect())]
            },
        ))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, floor: f32) -> Tensor {
        let floor = floor as f64;
        let data = self.data().iter().map(|&v| v.max(floor)).collect();
        log_branches(|h| self.data().iter().for_each(|&v| (v >= floor).hash(h)));
        let x = self.clone();
        Tensor::from_op(
            "clamp_min",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, g| {
                let xv = x.data();
                vec![Some(
                    g.iter()
                        .zip(xv.iter())
                        .map(|(g, &x)| if x >= floor { *g } else { 0.0 })
                        .collect(),
                )]
            },
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |_, g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let mean = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![1], vec![mean], vec![self.clone()], move |_, g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(
                "mean_axis",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0f64; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|k| x[(o * len + k) * inner + i]).sum();
                    data[o * inner + i] = s / len as f64;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            "mean_axis",
            shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0f64; outer * len * inner];
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().clone(),
            vec![self.clone()],
            |_, g| vec![Some(g.to_vec())],
        ))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let n = self.shape()[0];
        self.reshape(&[n, self.numel() / n])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        // input offset advanced by each output axis
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src_index = permuted_offsets(&out_shape, &gather);
        let data = {
            let x = self.data();
            src_index.iter().map(|&i| x[i]).collect()
        };
        let n = self.numel();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0f64; n];
                for (o, &i) in src_index.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Gathers sub-tensors along axis 0. Indices may repeat; the backward
    /// pass sums the gradients of repeated rows.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "index_select",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::dim("index_select", "empty index list"));
        }
        let row = self.numel() / rows;
        let data = {
            let x = self.data();
            indices
                .iter()
                .flat_map(|&i| x[i * row..(i + 1) * row].iter().copied())
                .collect()
        };
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        let n = self.numel();
        Ok(Tensor::from_op(
            "index_select",
            shape,
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0f64; n];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[k * row..(k + 1) * row])
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Joins tensors along axis 0; trailing axes must agree.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no operands"))?;
        let tail = &first.shape()[1..];
        if let Some(bad) = parts.iter().find(|p| p.rank() == 0 || &p.shape()[1..] != tail) {
            return Err(Error::dim(
                "concat",
                format!("cannot join {:?} with {:?}", bad.shape(), first.shape()),
            ));
        }
        let lens: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        let mut shape = first.shape().to_vec();
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        let data = parts.iter().flat_map(|p| p.data().clone()).collect();
        Ok(Tensor::from_op("concat", shape, data, parts.to_vec(), move |_, g| {
            let mut at = 0;
            lens.iter()
                .map(|&n| {
                    at += n;
                    Some(g[at - n..at].to_vec())
                })
                .collect()
        }))
    }

    /// Picks one column per row of a `[B, C]` tensor, giving `[B]`.
    pub fn pick(&self, columns: &[usize]) -> Result<Tensor> {
        let &[rows, cols] = self.shape() else {
            return Err(Error::dim("pick", format!("expected rank 2, got {:?}", self.shape())));
        };
        if columns.len() != rows || columns.iter().any(|&c| c >= cols) {
            return Err(Error::dim(
                "pick",
                format!("{} column indices for shape {:?}", columns.len(), self.shape()),
            ));
        }
        let data = {
            let x = self.data();
            columns.iter().enumerate().map(|(r, &c)| x[r * cols + c]).collect()
        };
        let cols_idx = columns.to_vec();
        Ok(Tensor::from_op(
            "pick",
            vec![rows],
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0f64; rows * cols];
                for (r, &c) in cols_idx.iter().enumerate() {
                    gx[r * cols + c] = g[r];
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f32, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - rate as f64);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |_, g| vec![Some(g.iter().zip(&mask).map(|(g, m)| g * m).collect())],
        ))
    }
}

/// Source offsets for every element of a permuted view, in output order.
fn permuted_offsets(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n = numel_of(out_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        offsets.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += gather[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    offsets
}
