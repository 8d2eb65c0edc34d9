//! Softmax and normalization layers. Statistics are accumulated in `f64`.

use super::ops::axis_split;
use super::Tensor;
use crate::error::{Error, Result};

/// Standardizes consecutive rows of `row_len` elements. Returns the
/// standardized values and each row's `1/sqrt(var + eps)`.
fn standardize(x: &[f64], row_len: usize, eps: f32) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0f64; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / row_len);
    for (row, out) in x.chunks_exact(row_len).zip(xhat.chunks_exact_mut(row_len)) {
        let mean = row.iter().sum::<f64>() / row_len as f64;
        let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / row_len as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Input gradient of a standardization given the gradient w.r.t. `xhat`.
fn standardize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], row_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0f64; dxhat.len()];
    let m = row_len as f64;
    for (r, inv) in inv_std.iter().enumerate() {
        let span = r * row_len..(r + 1) * row_len;
        let (dh, xh) = (&dxhat[span.clone()], &xhat[span.clone()]);
        let sum_d: f64 = dh.iter().sum();
        let sum_dx: f64 = dh.iter().zip(xh).map(|(d, x)| d * x).sum();
        for ((o, d), x) in dx[span].iter_mut().zip(dh).zip(xh) {
            *o = inv * (d - sum_d / m - x * sum_dx / m);
        }
    }
    dx
}

impl Tensor {
    /// Softmax along `axis`, stabilized by subtracting each slice's maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {:?}", self.shape()),
            ));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite logits".into(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = vec![0.0f64; self.numel()];
        if inner == 1 {
            let x = self.data();
            for (src, dst) in x.chunks_exact(len).zip(data.chunks_exact_mut(len)) {
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - max).exp();
                    total += *d;
                }
                let inv = 1.0 / total;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        } else {
            let x = self.data();
            let mut buf = vec![0.0f64; len];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * len + k) * inner + i;
                    let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b = (x[at(k)] - max).exp();
                        total += *b;
                    }
                    for (k, b) in buf.iter().enumerate() {
                        data[at(k)] = b / total;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |out, g| {
                let y = out.data();
                let mut gx = vec![0.0f64; y.len()];
                if inner == 1 {
                    for ((gs, ys), dst) in g.chunks_exact(len).zip(y.chunks_exact(len)).zip(gx.chunks_exact_mut(len)) {
                        let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
                            *d = yv * (gv - dot);
                        }
                    }
                    return vec![Some(gx)];
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (`[D]`).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for feature size {d}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::Argument(format!("layer_norm eps {eps} must be positive")));
        }
        let (xhat, inv_std) = standardize(&self.data(), d, eps);
        let data = {
            let (gv, bv) = (gain.data(), bias.data());
            xhat.chunks_exact(d)
                .flat_map(|row| row.iter().zip(gv.iter()).zip(bv.iter()).map(|((x, g), b)| x * g + b))
                .collect()
        };
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |_, g| {
                let gv = gn.data();
                let dx = x.requires_grad().then(|| {
                    let dxhat: Vec<f64> = g
                        .chunks_exact(d)
                        .flat_map(|row| row.iter().zip(gv.iter()).map(|(g, w)| g * w))
                        .collect();
                    standardize_backward(&dxhat, &xhat, &inv_std, d)
                });
                let dgain = gn.requires_grad().then(|| {
                    let mut acc = vec![0.0f64; d];
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for ((a, gv), xv) in acc.iter_mut().zip(grow).zip(xrow) {
                            *a += gv * xv;
                        }
                    }
                    acc
                });
                let dbias = bs.requires_grad().then(|| {
                    let mut acc = vec![0.0f64; d];
                    for grow in g.chunks_exact(d) {
                        acc.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                    }
                    acc
                });
                vec![dx, dgain, dbias]
            },
        ))
    }

    /// Group normalization of `[B, C, H, W]` over `groups` channel groups,
    /// followed by a per-channel affine (`gain`, `bias` of shape `[C]`).
    pub fn group_norm(&self, groups: usize, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let &[_, channels, height, width] = self.shape() else {
            return Err(Error::dim("group_norm", format!("expected [B,C,H,W], got {:?}", self.shape())));
        };
        if groups == 0 || channels % groups != 0 {
            return Err(Error::dim(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        if gain.shape() != [channels] || bias.shape() != [channels] {
            return Err(Error::dim(
                "group_norm",
                format!("gain {:?} / bias {:?} for {channels} channels", gain.shape(), bias.shape()),
            ));
        }
        let plane = height * width;
        let group_len = channels / groups * plane;
        let (xhat, inv_std) = standardize(&self.data(), group_len, eps);
        let channel_of = move |i: usize| (i / plane) % channels;
        let data = {
            let (gv, bv) = (gain.data(), bias.data());
            xhat.iter()
                .enumerate()
                .map(|(i, x)| x * gv[channel_of(i)] + bv[channel_of(i)])
                .collect()
        };
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            "group_norm",
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            move |_, g| {
                let gv = gn.data();
                let dx = x.requires_grad().then(|| {
                    let dxhat: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * gv[channel_of(i)])
                        .collect();
                    standardize_backward(&dxhat, &xhat, &inv_std, group_len)
                });
                let mut dgain = vec![0.0f64; channels];
                let mut dbias = vec![0.0f64; channels];
                for (i, (gv, xv)) in g.iter().zip(&xhat).enumerate() {
                    let c = channel_of(i);
                    dgain[c] += gv * xv;
                    dbias[c] += gv;
                }
                vec![
                    dx,
                    gn.requires_grad().then_some(dgain),
                    bs.requires_grad().then_some(dbias),
                ]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn uniform_logits() {
        let y = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let y = t(&[1000.0, 0.0, -1000.0], &[3]).softmax(0).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-6);
        assert!(y[1].abs() < 1e-6 && y[2].abs() < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3), evaluated in f64
        let y = t(&[1.0, 2.0, 3.0], &[3]).softmax(0).unwrap().to_vec();
        for (a, b) in y.iter().zip([0.090031, 0.244728, 0.665241]) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_inner_axis() {
        let y = t(&[0.0, 5.0, 0.0, 5.0], &[2, 2]).softmax(0).unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(
            t(&[0.0, f32::NAN], &[2]).softmax(0),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn constant_vector_normalizes_to_zero() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = Tensor::full(&[2, 4], 3.5).layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_point_standardization() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let y = t(&[1.0, 3.0], &[2]).layer_norm(&ones, &zeros, 1e-12).unwrap().to_vec();
        assert!((y[0] + 1.0).abs() < 1e-6 && (y[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn group_norm_statistics() {
        let vals: Vec<f32> = (0..32).map(|v| (v as f32 * 0.37).sin()).collect();
        let x = t(&vals, &[1, 4, 2, 4]);
        let y = x
            .group_norm(2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-6)
            .unwrap()
            .to_vec();
        for group in y.chunks(16) {
            let mean: f32 = group.iter().sum::<f32>() / 16.0;
            let var: f32 = group.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
        assert!(x.group_norm(3, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-6).is_err());
    }
}
