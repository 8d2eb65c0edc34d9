//! 2D convolution (cross-correlation) and pooling over `[B, C, H, W]`.

use std::cell::Cell;
use std::hash::Hash;

use super::linalg::{gemm, transpose2};
use super::{log_branches, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static CONV_BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while set on the current thread, conv2d's input gradient is
/// scaled by 1.5 so verification tooling can show that it catches a broken
/// backward pass.
pub fn set_conv_backward_fault(enabled: bool) {
    CONV_BACKWARD_FAULT.with(|f| f.set(enabled));
}

/// `floor((input + 2*padding - kernel) / stride) + 1`.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be at least 1"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one image into `[C*kh*kw, out_h*out_w]`, rows ordered by
    /// (channel, kernel row, kernel col).
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0f64; self.patch() * p];
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src = &img[(c * self.height + y as usize) * self.width..];
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                dst[oy * self.out_w + ox] = src[x as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds `[C*kh*kw, out_h*out_w]` columns back onto one image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - self.padding as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + y as usize) * self.width;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - self.padding as isize;
                            if x >= 0 && x < self.width as isize {
                                img[base + x as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlates `[B, C, H, W]` input with `[F, C, kh, kw]` kernels,
    /// plus an optional per-filter bias `[F]`.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (&[batch, channels, height, width], &[filters, kc, kh, kw]) =
            (self.shape(), kernels.shape())
        else {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "expected [B,C,H,W] input and [F,C,kh,kw] kernels, got {:?} and {:?}",
                    self.shape(),
                    kernels.shape()
                ),
            ));
        };
        if kc != channels {
            return Err(Error::dim(
                "conv2d",
                format!("input has {channels} channels, kernels expect {kc}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [filters] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} for {filters} filters", b.shape()),
                ));
            }
        }
        let geo = Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: conv_output_extent(height, kh, stride, padding)?,
            out_w: conv_output_extent(width, kw, stride, padding)?,
        };
        let (patch, positions) = (geo.patch(), geo.positions());
        let image_len = channels * height * width;

        let data = {
            let x = self.data();
            let w = kernels.data();
            let b = bias.map(|b| b.data());
            let mut out = vec![0.0f64; batch * filters * positions];
            for n in 0..batch {
                let cols = geo.im2col(&x[n * image_len..(n + 1) * image_len]);
                for f in 0..filters {
                    // accumulation order (bias, then channel, kernel row, kernel col)
                    let acc = &mut out[(n * filters + f) * positions..(n * filters + f + 1) * positions];
                    acc.fill(b.as_ref().map_or(0.0, |b| b[f]));
                    for (kk, &wv) in w[f * patch..(f + 1) * patch].iter().enumerate() {
                        for (a, &c) in acc.iter_mut().zip(&cols[kk * positions..(kk + 1) * positions]) {
                            *a += wv * c;
                        }
                    }
                }
            }
            out
        };

        let mut parents = vec![self.clone(), kernels.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (input, weight, has_bias) = (self.clone(), kernels.clone(), bias.is_some());
        let bias_grad = bias.is_some_and(|b| b.requires_grad());
        Ok(Tensor::from_op(
            "conv2d",
            vec![batch, filters, geo.out_h, geo.out_w],
            data,
            parents,
            move |_, g| {
                let x = input.data();
                let w = weight.data();
                let need_dx = input.requires_grad();
                let need_dw = weight.requires_grad();
                let wt = transpose2(&w, filters, patch);
                let mut dx = need_dx.then(|| vec![0.0f64; batch * image_len]);
                let mut dw = need_dw.then(|| vec![0.0f64; filters * patch]);
                let mut db = bias_grad.then(|| vec![0.0f64; filters]);
                for n in 0..batch {
                    let gn = &g[n * filters * positions..(n + 1) * filters * positions];
                    if let Some(dw) = dw.as_mut() {
                        let cols = geo.im2col(&x[n * image_len..(n + 1) * image_len]);
                        let part = gemm(gn, &transpose2(&cols, patch, positions), filters, positions, patch);
                        dw.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dcols = gemm(&wt, gn, patch, filters, positions);
                        geo.col2im(&dcols, &mut dx[n * image_len..(n + 1) * image_len]);
                    }
                    if let Some(db) = db.as_mut() {
                        for (f, d) in db.iter_mut().enumerate() {
                            *d += gn[f * positions..(f + 1) * positions].iter().sum::<f64>();
                        }
                    }
                }
                if CONV_BACKWARD_FAULT.with(Cell::get) {
                    if let Some(dx) = dx.as_mut() {
                        dx.iter_mut().for_each(|v| *v *= 1.5);
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(db);
                }
                grads
            },
        ))
    }

    /// Max pooling with a square window and no padding. Ties route the
    /// gradient to the first maximal element in row-major window order.
    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let &[batch, channels, height, width] = self.shape() else {
            return Err(Error::dim("max_pool2d", format!("expected [B,C,H,W], got {:?}", self.shape())));
        };
        let out_h = conv_output_extent(height, kernel, stride, 0)?;
        let out_w = conv_output_extent(width, kernel, stride, 0)?;
        let planes = batch * channels;
        let mut argmax = Vec::with_capacity(planes * out_h * out_w);
        let data = {
            let x = self.data();
            let mut out = Vec::with_capacity(argmax.capacity());
            for p in 0..planes {
                let plane = p * height * width;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = plane + oy * stride * width + ox * stride;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let i = plane + (oy * stride + ky) * width + ox * stride + kx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        argmax.push(best);
                        out.push(x[best]);
                    }
                }
            }
            out
        };
        log_branches(|h| argmax.hash(h));
        let n = self.numel();
        Ok(Tensor::from_op(
            "max_pool2d",
            vec![batch, channels, out_h, out_w],
            data,
            vec![self.clone()],
            move |_, g| {
                let mut gx = vec![0.0f64; n];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Global average pooling: `[B, C, H, W] -> [B, C]`.
    pub fn mean_pool2d(&self) -> Result<Tensor> {
        let &[batch, channels, height, width] = self.shape() else {
            return Err(Error::dim("mean_pool2d", format!("expected [B,C,H,W], got {:?}", self.shape())));
        };
        self.reshape(&[batch, channels, height * width])?.mean_axis(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_sum() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv2d(&k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let vals: Vec<f32> = (0..16).map(|v| v as f32 * 0.25 - 1.0).collect();
        let x = Tensor::new(vals.clone(), &[1, 1, 4, 4]).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = Tensor::new(kd, &[1, 1, 3, 3]).unwrap();
        assert_eq!(x.conv2d(&k, None, 1, 1).unwrap().to_vec(), vals);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(x.conv2d(&k, None, 1, 1), Err(Error::Dimension { .. })));
        assert!(x.conv2d(&k, None, 1, 2).is_ok());
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(conv_output_extent(32, 3, 2, 1).unwrap(), 16);
        assert!(conv_output_extent(5, 3, 0, 0).is_err());
    }

    #[test]
    fn bias_gradient_counts_positions() {
        let x = Tensor::full(&[2, 1, 3, 3], 0.5);
        let k = Tensor::parameter(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = Tensor::parameter(vec![0.0], &[1]).unwrap();
        x.conv2d(&k, Some(&b), 1, 0).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![8.0]);
        assert_eq!(k.grad().unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn mean_pool_block() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        assert_eq!(x.mean_pool2d().unwrap().to_vec(), vec![2.5]);
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let x = Tensor::parameter(vec![5.0, 5.0, 0.0, 0.0], &[1, 1, 2, 2]).unwrap();
        let y = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }
}
