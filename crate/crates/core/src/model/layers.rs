//! Parameterized building blocks and the parameter registry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters in registration order. The order is the checkpoint order.
#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn register(&mut self, name: String, t: Tensor) -> Tensor {
        debug_assert!(self.entries.iter().all(|(n, _)| *n != name), "duplicate parameter {name}");
        self.entries.push((name, t.clone()));
        t
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], std: f32, rng: &mut R) -> Tensor {
        self.register(name, Tensor::randn(shape, std, rng).requiring_grad())
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> Tensor {
        self.register(name, Tensor::full(shape, value).requiring_grad())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.entries.iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, values: &[Vec<f32>]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} tensors, model has {}",
                values.len(),
                self.entries.len()
            )));
        }
        for ((_, t), v) in self.entries.iter().zip(values) {
            t.assign(v)?;
        }
        Ok(())
    }

    /// Loads named tensors; names, order and shapes must match exactly.
    pub fn load_named(&self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.entries.len()
            )));
        }
        for ((name, t), (src_name, src)) in self.entries.iter().zip(named) {
            if name != src_name || t.shape() != src.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint entry {src_name} {:?} does not match parameter {name} {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.assign(&src.to_vec())?;
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|(_, t)| t.zero_grad());
    }
}

/// `y = x W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f32).sqrt();
        Self {
            weight: ps.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng),
            bias: Some(ps.constant(format!("{name}.bias"), &[fan_out], 0.0)),
        }
    }

    /// `y = x W`. Used for attention keys, where a bias only shifts every
    /// score of a query equally and so never reaches the softmax output.
    pub fn without_bias<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / fan_in as f32).sqrt();
        Self {
            weight: ps.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng),
            bias: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let fan_in = self.weight.shape()[0];
        let fan_out = self.weight.shape()[1];
        let shape = x.shape();
        if shape.last() != Some(&fan_in) {
            return Err(Error::dim(
                "linear",
                format!("input {shape:?} for a {fan_in} -> {fan_out} layer"),
            ));
        }
        let rows = x.numel() / fan_in;
        let mut y = x.reshape(&[rows, fan_in])?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add(b)?;
        }
        let mut out = shape.to_vec();
        *out.last_mut().expect("rank >= 1") = fan_out;
        y.reshape(&out)
    }
}

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.constant(format!("{name}.gain"), &[dim], 1.0),
            bias: ps.constant(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gain: Tensor,
    pub bias: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            groups,
            gain: ps.constant(format!("{name}.gain"), &[channels], 1.0),
            bias: ps.constant(format!("{name}.bias"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(self.groups, &self.gain, &self.bias, NORM_EPS)
    }
}

/// Square-kernel convolution, padding `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        // He initialization for ReLU networks
        let std = (2.0 / (in_ch * kernel * kernel) as f32).sqrt();
        Self {
            weight: ps.normal(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], std, rng),
            bias: bias.then(|| ps.constant(format!("{name}.bias"), &[out_ch], 0.0)),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}
