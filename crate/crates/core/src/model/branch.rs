//! Residual CNN applied to every slice of a neighborhood with one shared
//! parameter set.

use rand::Rng;

use super::layers::{Conv, GroupNorm, ParamSet};
use crate::error::Result;
use crate::tensor::Tensor;

/// conv3x3–norm–relu–conv3x3–norm plus identity (or 1×1 projection) skip.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv,
    pub norm1: GroupNorm,
    pub conv2: Conv,
    pub norm2: GroupNorm,
    pub shortcut: Option<(Conv, GroupNorm)>,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv::new(ps, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, false, rng);
        let norm1 = GroupNorm::new(ps, &format!("{name}.norm1"), out_ch, groups);
        let conv2 = Conv::new(ps, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false, rng);
        let norm2 = GroupNorm::new(ps, &format!("{name}.norm2"), out_ch, groups);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv::new(ps, &format!("{name}.proj"), in_ch, out_ch, 1, stride, false, rng),
                GroupNorm::new(ps, &format!("{name}.proj_norm"), out_ch, groups),
            )
        });
        Self { conv1, norm1, conv2, norm2, shortcut }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub blocks: Vec<BasicBlock>,
}

impl Branch {
    /// Stages of `blocks[i]` blocks at `widths[i]` channels; every stage
    /// after the first halves the grid.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        blocks: &[usize],
        widths: &[usize],
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let mut out = Vec::new();
        let mut ch = in_ch;
        for (s, (&n, &w)) in blocks.iter().zip(widths).enumerate() {
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push(BasicBlock::new(ps, &format!("{name}.stage{s}.block{b}"), ch, w, stride, groups, rng));
                ch = w;
            }
        }
        Self { blocks: out }
    }

    /// `[N, C, h, w]` slices to `[N, E]` pooled embeddings.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        h.mean_pool2d()
    }
}
