use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

/// One layer of the slice-wise global convolution block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.channels, self.kernel, self.stride)
    }
}

impl FromStr for ConvSpec {
    type Err = Error;

    /// Parses `channels:kernel:stride`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad conv spec {s:?}, expected channels:kernel:stride")))
        };
        match parts.as_slice() {
            [c, k, st] => Ok(Self::new(parse(c)?, parse(k)?, parse(st)?)),
            _ => Err(Error::Config(format!("bad conv spec {s:?}, expected channels:kernel:stride"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Global conv, SAT, shared neighborhood branches with CAT, weighted
    /// softmax aggregation.
    #[default]
    Scanet,
    /// Ablation: global conv and one shared residual branch per slice,
    /// mean-fused over slices. No attention.
    Baseline,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Scanet => "scanet",
            Variant::Baseline => "baseline",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scanet" => Ok(Variant::Scanet),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("unknown variant {other:?} (scanet | baseline)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_slices: usize,
    pub slice_height: usize,
    pub slice_width: usize,
    pub modality_channels: usize,
    pub global_conv: Vec<ConvSpec>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub sat_layers: usize,
    pub sat_mlp_hidden: usize,
    pub neighborhood_size: usize,
    pub branch_blocks: Vec<usize>,
    pub branch_widths: Vec<usize>,
    pub cat_mlp_hidden: usize,
    pub norm_groups: usize,
    pub num_classes: usize,
    pub dropout: f32,
    pub variant: Variant,
}

impl ModelConfig {
    /// 26 slices of 2×224×224, four stride-2 convolutions down to a 14×14
    /// token grid, branch depths [3, 4, 6, 3].
    pub fn paper_scale() -> Self {
        Self {
            num_slices: 26,
            slice_height: 224,
            slice_width: 224,
            modality_channels: 2,
            global_conv: vec![
                ConvSpec::new(16, 7, 2),
                ConvSpec::new(32, 3, 2),
                ConvSpec::new(64, 3, 2),
                ConvSpec::new(64, 3, 2),
            ],
            embed_dim: 64,
            num_heads: 4,
            sat_layers: 2,
            sat_mlp_hidden: 128,
            neighborhood_size: 2,
            branch_blocks: vec![3, 4, 6, 3],
            branch_widths: vec![32, 64, 128, 256],
            cat_mlp_hidden: 256,
            norm_groups: 8,
            num_classes: 2,
            dropout: 0.1,
            variant: Variant::Scanet,
        }
    }

    /// 8 slices of 2×32×32 with an 8×8 token grid.
    pub fn toy() -> Self {
        Self {
            num_slices: 8,
            slice_height: 32,
            slice_width: 32,
            modality_channels: 2,
            global_conv: vec![ConvSpec::new(16, 3, 2), ConvSpec::new(32, 3, 2)],
            embed_dim: 32,
            num_heads: 2,
            sat_layers: 1,
            sat_mlp_hidden: 64,
            neighborhood_size: 2,
            branch_blocks: vec![1, 1, 1, 1],
            branch_widths: vec![32, 32, 64, 64],
            cat_mlp_hidden: 64,
            norm_groups: 8,
            num_classes: 2,
            dropout: 0.3,
            variant: Variant::Scanet,
        }
    }

    /// 4 slices of 2×16×16, D=8, H=2: small enough for exhaustive
    /// finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_slices: 4,
            slice_height: 16,
            slice_width: 16,
            modality_channels: 2,
            global_conv: vec![ConvSpec::new(4, 3, 2), ConvSpec::new(8, 3, 2)],
            embed_dim: 8,
            num_heads: 2,
            sat_layers: 1,
            sat_mlp_hidden: 16,
            neighborhood_size: 2,
            branch_blocks: vec![1, 1],
            branch_widths: vec![8, 8],
            cat_mlp_hidden: 8,
            norm_groups: 2,
            num_classes: 2,
            dropout: 0.0,
            variant: Variant::Scanet,
        }
    }

    /// Spatial extent `(h', w')` after the global convolution block.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let mut hw = (self.slice_height, self.slice_width);
        for c in &self.global_conv {
            hw = (
                conv_output_extent(hw.0, c.kernel, c.stride, c.padding())
                    .map_err(|e| Error::Config(format!("global conv {c}: {e}")))?,
                conv_output_extent(hw.1, c.kernel, c.stride, c.padding())
                    .map_err(|e| Error::Config(format!("global conv {c}: {e}")))?,
            );
        }
        Ok(hw)
    }

    pub fn tokens(&self) -> Result<usize> {
        self.token_grid().map(|(h, w)| h * w)
    }

    /// Channels after the global convolution block.
    pub fn conv_channels(&self) -> usize {
        self.global_conv.last().map_or(self.modality_channels, |c| c.channels)
    }

    /// Number of neighborhood branches, `ceil(S / K)`.
    pub fn num_branches(&self) -> usize {
        self.num_slices.div_ceil(self.neighborhood_size.max(1))
    }

    /// Per-slice embedding size produced by a branch.
    pub fn branch_dim(&self) -> usize {
        *self.branch_widths.last().unwrap_or(&self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_slices == 0 || self.slice_height == 0 || self.slice_width == 0 || self.modality_channels == 0 {
            return fail("volume extents must be positive".into());
        }
        if self.num_classes != 2 {
            return fail(format!("num_classes must be 2, got {}", self.num_classes));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.neighborhood_size < 1 || self.neighborhood_size > self.num_slices {
            return fail(format!(
                "neighborhood_size {} outside [1, {}]",
                self.neighborhood_size, self.num_slices
            ));
        }
        if self.branch_blocks.is_empty() || self.branch_blocks.len() != self.branch_widths.len() {
            return fail("branch_blocks and branch_widths must be non-empty and equally long".into());
        }
        if self.branch_blocks.contains(&0) || self.branch_widths.contains(&0) {
            return fail("branch stages need at least one block and one channel".into());
        }
        if self.global_conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return fail("global conv layers need positive channels, kernel and stride".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.sat_mlp_hidden == 0 || self.cat_mlp_hidden == 0 {
            return fail("MLP hidden sizes must be positive".into());
        }
        let normalized = self.global_conv.iter().map(|c| c.channels).chain(self.branch_widths.iter().copied());
        for ch in normalized {
            if self.norm_groups == 0 || ch % self.norm_groups != 0 {
                return fail(format!("{ch} channels not divisible into {} norm groups", self.norm_groups));
            }
        }
        self.token_grid()?;
        Ok(())
    }

    /// Flat `key = value` view, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("num_slices", self.num_slices.to_string()),
            ("slice_height", self.slice_height.to_string()),
            ("slice_width", self.slice_width.to_string()),
            ("modality_channels", self.modality_channels.to_string()),
            (
                "global_conv",
                self.global_conv.iter().map(ConvSpec::to_string).collect::<Vec<_>>().join(","),
            ),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("sat_layers", self.sat_layers.to_string()),
            ("sat_mlp_hidden", self.sat_mlp_hidden.to_string()),
            ("neighborhood_size", self.neighborhood_size.to_string()),
            ("branch_blocks", list(&self.branch_blocks)),
            ("branch_widths", list(&self.branch_widths)),
            ("cat_mlp_hidden", self.cat_mlp_hidden.to_string()),
            ("norm_groups", self.norm_groups.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("dropout", self.dropout.to_string()),
            ("variant", self.variant.to_string()),
        ]
    }

    /// Sets one field from its `key = value` form. Returns `Ok(false)` for
    /// keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "num_slices" => self.num_slices = parse(key, v)?,
            "slice_height" => self.slice_height = parse(key, v)?,
            "slice_width" => self.slice_width = parse(key, v)?,
            "modality_channels" => self.modality_channels = parse(key, v)?,
            "global_conv" => {
                self.global_conv = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "num_heads" => self.num_heads = parse(key, v)?,
            "sat_layers" => self.sat_layers = parse(key, v)?,
            "sat_mlp_hidden" => self.sat_mlp_hidden = parse(key, v)?,
            "neighborhood_size" => self.neighborhood_size = parse(key, v)?,
            "branch_blocks" => self.branch_blocks = parse_list(key, v)?,
            "branch_widths" => self.branch_widths = parse_list(key, v)?,
            "cat_mlp_hidden" => self.cat_mlp_hidden = parse(key, v)?,
            "norm_groups" => self.norm_groups = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::paper_scale(), ModelConfig::toy(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::paper_scale().token_grid().unwrap(), (14, 14));
        assert_eq!(ModelConfig::toy().token_grid().unwrap(), (8, 8));
        assert_eq!(ModelConfig::tiny().token_grid().unwrap(), (4, 4));
        assert_eq!(ModelConfig::paper_scale().num_branches(), 13);
    }

    #[test]
    fn heads_must_divide_embedding() {
        let cfg = ModelConfig { num_heads: 3, ..ModelConfig::toy() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn neighborhood_bounds() {
        let mut cfg = ModelConfig::toy();
        cfg.neighborhood_size = 0;
        assert!(cfg.validate().is_err());
        cfg.neighborhood_size = 9;
        assert!(cfg.validate().is_err());
        cfg.neighborhood_size = 8;
        assert_eq!(cfg.num_branches(), 1);
    }

    #[test]
    fn pairs_round_trip() {
        let src = ModelConfig::paper_scale();
        let mut dst = ModelConfig::tiny();
        for (k, v) in src.to_pairs() {
            assert!(dst.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(src, dst);
        assert!(!dst.set("learning_rate", "1").unwrap());
        assert!(dst.set("embed_dim", "x").is_err());
    }
}
