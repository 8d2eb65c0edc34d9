use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{Cat, Dropout, Sat};
use super::branch::Branch;
use super::config::{ModelConfig, Variant};
use super::layers::{Conv, GroupNorm, Linear, ParamSet};
use crate::data::PatientStudy;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, no_grad, save_checkpoint, Tensor};

/// Attention weights captured from one study's forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub tokens: usize,
    pub heads: usize,
    /// `[slice][layer][head]`, each a row-major `T×T` matrix.
    pub sat_maps: Vec<Vec<Vec<Vec<f32>>>>,
    /// `[neighborhood]`, weights over its `K` slices.
    pub cat_maps: Vec<Vec<f32>>,
}

impl AttentionRecord {
    pub fn is_empty(&self) -> bool {
        self.sat_maps.is_empty() && self.cat_maps.is_empty()
    }

    /// Every attention row, SAT rows first.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        let t = self.tokens.max(1);
        self.sat_maps
            .iter()
            .flatten()
            .flatten()
            .flat_map(move |m| m.chunks(t))
            .chain(self.cat_maps.iter().map(Vec::as_slice))
    }

    /// Largest `|row sum - 1|`; fails on a negative or non-finite entry.
    pub fn max_row_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for row in self.rows() {
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "attention",
                    detail: format!("invalid attention weight {v}"),
                });
            }
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            worst = worst.max((s - 1.0).abs());
        }
        Ok(worst)
    }
}

/// Probabilities `[N, 2]` for a batch and, when requested, one attention
/// record per study.
#[derive(Debug)]
pub struct ForwardOutput {
    pub probabilities: Tensor,
    pub attention: Vec<AttentionRecord>,
}

/// Contiguous groups of `k` slice indices; the last group repeats the final
/// slice when `k` does not divide `slices`.
pub fn neighborhood_partition(slices: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 1 || k > slices {
        return Err(Error::Config(format!("neighborhood size {k} outside [1, {slices}]")));
    }
    Ok((0..slices.div_ceil(k))
        .map(|g| (0..k).map(|j| (g * k + j).min(slices - 1)).collect())
        .collect())
}

/// Fuses per-branch class logits `[N, B, 2]` with softmax-normalized raw
/// branch weights `[B]` and returns class probabilities `[N, 2]`.
pub fn aggregate(branch_logits: &Tensor, raw_weights: &Tensor) -> Result<Tensor> {
    let &[n, b, c] = branch_logits.shape() else {
        return Err(Error::dim("aggregate", format!("expected [N, B, 2], got {:?}", branch_logits.shape())));
    };
    if raw_weights.shape() != [b] {
        return Err(Error::dim(
            "aggregate",
            format!("{:?} weights for {b} branches", raw_weights.shape()),
        ));
    }
    let omega = raw_weights.reshape(&[1, b])?.softmax(1)?.reshape(&[b, 1])?;
    let fused = branch_logits
        .permute(&[0, 2, 1])?
        .reshape(&[n * c, b])?
        .matmul(&omega)?
        .reshape(&[n, c])?;
    fused.softmax(1)
}

/// Class 1 only when its probability is strictly larger.
pub fn predicted_class(p: [f32; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

/// Stacks studies into `[N*S, 2, H, W]` with CT and CTA as channels.
pub fn stack_studies(studies: &[&PatientStudy]) -> Result<Tensor> {
    let first = studies.first().ok_or_else(|| Error::Argument("no studies to stack".into()))?;
    let (s, h, w) = first.dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(studies.len() * s * 2 * plane);
    for st in studies {
        if st.dims() != (s, h, w) {
            return Err(Error::Config(format!(
                "study {} has shape {:?}, batch expects {:?}",
                st.id,
                st.dims(),
                (s, h, w)
            )));
        }
        for i in 0..s {
            data.extend_from_slice(&st.ct[i * plane..(i + 1) * plane]);
            data.extend_from_slice(&st.cta[i * plane..(i + 1) * plane]);
        }
    }
    Tensor::new(data, &[studies.len() * s, 2, h, w])
}

#[derive(Debug, Clone)]
pub struct ScaNet {
    config: ModelConfig,
    params: ParamSet,
    global: Vec<(Conv, GroupNorm)>,
    sat: Option<Sat>,
    branch: Branch,
    cat: Option<Cat>,
    head: Linear,
    branch_weights: Option<Tensor>,
}

impl ScaNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut global = Vec::new();
        let mut ch = config.modality_channels;
        for (i, spec) in config.global_conv.iter().enumerate() {
            let conv = Conv::new(&mut ps, &format!("global{i}.conv"), ch, spec.channels, spec.kernel, spec.stride, false, &mut rng);
            let conv = Conv { padding: spec.padding(), ..conv };
            let norm = GroupNorm::new(&mut ps, &format!("global{i}.norm"), spec.channels, config.norm_groups);
            global.push((conv, norm));
            ch = spec.channels;
        }
        let full = config.variant == Variant::Scanet;
        let sat = if full {
            Some(Sat::new(
                &mut ps,
                ch,
                config.tokens()?,
                config.embed_dim,
                config.num_heads,
                config.sat_layers,
                config.sat_mlp_hidden,
                &mut rng,
            )?)
        } else {
            None
        };
        let branch_in = if full { config.embed_dim } else { ch };
        let branch = Branch::new(
            &mut ps,
            "branch",
            branch_in,
            &config.branch_blocks,
            &config.branch_widths,
            config.norm_groups,
            &mut rng,
        );
        let e = config.branch_dim();
        let cat = full.then(|| Cat::new(&mut ps, e, config.cat_mlp_hidden, &mut rng));
        let head = Linear::new(&mut ps, "head", e, config.num_classes, &mut rng);
        let branch_weights = full.then(|| ps.constant("aggregate.weights".into(), &[config.num_branches()], 0.0));
        Ok(Self {
            config: config.clone(),
            params: ps,
            global,
            sat,
            branch,
            cat,
            head,
            branch_weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn branch(&self) -> &Branch {
        &self.branch
    }

    pub fn branch_weights(&self) -> Option<&Tensor> {
        self.branch_weights.as_ref()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let c = &self.config;
        let expect = [c.modality_channels, c.slice_height, c.slice_width];
        match x.shape() {
            [ns, rest @ ..] if rest == expect && ns % c.num_slices == 0 => Ok(ns / c.num_slices),
            other => Err(Error::Config(format!(
                "input {other:?} does not match [N*{}, {}, {}, {}]",
                c.num_slices, expect[0], expect[1], expect[2]
            ))),
        }
    }

    /// The same 2D conv stack on every slice: `[M, C, H, W] -> [M, C1, h', w']`.
    pub fn global_conv_block(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, norm) in &self.global {
            h = norm.forward(&conv.forward(&h)?)?.relu();
        }
        Ok(h)
    }

    /// Per-slice spatial attention: `[M, C1, h', w'] -> [M, T, D]` and the
    /// attention maps of each layer, `[M, H, T, T]`.
    pub fn sat_forward(&self, features: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Vec<Tensor>)> {
        let sat = self.sat.as_ref().ok_or_else(|| Error::Config("baseline variant has no SAT".into()))?;
        sat.forward(
            features,
            Dropout {
                rate: self.config.dropout,
                rng,
            },
        )
    }

    /// Tokens `[N*S, T, D]` regrouped into `[N*B*K, D, h', w']` slice grids.
    pub fn partition_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (gh, gw) = c.token_grid()?;
        let ns = tokens.shape()[0];
        let groups = neighborhood_partition(c.num_slices, c.neighborhood_size)?;
        let index: Vec<usize> = (0..ns / c.num_slices)
            .flat_map(|n| groups.iter().flatten().map(move |&s| n * c.num_slices + s))
            .collect();
        let m = index.len();
        tokens
            .index_select(&index)?
            .permute(&[0, 2, 1])?
            .reshape(&[m, c.embed_dim, gh, gw])
    }

    /// Shared residual branch: `[M, D, h', w'] -> [M, E]`.
    pub fn branch_forward(&self, grids: &Tensor) -> Result<Tensor> {
        self.branch.forward(grids)
    }

    /// Slice fusion: `[G, K, E] -> ([G, E], α [G, K])`.
    pub fn cat_forward(&self, slices: &Tensor) -> Result<(Tensor, Tensor)> {
        self.cat
            .as_ref()
            .ok_or_else(|| Error::Config("baseline variant has no CAT".into()))?
            .forward(slices)
    }

    /// Neighborhood embeddings `[N*B*K, E]` to class probabilities `[N, 2]`,
    /// returning the CAT weights as well.
    pub fn fuse_branches(&self, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        let (b, k, e) = (c.num_branches(), c.neighborhood_size, c.branch_dim());
        let n = embeddings.shape()[0] / (b * k);
        let (fused, alpha) = self.cat_forward(&embeddings.reshape(&[n * b, k, e])?)?;
        let logits = self.head.forward(&fused)?.reshape(&[n, b, c.num_classes])?;
        let weights = self.branch_weights.as_ref().expect("scanet variant has branch weights");
        Ok((aggregate(&logits, weights)?, alpha))
    }

    /// Full forward pass over `[N*S, C, H, W]`. `rng` enables dropout.
    pub fn forward(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>, record: bool) -> Result<ForwardOutput> {
        let n = self.check_input(x)?;
        let features = self.global_conv_block(x)?;
        if self.config.variant == Variant::Baseline {
            return Ok(ForwardOutput {
                probabilities: self.baseline_head(&features, n)?,
                attention: Vec::new(),
            });
        }
        let (tokens, maps) = self.sat_forward(&features, rng)?;
        let grids = self.partition_tokens(&tokens)?;
        let embeddings = self.branch_forward(&grids)?;
        let (probabilities, alpha) = self.fuse_branches(&embeddings)?;
        let attention = if record {
            self.collect_attention(n, &maps, &alpha)?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput { probabilities, attention })
    }

    fn baseline_head(&self, features: &Tensor, n: usize) -> Result<Tensor> {
        let c = &self.config;
        let e = self.branch_forward(features)?;
        let pooled = e.reshape(&[n, c.num_slices, c.branch_dim()])?.mean_axis(1)?;
        self.head.forward(&pooled)?.softmax(1)
    }

    fn collect_attention(&self, n: usize, maps: &[Tensor], alpha: &Tensor) -> Result<Vec<AttentionRecord>> {
        let c = &self.config;
        let t = c.tokens()?;
        let (s, h, b) = (c.num_slices, c.num_heads, c.num_branches());
        let layer_data: Vec<Vec<f32>> = maps.iter().map(Tensor::to_vec).collect();
        let alpha = alpha.to_vec();
        let k = c.neighborhood_size;
        Ok((0..n)
            .map(|i| AttentionRecord {
                tokens: t,
                heads: h,
                sat_maps: (0..s)
                    .map(|sl| {
                        layer_data
                            .iter()
                            .map(|d| {
                                (0..h)
                                    .map(|hd| {
                                        let at = (((i * s + sl) * h) + hd) * t * t;
                                        d[at..at + t * t].to_vec()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
                cat_maps: (0..b).map(|g| alpha[(i * b + g) * k..(i * b + g + 1) * k].to_vec()).collect(),
            })
            .collect())
    }

    /// Evaluation-mode probabilities for a batch of studies.
    pub fn predict(&self, studies: &[&PatientStudy], record: bool) -> Result<(Vec<[f32; 2]>, Vec<AttentionRecord>)> {
        no_grad(|| {
            let out = self.forward(&stack_studies(studies)?, None, record)?;
            let p = out.probabilities.to_vec();
            Ok((p.chunks_exact(2).map(|r| [r[0], r[1]]).collect(), out.attention))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, self.params.entries())
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        self.params.load_named(&load_checkpoint(path)?)
    }

    /// Text description written beside every checkpoint: the configuration
    /// as `key = value` lines plus the parameter count.
    pub fn model_card(&self) -> String {
        let mut s = String::from("# SCANet model card\n");
        for (k, v) in self.config.to_pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("parameter_count = {}\n", self.parameter_count()));
        s
    }
}

/// Rebuilds the configuration recorded in a model card.
pub fn parse_model_card(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::toy();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("model card line without '=': {line:?}")))?;
        let k = k.trim();
        if !cfg.set(k, v)? && k != "parameter_count" {
            return Err(Error::Config(format!("unknown model card key {k:?}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_examples() {
        assert_eq!(neighborhood_partition(5, 2).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4, 4]]);
        assert_eq!(neighborhood_partition(26, 2).unwrap().len(), 13);
        assert_eq!(neighborhood_partition(4, 4).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(matches!(neighborhood_partition(4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_hand_values() {
        let z = Tensor::new(vec![0.0, 0.0], &[1, 1, 2]).unwrap();
        let p = aggregate(&z, &Tensor::new(vec![3.0], &[1]).unwrap()).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        // equal raw weights give ω = [0.5, 0.5]
        let z = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 2]).unwrap();
        let p = aggregate(&z, &Tensor::new(vec![0.7, 0.7], &[2]).unwrap()).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
        assert_eq!(predicted_class([0.5, 0.5]), 0);
    }

    #[test]
    fn card_round_trip() {
        let net = ScaNet::new(&ModelConfig::tiny(), 0).unwrap();
        let card = net.model_card();
        assert!(card.contains(&format!("parameter_count = {}", net.parameter_count())));
        assert_eq!(parse_model_card(&card).unwrap(), ModelConfig::tiny());
    }

    #[test]
    fn input_shape_is_checked() {
        let net = ScaNet::new(&ModelConfig::tiny(), 0).unwrap();
        let bad = Tensor::zeros(&[3, 2, 16, 16]);
        assert!(matches!(net.forward(&bad, None, false), Err(Error::Config(_))));
    }
}
