//! Spatial self-attention over slice tokens and cross attention over the
//! slices of a neighborhood.

use rand::Rng;

use super::layers::{LayerNorm, Linear, Mlp, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embed_dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            query: Linear::new(ps, &format!("{name}.query"), dim, dim, rng),
            key: Linear::without_bias(ps, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(ps, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(ps, &format!("{name}.output"), dim, dim, rng),
        })
    }

    /// `[N, T, D] -> [N*H, T, D/H]`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let &[n, t, d] = x.shape() else { unreachable!() };
        let dh = d / self.heads;
        x.reshape(&[n, t, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[n * self.heads, t, dh])
    }

    /// Self-attention over `[N, T, D]`. Returns the output and the attention
    /// probabilities `[N, H, T, T]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let &[n, t, d] = x.shape() else {
            return Err(Error::dim("attention", format!("expected [N, T, D], got {:?}", x.shape())));
        };
        let dh = d / self.heads;
        // scaling q (T×dh) is cheaper than scaling the T×T scores
        let q = self.split_heads(&self.query.forward(x)?)?.scale(1.0 / (dh as f32).sqrt());
        let k = self.split_heads(&self.key.forward(x)?)?;
        let v = self.split_heads(&self.value.forward(x)?)?;
        let scores = q.bmm(&k.transpose()?)?;
        let attn = scores.softmax(2)?;
        let ctx = attn
            .bmm(&v)?
            .reshape(&[n, self.heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, d])?;
        let maps = attn.reshape(&[n, self.heads, t, t])?;
        Ok((self.output.forward(&ctx)?, maps))
    }
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, hidden, rng),
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mut dropout: Dropout<'_, R>) -> Result<(Tensor, Tensor)> {
        let (a, maps) = self.attn.forward(&self.norm1.forward(x)?)?;
        let x = x.add(&dropout.apply(&a)?)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x.add(&dropout.apply(&m)?)?, maps))
    }
}

/// Dropout applied only while training.
pub struct Dropout<'a, R: ?Sized> {
    pub rate: f32,
    pub rng: Option<&'a mut R>,
}

impl<'a, R: Rng + ?Sized> Dropout<'a, R> {
    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => x.dropout(self.rate, rng),
            _ => Ok(x.clone()),
        }
    }

    pub fn reborrow(&mut self) -> Dropout<'_, R> {
        Dropout {
            rate: self.rate,
            rng: self.rng.as_deref_mut(),
        }
    }
}

/// Per-slice spatial attention transformer.
#[derive(Debug, Clone)]
pub struct Sat {
    pub proj: Linear,
    pub pos: Tensor,
    pub layers: Vec<EncoderLayer>,
}

impl Sat {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        in_ch: usize,
        tokens: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Linear::new(ps, "sat.proj", in_ch, dim, rng);
        let pos = ps.normal("sat.pos".into(), &[tokens, dim], 0.02, rng);
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(ps, &format!("sat.layer{i}"), dim, heads, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { proj, pos, layers })
    }

    /// `[N, C, h, w]` feature maps (one per slice) to `[N, T, D]` tokens,
    /// plus the attention maps of each layer (`[N, H, T, T]`).
    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mut dropout: Dropout<'_, R>) -> Result<(Tensor, Vec<Tensor>)> {
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::dim("sat", format!("expected [N, C, h, w], got {:?}", x.shape())));
        };
        let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])?;
        let mut z = self.proj.forward(&tokens)?.add(&self.pos)?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, m) = layer.forward(&z, dropout.reborrow())?;
            z = next;
            maps.push(m);
        }
        Ok((z, maps))
    }
}

/// Cross attention from one learned query over the `K` slice embeddings of
/// each neighborhood, followed by a residual MLP.
#[derive(Debug, Clone)]
pub struct Cat {
    pub query: Tensor,
    pub key: Linear,
    pub value: Linear,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Cat {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            query: ps.normal("cat.query".into(), &[dim, 1], (1.0 / dim as f32).sqrt(), rng),
            key: Linear::without_bias(ps, "cat.key", dim, dim, rng),
            value: Linear::new(ps, "cat.value", dim, dim, rng),
            norm: LayerNorm::new(ps, "cat.norm", dim),
            mlp: Mlp::new(ps, "cat.mlp", dim, hidden, rng),
        }
    }

    /// `[G, K, E]` to the fused `[G, E]` and slice weights `α` as `[G, K]`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let &[g, k, e] = x.shape() else {
            return Err(Error::dim("cat", format!("expected [G, K, E], got {:?}", x.shape())));
        };
        let keys = self.key.forward(x)?.reshape(&[g * k, e])?;
        let values = self.value.forward(x)?;
        let scores = keys.matmul(&self.query)?.reshape(&[g, k])?.scale(1.0 / (e as f32).sqrt());
        let alpha = scores.softmax(1)?;
        let fused = alpha.reshape(&[g, 1, k])?.bmm(&values)?.reshape(&[g, e])?;
        let out = fused.add(&self.mlp.forward(&self.norm.forward(&fused)?)?)?;
        Ok((out, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type Rng8 = ChaCha8Rng;

    fn no_dropout<'a>() -> Dropout<'a, Rng8> {
        Dropout { rate: 0.0, rng: None }
    }

    #[test]
    fn zero_projections_give_identity() {
        let mut ps = ParamSet::new();
        let mut rng = Rng8::seed_from_u64(3);
        let layer = EncoderLayer::new(&mut ps, "l", 8, 2, 16, &mut rng).unwrap();
        for t in [&layer.attn.value.weight, &layer.attn.output.weight, &layer.mlp.fc2.weight] {
            t.assign(&vec![0.0; t.numel()]).unwrap();
        }
        let x = Tensor::randn(&[3, 4, 8], 1.0, &mut rng);
        let (y, _) = layer.forward(&x, no_dropout()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn identical_slices_split_evenly() {
        let mut ps = ParamSet::new();
        let mut rng = Rng8::seed_from_u64(4);
        let cat = Cat::new(&mut ps, 6, 8, &mut rng);
        let row = Tensor::randn(&[1, 1, 6], 1.0, &mut rng).to_vec();
        let x = Tensor::new([row.clone(), row].concat(), &[1, 2, 6]).unwrap();
        let (_, alpha) = cat.forward(&x).unwrap();
        for a in alpha.to_vec() {
            assert!((a - 0.5).abs() < 1e-6);
        }
        let (_, alpha) = cat.forward(&Tensor::randn(&[2, 1, 6], 1.0, &mut rng)).unwrap();
        assert_eq!(alpha.to_vec(), vec![1.0, 1.0]);
    }
}
