//! Efficient paired attention.
//!
//! One block runs two attention branches over the same normalized tokens:
//!
//! * spatial attention, whose keys and values are first compressed along
//!   the token axis from `n` to `p` rows by learned maps, so the cost is
//!   `O(n·p)` instead of `O(n²)`;
//! * channel attention, which attends among the `d = C/h` channels of each
//!   head through a `d × d` map.
//!
//! Both branches take their queries and keys from a single shared linear
//! layer and use separate value layers. The branch outputs are summed,
//! re-volumized and passed through a 3×3×3 and a 1×1×1 conv block; the
//! result is added back onto the block input.

use rand::Rng;
use unetrpp_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, ConvBlock, LayerNorm, LayerSpec, Linear, Module, Param};

/// Default token-projection size, clamped to the token count per stage.
pub const DEFAULT_PROJ_DIM: usize = 64;

/// Rows of the attention score matrix materialized at once by
/// [`standard_attention`] is bounded so that `rows × n` stays below this.
const STANDARD_SCORE_BUDGET: usize = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpaConfig {
    pub channels: usize,
    pub tokens: usize,
    pub heads: usize,
    pub proj_dim: usize,
}

impl EpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tokens == 0 || self.heads == 0 || self.proj_dim == 0 {
            return Err(Error::Config(format!("EPA dimensions must be positive: {self:?}")));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("channels {} not divisible by heads {}", self.channels, self.heads)));
        }
        if self.proj_dim > self.tokens {
            return Err(Error::Config(format!(
                "projection size {} exceeds token count {}",
                self.proj_dim, self.tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Whether both attention branches use one query/key layer (the EPA
/// design) or each branch owns a copy (comparison variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkSharing {
    Shared,
    Unshared,
}

fn check_heads(op: &str, channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!("{op}: channels {channels} not divisible by heads {heads}")));
    }
    Ok(channels / heads)
}

fn check_tokens<T: Element>(op: &str, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c) = match *q.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::Shape(format!("{op}: queries must be n×C, got {:?}", q.shape()))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape(format!("{op}: q {:?}, k {:?}, v {:?} must agree", q.shape(), k.shape(), v.shape())));
    }
    Ok((n, c))
}

/// Spatial attention with token-projected keys and values.
///
/// Per head of width `d = C/h`: `softmax(Q · (k_proj·K)ᵀ / √d) · (v_proj·V)`.
/// The largest intermediate is the `n × p` score matrix of one head.
pub fn spatial_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    k_proj: &Tensor<T>,
    v_proj: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (n, c) = check_tokens("spatial_attention", q, k, v)?;
    let d = check_heads("spatial_attention", c, heads)?;
    let p = k_proj.shape()[0];
    if k_proj.shape() != [p, n] || v_proj.shape() != k_proj.shape() {
        return Err(Error::Shape(format!(
            "spatial_attention: projections {:?}/{:?} must be p×{n}",
            k_proj.shape(),
            v_proj.shape()
        )));
    }
    if p > n {
        return Err(Error::Config(format!("spatial_attention: p = {p} exceeds n = {n}")));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let k_small = k_proj.matmul(k)?; // p × C
    let v_small = v_proj.matmul(v)?; // p × C
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = q.narrow(1, h * d, d)?;
        let kt_h = k_small.narrow(1, h * d, d)?.transpose_last()?.scale(scale);
        let attn = q_h.matmul(&kt_h)?.softmax(1)?; // n × p
        outs.push(attn.matmul(&v_small.narrow(1, h * d, d)?)?);
    }
    concat_heads(outs)
}

/// Channel attention: per head, `V · softmax(Qᵀ·K / √d)` with the softmax
/// over the last axis of the `d × d` map.
pub fn channel_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (_, c) = check_tokens("channel_attention", q, k, v)?;
    let d = check_heads("channel_attention", c, heads)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = q.narrow(1, h * d, d)?;
        let k_h = k.narrow(1, h * d, d)?;
        let attn = q_h.transpose_last()?.matmul(&k_h)?.scale(scale).softmax(1)?; // d × d
        outs.push(v.narrow(1, h * d, d)?.matmul(&attn)?);
    }
    concat_heads(outs)
}

/// Scaled dot-product attention over all token pairs,
/// `softmax(Q·Kᵀ/√d)·V` per head. Quadratic in `n`; large score matrices
/// are processed in row blocks to bound memory.
pub fn standard_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (n, c) = check_tokens("standard_attention", q, k, v)?;
    let d = check_heads("standard_attention", c, heads)?;
    let scale = 1.0 / (d as f64).sqrt();
    let rows = (STANDARD_SCORE_BUDGET / n).clamp(1, n);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q_h = q.narrow(1, h * d, d)?;
        let kt_h = k.narrow(1, h * d, d)?.transpose_last()?.scale(scale);
        let v_h = v.narrow(1, h * d, d)?;
        let mut blocks = Vec::new();
        for start in (0..n).step_by(rows) {
            let len = rows.min(n - start);
            let q_blk = if len == n { q_h.clone() } else { q_h.narrow(0, start, len)? };
            let attn = q_blk.matmul(&kt_h)?.softmax(1)?;
            blocks.push(attn.matmul(&v_h)?);
        }
        outs.push(if blocks.len() == 1 { blocks.pop().unwrap() } else { Tensor::concat(&blocks, 0)? });
    }
    concat_heads(outs)
}

fn concat_heads<T: Element>(mut outs: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    if outs.len() == 1 {
        return Ok(outs.pop().unwrap());
    }
    Ok(Tensor::concat(&outs, 1)?)
}

/// Weights of one efficient paired attention block.
#[derive(Debug, Clone)]
pub struct EpaBlock<T: Element> {
    pub config: EpaConfig,
    pub pos_embed: Param<T>,
    pub norm: LayerNorm<T>,
    /// Query/key layer. Under [`QkSharing::Shared`] both branches read it.
    pub qk: Linear<T>,
    /// Channel-branch query/key layer of the unshared variant.
    pub qk_channel: Option<Linear<T>>,
    pub v_spatial: Linear<T>,
    pub v_channel: Linear<T>,
    pub k_proj: Param<T>,
    pub v_proj: Param<T>,
    pub fuse3: ConvBlock<T>,
    pub fuse1: ConvBlock<T>,
}

impl<T: Element> EpaBlock<T> {
    pub fn new<R: Rng>(name: &str, config: EpaConfig, sharing: QkSharing, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let EpaConfig { channels: c, tokens: n, proj_dim: p, .. } = config;
        let qk = Linear::new(&format!("{name}.qk"), c, c, rng);
        let qk_channel = match sharing {
            QkSharing::Shared => None,
            QkSharing::Unshared => Some(Linear::new(&format!("{name}.qk_channel"), c, c, rng)),
        };
        Ok(Self {
            config,
            pos_embed: Param::new(format!("{name}.pos_embed"), trunc_normal(rng, &[n, c], 0.02)),
            norm: LayerNorm::new(&format!("{name}.norm"), c),
            qk,
            qk_channel,
            v_spatial: Linear::new(&format!("{name}.v_spatial"), c, c, rng),
            v_channel: Linear::new(&format!("{name}.v_channel"), c, c, rng),
            k_proj: Param::new(format!("{name}.k_proj"), trunc_normal(rng, &[p, n], 0.02)),
            v_proj: Param::new(format!("{name}.v_proj"), trunc_normal(rng, &[p, n], 0.02)),
            fuse3: ConvBlock::new(&format!("{name}.fuse3"), &LayerSpec::conv_block(c, c, 3), rng)?,
            fuse1: ConvBlock::new(&format!("{name}.fuse1"), &LayerSpec::conv_block(c, c, 1), rng)?,
        })
    }

    pub fn sharing(&self) -> QkSharing {
        if self.qk_channel.is_some() {
            QkSharing::Unshared
        } else {
            QkSharing::Shared
        }
    }

    /// Copy of this block in the unshared layout, both branch query/key
    /// layers initialized from this block's shared one.
    pub fn to_unshared(&self) -> Self {
        let mut out = self.clone();
        let mut copy = self.qk.clone();
        copy.weight.name = copy.weight.name.replace(".qk.", ".qk_channel.");
        copy.bias.name = copy.bias.name.replace(".qk.", ".qk_channel.");
        copy.weight.tensor = copy.weight.tensor.detach().requires_grad();
        copy.bias.tensor = copy.bias.tensor.detach().requires_grad();
        out.qk.weight.tensor = out.qk.weight.tensor.detach().requires_grad();
        out.qk.bias.tensor = out.qk.bias.tensor.detach().requires_grad();
        out.qk_channel = Some(copy);
        out
    }

    /// `C × H × W × D` in, same shape out.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, n) = match *x.shape() {
            [c, h, w, d] => (c, h * w * d),
            _ => return Err(Error::Shape(format!("EPA block expects C×H×W×D, got {:?}", x.shape()))),
        };
        if c != self.config.channels || n != self.config.tokens {
            return Err(Error::Shape(format!(
                "EPA block configured for {} channels × {} tokens, got {c} × {n}",
                self.config.channels, self.config.tokens
            )));
        }
        let tokens = x.reshape(&[c, n])?.permute(&[1, 0])?;
        let xn = self.norm.forward(&tokens.add(&self.pos_embed.tensor)?)?;

        let qk_spatial = self.qk.forward(&xn)?;
        let qk_channel = self.qk_channel.as_ref().unwrap_or(&self.qk).forward(&xn)?;
        let v_spatial = self.v_spatial.forward(&xn)?;
        let v_channel = self.v_channel.forward(&xn)?;

        let heads = self.config.heads;
        let xs =
            spatial_attention(&qk_spatial, &qk_spatial, &v_spatial, &self.k_proj.tensor, &self.v_proj.tensor, heads)?;
        let xc = channel_attention(&qk_channel, &qk_channel, &v_channel, heads)?;

        let fused = xs.add(&xc)?.permute(&[1, 0])?.reshape(x.shape())?;
        let y = self.fuse1.forward(&self.fuse3.forward(&fused)?)?;
        Ok(x.add(&y)?)
    }
}

impl<T: Element> Module<T> for EpaBlock<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.pos_embed);
        self.norm.visit_params(f);
        self.qk.visit_params(f);
        if let Some(qc) = &self.qk_channel {
            qc.visit_params(f);
        }
        self.v_spatial.visit_params(f);
        self.v_channel.visit_params(f);
        f(&self.k_proj);
        f(&self.v_proj);
        self.fuse3.visit_params(f);
        self.fuse1.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.pos_embed);
        self.norm.visit_params_mut(f);
        self.qk.visit_params_mut(f);
        if let Some(qc) = &mut self.qk_channel {
            qc.visit_params_mut(f);
        }
        self.v_spatial.visit_params_mut(f);
        self.v_channel.visit_params_mut(f);
        f(&mut self.k_proj);
        f(&mut self.v_proj);
        self.fuse3.visit_params_mut(f);
        self.fuse1.visit_params_mut(f);
    }
}

/// Analytic parameter count of one block.
pub fn epa_param_count(cfg: &EpaConfig, sharing: QkSharing) -> usize {
    let EpaConfig { channels: c, tokens: n, proj_dim: p, .. } = *cfg;
    let linear = c * c + c;
    let qk_layers = match sharing {
        QkSharing::Shared => 1,
        QkSharing::Unshared => 2,
    };
    n * c                       // positional encoding
        + 2 * c                 // layer norm
        + (qk_layers + 2) * linear
        + 2 * p * n             // token projections
        + 27 * c * c + c        // 3×3×3 fusion
        + c * c + c // 1×1×1 fusion
}

/// FLOPs (2 × multiply-adds) of the spatial branch after the linear layers.
pub fn spatial_attention_flops(n: usize, p: usize, c: usize) -> u64 {
    // token projections of K and V, Q·K̃ᵀ, attn·Ṽ: each n·p·C
    2 * 4 * (n * p * c) as u64
}

pub fn channel_attention_flops(n: usize, c: usize, heads: usize) -> u64 {
    let d = c / heads;
    // Qᵀ·K and V·A: each n·d·d per head
    2 * 2 * (n * d * c) as u64
}

pub fn standard_attention_flops(n: usize, c: usize) -> u64 {
    2 * 2 * (n as u64) * (n as u64) * c as u64
}

/// FLOPs of one full block forward.
pub fn epa_block_flops(cfg: &EpaConfig) -> u64 {
    let EpaConfig { channels: c, tokens: n, heads, proj_dim: p } = *cfg;
    let nc2 = (n * c * c) as u64;
    // shared qk (evaluated once per branch) + two value layers
    let linears = 2 * 4 * nc2;
    let fusion = 2 * 27 * nc2 + 2 * nc2;
    linears + spatial_attention_flops(n, p, c) + channel_attention_flops(n, c, heads) + fusion
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        let ok = EpaConfig { channels: 8, tokens: 32, heads: 4, proj_dim: 8 };
        assert!(ok.validate().is_ok());
        assert!(EpaConfig { heads: 3, ..ok }.validate().is_err());
        assert!(EpaConfig { proj_dim: 33, ..ok }.validate().is_err());
        assert!(EpaConfig { proj_dim: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn single_token_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, &[1, 4]);
        let v = rand_tensor(&mut rng, &[1, 4]);
        let proj = Tensor::from_slice(&[0.7], &[1, 1]).unwrap();
        let out = spatial_attention(&q, &q, &v, &proj, &proj, 2).unwrap();
        let expect: Vec<f64> = v.data().iter().map(|x| x * 0.7).collect();
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn spatial_rejects_p_above_n() {
        let q = Tensor::<f64>::zeros(&[4, 4]);
        let proj = Tensor::<f64>::zeros(&[5, 4]);
        assert!(spatial_attention(&q, &q, &q, &proj, &proj, 2).is_err());
        let q3 = Tensor::<f64>::zeros(&[4, 6]);
        let p2 = Tensor::<f64>::zeros(&[2, 4]);
        assert!(spatial_attention(&q3, &q3, &q3, &p2, &p2, 4).is_err());
    }

    #[test]
    fn channel_single_channel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, &[5, 1]);
        let v = rand_tensor(&mut rng, &[5, 1]);
        let out = channel_attention(&q, &q, &v, 1).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn channel_rejects_shape_mismatch() {
        let q = Tensor::<f64>::zeros(&[4, 4]);
        let k = Tensor::<f64>::zeros(&[4, 2]);
        assert!(channel_attention(&q, &k, &q, 2).is_err());
    }

    #[test]
    fn chunked_standard_attention_matches_single_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 64;
        let (q, k, v) =
            (rand_tensor(&mut rng, &[n, 8]), rand_tensor(&mut rng, &[n, 8]), rand_tensor(&mut rng, &[n, 8]));
        let full = standard_attention(&q, &k, &v, 2).unwrap();
        // Row-block path through the same kernels.
        let d = 4;
        let mut heads = Vec::new();
        for h in 0..2 {
            let kt = k.narrow(1, h * d, d).unwrap().transpose_last().unwrap().scale(0.5);
            let vh = v.narrow(1, h * d, d).unwrap();
            let blocks: Vec<_> = (0..4)
                .map(|b| {
                    let qb = q.narrow(1, h * d, d).unwrap().narrow(0, b * 16, 16).unwrap();
                    qb.matmul(&kt).unwrap().softmax(1).unwrap().matmul(&vh).unwrap()
                })
                .collect();
            heads.push(Tensor::concat(&blocks, 0).unwrap());
        }
        let chunked = Tensor::concat(&heads, 1).unwrap();
        for (a, b) in full.data().iter().zip(chunked.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sharing_saves_one_linear_layer() {
        let cfg = EpaConfig { channels: 64, tokens: 64, heads: 4, proj_dim: 16 };
        let saved = epa_param_count(&cfg, QkSharing::Unshared) - epa_param_count(&cfg, QkSharing::Shared);
        assert_eq!(saved, 4160);
    }

    #[test]
    fn param_count_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cfg in [
            EpaConfig { channels: 8, tokens: 32, heads: 2, proj_dim: 8 },
            EpaConfig { channels: 12, tokens: 8, heads: 4, proj_dim: 8 },
        ] {
            for sharing in [QkSharing::Shared, QkSharing::Unshared] {
                let block = EpaBlock::<f32>::new("b", cfg, sharing, &mut rng).unwrap();
                assert_eq!(block.num_params(), epa_param_count(&cfg, sharing));
            }
        }
    }

    #[test]
    fn param_count_grows_with_projection() {
        let base = EpaConfig { channels: 16, tokens: 64, heads: 4, proj_dim: 1 };
        let counts: Vec<_> =
            (1..=64).map(|p| epa_param_count(&EpaConfig { proj_dim: p, ..base }, QkSharing::Shared)).collect();
        assert!(counts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_fusion_is_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EpaConfig { channels: 8, tokens: 32, heads: 4, proj_dim: 8 };
        let mut block = EpaBlock::<f64>::new("b", cfg, QkSharing::Shared, &mut rng).unwrap();
        block.fuse1.conv.weight.set_data(vec![0.0; 64]).unwrap();
        let x = rand_tensor(&mut rng, &[8, 4, 4, 2]);
        let y = block.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn block_rejects_wrong_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = EpaConfig { channels: 8, tokens: 32, heads: 4, proj_dim: 8 };
        let block = EpaBlock::<f64>::new("b", cfg, QkSharing::Shared, &mut rng).unwrap();
        assert!(block.forward(&Tensor::zeros(&[8, 4, 4, 4])).is_err());
        assert!(block.forward(&Tensor::zeros(&[4, 4, 4, 2])).is_err());
    }

    #[test]
    fn spatial_flops_linear_standard_quadratic() {
        let ratio = spatial_attention_flops(2048, 64, 32) as f64 / spatial_attention_flops(1024, 64, 32) as f64;
        assert_eq!(ratio, 2.0);
        let ratio = standard_attention_flops(2048, 32) as f64 / standard_attention_flops(1024, 32) as f64;
        assert_eq!(ratio, 4.0);
    }
}
