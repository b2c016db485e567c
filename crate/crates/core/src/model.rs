//! Hierarchical encoder-decoder segmentation network.
//!
//! Encoder: a patch-embedding conv followed by four stages of EPA blocks,
//! stages 2–4 entered through a 2×2×2 strided conv that doubles channels.
//! Decoder: three upsampling stages (deconv, additive skip, EPA blocks) and
//! a final deconv back to input resolution followed by a 3×3×3 conv block.
//! A conv stem on the raw input is added to the decoder output before the
//! segmentation head.

use rand::Rng;
use unetrpp_tensor::{Element, Tensor};

use crate::epa::{epa_block_flops, epa_param_count, EpaBlock, EpaConfig, QkSharing, DEFAULT_PROJ_DIM};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, ConvBlock, Deconv3d, LayerKind, LayerSpec, Module, Param};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_extents: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch: [usize; 3],
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub proj_dim: usize,
    pub stem_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_extents: [128, 128, 64],
            in_channels: 1,
            num_classes: 9,
            patch: [4, 4, 2],
            stage_channels: [32, 64, 128, 256],
            blocks_per_stage: 3,
            heads: 4,
            proj_dim: DEFAULT_PROJ_DIM,
            stem_channels: 16,
        }
    }
}

impl ModelConfig {
    /// Full-size multi-organ configuration.
    pub fn synapse() -> Self {
        Self::default()
    }

    /// Small model used for the overfitting check.
    pub fn toy() -> Self {
        Self {
            input_extents: [16, 16, 16],
            num_classes: 3,
            patch: [2, 2, 2],
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            heads: 2,
            proj_dim: 16,
            stem_channels: 8,
            ..Self::default()
        }
    }

    /// Smallest configuration exercising every layer, for gradient checks.
    pub fn minimal() -> Self {
        Self {
            input_extents: [16, 16, 8],
            num_classes: 2,
            patch: [2, 2, 1],
            stage_channels: [4, 8, 16, 32],
            blocks_per_stage: 1,
            heads: 2,
            proj_dim: 4,
            stem_channels: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes == 0 || self.stem_channels == 0 {
            return bad("in_channels, num_classes and stem_channels must be positive".into());
        }
        if self.heads == 0 || self.proj_dim == 0 {
            return bad("heads and proj_dim must be positive".into());
        }
        for axis in 0..3 {
            let (e, p) = (self.input_extents[axis], self.patch[axis]);
            if e == 0 || p == 0 {
                return bad(format!("axis {axis}: extent and patch must be positive"));
            }
            if e % (p * 8) != 0 {
                return bad(format!("axis {axis}: extent {e} is not a multiple of patch·8 = {}", p * 8));
            }
        }
        if self.stage_channels[0] == 0 {
            return bad("stage channels must be positive".into());
        }
        for s in 1..NUM_STAGES {
            if self.stage_channels[s] != 2 * self.stage_channels[s - 1] {
                return bad(format!("stage channels {:?} must double per stage", self.stage_channels));
            }
        }
        if !self.stage_channels[0].is_multiple_of(self.heads) {
            return bad(format!("stage channels {} not divisible by {} heads", self.stage_channels[0], self.heads));
        }
        Ok(())
    }

    /// Spatial grid of encoder stage `s` (0-based).
    pub fn stage_grid(&self, s: usize) -> [usize; 3] {
        std::array::from_fn(|a| (self.input_extents[a] / self.patch[a]) >> s)
    }

    pub fn stage_tokens(&self, s: usize) -> usize {
        self.stage_grid(s).iter().product()
    }

    pub fn epa_config(&self, s: usize) -> EpaConfig {
        let tokens = self.stage_tokens(s);
        EpaConfig { channels: self.stage_channels[s], tokens, heads: self.heads, proj_dim: self.proj_dim.min(tokens) }
    }

    pub fn num_voxels(&self) -> usize {
        self.input_extents.iter().product()
    }

    fn with_extents(&self, extents: [usize; 3]) -> Self {
        Self { input_extents: extents, ..self.clone() }
    }
}

fn epa_stack<T: Element, R: Rng>(prefix: &str, cfg: EpaConfig, count: usize, rng: &mut R) -> Result<Vec<EpaBlock<T>>> {
    (0..count).map(|b| EpaBlock::new(&format!("{prefix}.block{b}"), cfg, QkSharing::Shared, rng)).collect()
}

fn run_stack<T: Element>(blocks: &[EpaBlock<T>], x: Tensor<T>) -> Result<Tensor<T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(&x))
}

fn pointwise_spec(c_in: usize, c_out: usize) -> LayerSpec {
    LayerSpec { kind: LayerKind::Conv3d, in_channels: c_in, out_channels: c_out, kernel: [1; 3], stride: [1; 3] }
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T: Element> {
    pub up: Deconv3d<T>,
    pub blocks: Vec<EpaBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Element> {
    pub config: ModelConfig,
    pub patch_embed: Conv3d<T>,
    /// `down[s]` enters encoder stage `s + 1`.
    pub down: Vec<Conv3d<T>>,
    pub enc_blocks: Vec<Vec<EpaBlock<T>>>,
    /// `dec[s]` upsamples into the grid of encoder stage `s` (s = 0..3).
    pub dec: Vec<DecoderStage<T>>,
    pub final_up: Deconv3d<T>,
    pub final_conv: ConvBlock<T>,
    pub stem: ConvBlock<T>,
    pub head_conv: ConvBlock<T>,
    pub head_out: Conv3d<T>,
}

impl<T: Element> SegModel<T> {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let nb = config.blocks_per_stage;
        let patch_embed =
            Conv3d::new("enc.patch_embed", &LayerSpec::down(config.in_channels, ch[0], config.patch), rng)?;
        let mut down = Vec::new();
        let mut enc_blocks = Vec::new();
        for s in 0..NUM_STAGES {
            if s > 0 {
                down.push(Conv3d::new(&format!("enc.stage{s}.down"), &LayerSpec::down(ch[s - 1], ch[s], [2; 3]), rng)?);
            }
            enc_blocks.push(epa_stack(&format!("enc.stage{s}"), config.epa_config(s), nb, rng)?);
        }
        let mut dec = Vec::new();
        for s in 0..NUM_STAGES - 1 {
            let up = Deconv3d::new(&format!("dec.stage{s}.up"), &LayerSpec::up(ch[s + 1], ch[s], [2; 3]), rng)?;
            let blocks = epa_stack(&format!("dec.stage{s}"), config.epa_config(s), nb, rng)?;
            dec.push(DecoderStage { up, blocks });
        }
        let stem_c = config.stem_channels;
        let final_up = Deconv3d::new("dec.final.up", &LayerSpec::up(ch[0], stem_c, config.patch), rng)?;
        let final_conv = ConvBlock::new("dec.final.conv", &LayerSpec::conv_block(stem_c, stem_c, 3), rng)?;
        let stem = ConvBlock::new("stem.conv", &LayerSpec::conv_block(config.in_channels, stem_c, 3), rng)?;
        let head_conv = ConvBlock::new("head.conv", &LayerSpec::conv_block(stem_c, stem_c, 3), rng)?;
        let head_out = Conv3d::new("head.out", &pointwise_spec(stem_c, config.num_classes), rng)?;
        Ok(Self { config, patch_embed, down, enc_blocks, dec, final_up, final_conv, stem, head_conv, head_out })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let cfg = &self.config;
        let expect = [cfg.in_channels, cfg.input_extents[0], cfg.input_extents[1], cfg.input_extents[2]];
        if x.shape() != expect {
            return Err(Error::Shape(format!("model expects input {expect:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    pub fn patch_embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.patch_embed.forward(x)
    }

    /// Outputs of the four encoder stages, shallowest first.
    pub fn encoder_forward(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut h = self.patch_embed(x)?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            if s > 0 {
                h = self.down[s - 1].forward(&h)?;
            }
            h = run_stack(&self.enc_blocks[s], h)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Decodes encoder outputs to a `stem_channels × H × W × D` volume.
    pub fn decoder_forward(&self, enc: &[Tensor<T>]) -> Result<Tensor<T>> {
        if enc.len() != NUM_STAGES {
            return Err(Error::Shape(format!("decoder expects {NUM_STAGES} encoder outputs, got {}", enc.len())));
        }
        let mut h = enc[NUM_STAGES - 1].clone();
        for s in (0..NUM_STAGES - 1).rev() {
            let stage = &self.dec[s];
            let up = stage.up.forward(&h)?;
            if up.shape() != enc[s].shape() {
                return Err(Error::Shape(format!(
                    "skip at stage {s}: upsampled {:?} vs encoder {:?}",
                    up.shape(),
                    enc[s].shape()
                )));
            }
            h = run_stack(&stage.blocks, up.add(&enc[s])?)?;
        }
        self.final_conv.forward(&self.final_up.forward(&h)?)
    }

    /// Voxel-wise class logits, `num_classes × H × W × D`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let enc = self.encoder_forward(x)?;
        let dec = self.decoder_forward(&enc)?;
        let fused = dec.add(&self.stem.forward(x)?)?;
        self.head_out.forward(&self.head_conv.forward(&fused)?)
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Parameters keyed by name, in registration order.
    pub fn named_params(&self) -> Vec<(&str, &Param<T>)> {
        self.params().into_iter().map(|p| (p.name.as_str(), p)).collect()
    }
}

impl<T: Element> Module<T> for SegModel<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.patch_embed.visit_params(f);
        for s in 0..NUM_STAGES {
            if s > 0 {
                self.down[s - 1].visit_params(f);
            }
            self.enc_blocks[s].iter().for_each(|b| b.visit_params(f));
        }
        for stage in self.dec.iter().rev() {
            stage.up.visit_params(f);
            stage.blocks.iter().for_each(|b| b.visit_params(f));
        }
        self.final_up.visit_params(f);
        self.final_conv.visit_params(f);
        self.stem.visit_params(f);
        self.head_conv.visit_params(f);
        self.head_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.visit_params_mut(f);
        for s in 0..NUM_STAGES {
            if s > 0 {
                self.down[s - 1].visit_params_mut(f);
            }
            self.enc_blocks[s].iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        for stage in self.dec.iter_mut().rev() {
            stage.up.visit_params_mut(f);
            stage.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        }
        self.final_up.visit_params_mut(f);
        self.final_conv.visit_params_mut(f);
        self.stem.visit_params_mut(f);
        self.head_conv.visit_params_mut(f);
        self.head_out.visit_params_mut(f);
    }
}

/// One row of the analytic complexity ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub module: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-module parameter and FLOP accounting derived from layer shapes alone.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    pub rows: Vec<LedgerRow>,
}

impl Ledger {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    fn push(&mut self, module: impl Into<String>, params: u64, flops: u64) {
        self.rows.push(LedgerRow { module: module.into(), params, flops });
    }

    /// Convolution with `out_voxels` output positions.
    fn conv(&mut self, module: impl Into<String>, c_in: usize, c_out: usize, kvol: usize, out_voxels: usize) {
        let macs = (out_voxels * c_out * c_in * kvol) as u64;
        self.push(module, (c_out * c_in * kvol + c_out) as u64, 2 * macs);
    }

    /// Non-overlapping deconvolution reading `in_voxels` positions.
    fn deconv(&mut self, module: impl Into<String>, c_in: usize, c_out: usize, kvol: usize, in_voxels: usize) {
        let macs = (in_voxels * c_in * c_out * kvol) as u64;
        self.push(module, (c_in * c_out * kvol + c_out) as u64, 2 * macs);
    }

    fn epa(&mut self, module: impl Into<String>, cfg: &EpaConfig, count: usize) {
        let c = count as u64;
        self.push(module, c * epa_param_count(cfg, QkSharing::Shared) as u64, c * epa_block_flops(cfg));
    }
}

/// Analytic ledger for a configuration; FLOPs count 2 per multiply-add
/// over convolutions, linear layers and attention products.
pub fn complexity_ledger(cfg: &ModelConfig) -> Result<Ledger> {
    cfg.validate()?;
    let ch = cfg.stage_channels;
    let nb = cfg.blocks_per_stage;
    let vox = cfg.num_voxels();
    let patch_vol: usize = cfg.patch.iter().product();
    let mut l = Ledger::default();
    l.conv("enc.patch_embed", cfg.in_channels, ch[0], patch_vol, cfg.stage_tokens(0));
    for s in 0..NUM_STAGES {
        if s > 0 {
            l.conv(format!("enc.stage{s}.down"), ch[s - 1], ch[s], 8, cfg.stage_tokens(s));
        }
        l.epa(format!("enc.stage{s}.blocks"), &cfg.epa_config(s), nb);
    }
    for s in (0..NUM_STAGES - 1).rev() {
        l.deconv(format!("dec.stage{s}.up"), ch[s + 1], ch[s], 8, cfg.stage_tokens(s + 1));
        l.epa(format!("dec.stage{s}.blocks"), &cfg.epa_config(s), nb);
    }
    let stem_c = cfg.stem_channels;
    l.deconv("dec.final.up", ch[0], stem_c, patch_vol, cfg.stage_tokens(0));
    l.conv("dec.final.conv", stem_c, stem_c, 27, vox);
    l.conv("stem.conv", cfg.in_channels, stem_c, 27, vox);
    l.conv("head.conv", stem_c, stem_c, 27, vox);
    l.conv("head.out", stem_c, cfg.num_classes, 1, vox);
    Ok(l)
}

/// Analytic FLOPs of one forward pass at `extents`.
pub fn count_flops(cfg: &ModelConfig, extents: [usize; 3]) -> Result<u64> {
    Ok(complexity_ledger(&cfg.with_extents(extents))?.total_flops())
}
