//! Compact encoder-decoder restoration network with optional backbone guidance.
//!
//! Topology: 3×3 embedding, `levels - 1` encoder levels each halving the
//! resolution and doubling the width, a bottleneck, a mirrored decoder with
//! skip connections, and a 3×3 head whose output is added to the input.
//! Guidance (a fused backbone feature) is adapted to every encoder level and
//! the bottleneck, and injected through channel cross-attention.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureTaps, TapLevel};
use crate::dr_fusion::{fuse_attention_map, fusion_macs, Adapter, DrFusionParams};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernels::gelu;
use crate::nn::{pixel_shuffle, pixel_unshuffle, ChannelNorm, Conv2d, DepthwiseConv3x3};
use crate::params::{Init, ParamStore, Params};
use crate::psf::{combine, experts_forward, gate, Expert, ExpertInit, PsfParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    None,
    ShallowOnly,
    MediumOnly,
    DeepOnly,
    #[default]
    PsfFull,
}

impl Guidance {
    pub fn single_tap(self) -> Option<TapLevel> {
        match self {
            Guidance::ShallowOnly => Some(TapLevel::Shallow),
            Guidance::MediumOnly => Some(TapLevel::Medium),
            Guidance::DeepOnly => Some(TapLevel::Deep),
            _ => None,
        }
    }

    pub fn uses_backbone(self) -> bool {
        self != Guidance::None
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPoints {
    /// Once at the entry of each encoder level and of the bottleneck.
    #[default]
    PerLevel,
    /// Before every encoder and bottleneck block.
    PerBlock,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Transposed (channel) self-attention plus gated conv feed-forward.
    #[default]
    Transformer,
    /// Residual conv-GELU-conv.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub levels: usize,
    /// Blocks per level, encoder level 1 first; the last entry is the bottleneck.
    /// The reference large model uses `[4, 6, 6, 8]` with 48 base channels.
    pub blocks_per_level: Vec<usize>,
    pub base_channels: usize,
    pub guidance: Guidance,
    pub fusion_points: FusionPoints,
    pub block: BlockKind,
    pub expert_init: ExpertInit,
    /// Zero the output head so a fresh model is exactly the identity.
    pub zero_init_head: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            blocks_per_level: vec![1, 1, 1, 2],
            base_channels: 16,
            guidance: Guidance::PsfFull,
            fusion_points: FusionPoints::PerLevel,
            block: BlockKind::Transformer,
            expert_init: ExpertInit::FanIn,
            zero_init_head: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("net.levels", "must be >= 1"));
        }
        if self.blocks_per_level.len() != self.levels {
            return Err(Error::config(
                "net.blocks_per_level",
                format!("{} entries for {} levels", self.blocks_per_level.len(), self.levels),
            ));
        }
        if self.blocks_per_level.iter().any(|&b| b == 0) {
            return Err(Error::config("net.blocks_per_level", "every level needs at least one block"));
        }
        if self.base_channels == 0 || (self.levels > 1 && self.base_channels % 2 != 0) {
            return Err(Error::config(
                "net.base_channels",
                "must be positive, and even when there is more than one level",
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial multiple the network pads its input to.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    norm1: ChannelNorm,
    qkv: Conv2d,
    qkv_dw: DepthwiseConv3x3,
    temperature: Tensor,
    proj: Conv2d,
    norm2: ChannelNorm,
    ffn_in: Conv2d,
    ffn_dw: DepthwiseConv3x3,
    ffn_out: Conv2d,
}

/// Hidden width of the gated feed-forward, as a multiple of the block width.
const FFN_EXPANSION: usize = 2;

impl TransformerBlock {
    fn new(p: &Params, c: usize) -> Result<Self> {
        let hidden = FFN_EXPANSION * c;
        Ok(Self {
            norm1: ChannelNorm::new(&p.pp("norm1"), c)?,
            qkv: Conv2d::new(&p.pp("qkv"), c, 3 * c, 1, None)?,
            qkv_dw: DepthwiseConv3x3::new(&p.pp("qkv_dw"), 3 * c)?,
            temperature: p.get("temperature", 1, Init::Const(1.0))?,
            proj: Conv2d::new(&p.pp("proj"), c, c, 1, None)?,
            norm2: ChannelNorm::new(&p.pp("norm2"), c)?,
            ffn_in: Conv2d::new(&p.pp("ffn_in"), c, 2 * hidden, 1, None)?,
            ffn_dw: DepthwiseConv3x3::new(&p.pp("ffn_dw"), 2 * hidden)?,
            ffn_out: Conv2d::new(&p.pp("ffn_out"), hidden, c, 1, None)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(&self.norm1.forward(x)?)?)?;
        let qkv = qkv.reshape((b, 3 * c, h * w))?;
        let q = l2_normalize_last(&qkv.narrow(1, 0, c)?)?;
        let k = l2_normalize_last(&qkv.narrow(1, c, c)?)?;
        let v = qkv.narrow(1, 2 * c, c)?;
        let logits = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let o = attn.matmul(&v)?.reshape((b, c, h, w))?;
        let x = (x + self.proj.forward(&o)?)?;

        let hidden = FFN_EXPANSION * c;
        let y = self.ffn_dw.forward(&self.ffn_in.forward(&self.norm2.forward(&x)?)?)?;
        let gated = (gelu(&y.narrow(1, 0, hidden)?)? * y.narrow(1, hidden, hidden)?)?;
        Ok((&x + self.ffn_out.forward(&gated)?)?)
    }

    fn macs(c: usize, n: usize) -> u64 {
        let (c, n, e) = (c as u64, n as u64, FFN_EXPANSION as u64);
        // qkv + depthwise, two C×C×N attention products, proj,
        // ffn_in + depthwise, ffn_out
        (3 * c * c + 27 * c) * n + 2 * c * c * n + c * c * n + (2 * e * c * c + 18 * e * c) * n + e * c * c * n
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ConvBlock {
    fn new(p: &Params, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), c, c, 3, None)?,
            conv2: Conv2d::new(&p.pp("conv2"), c, c, 3, None)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.conv2.forward(&gelu(&self.conv1.forward(x)?)?)?)?)
    }

    fn macs(c: usize, n: usize) -> u64 {
        2 * (c * c * 9 * n) as u64
    }
}

#[derive(Clone, Debug)]
enum Block {
    Transformer(TransformerBlock),
    Conv(ConvBlock),
}

impl Block {
    fn new(p: &Params, c: usize, kind: BlockKind) -> Result<Self> {
        Ok(match kind {
            BlockKind::Transformer => Block::Transformer(TransformerBlock::new(p, c)?),
            BlockKind::Conv => Block::Conv(ConvBlock::new(p, c)?),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Transformer(b) => b.forward(x),
            Block::Conv(b) => b.forward(x),
        }
    }
}

/// How the backbone taps become one guidance feature.
#[derive(Clone, Debug)]
pub enum GuidanceHead {
    Psf(PsfParams),
    Single(TapLevel, Expert),
}

#[derive(Clone, Debug)]
struct Injection {
    adapter: Adapter,
    /// One per injection point at this level.
    fusions: Vec<DrFusionParams>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Restored {
    pub image: Tensor,
    /// `(B, 3)` gating scores when the full fusion gate is active.
    pub scores: Option<Tensor>,
}

pub struct RestorationModel {
    config: NetConfig,
    guidance_channels: usize,
    store: ParamStore,
    embed: Conv2d,
    encoders: Vec<Vec<Block>>,
    downs: Vec<Conv2d>,
    bottleneck: Vec<Block>,
    ups: Vec<Conv2d>,
    reduces: Vec<Conv2d>,
    decoders: Vec<Vec<Block>>,
    head: Conv2d,
    guidance: Option<GuidanceHead>,
    injections: Vec<Injection>,
}

impl RestorationModel {
    /// Build with seeded weights. `guidance_channels` is the backbone width
    /// (ignored without guidance).
    pub fn new(
        config: &NetConfig,
        guidance_channels: usize,
        dtype: DType,
        device: &Device,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype, device, seed);
        let root = store.root();
        let l = config.levels;
        let embed = Conv2d::new(&root.pp("embed"), 3, config.channels(0), 3, None)?;
        let blocks = |p: Params, c: usize, n: usize| -> Result<Vec<Block>> {
            (0..n).map(|i| Block::new(&p.pp(i.to_string()), c, config.block)).collect()
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for lvl in 0..l - 1 {
            let c = config.channels(lvl);
            encoders.push(blocks(root.pp(format!("encoder.{lvl}")), c, config.blocks_per_level[lvl])?);
            downs.push(Conv2d::new(&root.pp(format!("down.{lvl}")), c, c / 2, 3, None)?);
        }
        let bottleneck = blocks(root.pp("bottleneck"), config.channels(l - 1), config.blocks_per_level[l - 1])?;
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for lvl in (0..l - 1).rev() {
            let c = config.channels(lvl);
            let cu = config.channels(lvl + 1);
            ups.push(Conv2d::new(&root.pp(format!("up.{lvl}")), cu, 2 * cu, 3, None)?);
            reduces.push(Conv2d::new(&root.pp(format!("reduce.{lvl}")), 2 * c, c, 1, None)?);
            decoders.push(blocks(root.pp(format!("decoder.{lvl}")), c, config.blocks_per_level[lvl])?);
        }
        let head_init = config.zero_init_head.then_some(Init::Zeros);
        let head = Conv2d::new(&root.pp("head"), config.channels(0), 3, 3, head_init)?;

        let (guidance, injections) = if config.guidance.uses_backbone() {
            if guidance_channels == 0 {
                return Err(Error::arg("guided model needs a positive backbone width"));
            }
            let g = root.pp("guidance");
            let head = match config.guidance.single_tap() {
                Some(level) => GuidanceHead::Single(
                    level,
                    Expert::new(&g.pp("expert"), guidance_channels, config.expert_init)?,
                ),
                None => GuidanceHead::Psf(PsfParams::new(&g.pp("psf"), guidance_channels, config.expert_init)?),
            };
            let mut inj = Vec::new();
            for lvl in 0..l {
                let c = config.channels(lvl);
                let points = match config.fusion_points {
                    FusionPoints::PerLevel => 1,
                    FusionPoints::PerBlock => config.blocks_per_level[lvl],
                };
                let p = g.pp(format!("level.{lvl}"));
                inj.push(Injection {
                    adapter: Adapter::new(&p.pp("adapt"), guidance_channels, c, lvl)?,
                    fusions: (0..points)
                        .map(|i| DrFusionParams::new(&p.pp(format!("fusion.{i}")), c))
                        .collect::<Result<_>>()?,
                });
            }
            (Some(head), inj)
        } else {
            (None, Vec::new())
        };

        Ok(Self {
            config: config.clone(),
            guidance_channels,
            store,
            embed,
            encoders,
            downs,
            bottleneck,
            ups,
            reduces,
            decoders,
            head,
            guidance,
            injections,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn guidance_channels(&self) -> usize {
        self.guidance_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn guidance_head(&self) -> Option<&GuidanceHead> {
        self.guidance.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.store.load(path)
    }

    fn fused_guidance(&self, taps: &FeatureTaps) -> Result<(Tensor, Option<Tensor>)> {
        let taps = taps.to_dtype(self.dtype())?;
        match self.guidance.as_ref().expect("guided model") {
            GuidanceHead::Psf(psf) => {
                let scores = gate(&taps, psf)?;
                Ok((combine(&experts_forward(&taps, psf)?, &scores)?, Some(scores)))
            }
            GuidanceHead::Single(level, expert) => Ok((expert.forward(taps.get(*level))?, None)),
        }
    }

    fn inject(&self, level: usize, point: usize, fused: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
        let Some(fused) = fused else {
            return Ok(x.clone());
        };
        let inj = &self.injections[level];
        let (_, _, h, w) = x.dims4()?;
        let adapted = inj.adapter.adapt(fused, (h, w))?;
        fuse_attention_map(&adapted.map, x, &inj.fusions[point])
    }

    fn run_level(&self, level: usize, blocks: &[Block], fused: Option<&Tensor>, mut x: Tensor) -> Result<Tensor> {
        if self.config.fusion_points == FusionPoints::PerLevel {
            x = self.inject(level, 0, fused, &x)?;
        }
        for (i, b) in blocks.iter().enumerate() {
            if self.config.fusion_points == FusionPoints::PerBlock {
                x = self.inject(level, i, fused, &x)?;
            }
            x = b.forward(&x)?;
        }
        Ok(x)
    }

    /// Unclipped residual restoration of a `(B, 3, H, W)` batch. Inputs whose
    /// sides are not multiples of `2^(levels-1)` are edge-padded and the
    /// output cropped back.
    pub fn forward(&self, degraded: &Tensor, taps: Option<&FeatureTaps>) -> Result<Restored> {
        let (_, c, h, w) = degraded.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let (fused, scores) = match (self.config.guidance.uses_backbone(), taps) {
            (true, Some(t)) => {
                let (f, s) = self.fused_guidance(t)?;
                (Some(f), s)
            }
            (true, None) => return Err(Error::arg("guided model requires backbone taps")),
            (false, _) => (None, None),
        };
        let inp = degraded.to_dtype(self.dtype())?;
        let m = self.config.size_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let padded = if ph + pw > 0 {
            inp.pad_with_same(2, 0, ph)?.pad_with_same(3, 0, pw)?
        } else {
            inp.clone()
        };

        let l = self.config.levels;
        let mut x = self.embed.forward(&padded)?;
        let mut skips = Vec::with_capacity(l - 1);
        for lvl in 0..l - 1 {
            x = self.run_level(lvl, &self.encoders[lvl], fused.as_ref(), x)?;
            skips.push(x.clone());
            x = pixel_unshuffle(&self.downs[lvl].forward(&x)?, 2)?;
        }
        x = self.run_level(l - 1, &self.bottleneck, fused.as_ref(), x)?;
        for (i, lvl) in (0..l - 1).rev().enumerate() {
            let up = pixel_shuffle(&self.ups[i].forward(&x)?, 2)?;
            let cat = Tensor::cat(&[&up, &skips[lvl]], 1)?;
            x = self.reduces[i].forward(&cat)?;
            for b in &self.decoders[i] {
                x = b.forward(&x)?;
            }
        }
        let out = (padded + self.head.forward(&x)?)?;
        let out = if ph + pw > 0 { out.narrow(2, 0, h)?.narrow(3, 0, w)? } else { out };
        Ok(Restored { image: out, scores })
    }

    /// Evaluation-time restoration of one image: computes taps when guided,
    /// clips the result to `[0, 1]`.
    pub fn restore(&self, img: &Image, backbone: Option<&Backbone>) -> Result<Image> {
        let x = img.to_tensor(self.dtype(), self.device())?;
        let taps = if self.config.guidance.uses_backbone() {
            let bb = backbone.ok_or_else(|| Error::arg("guided model requires a backbone"))?;
            Some(bb.extract_taps(&x)?)
        } else {
            None
        };
        let out = self.forward(&x, taps.as_ref())?.image.clamp(0.0, 1.0)?;
        Ok(Image::from_tensor(&out)?.remove(0))
    }
}

/// Analytic multiply-add count of one forward pass at `h × w` (after
/// padding), including the `O(C²·N)` attention terms. The guidance feature
/// is `guidance_channels` wide on a `guidance_hw` grid.
pub fn forward_flop_estimate(
    config: &NetConfig,
    h: usize,
    w: usize,
    guidance_channels: usize,
    guidance_hw: (usize, usize),
) -> Result<u64> {
    config.validate()?;
    let m = config.size_multiple();
    let (h, w) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let block_macs = |c: usize, n: usize| match config.block {
        BlockKind::Transformer => TransformerBlock::macs(c, n),
        BlockKind::Conv => ConvBlock::macs(c, n),
    };
    let l = config.levels;
    let n_at = |lvl: usize| (h >> lvl) * (w >> lvl);
    let mut total = (n_at(0) * 3 * config.channels(0) * 9) as u64;
    for lvl in 0..l {
        let (c, n) = (config.channels(lvl), n_at(lvl));
        let blocks = config.blocks_per_level[lvl] as u64;
        let passes = if lvl + 1 < l { 2 } else { 1 };
        total += passes * blocks * block_macs(c, n);
        if lvl + 1 < l {
            let cu = config.channels(lvl + 1);
            total += (n * c * (c / 2) * 9) as u64; // down
            total += (n_at(lvl + 1) * cu * 2 * cu * 9) as u64; // up
            total += (n * 2 * c * c) as u64; // reduce
        }
    }
    total += (n_at(0) * config.channels(0) * 3 * 9) as u64;

    if config.guidance.uses_backbone() {
        let cf = guidance_channels;
        let nf = guidance_hw.0 * guidance_hw.1;
        let experts = if config.guidance == Guidance::PsfFull { 3 } else { 1 };
        total += experts * 2 * (nf * cf * cf * 9) as u64;
        if config.guidance == Guidance::PsfFull {
            total += (3 * cf * cf + cf * 3) as u64;
        }
        for lvl in 0..l {
            let (c, n) = (config.channels(lvl), n_at(lvl));
            let points = match config.fusion_points {
                FusionPoints::PerLevel => 1,
                FusionPoints::PerBlock => config.blocks_per_level[lvl],
            } as u64;
            total += (nf * cf * c) as u64 + 4 * (n * c) as u64; // adapt projection + bilinear taps
            total += points * fusion_macs(c, n);
        }
    }
    Ok(total)
}
