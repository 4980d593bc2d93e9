//! Frozen ViT feature extractor with shallow/medium/deep taps.
//!
//! Parameter names follow the Hugging Face DINOv2 layout
//! (`embeddings.*`, `encoder.layer.{i}.*`), so a randomly initialised toy
//! model and a converted pretrained checkpoint run through the same code.
//! Every weight is detached at load time: nothing computed here can send a
//! gradient back into the backbone.

mod pca;
mod probe;

pub use pca::{pca_project, Pca};
pub use probe::{stability_probe, LevelPsnr, StabilityReport, Variances};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{layer_norm_last, resize2d, Interp};
use crate::params::{Init, ParamStore};

/// Environment variable naming a safetensors file with pretrained weights.
pub const WEIGHTS_ENV: &str = "RESTORELAB_BACKBONE_WEIGHTS";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    PretrainedVit,
    ToyVit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Block indices (0-based) for the shallow, medium and deep taps.
    /// Defaults to the first quarter, half and last block.
    pub tap_indices: Option<[usize; 3]>,
    pub toy_depth: usize,
    pub toy_width: usize,
    pub toy_heads: usize,
    pub toy_patch: usize,
    pub toy_seed: u64,
    /// Pretrained weights; falls back to `RESTORELAB_BACKBONE_WEIGHTS`.
    pub weights_path: Option<PathBuf>,
    /// Attention heads of the pretrained model; defaults to `width / 64`.
    pub pretrained_heads: Option<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::ToyVit,
            tap_indices: None,
            toy_depth: 4,
            toy_width: 32,
            toy_heads: 2,
            toy_patch: 8,
            toy_seed: 0,
            weights_path: None,
            pretrained_heads: None,
        }
    }
}

/// `[⌈depth/4⌉ - 1, depth/2 - 1, depth - 1]`, clamped to stay strictly increasing where possible.
pub fn default_taps(depth: usize) -> [usize; 3] {
    let q = depth.div_ceil(4).max(1) - 1;
    let h = (depth / 2).max(1) - 1;
    [q, h.max(q + 1).min(depth.saturating_sub(2)), depth.saturating_sub(1)]
}

pub fn validate_taps(taps: [usize; 3], depth: usize) -> Result<()> {
    if !(taps[0] < taps[1] && taps[1] < taps[2]) {
        return Err(Error::config(
            "backbone.tap_indices",
            format!("must be strictly increasing, got {taps:?}"),
        ));
    }
    if taps[2] >= depth {
        return Err(Error::config(
            "backbone.tap_indices",
            format!("index {} out of range for depth {depth}", taps[2]),
        ));
    }
    Ok(())
}

/// Which of the three taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapLevel {
    Shallow,
    Medium,
    Deep,
}

impl TapLevel {
    pub const ALL: [TapLevel; 3] = [Self::Shallow, Self::Medium, Self::Deep];

    pub fn index(self) -> usize {
        match self {
            Self::Shallow => 0,
            Self::Medium => 1,
            Self::Deep => 2,
        }
    }
}

/// Shallow, medium and deep feature maps, each `(B, C_f, h_f, w_f)`.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub shallow: Tensor,
    pub medium: Tensor,
    pub deep: Tensor,
    pub patch_size: usize,
    /// `(from, to)` spatial size when the input was resized to a patch multiple.
    pub resized: Option<((usize, usize), (usize, usize))>,
}

impl FeatureTaps {
    pub fn get(&self, level: TapLevel) -> &Tensor {
        match level {
            TapLevel::Shallow => &self.shallow,
            TapLevel::Medium => &self.medium,
            TapLevel::Deep => &self.deep,
        }
    }

    pub fn as_array(&self) -> [&Tensor; 3] {
        [&self.shallow, &self.medium, &self.deep]
    }

    pub fn channels(&self) -> usize {
        self.shallow.dims()[1]
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            shallow: self.shallow.to_dtype(dtype)?,
            medium: self.medium.to_dtype(dtype)?,
            deep: self.deep.to_dtype(dtype)?,
            ..self.clone()
        })
    }
}

/// Patch-embedding output and per-block token states of one forward pass.
pub struct Hidden {
    /// `(B, C, gh, gw)` patch embedding before position encoding.
    pub patch_embed: Tensor,
    /// Block outputs as `(B, C, gh, gw)` maps, CLS token dropped.
    pub blocks: Vec<Tensor>,
    pub resized: Option<((usize, usize), (usize, usize))>,
}

struct Block {
    norm1: (Tensor, Tensor),
    q: (Tensor, Tensor),
    k: (Tensor, Tensor),
    v: (Tensor, Tensor),
    proj: (Tensor, Tensor),
    ls1: Tensor,
    norm2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
    ls2: Tensor,
}

fn linear(x: &Tensor, (w, b): &(Tensor, Tensor)) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?)
}

/// Frozen ViT backbone.
pub struct Backbone {
    store: ParamStore,
    kind: BackboneKind,
    patch_size: usize,
    width: usize,
    heads: usize,
    taps: [usize; 3],
    pos_grid: usize,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    calls: AtomicUsize,
}

impl Backbone {
    pub fn from_config(config: &BackboneConfig, dtype: DType, device: &Device) -> Result<Self> {
        match config.kind {
            BackboneKind::ToyVit => Self::toy(config, dtype, device),
            BackboneKind::PretrainedVit => {
                let path = config
                    .weights_path
                    .clone()
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::config(
                            "backbone.weights_path",
                            format!("pretrained backbone needs a weights file (or {WEIGHTS_ENV})"),
                        )
                    })?;
                Self::load_pretrained(&path, config.tap_indices, config.pretrained_heads, dtype, device)
            }
        }
    }

    /// Randomly initialised ViT, fully determined by `toy_seed`.
    pub fn toy(config: &BackboneConfig, dtype: DType, device: &Device) -> Result<Self> {
        let (depth, width, patch) = (config.toy_depth, config.toy_width, config.toy_patch);
        if depth == 0 || width == 0 || patch == 0 {
            return Err(Error::config("backbone", "toy depth, width and patch must be positive"));
        }
        if config.toy_heads == 0 || width % config.toy_heads != 0 {
            return Err(Error::config(
                "backbone.toy_heads",
                format!("{} heads do not divide width {width}", config.toy_heads),
            ));
        }
        let taps = config.tap_indices.unwrap_or_else(|| default_taps(depth));
        validate_taps(taps, depth)?;
        let store = ParamStore::new(dtype, device, config.toy_seed);
        let grid = 8;
        {
            let emb = store.root().pp("embeddings");
            let fan = (3 * patch * patch) as f64;
            emb.pp("patch_embeddings.projection").get("weight", (width, 3, patch, patch), Init::Uniform(fan.sqrt().recip()))?;
            emb.pp("patch_embeddings.projection").get("bias", width, Init::Uniform(fan.sqrt().recip()))?;
            emb.get("cls_token", (1, 1, width), Init::Normal(0.02))?;
            emb.get("position_embeddings", (1, grid * grid + 1, width), Init::Normal(0.02))?;
            let wb = (width as f64).sqrt().recip();
            let hb = ((4 * width) as f64).sqrt().recip();
            for i in 0..depth {
                let l = store.root().pp(format!("encoder.layer.{i}"));
                for n in ["norm1", "norm2"] {
                    l.pp(n).get("weight", width, Init::Const(1.0))?;
                    l.pp(n).get("bias", width, Init::Zeros)?;
                }
                for n in ["attention.attention.query", "attention.attention.key", "attention.attention.value", "attention.output.dense"] {
                    l.pp(n).get("weight", (width, width), Init::Uniform(wb))?;
                    l.pp(n).get("bias", width, Init::Uniform(wb))?;
                }
                l.pp("mlp.fc1").get("weight", (4 * width, width), Init::Uniform(wb))?;
                l.pp("mlp.fc1").get("bias", 4 * width, Init::Uniform(wb))?;
                l.pp("mlp.fc2").get("weight", (width, 4 * width), Init::Uniform(hb))?;
                l.pp("mlp.fc2").get("bias", width, Init::Uniform(hb))?;
                l.pp("layer_scale1").get("lambda1", width, Init::Const(1.0))?;
                l.pp("layer_scale2").get("lambda1", width, Init::Const(1.0))?;
            }
        }
        Self::assemble(store, BackboneKind::ToyVit, Some(taps), Some(config.toy_heads))
    }

    /// Load a DINOv2-layout safetensors file.
    pub fn load_pretrained(
        path: &Path,
        taps: Option<[usize; 3]>,
        heads: Option<usize>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
        }
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, device)?;
        let store = ParamStore::new(dtype, device, 0);
        for (name, t) in tensors {
            // Tolerate the "dinov2." prefix used by some exports; skip heads and mask tokens.
            let name = name.strip_prefix("dinov2.").unwrap_or(&name).to_string();
            if name.starts_with("embeddings.") || name.starts_with("encoder.") || name.starts_with("layernorm.") {
                if name == "embeddings.mask_token" {
                    continue;
                }
                store.insert(&name, &t.to_dtype(dtype)?)?;
            }
        }
        Self::assemble(store, BackboneKind::PretrainedVit, taps, heads)
    }

    fn assemble(
        store: ParamStore,
        kind: BackboneKind,
        taps: Option<[usize; 3]>,
        heads: Option<usize>,
    ) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            store
                .get_var(name)
                .map(|v| v.as_tensor().detach())
                .ok_or_else(|| Error::config("backbone.weights_path", format!("missing tensor {name}")))
        };
        let patch_w = get("embeddings.patch_embeddings.projection.weight")?;
        let (width, _, patch_size, _) = patch_w.dims4()?;
        let mut depth = 0;
        while store.get_var(&format!("encoder.layer.{depth}.norm1.weight")).is_some() {
            depth += 1;
        }
        if depth == 0 {
            return Err(Error::config("backbone.weights_path", "no transformer blocks found"));
        }
        let taps = taps.unwrap_or_else(|| default_taps(depth));
        validate_taps(taps, depth)?;
        let heads = heads.unwrap_or((width / 64).max(1));
        if width % heads != 0 {
            return Err(Error::config("backbone.pretrained_heads", format!("{heads} does not divide {width}")));
        }
        let pos = get("embeddings.position_embeddings")?;
        let n_pos = pos.dims()[1] - 1;
        let pos_grid = (n_pos as f64).sqrt().round() as usize;
        if pos_grid * pos_grid != n_pos {
            return Err(Error::Shape(format!("{n_pos} position embeddings do not form a square grid")));
        }
        let pair = |p: &str| -> Result<(Tensor, Tensor)> { Ok((get(&format!("{p}.weight"))?, get(&format!("{p}.bias"))?)) };
        let blocks = (0..depth)
            .map(|i| {
                let l = format!("encoder.layer.{i}");
                Ok(Block {
                    norm1: pair(&format!("{l}.norm1"))?,
                    q: pair(&format!("{l}.attention.attention.query"))?,
                    k: pair(&format!("{l}.attention.attention.key"))?,
                    v: pair(&format!("{l}.attention.attention.value"))?,
                    proj: pair(&format!("{l}.attention.output.dense"))?,
                    ls1: get(&format!("{l}.layer_scale1.lambda1"))?,
                    norm2: pair(&format!("{l}.norm2"))?,
                    fc1: pair(&format!("{l}.mlp.fc1"))?,
                    fc2: pair(&format!("{l}.mlp.fc2"))?,
                    ls2: get(&format!("{l}.layer_scale2.lambda1"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_b: get("embeddings.patch_embeddings.projection.bias")?,
            cls: get("embeddings.cls_token")?,
            patch_w,
            pos,
            store,
            kind,
            patch_size,
            width,
            heads,
            taps,
            pos_grid,
            blocks,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn tap_indices(&self) -> [usize; 3] {
        self.taps
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Number of forward passes run so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn weight_checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Write the weights as safetensors in the same layout [`Backbone::load_pretrained`] reads.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Spatial size the input is resized to: nearest patch multiple per axis.
    pub fn working_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.patch_size;
        let snap = |v: usize| (((v as f64 / p as f64).round() as usize).max(1)) * p;
        (snap(h), snap(w))
    }

    fn positional(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let cls_pos = self.pos.narrow(1, 0, 1)?;
        let grid = self.pos.narrow(1, 1, self.pos_grid * self.pos_grid)?;
        if gh == self.pos_grid && gw == self.pos_grid {
            return Ok(self.pos.clone());
        }
        let g = grid
            .reshape((1, self.pos_grid, self.pos_grid, self.width))?
            .permute((0, 3, 1, 2))?;
        let g = resize2d(&g, gh, gw, Interp::Bicubic)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        Ok(Tensor::cat(&[&cls_pos, &g], 1)?)
    }

    /// Run the patch embedding and the first `blocks` transformer blocks on
    /// a `(B, 3, H, W)` image batch in `[0, 1]`.
    pub fn hidden(&self, img: &Tensor, blocks: usize) -> Result<Hidden> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let (b, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("backbone expects 3 channels, got {c}")));
        }
        let blocks = blocks.min(self.blocks.len());
        let x = img.to_dtype(self.dtype())?;
        let (th, tw) = self.working_size(h, w);
        let resized = if (th, tw) != (h, w) { Some(((h, w), (th, tw))) } else { None };
        let x = if resized.is_some() { resize2d(&x, th, tw, Interp::Bicubic)? } else { x };

        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;

        let p = self.patch_size;
        let emb = x
            .conv2d(&self.patch_w, 0, p, 1, 1)?
            .broadcast_add(&self.patch_b.reshape((1, self.width, 1, 1))?)?;
        let (gh, gw) = (th / p, tw / p);
        let tokens = emb.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls.broadcast_as((b, 1, self.width))?;
        let mut t = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.positional(gh, gw)?)?;

        let mut outs = Vec::with_capacity(blocks);
        for blk in &self.blocks[..blocks] {
            t = self.block_forward(blk, &t)?;
            let grid = t
                .narrow(1, 1, gh * gw)?
                .transpose(1, 2)?
                .reshape((b, self.width, gh, gw))?;
            outs.push(grid);
        }
        Ok(Hidden {
            patch_embed: emb,
            blocks: outs,
            resized,
        })
    }

    fn block_forward(&self, blk: &Block, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let y = layer_norm_last(x, &blk.norm1.0, &blk.norm1.1, LN_EPS)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(linear(&y, &blk.q)?)?;
        let k = split(linear(&y, &blk.k)?)?;
        let v = split(linear(&y, &blk.v)?)?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        let o = linear(&o, &blk.proj)?;
        let x = (x + o.broadcast_mul(&blk.ls1)?)?;
        let y = layer_norm_last(&x, &blk.norm2.0, &blk.norm2.1, LN_EPS)?;
        let y = linear(&linear(&y, &blk.fc1)?.gelu_erf()?, &blk.fc2)?;
        Ok((x + y.broadcast_mul(&blk.ls2)?)?)
    }

    /// Shallow/medium/deep taps for a `(B, 3, H, W)` batch.
    pub fn extract_taps(&self, img: &Tensor) -> Result<FeatureTaps> {
        let hidden = self.hidden(img, self.taps[2] + 1)?;
        Ok(FeatureTaps {
            shallow: hidden.blocks[self.taps[0]].clone(),
            medium: hidden.blocks[self.taps[1]].clone(),
            deep: hidden.blocks[self.taps[2]].clone(),
            patch_size: self.patch_size,
            resized: hidden.resized,
        })
    }

    pub fn extract_taps_image(&self, img: &Image) -> Result<FeatureTaps> {
        self.extract_taps(&img.to_tensor(self.dtype(), self.store.device())?)
    }

    /// Block outputs at arbitrary indices, in the order requested.
    pub fn features_at(&self, img: &Tensor, indices: &[usize]) -> Result<Vec<Tensor>> {
        let max = indices.iter().copied().max().ok_or_else(|| Error::Empty("feature indices".into()))?;
        if max >= self.depth() {
            return Err(Error::config(
                "dpc.layer_indices",
                format!("index {max} out of range for backbone depth {}", self.depth()),
            ));
        }
        let hidden = self.hidden(img, max + 1)?;
        Ok(indices.iter().map(|&i| hidden.blocks[i].clone()).collect())
    }
}

impl ParamStore {
    /// Insert an externally loaded tensor as a variable.
    pub(crate) fn insert(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = candle_core::Var::from_tensor(t)?;
        self.varmap().data().lock().unwrap().insert(name.to_string(), var);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Backbone {
        Backbone::toy(&BackboneConfig::default(), DType::F32, &Device::Cpu).unwrap()
    }

    fn image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 5 + x * 3 + c) % 13) as f32 / 13.0)
    }

    #[test]
    fn default_taps_are_increasing() {
        assert_eq!(default_taps(12), [2, 5, 11]);
        assert_eq!(default_taps(4), [0, 1, 3]);
        for d in 3..40 {
            assert!(validate_taps(default_taps(d), d).is_ok(), "depth {d}");
        }
    }

    #[test]
    fn tap_shapes() {
        let cfg = BackboneConfig {
            toy_width: 32,
            toy_patch: 8,
            ..Default::default()
        };
        let bb = Backbone::toy(&cfg, DType::F32, &Device::Cpu).unwrap();
        let taps = bb.extract_taps_image(&image(64, 64)).unwrap();
        for t in taps.as_array() {
            assert_eq!(t.dims(), &[1, 32, 8, 8]);
        }
        assert!(taps.resized.is_none());
    }

    #[test]
    fn taps_are_deterministic() {
        let a = toy().extract_taps_image(&image(32, 32)).unwrap();
        let b = toy().extract_taps_image(&image(32, 32)).unwrap();
        for (x, y) in a.as_array().iter().zip(b.as_array()) {
            let d = (*x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn non_multiple_input_is_resized_and_recorded() {
        let taps = toy().extract_taps_image(&image(30, 45)).unwrap();
        assert_eq!(taps.resized, Some(((30, 45), (32, 48))));
        assert_eq!(taps.deep.dims(), &[1, 32, 4, 6]);
    }

    #[test]
    fn bad_taps_are_config_errors() {
        let cfg = BackboneConfig {
            tap_indices: Some([0, 2, 4]),
            ..Default::default()
        };
        assert!(matches!(
            Backbone::toy(&cfg, DType::F32, &Device::Cpu),
            Err(Error::Config { .. })
        ));
        let cfg = BackboneConfig {
            tap_indices: Some([1, 1, 3]),
            ..Default::default()
        };
        assert!(Backbone::toy(&cfg, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn save_and_load_as_pretrained() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.safetensors");
        let bb = toy();
        bb.save(&path).unwrap();
        let loaded = Backbone::load_pretrained(&path, None, Some(2), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(loaded.weight_checksum().unwrap(), bb.weight_checksum().unwrap());
        let img = image(16, 24);
        let a = bb.extract_taps_image(&img).unwrap();
        let b = loaded.extract_taps_image(&img).unwrap();
        let d = (&a.deep - &b.deep).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn forward_does_not_touch_weights_and_counts_calls() {
        let bb = toy();
        let before = bb.weight_checksum().unwrap();
        bb.extract_taps_image(&image(16, 16)).unwrap();
        bb.extract_taps_image(&image(16, 16)).unwrap();
        assert_eq!(bb.calls(), 2);
        assert_eq!(bb.weight_checksum().unwrap(), before);
    }
}
