//! Adapting the fused guidance feature to a restoration level and injecting it
//! through channel-wise cross-attention with a residual.
//!
//! `F_O = softmax(W_k(F_DA) · W_q(F_I)ᵀ / √C) · F_I + F_I`, where both
//! projections are 1×1 convolutions and the `C × C` attention map is
//! row-normalised, so every output channel of the attention term is a convex
//! combination of the channels of `F_I`.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{check_finite, resize2d, Conv2d, Interp};
use crate::params::{Init, Params};

/// Guidance feature resized and re-projected to one restoration level.
#[derive(Clone, Debug)]
pub struct AdaptedFeature {
    pub map: Tensor,
    pub source_level: usize,
}

/// 1×1 channel projection from the backbone width to a level's width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub proj: Conv2d,
    pub level: usize,
}

impl Adapter {
    pub fn new(p: &Params, in_channels: usize, out_channels: usize, level: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(p, in_channels, out_channels, 1, None)?,
            level,
        })
    }

    /// Channel projection, then bilinear resize to `target_hw`.
    pub fn adapt(&self, fused: &Tensor, target_hw: (usize, usize)) -> Result<AdaptedFeature> {
        adapt(fused, &self.proj, target_hw, self.level)
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }
}

pub fn adapt(fused: &Tensor, proj: &Conv2d, target_hw: (usize, usize), level: usize) -> Result<AdaptedFeature> {
    if target_hw.0 == 0 || target_hw.1 == 0 || proj.out_channels() == 0 {
        return Err(Error::arg(format!(
            "adapt targets must be positive, got {} channels at {}x{}",
            proj.out_channels(),
            target_hw.0,
            target_hw.1
        )));
    }
    check_finite(fused, "fused guidance")?;
    let projected = proj.forward(fused)?;
    Ok(AdaptedFeature {
        map: resize2d(&projected, target_hw.0, target_hw.1, Interp::Bilinear)?,
        source_level: level,
    })
}

#[derive(Clone, Debug)]
pub struct DrFusionParams {
    pub w_q: Conv2d,
    pub w_k: Conv2d,
    /// `1/√C` of the level served.
    pub temperature: f64,
}

impl DrFusionParams {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::arg("fusion needs at least one channel"));
        }
        Ok(Self {
            w_q: Conv2d::new(&p.pp("w_q"), channels, channels, 1, None)?,
            w_k: Conv2d::new(&p.pp("w_k"), channels, channels, 1, None)?,
            temperature: 1.0 / (channels as f64).sqrt(),
        })
    }

    /// Both projections zero: every attention logit is 0.
    pub fn zeros(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            w_q: Conv2d::new(&p.pp("w_q"), channels, channels, 1, Some(Init::Zeros))?,
            w_k: Conv2d::new(&p.pp("w_k"), channels, channels, 1, Some(Init::Zeros))?,
            temperature: 1.0 / (channels as f64).sqrt(),
        })
    }

    pub fn from_convs(w_q: Conv2d, w_k: Conv2d) -> Self {
        let c = w_q.out_channels();
        Self {
            w_q,
            w_k,
            temperature: 1.0 / (c as f64).sqrt(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_q.param_count() + self.w_k.param_count()
    }
}

/// Row-stochastic `(B, C, C)` attention map.
pub fn attention_map(f_da: &Tensor, f_i: &Tensor, params: &DrFusionParams) -> Result<Tensor> {
    if f_da.dims() != f_i.dims() {
        return Err(Error::Shape(format!(
            "adapted feature {:?} vs restoration feature {:?}",
            f_da.dims(),
            f_i.dims()
        )));
    }
    let (b, c, h, w) = f_i.dims4()?;
    if c == 0 {
        return Err(Error::Shape("zero channels".into()));
    }
    let n = h * w;
    let k = params.w_k.forward(f_da)?.reshape((b, c, n))?;
    let q = params.w_q.forward(f_i)?.reshape((b, c, n))?;
    let logits = k.matmul(&q.t()?)?.affine(params.temperature, 0.0)?;
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
}

pub fn fuse_attention(f_da: &AdaptedFeature, f_i: &Tensor, params: &DrFusionParams) -> Result<Tensor> {
    fuse_attention_map(&f_da.map, f_i, params)
}

/// [`fuse_attention`] on a raw adapted map.
pub fn fuse_attention_map(f_da: &Tensor, f_i: &Tensor, params: &DrFusionParams) -> Result<Tensor> {
    let (b, c, h, w) = f_i.dims4()?;
    let attn = attention_map(f_da, f_i, params)?;
    let v = f_i.reshape((b, c, h * w))?;
    Ok((attn.matmul(&v)? + &v)?.reshape((b, c, h, w))?)
}

/// Multiply-adds of one fusion at `C` channels over `N` positions: two 1×1
/// projections plus the two `C × C × N` products.
pub fn fusion_macs(c: usize, n: usize) -> u64 {
    let (c, n) = (c as u64, n as u64);
    2 * c * c * n + 2 * c * c * n
}
