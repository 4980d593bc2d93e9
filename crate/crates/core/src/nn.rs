//! Minimal differentiable layers over NCHW tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::params::{Init, Params};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square `k × k` conv with "same" padding for odd `k`, PyTorch-style
    /// fan-in uniform init unless overridden.
    pub fn new(p: &Params, cin: usize, cout: usize, k: usize, init: Option<Init>) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let winit = init.unwrap_or(Init::Uniform(bound));
        let weight = p.get("weight", (cout, cin, k, k), winit)?;
        let binit = match init {
            Some(Init::Zeros) | Some(Init::ConvDelta) => Init::Zeros,
            _ => Init::Uniform(bound),
        };
        let bias = Some(p.get("bias", cout, binit)?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        let k = weight.dims().get(2).copied().unwrap_or(1);
        Self {
            weight,
            bias,
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cout, cin, kh, kw) = self.weight.dims4()?;
        let y = if kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0 {
            // pointwise conv as a batched matmul; candle's conv backward is slow here
            let (b, _, h, w) = x.dims4()?;
            let wm = self.weight.reshape((cout, cin))?;
            wm.broadcast_matmul(&x.reshape((b, cin, h * w))?)?.reshape((b, cout, h, w))?
        } else if kh == 3 && kw == 3 && self.stride == 1 && self.padding == 1 {
            crate::kernels::conv3x3(x, &self.weight)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => crate::kernels::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }

    /// Multiply-adds for one `h × w` output map.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w) as u64 * self.weight.elem_count() as u64
    }
}

/// Depthwise 3×3 conv with zero padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3x3 {
    /// `(C, 1, 3, 3)`, the PyTorch depthwise layout.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(p: &Params, c: usize) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            weight: p.get("weight", (c, 1, 3, 3), Init::Uniform(bound))?,
            bias: p.get("bias", c, Init::Uniform(bound))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.elem_count();
        let y = crate::kernels::depthwise3x3(x, &self.weight.reshape((c, 9))?)?;
        crate::kernels::add_channel_bias(&y, &self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(p: &Params, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        Ok(Self {
            weight: p.get("weight", (dout, din), Init::Uniform(bound))?,
            bias: p.get("bias", dout, Init::Uniform(bound))?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer norm across the channel axis of an NCHW tensor, per pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelNorm {
    pub fn new(p: &Params, c: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", c, Init::Const(1.0))?,
            bias: p.get("bias", c, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::kernels::channel_norm(x, &self.weight, &self.bias)
    }
}

/// Layer norm over the last axis (token features).
pub fn layer_norm_last(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// `(B, C·r², H, W) → (B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!("pixel_shuffle: {c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// `(B, C, H·r, W·r) → (B, C·r², H, W)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle: {h}x{w} not divisible by {r}")));
    }
    let (oh, ow) = (h / r, w / r);
    Ok(x.reshape((b, c, oh, r, ow, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * r * r, oh, ow))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Bicubic,
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.75;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Row-major `dst × src` interpolation matrix with half-pixel centers
/// (`align_corners = false`) and clamped borders. Rows sum to 1.
pub fn resize_weights(src: usize, dst: usize, interp: Interp) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    let clamp = |i: isize| i.clamp(0, src as isize - 1) as usize;
    for d in 0..dst {
        let pos = (d as f64 + 0.5) * scale - 0.5;
        match interp {
            Interp::Bilinear => {
                let pos = pos.max(0.0);
                let i0 = pos.floor() as isize;
                let frac = pos - i0 as f64;
                m[d * src + clamp(i0)] += 1.0 - frac;
                m[d * src + clamp(i0 + 1)] += frac;
            }
            Interp::Bicubic => {
                let i0 = pos.floor() as isize;
                let frac = pos - i0 as f64;
                for k in -1..=2isize {
                    m[d * src + clamp(i0 + k)] += cubic_weight(frac - k as f64);
                }
            }
        }
    }
    m
}

fn resize_matrix(src: usize, dst: usize, interp: Interp, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(resize_weights(src, dst, interp), (dst, src), device)?.to_dtype(dtype)?)
}

/// Separable resize of the two trailing axes, expressed as matrix products so
/// gradients flow through it.
pub fn resize2d(x: &Tensor, out_h: usize, out_w: usize, interp: Interp) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::Shape("resize2d needs at least 2 dims".into()));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("resize target must be positive, got {out_h}x{out_w}")));
    }
    let mut y = x.clone();
    if w != out_w {
        let rw = resize_matrix(w, out_w, interp, x.dtype(), x.device())?;
        y = y.broadcast_matmul(&rw.t()?)?;
    }
    if h != out_h {
        let rh = resize_matrix(h, out_h, interp, x.dtype(), x.device())?;
        y = rh.broadcast_matmul(&y)?;
    }
    Ok(y)
}

pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Scalar value of a 0-d or single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.get(0)?.to_scalar::<f64>()?)
}
