//! Hand-written CPU kernels for ops whose composed candle versions dominate
//! training time: depthwise 3×3 convolution, channel layer norm and tanh-GELU.
//! Both support `f32` and `f64` and carry their own backward pass.

use std::ops::{Add, Mul};

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::error::Result;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

/// `y[b,c,i,j] = Σ_{dy,dx} x[b,c,i+dy-1,j+dx-1] · w[c,3·dy+dx]`, zero padded.
struct DwConv;

fn dw_forward<T>(x: &[T], w: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let mut y = vec![T::default(); x.len()];
    let plane = h * wd;
    for bi in 0..b {
        for ci in 0..c {
            let xs = &x[(bi * c + ci) * plane..][..plane];
            let ys = &mut y[(bi * c + ci) * plane..][..plane];
            let k = &w[ci * 9..ci * 9 + 9];
            for dy in 0..3 {
                for dx in 0..3 {
                    let kv = k[dy * 3 + dx];
                    // output rows i with 0 <= i + dy - 1 < h
                    let i0 = 1usize.saturating_sub(dy);
                    let i1 = (h + 1 - dy).min(h);
                    let j0 = 1usize.saturating_sub(dx);
                    let j1 = (wd + 1 - dx).min(wd);
                    for i in i0..i1 {
                        let src = &xs[(i + dy - 1) * wd..][..wd];
                        let dst = &mut ys[i * wd..][..wd];
                        for j in j0..j1 {
                            dst[j] = dst[j] + src[j + dx - 1] * kv;
                        }
                    }
                }
            }
        }
    }
    y
}

fn dw_weight_grad<T>(x: &[T], gy: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T>
where
    T: Copy + Default + Add<Output = T> + Mul<Output = T>,
{
    let mut gw = vec![T::default(); c * 9];
    let plane = h * wd;
    for bi in 0..b {
        for ci in 0..c {
            let xs = &x[(bi * c + ci) * plane..][..plane];
            let gs = &gy[(bi * c + ci) * plane..][..plane];
            for dy in 0..3 {
                for dx in 0..3 {
                    let i0 = 1usize.saturating_sub(dy);
                    let i1 = (h + 1 - dy).min(h);
                    let j0 = 1usize.saturating_sub(dx);
                    let j1 = (wd + 1 - dx).min(wd);
                    let mut acc = T::default();
                    for i in i0..i1 {
                        let src = &xs[(i + dy - 1) * wd..][..wd];
                        let g = &gs[i * wd..][..wd];
                        for j in j0..j1 {
                            acc = acc + src[j + dx - 1] * g[j];
                        }
                    }
                    let slot = &mut gw[ci * 9 + dy * 3 + dx];
                    *slot = *slot + acc;
                }
            }
        }
    }
    gw
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp2 for DwConv {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        if l2.shape().dims() != [d.1, 9] {
            candle_core::bail!("depthwise3x3: weight shape {:?}, expected ({}, 9)", l2.shape(), d.1);
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(dw_forward(contiguous(x, l1, "x")?, contiguous(w, l2, "w")?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(dw_forward(contiguous(x, l1, "x")?, contiguous(w, l2, "w")?, d))
            }
            _ => candle_core::bail!("depthwise3x3: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, gy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        // Input gradient is the same correlation with the kernel flipped.
        let flip = Tensor::from_vec((0..9u32).rev().collect::<Vec<_>>(), 9, w.device())?;
        let w_flip = w.index_select(&flip, 1)?.contiguous()?;
        let gy = gy.contiguous()?;
        let gx = gy.apply_op2(&w_flip, DwConv)?;
        let gw = x.contiguous()?.apply_op2_no_bwd(&gy, &DwWeightGrad)?;
        Ok((Some(gx), Some(gw)))
    }
}

struct DwWeightGrad;

impl CustomOp2 for DwWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(dw_weight_grad(contiguous(x, l1, "x")?, contiguous(g, l2, "grad")?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(dw_weight_grad(contiguous(x, l1, "x")?, contiguous(g, l2, "grad")?, d))
            }
            _ => candle_core::bail!("depthwise3x3 weight grad: unsupported dtypes"),
        };
        Ok((out, Shape::from((d.1, 9))))
    }
}

/// Depthwise 3×3 correlation with zero padding. `x` is `(B, C, H, W)`,
/// `w` is `(C, 9)` in row-major tap order.
pub fn depthwise3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, DwConv)?)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn gelu_f32(x: f32) -> f32 {
    gelu_f64(x as f64) as f32
}

fn gelu_grad_f32(x: f32) -> f32 {
    gelu_grad_f64(x as f64) as f32
}

struct Gelu;
struct GeluGrad;

fn map_unary(s: &CpuStorage, l: &Layout, f32op: fn(f32) -> f32, f64op: fn(f64) -> f64, what: &str) -> candle_core::Result<(CpuStorage, Shape)> {
    let out = match s {
        CpuStorage::F32(v) => CpuStorage::F32(contiguous(v, l, what)?.iter().map(|&x| f32op(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, l, what)?.iter().map(|&x| f64op(x)).collect()),
        _ => candle_core::bail!("{what}: unsupported dtype"),
    };
    Ok((out, l.shape().clone()))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_unary(s, l, gelu_f32, gelu_f64, "gelu")
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = x.contiguous()?.apply_op1_no_bwd(&GeluGrad)?;
        Ok(Some(gy.mul(&d)?))
    }
}

impl CustomOp1 for GeluGrad {
    fn name(&self) -> &'static str {
        "gelu-tanh-grad"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_unary(s, l, gelu_grad_f32, gelu_grad_f64, "gelu grad")
    }
}

/// Tanh-approximated GELU, numerically the same function as `Tensor::gelu`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    match x.dtype() {
        DType::F32 | DType::F64 => Ok(x.contiguous()?.apply_op1(Gelu)?),
        _ => Ok(x.gelu()?),
    }
}

/// `(B, C, H, W)` to `(B, C·9, H·W)` column matrix of zero-padded 3×3
/// neighbourhoods, row index `c·9 + 3·dy + dx`.
struct Im2Col3x3;

fn im2col<T: Copy + Default>(x: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let mut out = vec![T::default(); b * c * 9 * plane];
    for bc in 0..b * c {
        let xs = &x[bc * plane..][..plane];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &mut out[(bc * 9 + dy * 3 + dx) * plane..][..plane];
                let i0 = 1usize.saturating_sub(dy);
                let i1 = (h + 1 - dy).min(h);
                let j0 = 1usize.saturating_sub(dx);
                let j1 = (wd + 1 - dx).min(wd);
                for i in i0..i1 {
                    let src = &xs[(i + dy - 1) * wd..][..wd];
                    row[i * wd + j0..i * wd + j1].copy_from_slice(&src[j0 + dx - 1..j1 + dx - 1]);
                }
            }
        }
    }
    out
}

fn col2im<T>(cols: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T>
where
    T: Copy + Default + Add<Output = T>,
{
    let plane = h * wd;
    let mut x = vec![T::default(); b * c * plane];
    for bc in 0..b * c {
        let xs = &mut x[bc * plane..][..plane];
        for dy in 0..3 {
            for dx in 0..3 {
                let row = &cols[(bc * 9 + dy * 3 + dx) * plane..][..plane];
                let i0 = 1usize.saturating_sub(dy);
                let i1 = (h + 1 - dy).min(h);
                let j0 = 1usize.saturating_sub(dx);
                let j1 = (wd + 1 - dx).min(wd);
                for i in i0..i1 {
                    let dst = &mut xs[(i + dy - 1) * wd..][..wd];
                    for j in j0..j1 {
                        dst[j + dx - 1] = dst[j + dx - 1] + row[i * wd + j];
                    }
                }
            }
        }
    }
    x
}

impl CustomOp1 for Im2Col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l, "im2col")?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l, "im2col")?, d)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((d.0, d.1 * 9, d.2 * d.3))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, gy: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let gx = gy.contiguous()?.apply_op1_no_bwd(&Col2Im3x3Shape(x.shape().clone()))?;
        Ok(Some(gx))
    }
}

struct Col2Im3x3Shape(Shape);

impl CustomOp1 for Col2Im3x3Shape {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0.dims4()?;
        if l.shape().dims() != [d.0, d.1 * 9, d.2 * d.3] {
            candle_core::bail!("col2im: column shape {:?} does not match {:?}", l.shape(), self.0);
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l, "col2im")?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l, "col2im")?, d)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, self.0.clone()))
    }
}

/// Stride-1, zero-padded 3×3 convolution as im2col plus a batched matmul.
/// `w` is `(Cout, Cin, 3, 3)`.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, _, h, wd) = x.dims4()?;
    let (cout, cin, _, _) = w.dims4()?;
    let cols = x.contiguous()?.apply_op1(Im2Col3x3)?;
    let y = w.reshape((cout, cin * 9))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, cout, h, wd))?)
}

/// `x + b` with `b` of length C broadcast over an NCHW tensor.
struct ChannelBias;
struct ChannelSum;

fn bias_forward<T: Copy + Add<Output = T>>(x: &[T], bias: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let mut y = x.to_vec();
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate().take(c) {
            for v in &mut y[(bi * c + ci) * plane..][..plane] {
                *v = *v + bv;
            }
        }
    }
    y
}

fn channel_sum<T: Copy + Default + Add<Output = T>>(x: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let mut out = vec![T::default(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o = x[(bi * c + ci) * plane..][..plane].iter().fold(*o, |a, &v| a + v);
        }
    }
    out
}

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        if l2.shape().elem_count() != d.1 {
            candle_core::bail!("channel-bias: bias shape {:?} for {} channels", l2.shape(), d.1);
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(bias_forward(contiguous(x, l1, "x")?, contiguous(b, l2, "bias")?, d)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(bias_forward(contiguous(x, l1, "x")?, contiguous(b, l2, "bias")?, d)),
            _ => candle_core::bail!("channel-bias: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, gy: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = gy.contiguous()?.apply_op1_no_bwd(&ChannelSum)?.reshape(b.shape())?;
        Ok((Some(gy.clone()), Some(gb)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(channel_sum(contiguous(v, l, "channel-sum")?, d)),
            CpuStorage::F64(v) => CpuStorage::F64(channel_sum(contiguous(v, l, "channel-sum")?, d)),
            _ => candle_core::bail!("channel-sum: unsupported dtype"),
        };
        Ok((out, Shape::from(d.1)))
    }
}

/// Adds a per-channel bias of length C to `(B, C, H, W)`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

const NORM_EPS: f64 = 1e-5;

/// Per-(sample, pixel) mean and inverse std over channels of an NCHW buffer.
fn channel_stats<T: Copy + Into<f64>>(x: &[T], c: usize, plane: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; b * plane];
    let mut rstd = vec![0.0; b * plane];
    for bi in 0..b {
        let m = &mut mean[bi * plane..][..plane];
        for ci in 0..c {
            for (mj, &v) in m.iter_mut().zip(&x[(bi * c + ci) * plane..][..plane]) {
                *mj += v.into();
            }
        }
        m.iter_mut().for_each(|v| *v /= c as f64);
        let r = &mut rstd[bi * plane..][..plane];
        for ci in 0..c {
            for ((rj, &v), &mj) in r.iter_mut().zip(&x[(bi * c + ci) * plane..][..plane]).zip(m.iter()) {
                let d = v.into() - mj;
                *rj += d * d;
            }
        }
        r.iter_mut().for_each(|v| *v = 1.0 / (*v / c as f64 + NORM_EPS).sqrt());
    }
    (mean, rstd)
}

trait Real: Copy + Into<f64> + Default {
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn norm_forward<T: Real>(x: &[T], w: &[T], bias: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let (mean, rstd) = channel_stats(x, c, plane, b);
    let mut y = vec![T::default(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let (g, be) = (w[ci].into(), bias[ci].into());
            let off = (bi * c + ci) * plane;
            for j in 0..plane {
                let xh = (x[off + j].into() - mean[bi * plane + j]) * rstd[bi * plane + j];
                y[off + j] = T::from_f64(xh * g + be);
            }
        }
    }
    y
}

/// Input gradient: `rstd · (g' − mean_c g' − x̂ · mean_c(g' x̂))` with `g' = g·γ`.
fn norm_input_grad<T: Real>(x: &[T], w: &[T], gy: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let (mean, rstd) = channel_stats(x, c, plane, b);
    let mut gx = vec![T::default(); x.len()];
    let mut s1 = vec![0.0; plane];
    let mut s2 = vec![0.0; plane];
    for bi in 0..b {
        s1.iter_mut().for_each(|v| *v = 0.0);
        s2.iter_mut().for_each(|v| *v = 0.0);
        let (m, r) = (&mean[bi * plane..][..plane], &rstd[bi * plane..][..plane]);
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let g = w[ci].into();
            for j in 0..plane {
                let gp = gy[off + j].into() * g;
                s1[j] += gp;
                s2[j] += gp * (x[off + j].into() - m[j]) * r[j];
            }
        }
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            let g = w[ci].into();
            for j in 0..plane {
                let xh = (x[off + j].into() - m[j]) * r[j];
                let gp = gy[off + j].into() * g;
                gx[off + j] = T::from_f64(r[j] * (gp - s1[j] / c as f64 - xh * s2[j] / c as f64));
            }
        }
    }
    gx
}

/// `(2, C)`: row 0 is `Σ g·x̂`, row 1 is `Σ g`.
fn norm_param_grad<T: Real>(x: &[T], gy: &[T], (b, c, h, wd): (usize, usize, usize, usize)) -> Vec<T> {
    let plane = h * wd;
    let (mean, rstd) = channel_stats(x, c, plane, b);
    let mut acc = vec![0.0; 2 * c];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            for j in 0..plane {
                let g = gy[off + j].into();
                acc[ci] += g * (x[off + j].into() - mean[bi * plane + j]) * rstd[bi * plane + j];
                acc[c + ci] += g;
            }
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

/// Layer norm over the channel axis of NCHW with per-channel affine.
struct ChannelNormOp;
struct ChannelNormInputGrad;
struct ChannelNormParamGrad;

macro_rules! dispatch3 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $s3:expr, $l3:expr, $f:ident, $d:expr, $what:expr) => {
        match ($s1, $s2, $s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => CpuStorage::F32($f(
                contiguous(a, $l1, $what)?,
                contiguous(b, $l2, $what)?,
                contiguous(c, $l3, $what)?,
                $d,
            )),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => CpuStorage::F64($f(
                contiguous(a, $l1, $what)?,
                contiguous(b, $l2, $what)?,
                contiguous(c, $l3, $what)?,
                $d,
            )),
            _ => candle_core::bail!("{}: unsupported dtypes", $what),
        }
    };
}

impl CustomOp3 for ChannelNormOp {
    fn name(&self) -> &'static str {
        "channel-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let out = dispatch3!(s1, l1, s2, l2, s3, l3, norm_forward, d, "channel-norm");
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let x = x.contiguous()?;
        let gy = gy.contiguous()?;
        let gx = x.apply_op3_no_bwd(w, &gy, &ChannelNormInputGrad)?;
        let gp = x.apply_op2_no_bwd(&gy, &ChannelNormParamGrad)?;
        Ok((Some(gx), Some(gp.get(0)?), Some(gp.get(1)?)))
    }
}

impl CustomOp3 for ChannelNormInputGrad {
    fn name(&self) -> &'static str {
        "channel-norm-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let out = dispatch3!(s1, l1, s2, l2, s3, l3, norm_input_grad, d, "channel-norm grad");
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for ChannelNormParamGrad {
    fn name(&self) -> &'static str {
        "channel-norm-param-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(norm_param_grad(contiguous(x, l1, "x")?, contiguous(g, l2, "grad")?, d))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(norm_param_grad(contiguous(x, l1, "x")?, contiguous(g, l2, "grad")?, d))
            }
            _ => candle_core::bail!("channel-norm param grad: unsupported dtypes"),
        };
        Ok((out, Shape::from((2, d.1))))
    }
}

/// Layer norm across channels at every pixel (eps 1e-5), then `x̂·w + b`.
pub fn channel_norm(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, ChannelNormOp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use candle_core::{Device, Var};

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 9), &dev).unwrap();
        let want = x.conv2d(&w.reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3).unwrap();
        let got = depthwise3x3(&x, &w).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_gradients() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, 4, 5), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 9), &dev).unwrap()).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 2, 4, 5), &dev).unwrap();
        let f = || {
            let y = depthwise3x3(x.as_tensor(), w.as_tensor())?;
            Ok((y * &target)?.sum_all()?)
        };
        assert!(check_gradient(&x, f, 1e-5, 80).unwrap().rel_error < 1e-7);
        assert!(check_gradient(&w, f, 1e-5, 18).unwrap().rel_error < 1e-7);
    }

    #[test]
    fn channel_norm_matches_composed_and_differentiates() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.5, (2, 5, 3, 4), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(1f64, 0.3, 5, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.3, 5, &dev).unwrap()).unwrap();
        let xt = x.as_tensor();
        let mean = xt.mean_keepdim(1).unwrap();
        let xc = xt.broadcast_sub(&mean).unwrap();
        let var = xc.sqr().unwrap().mean_keepdim(1).unwrap();
        let want = xc
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&w.as_tensor().reshape((1, 5, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.as_tensor().reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let got = channel_norm(xt, w.as_tensor(), b.as_tensor()).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);

        let target = Tensor::randn(0f64, 1.0, (2, 5, 3, 4), &dev).unwrap();
        let f = || Ok((channel_norm(x.as_tensor(), w.as_tensor(), b.as_tensor())? * &target)?.sum_all()?);
        for v in [&x, &w, &b] {
            let r = check_gradient(v, f, 1e-5, 120).unwrap();
            assert!(r.rel_error < 1e-7, "{r:?}");
        }
    }

    #[test]
    fn conv3x3_matches_candle_and_differentiates() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 0.5, (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let want = x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap();
        let got = conv3x3(x.as_tensor(), w.as_tensor()).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);

        let target = Tensor::randn(0f64, 1.0, (2, 4, 5, 4), &dev).unwrap();
        let f = || Ok((conv3x3(x.as_tensor(), w.as_tensor())? * &target)?.sum_all()?);
        for v in [&x, &w] {
            let r = check_gradient(v, f, 1e-5, 120).unwrap();
            assert!(r.rel_error < 1e-7, "{r:?}");
        }
    }

    #[test]
    fn channel_bias_differentiates() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 2, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 3, &dev).unwrap()).unwrap();
        let want = x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1, 1)).unwrap()).unwrap();
        let got = add_channel_bias(x.as_tensor(), b.as_tensor()).unwrap();
        let diff = (got - want).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f64>().unwrap(), 0.0);
        let target = Tensor::randn(0f64, 1.0, (2, 3, 2, 3), &dev).unwrap();
        let f = || Ok((add_channel_bias(x.as_tensor(), b.as_tensor())?.sqr()? * &target)?.sum_all()?);
        for v in [&x, &b] {
            let r = check_gradient(v, f, 1e-5, 40).unwrap();
            assert!(r.rel_error < 1e-7, "{r:?}");
        }
    }

    #[test]
    fn gelu_matches_candle_and_differentiates() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, 50, &dev).unwrap()).unwrap();
        let want = x.as_tensor().gelu().unwrap();
        let diff = (gelu(x.as_tensor()).unwrap() - want).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        let r = check_gradient(&x, || Ok(gelu(x.as_tensor())?.sqr()?.sum_all()?), 1e-5, 50).unwrap();
        assert!(r.rel_error < 1e-7, "{r:?}");
    }
}
