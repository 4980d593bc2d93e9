//! Training losses and evaluation metrics.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::scalar;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Settings of the feature-space contrastive loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpcConfig {
    /// Backbone blocks whose outputs are compared. Defaults to every block up
    /// to and including the shallow tap.
    pub layer_indices: Option<Vec<usize>>,
    /// Per-layer weights; defaults to uniform `1/n`.
    pub weights: Option<Vec<f64>>,
    /// Floor added to the negative-pair distance.
    pub epsilon: f64,
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self {
            layer_indices: None,
            weights: None,
            epsilon: 1e-7,
        }
    }
}

impl DpcConfig {
    /// Concrete `(layers, weights)` for a given backbone.
    pub fn resolve(&self, backbone: &Backbone) -> Result<(Vec<usize>, Vec<f64>)> {
        let layers = match &self.layer_indices {
            Some(l) => l.clone(),
            None => (0..=backbone.tap_indices()[0]).collect(),
        };
        if layers.is_empty() {
            return Err(Error::config("dpc.layer_indices", "must not be empty"));
        }
        if let Some(&bad) = layers.iter().find(|&&i| i >= backbone.depth()) {
            return Err(Error::config(
                "dpc.layer_indices",
                format!("index {bad} out of range for backbone depth {}", backbone.depth()),
            ));
        }
        let weights = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / layers.len() as f64; layers.len()],
        };
        if weights.len() != layers.len() {
            return Err(Error::config(
                "dpc.weights",
                format!("{} weights for {} layers", weights.len(), layers.len()),
            ));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::config("dpc.weights", "weights must be >= 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("dpc.epsilon", "must be > 0"));
        }
        Ok((layers, weights))
    }
}

/// Scalar components of one loss evaluation. `total == l1 + lambda * dpc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dpc: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, dpc: f64, lambda: f64) -> Self {
        Self {
            l1,
            dpc,
            total: l1 + lambda * dpc,
            lambda,
        }
    }
}

fn check_same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute error.
pub fn l1_loss(v: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_dims(v, target, "l1_loss")?;
    Ok((v - target)?.abs()?.mean_all()?)
}

/// Per-sample mean absolute distance between two `(B, ...)` feature tensors.
fn feature_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.flatten_from(1)?.mean(1)?)
}

/// Contrastive ratio loss in frozen-feature space:
/// `Σ_i w_i · D(Ψ_i(v), Ψ_i(v+)) / (D(Ψ_i(v), Ψ_i(v−)) + ε)`, averaged over
/// the batch, with `D` the mean absolute distance. Only `v` carries gradient.
pub fn dpc_loss(
    v: &Tensor,
    v_plus: &Tensor,
    v_minus: &Tensor,
    config: &DpcConfig,
    backbone: &Backbone,
) -> Result<Tensor> {
    check_same_dims(v, v_plus, "dpc_loss positive")?;
    check_same_dims(v, v_minus, "dpc_loss negative")?;
    let (layers, weights) = config.resolve(backbone)?;
    let b = v.dims()[0];
    let fv = backbone.features_at(v, &layers)?;
    let anchors = Tensor::cat(&[&v_plus.detach(), &v_minus.detach()], 0)?;
    let fa = backbone.features_at(&anchors, &layers)?;

    let mut total: Option<Tensor> = None;
    for ((f, a), &w) in fv.iter().zip(&fa).zip(&weights) {
        let fp = a.narrow(0, 0, b)?.detach();
        let fm = a.narrow(0, b, b)?.detach();
        let num = feature_distance(f, &fp)?;
        let den = feature_distance(f, &fm)?;
        let den_min = scalar(&den.min_all()?)?;
        if den_min < config.epsilon {
            log::warn!("dpc_loss: restored output coincides with the degraded input in feature space; denominator floored at {}", config.epsilon);
        }
        let term = (num / (den + config.epsilon)?)?.mean_all()?.affine(w, 0.0)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// `L1 + λ·DPC` with `v+ = target`, `v− = input_degraded`. With `λ = 0` the
/// backbone is never called.
pub fn total_loss(
    v: &Tensor,
    target: &Tensor,
    input_degraded: &Tensor,
    lambda: f64,
    config: &DpcConfig,
    backbone: Option<&Backbone>,
) -> Result<(Tensor, LossBreakdown)> {
    let l1 = l1_loss(v, target)?;
    if lambda == 0.0 {
        let b = LossBreakdown::new(scalar(&l1)?, 0.0, 0.0);
        return Ok((l1, b));
    }
    let backbone = backbone.ok_or_else(|| Error::arg("lambda > 0 requires a backbone"))?;
    let dpc = dpc_loss(v, target, input_degraded, config, backbone)?.to_dtype(l1.dtype())?;
    let total = (&l1 + dpc.affine(lambda, 0.0)?)?;
    let b = LossBreakdown::new(scalar(&l1)?, scalar(&dpc)?, lambda);
    Ok((total, b))
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("psnr: image shapes differ".into()));
    }
    Ok(psnr_from_mse(mse(a.data(), b.data()), peak))
}

pub fn tensor_psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_dims(a, b, "psnr")?;
    let m = scalar(&(a - b)?.to_dtype(DType::F64)?.sqr()?.mean_all()?)?;
    Ok(psnr_from_mse(m, peak))
}

/// Gaussian-window SSIM constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    /// Shrink the window to the largest odd size that fits an `h × w` image.
    pub fn fitted(mut self, h: usize, w: usize) -> Self {
        let m = h.min(w);
        if self.window > m {
            self.window = if m % 2 == 1 { m } else { m.saturating_sub(1).max(1) };
        }
        self
    }

    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let mut g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.iter_mut().for_each(|v| *v /= s);
        g
    }
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps.iter().enumerate().map(|(i, t)| t * rows[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one plane.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, params: &SsimParams) -> f64 {
    let taps = params.taps();
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &taps);
    let (mu_b, ..) = filter_valid(b, h, w, &taps);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &taps);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &taps);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &taps);
    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / (oh * ow) as f64
}

/// Structural similarity averaged over channels, with an 11-tap Gaussian
/// window (σ = 1.5), K1 = 0.01, K2 = 0.03 on `[0, 1]` data. Images smaller
/// than the window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SsimParams::default())
}

pub fn ssim_with(a: &Image, b: &Image, params: SsimParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("ssim: image shapes differ".into()));
    }
    let (h, w) = (a.height(), a.width());
    let params = params.fitted(h, w);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.channel(c).into_iter().map(f64::from).collect();
        let pb: Vec<f64> = b.channel(c).into_iter().map(f64::from).collect();
        total += ssim_plane(&pa, &pb, h, w, &params);
    }
    Ok(total / a.channels() as f64)
}
