//! Degradation-robustness probe: how much does feature-space PSNR drift as
//! the noise level rises, for raw pixels, patch embeddings and deep taps?

use std::fmt::Write as _;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::degradation::add_gaussian_noise;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::objective::{psnr, tensor_psnr};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPsnr {
    pub level: f64,
    pub raw_psnr: f64,
    pub f_image_psnr: f64,
    pub f_dino_psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variances {
    pub raw: f64,
    pub f_image: f64,
    pub f_dino: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub per_level: Vec<LevelPsnr>,
    /// Each value minus its series mean.
    pub deviations: Vec<LevelPsnr>,
    /// Population variance of each series.
    pub variances: Variances,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

impl StabilityReport {
    pub fn from_levels(per_level: Vec<LevelPsnr>) -> Result<Self> {
        if per_level.len() < 2 {
            return Err(Error::arg("stability statistics need at least two levels"));
        }
        let raw: Vec<f64> = per_level.iter().map(|l| l.raw_psnr).collect();
        let fi: Vec<f64> = per_level.iter().map(|l| l.f_image_psnr).collect();
        let fd: Vec<f64> = per_level.iter().map(|l| l.f_dino_psnr).collect();
        let (mr, mi, md) = (mean(&raw), mean(&fi), mean(&fd));
        let deviations = per_level
            .iter()
            .map(|l| LevelPsnr {
                level: l.level,
                raw_psnr: l.raw_psnr - mr,
                f_image_psnr: l.f_image_psnr - mi,
                f_dino_psnr: l.f_dino_psnr - md,
            })
            .collect();
        Ok(Self {
            variances: Variances {
                raw: population_variance(&raw),
                f_image: population_variance(&fi),
                f_dino: population_variance(&fd),
            },
            per_level,
            deviations,
        })
    }

    /// `level,raw_psnr,f_image_psnr,f_dino_psnr`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,raw_psnr,f_image_psnr,f_dino_psnr\n");
        for l in &self.per_level {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", l.level, l.raw_psnr, l.f_image_psnr, l.f_dino_psnr);
        }
        s
    }

    /// Variance ordering reported for robust features: deep < patch embedding < pixels.
    pub fn ordering_holds(&self) -> bool {
        self.variances.f_dino < self.variances.f_image && self.variances.f_image < self.variances.raw
    }
}

fn feature_psnr(clean: &Tensor, degraded: &Tensor) -> Result<f64> {
    let peak = (clean.max_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?
        - clean.min_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    .max(f64::MIN_POSITIVE);
    tensor_psnr(clean, degraded, peak)
}

/// Degrade each image at every noise level and average the three PSNR
/// series over images. Feature PSNRs use the clean features' max−min as peak.
pub fn stability_probe(
    clean_images: &[Image],
    sigmas: &[f64],
    backbone: &Backbone,
    seed: u64,
) -> Result<StabilityReport> {
    if clean_images.is_empty() {
        return Err(Error::Empty("probe image list".into()));
    }
    if sigmas.len() < 2 {
        return Err(Error::arg("stability probe needs at least two noise levels"));
    }
    for (i, a) in sigmas.iter().enumerate() {
        if sigmas[..i].contains(a) {
            return Err(Error::arg(format!("duplicate noise level {a}")));
        }
    }
    let deep = backbone.tap_indices()[2];
    let mut sums = vec![[0f64; 3]; sigmas.len()];
    for (ii, img) in clean_images.iter().enumerate() {
        let x = img.to_tensor(backbone.dtype(), backbone.params().device())?;
        let clean = backbone.hidden(&x, deep + 1)?;
        for (si, &sigma) in sigmas.iter().enumerate() {
            let noisy = add_gaussian_noise(img, sigma, seed ^ ((ii as u64) << 20) ^ si as u64)?;
            let y = noisy.to_tensor(backbone.dtype(), backbone.params().device())?;
            let deg = backbone.hidden(&y, deep + 1)?;
            sums[si][0] += psnr(img, &noisy, 1.0)?;
            sums[si][1] += feature_psnr(&clean.patch_embed, &deg.patch_embed)?;
            sums[si][2] += feature_psnr(&clean.blocks[deep], &deg.blocks[deep])?;
        }
    }
    let n = clean_images.len() as f64;
    let per_level = sigmas
        .iter()
        .zip(&sums)
        .map(|(&level, s)| LevelPsnr {
            level,
            raw_psnr: s[0] / n,
            f_image_psnr: s[1] / n,
            f_dino_psnr: s[2] / n,
        })
        .collect();
    StabilityReport::from_levels(per_level)
}
