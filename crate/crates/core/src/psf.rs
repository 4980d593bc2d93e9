//! Pixel-semantic fusion: three convolutional experts, one per backbone tap,
//! blended by per-sample softmax scores from a pooled MLP gate.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureTaps, TapLevel};
use crate::error::{Error, Result};
use crate::kernels::gelu;
use crate::nn::{check_finite, Conv2d, Linear};
use crate::params::{Init, Params};

/// Per-sample blend weights. Non-negative and summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingScores {
    pub s_shallow: f64,
    pub s_medium: f64,
    pub s_deep: f64,
}

impl GatingScores {
    pub fn as_array(&self) -> [f64; 3] {
        [self.s_shallow, self.s_medium, self.s_deep]
    }

    pub fn sum(&self) -> f64 {
        self.s_shallow + self.s_medium + self.s_deep
    }

    /// Rows of a `(B, 3)` score tensor.
    pub fn from_tensor(scores: &Tensor) -> Result<Vec<Self>> {
        let rows = scores.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        rows.into_iter()
            .map(|r| match r[..] {
                [a, b, c] => Ok(Self {
                    s_shallow: a,
                    s_medium: b,
                    s_deep: c,
                }),
                _ => Err(Error::Shape(format!("expected 3 scores, got {}", r.len()))),
            })
            .collect()
    }

    pub fn mean(scores: &[Self]) -> Self {
        let n = scores.len().max(1) as f64;
        let s = scores.iter().fold([0.0; 3], |acc, g| {
            let a = g.as_array();
            [acc[0] + a[0], acc[1] + a[1], acc[2] + a[2]]
        });
        Self {
            s_shallow: s[0] / n,
            s_medium: s[1] / n,
            s_deep: s[2] / n,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    #[default]
    FanIn,
    /// First conv is a centered delta, second is zero: the expert starts as the identity.
    Identity,
}

/// `x + conv3x3(gelu(conv3x3(x)))`, channel-preserving.
#[derive(Clone, Debug)]
pub struct Expert {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Expert {
    pub fn new(p: &Params, channels: usize, init: ExpertInit) -> Result<Self> {
        let (i1, i2) = match init {
            ExpertInit::FanIn => (None, None),
            ExpertInit::Identity => (Some(Init::ConvDelta), Some(Init::Zeros)),
        };
        Ok(Self {
            conv1: Conv2d::new(&p.pp("conv1"), channels, channels, 3, i1)?,
            conv2: Conv2d::new(&p.pp("conv2"), channels, channels, 3, i2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.conv1.forward(x)?)?;
        Ok((x + self.conv2.forward(&h)?)?)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv1.macs(h, w) + self.conv2.macs(h, w)
    }
}

/// Global average pool of the concatenated taps → hidden layer of width `C_f` → 3 logits.
#[derive(Clone, Debug)]
pub struct Gating {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gating {
    pub fn new(p: &Params, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), 3 * channels, channels)?,
            fc2: Linear::new(&p.pp("fc2"), channels, 3)?,
        })
    }

    /// `(B, 3·C, h, w)` → `(B, 3)` logits.
    pub fn logits(&self, concat: &Tensor) -> Result<Tensor> {
        let pooled = concat.mean(D::Minus1)?.mean(D::Minus1)?;
        self.fc2.forward(&gelu(&self.fc1.forward(&pooled)?)?)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.weight.elem_count() + self.fc1.bias.elem_count() + self.fc2.weight.elem_count() + self.fc2.bias.elem_count()
    }
}

#[derive(Clone, Debug)]
pub struct PsfParams {
    /// Shallow, medium, deep.
    pub experts: [Expert; 3],
    pub gating: Gating,
}

impl PsfParams {
    pub fn new(p: &Params, channels: usize, init: ExpertInit) -> Result<Self> {
        Ok(Self {
            experts: [
                Expert::new(&p.pp("expert_shallow"), channels, init)?,
                Expert::new(&p.pp("expert_medium"), channels, init)?,
                Expert::new(&p.pp("expert_deep"), channels, init)?,
            ],
            gating: Gating::new(&p.pp("gating"), channels)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.experts.iter().map(Expert::param_count).sum::<usize>() + self.gating.param_count()
    }
}

fn check_taps(taps: &FeatureTaps) -> Result<()> {
    let s = taps.shallow.dims();
    if taps.medium.dims() != s || taps.deep.dims() != s || s.len() != 4 {
        return Err(Error::Shape(format!(
            "taps differ in shape: {:?} / {:?} / {:?}",
            s,
            taps.medium.dims(),
            taps.deep.dims()
        )));
    }
    Ok(())
}

/// Softmax-normalised gating scores, `(B, 3)`.
pub fn gate(taps: &FeatureTaps, params: &PsfParams) -> Result<Tensor> {
    check_taps(taps)?;
    for (t, lvl) in taps.as_array().iter().zip(["shallow", "medium", "deep"]) {
        check_finite(t, &format!("{lvl} tap"))?;
    }
    let concat = Tensor::cat(&taps.as_array(), 1)?;
    scores_from_logits(&params.gating.logits(&concat)?)
}

pub fn scores_from_logits(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}

/// Each expert applied to its own tap.
pub fn experts_forward(taps: &FeatureTaps, params: &PsfParams) -> Result<[Tensor; 3]> {
    check_taps(taps)?;
    Ok([
        params.experts[0].forward(&taps.shallow)?,
        params.experts[1].forward(&taps.medium)?,
        params.experts[2].forward(&taps.deep)?,
    ])
}

/// `Σ_k s_k · F_k` with per-sample scores `(B, 3)`.
pub fn combine(expert_out: &[Tensor; 3], scores: &Tensor) -> Result<Tensor> {
    let b = expert_out[0].dims()[0];
    if scores.dims() != [b, 3] {
        return Err(Error::Shape(format!("scores {:?} for batch {b}", scores.dims())));
    }
    let mut acc: Option<Tensor> = None;
    for (k, f) in expert_out.iter().enumerate() {
        let s = scores.narrow(1, k, 1)?.reshape((b, 1, 1, 1))?;
        let term = f.broadcast_mul(&s)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("three experts"))
}

/// Fused guidance feature, same shape as each tap.
pub fn fuse(taps: &FeatureTaps, params: &PsfParams) -> Result<Tensor> {
    let scores = gate(taps, params)?;
    combine(&experts_forward(taps, params)?, &scores)
}

/// Fused feature together with the scores that produced it.
pub fn fuse_with_scores(taps: &FeatureTaps, params: &PsfParams) -> Result<(Tensor, Tensor)> {
    let scores = gate(taps, params)?;
    Ok((combine(&experts_forward(taps, params)?, &scores)?, scores))
}

/// One-hot scores selecting `level`, for single-tap guidance.
pub fn one_hot_scores(level: TapLevel, batch: usize, like: &Tensor) -> Result<Tensor> {
    let mut v = vec![0f64; batch * 3];
    for b in 0..batch {
        v[b * 3 + level.index()] = 1.0;
    }
    Ok(Tensor::from_vec(v, (batch, 3), like.device())?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn taps_of(s: Tensor, m: Tensor, d: Tensor) -> FeatureTaps {
        FeatureTaps {
            shallow: s,
            medium: m,
            deep: d,
            patch_size: 1,
            resized: None,
        }
    }

    #[test]
    fn softmax_hand_values() {
        let l = Tensor::new(&[[0f64, 0.0, 0.0], [2f64.ln(), 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = GatingScores::from_tensor(&scores_from_logits(&l).unwrap()).unwrap();
        for v in s[0].as_array() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let e = [0.5, 0.25, 0.25];
        for (v, e) in s[1].as_array().iter().zip(e) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_experts_pass_taps_through() {
        let store = ParamStore::new(DType::F64, &Device::Cpu, 1);
        let p = PsfParams::new(&store.root(), 4, ExpertInit::Identity).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let taps = taps_of(x.clone(), x.clone(), x.clone());
        for out in experts_forward(&taps, &p).unwrap() {
            let d = (&out - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn hand_weighted_sum() {
        let f = |a: f64, b: f64| Tensor::new(&[a, b], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let outs = [f(1.0, 2.0), f(3.0, 4.0), f(5.0, 6.0)];
        let s = Tensor::new(&[[0.2f64, 0.3, 0.5]], &Device::Cpu).unwrap();
        let got = combine(&outs, &s).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((got[0] - 3.6).abs() < 1e-12 && (got[1] - 4.6).abs() < 1e-12);
    }

    #[test]
    fn mismatched_taps_error() {
        let store = ParamStore::new(DType::F64, &Device::Cpu, 1);
        let p = PsfParams::new(&store.root(), 2, ExpertInit::FanIn).unwrap();
        let a = Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(fuse(&taps_of(a.clone(), a.clone(), b), &p).is_err());
        let nan = (a.clone() / 0.0).unwrap().affine(0.0, f64::NAN).unwrap();
        assert!(matches!(gate(&taps_of(a.clone(), nan, a), &p), Err(Error::NonFinite(_))));
    }
}
