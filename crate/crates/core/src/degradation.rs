//! Synthetic degradations (noise, blur, rain, haze) and the patch-pair stream
//! the trainer consumes.
//!
//! All operations are pure: the same `(spec, seed, clean image)` always yields a
//! bit-identical result.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Length in pixels of a synthesized rain streak.
pub const RAIN_STREAK_LENGTH: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Noise,
    Blur,
    Rain,
    Haze,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [Self::Noise, Self::Blur, Self::Rain, Self::Haze];

    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Blur => "blur",
            Self::Rain => "rain",
            Self::Haze => "haze",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One degradation recipe. Only the fields relevant to `kind` are read.
///
/// `noise_sigma` is on the 8-bit scale (`25` means a standard deviation of
/// `25/255` on `[0, 1]` images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub noise_sigma: f64,
    pub blur_kernel_size: usize,
    pub blur_sigma_range: [f64; 2],
    pub rain_density: f64,
    pub rain_angle: f64,
    pub haze_beta: f64,
    pub haze_airlight: f64,
    pub seed: u64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            kind: DegradationKind::Noise,
            noise_sigma: 25.0,
            blur_kernel_size: 15,
            blur_sigma_range: [2.0, 3.1],
            rain_density: 0.02,
            rain_angle: 10.0,
            haze_beta: 1.2,
            haze_airlight: 0.9,
            seed: 0,
        }
    }
}

impl DegradationSpec {
    pub fn noise(sigma: f64) -> Self {
        Self {
            kind: DegradationKind::Noise,
            noise_sigma: sigma,
            ..Self::default()
        }
    }

    pub fn blur(kernel_size: usize, sigma_lo: f64, sigma_hi: f64) -> Self {
        Self {
            kind: DegradationKind::Blur,
            blur_kernel_size: kernel_size,
            blur_sigma_range: [sigma_lo, sigma_hi],
            ..Self::default()
        }
    }

    pub fn rain(density: f64, angle: f64) -> Self {
        Self {
            kind: DegradationKind::Rain,
            rain_density: density,
            rain_angle: angle,
            ..Self::default()
        }
    }

    pub fn haze(beta: f64, airlight: f64) -> Self {
        Self {
            kind: DegradationKind::Haze,
            haze_beta: beta,
            haze_airlight: airlight,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DegradationKind::Noise => {
                if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
                    return Err(Error::arg(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
                }
            }
            DegradationKind::Blur => {
                check_kernel_size(self.blur_kernel_size)?;
                let [lo, hi] = self.blur_sigma_range;
                if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                    return Err(Error::arg(format!(
                        "blur_sigma_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            DegradationKind::Rain => {
                if !(0.0..=1.0).contains(&self.rain_density) {
                    return Err(Error::arg(format!("rain_density must be in [0,1], got {}", self.rain_density)));
                }
                if !self.rain_angle.is_finite() {
                    return Err(Error::arg("rain_angle must be finite"));
                }
            }
            DegradationKind::Haze => check_haze(self.haze_beta, self.haze_airlight)?,
        }
        Ok(())
    }

    /// Human-readable strength label used to group evaluation results.
    pub fn level(&self) -> String {
        match self.kind {
            DegradationKind::Noise => format!("sigma={}", self.noise_sigma),
            DegradationKind::Blur => format!(
                "k={},sigma={}-{}",
                self.blur_kernel_size, self.blur_sigma_range[0], self.blur_sigma_range[1]
            ),
            DegradationKind::Rain => format!("density={},angle={}", self.rain_density, self.rain_angle),
            DegradationKind::Haze => format!("beta={},airlight={}", self.haze_beta, self.haze_airlight),
        }
    }

    /// Degrade `clean`. The effective seed mixes `seed` with the spec's own seed.
    pub fn apply(&self, clean: &Image, seed: u64) -> Result<Image> {
        self.validate()?;
        let seed = mix_seed(self.seed, seed);
        match self.kind {
            DegradationKind::Noise => add_gaussian_noise(clean, self.noise_sigma, seed),
            DegradationKind::Blur => {
                let [lo, hi] = self.blur_sigma_range;
                let sigma = if lo == hi {
                    lo
                } else {
                    ChaCha8Rng::seed_from_u64(seed).gen_range(lo..=hi)
                };
                apply_gaussian_blur(clean, self.blur_kernel_size, sigma)
            }
            DegradationKind::Rain => synthesize_rain(clean, self.rain_density, self.rain_angle, seed),
            DegradationKind::Haze => synthesize_haze(clean, self.haze_beta, self.haze_airlight, None),
        }
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::arg(format!("blur kernel size must be odd and >= 1, got {k}")));
    }
    Ok(())
}

fn check_haze(beta: f64, airlight: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::arg(format!("haze beta must be >= 0, got {beta}")));
    }
    if !(0.0..=1.0).contains(&airlight) {
        return Err(Error::arg(format!("haze airlight must be in [0,1], got {airlight}")));
    }
    Ok(())
}

/// Additive white Gaussian noise with standard deviation `sigma / 255`, clipped to `[0, 1]`.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    check_kernel_size(kernel_size)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("blur sigma must be > 0, got {sigma}")));
    }
    let r = (kernel_size / 2) as f64;
    let mut taps: Vec<f64> = (0..kernel_size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Mirror index into `0..n` without repeating the edge sample (`dcb|abcd|cba`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Gaussian blur with a normalized `kernel_size × kernel_size` kernel and reflect padding.
pub fn apply_gaussian_blur(img: &Image, kernel_size: usize, sigma: f64) -> Result<Image> {
    let taps = gaussian_kernel_1d(kernel_size, sigma)?;
    let r = (kernel_size / 2) as isize;
    let (h, w, ch) = (img.height(), img.width(), img.channels());

    let mut rows = vec![0f64; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let xx = reflect_index(x as isize + k as isize - r, w);
                    acc += t * img.get(y, xx, c) as f64;
                }
                rows[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = Image::filled(h, w, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let yy = reflect_index(y as isize + k as isize - r, h);
                    acc += t * rows[(yy * w + x) * ch + c];
                }
                out.set(y, x, c, acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// Pixel offsets of a streak of `length` pixels through the origin, `angle`
/// degrees clockwise from vertical.
fn streak_offsets(length: usize, angle: f64) -> Vec<(isize, isize)> {
    let (s, c) = angle.to_radians().sin_cos();
    let half = (length / 2) as isize;
    let mut offs: Vec<(isize, isize)> = (-half..=half)
        .map(|t| ((t as f64 * c).round() as isize, (t as f64 * s).round() as isize))
        .collect();
    offs.sort_unstable();
    offs.dedup();
    offs
}

/// The single-channel rain layer: sparse bright drops at `density`, each
/// smeared into a line along `angle`. Drops outside the frame contribute nothing.
pub fn rain_streak_layer(
    height: usize,
    width: usize,
    density: f64,
    angle: f64,
    seed: u64,
) -> Result<Image> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::arg(format!("rain density must be in [0,1], got {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drops = vec![0f32; height * width];
    for d in drops.iter_mut() {
        if rng.gen::<f64>() < density {
            *d = rng.gen_range(0.4f32..0.9);
        }
    }
    let offsets = streak_offsets(RAIN_STREAK_LENGTH, angle);
    let mut layer = Image::filled(height, width, 1, 0.0);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for &(dy, dx) in &offsets {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width {
                    acc += drops[sy as usize * width + sx as usize];
                }
            }
            layer.set(y, x, 0, acc.min(1.0));
        }
    }
    Ok(layer)
}

/// Screen-blend a streak layer onto `img`: `1 - (1 - img)(1 - streaks)`.
pub fn synthesize_rain(img: &Image, density: f64, angle: f64, seed: u64) -> Result<Image> {
    if !angle.is_finite() {
        return Err(Error::arg("rain angle must be finite"));
    }
    let layer = rain_streak_layer(img.height(), img.width(), density, angle, seed)?;
    if density == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let s = layer.get(y, x, 0);
            for c in 0..img.channels() {
                let v = img.get(y, x, c);
                // screen blend 1 - (1-v)(1-s), written so a black base returns s exactly
                out.set(y, x, c, (v + s - v * s).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// Top-to-bottom linear depth ramp: 1 on the first row, 0 on the last.
pub fn default_depth(height: usize, width: usize) -> Image {
    Image::from_fn(height, width, 1, |y, _, _| {
        if height == 1 {
            1.0
        } else {
            1.0 - y as f32 / (height - 1) as f32
        }
    })
}

/// Atmospheric scattering: `I = J·t + A·(1 - t)` with `t = exp(-beta·depth)`.
pub fn synthesize_haze(
    img: &Image,
    beta: f64,
    airlight: f64,
    depth: Option<&Image>,
) -> Result<Image> {
    check_haze(beta, airlight)?;
    let ramp;
    let depth = match depth {
        Some(d) => {
            if d.height() != img.height() || d.width() != img.width() || d.channels() != 1 {
                return Err(Error::arg(format!(
                    "depth map {}x{}x{} does not match image {}x{}",
                    d.height(),
                    d.width(),
                    d.channels(),
                    img.height(),
                    img.width()
                )));
            }
            if d.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::arg("depth values must be >= 0"));
            }
            d
        }
        None => {
            ramp = default_depth(img.height(), img.width());
            &ramp
        }
    };
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let t = (-beta * depth.get(y, x, 0) as f64).exp();
            for c in 0..img.channels() {
                let j = img.get(y, x, c) as f64;
                out.set(y, x, c, (j * t + airlight * (1.0 - t)).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// An aligned clean/degraded pair.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub clean: Image,
    pub degraded: Image,
    pub spec: DegradationSpec,
}

impl SamplePair {
    pub fn new(clean: Image, spec: &DegradationSpec, seed: u64) -> Result<Self> {
        let degraded = spec.apply(&clean, seed)?;
        Ok(Self {
            clean,
            degraded,
            spec: spec.clone(),
        })
    }
}

/// Endless stream of random patch pairs cycling through the task mix.
#[derive(Clone)]
pub struct PairStream {
    images: Vec<Image>,
    specs: Vec<DegradationSpec>,
    patch_size: usize,
    rng: ChaCha8Rng,
    next_task: usize,
}

/// Build a [`PairStream`]. Images smaller than `patch_size` are skipped with a warning.
pub fn make_dataset(
    clean_images: &[Image],
    task_mix: &[DegradationSpec],
    patch_size: usize,
    seed: u64,
) -> Result<PairStream> {
    if patch_size == 0 {
        return Err(Error::arg("patch_size must be positive"));
    }
    if task_mix.is_empty() {
        return Err(Error::Empty("task mix".into()));
    }
    for spec in task_mix {
        spec.validate()?;
    }
    let images: Vec<Image> = clean_images
        .iter()
        .enumerate()
        .filter_map(|(i, im)| {
            if im.height() < patch_size || im.width() < patch_size {
                log::warn!(
                    "skipping image {i} ({}x{}): smaller than patch size {patch_size}",
                    im.height(),
                    im.width()
                );
                None
            } else {
                Some(im.clone())
            }
        })
        .collect();
    if images.is_empty() {
        return Err(Error::Empty(format!("no clean image is at least {patch_size}x{patch_size}")));
    }
    Ok(PairStream {
        images,
        specs: task_mix.to_vec(),
        patch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_task: 0,
    })
}

impl PairStream {
    pub fn task_mix(&self) -> &[DegradationSpec] {
        &self.specs
    }
}

impl Iterator for PairStream {
    type Item = SamplePair;

    fn next(&mut self) -> Option<SamplePair> {
        let spec = &self.specs[self.next_task % self.specs.len()];
        self.next_task += 1;
        let img = &self.images[self.rng.gen_range(0..self.images.len())];
        let p = self.patch_size;
        let top = self.rng.gen_range(0..=img.height() - p);
        let left = self.rng.gen_range(0..=img.width() - p);
        let pair_seed: u64 = self.rng.gen();
        let clean = img.crop(top, left, p, p).expect("crop inside bounds");
        Some(SamplePair::new(clean, spec, pair_seed).expect("spec validated at construction"))
    }
}

/// Full-image evaluation pairs: every image under every spec.
pub fn make_eval_pairs(
    clean_images: &[Image],
    specs: &[DegradationSpec],
    seed: u64,
) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(clean_images.len() * specs.len());
    for (si, spec) in specs.iter().enumerate() {
        for (ii, img) in clean_images.iter().enumerate() {
            let s = mix_seed(seed, ((si as u64) << 32) | ii as u64);
            out.push(SamplePair::new(img.clone(), spec, s)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            0.2 + 0.6 * ((y * 7 + x * 3 + c * 11) % 17) as f32 / 17.0
        })
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = gradient_image(9, 7);
        assert_eq!(add_gaussian_noise(&img, 0.0, 3).unwrap(), img);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        assert!(add_gaussian_noise(&gradient_image(4, 4), -1.0, 0).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let img = gradient_image(16, 16);
        let a = add_gaussian_noise(&img, 25.0, 11).unwrap();
        let b = add_gaussian_noise(&img, 25.0, 11).unwrap();
        let c = add_gaussian_noise(&img, 25.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(10, 13, 3, 0.37);
        let out = apply_gaussian_blur(&img, 15, 2.5).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_sigma_blur_is_delta() {
        let img = gradient_image(12, 9);
        let out = apply_gaussian_blur(&img, 5, 1e-6).unwrap();
        let err = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(err <= 1e-6, "max error {err}");
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(apply_gaussian_blur(&gradient_image(8, 8), 4, 1.0).is_err());
        assert!(apply_gaussian_blur(&gradient_image(8, 8), 3, 0.0).is_err());
    }

    #[test]
    fn impulse_response_matches_brute_force_convolution() {
        let mut img = Image::filled(5, 5, 1, 0.0);
        img.set(2, 2, 0, 1.0);
        let out = apply_gaussian_blur(&img, 3, 1.0).unwrap();

        // Hand-built 3x3 stamp, normalized as a 2-D kernel.
        let mut stamp = [[0f64; 3]; 3];
        let mut total = 0.0;
        for (dy, row) in stamp.iter_mut().enumerate() {
            for (dx, v) in row.iter_mut().enumerate() {
                let (a, b) = (dy as f64 - 1.0, dx as f64 - 1.0);
                *v = (-(a * a + b * b) / 2.0).exp();
                total += *v;
            }
        }
        for y in 0..5 {
            for x in 0..5 {
                let expected = if (1..=3).contains(&y) && (1..=3).contains(&x) {
                    stamp[y - 1][x - 1] / total
                } else {
                    0.0
                };
                assert!((out.get(y, x, 0) as f64 - expected).abs() < 1e-6, "({y},{x})");
            }
        }
    }

    #[test]
    fn reflect_index_bounces() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn kernel_larger_than_image_still_works() {
        let img = gradient_image(5, 5);
        let out = apply_gaussian_blur(&img, 15, 3.0).unwrap();
        assert!(out.same_shape(&img));
    }

    #[test]
    fn zero_density_rain_is_identity() {
        let img = gradient_image(8, 8);
        assert_eq!(synthesize_rain(&img, 0.0, 20.0, 5).unwrap(), img);
    }

    #[test]
    fn rain_brightens() {
        let img = gradient_image(32, 32);
        let out = synthesize_rain(&img, 0.5, 15.0, 9).unwrap();
        assert!(out.mean() >= img.mean());
        assert!(synthesize_rain(&img, 1.5, 0.0, 9).is_err());
    }

    #[test]
    fn rain_on_black_is_the_streak_layer() {
        let black = Image::filled(8, 8, 3, 0.0);
        let out = synthesize_rain(&black, 0.1, 10.0, 7).unwrap();
        let layer = rain_streak_layer(8, 8, 0.1, 10.0, 7).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), layer.get(y, x, 0));
                }
            }
        }
        assert!(layer.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn vertical_streak_offsets() {
        let offs = streak_offsets(5, 0.0);
        assert_eq!(offs, vec![(-2, 0), (-1, 0), (0, 0), (1, 0), (2, 0)]);
    }

    #[test]
    fn zero_beta_haze_is_identity() {
        let img = gradient_image(6, 6);
        assert_eq!(synthesize_haze(&img, 0.0, 0.8, None).unwrap(), img);
    }

    #[test]
    fn infinite_depth_gives_airlight() {
        let img = gradient_image(4, 4);
        let depth = Image::filled(4, 4, 1, 1e6);
        let out = synthesize_haze(&img, 1.0, 0.7, Some(&depth)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn haze_single_pixel_hand_value() {
        let img = Image::filled(1, 1, 3, 0.5);
        let depth = Image::filled(1, 1, 1, std::f32::consts::LN_2);
        let out = synthesize_haze(&img, 1.0, 1.0, Some(&depth)).unwrap();
        for &v in out.data() {
            assert!((v - 0.75).abs() < 1e-6);
        }
    }

    #[test]
    fn haze_rejects_mismatched_depth() {
        let img = gradient_image(4, 4);
        let depth = Image::filled(4, 5, 1, 1.0);
        assert!(synthesize_haze(&img, 1.0, 0.5, Some(&depth)).is_err());
    }

    #[test]
    fn dataset_single_spec() {
        let imgs = vec![gradient_image(20, 20)];
        let spec = DegradationSpec::noise(15.0);
        let pairs: Vec<_> = make_dataset(&imgs, &[spec.clone()], 8, 1).unwrap().take(4).collect();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.spec == spec && p.clean.height() == 8));
    }

    #[test]
    fn dataset_round_robin_balances_tasks() {
        let imgs = vec![gradient_image(20, 20)];
        let specs = [DegradationSpec::noise(15.0), DegradationSpec::blur(5, 1.0, 2.0)];
        let pairs: Vec<_> = make_dataset(&imgs, &specs, 8, 1).unwrap().take(10).collect();
        let noise = pairs.iter().filter(|p| p.spec.kind == DegradationKind::Noise).count();
        assert_eq!(noise, 5);
    }

    #[test]
    fn dataset_is_deterministic() {
        let imgs = vec![gradient_image(20, 24), gradient_image(30, 18)];
        let specs = [DegradationSpec::noise(25.0), DegradationSpec::rain(0.05, 10.0)];
        let a: Vec<_> = make_dataset(&imgs, &specs, 12, 4).unwrap().take(6).collect();
        let b: Vec<_> = make_dataset(&imgs, &specs, 12, 4).unwrap().take(6).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clean, y.clean);
            assert_eq!(x.degraded, y.degraded);
        }
    }

    #[test]
    fn dataset_skips_small_images_and_errors_when_none_left() {
        let imgs = vec![gradient_image(6, 6), gradient_image(16, 16)];
        let spec = [DegradationSpec::noise(5.0)];
        let p = make_dataset(&imgs, &spec, 10, 0).unwrap().next().unwrap();
        assert_eq!(p.clean.height(), 10);
        assert!(make_dataset(&imgs[..1], &spec, 10, 0).is_err());
        assert!(make_dataset(&imgs, &[], 10, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(DegradationSpec::blur(14, 1.0, 2.0).validate().is_err());
        assert!(DegradationSpec::blur(15, 3.0, 2.0).validate().is_err());
        assert!(DegradationSpec::haze(-1.0, 0.5).validate().is_err());
        assert!(DegradationSpec::haze(1.0, 1.5).validate().is_err());
        assert!(DegradationSpec::noise(-2.0).validate().is_err());
        assert!(DegradationSpec::rain(0.1, 5.0).validate().is_ok());
    }
}
