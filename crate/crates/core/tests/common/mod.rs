//! Loop-only reference implementations used as independent oracles.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restorelab::backbone::FeatureTaps;
use restorelab::nn::Conv2d;
use restorelab::psf::{Expert, Gating, PsfParams};

/// `[b][c][y][x]` nested vectors.
pub type Arr4 = Vec<Vec<Vec<Vec<f64>>>>;

pub fn to_arr4(t: &Tensor) -> Arr4 {
    let (b, c, h, w) = t.dims4().unwrap();
    let v = flat(t);
    (0..b)
        .map(|bi| {
            (0..c)
                .map(|ci| (0..h).map(|y| (0..w).map(|x| v[((bi * c + ci) * h + y) * w + x]).collect()).collect())
                .collect()
        })
        .collect()
}

pub fn from_arr4(a: &Arr4, dtype: DType) -> Tensor {
    let (b, c, h, w) = (a.len(), a[0].len(), a[0][0].len(), a[0][0][0].len());
    let flat: Vec<f64> = a.iter().flatten().flatten().flatten().copied().collect();
    Tensor::from_vec(flat, (b, c, h, w), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Zero-padded "same" convolution, direct summation.
pub fn naive_conv(x: &Arr4, conv: &Conv2d) -> Arr4 {
    let (cout, cin, kh, kw) = conv.weight.dims4().unwrap();
    let w = flat(&conv.weight);
    let bias = conv.bias.as_ref().map(flat).unwrap_or_else(|| vec![0.0; cout]);
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    x.iter()
        .map(|xb| {
            (0..cout)
                .map(|o| {
                    (0..h)
                        .map(|i| {
                            (0..wd)
                                .map(|j| {
                                    let mut acc = bias[o];
                                    for c in 0..cin {
                                        for dy in 0..kh {
                                            for dx in 0..kw {
                                                let (y, xx) = (i as isize + dy as isize - ph, j as isize + dx as isize - pw);
                                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                                    acc += w[((o * cin + c) * kh + dy) * kw + dx] * xb[c][y as usize][xx as usize];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn map4(a: &Arr4, f: impl Fn(f64) -> f64) -> Arr4 {
    a.iter().map(|b| b.iter().map(|c| c.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()).collect()).collect()
}

pub fn zip4(a: &Arr4, b: &Arr4, f: impl Fn(f64, f64) -> f64) -> Arr4 {
    a.iter()
        .zip(b)
        .map(|(ab, bb)| {
            ab.iter()
                .zip(bb)
                .map(|(ac, bc)| ac.iter().zip(bc).map(|(ar, br)| ar.iter().zip(br).map(|(&x, &y)| f(x, y)).collect()).collect())
                .collect()
        })
        .collect()
}

pub fn naive_expert(x: &Arr4, e: &Expert) -> Arr4 {
    let h = map4(&naive_conv(x, &e.conv1), gelu_tanh);
    zip4(x, &naive_conv(&h, &e.conv2), |a, b| a + b)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Pool the concatenated taps, two dense layers with GELU between, softmax.
pub fn naive_gate(taps: [&Arr4; 3], g: &Gating) -> Vec<Vec<f64>> {
    let (w1, b1, w2, b2) = (flat(&g.fc1.weight), flat(&g.fc1.bias), flat(&g.fc2.weight), flat(&g.fc2.bias));
    let hidden = b1.len();
    let b = taps[0].len();
    (0..b)
        .map(|bi| {
            let pooled: Vec<f64> = taps
                .iter()
                .flat_map(|t| {
                    t[bi].iter().map(|ch| {
                        let n = (ch.len() * ch[0].len()) as f64;
                        ch.iter().flatten().sum::<f64>() / n
                    })
                })
                .collect();
            let din = pooled.len();
            let h: Vec<f64> = (0..hidden)
                .map(|o| gelu_tanh(b1[o] + (0..din).map(|i| w1[o * din + i] * pooled[i]).sum::<f64>()))
                .collect();
            let logits: Vec<f64> = (0..3).map(|o| b2[o] + (0..hidden).map(|i| w2[o * hidden + i] * h[i]).sum::<f64>()).collect();
            softmax(&logits)
        })
        .collect()
}

/// Brute-force `Σ_k s_k · E_k(tap_k)`.
pub fn naive_fuse(taps: [&Arr4; 3], p: &PsfParams) -> Arr4 {
    let scores = naive_gate(taps, &p.gating);
    let outs: Vec<Arr4> = (0..3).map(|k| naive_expert(taps[k], &p.experts[k])).collect();
    let mut acc = map4(&outs[0], |_| 0.0);
    for (bi, s) in scores.iter().enumerate() {
        for k in 0..3 {
            for (c, ch) in outs[k][bi].iter().enumerate() {
                for (y, row) in ch.iter().enumerate() {
                    for (x, v) in row.iter().enumerate() {
                        acc[bi][c][y][x] += s[k] * v;
                    }
                }
            }
        }
    }
    acc
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), scale: f64, dtype: DType) -> Tensor {
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn random_taps(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), dtype: DType) -> FeatureTaps {
    FeatureTaps {
        shallow: random_tensor(rng, shape, 2.0, dtype),
        medium: random_tensor(rng, shape, 2.0, dtype),
        deep: random_tensor(rng, shape, 2.0, dtype),
        patch_size: 1,
        resized: None,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `max |a - b| / max(max |b|, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-12);
    num / den
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn naive_bilinear(src: &[Vec<f64>], oh: usize, ow: usize) -> Vec<Vec<f64>> {
    let (ih, iw) = (src.len(), src[0].len());
    let coord = |o: usize, insz: usize, outsz: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * insz as f64 / outsz as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(insz - 1);
        let i1 = (i0 + 1).min(insz - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..oh)
        .map(|y| {
            let (y0, y1, fy) = coord(y, ih, oh);
            (0..ow)
                .map(|x| {
                    let (x0, x1, fx) = coord(x, iw, ow);
                    let top = src[y0][x0] * (1.0 - fx) + src[y0][x1] * fx;
                    let bot = src[y1][x0] * (1.0 - fx) + src[y1][x1] * fx;
                    top * (1.0 - fy) + bot * fy
                })
                .collect()
        })
        .collect()
}
