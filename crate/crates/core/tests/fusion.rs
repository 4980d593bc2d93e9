mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use proptest::prelude::*;
use restorelab::backbone::{FeatureTaps, TapLevel};
use restorelab::dr_fusion::{adapt, attention_map, fuse_attention_map, DrFusionParams};
use restorelab::gradcheck::check_gradient;
use restorelab::nn::{resize2d, Conv2d, Interp};
use restorelab::params::{Init, ParamStore};
use restorelab::psf::{combine, experts_forward, fuse, fuse_with_scores, gate, one_hot_scores, ExpertInit, PsfParams};

fn psf(store: &ParamStore, c: usize) -> PsfParams {
    PsfParams::new(&store.root().pp("psf"), c, ExpertInit::FanIn).unwrap()
}

#[test]
fn psf_fuse_matches_brute_force() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 3);
    let p = psf(&store, 4);
    let mut r = rng(11);
    for _ in 0..10 {
        let taps = random_taps(&mut r, (2, 4, 4, 4), DType::F64);
        let got = flat(&fuse(&taps, &p).unwrap());
        let (s, m, d) = (to_arr4(&taps.shallow), to_arr4(&taps.medium), to_arr4(&taps.deep));
        let want: Vec<f64> = naive_fuse([&s, &m, &d], &p).into_iter().flatten().flatten().flatten().collect();
        assert!(rel_err(&got, &want) < 1e-10);
    }
}

#[test]
fn psf_one_hot_deep_equals_deep_expert() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 4);
    let p = psf(&store, 3);
    let taps = random_taps(&mut rng(1), (2, 3, 4, 4), DType::F64);
    let outs = experts_forward(&taps, &p).unwrap();
    let scores = one_hot_scores(TapLevel::Deep, 2, &taps.deep).unwrap();
    let fused = combine(&outs, &scores).unwrap();
    assert_eq!(flat(&fused), flat(&outs[2]));
}

#[test]
fn psf_identical_expert_outputs_ignore_scores() {
    let x = random_tensor(&mut rng(2), (1, 2, 3, 3), 1.0, DType::F64);
    let outs = [x.clone(), x.clone(), x.clone()];
    let scores = Tensor::new(&[[0.1f64, 0.7, 0.2]], &Device::Cpu).unwrap();
    let got = flat(&combine(&outs, &scores).unwrap());
    assert!(rel_err(&got, &flat(&x)) < 1e-15);
}

#[test]
fn psf_zero_tap_zero_bias_expert_gives_zero() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
    let p = PsfParams::new(&store.root(), 2, ExpertInit::FanIn).unwrap();
    let mut e = p.experts[0].clone();
    e.conv1.bias = Some(Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap());
    e.conv2.bias = Some(Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap());
    let y = e.forward(&Tensor::zeros((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap()).unwrap();
    assert!(flat(&y).iter().all(|&v| v == 0.0));
}

#[test]
fn psf_expert_2x2x2_matches_naive_convolution() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 8);
    let p = psf(&store, 2);
    let x = random_tensor(&mut rng(5), (1, 2, 2, 2), 1.0, DType::F64);
    let got = flat(&p.experts[1].forward(&x).unwrap());
    let want: Vec<f64> = naive_expert(&to_arr4(&x), &p.experts[1]).into_iter().flatten().flatten().flatten().collect();
    assert!(rel_err(&got, &want) < 1e-12);
}

#[test]
fn psf_joint_permutation_leaves_fuse_unchanged() {
    let x: Vec<Tensor> = (0..3).map(|k| random_tensor(&mut rng(k), (2, 2, 2, 2), 1.0, DType::F64)).collect();
    let s = Tensor::new(&[[0.2f64, 0.3, 0.5], [0.6, 0.1, 0.3]], &Device::Cpu).unwrap();
    let base = flat(&combine(&[x[0].clone(), x[1].clone(), x[2].clone()], &s).unwrap());
    let perm = [2usize, 0, 1];
    let sp = Tensor::cat(&perm.iter().map(|&k| s.narrow(1, k, 1).unwrap()).collect::<Vec<_>>(), 1).unwrap();
    let xp = [x[perm[0]].clone(), x[perm[1]].clone(), x[perm[2]].clone()];
    let got = flat(&combine(&xp, &sp).unwrap());
    assert!(rel_err(&got, &base) < 1e-15);
}

#[test]
fn psf_fuse_is_linear_in_expert_outputs_for_frozen_scores() {
    let mut r = rng(9);
    let a: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, (1, 2, 2, 2), 1.0, DType::F64)).collect();
    let b: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, (1, 2, 2, 2), 1.0, DType::F64)).collect();
    let s = Tensor::new(&[[0.25f64, 0.25, 0.5]], &Device::Cpu).unwrap();
    let (al, be) = (1.7, -0.4);
    let mix: Vec<Tensor> = a.iter().zip(&b).map(|(x, y)| ((x * al).unwrap() + (y * be).unwrap()).unwrap()).collect();
    let lhs = flat(&combine(&[mix[0].clone(), mix[1].clone(), mix[2].clone()], &s).unwrap());
    let fa = flat(&combine(&[a[0].clone(), a[1].clone(), a[2].clone()], &s).unwrap());
    let fb = flat(&combine(&[b[0].clone(), b[1].clone(), b[2].clone()], &s).unwrap());
    let rhs: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| al * x + be * y).collect();
    assert!(rel_err(&lhs, &rhs) < 1e-14);
}

#[test]
fn psf_gradients_match_finite_differences() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 21);
    let p = psf(&store, 4);
    let taps = random_taps(&mut rng(4), (1, 4, 4, 4), DType::F64);
    let target = random_tensor(&mut rng(5), (1, 4, 4, 4), 1.0, DType::F64);
    let f = || Ok((fuse(&taps, &p)? * &target)?.sum_all()?);
    for (name, var) in store.named_vars() {
        let r = check_gradient(&var, f, 1e-5, 24).unwrap();
        assert!(r.rel_error < 1e-3, "{name}: {r:?}");
    }
    let tv = Var::from_tensor(&taps.medium).unwrap();
    let taps_v = FeatureTaps {
        medium: tv.as_tensor().clone(),
        ..taps.clone()
    };
    let g = || Ok((fuse(&taps_v, &p)? * &target)?.sum_all()?);
    let r = check_gradient(&tv, g, 1e-5, 24).unwrap();
    assert!(r.rel_error < 1e-3, "medium tap: {r:?}");
}

#[test]
fn psf_non_finite_taps_are_rejected() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
    let p = psf(&store, 2);
    let mut taps = random_taps(&mut rng(0), (1, 2, 2, 2), DType::F64);
    taps.deep = Tensor::new(&[f64::NAN; 8], &Device::Cpu).unwrap().reshape((1, 2, 2, 2)).unwrap();
    assert!(gate(&taps, &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gating_scores_form_a_simplex(seed in 0u64..10_000, scale in 0.01f64..50.0) {
        let store = ParamStore::new(DType::F32, &Device::Cpu, seed);
        let p = psf(&store, 4);
        let mut r = rng(seed ^ 0xabc);
        let taps = FeatureTaps {
            shallow: random_tensor(&mut r, (3, 4, 2, 2), scale, DType::F32),
            medium: random_tensor(&mut r, (3, 4, 2, 2), scale, DType::F32),
            deep: random_tensor(&mut r, (3, 4, 2, 2), scale, DType::F32),
            patch_size: 1,
            resized: None,
        };
        let (_, scores) = fuse_with_scores(&taps, &p).unwrap();
        for row in scores.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap() {
            prop_assert!(row.iter().all(|&s| s >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_under_guidance_scaling(seed in 0u64..10_000, alpha in -20.0f64..20.0) {
        let store = ParamStore::new(DType::F64, &Device::Cpu, seed);
        let params = DrFusionParams::new(&store.root(), 3).unwrap();
        let mut r = rng(seed);
        let fda = random_tensor(&mut r, (2, 3, 2, 3), 1.0, DType::F64);
        let fi = random_tensor(&mut r, (2, 3, 2, 3), 1.0, DType::F64);
        let scaled = (fda * alpha).unwrap();
        let a = attention_map(&scaled, &fi, &params).unwrap();
        let rows = a.flatten_to(1).unwrap().to_vec2::<f64>().unwrap();
        for row in rows {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let out = fuse_attention_map(&scaled, &fi, &params).unwrap();
        prop_assert_eq!(out.dims(), fi.dims());
    }
}

fn conv1x1(w: &[f64], c: usize) -> Conv2d {
    let t = Tensor::from_vec(w.to_vec(), (c, c, 1, 1), &Device::Cpu).unwrap();
    Conv2d::from_tensors(t, Some(Tensor::zeros(c, DType::F64, &Device::Cpu).unwrap()))
}

#[test]
fn single_channel_fusion_doubles_the_input() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 1);
    let params = DrFusionParams::new(&store.root(), 1).unwrap();
    let fi = random_tensor(&mut rng(3), (2, 1, 3, 3), 5.0, DType::F64);
    let fda = random_tensor(&mut rng(4), (2, 1, 3, 3), 5.0, DType::F64);
    let out = flat(&fuse_attention_map(&fda, &fi, &params).unwrap());
    let want: Vec<f64> = flat(&fi).iter().map(|v| 2.0 * v).collect();
    assert_eq!(out, want);
}

#[test]
fn zero_projections_give_channel_mean_plus_input() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 1);
    let params = DrFusionParams::zeros(&store.root(), 3).unwrap();
    let fi = random_tensor(&mut rng(3), (1, 3, 2, 2), 1.0, DType::F64);
    let out = to_arr4(&fuse_attention_map(&fi, &fi, &params).unwrap());
    let x = to_arr4(&fi);
    for c in 0..3 {
        for y in 0..2 {
            for xx in 0..2 {
                let mean = (0..3).map(|k| x[0][k][y][xx]).sum::<f64>() / 3.0;
                assert!((out[0][c][y][xx] - (mean + x[0][c][y][xx])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hand_computed_two_channel_single_position() {
    // W_k = [[1,0],[0,2]], W_q = [[0,1],[1,0]], F_DA = (1, 0.5), F_I = (2, -1).
    // K = (1, 1), Q' = (-1, 2); logits = K Q'^T / √2 = [[-1, 2], [-1, 2]] / √2.
    let params = DrFusionParams::from_convs(conv1x1(&[0.0, 1.0, 1.0, 0.0], 2), conv1x1(&[1.0, 0.0, 0.0, 2.0], 2));
    let fda = Tensor::new(&[1.0f64, 0.5], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
    let fi = Tensor::new(&[2.0f64, -1.0], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
    let s = 2f64.sqrt();
    let e1 = (-1.0 / s).exp();
    let e2 = (2.0 / s).exp();
    let (a0, a1) = (e1 / (e1 + e2), e2 / (e1 + e2));
    let mixed = a0 * 2.0 + a1 * -1.0;
    let want = [mixed + 2.0, mixed - 1.0];
    let got = flat(&fuse_attention_map(&fda, &fi, &params).unwrap());
    assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12, "{got:?} vs {want:?}");
    let attn = flat(&attention_map(&fda, &fi, &params).unwrap());
    assert!((attn[0] - a0).abs() < 1e-12 && (attn[1] - a1).abs() < 1e-12);
}

#[test]
fn residual_term_is_a_convex_channel_mix() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 7);
    let params = DrFusionParams::new(&store.root(), 4).unwrap();
    let fi = random_tensor(&mut rng(8), (1, 4, 3, 3), 1.0, DType::F64);
    let fda = random_tensor(&mut rng(9), (1, 4, 3, 3), 1.0, DType::F64);
    let out = to_arr4(&fuse_attention_map(&fda, &fi, &params).unwrap());
    let x = to_arr4(&fi);
    for y in 0..3 {
        for xx in 0..3 {
            let col: Vec<f64> = (0..4).map(|k| x[0][k][y][xx]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            for c in 0..4 {
                let term = out[0][c][y][xx] - x[0][c][y][xx];
                assert!(term >= lo - 1e-12 && term <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn fusion_errors_on_bad_shapes() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
    let params = DrFusionParams::new(&store.root(), 2).unwrap();
    let a = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
    let b = Tensor::zeros((1, 2, 3, 2), DType::F64, &Device::Cpu).unwrap();
    assert!(fuse_attention_map(&a, &b, &params).is_err());
    assert!(DrFusionParams::new(&store.root().pp("z"), 0).is_err());
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 13);
    let params = DrFusionParams::new(&store.root(), 3).unwrap();
    let fi = Var::from_tensor(&random_tensor(&mut rng(1), (1, 3, 2, 2), 1.0, DType::F64)).unwrap();
    let fda = Var::from_tensor(&random_tensor(&mut rng(2), (1, 3, 2, 2), 1.0, DType::F64)).unwrap();
    let target = random_tensor(&mut rng(3), (1, 3, 2, 2), 1.0, DType::F64);
    let f = || Ok((fuse_attention_map(fda.as_tensor(), fi.as_tensor(), &params)? * &target)?.sum_all()?);
    let mut vars: Vec<(String, Var)> = store.named_vars();
    vars.push(("f_i".into(), fi.clone()));
    vars.push(("f_da".into(), fda.clone()));
    for (name, v) in vars {
        let r = check_gradient(&v, f, 1e-5, 40).unwrap();
        assert!(r.rel_error < 1e-3, "{name}: {r:?}");
    }
}

#[test]
fn adapt_identity_projection_keeps_the_map() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
    let proj = Conv2d::new(&store.root(), 3, 3, 1, Some(Init::ConvDelta)).unwrap();
    let x = random_tensor(&mut rng(1), (1, 3, 4, 5), 1.0, DType::F64);
    let a = adapt(&x, &proj, (4, 5), 2).unwrap();
    assert_eq!(a.source_level, 2);
    assert_eq!(flat(&a.map), flat(&x));
}

#[test]
fn adapt_resizes_constants_to_constants_and_rejects_zero_targets() {
    let store = ParamStore::new(DType::F64, &Device::Cpu, 0);
    let proj = Conv2d::new(&store.root(), 2, 3, 1, None).unwrap();
    let x = Tensor::full(0.7f64, (1, 2, 8, 8), &Device::Cpu).unwrap();
    let a = adapt(&x, &proj, (4, 4), 0).unwrap();
    assert_eq!(a.map.dims(), &[1, 3, 4, 4]);
    let v = to_arr4(&a.map);
    for c in 0..3 {
        let first = v[0][c][0][0];
        assert!(v[0][c].iter().flatten().all(|&z| (z - first).abs() < 1e-12));
    }
    assert!(adapt(&x, &proj, (0, 4), 0).is_err());
}

#[test]
fn bilinear_two_by_two_to_three_by_three_hand_values() {
    let (a, b, c, d) = (1.0, 3.0, 5.0, 11.0);
    let x = Tensor::new(&[[a, b], [c, d]], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
    let got = flat(&resize2d(&x, 3, 3, Interp::Bilinear).unwrap());
    let want = [
        a,
        (a + b) / 2.0,
        b,
        (a + c) / 2.0,
        (a + b + c + d) / 4.0,
        (b + d) / 2.0,
        c,
        (c + d) / 2.0,
        d,
    ];
    assert!(rel_err(&got, &want) < 1e-12, "{got:?}");
    let naive: Vec<f64> = naive_bilinear(&[vec![a, b], vec![c, d]], 3, 3).into_iter().flatten().collect();
    assert!(rel_err(&got, &naive) < 1e-12);
}
