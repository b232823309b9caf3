use std::sync::Arc;

use proptest::prelude::*;
use simpleformer::attention::{
    attention_matrix, centering_matrix, mha_forward, sas_attention, shape_attention, shape_attention_matrix, AttentionHandles,
    AttentionParams, AttentionSettings, AttentionVariant, CenteringCache, ShapedScalars,
};
use simpleformer::blocks::{Gain, Linear};
use simpleformer::numerics::{Graph, MaskMode, SeqLayout, Tensor};
use simpleformer::params::{gaussian, tensor_rng};
use simpleformer::Error;

fn random(shape: &[usize], std: f64, seed: u64) -> Tensor<f64> {
    gaussian(shape, std, &mut tensor_rng(seed, "attention-test"))
}

fn mask_of(causal: bool) -> MaskMode {
    if causal {
        MaskMode::Causal
    } else {
        MaskMode::None
    }
}

fn shaped_params(d: usize, heads: usize, wq: Tensor<f64>, seed: u64) -> AttentionParams<f64> {
    AttentionParams {
        settings: AttentionSettings { variant: AttentionVariant::Shaped, mask: MaskMode::Causal, heads },
        wq,
        wk: random(&[d, d], 0.02, seed),
        value: Linear::Identity,
        projection: Linear::Identity,
        scalars: ShapedScalars::new(heads, 1.0, 1.0, 1.0),
    }
}

#[test]
fn centering_matrix_examples() {
    let c = centering_matrix::<f64>(3, MaskMode::None);
    assert!(c.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let c = centering_matrix::<f64>(3, MaskMode::Causal);
    assert_eq!(c.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(c.row(1), &[0.5, 0.5, 0.0]);
}

#[test]
fn centering_cache_is_keyed_by_exact_length() {
    let cache = CenteringCache::<f64>::new();
    let a = cache.get(4, MaskMode::Causal);
    let b = cache.get(4, MaskMode::Causal);
    assert!(Arc::ptr_eq(&a, &b));
    let c = cache.get(3, MaskMode::Causal);
    assert_eq!(c.shape(), &[3, 3]);
    assert_eq!(c.get(2, 0), 1.0 / 3.0);
    assert!(!Arc::ptr_eq(&a, &cache.get(4, MaskMode::None)));
}

#[test]
fn zero_query_gives_centering_matrix() {
    let (d, t) = (8, 5);
    let x = random(&[t, d], 1.0, 1);
    for causal in [true, false] {
        let mut p = shaped_params(d, 2, Tensor::zeros(&[d, d]), 2);
        p.settings.mask = mask_of(causal);
        let c = centering_matrix::<f64>(t, mask_of(causal));
        for h in 0..2 {
            assert_eq!(p.attention_matrix(&x, h).unwrap(), c);
        }
    }
}

#[test]
fn attention_matrix_rows_are_stochastic_with_random_weights() {
    let (d, t) = (8, 6);
    let x = random(&[t, d], 1.0, 3);
    let p = shaped_params(d, 4, random(&[d, d], 0.5, 4), 5);
    for h in 0..4 {
        let a = p.attention_matrix(&x, h).unwrap();
        for r in 0..t {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row(r)[r + 1..].iter().all(|&v| v == 0.0));
        }
    }
    assert!(matches!(p.attention_matrix(&x, 4), Err(Error::OutOfRange { .. })));
}

#[test]
fn attention_matrix_matches_explicit_per_head_formula() {
    let (d, t, heads) = (6, 4, 2);
    let dk = d / heads;
    let x = random(&[t, d], 1.0, 6);
    let p = shaped_params(d, heads, random(&[d, d], 0.7, 7), 8);
    for h in 0..heads {
        let a = p.attention_matrix(&x, h).unwrap();
        for i in 0..t {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..dk {
                        let qi: f64 = (0..d).map(|e| x.get(i, e) * p.wq.get(e, h * dk + c)).sum();
                        let kj: f64 = (0..d).map(|e| x.get(j, e) * p.wk.get(e, h * dk + c)).sum();
                        s += qi * kj;
                    }
                    s / (dk as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..=i {
                assert!((a.get(i, j) - logits[j].exp() / z).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn shape_attention_variants() {
    let t = 4;
    let a = {
        let mut g = Graph::new();
        let s = g.input(random(&[t, t], 1.0, 9));
        let y = g.masked_softmax_rows(s, t, MaskMode::Causal).unwrap();
        g.value(y).clone()
    };
    let c = centering_matrix::<f64>(t, MaskMode::Causal);
    assert_eq!(shape_attention_matrix(&a, &c, 0.3, 0.4, 0.5, AttentionVariant::Standard).unwrap(), a);
    let v = shape_attention_matrix(&a, &c, 0.3, 0.4, 0.5, AttentionVariant::VSkipInit).unwrap();
    let s = shape_attention_matrix(&a, &c, 0.3, 0.4, 0.5, AttentionVariant::Shaped).unwrap();
    for i in 0..t {
        for j in 0..t {
            let id = if i == j { 0.3 } else { 0.0 };
            assert!((v.get(i, j) - (id + 0.4 * a.get(i, j))).abs() < 1e-15);
            assert!((s.get(i, j) - (id + 0.4 * a.get(i, j) - 0.5 * c.get(i, j))).abs() < 1e-15);
        }
    }
}

#[test]
fn shape_attention_rejects_mismatched_centering() {
    let a = Tensor::<f64>::eye(3);
    let c = centering_matrix::<f64>(4, MaskMode::None);
    assert!(matches!(shape_attention_matrix(&a, &c, 1.0, 1.0, 1.0, AttentionVariant::Shaped), Err(Error::Shape { .. })));
}

#[test]
fn sas_attention_at_init_is_identity_on_normalised_input() {
    let (d, t) = (8, 6);
    let xn = random(&[t, d], 1.0, 10);
    let cache = CenteringCache::new();
    let p = shaped_params(d, 2, Tensor::zeros(&[d, d]), 11);
    assert_eq!(p.sas_forward(&xn, &cache).unwrap(), xn);
}

#[test]
fn reparam_value_with_zero_delta_matches_identity_value() {
    let (d, t) = (8, 6);
    let xn = random(&[t, d], 1.0, 12);
    let cache = CenteringCache::new();
    let mut p = shaped_params(d, 2, random(&[d, d], 0.3, 13), 14);
    let identity = p.sas_forward(&xn, &cache).unwrap();
    p.value = Linear::Reparam {
        init: Tensor::eye(d),
        delta: Tensor::zeros(&[d, d]),
        alpha: Gain::Param(Tensor::scalar(1.0)),
        beta: Gain::Param(Tensor::scalar(1.0)),
    };
    assert_eq!(p.sas_forward(&xn, &cache).unwrap(), identity);
}

#[test]
fn perturbed_alpha_scales_only_its_head() {
    let (d, t, heads) = (8, 5, 2);
    let xn = random(&[t, d], 1.0, 15);
    let cache = CenteringCache::new();
    let mut p = shaped_params(d, heads, Tensor::zeros(&[d, d]), 16);
    p.scalars.alpha.data_mut()[1] = 2.0;
    let out = p.sas_forward(&xn, &cache).unwrap();
    for r in 0..t {
        for c in 0..d {
            let want = if c >= d / heads { 2.0 * xn.get(r, c) } else { xn.get(r, c) };
            assert!((out.get(r, c) - want).abs() < 1e-15);
        }
    }
}

#[test]
fn sas_attention_rejects_projection() {
    let d = 4;
    let mut p = shaped_params(d, 2, Tensor::zeros(&[d, d]), 17);
    p.projection = Linear::Dense(Tensor::eye(d));
    let x = random(&[3, d], 1.0, 18);
    assert!(matches!(p.sas_forward(&x, &CenteringCache::new()), Err(Error::Config(_))));
}

#[test]
fn standard_mha_with_dense_weights_matches_manual_assembly() {
    let (d, t, heads) = (4, 3, 2);
    let x = random(&[t, d], 1.0, 19);
    let (wv, wp) = (random(&[d, d], 0.5, 20), random(&[d, d], 0.5, 21));
    let p = AttentionParams {
        settings: AttentionSettings { variant: AttentionVariant::Standard, mask: MaskMode::Causal, heads },
        wq: random(&[d, d], 0.5, 22),
        wk: random(&[d, d], 0.5, 23),
        value: Linear::Dense(wv.clone()),
        projection: Linear::Dense(wp.clone()),
        scalars: ShapedScalars::new(heads, 1.0, 1.0, 1.0),
    };
    let out = p.forward(&x, &CenteringCache::new()).unwrap();
    let matmul = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut m = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                m.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
            }
        }
        m
    };
    let v = matmul(&x, &wv);
    let mut cat = Tensor::zeros(&[t, d]);
    for h in 0..heads {
        let a = p.attention_matrix(&x, h).unwrap();
        for i in 0..t {
            for c in 0..d / heads {
                let col = h * d / heads + c;
                cat.set(i, col, (0..t).map(|j| a.get(i, j) * v.get(j, col)).sum());
            }
        }
    }
    let want = matmul(&cat, &wp);
    assert!(out.max_abs_diff(&want) < 1e-14);
}

#[test]
fn mha_and_sas_attention_agree_with_identity_weights() {
    let (d, t, heads) = (8, 6, 4);
    let x = random(&[t, d], 1.0, 24);
    let p = shaped_params(d, heads, random(&[d, d], 0.4, 25), 26);
    let mut scalars = p.scalars.clone();
    scalars.alpha = random(&[heads], 1.0, 27);
    scalars.gamma = random(&[heads], 1.0, 28);
    let p = AttentionParams { scalars, ..p };
    let cache = CenteringCache::new();
    let a = p.forward(&x, &cache).unwrap();
    let b = p.sas_forward(&x, &cache).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn graph_level_functions_compose() {
    let (d, t, heads) = (4, 3, 2);
    let layout = SeqLayout::new(2, t);
    let x = random(&[2 * t, d], 1.0, 29);
    let (wq, wk) = (random(&[d, d], 0.5, 30), random(&[d, d], 0.5, 31));
    let (al, be, ga) = (Tensor::full(&[heads], 1.0), Tensor::full(&[heads], 0.5), Tensor::full(&[heads], 0.25));
    let settings = AttentionSettings { variant: AttentionVariant::Shaped, mask: MaskMode::None, heads };
    let cache = CenteringCache::new();
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let (q, k) = (g.param(&wq), g.param(&wk));
    let (a, b, c) = (g.param(&al), g.param(&be), g.param(&ga));
    let att = attention_matrix(&mut g, xv, q, k, settings, layout).unwrap();
    assert_eq!(g.shape(att), &[2 * heads * t, t]);
    let mix = shape_attention(&mut g, att, cache.get(t, MaskMode::None), Some(a), Some(b), Some(c), settings.variant, heads).unwrap();
    for r in 0..2 * heads * t {
        let s: f64 = g.value(mix).row(r).iter().sum();
        assert!((s - (1.0 + 0.5 - 0.25)).abs() < 1e-12);
    }
    let handles = AttentionHandles {
        wq: q,
        wk: k,
        value: Linear::Identity,
        projection: Linear::Identity,
        alpha: Some(a),
        beta: Some(b),
        gamma: Some(c),
    };
    let y1 = mha_forward(&mut g, xv, &handles, settings, layout, &cache).unwrap();
    let y2 = sas_attention(&mut g, xv, &handles, settings, layout, &cache).unwrap();
    assert_eq!(g.value(y1), g.value(y2));
    let missing = AttentionHandles { gamma: None, ..handles };
    assert!(mha_forward(&mut g, xv, &missing, settings, layout, &cache).is_err());
}

proptest! {
    #[test]
    fn centering_equals_softmax_of_zeros(t in 1usize..=32, causal in any::<bool>()) {
        let mask = mask_of(causal);
        let zeros = Tensor::<f64>::zeros(&[t, t]);
        let mut g = Graph::new();
        let z = g.constant(&zeros);
        let y = g.masked_softmax_rows(z, t, mask).unwrap();
        prop_assert_eq!(g.value(y), &centering_matrix::<f64>(t, mask));
    }

    #[test]
    fn equal_beta_gamma_with_zero_query_is_exactly_scaled_identity(
        t in 1usize..=16, causal in any::<bool>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()
    ) {
        let d = 4;
        let mask = mask_of(causal);
        let x = random(&[t, d], 1.0, seed);
        let mut p = shaped_params(d, 2, Tensor::zeros(&[d, d]), seed ^ 1);
        p.settings.mask = mask;
        let a = p.attention_matrix(&x, 0).unwrap();
        let c = centering_matrix::<f64>(t, mask);
        let m = shape_attention_matrix(&a, &c, alpha, beta, beta, AttentionVariant::Shaped).unwrap();
        for i in 0..t {
            for j in 0..t {
                prop_assert_eq!(m.get(i, j), if i == j { alpha } else { 0.0 });
            }
        }
    }

    #[test]
    fn shaped_rows_sum_to_alpha_plus_beta_minus_gamma(
        t in 1usize..=12, causal in any::<bool>(), s in prop::array::uniform3(-2.0f64..2.0), seed in any::<u64>()
    ) {
        let d = 6;
        let mask = mask_of(causal);
        let x = random(&[t, d], 1.0, seed);
        let mut p = shaped_params(d, 3, random(&[d, d], 1.0, seed ^ 2), seed ^ 3);
        p.settings.mask = mask;
        let a = p.attention_matrix(&x, 1).unwrap();
        let c = centering_matrix::<f64>(t, mask);
        let m = shape_attention_matrix(&a, &c, s[0], s[1], s[2], AttentionVariant::Shaped).unwrap();
        for i in 0..t {
            let sum: f64 = m.row(i).iter().sum();
            prop_assert!((sum - (s[0] + s[1] - s[2])).abs() <= 1e-12);
        }
    }

    #[test]
    fn sas_attention_is_causal(pos in 0usize..8, seed in any::<u64>()) {
        let (d, t) = (8, 8);
        let x = random(&[t, d], 1.0, seed);
        let mut p = shaped_params(d, 2, random(&[d, d], 0.5, seed ^ 4), seed ^ 5);
        p.scalars = ShapedScalars { alpha: random(&[2], 1.0, seed ^ 6), beta: random(&[2], 1.0, seed ^ 7), gamma: random(&[2], 1.0, seed ^ 8) };
        let cache = CenteringCache::new();
        let y = p.sas_forward(&x, &cache).unwrap();
        let mut x2 = x.clone();
        let noise = random(&[t, d], 1.0, seed ^ 9);
        for r in pos + 1..t {
            for c in 0..d {
                x2.set(r, c, noise.get(r, c));
            }
        }
        let y2 = p.sas_forward(&x2, &cache).unwrap();
        prop_assert_eq!(y.row(pos), y2.row(pos));
    }
}
