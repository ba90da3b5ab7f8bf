use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vit_tad_tensor::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mag: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-mag..mag)).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn eval1(x: Tensor, f: impl for<'g> Fn(Var<'g>) -> Result<Var<'g>>) -> Tensor {
    let g = Graph::new();
    let v = g.constant(x);
    (*f(v).unwrap().value()).clone()
}

// ---- oracles -------------------------------------------------------------

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    t(&[m, n], &out)
}

#[allow(clippy::too_many_arguments)]
fn naive_conv3d(x: &Tensor, k: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let ks = k.shape();
    let out_dim = |a: usize| (xs[a] + 2 * pad[a] - ks[a]) / stride[a] + 1;
    let (ot, oh, ow) = (out_dim(0), out_dim(1), out_dim(2));
    let cout = ks[4];
    let mut out = vec![0.0; ot * oh * ow * cout];
    for t0 in 0..ot {
        for h0 in 0..oh {
            for w0 in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for dt in 0..ks[0] {
                        for dh in 0..ks[1] {
                            for dw in 0..ks[2] {
                                for ci in 0..ks[3] {
                                    let it = (t0 * stride[0] + dt) as isize - pad[0] as isize;
                                    let ih = (h0 * stride[1] + dh) as isize - pad[1] as isize;
                                    let iw = (w0 * stride[2] + dw) as isize - pad[2] as isize;
                                    if it < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                    if it >= xs[0] || ih >= xs[1] || iw >= xs[2] {
                                        continue;
                                    }
                                    acc += x.at(&[it, ih, iw, ci]) * k.at(&[dt, dh, dw, ci, co]);
                                }
                            }
                        }
                    }
                    out[((t0 * oh + h0) * ow + w0) * cout + co] = acc;
                }
            }
        }
    }
    t(&[ot, oh, ow, cout], &out)
}

/// Keys' cubic convolution kernel with a = -0.75, evaluated directly.
fn keys_kernel(x: f64) -> f64 {
    let a = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

fn oracle_bicubic(pe: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w, c) = (pe.shape()[0], pe.shape()[1], pe.shape()[2]);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            for ch in 0..c {
                let mut acc = 0.0;
                for iy in (sy.floor() as isize - 1)..=(sy.floor() as isize + 2) {
                    for ix in (sx.floor() as isize - 1)..=(sx.floor() as isize + 2) {
                        let wgt = keys_kernel(sy - iy as f64) * keys_kernel(sx - ix as f64);
                        let cy = iy.clamp(0, h as isize - 1) as usize;
                        let cx = ix.clamp(0, w as isize - 1) as usize;
                        acc += wgt * pe.at(&[cy, cx, ch]);
                    }
                }
                out[(oy * ow + ox) * c + ch] = acc;
            }
        }
    }
    t(&[oh, ow, c], &out)
}

// ---- matmul --------------------------------------------------------------

#[test]
fn matmul_identity_and_zero() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let g = Graph::new();
    let av = g.constant(a.clone());
    assert_eq!(*av.matmul(g.constant(Tensor::eye(2))).unwrap().value(), a);
    assert_eq!(*av.matmul(g.constant(Tensor::zeros(&[2, 2]))).unwrap().value(), Tensor::zeros(&[2, 2]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], 1.0);
    let g = Graph::new();
    let out = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
    assert!(out.max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let g = Graph::new();
    let err = g
        .constant(Tensor::zeros(&[2, 3]))
        .matmul(g.constant(Tensor::zeros(&[2, 3])))
        .err()
        .unwrap();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

// ---- softmax -------------------------------------------------------------

#[test]
fn softmax_examples() {
    let u = eval1(Tensor::zeros(&[4]), |v| v.softmax());
    assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let x = t(&[3], &[1.0, 2.0, 3.0]);
    let s = eval1(x.clone(), |v| v.softmax());
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((s.data()[i] - v.exp() / z).abs() < 1e-12);
    }

    let shifted = eval1(x.map(|v| v + 1234.5), |v| v.softmax());
    assert!(shifted.max_abs_diff(&s) < 1e-12);
}

// ---- layer norm ----------------------------------------------------------

fn ln(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor {
    let g = Graph::new();
    let out = g
        .constant(x)
        .layer_norm(g.constant(gamma), g.constant(beta), 1e-6)
        .unwrap();
    (*out.value()).clone()
}

#[test]
fn layer_norm_examples() {
    let c = 8;
    let out = ln(Tensor::full(&[3, c], 4.2), Tensor::ones(&[c]), Tensor::zeros(&[c]));
    assert!(out.data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, c], 3.0);
    let b = t(&[c], &[0.5; 8]);
    let out = ln(x.clone(), Tensor::zeros(&[c]), b);
    assert!(out.data().iter().all(|&v| v == 0.5));

    let out = ln(x, Tensor::ones(&[c]), Tensor::zeros(&[c]));
    for row in out.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

// ---- conv3d --------------------------------------------------------------

#[test]
fn conv3d_pointwise_equals_channel_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 4], 1.0);
    let k = rand_tensor(&mut rng, &[1, 1, 1, 4, 3], 1.0);
    let g = Graph::new();
    let out = g.constant(x.clone()).conv3d(g.constant(k.clone()), None, [1; 3], [0; 3]).unwrap();
    let expect = naive_matmul(&x.reshape(&[12, 4]).unwrap(), &k.reshape(&[4, 3]).unwrap());
    assert!(out.value().reshape(&[12, 3]).unwrap().max_abs_diff(&expect) < 1e-14);
}

#[test]
fn conv3d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = 3;
    let x = rand_tensor(&mut rng, &[4, 5, 3, c], 2.0);
    let mut k = Tensor::zeros(&[3, 3, 3, c, c]);
    for ch in 0..c {
        let off = k.offset(&[1, 1, 1, ch, ch]);
        k.data_mut()[off] = 1.0;
    }
    let g = Graph::new();
    let pad = same_padding([3, 3, 3]).unwrap();
    let out = g.constant(x.clone()).conv3d(g.constant(k), None, [1; 3], pad).unwrap();
    assert_eq!(*out.value(), x);
}

#[test]
fn conv3d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 4, 4, 2], 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 3, 2, 3], 1.0);
    let g = Graph::new();
    let out = g.constant(x.clone()).conv3d(g.constant(k.clone()), None, [1; 3], [1; 3]).unwrap();
    assert!(out.value().max_abs_diff(&naive_conv3d(&x, &k, [1; 3], [1; 3])) < 1e-13);

    // strided, asymmetric case
    let x = rand_tensor(&mut rng, &[7, 3, 5, 2], 1.0);
    let k = rand_tensor(&mut rng, &[3, 1, 3, 2, 4], 1.0);
    let out = g.constant(x.clone()).conv3d(g.constant(k.clone()), None, [2, 1, 2], [1, 0, 1]).unwrap();
    let expect = naive_conv3d(&x, &k, [2, 1, 2], [1, 0, 1]);
    assert_eq!(out.value().shape(), expect.shape());
    assert_eq!(out.value().shape(), &[4, 3, 3, 4]);
    assert!(out.value().max_abs_diff(&expect) < 1e-13);
}

#[test]
fn conv3d_rejects_empty_output_and_even_same_padding() {
    let g = Graph::new();
    let err = g
        .constant(Tensor::zeros(&[2, 2, 2, 1]))
        .conv3d(g.constant(Tensor::zeros(&[3, 3, 3, 1, 1])), None, [1; 3], [0; 3])
        .err()
        .unwrap();
    assert!(matches!(err, TensorError::Config { .. }));
    assert!(same_padding([3, 2, 3]).is_err());
}

// ---- bicubic -------------------------------------------------------------

#[test]
fn bicubic_noop_constant_and_ramp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pe = rand_tensor(&mut rng, &[5, 7, 3], 1.0);
    assert_eq!(bicubic_resize_2d(&pe, 5, 7).unwrap(), pe);

    let c = Tensor::full(&[4, 6, 2], -0.37);
    for (oh, ow) in [(9, 3), (1, 1), (13, 17), (4, 5)] {
        let out = bicubic_resize_2d(&c, oh, ow).unwrap();
        assert!(out.data().iter().all(|&v| v == -0.37));
    }

    let ramp = Tensor::from_fn(&[4, 6, 1], |i| {
        let (y, x) = (i / 6, i % 6);
        0.5 * y as f64 - 0.25 * x as f64 + 1.0
    })
    .unwrap();
    let up = bicubic_resize_2d(&ramp, 8, 12).unwrap();
    assert!(up.max_abs_diff(&oracle_bicubic(&ramp, 8, 12)) < 1e-9);
    let down = bicubic_resize_2d(&pe, 3, 4).unwrap();
    assert!(down.max_abs_diff(&oracle_bicubic(&pe, 3, 4)) < 1e-12);
}

#[test]
fn bicubic_rejects_degenerate_grids() {
    assert!(bicubic_resize_2d(&Tensor::zeros(&[1, 4, 1]), 2, 2).is_err());
    assert!(bicubic_resize_2d(&Tensor::zeros(&[3, 4, 1]), 0, 2).is_err());
}

// ---- permute / mean ------------------------------------------------------

#[test]
fn permute_and_mean_axis() {
    let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
    let p = eval1(x.clone(), |v| v.permute(&[1, 0, 2]));
    assert_eq!(p.shape(), &[3, 2, 4]);
    assert_eq!(p.at(&[2, 1, 3]), x.at(&[1, 2, 3]));
    let m = eval1(x.clone(), |v| v.mean_axis(1));
    assert_eq!(m.shape(), &[2, 4]);
    assert_eq!(m.at(&[1, 2]), (x.at(&[1, 0, 2]) + x.at(&[1, 1, 2]) + x.at(&[1, 2, 2])) / 3.0);
}

// ---- gradients -----------------------------------------------------------

fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        let t = rand_tensor(&mut rng, shape, 1.0);
        s.insert(Parameter {
            name: name.to_string(),
            tensor: t,
            init: InitScheme::Zeros,
        })
        .unwrap();
    }
    s
}

fn check(store: &ParamStore, f: impl for<'g> Fn(&'g Graph, &BoundParams<'g>) -> Result<Var<'g>>) -> f64 {
    grad_check(store, f, &GradCheckOptions::default()).unwrap().max_rel_error
}

#[test]
fn gradcheck_trivial_objectives() {
    let s = store_with(&[("x", &[3, 4])], 1);
    let x = s.find("x").unwrap();
    let err = check(&s, |_, p| p.var(x).sum());
    assert!(err < 1e-9, "{err}");
    let g = Graph::new();
    let b = s.bind(&g);
    let out = b.var(x).sum().unwrap();
    assert!(g.backward(out).unwrap().get(b.var(x)).unwrap().data().iter().all(|&v| v == 1.0));

    let err = check(&s, |_, p| p.var(x).mul(p.var(x))?.sum()?.scale(0.5));
    assert!(err < 1e-9, "{err}");
}

#[test]
fn gradcheck_elementwise_and_linear_ops() {
    let s = store_with(&[("x", &[2, 3, 4]), ("w", &[4, 5]), ("b", &[5]), ("y", &[2, 3, 4]), ("p", &[3, 4]), ("q", &[2, 4])], 2);
    let id = |n| s.find(n).unwrap();
    let err = check(&s, |_, p| {
        let h = p.var(id("x")).mul(p.var(id("y")))?.sub(p.var(id("y")))?;
        let h = h.add_tiled(p.var(id("p")))?.add_mid_broadcast(p.var(id("q")))?;
        let h = h.linear(p.var(id("w")), Some(p.var(id("b"))))?.gelu()?.softplus()?;
        h.mul(h)?.sum()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_softmax_layernorm_affine() {
    let s = store_with(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6]), ("s", &[6]), ("t", &[6]), ("r", &[3, 6])], 3);
    let id = |n| s.find(n).unwrap();
    let err = check(&s, |_, p| {
        let h = p.var(id("x")).layer_norm(p.var(id("g")), p.var(id("b")), 1e-6)?;
        let h = h.channel_affine(p.var(id("s")), p.var(id("t")))?.softmax()?;
        h.mul(p.var(id("r")))?.sum()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_conv3d_attention_permute_mean_bicubic() {
    let s = store_with(
        &[
            ("x", &[3, 2, 4, 2]),
            ("k", &[3, 1, 3, 2, 4]),
            ("kb", &[4]),
            ("wq", &[4, 4]),
            ("wk", &[4, 4]),
            ("wv", &[4, 4]),
            ("r", &[4, 3]),
            ("pe", &[3, 3, 2]),
        ],
        4,
    );
    let id = |n| s.find(n).unwrap();
    let err = check(&s, |_, p| {
        let h = p.var(id("x")).conv3d(p.var(id("k")), Some(p.var(id("kb"))), [1, 1, 2], [1, 0, 1])?;
        let h = h.reshape(&[3, 4, 4])?.permute(&[1, 0, 2])?;
        let q = h.linear(p.var(id("wq")), None)?;
        let k = h.linear(p.var(id("wk")), None)?;
        let v = h.linear(p.var(id("wv")), None)?;
        let a = q.attention(k, v, 2)?.mean_axis(2)?;
        let pe = p.var(id("pe")).bicubic_resize_2d(5, 4)?.sum()?;
        a.mul(p.var(id("r")))?.sum()?.add(pe.mul(pe)?)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_rejects_non_finite_objective() {
    let s = store_with(&[("x", &[2])], 5);
    let x = s.find("x").unwrap();
    let res = grad_check(&s, |_, p| p.var(x).scale(f64::INFINITY)?.sum(), &GradCheckOptions::default());
    assert!(matches!(res, Err(TensorError::NonFinite { .. })), "{res:?}");
}

#[test]
fn mac_counter_tracks_forward_ops() {
    let g = Graph::new();
    let x = g.constant(Tensor::ones(&[2, 5, 8]));
    let w = g.constant(Tensor::ones(&[8, 3]));
    let (_, counts) = count_macs(|| {
        x.linear(w, None).unwrap();
        x.attention(x, x, 2).unwrap();
    });
    assert_eq!(counts.linear, 2 * 5 * 8 * 3);
    assert_eq!(counts.attn_score, 2 * 5 * 5 * 8);
    assert_eq!(counts.attn_value, 2 * 5 * 5 * 8);
}

// ---- properties ----------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
        let out = eval1(t(&[3, 4], &vals), |v| v.softmax());
        for row in out.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn bicubic_constant_fields_exact(c in -5.0f64..5.0, oh in 1usize..12, ow in 1usize..12) {
        let out = bicubic_resize_2d(&Tensor::full(&[3, 4, 2], c), oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand_tensor(&mut rng, &[2, 5, 4], 3.0);
        let k = rand_tensor(&mut rng, &[2, 5, 4], 3.0);
        let p = attention_probs(&q, &k, 2).unwrap();
        prop_assert_eq!(p.shape(), &[2, 2, 5, 5]);
        for row in p.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
