use feddg::tape::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
}

#[test]
fn sum_rule_and_double_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -0.5]));
    let f = tape.mul(x, x).unwrap();
    let g = tape.scale(x, 3.0);
    let fg = tape.add(f, g).unwrap();
    let loss = tape.sum(fg);
    tape.backward(loss).unwrap();
    let once: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
    assert_eq!(once, vec![2.0 * 1.5 + 3.0, 2.0 * -0.5 + 3.0]);
    tape.backward(loss).unwrap();
    let twice = tape.grad(x).unwrap().data();
    assert_eq!(twice, &[2.0 * once[0], 2.0 * once[1]]);
}

#[test]
fn disconnected_parameter_has_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());

    let mut params = ParamSet::new(vec![("x".into(), t(&[2], &[1.0, 2.0])), ("u".into(), t(&[3], &[0.0; 3]))]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = tape.sum(bound.get(0));
    tape.backward(loss).unwrap();
    params.accumulate_grads(&tape, &bound).unwrap();
    assert_eq!(params.get(1).grad.as_ref().unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(feddg::Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_and_log_domain_errors() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2], &[1.0, 2.0]));
    let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(tape.add(a, b).is_err());
    let z = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(z), Err(feddg::Error::LogDomain(_))));
    let m = tape.param(t(&[2, 3], &[0.0; 6]));
    assert!(tape.matmul(m, m).is_err());
}

#[test]
fn identity_kernel_conv_reproduces_image() {
    let mut tape = Tape::new();
    let img: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = tape.constant(t(&[1, 1, 5, 6], &img));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = tape.param(t(&[1, 1, 3, 3], &k));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 5, 6]);
    assert_eq!(tape.value(y).data(), img.as_slice());
}

#[test]
fn conv_matches_direct_loop() {
    let (n, ci, co, h, w) = (2, 3, 4, 5, 4);
    let xs: Vec<f64> = (0..n * ci * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
    let ws: Vec<f64> = (0..co * ci * 9).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
    let bs: Vec<f64> = vec![0.5, -1.0, 0.25, 2.0];
    for stride in [1, 2] {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[n, ci, h, w], &xs));
        let wv = tape.constant(t(&[co, ci, 3, 3], &ws));
        let bv = tape.constant(t(&[co], &bs));
        let y = tape.conv2d(x, wv, Some(bv), stride, 1).unwrap();
        let (ho, wo) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
        assert_eq!(tape.shape(y), &[n, co, ho, wo]);
        let out = tape.value(y).data();
        for s in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bs[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xs[((s * ci + c) * h + iy as usize) * w + ix as usize]
                                        * ws[((o * ci + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out[((s * co + o) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }
}

#[test]
fn upsample_of_constant_is_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::full(&[1, 2, 3, 4], 1.25));
    let y = tape.upsample2x(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 6, 8]);
    assert!(tape.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
}

#[test]
fn max_pool_picks_window_maximum() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]));
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 7.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn concat_and_narrow_roundtrip() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.param(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 2]);
    assert_eq!(
        tape.value(c).data(),
        &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
    );
    let row = tape.narrow(c, 1, 1).unwrap();
    assert_eq!(tape.value(row).data(), &[3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
}

#[test]
fn masked_mean_of_single_pixel() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| i as f64).collect();
    let x = tape.param(t(&[2, 2, 3, 3], &data));
    let mut mask = vec![0.0; 9];
    mask[4] = 1.0;
    let v = tape.masked_mean(x, 1, &mask).unwrap();
    assert_eq!(tape.value(v).data(), &[22.0, 31.0]);
    assert!(tape.masked_mean(x, 0, &[0.0; 9]).is_err());
}

#[test]
fn cosine_similarity_values() {
    let mut tape = Tape::new();
    let a = tape.param(t(&[2], &[1.0, 0.0]));
    let b = tape.param(t(&[2], &[3.0, 3.0]));
    let c = tape.cosine_similarity(a, b).unwrap();
    assert!((tape.item(c) - 0.5f64.sqrt()).abs() < 1e-15);
    let z = tape.param(t(&[2], &[0.0, 0.0]));
    assert!(matches!(tape.cosine_similarity(a, z), Err(feddg::Error::ZeroNorm(_))));
}

#[test]
fn sgd_arithmetic_and_zero_grad_noop() {
    let mut params = ParamSet::new(vec![("w".into(), t(&[1], &[1.0]))]).unwrap();
    assert!(matches!(sgd_step(&mut params, 0.1), Err(feddg::Error::MissingGrad(_))));
    params.iter_mut().next().unwrap().grad = Some(t(&[1], &[2.0]));
    sgd_step(&mut params, 0.1).unwrap();
    assert!((params.get(0).value.data()[0] - 0.8).abs() < 1e-15);

    params.iter_mut().next().unwrap().grad = Some(t(&[1], &[0.0]));
    let before = params.get(0).value.clone();
    sgd_step(&mut params, 0.1).unwrap();
    assert_eq!(params.get(0).value, before);
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    for g in [1e-3, 0.5, 40.0, -7.0] {
        let mut params = ParamSet::new(vec![("w".into(), t(&[1], &[2.0]))]).unwrap();
        params.iter_mut().next().unwrap().grad = Some(t(&[1], &[g]));
        let mut state = AdamState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut params, &mut state, &cfg).unwrap();
        let step = 2.0 - params.get(0).value.data()[0];
        assert!((step.abs() - cfg.lr).abs() < 1e-7, "g={g} step={step}");
        assert_eq!(step.signum(), g.signum());
        assert_eq!(state.t, 1);
    }
}

#[test]
fn flatten_unflatten_identity_and_checkpoint_roundtrip() {
    let params = ParamSet::new(vec![
        ("a.weight".into(), Tensor::<f32>::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, 1e-3]).unwrap()),
        ("a.bias".into(), Tensor::<f32>::new(vec![2], vec![7.0, -7.0]).unwrap()),
    ])
    .unwrap();
    let back = params.unflatten(&params.flatten()).unwrap();
    assert_eq!(back, params);

    let bytes = encode_checkpoint(&params);
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let decoded: ParamSet<f32> = decode_checkpoint(&bytes).unwrap();
    assert_eq!(decoded, params);
    assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn duplicate_param_names_rejected() {
    let r = ParamSet::new(vec![("w".into(), Tensor::<f32>::zeros(&[1])), ("w".into(), Tensor::zeros(&[1]))]);
    assert!(r.is_err());
}
