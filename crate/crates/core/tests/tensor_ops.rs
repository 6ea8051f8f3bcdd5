use latseg_core::gradcheck::{relative_error, EPS, TOLERANCE};
use latseg_core::tensor::kernels;
use latseg_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts the op output with fixed random weights and compares every
/// input entry's tape gradient with central differences.
fn check_grad(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        rand_tensor(&mut rng, tape.shape(out))
    };
    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.value(s).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(probe.clone());
    let prod = tape.mul(out, w).unwrap();
    let s = tape.sum(prod).unwrap();
    let grads = tape.backward(s).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let err = relative_error(g.data()[i], numeric);
            assert!(
                err < TOLERANCE,
                "{name}: input {k} entry {i}: analytic {} numeric {numeric} rel {err:e}",
                g.data()[i]
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(2024)
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng();
    let (m, k, n) = (5, 7, 3);
    let a = rand_tensor(&mut r, &[m, k]);
    let b = rand_tensor(&mut r, &[k, n]);
    let got = kernels::matmul(a.data(), b.data(), m, k, n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            assert_eq!(got[i * n + j], acc);
        }
    }
}

#[test]
fn bilinear_two_by_two_to_two_by_four() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let y = tape.bilinear_resize(x, 2, 4).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn bilinear_identity_size_is_a_copy() {
    let mut r = rng();
    let t = rand_tensor(&mut r, &[3, 4, 5]);
    let mut tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = tape.bilinear_resize(x, 4, 5).unwrap();
    assert!(tape.value(y).bit_eq(&t));
}

fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dil: usize) -> Vec<f64> {
    let (cin, h, wd) = x.chw().unwrap();
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[co, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = rng();
    for (cin, h, w, cout, k, stride, pad) in [(3, 16, 12, 4, 7, 4, 3), (2, 6, 8, 3, 2, 2, 0), (4, 5, 5, 2, 3, 1, 1)] {
        let x = rand_tensor(&mut r, &[cin, h, w]);
        let wt = rand_tensor(&mut r, &[cout, cin, k, k]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(wt.clone());
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let expect = conv_oracle(&x, &wt, stride, pad, 1);
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dilated_depthwise_matches_nested_loops() {
    let mut r = rng();
    let (c, h, w) = (3, 7, 9);
    let x = rand_tensor(&mut r, &[c, h, w]);
    let k = rand_tensor(&mut r, &[c, 3, 3]);
    for dil in 1..=3 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let y = tape.depthwise_conv2d(xv, kv, dil).unwrap();
        for ch in 0..c {
            let xc = Tensor::new(vec![1, h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec()).unwrap();
            let kc = Tensor::new(vec![1, 1, 3, 3], k.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
            let expect = conv_oracle(&xc, &kc, 1, dil, dil);
            let got = &tape.value(y).data()[ch * h * w..(ch + 1) * h * w];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "dilation {dil}");
            }
        }
    }
}

#[test]
fn gradients_of_elementwise_and_shape_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    let c = rand_tensor(&mut r, &[4, 2]);
    let s = rand_tensor(&mut r, &[1]);
    check_grad("matmul", &[a.clone(), c.clone()], |t, v| t.matmul(v[0], v[1]).unwrap());
    check_grad("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]).unwrap());
    check_grad("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[2, 6]).unwrap());
    check_grad("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check_grad("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check_grad("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7).unwrap());
    check_grad("scale_by", &[a.clone(), s.clone()], |t, v| t.scale_by(v[0], v[1]).unwrap());
    check_grad("add_scalar", &[a.clone(), s.clone()], |t, v| t.add_scalar(v[0], v[1]).unwrap());
    check_grad("relu", std::slice::from_ref(&a), |t, v| t.relu(v[0]).unwrap());
    check_grad("gelu", std::slice::from_ref(&a), |t, v| t.gelu(v[0]).unwrap());
    check_grad("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]).unwrap());
    check_grad("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]).unwrap());
    check_grad("concat", &[a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1]]).unwrap());
    check_grad("slice", std::slice::from_ref(&a), |t, v| t.slice(v[0], 1, 3).unwrap());
}

#[test]
fn gradients_of_softmax_on_every_axis() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 4, 2]);
    for axis in 0..3 {
        check_grad("softmax", std::slice::from_ref(&x), |t, v| t.softmax(v[0], axis).unwrap());
    }
}

#[test]
fn gradients_of_spatial_ops() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 5, 6]);
    check_grad("resize up", std::slice::from_ref(&x), |t, v| t.bilinear_resize(v[0], 9, 13).unwrap());
    check_grad("resize down", std::slice::from_ref(&x), |t, v| t.bilinear_resize(v[0], 3, 2).unwrap());
    let k = rand_tensor(&mut r, &[2, 3, 3]);
    for dil in [1, 2] {
        check_grad("depthwise", &[x.clone(), k.clone()], |t, v| t.depthwise_conv2d(v[0], v[1], dil).unwrap());
    }
    let pw = rand_tensor(&mut r, &[3, 2]);
    let pb = rand_tensor(&mut r, &[3]);
    check_grad("pointwise", &[x.clone(), pw.clone(), pb], |t, v| {
        t.pointwise_conv(v[0], v[1], Some(v[2])).unwrap()
    });
    check_grad("pointwise no bias", &[x.clone(), pw], |t, v| t.pointwise_conv(v[0], v[1], None).unwrap());
    let cw = rand_tensor(&mut r, &[3, 2, 3, 3]);
    let cb = rand_tensor(&mut r, &[3]);
    check_grad("conv2d", &[x.clone(), cw, cb], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
    let big = rand_tensor(&mut r, &[2, 8, 8]);
    let w7 = rand_tensor(&mut r, &[2, 2, 7, 7]);
    check_grad("conv2d 7x7/4", &[big, w7], |t, v| t.conv2d(v[0], v[1], None, 4, 3).unwrap());
    let g = rand_tensor(&mut r, &[2]);
    let b = rand_tensor(&mut r, &[2]);
    check_grad("layer_norm", &[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn gradients_of_gather_scatter_and_losses() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[3, 10]);
    let idx = [7, 2, 9, 0];
    check_grad("gather", std::slice::from_ref(&x), |t, v| t.gather_cols(v[0], &idx).unwrap());
    let d = rand_tensor(&mut r, &[3, 4]);
    check_grad("scatter_add", &[x.clone(), d], |t, v| t.scatter_add_cols(v[0], v[1], &idx).unwrap());
    let a = rand_tensor(&mut r, &[4, 5]);
    let b = rand_tensor(&mut r, &[4, 5]);
    check_grad("cosine", &[a, b], |t, v| t.column_cosine(v[0], v[1]).unwrap());
    let logits = rand_tensor(&mut r, &[4, 2, 3]);
    let targets = [Some(0), None, Some(3), Some(1), None, Some(2)];
    check_grad("cross_entropy", &[logits], |t, v| t.softmax_cross_entropy(v[0], &targets).unwrap());
    let s = rand_tensor(&mut r, &[5]);
    let bt = [1.0, 0.0, 1.0, 1.0, 0.0];
    check_grad("bce", &[s], |t, v| t.bce_with_logits(v[0], &bt).unwrap());
}

#[test]
fn scatter_leaves_other_columns_bit_identical() {
    let mut r = rng();
    let base = rand_tensor(&mut r, &[2, 6]);
    let delta = rand_tensor(&mut r, &[2, 2]);
    let mut tape = Tape::new();
    let bv = tape.constant(base.clone());
    let dv = tape.constant(delta);
    let out = tape.scatter_add_cols(bv, dv, &[1, 4]).unwrap();
    let o = tape.value(out);
    for row in 0..2 {
        for col in [0, 2, 3, 5] {
            assert_eq!(o.data()[row * 6 + col].to_bits(), base.data()[row * 6 + col].to_bits());
        }
    }
    assert!(tape.scatter_add_cols(bv, dv, &[1, 1]).is_err());
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    assert!(matches!(tape.backward(s), Err(Error::DeadTape)));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 1e300));
    let err = tape.scale(x, 1e300).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(!Tensor::new(vec![2], vec![f64::NAN, 0.0]).map(|t| t.is_finite()).unwrap_or(false));
}

#[test]
fn shape_mismatches_are_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, c).is_err());
    assert!(tape.softmax(a, 2).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
        axis in 0usize..3,
    ) {
        let x = Tensor::new(vec![2, 3, 2], vals.clone()).unwrap();
        let shape = [2usize, 3, 2];
        let (o, l, i) = kernels::axis_split(&shape, axis);
        let y = kernels::softmax(x.data(), o, l, i);
        for a in 0..o {
            for b in 0..i {
                let s: f64 = (0..l).map(|j| y[a * l * i + j * i + b]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for j in 0..l {
                    let v = y[a * l * i + j * i + b];
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let y2 = kernels::softmax(&shifted, o, l, i);
        for (p, q) in y.iter().zip(&y2) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
