use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn square_and_its_derivative() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    assert_eq!(tape.value(y).item(), 9.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn identity_matmul() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 7.0]).unwrap());
    let y = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(y), tape.value(a));
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 16, 16], 1.0));
    let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 16, 16]);
    let v = tape.value(y).data();
    assert_eq!(v[8 * 16 + 8], 9.0);
    // corners only see four in-bounds pixels under zero padding
    assert_eq!(v[0], 4.0);
}

#[test]
fn shape_errors_name_the_operation() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(DiffError::Shape { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(tape.add(a, c), Err(DiffError::Shape { op: "add", .. })));
    let img = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(tape.conv2d(img, k, 1, 1), Err(DiffError::Shape { op: "conv2d", .. })));
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(&[3]));
    let y = tape.tanh(x);
    assert!(matches!(tape.backward(y), Err(DiffError::NonScalar(_))));
}

#[test]
fn disconnected_param_has_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::from_vec(vec![5.0, 6.0, 7.0]));
    let y = tape.sum(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(unused).unwrap(), Tensor::zeros(&[3]));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(g.get(c).is_none());
}

#[test]
fn tanh_of_matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let x = rand_tensor(&mut rng, &[4, 1], -1.0, 1.0);
    let err = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.tanh(y);
            Ok(t.sum(y))
        },
        &[w, x],
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, &[5], -2.0, 2.0);
    let linear = grad_check(
        |t, v| {
            let y = t.scale(v[0], 3.5);
            let y = t.shift(y, -1.0);
            Ok(t.sum(y))
        },
        std::slice::from_ref(&a),
        1e-3,
    )
    .unwrap();
    assert!(linear < 1e-6);
    let report = grad_check_inputs(
        |t, _| Ok(t.scalar(4.0)),
        &[a],
        1e-3,
        &[None],
    )
    .unwrap();
    let worst = report[0].unwrap();
    assert_eq!((worst.analytic, worst.numeric, worst.error), (0.0, 0.0, 0.0));
}

#[test]
fn conv_tanh_mean_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            let y = t.channel_bias(y, v[2])?;
            let y = t.tanh(y);
            Ok(t.mean(y))
        },
        &[x, w, b],
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Direct six-loop convolution, independent of im2col.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ic) * h + ii as usize) * wd + jj as usize]
                                    * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 4), (2, 1, 3), (1, 2, 5)] {
        let x = rand_tensor(&mut rng, &[2, 3, 9, 8], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        let expect = naive_conv(&x, &w, stride, pad);
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)>
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[5, 3, 4, 4], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 5, 4, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
    let cx = tape.conv2d(xv, wv, 2, 1).unwrap();
    let ty = tape.conv_transpose2d(yv, wv, 2, 1, (8, 8)).unwrap();
    let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    assert!(tape.conv_transpose2d(yv, wv, 2, 1, (11, 11)).is_err());
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0).cast::<f32>();
    let w = rand_tensor(&mut rng, &[6, 4], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let (a, b) = (tape.constant(x.clone()), tape.param(w.clone()));
        let y = tape.matmul(a, b).unwrap();
        let y = tape.softplus(y);
        let s = tape.mean(y);
        let g = tape.backward(s).unwrap().get(b).unwrap();
        (tape.value(s).item().to_bits(), g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0 = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let grad_of = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(x0.clone());
        let a = tape.tanh(x);
        let a = tape.sum(a);
        let b = tape.square(x);
        let b = tape.mean(b);
        let out = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(out).unwrap().get(x).unwrap()
    };
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..4 {
        assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-12);
    }
}

/// One scalar-valued probe per primitive, each checked at 100 random points.
#[test]
fn every_primitive_matches_finite_differences() {
    type Probe = (
        &'static str,
        Vec<Vec<usize>>,
        (f64, f64),
        fn(&mut Tape<f64>, &[Var]) -> Result<Var, DiffError>,
    );
    fn weighted(t: &mut Tape<f64>, y: Var) -> Result<Var, DiffError> {
        // Non-uniform weighting so every output coordinate carries a distinct gradient.
        let n = t.value(y).numel();
        let w = Tensor::new(
            t.shape(y).to_vec(),
            (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect(),
        )?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }
    let probes: Vec<Probe> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("add", vec![vec![3, 4], vec![4]], (-1.0, 1.0), |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.square(y);
            weighted(t, y)
        }),
        ("sub", vec![vec![4], vec![3, 4]], (-1.0, 1.0), |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.square(y);
            weighted(t, y)
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y)
        }),
        ("div", vec![vec![2, 3], vec![3]], (0.5, 2.0), |t, v| {
            let y = t.div(v[0], v[1])?;
            weighted(t, y)
        }),
        ("neg_scale_shift", vec![vec![5]], (-1.0, 1.0), |t, v| {
            let y = t.neg(v[0]);
            let y = t.scale(y, 1.7);
            let y = t.shift(y, 0.3);
            let y = t.square(y);
            weighted(t, y)
        }),
        ("tanh", vec![vec![6]], (-2.0, 2.0), |t, v| {
            let y = t.tanh(v[0]);
            weighted(t, y)
        }),
        ("sigmoid", vec![vec![6]], (-4.0, 4.0), |t, v| {
            let y = t.sigmoid(v[0]);
            weighted(t, y)
        }),
        ("exp", vec![vec![6]], (-2.0, 2.0), |t, v| {
            let y = t.exp(v[0]);
            weighted(t, y)
        }),
        ("log", vec![vec![6]], (0.2, 3.0), |t, v| {
            let y = t.log(v[0]);
            weighted(t, y)
        }),
        ("softplus", vec![vec![6]], (-5.0, 5.0), |t, v| {
            let y = t.softplus(v[0]);
            weighted(t, y)
        }),
        ("relu", vec![vec![6]], (0.1, 2.0), |t, v| {
            // Kink excluded: sample away from zero on both sides.
            let s = t.shift(v[0], -1.05);
            let y = t.relu(s);
            let y = t.square(y);
            weighted(t, y)
        }),
        ("sqrt", vec![vec![6]], (0.2, 3.0), |t, v| {
            let y = t.sqrt(v[0]);
            weighted(t, y)
        }),
        ("recip", vec![vec![6]], (0.3, 3.0), |t, v| {
            let y = t.recip(v[0]);
            weighted(t, y)
        }),
        ("sum_mean", vec![vec![2, 3]], (-1.0, 1.0), |t, v| {
            let a = t.square(v[0]);
            let a = t.sum(a);
            let b = t.tanh(v[0]);
            let b = t.mean(b);
            let y = t.mul(a, b)?;
            Ok(y)
        }),
        ("sum_last", vec![vec![3, 4]], (-1.0, 1.0), |t, v| {
            let y = t.sum_last(v[0])?;
            let y = t.square(y);
            weighted(t, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 1]], (-1.0, 1.0), |t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 1)?;
            let y = t.tanh(y);
            weighted(t, y)
        }),
        ("slice", vec![vec![3, 5]], (-1.0, 1.0), |t, v| {
            let y = t.slice(v[0], 1, 1, 3)?;
            let y = t.square(y);
            weighted(t, y)
        }),
        ("expand_reshape", vec![vec![4]], (-1.0, 1.0), |t, v| {
            let y = t.expand(v[0], 3)?;
            let y = t.reshape(y, &[2, 6])?;
            let y = t.tanh(y);
            weighted(t, y)
        }),
        ("conv2d", vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]], (-1.0, 1.0), |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            weighted(t, y)
        }),
        ("conv_transpose2d", vec![vec![1, 2, 3, 3], vec![2, 3, 3, 3]], (-1.0, 1.0), |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2, 1, (5, 5))?;
            weighted(t, y)
        }),
        ("channel_bias", vec![vec![2, 3, 2, 2], vec![3]], (-1.0, 1.0), |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            let y = t.square(y);
            weighted(t, y)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (name, shapes, (lo, hi), f) in probes {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let point: Vec<Tensor<f64>> =
                shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
            worst = worst.max(grad_check(f, &point, 1e-5).unwrap());
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst}");
    }
}
