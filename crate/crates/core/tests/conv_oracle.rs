use segtransvae::{Error, Init, Rng, Tape, Tensor};

/// Direct cross-correlation with zero padding, written from the definition.
fn conv_reference(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, h, wd, d] = xs;
    let [cout, _, k, _, _] = ws;
    let o = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (oh, ow, od) = (o(h), o(wd), o(d));
    let mut out = vec![0.0; n * cout * oh * ow * od];
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    for l in 0..od {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for a in 0..k {
                                for bb in 0..k {
                                    for c in 0..k {
                                        let hi = (i * stride + a) as isize - pad as isize;
                                        let wi = (j * stride + bb) as isize - pad as isize;
                                        let di = (l * stride + c) as isize - pad as isize;
                                        if hi < 0 || wi < 0 || di < 0 || hi >= h as isize || wi >= wd as isize || di >= d as isize {
                                            continue;
                                        }
                                        let xv = x[(((ni * cin + ci) * h + hi as usize) * wd + wi as usize) * d + di as usize];
                                        let wv = w[(((co * cin + ci) * k + a) * k + bb) * k + c];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((ni * cout + co) * oh + i) * ow + j) * od + l] = acc;
                    }
                }
            }
        }
    }
    (out, [n, cout, oh, ow, od])
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::build(Init::Normal { mean: 0.0, std: 1.0 }, shape.to_vec(), Some(rng)).unwrap()
}

#[test]
fn matches_nested_loops_on_random_instances() {
    let mut rng = Rng::new(50);
    for case in 0..50 {
        let n = 1 + rng.below(2) as usize;
        let cin = 1 + rng.below(3) as usize;
        let cout = 1 + rng.below(3) as usize;
        let dims: Vec<usize> = (0..3).map(|_| 3 + rng.below(4) as usize).collect();
        let k = if rng.below(2) == 0 { 1 } else { 3 };
        let stride = 1 + rng.below(2) as usize;
        let pad = if k == 3 { rng.below(2) as usize } else { 0 };
        let xs = [n, cin, dims[0], dims[1], dims[2]];
        let ws = [cout, cin, k, k, k];
        let x = normal(&xs, &mut rng);
        let w = normal(&ws, &mut rng);
        let b = normal(&[cout], &mut rng);

        let (expect, shape) = conv_reference(x.data(), xs, w.data(), ws, b.data(), stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(t.shape(y), &shape, "case {case}");
        for (a, e) in t.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "case {case}: {a} vs {e}");
        }
    }
}

#[test]
fn spec_sized_instance_matches_reference_in_f32() {
    let mut rng = Rng::new(3);
    let x = normal(&[1, 2, 5, 5, 5], &mut rng);
    let w = normal(&[3, 2, 3, 3, 3], &mut rng);
    let (expect, _) = conv_reference(x.data(), [1, 2, 5, 5, 5], w.data(), [3, 2, 3, 3, 3], &[0.0; 3], 1, 1);
    let mut t = Tape::<f32>::new();
    let xv = t.constant(x.cast());
    let wv = t.constant(w.cast());
    let y = t.conv3d(xv, wv, None, 1, 1).unwrap();
    for (a, e) in t.value(y).data().iter().zip(&expect) {
        assert!((*a as f64 - e).abs() <= 1e-5 * e.abs().max(1.0));
    }
}

#[test]
fn identity_kernel_and_strided_shape() {
    let mut rng = Rng::new(1);
    let x = normal(&[1, 2, 3, 4, 5], &mut rng);
    let mut eye = vec![0.0; 4];
    eye[0] = 1.0;
    eye[3] = 1.0;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::from_vec([2, 2, 1, 1, 1], eye).unwrap());
    let y = t.conv3d(xv, w, None, 1, 0).unwrap();
    assert!(t.value(y).bit_eq(&x));

    let big = t.constant(Tensor::zeros([1, 1, 16, 16, 16]).unwrap());
    let k = t.constant(Tensor::zeros([2, 1, 3, 3, 3]).unwrap());
    let y = t.conv3d(big, k, None, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 2, 8, 8, 8]);
}

#[test]
fn kernel_larger_than_padded_input_is_rejected() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros([1, 1, 2, 2, 2]).unwrap());
    let w = t.constant(Tensor::zeros([1, 1, 3, 3, 3]).unwrap());
    assert!(matches!(t.conv3d(x, w, None, 1, 0), Err(Error::Shape(_))));
}

#[test]
fn threaded_kernels_are_bitwise_identical() {
    let mut rng = Rng::new(9);
    let x = normal(&[2, 3, 6, 6, 6], &mut rng).cast::<f32>();
    let w = normal(&[4, 3, 3, 3, 3], &mut rng).cast::<f32>();
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let wv = t.leaf(w.clone(), true);
        let y = t.conv3d(xv, wv, None, 1, 1).unwrap();
        let y = t.square(y);
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        (t.value(s).clone(), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    segtransvae::tensor::parallel::set_threads(1);
    let a = run();
    segtransvae::tensor::parallel::set_threads(4);
    let b = run();
    segtransvae::tensor::parallel::set_threads(1);
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
}
