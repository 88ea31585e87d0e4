use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (oy * stride + i) as isize - pad as isize;
                            let xx = (ox * stride + j) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += w.data()[((o * ci + c) * kh + i) * kw + j]
                                    * x.data()[(c * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_degenerate_is_affine() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap());
    let w = g.parameter("w", Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let b = g.parameter("b", Tensor::from_vec(vec![0.5]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[6.5]);
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, &[1, 3, 3]);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut g = Graph::<f64>::new();
    let x = g.input("x", input.clone());
    let w = g.parameter("w", Tensor::new(vec![1, 1, 3, 3], k).unwrap());
    let b = g.parameter("b", Tensor::from_vec(vec![0.0]));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(y).unwrap().data(), input.data());
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0), (3, 2)] {
        let xv = rand_tensor(&mut rng, &[2, 5, 5]);
        let wv = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bv = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", xv.clone());
        let w = g.parameter("w", wv.clone());
        let b = g.parameter("b", bv.clone());
        let y = g.conv2d(x, w, b, stride, pad).unwrap();
        g.forward().unwrap();
        let expected = naive_conv(&xv, &wv, &bv, stride, pad);
        let got = g.value(y).unwrap().data();
        assert_eq!(got.len(), expected.len());
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::zeros(&[2, 4, 4]));
    let w_even = g.parameter("we", Tensor::zeros(&[1, 2, 2, 2]));
    let w_chan = g.parameter("wc", Tensor::zeros(&[1, 3, 3, 3]));
    let w_big = g.parameter("wb", Tensor::zeros(&[1, 2, 7, 7]));
    let b = g.parameter("b", Tensor::zeros(&[1]));
    for w in [w_even, w_chan, w_big] {
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(AutodiffError::ShapeMismatch { .. })));
    }
    let b2 = g.parameter("b2", Tensor::zeros(&[2]));
    let w = g.parameter("w", Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, w, b2, 1, 1).is_err());
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(x).unwrap();
    let v = g.input("v", Tensor::from_vec(vec![3.0, 4.0]));
    let n = g.l2_normalize(v).unwrap();
    let w = g.parameter("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.parameter("b", Tensor::zeros(&[2]));
    let l = g.linear(v, w, b).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
    let nv = g.value(n).unwrap().data();
    assert!((nv[0] - 0.6).abs() < 1e-15 && (nv[1] - 0.8).abs() < 1e-15);
    assert_eq!(g.value(l).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn l2_normalize_of_zero_stays_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::zeros(&[4]));
    let n = g.l2_normalize(x).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(n).unwrap().data(), &[0.0; 4]);
}

#[test]
fn relu_sum_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.set_loss(s).unwrap();
    g.forward().unwrap();
    let grads = g.backward().unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![0.0]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.set_loss(s).unwrap();
    g.forward().unwrap();
    assert_eq!(g.backward().unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn norm_of_normalized_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", rand_tensor(&mut rng, &[6]));
    let n = g.l2_normalize(x).unwrap();
    let sq = g.dot(n, n).unwrap();
    g.set_loss(sq).unwrap();
    g.forward().unwrap();
    let grad = g.backward().unwrap();
    assert!(grad.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn backward_before_forward_fails() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![1.0]));
    let s = g.sum(x).unwrap();
    g.set_loss(s).unwrap();
    assert_eq!(g.backward().unwrap_err(), AutodiffError::GraphNotEvaluated);
    g.forward().unwrap();
    g.set_value(x, Tensor::from_vec(vec![2.0])).unwrap();
    assert_eq!(g.backward().unwrap_err(), AutodiffError::GraphNotEvaluated);
    assert!(g.value(s).is_err());
}

#[test]
fn loss_must_be_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::zeros(&[3]));
    assert!(matches!(g.set_loss(x), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn linear_graph_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", rand_tensor(&mut rng, &[5]));
    let w = g.parameter("w", rand_tensor(&mut rng, &[3, 5]));
    let b = g.parameter("b", rand_tensor(&mut rng, &[3]));
    let r = g.input("r", rand_tensor(&mut rng, &[3]));
    let y = g.linear(x, w, b).unwrap();
    let l = g.dot(y, r).unwrap();
    g.set_loss(l).unwrap();
    for leaf in [x, w, b] {
        let rep = finite_difference_check(&mut g, leaf, 1e-5).unwrap();
        assert!(rep.max_error < 1e-9, "{rep:?}");
        assert_eq!(rep.excluded, 0);
    }
}

#[test]
fn relu_kink_coordinate_is_excluded() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![0.0, 1.5, -0.7]));
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    g.set_loss(s).unwrap();
    let rep = finite_difference_check(&mut g, x, 1e-5).unwrap();
    assert_eq!(rep.excluded, 1);
    assert_eq!(rep.checked, 2);
    assert!(rep.max_error < 1e-9);
}

#[test]
fn gradcheck_rejects_epsilon_out_of_range() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", Tensor::from_vec(vec![1.0]));
    let s = g.sum(x).unwrap();
    g.set_loss(s).unwrap();
    assert!(finite_difference_check(&mut g, x, 1e-2).is_err());
}

#[test]
fn adjoints_are_additive() {
    // d(L1 + L2) = dL1 + dL2, with the sum built from the operator set.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = rand_tensor(&mut rng, &[2, 4, 4]);
    let wv = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bv = rand_tensor(&mut rng, &[3]);
    let r1 = rand_tensor(&mut rng, &[3, 4, 4]);
    let r2 = rand_tensor(&mut rng, &[3, 4, 4]);

    let build = |which: u8| {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", xv.clone());
        let w = g.parameter("w", wv.clone());
        let b = g.parameter("b", bv.clone());
        let c = g.conv2d(x, w, b, 1, 1).unwrap();
        let h = g.relu(c).unwrap();
        let p1 = g.input("r1", r1.clone());
        let p2 = g.input("r2", r2.clone());
        let l1 = g.dot(h, p1).unwrap();
        let l2 = g.dot(h, p2).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.set_loss(loss).unwrap();
        g.forward().unwrap();
        let grads = g.backward().unwrap();
        grads.get(w).unwrap().clone()
    };
    let (g1, g2, g12) = (build(1), build(2), build(3));
    for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

#[test]
fn vjp_matches_dot_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seed = rand_tensor(&mut rng, &[4]);
    let mut g = Graph::<f64>::new();
    let x = g.input("x", rand_tensor(&mut rng, &[6]));
    let w = g.parameter("w", rand_tensor(&mut rng, &[4, 6]));
    let b = g.parameter("b", rand_tensor(&mut rng, &[4]));
    let y = g.linear(x, w, b).unwrap();
    let n = g.l2_normalize(y).unwrap();
    let r = g.input("r", seed.clone());
    let l = g.dot(n, r).unwrap();
    g.set_loss(l).unwrap();
    g.forward().unwrap();
    let a = g.backward().unwrap();
    let v = g.backward_from(n, seed).unwrap();
    assert_eq!(a.get(w).unwrap(), v.get(w).unwrap());
}

#[test]
fn f32_forward_tracks_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xv = rand_tensor(&mut rng, &[3, 6, 7]);
    let wv = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let bv = rand_tensor(&mut rng, &[4]);
    let run = |x: Tensor<f64>| x;
    let mut g64 = Graph::<f64>::new();
    let (x, w, b) = (g64.input("x", run(xv.clone())), g64.parameter("w", wv.clone()), g64.parameter("b", bv.clone()));
    let y64 = g64.conv2d(x, w, b, 2, 1).unwrap();
    g64.forward().unwrap();
    let mut g32 = Graph::<f32>::new();
    let (x, w, b) = (g32.input("x", xv.cast()), g32.parameter("w", wv.cast()), g32.parameter("b", bv.cast()));
    let y32 = g32.conv2d(x, w, b, 2, 1).unwrap();
    g32.forward().unwrap();
    for (a, b) in g64.value(y64).unwrap().data().iter().zip(g32.value(y32).unwrap().data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
