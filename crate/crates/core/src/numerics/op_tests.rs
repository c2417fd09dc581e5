use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar projection of an output against a fixed random tensor.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let r = rand_tensor(g.value(y).shape(), seed);
    g.weighted_sum(y, r)
}

fn assert_all_below(errs: &[f64], tol: f64) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e <= tol, "input {i}: relative error {e} > {tol}");
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let x = rand_tensor(&[1, 1, 4, 4], 1);
    let xv = g.input(x.clone());
    let w = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv2d(xv, w, None, ConvGeom::new((1, 1), (1, 1), (0, 0))).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv2d_shape_law() {
    let mut g = Graph::<f64>::new();
    let x = g.input(rand_tensor(&[1, 1, 4, 4], 2));
    let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, ConvGeom::new((3, 3), (2, 2), (1, 1))).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    // Top-left output sums the 2x2 valid corner of the padded window.
    let xs = g.value(x).data();
    let expect = xs[0] + xs[1] + xs[4] + xs[5];
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);

    let bad = g.input(Tensor::full(&[1, 2, 3, 3], 1.0));
    assert!(g.conv2d(x, bad, None, ConvGeom::new((3, 3), (1, 1), (1, 1))).is_err());
}

#[test]
fn conv2d_gradients() {
    let geom = ConvGeom::new((3, 3), (2, 1), (1, 1));
    let inputs = [
        rand_tensor(&[2, 2, 5, 4], 3),
        rand_tensor(&[3, 2, 3, 3], 4),
        rand_tensor(&[3], 5),
    ];
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), geom)?;
            project(g, y, 6)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

#[test]
fn conv_transpose_is_adjoint() {
    for (geom, hw) in [
        (ConvGeom::new((4, 4), (2, 2), (1, 1)), (8, 8)),
        (ConvGeom::new((3, 3), (1, 1), (1, 1)), (8, 8)),
        (ConvGeom::new((4, 3), (2, 1), (1, 1)), (8, 8)),
    ] {
        let x = rand_tensor(&[1, 1, hw.0, hw.1], 7);
        let w = rand_tensor(&[2, 1, geom.kh, geom.kw], 8);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let cx = g.conv2d(xv, wv, None, geom).unwrap();
        let y = rand_tensor(g.value(cx).shape(), 9);
        let yv = g.input(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, geom).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_shapes_and_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 5]));
    let w = g.input(rand_tensor(&[3, 2, 4, 4], 10));
    let b = g.input(Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap());
    let y = g.conv_transpose2d(x, w, Some(b), ConvGeom::new((4, 4), (2, 2), (1, 1))).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 8, 10]);
    let d = g.value(y).data();
    assert!(d[..80].iter().all(|&v| v == 0.5));
    assert!(d[80..].iter().all(|&v| v == -1.0));
}

#[test]
fn conv_transpose_gradients() {
    let geom = ConvGeom::new((4, 3), (2, 1), (1, 1));
    let inputs = [
        rand_tensor(&[2, 3, 3, 4], 11),
        rand_tensor(&[3, 2, 4, 3], 12),
        rand_tensor(&[2], 13),
    ];
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), geom)?;
            project(g, y, 14)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

fn path_adjacency(v: usize) -> Vec<f64> {
    let mut a = vec![0.0; v * v];
    for i in 0..v - 1 {
        a[i * v + i + 1] = 1.0;
        a[(i + 1) * v + i] = 1.0;
    }
    a
}

#[test]
fn graph_conv_isolated_nodes_identity() {
    let v = 5;
    let adj = Arc::new(normalize_adjacency(&vec![0.0; v * v], v).unwrap());
    let x = rand_tensor(&[1, 3, 2, v], 15);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let w = g.input(Tensor::from_vec(&[3, 3], eye).unwrap());
    let y = g.graph_conv(xv, w, adj).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn graph_conv_two_nodes_constant_features() {
    let adj = Arc::new(normalize_adjacency(&[0.0, 1.0, 1.0, 0.0], 2).unwrap());
    let c = 0.7;
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 2], c));
    let w = g.input(Tensor::from_vec(&[2, 1], vec![2.0, -0.5]).unwrap());
    let y = g.graph_conv(x, w, adj).unwrap();
    let d = g.value(y).data();
    assert!(d[..6].iter().all(|v| (v - c * 2.0).abs() < 1e-14));
    assert!(d[6..].iter().all(|v| (v - c * -0.5).abs() < 1e-14));
}

#[test]
fn graph_conv_permutation_equivariance() {
    let v = 6;
    let adj = path_adjacency(v);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut padj = vec![0.0; v * v];
    for i in 0..v {
        for j in 0..v {
            padj[i * v + j] = adj[perm[i] * v + perm[j]];
        }
    }
    let x = rand_tensor(&[1, 2, 3, v], 16);
    let mut px = Tensor::zeros(&[1, 2, 3, v]);
    for r in 0..6 {
        for i in 0..v {
            px.data_mut()[r * v + i] = x.data()[r * v + perm[i]];
        }
    }
    let w = rand_tensor(&[4, 2], 17);
    let run = |x: Tensor<f64>, a: Vec<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.input(w.clone());
        let y = g.graph_conv(xv, wv, Arc::new(normalize_adjacency(&a, v).unwrap())).unwrap();
        g.value(y).clone()
    };
    let y = run(x, adj);
    let py = run(px, padj);
    for r in 0..12 {
        for i in 0..v {
            assert!((py.data()[r * v + i] - y.data()[r * v + perm[i]]).abs() < 1e-12);
        }
    }
}

#[test]
fn graph_conv_gradients() {
    let v = 5;
    let adj = Arc::new(normalize_adjacency(&path_adjacency(v), v).unwrap());
    let inputs = [rand_tensor(&[2, 3, 4, v], 18), rand_tensor(&[2, 3], 19)];
    let errs = check(
        &inputs,
        |g, vars| {
            let y = g.graph_conv(vars[0], vars[1], adj.clone())?;
            project(g, y, 20)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

fn temporal_geom(stride: usize) -> ConvGeom {
    ConvGeom::new((9, 1), (stride, 1), (4, 0))
}

#[test]
fn temporal_conv_identity_and_stride() {
    let c = 2;
    let mut w = Tensor::zeros(&[c, c, 9, 1]);
    for ch in 0..c {
        w.data_mut()[(ch * c + ch) * 9 + 4] = 1.0;
    }
    let x = rand_tensor(&[1, c, 100, 3], 21);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w);
    let y = g.conv2d(xv, wv, None, temporal_geom(1)).unwrap();
    assert_eq!(g.value(y), &x);
    let y2 = g.conv2d(xv, wv, None, temporal_geom(2)).unwrap();
    assert_eq!(g.value(y2).shape(), &[1, c, 50, 3]);
    let x25 = g.input(Tensor::zeros(&[1, c, 25, 3]));
    let y3 = g.conv2d(x25, wv, None, temporal_geom(2)).unwrap();
    assert_eq!(g.value(y3).shape()[2], 13);
}

#[test]
fn temporal_conv_gradients() {
    let inputs = [rand_tensor(&[1, 2, 12, 3], 22), rand_tensor(&[3, 2, 9, 1], 23)];
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, temporal_geom(2))?;
            project(g, y, 24)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

#[test]
fn batch_norm_examples() {
    // Zero-mean, unit-variance input passes through up to the ε shift.
    let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let one = g.input(Tensor::full(&[1], 1.0));
    let zero = g.input(Tensor::zeros(&[1]));
    let y = g.batch_norm_train(xv, one, zero, None).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    let five = g.input(Tensor::full(&[1], 5.0));
    let y = g.batch_norm_train(xv, zero, five, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    // Zero-variance channel stays finite.
    let flat = g.input(Tensor::full(&[2, 1, 2, 2], 3.0));
    let y = g.batch_norm_train(flat, one, zero, None).unwrap();
    assert!(g.value(y).all_finite());

    let run_eval = || {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let one = g.input(Tensor::full(&[1], 1.5));
        let zero = g.input(Tensor::full(&[1], 0.1));
        let y = g.batch_norm_eval(xv, one, zero, &[0.2], &[2.0]).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run_eval(), run_eval());
}

#[test]
fn batch_norm_gradients() {
    let inputs = [
        rand_tensor(&[2, 3, 2, 3], 25),
        rand_tensor(&[3], 26),
        rand_tensor(&[3], 27),
    ];
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.batch_norm_train(v[0], v[1], v[2], None)?;
            project(g, y, 28)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, 1e-5);
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0])?;
            project(g, y, 29)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

#[test]
fn film_examples() {
    let x = rand_tensor(&[1, 2, 3, 4], 30);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let ones = g.input(Tensor::full(&[1, 2, 1, 4], 1.0));
    let zeros = g.input(Tensor::zeros(&[1, 2, 1, 4]));
    let y = g.film(xv, ones, zeros).unwrap();
    assert_eq!(g.value(y), &x);
    let b = rand_tensor(&[1, 2, 1, 4], 31);
    let bv = g.input(b.clone());
    let y = g.film(xv, zeros, bv).unwrap();
    let d = g.value(y).data();
    for c in 0..2 {
        for f in 0..3 {
            for t in 0..4 {
                assert_eq!(d[(c * 3 + f) * 4 + t], b.data()[c * 4 + t]);
            }
        }
    }
    let bad = g.input(Tensor::zeros(&[1, 2, 1, 3]));
    assert!(g.film(xv, bad, bad).is_err());
}

#[test]
fn film_gradients() {
    let inputs = [
        rand_tensor(&[2, 3, 4, 5], 32),
        rand_tensor(&[2, 3, 1, 5], 33),
        rand_tensor(&[2, 3, 1, 5], 34),
    ];
    let errs = check(
        &inputs,
        |g, v| {
            let y = g.film(v[0], v[1], v[2])?;
            project(g, y, 35)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

#[test]
fn elementwise_and_structural_gradients() {
    let inputs = [rand_tensor(&[2, 2, 3, 5], 36), rand_tensor(&[2, 1, 3, 5], 37)];
    let errs = check(
        &inputs,
        |g, v| {
            let a = g.leaky_relu(v[0], 0.2);
            let b = g.tanh(v[1]);
            let c = g.concat(a, b)?;
            let r = g.relu(c);
            let s = g.add(r, c)?;
            let m = g.mean_last(s);
            let m = g.reshape(m, &[2, 3, 1, 3])?;
            let p = g.adaptive_avg_pool_last(m, 5)?;
            let q = g.adaptive_avg_pool_last(s, 2)?;
            let pq = g.weighted_sum(q, rand_tensor(&[2, 3, 3, 2], 38))?;
            let pp = g.weighted_sum(p, rand_tensor(&[2, 3, 1, 5], 39))?;
            g.add(pp, pq)
        },
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);
}

#[test]
fn mask_loss_value_and_gradient() {
    let pred = rand_tensor(&[2, 2, 3, 4], 40);
    let target = rand_tensor(&[2, 2, 3, 4], 41);
    let mut weights = rand_tensor(&[2, 1, 3, 4], 42);
    for w in weights.data_mut() {
        *w = w.abs() * 10.0;
    }
    let errs = check(
        std::slice::from_ref(&pred),
        |g, v| g.mask_loss(v[0], target.clone(), weights.clone()),
        H,
        usize::MAX,
    )
    .unwrap();
    assert_all_below(&errs, TOL);

    let mut g = Graph::new();
    let p = g.input(target.clone());
    let l = g.mask_loss(p, target.clone(), weights.clone()).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&[2, 2, 8, 8], 43));
        let w = g.leaf(rand_tensor(&[4, 2, 3, 3], 44));
        let y = g.conv2d(x, w, None, ConvGeom::new((3, 3), (1, 1), (1, 1))).unwrap();
        let y = g.tanh(y);
        let l = project(&mut g, y, 45).unwrap();
        let grads = g.backward(l).unwrap();
        (grads.get(x).unwrap().clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}
