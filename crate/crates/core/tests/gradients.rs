//! Central-difference checks for every differentiable graph operation.

use caduf::tensor::{Conv2dOpts, Graph, Padding, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Norm-wise relative error between analytic and numeric gradients of a
/// scalar loss, per input tensor.
fn grad_errors(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let h = 1e-6;
    let mut errors = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(t.shape());
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric.data_mut()[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = analytic[i].zip_map(&numeric, |a, b| a - b).unwrap().sum_sq().sqrt();
        let scale = analytic[i].sum_sq().sqrt().max(numeric.sum_sq().sqrt()).max(1e-12);
        errors.push(diff / scale);
    }
    errors
}

/// `Σ out ⊙ weights` so that every output element carries a distinct weight.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.value(out).shape(), -1.0, 1.0);
    let wv = g.input(w);
    let p = g.mul(out, wv).unwrap();
    g.sum(p).unwrap()
}

fn assert_below(errors: &[f64], tol: f64, what: &str) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} relative error {e:e} >= {tol:e}");
    }
}

#[test]
fn conv2d_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
    let b = random(&mut rng, &[4], -0.1, 0.1);
    for opts in [
        Conv2dOpts::default(),
        Conv2dOpts::strided(2),
        Conv2dOpts::dilated(2),
        Conv2dOpts {
            padding: Padding::Replicate,
            ..Default::default()
        },
    ] {
        let errs = grad_errors(&[x.clone(), w.clone(), b.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), opts).unwrap();
            weighted_sum(g, y, 7)
        });
        assert_below(&errs, 1e-6, &format!("conv2d {opts:?}"));
    }
}

#[test]
fn sum_of_conv_output_has_exact_bias_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[2, 1, 3, 3], 1.0));
    let w = g.param(Tensor::full(&[2, 1, 3, 3], 0.1));
    let b = g.param(Tensor::zeros(&[2]));
    let y = g.conv2d(x, w, Some(b), Conv2dOpts::default()).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(b).unwrap().data(), &[18.0, 18.0]);
}

#[test]
fn deformable_conv_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let off = random(&mut rng, &[2, 18, 6, 6], -0.8, 0.8);
    let a = random(&mut rng, &[2, 9, 6, 6], 0.1, 0.9);
    let b = random(&mut rng, &[3], -0.1, 0.1);
    let errs = grad_errors(&[x, w, off, a, b], |g, v| {
        let y = g.deformable_conv2d(v[0], v[1], Some(v[4]), v[2], v[3]).unwrap();
        weighted_sum(g, y, 8)
    });
    assert_below(&errs, 1e-5, "deformable_conv2d");
}

#[test]
fn bilinear_sample_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 5, 6], -1.0, 1.0);
    let coords = Tensor::from_fn(&[2, 2, 4, 4], |i| {
        // strictly inside the rectangle and away from integers
        let base = (i % 3) as f64 + 0.5;
        base + rng.random_range(-0.4..0.4)
    });
    let errs = grad_errors(&[x, coords], |g, v| {
        let y = g.bilinear_sample(v[0], v[1]).unwrap();
        weighted_sum(g, y, 9)
    });
    assert_below(&errs, 1e-6, "bilinear_sample");
}

#[test]
fn dynamic_filter_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for scale in [1, 2] {
        let z = random(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
        let c = random(&mut rng, &[2, 25, 4 * scale, 5 * scale], -0.3, 0.3);
        let r = random(&mut rng, &[2, 3, 4 * scale, 5 * scale], -0.1, 0.1);
        let errs = grad_errors(&[z, c, r], |g, v| {
            let y = g.dynamic_local_filter(v[0], v[1], v[2], 2, scale).unwrap();
            weighted_sum(g, y, 10)
        });
        assert_below(&errs, 1e-5, &format!("dynamic_local_filter s={scale}"));
    }
}

#[test]
fn leaky_relu_gradient_at_half() {
    let x = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = g.leaky_relu(v, 0.2).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let analytic = g.grad(v).unwrap().clone();
    let h = 1e-6;
    for (j, want) in analytic.data().iter().enumerate() {
        let f = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[j] += d;
            caduf::tensor::ops::leaky_relu(&t, 0.2).sum()
        };
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        assert!((numeric - want).abs() < 1e-8);
    }
    assert_eq!(analytic.data(), &[1.0, 0.2]);
}

#[test]
fn leaky_relu_and_sigmoid_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // keep inputs away from the kink
    let x = Tensor::from_fn(&[1, 2, 3, 3], |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let errs = grad_errors(&[x], |g, v| {
        let a = g.leaky_relu(v[0], 0.2).unwrap();
        let b = g.sigmoid(a).unwrap();
        weighted_sum(g, b, 11)
    });
    assert_below(&errs, 1e-6, "leaky_relu/sigmoid");
}

#[test]
fn pixel_shuffle_composite_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let w = random(&mut rng, &[12, 2, 3, 3], -0.5, 0.5);
    let errs = grad_errors(&[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, Conv2dOpts::default()).unwrap();
        let up = g.pixel_shuffle(y, 2).unwrap();
        let down = g.pixel_unshuffle(up, 2).unwrap();
        let up2 = g.pixel_shuffle(down, 2).unwrap();
        weighted_sum(g, up2, 12)
    });
    assert_below(&errs, 1e-6, "pixel_shuffle");
}

#[test]
fn charbonnier_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = random(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    let v = random(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    let errs = grad_errors(&[u, v], |g, vars| g.charbonnier(vars[0], vars[1], 1e-3).unwrap());
    assert_below(&errs, 1e-5, "charbonnier");
}

#[test]
fn structural_ops_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let errs = grad_errors(&[a, b], |g, v| {
        let cat = g.concat_channels(&[v[0], v[1]]).unwrap();
        let mid = g.narrow_channels(cat, 1, 3).unwrap();
        let sq = g.mul(mid, mid).unwrap();
        let sc = g.scale(sq, 0.7).unwrap();
        let d = g.sub(sc, mid).unwrap();
        weighted_sum(g, d, 13)
    });
    assert_below(&errs, 1e-6, "concat/narrow/mul/sub");
}

#[test]
fn dense_layer_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random(&mut rng, &[4, 5], -1.0, 1.0);
    let b = random(&mut rng, &[5], -1.0, 1.0);
    let errs = grad_errors(&[x, w, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let z = g.add_bias(y, v[2]).unwrap();
        weighted_sum(g, z, 14)
    });
    assert_below(&errs, 1e-6, "matmul/add_bias");
}
