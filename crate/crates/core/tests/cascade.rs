use std::sync::Arc;

use caduf::cascade::loss::record_loss;
use caduf::cascade::*;
use caduf::operator::{DownsampleOperator, ExactPinv, LearnedPinv, PseudoInverse};
use caduf::tensor::ops::{self, conv2d, leaky_relu, pixel_shuffle, CHARBONNIER_EPS, LEAKY_SLOPE};
use caduf::tensor::{Conv2dOpts, Graph, LinearMap, Padding, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact(s: usize, lr: usize) -> PseudoInverse {
    let op = DownsampleOperator::anchor(s).unwrap();
    PseudoInverse::Exact(Arc::new(ExactPinv::new(&op, lr * s, lr * s).unwrap()))
}

fn image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

/// Adds noise to every parameter so that no head sits at its identity init.
fn perturb(model: &mut Cascade, amount: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn tiny() -> CascadeConfig {
    CascadeConfig::sized(2, 8, [1, 2, 1])
}

#[test]
fn identity_at_initialization() {
    let cfg = tiny();
    let model = Cascade::init(cfg, 3, exact(2, 8)).unwrap();
    let y = image(&[2, 3, 8, 8], 1);
    let y_w = image(&[2, 3, 8, 8], 2);
    let out = model.forward_with(&y, &y_w).unwrap();
    assert_eq!(out.y_d, y_w);
    assert_eq!(out.x_hat, out.x_u);
    assert_eq!(out.x_u.shape(), &[2, 3, 16, 16]);
}

#[test]
fn paper_shape_contract() {
    let cfg = CascadeConfig::paper(4);
    let model = Cascade::init(cfg, 0, PseudoInverse::Learned(Arc::new(LearnedPinv::zeros(4)))).unwrap();
    let y = image(&[1, 3, 48, 48], 4);
    let out = model.forward_with(&y, &y).unwrap();
    assert_eq!(out.x_hat.shape(), &[1, 3, 192, 192]);
    assert_eq!(out.y_d.shape(), &[1, 3, 48, 48]);
    for h in [&out.h_e, out.h_d.as_ref().unwrap(), &out.h_u] {
        assert_eq!(h.shape(), &[1, 64, 48, 48]);
    }
}

#[test]
fn exact_projection_holds_for_any_weights() {
    let cfg = tiny();
    let mut model = Cascade::init(cfg, 5, exact(2, 8)).unwrap();
    perturb(&mut model, 0.3, 9);
    let y = image(&[2, 3, 8, 8], 6);
    let out = model.forward_with(&y, &image(&[2, 3, 8, 8], 7)).unwrap();
    let ax = model.operator().apply(&out.x_u).unwrap();
    let gap = ax.max_abs_diff(&out.y_d);
    assert!(gap < 1e-8, "{gap}");
    assert!(out.x_hat.max_abs_diff(&out.x_u) > 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let mut model = Cascade::init(tiny(), 5, exact(2, 8)).unwrap();
    perturb(&mut model, 0.1, 2);
    let y = image(&[1, 3, 8, 8], 8);
    let a = model.forward_with(&y, &y).unwrap();
    let b = model.forward_with(&y, &y).unwrap();
    assert_eq!(a.x_hat, b.x_hat);
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Closed-form parameter count of the full model.
fn analytic_count(cfg: &CascadeConfig) -> usize {
    let (f, c, w, s) = (cfg.extractor_fine, cfg.extractor_coarse, cfg.width, cfg.scale);
    let extractor = conv(3, f, 5)
        + conv(f, c, 3)
        + 3 * conv(c, c, 3)
        + conv(c, 4 * c, 3)
        + conv(c, 4 * f, 3)
        + 2 * conv(f, f, 3)
        + conv(2 * f, 27, 3)
        + conv(f, f, 3)
        + conv(2 * f, w, 1);
    let block = 2 * conv(w, w, 3);
    let head = |s: usize| conv(w, 16 * s * s, 3) + conv(16, 3, 3) + conv(w, 25 * s * s, 3);
    extractor
        + cfg.blocks_deblur * block
        + head(1)
        + conv(2 * w, w, 1)
        + cfg.blocks_upsample * block
        + head(s)
        + conv(3 * w, w, 1)
        + cfg.blocks_refine * block
        + head(s)
}

#[test]
fn parameter_count_matches_formula() {
    for cfg in [CascadeConfig::paper(4), CascadeConfig::paper(2), CascadeConfig::desk(2), tiny()] {
        assert_eq!(parameter_count(&cfg).unwrap(), analytic_count(&cfg));
        let p = CascadeParams::init(&cfg, 0).unwrap();
        assert_eq!(p.count(), analytic_count(&cfg));
    }
}

#[test]
fn parameter_count_grows_with_every_block_count() {
    let base = tiny();
    let n0 = parameter_count(&base).unwrap();
    for i in 0..3 {
        let mut cfg = base;
        match i {
            0 => cfg.blocks_deblur += 1,
            1 => cfg.blocks_upsample += 1,
            _ => cfg.blocks_refine += 1,
        }
        assert!(parameter_count(&cfg).unwrap() > n0);
    }
}

#[test]
fn config_validation() {
    assert!(CascadeConfig::sized(2, 4, [1, 1, 1]).validate().is_err());
    assert!(CascadeConfig::sized(2, 8, [0, 1, 1]).validate().is_err());
    let model = Cascade::init(tiny(), 0, exact(2, 8)).unwrap();
    let y = image(&[1, 3, 6, 8], 0);
    assert!(model.forward_with(&y, &y).is_err());
}

#[test]
fn loss_weights() {
    let w = LossWeights::new(0.6, 0.3).unwrap();
    assert!((w.refine() - 0.1).abs() < 1e-15);
    assert!(LossWeights::new(0.5, 0.5).is_err());
    assert!(LossWeights::new(0.0, 0.3).is_err());

    let model = Cascade::init(tiny(), 1, exact(2, 8)).unwrap();
    let y = image(&[1, 3, 8, 8], 3);
    let x = image(&[1, 3, 16, 16], 4);
    let out = model.forward_with(&y, &y).unwrap();
    let third = 1.0 / 3.0;
    let t = caduf_loss(&out, &y, &x, LossWeights::new(third, third).unwrap(), &Ablation::FULL).unwrap();
    let mean = (t.deblur + t.upsample + t.refine) / 3.0;
    assert!((t.total - mean).abs() < 1e-9 * mean);
}

#[test]
fn charbonnier_closed_forms() {
    let u = image(&[1, 3, 4, 5], 0);
    assert_eq!(ops::charbonnier(&u, &u, CHARBONNIER_EPS).unwrap(), 60.0 * CHARBONNIER_EPS);
    let v = u.map(|x| x + 1.0);
    let per = ops::charbonnier(&u, &v, CHARBONNIER_EPS).unwrap() / 60.0;
    assert!((per - (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn charbonnier_gradient_is_bounded(seed in 0u64..1000, spread in 1e-6f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-spread..spread));
        let v = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-spread..spread));
        let mut g = Graph::new();
        let (uv, vv) = (g.param(u), g.input(v));
        let l = g.charbonnier(uv, vv, CHARBONNIER_EPS).unwrap();
        g.backward(l).unwrap();
        prop_assert!(g.grad(uv).unwrap().max_abs() <= 1.0);
    }
}

#[test]
fn ablation_family_is_complete_and_runs() {
    let family = Ablation::family();
    assert_eq!(family.len(), 8);
    let y = image(&[1, 3, 8, 8], 1);
    let x = image(&[1, 3, 16, 16], 2);
    for (name, ab) in family {
        assert_eq!(ab.variant_name(), Some(name));
        let cfg = CascadeConfig { ablation: ab, ..tiny() };
        let model = Cascade::init(cfg, 0, exact(2, 8)).unwrap();
        let out = model.forward_with(&y, &y).unwrap();
        assert_eq!(out.x_hat.shape(), x.shape(), "{name}");
        let t = caduf_loss(&out, &y, &x, LossWeights::new(0.6, 0.3).unwrap(), &ab).unwrap();
        assert!(t.total.is_finite());
        if !ab.use_deblur {
            assert!(out.h_d.is_none());
        }
    }
    assert_eq!(Ablation::FULL.to_string(), "CADUF");
}

/// Loss of `model` with its parameters replaced by `params`.
fn loss_at(model: &Cascade, params: &[Tensor], y: &Tensor, y_w: &Tensor, x: &Tensor, w: LossWeights) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.input(t.clone())).collect();
    let (yv, wv, xv) = (g.input(y.clone()), g.input(y_w.clone()), g.input(x.clone()));
    let out = model.record(&mut g, &vars, yv, wv).unwrap();
    let target = g.input(y_w.map(|v| 0.9 * v));
    record_loss(&mut g, &out, target, xv, w, &model.config().ablation)
        .unwrap()
        .values(&g)
        .total
}

#[test]
fn full_model_gradient_check() {
    let cfg = tiny();
    let mut model = Cascade::init(cfg, 11, exact(2, 8)).unwrap();
    perturb(&mut model, 0.05, 12);
    let y = image(&[1, 3, 8, 8], 13);
    let y_w = image(&[1, 3, 8, 8], 14);
    let x = image(&[1, 3, 16, 16], 15);
    let w = LossWeights::new(0.6, 0.3).unwrap();

    let mut g = Graph::new();
    let vars: Vec<Var> = model.params().tensors().iter().map(|t| g.param(t.clone())).collect();
    let (yv, wv, xv) = (g.input(y.clone()), g.input(y_w.clone()), g.input(x.clone()));
    let out = model.record(&mut g, &vars, yv, wv).unwrap();
    let target = g.input(y_w.map(|v| 0.9 * v));
    let loss = record_loss(&mut g, &out, target, xv, w, &cfg.ablation).unwrap();
    g.backward(loss.total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let base: Vec<Tensor> = model.params().tensors().to_vec();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (pi, name) in model.params().names().iter().enumerate() {
        let grad = g.grad(vars[pi]).unwrap();
        for _ in 0..2 {
            let i = rng.random_range(0..base[pi].len());
            let mut p = base.clone();
            p[pi].data_mut()[i] += h;
            let up = loss_at(&model, &p, &y, &y_w, &x, w);
            p[pi].data_mut()[i] -= 2.0 * h;
            let down = loss_at(&model, &p, &y, &y_w, &x, w);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let scale = numeric.abs().max(analytic.abs());
            if scale > 1e-5 {
                let rel = (numeric - analytic).abs() / scale;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
            } else {
                assert!((numeric - analytic).abs() < 1e-8, "{name}[{i}]: {analytic} vs {numeric}");
            }
        }
    }
    println!("worst relative gradient error {worst:e}");
}

fn replicate() -> Conv2dOpts {
    Conv2dOpts {
        padding: Padding::Replicate,
        ..Default::default()
    }
}

/// The extractor with frozen alignment, written with plain convolutions.
fn plain_extractor(p: &CascadeParams, y: &Tensor, anchor: &Tensor) -> Tensor {
    let c = |x: &Tensor, name: &str, opts: Conv2dOpts| {
        let w = p.get(&format!("{name}.w")).unwrap();
        let b = p.get(&format!("{name}.b")).unwrap();
        conv2d(x, w, Some(b), opts).unwrap()
    };
    let lc = |x: &Tensor, name: &str, opts: Conv2dOpts| leaky_relu(&c(x, name, opts), LEAKY_SLOPE);
    let add = |a: &Tensor, b: &Tensor| a.zip_map(b, |u, v| u + v).unwrap();
    let branch = |x: &Tensor| {
        let d = Conv2dOpts::default();
        let f1 = lc(x, "extract.in", d);
        let f2 = lc(&lc(&f1, "extract.down2", Conv2dOpts::strided(2)), "extract.mid2", d);
        let f4 = lc(&lc(&f2, "extract.down4", Conv2dOpts::strided(2)), "extract.mid4", d);
        let f2 = add(&f2, &pixel_shuffle(&lc(&f4, "extract.up4", d), 2).unwrap());
        let f1 = add(&f1, &pixel_shuffle(&lc(&f2, "extract.up2", d), 2).unwrap());
        lc(&lc(&f1, "extract.fine1", d), "extract.fine2", d)
    };
    let (hy, ha) = (branch(y), branch(anchor));
    let aligned = lc(&hy, "extract.align", replicate());
    let cat = ops::concat_channels(&[&aligned, &ha]).unwrap();
    lc(&cat, "extract.fuse", Conv2dOpts::default())
}

#[test]
fn frozen_extractor_is_a_plain_convolution_network() {
    let cfg = CascadeConfig {
        freeze_alignment: true,
        ..tiny()
    };
    let mut model = Cascade::init(cfg, 21, exact(2, 8)).unwrap();
    perturb(&mut model, 0.1, 22);
    let y = image(&[1, 3, 8, 8], 23);
    let y_w = image(&[1, 3, 8, 8], 24);
    let out = model.forward_with(&y, &y_w).unwrap();
    let plain = plain_extractor(model.params(), &y, &y_w);
    assert!(out.h_e.max_abs_diff(&plain) < 1e-10);
}

/// Side of the square around the impulse where the extractor output reacts.
fn impulse_support(cfg: CascadeConfig, side: usize) -> (usize, usize) {
    let model = Cascade::init(cfg, 31, PseudoInverse::Learned(Arc::new(LearnedPinv::zeros(cfg.scale)))).unwrap();
    let mut g = Graph::new();
    let vars: Vec<Var> = model.params().tensors().iter().map(|t| g.input(t.clone())).collect();
    let y = g.param(Tensor::full(&[1, 3, side, side], 0.5));
    let out = model.record(&mut g, &vars, y, y).unwrap();
    // gradient of one output site with respect to the input marks its receptive field
    let mid = side / 2;
    let probe = g.narrow_channels(out.h_e, 0, 1).unwrap();
    let mut mask = Tensor::zeros(&[1, 1, side, side]);
    mask.data_mut()[mid * side + mid] = 1.0;
    let mask = g.input(mask);
    let picked = g.mul(probe, mask).unwrap();
    let total = g.sum(picked).unwrap();
    g.backward(total).unwrap();
    let grad = g.grad(y).unwrap();
    let (mut rows, mut cols) = (Vec::new(), Vec::new());
    for c in 0..3 {
        for i in 0..side {
            for j in 0..side {
                if grad.data()[(c * side + i) * side + j] != 0.0 {
                    rows.push(i);
                    cols.push(j);
                }
            }
        }
    }
    let extent = |v: &[usize]| v.iter().max().unwrap() - v.iter().min().unwrap() + 1;
    (extent(&rows), extent(&cols))
}

#[test]
fn extractor_receptive_field() {
    let cfg = CascadeConfig {
        freeze_alignment: true,
        ..CascadeConfig::desk(2)
    };
    let (h, w) = impulse_support(cfg, 96);
    println!("extractor receptive field {h}x{w}");
    assert!(h >= 37 && w >= 37, "{h}x{w}");
}
