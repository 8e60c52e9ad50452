//! Network-level properties on the toy preset: parameter count, gradient
//! coverage, determinism, video prediction, and a first training epoch.

use genconvit_core::config::ModelConfig;
use genconvit_core::datapipe::Normalization;
use genconvit_core::genconvit::{
    frame_probs, init_network_a, init_network_b, init_params, loss_a, loss_b, network_a_forward,
    network_b_forward, predict_video, recon_target,
};
use genconvit_core::nn::{Ctx, ParamStore};
use genconvit_core::train::{optimizer, step_a, step_b};
use genconvit_tensor::{AdamConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn linear(din: usize, dout: usize) -> usize {
    dout * din + dout
}

fn convnext_block(d: usize) -> usize {
    conv(1, d, 7) + 2 * d + linear(d, 4 * d) + linear(4 * d, d)
}

fn swin_block(d: usize, heads: usize, window: usize) -> usize {
    2 * d + linear(d, 3 * d) + (2 * window - 1).pow(2) * heads + linear(d, d) + 2 * d + linear(d, 4 * d) + linear(4 * d, d)
}

/// Toy tower: stem 4x4/4 to 16 channels, stages [16, 32, 64, 128] of depth
/// [1, 1, 2, 1], 1x1 embedding to 64, two blocks on the 2x2 grid (window
/// clamped to 2, two heads), head to 1000.
fn toy_branch() -> usize {
    let w = [16, 32, 64, 128];
    let depth = [1, 1, 2, 1];
    let mut n = conv(3, 16, 4) + 2 * 16;
    for s in 0..4 {
        if s > 0 {
            n += 2 * w[s - 1] + conv(w[s - 1], w[s], 2);
        }
        n += depth[s] * convnext_block(w[s]);
    }
    n + conv(128, 64, 1) + 2 * swin_block(64, 2, 2) + 2 * 64 + linear(64, 1000)
}

fn toy_network_a() -> usize {
    let widths = [3, 8, 16, 32, 32, 64];
    let enc: usize = widths.windows(2).map(|p| conv(p[0], p[1], 3)).sum();
    // Transposed 2x2 kernels mirror the encoder back to three channels.
    let dec: usize = widths.windows(2).map(|p| p[1] * p[0] * 4 + p[0]).sum();
    enc + dec + 2 * toy_branch() + linear(2000, 2)
}

fn toy_network_b() -> usize {
    let enc_w = [3, 8, 16, 32, 64];
    let enc: usize = enc_w.windows(2).map(|p| conv(p[0], p[1], 3) + 2 * p[1]).sum();
    // 64 x 4 x 4 encoder map; 64 x 2 x 2 decoder start (32 / 2^4 = 2).
    let (flat, latent) = (64 * 4 * 4, 64 * 2 * 2);
    let heads = 2 * linear(flat, latent) + linear(latent, latent);
    let dec_w = [64, 32, 16, 8, 3];
    let dec: usize = dec_w.windows(2).map(|p| p[0] * p[1] * 4 + p[1]).sum();
    enc + heads + dec + 2 * toy_branch() + linear(2000, 2)
}

#[test]
fn toy_parameter_count_matches_closed_form() {
    let cfg = ModelConfig::toy();
    let p = init_params::<f32>(&cfg, 0).unwrap();
    assert_eq!(p.a.numel(), toy_network_a());
    assert_eq!(p.b.numel(), toy_network_b());
    assert_eq!(p.numel(), toy_network_a() + toy_network_b());
}

fn same_values(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.names() == b.names() && a.values().zip(b.values()).all(|(x, y)| x.data() == y.data())
}

#[test]
fn initialization_is_seeded_and_branches_are_independent() {
    let cfg = ModelConfig::toy();
    let (p1, p2, q) = (
        init_params::<f32>(&cfg, 5).unwrap(),
        init_params::<f32>(&cfg, 5).unwrap(),
        init_params::<f32>(&cfg, 6).unwrap(),
    );
    assert!(same_values(&p1.a, &p2.a) && same_values(&p1.b, &p2.b));
    assert!(!same_values(&p1.a, &q.a) && !same_values(&p1.b, &q.b));
    for store in [&p1.a, &p1.b] {
        let net = &store.names()[0][..1];
        let img = store.get(&format!("{net}.img.convnext.stem.conv.weight")).unwrap();
        let lat = store.get(&format!("{net}.lat.convnext.stem.conv.weight")).unwrap();
        assert_ne!(img.data(), lat.data());
    }
}

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

fn images(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
    noise(&[batch, 3, size, size], seed)
}

#[test]
fn every_parameter_receives_a_gradient() {
    let cfg = ModelConfig::toy();
    let x = images(2, 64, 1);

    let a = init_network_a::<f32>(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, &a);
    let xv = ctx.g.constant(x.clone());
    let out = network_a_forward(&mut ctx, xv, &cfg).unwrap();
    let loss = loss_a(ctx.g, out.logits, &[0, 1]).unwrap();
    let bound = ctx.finish();
    let mut grads = g.backward(loss).unwrap();
    let ga = bound.gradients(&mut grads);
    for (name, grad) in a.names().iter().zip(&ga) {
        let grad = grad.as_ref().unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(grad.data().iter().any(|v| *v != 0.0), "{name}: zero gradient");
    }

    let b = init_network_b::<f32>(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, &b);
    let xv = ctx.g.constant(x);
    let eps = noise(&[2, cfg.latent_dim()], 2);
    let out = network_b_forward(&mut ctx, xv, &cfg, Some(eps)).unwrap();
    let target = recon_target(ctx.g, xv, &cfg, &Normalization::default()).unwrap();
    let l = loss_b(ctx.g, &out, &[1, 0], target, &cfg).unwrap();
    let bound = ctx.finish();
    let mut grads = g.backward(l.total).unwrap();
    let gb = bound.gradients(&mut grads);
    for (name, grad) in b.names().iter().zip(&gb) {
        let grad = grad.as_ref().unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(grad.data().iter().any(|v| *v != 0.0), "{name}: zero gradient");
    }
}

#[test]
fn outputs_are_deterministic_and_input_dependent() {
    let cfg = ModelConfig::toy();
    let b = init_network_b::<f32>(&cfg, 3).unwrap();
    let run = |x: &Tensor<f32>, eps: Option<Tensor<f32>>| {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &b);
        let xv = ctx.g.constant(x.clone());
        let out = network_b_forward(&mut ctx, xv, &cfg, eps).unwrap();
        assert_eq!(g.shape(out.logits), [1, 2]);
        assert_eq!(g.shape(out.recon), [1, 3, 32, 32]);
        (g.value(out.logits).data().to_vec(), g.value(out.recon).data().to_vec())
    };
    let (x1, x2) = (images(1, 64, 10), images(1, 64, 11));
    let eps = noise(&[1, cfg.latent_dim()], 12);
    assert_eq!(run(&x1, Some(eps.clone())), run(&x1, Some(eps)));
    assert_ne!(run(&x1, None).0, run(&x2, None).0);

    let a = init_network_a::<f32>(&cfg, 3).unwrap();
    let logits = |x: &Tensor<f32>| {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &a);
        let xv = ctx.g.constant(x.clone());
        let out = network_a_forward(&mut ctx, xv, &cfg).unwrap();
        g.value(out.logits).data().to_vec()
    };
    assert_ne!(logits(&x1), logits(&x2));
}

fn frames(n: usize, seed: u64) -> Vec<Tensor<f32>> {
    (0..n)
        .map(|i| images(1, 64, seed + i as u64).reshape(&[3, 64, 64]).unwrap())
        .collect()
}

#[test]
fn video_prediction_is_order_and_batch_invariant() {
    let cfg = ModelConfig::toy();
    let params = init_params::<f32>(&cfg, 9).unwrap();
    let video = frames(15, 100);
    let reference = predict_video(&params, &cfg, &video, 15).unwrap();
    assert_eq!(reference.frames_used, 15);
    assert!((0.0..=1.0).contains(&reference.video_score));

    let all: Vec<f64> = reference.per_frame_a.iter().chain(&reference.per_frame_b).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((reference.video_score - mean).abs() <= 4.0 * f64::EPSILON);

    for chunk in [1, 4, 7] {
        let r = predict_video(&params, &cfg, &video, chunk).unwrap();
        assert_eq!(r, reference, "chunk {chunk}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3 {
        let mut order: Vec<usize> = (0..15).collect();
        for i in (1..15).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled: Vec<Tensor<f32>> = order.iter().map(|&i| video[i].clone()).collect();
        let r = predict_video(&params, &cfg, &shuffled, 4).unwrap();
        assert_eq!(r.video_score.to_bits(), reference.video_score.to_bits());
        assert_eq!(r.verdict, reference.verdict);
        let expected: Vec<f64> = order.iter().map(|&i| reference.per_frame_a[i]).collect();
        assert_eq!(r.per_frame_a, expected);
    }

    let short = predict_video(&params, &cfg, &video[..7], 15).unwrap();
    assert_eq!(short.frames_used, 7);
    let again = predict_video(&params, &cfg, &video[..7], 15).unwrap();
    assert_eq!(short, again);

    let batch = Tensor::stack(&video[..2]).unwrap();
    let (pa, pb) = frame_probs(&params, &cfg, &batch).unwrap();
    assert_eq!(pa, reference.per_frame_a[..2]);
    assert_eq!(pb, reference.per_frame_b[..2]);
}

/// 64 images whose class is the sign of a global brightness offset.
fn separable_set(seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(64 * 3 * 64 * 64);
    for &l in &labels {
        let offset = if l == 1 { 0.4 } else { -0.4 };
        data.extend((0..3 * 64 * 64).map(|_| offset + rng.gen_range(-0.3f32..0.3)));
    }
    (Tensor::from_vec(&[64, 3, 64, 64], data).unwrap(), labels)
}

fn slice(x: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let per = x.numel() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::from_vec(&shape, x.data()[start * per..(start + len) * per].to_vec()).unwrap()
}

/// Mean training-mode loss over the whole set without updating anything.
fn full_loss_a(store: &ParamStore<f32>, cfg: &ModelConfig, x: &Tensor<f32>, y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, store);
    let xv = ctx.g.constant(x.clone());
    let out = network_a_forward(&mut ctx, xv, cfg).unwrap();
    let l = loss_a(ctx.g, out.logits, y).unwrap();
    g.value(l).item() as f64
}

fn full_loss_b(store: &ParamStore<f32>, cfg: &ModelConfig, x: &Tensor<f32>, y: &[usize]) -> f64 {
    let mut g = Graph::new();
    let mut ctx = Ctx::train(&mut g, store);
    let xv = ctx.g.constant(x.clone());
    let out = network_b_forward(&mut ctx, xv, cfg, None).unwrap();
    let target = recon_target(ctx.g, xv, cfg, &Normalization::default()).unwrap();
    let l = loss_b(ctx.g, &out, y, target, cfg).unwrap();
    g.value(l.total).item() as f64
}

#[test]
fn one_epoch_reduces_loss_on_a_separable_set() {
    let cfg = ModelConfig::toy();
    let adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    let mut wins = (0, 0);
    for seed in 0..5 {
        let (x, y) = separable_set(seed);
        let mut p = init_params::<f32>(&cfg, seed).unwrap();

        let before = full_loss_a(&p.a, &cfg, &x, &y);
        let mut opt = optimizer(&p.a, adam);
        for start in (0..64).step_by(32) {
            step_a(&mut p.a, &mut opt, &cfg, slice(&x, start, 32), &y[start..start + 32]).unwrap();
        }
        let after = full_loss_a(&p.a, &cfg, &x, &y);
        println!("seed {seed}: network A loss {before:.4} -> {after:.4}");
        wins.0 += usize::from(after < before);

        let before = full_loss_b(&p.b, &cfg, &x, &y);
        let mut opt = optimizer(&p.b, adam);
        for start in (0..64).step_by(16) {
            let norm = Normalization::default();
            step_b(&mut p.b, &mut opt, &cfg, &norm, slice(&x, start, 16), &y[start..start + 16], None).unwrap();
        }
        let after = full_loss_b(&p.b, &cfg, &x, &y);
        println!("seed {seed}: network B loss {before:.4} -> {after:.4}");
        wins.1 += usize::from(after < before);
    }
    assert!(wins.0 >= 3, "network A improved on {} of 5 seeds", wins.0);
    assert!(wins.1 >= 3, "network B improved on {} of 5 seeds", wins.1);
}
