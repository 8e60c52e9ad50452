//! Reverse-mode gradients against central finite differences (h = 1e-5, f64).

use std::sync::Arc;

use genconvit_tensor::gradcheck::{check, random_projection, GradCheckOptions};
use genconvit_tensor::{Activation, Graph, NormMode, RunningStats, Tensor, Var, GATHER_ZERO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values at least `gap` away from zero, for ops with a kink at the origin.
fn off_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    rand_tensor(shape, seed).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn assert_grads<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> genconvit_tensor::Result<Var>,
{
    let report = check(inputs, GradCheckOptions::default(), f).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, groups, cin, cout) in [(1, 1, 1, 2, 3), (2, 0, 1, 2, 2), (1, 3, 2, 2, 4), (2, 1, 3, 3, 3), (1, 3, 3, 3, 3)] {
        let x = rand_tensor(&[2, cin, 5, 5], 1);
        let k = if pad == 3 { 7 } else { 3 };
        let w = rand_tensor(&[cout, cin / groups, k, k], 2);
        let b = rand_tensor(&[cout], 3);
        assert_grads("conv2d", &[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad, groups)?;
            random_projection(g, y, 9)
        });
    }
}

#[test]
fn conv_transpose2d_gradients() {
    for stride in [1, 2, 3] {
        let x = rand_tensor(&[2, 3, 3, 4], 4);
        let w = rand_tensor(&[3, 2, 2, 2], 5);
        let b = rand_tensor(&[2], 6);
        assert_grads("conv_transpose2d", &[x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), stride)?;
            random_projection(g, y, 10)
        });
    }
}

#[test]
fn maxpool_gradients_on_tie_free_input() {
    // Distinct values spaced far beyond the probe step.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 2, 6, 6], vals).unwrap();
    assert_grads("maxpool2d", &[x.clone()], |g, v| {
        let y = g.maxpool2d(v[0], 2, 2)?;
        random_projection(g, y, 11)
    });
    assert_grads("maxpool2d overlapping", &[x], |g, v| {
        let y = g.maxpool2d(v[0], 3, 1)?;
        random_projection(g, y, 12)
    });
}

#[test]
fn activation_gradients() {
    for kind in [Activation::Relu, Activation::leaky(), Activation::Gelu, Activation::Sigmoid] {
        let x = off_zero(&[4, 8], 13, 1e-3);
        assert_grads(&format!("{kind:?}"), &[x], |g, v| {
            let y = g.activation(v[0], kind);
            random_projection(g, y, 14)
        });
    }
}

#[test]
fn batchnorm_gradients() {
    let x = rand_tensor(&[3, 2, 3, 3], 15);
    let gamma = rand_tensor(&[2], 16);
    let beta = rand_tensor(&[2], 17);
    assert_grads("batchnorm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let mut stats = RunningStats::new(2);
        let y = g.batch_norm2d(v[0], v[1], v[2], &mut stats, NormMode::Train)?;
        random_projection(g, y, 18)
    });
    assert_grads("batchnorm eval", &[x, gamma, beta], |g, v| {
        let mut stats = RunningStats {
            mean: vec![0.3, -0.2],
            var: vec![0.5, 2.0],
        };
        let y = g.batch_norm2d(v[0], v[1], v[2], &mut stats, NormMode::Eval)?;
        random_projection(g, y, 19)
    });
}

#[test]
fn layernorm_gradients() {
    let x = rand_tensor(&[2, 3, 6], 20);
    let gamma = rand_tensor(&[6], 21);
    let beta = rand_tensor(&[6], 22);
    assert_grads("layernorm", &[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        random_projection(g, y, 23)
    });
}

#[test]
fn linear_and_matmul_gradients() {
    let x = rand_tensor(&[2, 3, 5], 24);
    let w = rand_tensor(&[4, 5], 25);
    let b = rand_tensor(&[4], 26);
    assert_grads("linear", &[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        random_projection(g, y, 27)
    });
    let a = rand_tensor(&[2, 3, 4], 28);
    let b = rand_tensor(&[2, 4, 5], 29);
    assert_grads("matmul", &[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        random_projection(g, y, 30)
    });
    let shared = rand_tensor(&[4, 2], 31);
    assert_grads("matmul shared rhs", &[a, shared], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        random_projection(g, y, 32)
    });
}

#[test]
fn softmax_cross_entropy_and_mse_gradients() {
    let x = rand_tensor(&[3, 5], 33).map(|v| v * 3.0);
    assert_grads("softmax", &[x], |g, v| {
        let y = g.softmax(v[0])?;
        random_projection(g, y, 34)
    });
    let logits = rand_tensor(&[4, 2], 35).map(|v| v * 2.0);
    assert_grads("cross_entropy", &[logits], |g, v| g.cross_entropy(v[0], &[0, 1, 1, 0]));
    let a = rand_tensor(&[2, 3, 2], 36);
    let b = rand_tensor(&[2, 3, 2], 37);
    assert_grads("mse", &[a, b], |g, v| g.mse(v[0], v[1]));
}

#[test]
fn resize_bilinear_gradients() {
    let x = rand_tensor(&[1, 2, 3, 4], 38);
    for (h, w) in [(7, 5), (2, 2), (6, 8)] {
        assert_grads("resize_bilinear", &[x.clone()], |g, v| {
            let y = g.resize_bilinear(v[0], h, w)?;
            random_projection(g, y, 39)
        });
    }
}

#[test]
fn elementwise_and_shape_gradients() {
    let a = rand_tensor(&[2, 3, 4], 40);
    let b = rand_tensor(&[3, 1], 41);
    assert_grads("broadcast add/sub/mul", &[a.clone(), b], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let e = g.exp(m);
        let a = g.affine(e, 0.5, 2.0);
        random_projection(g, a, 42)
    });
    assert_grads("permute/reshape/mean_axis", &[a.clone()], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[8, 3])?;
        let m = g.mean_axis(r, 0)?;
        random_projection(g, m, 43)
    });
    assert_grads("concat/narrow/gather", &[a], |g, v| {
        let n = g.narrow(v[0], 1, 1, 2)?;
        let c = g.concat(&[v[0], n], 1)?;
        let len = g.value(c).numel();
        let index: Vec<usize> = (0..len + 3)
            .map(|i| if i % 7 == 3 { GATHER_ZERO } else { (i * 5) % len })
            .collect();
        let gathered = g.gather(c, Arc::new(index), &[len + 3])?;
        let mean = g.mean(gathered);
        let sum = g.sum(c);
        let both = g.mul(mean, sum)?;
        Ok(both)
    });
}

#[test]
fn backward_basics() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(rand_tensor(&[5], 44)));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 5]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(Tensor::scalar(3.0)));
    let y = g.param(Arc::new(Tensor::scalar(-2.0)));
    let unused = g.param(Arc::new(Tensor::scalar(1.0)));
    let xy = g.mul(x, y).unwrap();
    let grads = g.backward(xy).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), -2.0);
    assert_eq!(grads.get(y).unwrap().item(), 3.0);
    assert!(grads.get(unused).is_none());

    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(rand_tensor(&[2], 45)));
    assert!(matches!(
        g.backward(x),
        Err(genconvit_tensor::TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn detached_values_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(rand_tensor(&[3], 46)));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    // Only the attached path contributes: d(x * stop(x))/dx = x.
    assert_eq!(grads.get(x).unwrap(), &rand_tensor(&[3], 46));
    assert!(grads.get(d).is_none());
}

fn conv_input_grad(upstream_scale: f64) -> Tensor<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.param(Arc::new(rand_tensor(&[1, 2, 5, 5], 47)));
    let w = g.constant(rand_tensor(&[3, 2, 3, 3], 48));
    let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
    let r = rand_tensor(&[1, 3, 5, 5], 49).map(|v| v * upstream_scale);
    let r = g.constant(r);
    let p = g.mul(y, r).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap().take(x).unwrap()
}

#[test]
fn conv_backward_is_linear_in_upstream_gradient() {
    let once = conv_input_grad(1.0);
    let twice = conv_input_grad(2.0);
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(rand_tensor(&[2, 3, 9, 9], 50).cast());
        let w = g.constant(rand_tensor(&[4, 3, 3, 3], 51).cast());
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        let y = g.gelu(y);
        let y = g.softmax(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
