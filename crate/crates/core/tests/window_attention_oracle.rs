//! Shifted-window attention against a per-token brute force that never
//! builds windows or masks: a token attends to exactly those tokens that
//! share its window after the cyclic shift and whose offset from it was not
//! changed by the wrap-around.

use genconvit_core::backbone::{init_attention, window_attention, window_partition, window_reverse, WindowPlan};
use genconvit_core::nn::{Ctx, Initializer, ParamStore};
use genconvit_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
        .collect()
}

struct Case {
    grid: usize,
    window: usize,
    shift: usize,
    dim: usize,
    heads: usize,
}

fn brute_force(case: &Case, store: &ParamStore<f64>, x: &[f64], batch: usize) -> Vec<f64> {
    let Case {
        grid,
        window,
        shift,
        dim,
        heads,
    } = *case;
    let hd = dim / heads;
    let padded = grid.div_ceil(window) * window;
    let span = 2 * window - 1;
    let p = |n: &str| store.get(n).unwrap().data().to_vec();
    let (wqkv, bqkv, table, wp, bp) = (
        p("attn.qkv.weight"),
        p("attn.qkv.bias"),
        p("attn.rel_bias"),
        p("attn.proj.weight"),
        p("attn.proj.bias"),
    );
    // Position of original coordinate `o` in the shifted frame.
    let shifted = |o: usize| (o + padded - shift) % padded;
    let tokens = grid * grid;
    let mut out = Vec::with_capacity(batch * tokens * dim);
    for b in 0..batch {
        let qkv: Vec<Vec<f64>> = (0..tokens)
            .map(|t| linear(&x[(b * tokens + t) * dim..][..dim], &wqkv, &bqkv))
            .collect();
        for i in 0..tokens {
            let (oy, ox) = ((i / grid) as isize, (i % grid) as isize);
            let (py, px) = (shifted(oy as usize), shifted(ox as usize));
            let peers: Vec<usize> = (0..tokens)
                .filter(|&j| {
                    let (jy, jx) = ((j / grid) as isize, (j % grid) as isize);
                    let (qy, qx) = (shifted(jy as usize), shifted(jx as usize));
                    qy / window == py / window
                        && qx / window == px / window
                        && oy - jy == py as isize - qy as isize
                        && ox - jx == px as isize - qx as isize
                })
                .collect();
            let mut mixed = vec![0.0; dim];
            for h in 0..heads {
                let q = &qkv[i][h * hd..][..hd];
                let logits: Vec<f64> = peers
                    .iter()
                    .map(|&j| {
                        let k = &qkv[j][dim + h * hd..][..hd];
                        let (qy, qx) = (shifted(j / grid), shifted(j % grid));
                        let dy = py % window + window - 1 - qy % window;
                        let dx = px % window + window - 1 - qx % window;
                        let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                        dot / (hd as f64).sqrt() + table[(dy * span + dx) * heads + h]
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&j, w) in peers.iter().zip(&e) {
                    let v = &qkv[j][2 * dim + h * hd..][..hd];
                    for d in 0..hd {
                        mixed[h * hd + d] += w / z * v[d];
                    }
                }
            }
            out.extend(linear(&mixed, &wp, &bp));
        }
    }
    out
}

#[test]
fn matches_brute_force() {
    let cases = [
        Case { grid: 2, window: 2, shift: 0, dim: 3, heads: 1 },
        Case { grid: 4, window: 2, shift: 1, dim: 4, heads: 2 },
        Case { grid: 6, window: 3, shift: 1, dim: 6, heads: 3 },
        Case { grid: 5, window: 3, shift: 0, dim: 4, heads: 2 },
        Case { grid: 5, window: 3, shift: 1, dim: 4, heads: 1 },
        Case { grid: 8, window: 4, shift: 2, dim: 8, heads: 2 },
        Case { grid: 7, window: 7, shift: 0, dim: 4, heads: 2 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in &cases {
        let mut store = ParamStore::<f64>::new();
        init_attention(&mut Initializer::new(&mut store, 1), "attn", case.dim, case.heads, case.window).unwrap();
        for v in store.values_mut() {
            *v = Tensor::from_vec(v.shape(), rand_vec(v.numel(), &mut rng)).unwrap();
        }
        let batch = 2;
        let x = rand_vec(batch * case.grid * case.grid * case.dim, &mut rng);
        let expected = brute_force(case, &store, &x, batch);

        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &store);
        let xv = ctx.g.constant(Tensor::from_vec(&[batch, case.grid * case.grid, case.dim], x).unwrap());
        let plan = WindowPlan::new(case.grid, case.grid, case.window, case.shift).unwrap();
        let w = window_partition(ctx.g, xv, &plan).unwrap();
        let a = window_attention(&mut ctx, w, "attn", case.heads, case.window, plan.mask()).unwrap();
        let y = window_reverse(ctx.g, a, &plan).unwrap();
        let got = g.value(y).data();
        let err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(
            err < 1e-12,
            "grid {} window {} shift {}: max abs error {err:e}",
            case.grid,
            case.window,
            case.shift
        );
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut store = ParamStore::<f64>::new();
    init_attention(&mut Initializer::new(&mut store, 3), "attn", 4, 2, 2).unwrap();
    let plan = WindowPlan::new(4, 4, 2, 1).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::eval(&mut g, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ctx.g.constant(Tensor::from_vec(&[1, 16, 4], rand_vec(64, &mut rng)).unwrap());
    let w = window_partition(ctx.g, x, &plan).unwrap();
    let (_, probs) =
        genconvit_core::backbone::window_attention_probs(&mut ctx, w, "attn", 2, 2, plan.mask()).unwrap();
    for row in g.value(probs).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_token_identity_attention_is_identity() {
    let dim = 3;
    let mut store = ParamStore::<f64>::new();
    init_attention(&mut Initializer::new(&mut store, 3), "attn", dim, 1, 1).unwrap();
    let eye = |n: usize| Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let qkv = Tensor::from_fn(&[3 * dim, dim], |i| if (i / dim) % dim == i % dim { 1.0 } else { 0.0 });
    store.replace("attn.qkv.weight", qkv).unwrap();
    store.replace("attn.qkv.bias", Tensor::zeros(&[3 * dim])).unwrap();
    store.replace("attn.proj.weight", eye(dim)).unwrap();
    store.replace("attn.proj.bias", Tensor::zeros(&[dim])).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::eval(&mut g, &store);
    let input = Tensor::from_vec(&[2, 1, dim], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
    let x = ctx.g.constant(input.clone());
    let y = window_attention(&mut ctx, x, "attn", 1, 1, None).unwrap();
    assert_eq!(g.value(y).data(), input.data());
}
