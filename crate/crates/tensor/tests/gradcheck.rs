//! Central finite-difference oracles for every differentiable op.
//!
//! Each check rebuilds the graph as a pure function of a flat parameter
//! vector, differences it numerically, and compares against one analytic
//! backward pass.

use proad_tensor::{Tensor, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of a scalar function at `x0`.
fn numeric_grad(f: impl Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Fixed random projection so the scalar loss sees every output entry.
fn weighted_sum(t: &Tensor64, weights: &[f64]) -> Tensor64 {
    let w = Tensor::from_vec(t.shape(), weights.to_vec(), false).unwrap();
    t.mul(&w).unwrap().sum_all()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let (m, k, n) = (3, 4, 5);
    let a0 = random_vec(m * k, 1);
    let b0 = random_vec(k * n, 2);
    let w = random_vec(m * n, 3);

    let loss_of = |a_data: &[f64], b_data: &[f64]| {
        let a = Tensor::from_vec(&[m, k], a_data.to_vec(), false).unwrap();
        let b = Tensor::from_vec(&[k, n], b_data.to_vec(), false).unwrap();
        weighted_sum(&a.matmul(&b).unwrap(), &w).item()
    };

    let a = Tensor::from_vec(&[m, k], a0.clone(), true).unwrap();
    let b = Tensor::from_vec(&[k, n], b0.clone(), true).unwrap();
    weighted_sum(&a.matmul(&b).unwrap(), &w).backward().unwrap();

    let na = numeric_grad(|x| loss_of(x, &b0), &a0, 1e-6);
    let nb = numeric_grad(|x| loss_of(&a0, x), &b0, 1e-6);
    assert!(max_rel_err(&a.grad().unwrap(), &na) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &nb) < 1e-6);
}

#[test]
fn gelu_gradient_matches_finite_differences_at_probe_points() {
    let points = [-2.0, -0.5, 0.5, 2.0];
    for &p in &points {
        let x = Tensor::from_vec(&[1], vec![p], true).unwrap();
        x.gelu().sum_all().backward().unwrap();
        let analytic = x.grad().unwrap()[0];
        let numeric = numeric_grad(
            |v| {
                let x = Tensor::from_vec(&[1], v.to_vec(), false).unwrap();
                x.gelu().item()
            },
            &[p],
            1e-6,
        )[0];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        assert!(rel < 1e-5, "gelu'({p}): {analytic} vs {numeric}");
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let (rows, cols) = (3, 5);
    let x0 = random_vec(rows * cols, 10);
    let g0 = random_vec(cols, 11);
    let b0 = random_vec(cols, 12);
    let w = random_vec(rows * cols, 13);
    let eps = 1e-5;

    let loss_of = |x: &[f64], g: &[f64], b: &[f64]| {
        let xt = Tensor::from_vec(&[rows, cols], x.to_vec(), false).unwrap();
        let gt = Tensor::from_vec(&[cols], g.to_vec(), false).unwrap();
        let bt = Tensor::from_vec(&[cols], b.to_vec(), false).unwrap();
        weighted_sum(&xt.layer_norm(&gt, &bt, eps).unwrap(), &w).item()
    };

    let xt = Tensor::from_vec(&[rows, cols], x0.clone(), true).unwrap();
    let gt = Tensor::from_vec(&[cols], g0.clone(), true).unwrap();
    let bt = Tensor::from_vec(&[cols], b0.clone(), true).unwrap();
    weighted_sum(&xt.layer_norm(&gt, &bt, eps).unwrap(), &w)
        .backward()
        .unwrap();

    let nx = numeric_grad(|v| loss_of(v, &g0, &b0), &x0, 1e-6);
    let ng = numeric_grad(|v| loss_of(&x0, v, &b0), &g0, 1e-6);
    let nb = numeric_grad(|v| loss_of(&x0, &g0, v), &b0, 1e-6);
    assert!(max_rel_err(&xt.grad().unwrap(), &nx) < 1e-5);
    assert!(max_rel_err(&gt.grad().unwrap(), &ng) < 1e-5);
    assert!(max_rel_err(&bt.grad().unwrap(), &nb) < 1e-5);
}

#[test]
fn elementwise_chain_gradients_match_finite_differences() {
    // exp, sqrt(clamped), elu+1, relu, div, broadcast add stacked together
    let n = 6;
    let x0 = random_vec(n, 20);
    let bias0 = random_vec(1, 21);
    let w = random_vec(n, 22);

    let build = |x: &[f64], bias: &[f64], rg: bool| -> (Tensor64, Tensor64, Tensor64) {
        let xt = Tensor::from_vec(&[2, 3], x.to_vec(), rg).unwrap();
        let bt = Tensor::from_vec(&[1], bias.to_vec(), rg).unwrap();
        let y = xt
            .elu_plus_one()
            .add(&bt)
            .unwrap()
            .sqrt()
            .mul(&xt.relu())
            .unwrap()
            .add(&xt.mul_scalar(0.25).exp())
            .unwrap()
            .div(&xt.clamp_min(0.5))
            .unwrap();
        (weighted_sum(&y, &w), xt, bt)
    };

    let (loss, xt, bt) = build(&x0, &bias0, true);
    loss.backward().unwrap();
    let nx = numeric_grad(|v| build(v, &bias0, false).0.item(), &x0, 1e-6);
    let nb = numeric_grad(|v| build(&x0, v, false).0.item(), &bias0, 1e-6);
    assert!(max_rel_err(&xt.grad().unwrap(), &nx) < 1e-5);
    assert!(max_rel_err(&bt.grad().unwrap(), &nb) < 1e-5);
}

#[test]
fn broadcast_add_and_mul_gradients_match_finite_differences() {
    // [2,3] against [3] and [2,1]
    let a0 = random_vec(6, 30);
    let b0 = random_vec(3, 31);
    let c0 = random_vec(2, 32);
    let w = random_vec(6, 33);

    let build = |a: &[f64], b: &[f64], c: &[f64], rg: bool| {
        let at = Tensor::from_vec(&[2, 3], a.to_vec(), rg).unwrap();
        let bt = Tensor::from_vec(&[3], b.to_vec(), rg).unwrap();
        let ct = Tensor::from_vec(&[2, 1], c.to_vec(), rg).unwrap();
        let y = at.add(&bt).unwrap().mul(&ct).unwrap();
        (weighted_sum(&y, &w), at, bt, ct)
    };

    let (loss, at, bt, ct) = build(&a0, &b0, &c0, true);
    loss.backward().unwrap();
    let na = numeric_grad(|v| build(v, &b0, &c0, false).0.item(), &a0, 1e-6);
    let nb = numeric_grad(|v| build(&a0, v, &c0, false).0.item(), &b0, 1e-6);
    let nc = numeric_grad(|v| build(&a0, &b0, v, false).0.item(), &c0, 1e-6);
    assert!(max_rel_err(&at.grad().unwrap(), &na) < 1e-6);
    assert!(max_rel_err(&bt.grad().unwrap(), &nb) < 1e-6);
    assert!(max_rel_err(&ct.grad().unwrap(), &nc) < 1e-6);
}

#[test]
fn dropout_zeroed_fraction_concentrates_around_prob() {
    let n = 1_000_000;
    let x = Tensor::<f64>::ones(&[n], false);
    let mut r = rng(7);
    let y = x.dropout(0.3, true, &mut r).unwrap();
    let zeroed = y.data().iter().filter(|v| **v == 0.0).count();
    let frac = zeroed as f64 / n as f64;
    assert!((frac - 0.3).abs() < 0.005, "zeroed fraction {frac}");
    // survivors carry the inverted scale
    let scale = 1.0 / 0.7;
    assert!(y
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - scale).abs() < 1e-12));
}

#[test]
fn grad_hook_doubles_one_position() {
    let x0 = random_vec(4, 40);
    let run = |scale: Option<&[f64]>| -> Vec<f64> {
        let x = Tensor::from_vec(&[4], x0.clone(), true).unwrap();
        let h = match scale {
            Some(s) => x.attach_grad_hook(s).unwrap(),
            None => x.clone(),
        };
        h.mul(&h).unwrap().sum_all().backward().unwrap();
        x.grad().unwrap()
    };
    let plain = run(None);
    let hooked = run(Some(&[1.0, 2.0, 1.0, 1.0]));
    assert_eq!(hooked[0], plain[0]);
    assert_eq!(hooked[1], 2.0 * plain[1]);
    assert_eq!(hooked[2], plain[2]);
    assert_eq!(hooked[3], plain[3]);
}
