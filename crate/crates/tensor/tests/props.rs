//! Property tests for the engine-wide invariants: backward linearity,
//! hook composition, and seeded determinism.

use proad_tensor::{Tensor, Tensor64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grad_of(data: &[f64], f: impl Fn(&Tensor64) -> Tensor64) -> Vec<f64> {
    let x = Tensor::from_vec(&[data.len()], data.to_vec(), true).unwrap();
    f(&x).backward().unwrap();
    x.grad().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(
        data in prop::collection::vec(-2.0f64..2.0, 2..8),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        // f = sum(x²), g = sum(gelu(x))
        let gf = grad_of(&data, |x| x.mul(x).unwrap().sum_all());
        let gg = grad_of(&data, |x| x.gelu().sum_all());
        let combined = grad_of(&data, |x| {
            x.mul(x).unwrap().sum_all().mul_scalar(a)
                .add(&x.gelu().sum_all().mul_scalar(b)).unwrap()
        });
        for i in 0..data.len() {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn stacked_hooks_compose_multiplicatively(
        data in prop::collection::vec(-2.0f64..2.0, 3..6),
        s1 in prop::collection::vec(0.0f64..3.0, 6),
        s2 in prop::collection::vec(0.0f64..3.0, 6),
    ) {
        let n = data.len();
        let (s1, s2) = (&s1[..n], &s2[..n]);
        let stacked = {
            let x = Tensor64::from_vec(&[n], data.clone(), true).unwrap();
            let h = x.attach_grad_hook(s1).unwrap().attach_grad_hook(s2).unwrap();
            h.mul(&h).unwrap().sum_all().backward().unwrap();
            x.grad().unwrap()
        };
        let fused = {
            let prod: Vec<f64> = s1.iter().zip(s2).map(|(a, b)| a * b).collect();
            let x = Tensor64::from_vec(&[n], data.clone(), true).unwrap();
            let h = x.attach_grad_hook(&prod).unwrap();
            h.mul(&h).unwrap().sum_all().backward().unwrap();
            x.grad().unwrap()
        };
        for i in 0..n {
            prop_assert!((stacked[i] - fused[i]).abs() <= 1e-12 * fused[i].abs().max(1.0));
        }
    }

    #[test]
    fn broadcast_forward_agrees_with_explicit_expansion(
        rows in 1usize..4,
        cols in 1usize..4,
        vals in prop::collection::vec(-2.0f64..2.0, 16),
        bias in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let m: Vec<f64> = vals[..rows * cols].to_vec();
        let b: Vec<f64> = bias[..cols].to_vec();
        let mt = Tensor64::from_vec(&[rows, cols], m.clone(), false).unwrap();
        let bt = Tensor64::from_vec(&[cols], b.clone(), false).unwrap();
        let y = mt.add(&bt).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(y.data()[r * cols + c], m[r * cols + c] + b[c]);
            }
        }
    }
}

#[test]
fn identical_seed_and_op_sequence_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor64::randn(&[8, 8], 1.0, &mut rng, true);
        let w = Tensor64::randn(&[8, 8], 0.5, &mut rng, true);
        let y = x
            .matmul(&w)
            .unwrap()
            .gelu()
            .dropout(0.4, true, &mut rng)
            .unwrap()
            .mean_all();
        y.backward().unwrap();
        (y.item(), x.grad().unwrap(), w.grad().unwrap())
    };
    let (v1, gx1, gw1) = run();
    let (v2, gx2, gw2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn detach_cuts_the_graph() {
    let x = Tensor64::from_vec(&[2], vec![1.0, 2.0], true).unwrap();
    let y = x.mul(&x).unwrap().detach();
    assert!(!y.requires_grad());
    assert_eq!(y.to_vec(), vec![1.0, 4.0]);
}
