mod common;

use common::{composed_instances, primitive_cases, uniform};
use gradsuggest::autodiff::{grad_check, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..10 {
        for c in primitive_cases(seed) {
            let err = grad_check(&c.f, &c.x, c.h).unwrap();
            assert!(err < c.tolerance(), "{} seed {seed}: {err:e}", c.name);
        }
    }
}

#[test]
fn composed_losses_match_central_differences() {
    let (cases, _) = composed_instances(5);
    for c in cases {
        let err = grad_check(&c.f, &c.x, c.h).unwrap();
        assert!(err < c.tolerance(), "{}: {err:e}", c.name);
    }
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    assert!(grad_check(|t: &mut Tape, v| t.exp(v), &x, 1e-5).is_err());
    assert!(grad_check(|t: &mut Tape, v| t.sum(v), &x, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// grad(a f + b g) = a grad f + b grad g on a shared leaf.
    #[test]
    fn backward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = common::rng(seed);
        let x = uniform(&mut r, &[2, 1, 4, 4], -1.0, 1.0);
        let w = uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
        let grad_of = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let c = t.conv2d(xv, wv, 1, 1).unwrap();
            let s = t.sigmoid(c).unwrap();
            let f = t.mean(s).unwrap();
            let sq = t.square(xv).unwrap();
            let g = t.sum(sq).unwrap();
            let fa = t.scale(f, ca).unwrap();
            let gb = t.scale(g, cb).unwrap();
            let total = t.add(fa, gb).unwrap();
            t.backward(total).unwrap().wrt(&t, xv).unwrap()
        };
        let (gf, gg, combined) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
        for i in 0..combined.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-10, "{} vs {}", combined.data()[i], expect);
        }
    }
}
