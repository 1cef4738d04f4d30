mod common;

use common::{check_op, op_cases, rng, NetInstance, TOLERANCE};
use disem::agent::Scheme;
use disem::autodiff::{Tape, Tensor};
use disem::Quantizer;

#[test]
fn every_op_matches_finite_differences() {
    let mut r = rng(11);
    for case in op_cases() {
        let worst = (0..100).map(|_| check_op(&case, &mut r)).fold(0.0, f64::max);
        assert!(worst < TOLERANCE, "{}: max relative error {worst:e}", case.name);
    }
}

#[test]
fn composed_net_matches_finite_differences() {
    let mut r = rng(12);
    for (scheme, share) in [
        (Scheme::Ic3netLike, true),
        (Scheme::Ic3netLike, false),
        (Scheme::TarmacLike, true),
        (Scheme::TarmacLike, false),
    ] {
        for _ in 0..10 {
            let worst = NetInstance::random(scheme, share, &mut r).check();
            assert!(worst < TOLERANCE, "{scheme:?} shared={share}: {worst:e}");
        }
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let q = Quantizer::new(0.25).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![-0.9, 0.1, 0.6]));
    let y = tape.straight_through(x, &q).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 0.0, 0.5]);
    let w = tape.leaf(Tensor::row(vec![2.0, -1.0, 0.5]));
    let p = tape.mul(y, w).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0, 0.5]);
}

#[test]
fn injected_gradient_adds_to_upstream() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![0.3, -0.2]));
    let m = tape.squash(x);
    let l = tape.sum(m);
    tape.inject_gradient(m, &[1.0, -2.0]).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    for (k, &xv) in [0.3f64, -0.2].iter().enumerate() {
        let d = 1.0 - xv.tanh().powi(2);
        let up = [1.0, -2.0][k] + 1.0;
        assert!((g[k] - up * d).abs() < 1e-15);
    }
}
