mod common;

use common::{integers, rng};
use eqscan::autodiff::Tape;
use eqscan::scan::{
    cross_scan_baseline, eq_cross_merge, eq_cross_scan, record_eq_scan, ScanSequence,
};
use eqscan::tensor::{cycle_group, rotate_and_cycle, rotate_spatial, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_dims(r: &mut impl Rng) -> [usize; 4] {
    let s = r.gen_range(1..=8);
    [s, s, r.gen_range(1..=4), 4]
}

#[test]
fn scan_property_on_hundred_maps() {
    let mut r = rng(0);
    for n in 0..100 {
        let dims = if n < 20 { [5, 5, 3, 4] } else { random_dims(&mut r) };
        let x = integers(&mut r, &dims);
        let s = eq_cross_scan(&x).unwrap();
        for t in 0..4 {
            let lhs = eq_cross_scan(&rotate_and_cycle(&x, t).unwrap()).unwrap();
            assert!(
                lhs.tensor.bit_eq(&cycle_group(&s.tensor, t).unwrap()),
                "map {n} dims {dims:?} t={t}"
            );
        }
    }
}

#[test]
fn merge_property_on_hundred_sequences() {
    let mut r = rng(1);
    for n in 0..100 {
        let dims = random_dims(&mut r);
        let seq = ScanSequence {
            tensor: integers(&mut r, &[dims[0] * dims[1], dims[2], 4]),
            origin: dims.to_vec(),
        };
        let y = eq_cross_merge(&seq).unwrap();
        for t in 0..4 {
            let shifted = ScanSequence {
                tensor: cycle_group(&seq.tensor, t).unwrap(),
                origin: dims.to_vec(),
            };
            let lhs = eq_cross_merge(&shifted).unwrap();
            assert!(lhs.bit_eq(&rotate_and_cycle(&y, t).unwrap()), "seq {n} t={t}");
        }
    }
}

#[test]
fn merge_inverts_scan() {
    let mut r = rng(2);
    for _ in 0..20 {
        let dims = random_dims(&mut r);
        let x = integers(&mut r, &dims);
        assert!(eq_cross_merge(&eq_cross_scan(&x).unwrap()).unwrap().bit_eq(&x));
    }
}

#[test]
fn baseline_scan_fails_the_scan_property() {
    let mut r = rng(3);
    let x = integers(&mut r, &[4, 4, 2]);
    let s = cross_scan_baseline(&x).unwrap();
    let lhs = cross_scan_baseline(&rotate_spatial(&x, 1).unwrap()).unwrap();
    let mismatch = (0..4)
        .map(|k| lhs.max_abs_diff(&cycle_group(&s, k).unwrap()).unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(mismatch > 0.0);
}

#[test]
fn scan_gradient_is_merge_of_upstream() {
    let mut r = rng(4);
    let x = integers(&mut r, &[3, 3, 2, 4]);
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let seq = record_eq_scan(&mut tape, xv).unwrap();
    let up = integers(&mut r, tape.dims(seq));
    let g = tape.backward(seq, &up).unwrap();
    let expect = eq_cross_merge(&ScanSequence {
        tensor: up,
        origin: x.dims().to_vec(),
    })
    .unwrap();
    assert!(g.get(xv).unwrap().bit_eq(&expect));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scan_property_for_rectangular_maps(
        seed in any::<u64>(),
        h in 1usize..7,
        w in 1usize..7,
        c in 1usize..4,
        t in 0usize..4,
    ) {
        let mut r = rng(seed);
        let x: Tensor<f64> = integers(&mut r, &[h, w, c, 4]);
        let s = eq_cross_scan(&x).unwrap();
        let lhs = eq_cross_scan(&rotate_and_cycle(&x, t).unwrap()).unwrap();
        prop_assert!(lhs.tensor.bit_eq(&cycle_group(&s.tensor, t).unwrap()));
    }
}
