mod common;

use common::{max_abs, rng, uniform};
use eqscan::group::{independent_linear_param_count, EqLinearWeights};
use eqscan::harness::{equivariance_report, synth_shapes, IdentityModel, Level};
use eqscan::network::{eq_vss_block, Model, ModelSpec, Stage};
use eqscan::tensor::{rotate_and_cycle, rotate_spatial, Tensor};

fn small_spec() -> ModelSpec {
    ModelSpec {
        stages: vec![
            Stage {
                depth: 1,
                channels: 8,
            },
            Stage {
                depth: 1,
                channels: 16,
            },
        ],
        hidden_state: 4,
        num_classes: 4,
        seed: 0,
        ..ModelSpec::micro()
    }
}

fn images(seed: u64, n: usize, c: usize) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| uniform(&mut r, &[16, 16, c], 1.0)).collect()
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f64>::build(&small_spec()).unwrap();
    let b = Model::<f64>::build(&small_spec()).unwrap();
    assert!(a.params().bit_eq(b.params()));
    let c = Model::<f64>::build(&ModelSpec {
        seed: 1,
        ..small_spec()
    })
    .unwrap();
    assert!(!a.params().bit_eq(c.params()));
}

#[test]
fn group_and_baseline_share_topology() {
    let eq = Model::<f64>::build(&small_spec()).unwrap().topology(16, 16).unwrap();
    let base = Model::<f64>::build(&small_spec().baseline())
        .unwrap()
        .topology(16, 16)
        .unwrap();
    assert_eq!(eq.len(), base.len());
    for (a, b) in eq.iter().zip(&base) {
        assert_eq!((&a.name, a.height, a.width), (&b.name, b.height, b.width));
    }
}

#[test]
fn features_have_group_axis() {
    let m = Model::<f64>::build(&small_spec()).unwrap();
    assert_eq!(m.features(&images(0, 1, 3)[0]).unwrap().dims(), [4, 4, 16, 4]);
}

#[test]
fn block_commutes_over_weight_draws() {
    for draw in 0..5 {
        let spec = ModelSpec {
            seed: draw,
            ..small_spec()
        };
        let m = Model::<f64>::build(&spec).unwrap();
        let m32 = m.cast::<f32>();
        let mut r = rng(50 + draw);
        for _ in 0..10 {
            let x = uniform::<f64>(&mut r, &[4, 4, 8, 4], 1.0);
            let y = eq_vss_block(&x, m.params(), "s0.b0", spec.dw_kernel).unwrap();
            let x32 = x.cast::<f32>();
            let y32 = eq_vss_block(&x32, m32.params(), "s0.b0", spec.dw_kernel).unwrap();
            for t in 0..4 {
                let lhs = eq_vss_block(&rotate_and_cycle(&x, t).unwrap(), m.params(), "s0.b0", 3)
                    .unwrap();
                assert!(common::sq_rel(&lhs, &rotate_and_cycle(&y, t).unwrap()) < 1e-24);
                let lhs = eq_vss_block(&rotate_and_cycle(&x32, t).unwrap(), m32.params(), "s0.b0", 3)
                    .unwrap();
                assert!(common::sq_rel(&lhs, &rotate_and_cycle(&y32, t).unwrap()) < 1e-10);
            }
        }
    }
}

#[test]
fn logits_are_invariant_in_f32() {
    let m = Model::<f64>::build(&small_spec()).unwrap().cast::<f32>();
    for img in images(1, 4, 3) {
        let img = img.cast::<f32>();
        let z = m.logits(&img).unwrap();
        for t in 1..4 {
            let zt = m.logits(&rotate_spatial(&img, t).unwrap()).unwrap();
            assert!(max_abs(&zt, &z) < 1e-5);
        }
    }
}

#[test]
fn baseline_logits_move_under_rotation() {
    let m = Model::<f64>::build(&small_spec().baseline()).unwrap();
    let img = &images(2, 1, 3)[0];
    let z = m.logits(img).unwrap();
    let worst = (1..4)
        .map(|t| max_abs(&m.logits(&rotate_spatial(img, t).unwrap()).unwrap(), &z))
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn predictions_are_stable_under_rotation() {
    let m = Model::<f64>::build(&small_spec()).unwrap();
    for img in images(3, 6, 3) {
        let p = m.predict(&img).unwrap();
        for t in 1..4 {
            assert_eq!(m.predict(&rotate_spatial(&img, t).unwrap()).unwrap(), p);
        }
    }
}

#[test]
fn zero_image_with_zero_biases_returns_head_bias() {
    let mut m = Model::<f64>::build(&small_spec()).unwrap();
    let names: Vec<String> = m.params().names().to_vec();
    for n in names.iter().filter(|n| n.ends_with(".b")) {
        m.params_mut().get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let bias = [0.3, -1.0, 2.5, 0.0];
    m.params_mut().get_mut("head.b").unwrap().data_mut().copy_from_slice(&bias);
    let z = m.logits(&Tensor::zeros(&[16, 16, 3]).unwrap()).unwrap();
    assert_eq!(z.data(), bias);
}

#[test]
fn invariant_loss_gradients_agree_under_rotation() {
    let m = Model::<f64>::build(&ModelSpec::micro()).unwrap();
    let img = &images(4, 1, 3)[0];
    let (_, g0) = m.loss_and_grad(img, 2).unwrap();
    for t in 1..4 {
        let (_, gt) = m.loss_and_grad(&rotate_spatial(img, t).unwrap(), 2).unwrap();
        for (a, b) in g0.iter().zip(&gt) {
            assert!(max_abs(a, b) < 1e-10);
        }
    }
}

#[test]
fn parameter_count_examples() {
    let w = EqLinearWeights::<f64>::zeros(3, 5).unwrap();
    assert_eq!(w.param_count(), 65);
    assert_eq!(independent_linear_param_count(3, 5), 260);
    assert_eq!(w.param_count() as f64 / 260.0, 0.25);
}

#[test]
fn report_levels_on_micro_models() {
    let data = synth_shapes(0, 4, 4).unwrap();
    let spec = ModelSpec {
        in_channels: 1,
        ..ModelSpec::micro()
    };
    let eq = Model::<f64>::build(&spec).unwrap();
    let base = Model::<f64>::build(&spec.baseline()).unwrap();
    for level in [Level::Feature, Level::Logits] {
        let r = equivariance_report(&eq, &data, level, false).unwrap();
        assert!(r.mean < 1e-12, "{level:?}: {}", r.mean);
        assert_eq!(r.per_rotation.len(), 3);
    }
    let r = equivariance_report(&base, &data, Level::Feature, false).unwrap();
    assert!(r.mean > 1e-2, "{}", r.mean);
    let id = equivariance_report::<f64, _>(&IdentityModel, &data, Level::Feature, true).unwrap();
    assert!(id.per_rotation.iter().all(|p| p.nmse == 0.0));
}

#[test]
fn reports_replay_bit_exact() {
    let data = synth_shapes(5, 3, 4).unwrap();
    let m = Model::<f64>::build(&ModelSpec {
        in_channels: 1,
        ..small_spec()
    })
    .unwrap();
    let a = equivariance_report(&m, &data, Level::Feature, false).unwrap();
    let b = equivariance_report(&m, &data, Level::Feature, false).unwrap();
    for (x, y) in a.per_rotation.iter().zip(&b.per_rotation) {
        assert_eq!(x.nmse.to_bits(), y.nmse.to_bits());
    }
}

#[test]
fn shipped_specs_parse() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../specs");
    assert_eq!(ModelSpec::load(format!("{dir}/micro.spec")).unwrap(), ModelSpec::micro());
    assert_eq!(
        ModelSpec::load(format!("{dir}/micro-baseline.spec")).unwrap(),
        ModelSpec::micro().baseline()
    );
    let g = ModelSpec::load(format!("{dir}/glyphs.spec")).unwrap();
    assert_eq!((g.in_channels, g.stages.len()), (1, 2));
}
