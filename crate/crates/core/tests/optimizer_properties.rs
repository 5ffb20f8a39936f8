use olor_core::optim::{olor_adam_step, olor_sgd_step, Optimizer};
use olor_core::{
    Batch, Error, HostOptimizer, HyperParams, LayerParams, LayerState, LrSchedule, Method, MlpSpec, ModelParams,
    PenaltyConfig, ScheduleKind, Targets,
};
use proptest::prelude::*;

fn anchored(values: Vec<f64>) -> LayerParams {
    let mut layer = LayerParams::new("w", 0, values);
    layer.pretrained = Some(layer.values.clone());
    layer
}

fn fixed_batch(spec: &MlpSpec) -> (Batch, Targets) {
    let rows = 12;
    let inputs = (0..rows * spec.inputs())
        .map(|i| ((i * 37 % 23) as f64 / 11.5) - 1.0)
        .collect();
    let labels = (0..rows).map(|r| r % spec.outputs()).collect();
    (Batch::new(inputs, rows, spec.inputs()).unwrap(), Targets::Classes(labels))
}

fn pretrained_model(spec: &MlpSpec, seed: u64) -> ModelParams {
    let mut params = spec.init(seed).unwrap();
    params.snapshot_as_pretrained();
    params
}

/// Trains `steps` steps of `method` on a fixed batch under a cosine schedule.
fn train(method: Method, host: HostOptimizer, iota1: f64, steps: u64) -> (ModelParams, Optimizer) {
    let spec = MlpSpec {
        layer_sizes: vec![3, 8, 8, 3],
        ..MlpSpec::new(vec![3, 8, 8, 3], olor_core::Activation::Tanh, olor_core::Loss::SoftmaxCrossEntropy).unwrap()
    };
    let mut params = pretrained_model(&spec, 11);
    let hyper = HyperParams {
        host,
        base_lr: 0.05,
        ..HyperParams::default()
    };
    let penalty = PenaltyConfig::new(iota1, 0.0, 1.0, spec.depth(), hyper.base_lr).unwrap();
    let mut opt = Optimizer::new(method, hyper, penalty, &params).unwrap();
    let schedule = LrSchedule::new(ScheduleKind::Cosine, hyper.base_lr, steps, 0.0).unwrap();
    let (batch, targets) = fixed_batch(&spec);
    for t in 1..=steps {
        let (_, mut grads) = spec.loss_and_grads(&params, &batch, &targets).unwrap();
        opt.step(&mut params, &mut grads, schedule.lr_at(t).unwrap()).unwrap();
    }
    (params, opt)
}

#[test]
fn tracked_discrepancy_matches_weights_over_training() {
    for (method, host) in [(Method::OlorSgd, HostOptimizer::Sgd), (Method::OlorAdam, HostOptimizer::Adam)] {
        let (params, opt) = train(method, host, 0.2, 60);
        assert!(opt.state.audit(&params) <= 1e-10, "{method}");
        assert!(params.anchored_discrepancy_norm() > 0.0);
    }
}

#[test]
fn zero_rollback_reproduces_full_bit_for_bit() {
    for (method, host) in [(Method::OlorSgd, HostOptimizer::Sgd), (Method::OlorAdam, HostOptimizer::Adam)] {
        let (olor, _) = train(method, host, 0.0, 40);
        let (full, _) = train(Method::Full, host, 0.0, 40);
        for (a, b) in olor.layers.iter().zip(&full.layers) {
            assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn rollback_shrinks_drift_relative_to_full() {
    let (olor, _) = train(Method::OlorAdam, HostOptimizer::Adam, 0.3, 60);
    let (full, _) = train(Method::Full, HostOptimizer::Adam, 0.0, 60);
    assert!(olor.anchored_discrepancy_norm() < full.anchored_discrepancy_norm());
}

#[test]
fn linear_method_freezes_anchored_layers() {
    let (params, _) = train(Method::Linear, HostOptimizer::Adam, 0.0, 20);
    for layer in &params.layers {
        assert_eq!(layer.discrepancy().unwrap(), 0.0, "{}", layer.name);
    }
}

#[test]
fn penalty_decays_with_depth_in_optimizer() {
    let (_, opt) = train(Method::OlorSgd, HostOptimizer::Sgd, 0.5, 1);
    let stored = opt.stored_lambda();
    // Weight and bias share a depth; deeper layers get smaller penalties and
    // the layer at depth n gets none.
    assert_eq!(stored[0], stored[1]);
    assert!(stored[0] > stored[2] && stored[2] > stored[4]);
    assert_eq!(stored[4], 0.0);
    assert!((stored[0] * 0.05 - 0.5).abs() < 1e-15);
}

#[test]
fn rate_above_base_with_full_level_is_rejected() {
    let mut layer = anchored(vec![1.0, 2.0]);
    let mut state = LayerState::zeros(2);
    let hyper = HyperParams::default();
    let err = olor_sgd_step(&hyper, 1, &mut state, &mut layer, &[0.1, 0.1], 0.2, 1.0 / 0.1).unwrap_err();
    assert!(matches!(err, Error::ScheduleIncompatible { step: 1, .. }));
    // Nothing moved.
    assert_eq!(layer.values, vec![1.0, 2.0]);
}

#[test]
fn rollback_without_anchor_is_rejected() {
    let mut layer = LayerParams::new("head", 0, vec![0.5]);
    let mut state = LayerState::zeros(1);
    let err = olor_adam_step(&HyperParams::default(), 1, &mut state, &mut layer, &[1.0], 0.1, 1.0).unwrap_err();
    assert!(matches!(err, Error::MissingPretrained(name) if name == "head"));
    // Zero rollback on an unanchored layer is plain Adam.
    olor_adam_step(&HyperParams::default(), 1, &mut state, &mut layer, &[1.0], 0.1, 0.0).unwrap();
}

#[test]
fn non_finite_gradient_is_rejected() {
    let mut layer = anchored(vec![1.0]);
    let mut state = LayerState::zeros(1);
    let err = olor_sgd_step(&HyperParams::default(), 1, &mut state, &mut layer, &[f64::NAN], 0.1, 0.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn adam_identity_holds_for_random_streams(
        theta0 in prop::collection::vec(-3.0f64..3.0, 1..32),
        grads in prop::collection::vec(-5.0f64..5.0, 1..64),
        rho in 0.0f64..=1.0,
        lr in 1e-4f64..1e-1,
    ) {
        let dim = theta0.len();
        let mut layer = anchored(theta0);
        let mut state = LayerState::zeros(dim);
        let hyper = HyperParams::default();
        for (t, g) in grads.iter().enumerate() {
            let grad: Vec<f64> = (0..dim).map(|j| g * (j as f64 + 1.0).sin()).collect();
            olor_adam_step(&hyper, t as u64 + 1, &mut state, &mut layer, &grad, lr, rho / lr).unwrap();
            prop_assert!(olor_core::optim::discrepancy_error(&layer, &state) <= 1e-10);
        }
    }

    #[test]
    fn sgd_single_step_matches_closed_form(
        theta0 in -2.0f64..2.0,
        drift in -1.0f64..1.0,
        g in -2.0f64..2.0,
        lr in 1e-4f64..1.0,
        rho in 0.0f64..1.0,
    ) {
        let theta = theta0 + drift;
        let mut layer = anchored(vec![theta0]);
        layer.values[0] = theta;
        let mut state = LayerState::zeros(1);
        state.d[0] = theta - theta0;
        let hyper = HyperParams { momentum: 0.0, ..HyperParams::default() };
        let applied = olor_sgd_step(&hyper, 1, &mut state, &mut layer, &[g], lr, rho / lr).unwrap();
        let expected = (1.0 - applied) * (theta - lr * g) + applied * theta0;
        let scale = expected.abs().max(theta.abs()).max(theta0.abs()).max((lr * g).abs());
        prop_assert!((layer.values[0] - expected).abs() <= 1e-12 * scale);
    }
}
