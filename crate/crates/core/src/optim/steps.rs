//! Per-layer update rules.
//!
//! Every function here updates one layer in place given its gradient and the
//! learning rate `lr_t` for the current step. The global timestep `t` must
//! already have been incremented for the step (Adam bias correction uses it).
//!
//! The SGD momentum buffer is the damped form `m ← βm + (1 − β)g`, not the
//! classical `m ← βm + g`.

use crate::error::{Error, Result};
use crate::params::LayerParams;
use crate::penalty::rollback_coefficient;

use super::{HyperParams, LayerState};

fn check(layer: &LayerParams, state: &LayerState, grad: &[f64]) -> Result<()> {
    if grad.len() != layer.values.len() {
        return Err(Error::shape(
            format!("gradient of layer `{}`", layer.name),
            layer.values.len(),
            grad.len(),
        ));
    }
    if state.m.len() != layer.values.len() {
        return Err(Error::shape(
            format!("optimizer state of layer `{}`", layer.name),
            layer.values.len(),
            state.m.len(),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of layer `{}`", layer.name)));
    }
    Ok(())
}

fn update_momentum(state: &mut LayerState, grad: &[f64], beta: f64) {
    for (m, g) in state.m.iter_mut().zip(grad) {
        *m = beta * *m + (1.0 - beta) * g;
    }
}

/// Updates both Adam moments and writes the bias-corrected direction
/// `m̂ / (√v̂ + ε)` into `direction`.
fn adam_direction(
    hyper: &HyperParams,
    t: u64,
    state: &mut LayerState,
    grad: &[f64],
    direction: &mut Vec<f64>,
) {
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(exp);
    let c2 = 1.0 - b2.powi(exp);
    direction.clear();
    for ((m, v), g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        direction.push(m_hat / (v_hat.sqrt() + hyper.epsilon));
    }
}

/// Rollback-aware application of a processed step `u = lr_t · direction`.
///
/// `θ ← θ − ρd − (1 − ρ)u`, `d ← (1 − ρ)(d − u)`. At `ρ = 1` the layer lands
/// on its anchor with `d = 0`.
fn apply_rollback(
    layer: &mut LayerParams,
    state: &mut LayerState,
    direction: impl Iterator<Item = f64>,
    lr_t: f64,
    rho: f64,
) {
    if rho == 1.0 {
        let anchor = layer.pretrained.as_ref().expect("checked by caller");
        layer.values.copy_from_slice(anchor);
        state.d.iter_mut().for_each(|d| *d = 0.0);
        return;
    }
    let keep = 1.0 - rho;
    for ((theta, d), dir) in layer.values.iter_mut().zip(state.d.iter_mut()).zip(direction) {
        let u = lr_t * dir;
        if rho == 0.0 {
            *theta -= u;
            *d -= u;
        } else {
            *theta = *theta - rho * *d - keep * u;
            *d = keep * (*d - u);
        }
    }
}

fn rollback_for(layer: &LayerParams, lr_t: f64, stored_lambda: f64, t: u64) -> Result<f64> {
    let rho = rollback_coefficient(lr_t, stored_lambda, t, &layer.name)?;
    if rho > 0.0 && layer.pretrained.is_none() {
        return Err(Error::MissingPretrained(layer.name.clone()));
    }
    Ok(rho)
}

/// Largest deviation between the tracked discrepancy and `θ − θ₀`, measured
/// relative to the magnitude of the operands.
pub fn discrepancy_error(layer: &LayerParams, state: &LayerState) -> f64 {
    let Some(anchor) = &layer.pretrained else {
        return 0.0;
    };
    layer
        .values
        .iter()
        .zip(anchor)
        .zip(&state.d)
        .map(|((theta, a), d)| {
            let scale = theta.abs().max(a.abs()).max(d.abs()).max(f64::MIN_POSITIVE);
            (d - (theta - a)).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// Tolerance on [`discrepancy_error`] for the rollback steps.
pub const DISCREPANCY_TOLERANCE: f64 = 1e-10;

pub fn sgd_momentum_step(
    hyper: &HyperParams,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
) -> Result<()> {
    check(layer, state, grad)?;
    update_momentum(state, grad, hyper.momentum);
    for (theta, m) in layer.values.iter_mut().zip(&state.m) {
        *theta -= lr_t * m;
    }
    Ok(())
}

pub fn olor_sgd_step(
    hyper: &HyperParams,
    t: u64,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
    stored_lambda: f64,
) -> Result<f64> {
    check(layer, state, grad)?;
    let rho = rollback_for(layer, lr_t, stored_lambda, t)?;
    update_momentum(state, grad, hyper.momentum);
    let momentum = std::mem::take(&mut state.m);
    apply_rollback(layer, state, momentum.iter().copied(), lr_t, rho);
    state.m = momentum;
    debug_assert!(discrepancy_error(layer, state) <= DISCREPANCY_TOLERANCE);
    Ok(rho)
}

pub fn adam_step(
    hyper: &HyperParams,
    t: u64,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
) -> Result<()> {
    check(layer, state, grad)?;
    let mut direction = Vec::with_capacity(grad.len());
    adam_direction(hyper, t, state, grad, &mut direction);
    for (theta, dir) in layer.values.iter_mut().zip(&direction) {
        *theta -= lr_t * dir;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn olor_adam_step(
    hyper: &HyperParams,
    t: u64,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
    stored_lambda: f64,
) -> Result<f64> {
    check(layer, state, grad)?;
    let rho = rollback_for(layer, lr_t, stored_lambda, t)?;
    let mut direction = Vec::with_capacity(grad.len());
    adam_direction(hyper, t, state, grad, &mut direction);
    apply_rollback(layer, state, direction.into_iter(), lr_t, rho);
    debug_assert!(discrepancy_error(layer, state) <= DISCREPANCY_TOLERANCE);
    Ok(rho)
}

/// Coupled weight decay on (damped-momentum) SGD: `θ ← (1 − λ)θ − lr_t·m`.
/// With `β = 0` this is exactly `θ ← (1 − λ)θ − lr_t·g`.
pub fn weight_decay_step(
    hyper: &HyperParams,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
    lambda_wd: f64,
) -> Result<()> {
    check(layer, state, grad)?;
    update_momentum(state, grad, hyper.momentum);
    let keep = 1.0 - lambda_wd;
    for (theta, m) in layer.values.iter_mut().zip(&state.m) {
        *theta = keep * *theta - lr_t * m;
    }
    Ok(())
}

/// L2-SP baseline: `θ ← θ − lr_t·(ĝ + α(θ − θ₀))` where `ĝ` is the host
/// optimizer's processed gradient (damped momentum for SGD, bias-corrected
/// `m̂/(√v̂+ε)` for Adam).
#[allow(clippy::too_many_arguments)]
pub fn l2sp_step(
    hyper: &HyperParams,
    host: super::HostOptimizer,
    t: u64,
    state: &mut LayerState,
    layer: &mut LayerParams,
    grad: &[f64],
    lr_t: f64,
    alpha: f64,
) -> Result<()> {
    check(layer, state, grad)?;
    let anchor = layer
        .pretrained
        .as_ref()
        .ok_or_else(|| Error::MissingPretrained(layer.name.clone()))?;
    let mut direction = Vec::with_capacity(grad.len());
    match host {
        super::HostOptimizer::Sgd => {
            update_momentum(state, grad, hyper.momentum);
            direction.extend_from_slice(&state.m);
        }
        super::HostOptimizer::Adam => adam_direction(hyper, t, state, grad, &mut direction),
    }
    for ((theta, a), dir) in layer.values.iter_mut().zip(anchor).zip(&direction) {
        *theta -= lr_t * (dir + alpha * (*theta - a));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(momentum: f64) -> HyperParams {
        HyperParams {
            momentum,
            ..HyperParams::default()
        }
    }

    fn scalar(theta: f64, anchor: Option<f64>) -> (LayerParams, LayerState) {
        let mut l = LayerParams::new("w", 0, vec![theta]);
        l.pretrained = anchor.map(|a| vec![a]);
        (l, LayerState::zeros(1))
    }

    #[test]
    fn plain_sgd_step() {
        let (mut l, mut s) = scalar(1.0, None);
        sgd_momentum_step(&hyper(0.0), &mut s, &mut l, &[0.5], 0.1).unwrap();
        assert!((l.values[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn damped_momentum_first_step() {
        let (mut l, mut s) = scalar(1.0, None);
        sgd_momentum_step(&hyper(0.9), &mut s, &mut l, &[0.5], 0.1).unwrap();
        assert!((s.m[0] - 0.05).abs() < 1e-15);
        assert!((l.values[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_coasts_on_momentum() {
        let (mut l, mut s) = scalar(1.0, None);
        s.m[0] = 0.2;
        sgd_momentum_step(&hyper(0.9), &mut s, &mut l, &[0.0], 0.1).unwrap();
        assert!((l.values[0] - (1.0 - 0.1 * 0.9 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn olor_sgd_scalar_trace() {
        // m = 0.1*0.5 = 0.05; θ = 1 - 0.1*0 - 0.9*0.1*0.05 = 0.9955; d = 0.9*(0 - 0.005)
        let (mut l, mut s) = scalar(1.0, Some(1.0));
        let rho = olor_sgd_step(&hyper(0.9), 1, &mut s, &mut l, &[0.5], 0.1, 1.0).unwrap();
        assert!((rho - 0.1).abs() < 1e-16);
        assert!((s.m[0] - 0.05).abs() < 1e-15);
        assert!((l.values[0] - 0.9955).abs() < 1e-15);
        assert!((s.d[0] + 0.0045).abs() < 1e-15);
        assert!((s.d[0] - (l.values[0] - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn olor_full_rollback_lands_on_anchor() {
        let (mut l, mut s) = scalar(2.0, Some(1.0));
        s.d[0] = 1.0;
        olor_sgd_step(&hyper(0.9), 1, &mut s, &mut l, &[3.0], 0.5, 2.0).unwrap();
        assert_eq!(l.values[0], 1.0);
        assert_eq!(s.d[0], 0.0);
    }

    #[test]
    fn rollback_needs_an_anchor() {
        let (mut l, mut s) = scalar(2.0, None);
        assert!(matches!(
            olor_sgd_step(&hyper(0.9), 1, &mut s, &mut l, &[3.0], 0.1, 1.0),
            Err(Error::MissingPretrained(_))
        ));
        // λ = 0 does not touch the anchor.
        olor_sgd_step(&hyper(0.9), 1, &mut s, &mut l, &[3.0], 0.1, 0.0).unwrap();
    }

    #[test]
    fn rho_above_one_is_rejected() {
        let (mut l, mut s) = scalar(2.0, Some(1.0));
        match olor_adam_step(&HyperParams::default(), 7, &mut s, &mut l, &[1.0], 0.2, 10.0) {
            Err(Error::ScheduleIncompatible { step: 7, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let h = HyperParams::default();
        for g in [1.0, 1e-3, -250.0] {
            let (mut l, mut s) = scalar(0.0, None);
            adam_step(&h, 1, &mut s, &mut l, &[g], 0.1).unwrap();
            let expected = -g.signum() * 0.1 / (1.0 + h.epsilon / g.abs());
            assert!((l.values[0] - expected).abs() < 1e-15, "g={g}: {}", l.values[0]);
        }
        let (mut l, mut s) = scalar(0.0, None);
        adam_step(&h, 1, &mut s, &mut l, &[0.0], 0.1).unwrap();
        assert_eq!(l.values[0], 0.0);
    }

    #[test]
    fn olor_adam_scalar_trace() {
        let h = HyperParams::default();
        let (mut l, mut s) = scalar(1.0, Some(1.0));
        olor_adam_step(&h, 1, &mut s, &mut l, &[1.0], 0.1, 1.0).unwrap();
        let u = 0.1 / (1.0 + h.epsilon);
        assert!((l.values[0] - (1.0 - 0.9 * u)).abs() < 1e-15);
        assert!((s.d[0] + 0.9 * u).abs() < 1e-15);
        assert!((l.values[0] - 0.91).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_cases() {
        let h = hyper(0.0);
        let (mut l, mut s) = scalar(1.0, None);
        weight_decay_step(&h, &mut s, &mut l, &[0.5], 0.1, 0.0).unwrap();
        assert_eq!(l.values[0], 1.0 - 0.1 * 0.5);

        let (mut l, mut s) = scalar(123.0, None);
        weight_decay_step(&h, &mut s, &mut l, &[0.5], 0.1, 1.0).unwrap();
        assert_eq!(l.values[0], -0.1 * 0.5);

        // θ = 1, lr·g = 0.99, λ = 0.1: decayed result -0.09 sits farther
        // from 0 than the undecayed 0.01.
        let (mut l, mut s) = scalar(1.0, None);
        weight_decay_step(&h, &mut s, &mut l, &[0.99], 1.0, 0.1).unwrap();
        assert!((l.values[0] + 0.09).abs() < 1e-15);
        assert!(l.values[0].powi(2) > 0.01f64.powi(2));
    }

    #[test]
    fn l2sp_pulls_toward_anchor() {
        let h = hyper(0.0);
        let (mut l, mut s) = scalar(2.0, Some(1.0));
        l2sp_step(&h, super::super::HostOptimizer::Sgd, 1, &mut s, &mut l, &[0.0], 0.1, 0.1).unwrap();
        assert!((l.values[0] - 1.99).abs() < 1e-15);

        let (mut l, mut s) = scalar(1.0, Some(1.0));
        l2sp_step(&h, super::super::HostOptimizer::Sgd, 1, &mut s, &mut l, &[0.5], 0.1, 0.3).unwrap();
        let (mut r, mut rs) = scalar(1.0, None);
        sgd_momentum_step(&h, &mut rs, &mut r, &[0.5], 0.1).unwrap();
        assert_eq!(l.values, r.values);
    }

    #[test]
    fn length_and_finiteness_checked() {
        let (mut l, mut s) = scalar(1.0, None);
        assert!(matches!(
            sgd_momentum_step(&hyper(0.0), &mut s, &mut l, &[1.0, 2.0], 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            adam_step(&HyperParams::default(), 1, &mut s, &mut l, &[f64::NAN], 0.1),
            Err(Error::NonFinite(_))
        ));
    }
}
